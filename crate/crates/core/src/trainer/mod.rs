//! Loss, optimizer, training loop, inference and checkpoint files.

mod checkpoint;
mod predict;

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataio::{BinaryMask, DataError};
use crate::rng::SplitMix64;
use crate::samplekit::{ReferenceDims, Sample, SampleError};
use crate::tensornet::{self, build_unet, Gradients, Graph, Mode, NetError, ParamStore, Scalar, Tensor, UNetConfig};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use predict::{predict, PredictOptions, Prediction, Predictor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training samples")]
    EmptyDataset,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("optimizer state does not match parameters: {0}")]
    StateShapeMismatch(String),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint does not match its network config: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint truncated: needed {needed} more bytes, {available} left")]
    TruncatedData { needed: usize, available: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Drives shuffling and dropout masks.
    pub seed: u64,
    pub clamp_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            epochs: 100,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            clamp_eps: 1e-7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return bad("Adam epsilon must be positive");
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return bad("clamp_eps must lie in (0, 0.5)");
        }
        Ok(())
    }
}

/// Mean binary cross-entropy, predictions clamped to `[eps, 1 - eps]`.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, eps: T) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(TrainError::DimMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(tensornet::bce_value(pred.data(), target.data(), eps))
}

/// Adam moments for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: BTreeMap<_, _> = params
            .iter()
            .map(|(k, p)| (k.to_string(), Tensor::zeros(p.value.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update from the accumulated gradients. Gradients
/// are left in place.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &TrainConfig) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TrainError::StateShapeMismatch(format!(
            "{} moments for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64(cfg.learning_rate);
    let eps = T::from_f64(cfg.adam_eps);
    for (name, p) in params.iter_mut() {
        let (Some(m), Some(v)) = (state.m.get_mut(name), state.v.get_mut(name)) else {
            return Err(TrainError::StateShapeMismatch(format!("no moments for {name}")));
        };
        if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(TrainError::StateShapeMismatch(format!("{name}: {:?}", m.shape())));
        }
        let values = p.value.data_mut();
        for (((theta, &g), mi), vi) in values
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// A prepared input with its padded target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// `[2, H, W]`.
    pub input: Tensor<f32>,
    /// `[1, H, W]`, zero outside the original window.
    pub target: Tensor<f32>,
}

impl TrainSample {
    pub fn new(sample: &Sample, mask: &BinaryMask) -> Result<Self> {
        let target = sample.pad_mask(mask)?;
        Ok(Self {
            input: Tensor::new(&[Sample::CHANNELS, sample.rows, sample.cols], sample.values.clone())?,
            target: Tensor::new(&[1, sample.rows, sample.cols], target)?,
        })
    }

    fn dims(&self) -> (usize, usize) {
        let s = self.input.shape();
        (s[1], s[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample loss over the epoch.
    pub loss: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!("epoch={} loss={:.6}", self.epoch, self.loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

fn check_dataset(samples: &[TrainSample], unet: &UNetConfig) -> Result<ReferenceDims> {
    let first = samples.first().ok_or(TrainError::EmptyDataset)?;
    let (rows, cols) = first.dims();
    for (i, s) in samples.iter().enumerate() {
        if s.input.shape() != [unet.input_channels, rows, cols] || s.target.shape() != [1, rows, cols] {
            return Err(TrainError::DimMismatch(format!(
                "sample {i}: input {:?}, target {:?}, expected {}x{rows}x{cols}",
                s.input.shape(),
                s.target.shape(),
                unet.input_channels
            )));
        }
    }
    let m = unet.size_multiple();
    if rows % m != 0 || cols % m != 0 {
        return Err(TrainError::DimMismatch(format!(
            "frame {rows}x{cols} is not divisible by {m}"
        )));
    }
    Ok(ReferenceDims::new(rows, cols))
}

/// Trains from the seeded initialisation. `on_epoch` sees each epoch's
/// record as soon as it is complete.
pub fn train(
    samples: &[TrainSample],
    unet_cfg: &UNetConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let reference = check_dataset(samples, unet_cfg)?;
    let (net, mut params) = build_unet::<f32>(unet_cfg)?;
    let mut state = AdamState::new(&params);
    let eps = cfg.clamp_eps as f32;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut rng = SplitMix64::derived(cfg.seed, epoch as u64);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let jobs: Vec<(usize, u64)> = batch.iter().map(|&i| (i, rng.next_u64())).collect();
            let scale = 1.0 / batch.len() as f32;
            let results: Vec<Result<(f32, Gradients<f32>)>> = jobs
                .par_iter()
                .map(|&(i, seed)| {
                    let s = &samples[i];
                    let mut g = Graph::new();
                    let x = g.input(s.input.clone());
                    let y = net.record(&mut g, &params, x, Mode::Train { seed })?;
                    let loss = g.bce(y, &s.target, eps)?;
                    let value = g.value(loss)?.data()[0];
                    let scaled = g.scale(loss, scale)?;
                    Ok((value, g.param_gradients(scaled)?))
                })
                .collect();
            for r in results {
                let (loss, grads) = r?;
                total += loss as f64;
                params.accumulate(&grads)?;
            }
            adam_step(&mut params, &mut state, cfg)?;
            params.zero_grad();
        }
        let record = EpochRecord {
            epoch,
            loss: total / samples.len() as f64,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(unet_cfg.clone(), reference, params)?,
        history,
    })
}
