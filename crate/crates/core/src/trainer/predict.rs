use super::{Checkpoint, Result, TrainError};
use crate::dataio::{BinaryMask, FloatRaster};
use crate::samplekit::{crop_plane, Sample};
use crate::tensornet::{Mode, Tensor, UNet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    /// Pixels with probability `>=` this are foreground.
    pub threshold: f32,
    /// Force pixels outside the ROI channel to background.
    pub roi_clamp: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            roi_clamp: true,
        }
    }
}

/// Probability map and mask in the scan's original dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub prob: FloatRaster,
    pub mask: BinaryMask,
}

/// A checkpoint with its network built once for repeated inference.
#[derive(Debug, Clone)]
pub struct Predictor<'a> {
    cp: &'a Checkpoint,
    net: UNet,
}

impl<'a> Predictor<'a> {
    pub fn new(cp: &'a Checkpoint) -> Result<Self> {
        Ok(Self { cp, net: cp.network()? })
    }

    pub fn predict(&self, sample: &Sample, opts: &PredictOptions) -> Result<Prediction> {
        if sample.reference() != self.cp.reference {
            return Err(TrainError::DimMismatch(format!(
                "sample frame {}x{} vs checkpoint frame {}x{}",
                sample.rows, sample.cols, self.cp.reference.rows, self.cp.reference.cols
            )));
        }
        let x = Tensor::new(&[Sample::CHANNELS, sample.rows, sample.cols], sample.values.clone())?;
        let y = self.net.forward(&self.cp.params, &x, Mode::Eval)?;
        let prob = crop_plane(y.data(), sample.rows, sample.cols, sample.offset, sample.orig_dims)?;
        let roi = sample.roi_support();
        let (rows, cols) = sample.orig_dims;
        let mask = BinaryMask::from_fn(rows, cols, |r, c| {
            prob.data[r * cols + c] >= opts.threshold && (!opts.roi_clamp || roi.get(r, c))
        })?;
        let prob = FloatRaster::new(rows, cols, 1, prob.data)?;
        Ok(Prediction { prob, mask })
    }
}

pub fn predict(cp: &Checkpoint, sample: &Sample, opts: &PredictOptions) -> Result<Prediction> {
    Predictor::new(cp)?.predict(sample, opts)
}
