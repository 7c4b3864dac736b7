use cystseg::dataio::{gen_phantom, BinaryMask, PhantomSpec};
use cystseg::rng::SplitMix64;
use cystseg::samplekit::{prepare_sample, PrepareParams, ReferenceDims, Sample};
use cystseg::tensornet::{build_unet, ParamStore, Tensor, UNetConfig};
use cystseg::trainer::{
    adam_step, bce_loss, decode_checkpoint, encode_checkpoint, load_checkpoint, predict, save_checkpoint, train,
    AdamState, Checkpoint, PredictOptions, TrainConfig, TrainError, TrainSample,
};

fn scalar_store(v: f64, g: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("theta", Tensor::scalar(v)).unwrap();
    let grad = Tensor::scalar(g);
    let mut graph = cystseg::tensornet::Graph::new();
    let p = graph.param("theta", Tensor::scalar(v));
    let l = graph.weighted_sum(p, &grad).unwrap();
    s.accumulate(&graph.backward(l).unwrap()).unwrap();
    s
}

#[test]
fn bce_at_half_is_ln2() {
    let p = Tensor::filled(&[1, 4, 4], 0.5f64);
    let mut rng = SplitMix64::new(1);
    let t = Tensor::new(&[1, 4, 4], (0..16).map(|_| (rng.next_f64() < 0.5) as u8 as f64).collect()).unwrap();
    assert!((bce_loss(&p, &t, 1e-7).unwrap() - 2f64.ln()).abs() <= 1e-7);
}

#[test]
fn bce_near_zero_at_clamp_bounds() {
    let t = Tensor::new(&[4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let l = bce_loss(&t, &t, 1e-7).unwrap();
    assert!(l >= 0.0 && l <= -(1.0 - 1e-7f64).ln() + 1e-15);
}

#[test]
fn bce_matches_direct_sum() {
    let mut rng = SplitMix64::new(2);
    let n = 200;
    let p: Vec<f64> = (0..n).map(|_| rng.uniform(0.001, 0.999)).collect();
    let t: Vec<f64> = (0..n).map(|_| (rng.next_f64() < 0.4) as u8 as f64).collect();
    let mut acc = 0.0;
    for i in 0..n {
        acc += if t[i] == 1.0 { p[i].ln() } else { (1.0 - p[i]).ln() };
    }
    let oracle = -acc / n as f64;
    let got = bce_loss(&Tensor::new(&[n], p).unwrap(), &Tensor::new(&[n], t).unwrap(), 1e-7).unwrap();
    assert!((got - oracle).abs() <= 1e-9);
}

#[test]
fn bce_shape_mismatch() {
    let r = bce_loss(&Tensor::<f64>::zeros(&[2]), &Tensor::zeros(&[3]), 1e-7);
    assert!(matches!(r, Err(TrainError::DimMismatch(_))));
}

#[test]
fn adam_zero_gradient_is_identity() {
    let mut s = scalar_store(0.75, 0.0);
    let mut st = AdamState::new(&s);
    for _ in 0..5 {
        adam_step(&mut s, &mut st, &TrainConfig::default()).unwrap();
    }
    assert_eq!(s.value("theta").unwrap().data()[0], 0.75);
    assert_eq!(st.t, 5);
}

#[test]
fn adam_first_step_is_learning_rate() {
    let mut s = scalar_store(0.0, 1.0);
    let mut st = AdamState::new(&s);
    adam_step(&mut s, &mut st, &TrainConfig::default()).unwrap();
    let delta = s.value("theta").unwrap().data()[0];
    assert!((delta + 1e-3 / (1.0 + 1e-8)).abs() <= 1e-9);
    assert!((delta + 1e-3).abs() <= 1e-9);
}

#[test]
fn adam_trajectory_matches_recurrence() {
    let cfg = TrainConfig::default();
    let grads = [0.3, -1.2, 0.05, 2.0, -0.7, 0.0, 1.1, -0.4, 0.9, -2.5];
    let mut s = scalar_store(0.2, 0.0);
    let mut st = AdamState::new(&s);
    let (mut theta, mut m, mut v) = (0.2f64, 0.0f64, 0.0f64);
    for (k, &g) in grads.iter().enumerate() {
        s.zero_grad();
        let mut graph = cystseg::tensornet::Graph::new();
        let p = graph.param("theta", s.value("theta").unwrap().clone());
        let l = graph.weighted_sum(p, &Tensor::scalar(g)).unwrap();
        s.accumulate(&graph.backward(l).unwrap()).unwrap();
        adam_step(&mut s, &mut st, &cfg).unwrap();

        let t = (k + 1) as i32;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        theta -= 1e-3 * mh / (vh.sqrt() + 1e-8);
        assert!((s.value("theta").unwrap().data()[0] - theta).abs() <= 1e-12, "step {t}");
    }
}

#[test]
fn adam_rejects_foreign_state() {
    let mut s = scalar_store(0.0, 1.0);
    let mut st = AdamState::new(&ParamStore::<f64>::new());
    let r = adam_step(&mut s, &mut st, &TrainConfig::default());
    assert!(matches!(r, Err(TrainError::StateShapeMismatch(_))));
}

fn tiny_unet(seed: u64) -> UNetConfig {
    UNetConfig::scaled(2, 2, vec![1, 2], seed)
}

fn phantom_samples(n: usize, seed: u64) -> (Vec<Sample>, Vec<BinaryMask>) {
    let reference = ReferenceDims::new(32, 48);
    let mut samples = Vec::new();
    let mut masks = Vec::new();
    for i in 0..n {
        let mut spec = PhantomSpec::new(30, 44, 6, 21, seed + i as u64);
        spec.n_cysts = 2;
        spec.cyst_axis_range = (2, 3);
        let ph = gen_phantom(&spec).unwrap();
        samples.push(prepare_sample(&ph.image, reference, &PrepareParams::default()).unwrap());
        masks.push(ph.mask);
    }
    (samples, masks)
}

fn train_set(samples: &[Sample], masks: &[BinaryMask]) -> Vec<TrainSample> {
    samples.iter().zip(masks).map(|(s, m)| TrainSample::new(s, m).unwrap()).collect()
}

#[test]
fn training_reduces_loss() {
    let (s, m) = phantom_samples(1, 10);
    let data = train_set(&s, &m);
    let cfg = TrainConfig {
        batch_size: 1,
        epochs: 100,
        ..TrainConfig::default()
    };
    let mut lines = Vec::new();
    let out = train(&data, &tiny_unet(1), &cfg, |r| lines.push(r.log_line())).unwrap();
    assert_eq!(out.history.len(), 100);
    assert!(out.history.last().unwrap().loss < out.history[0].loss);
    assert!(lines[0].starts_with("epoch=1 loss="));
}

#[test]
fn training_is_deterministic() {
    let (s, m) = phantom_samples(3, 20);
    let data = train_set(&s, &m);
    let cfg = TrainConfig {
        batch_size: 2,
        epochs: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = train(&data, &tiny_unet(4), &cfg, |_| {}).unwrap();
    let b = train(&data, &tiny_unet(4), &cfg, |_| {}).unwrap();
    assert_eq!(encode_checkpoint(&a.checkpoint), encode_checkpoint(&b.checkpoint));
    assert_eq!(a.history, b.history);
}

#[test]
fn training_rejects_bad_data() {
    let r = train(&[], &tiny_unet(0), &TrainConfig::default(), |_| {});
    assert!(matches!(r, Err(TrainError::EmptyDataset)));

    let (s, m) = phantom_samples(1, 30);
    let mut data = train_set(&s, &m);
    let mut odd = data[0].clone();
    odd.input = Tensor::zeros(&[2, 16, 48]);
    odd.target = Tensor::zeros(&[1, 16, 48]);
    data.push(odd);
    let r = train(&data, &tiny_unet(0), &TrainConfig::default(), |_| {});
    assert!(matches!(r, Err(TrainError::DimMismatch(_))));

    let bad = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&data[..1], &tiny_unet(0), &bad, |_| {}), Err(TrainError::InvalidConfig(_))));
}

fn checkpoint(seed: u64) -> Checkpoint {
    let cfg = tiny_unet(seed);
    let (_, params) = build_unet::<f32>(&cfg).unwrap();
    Checkpoint::new(cfg, ReferenceDims::new(32, 48), params).unwrap()
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let cp = checkpoint(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.unck");
    save_checkpoint(&cp, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, cp);
    let (s, _) = phantom_samples(1, 40);
    let opts = PredictOptions::default();
    assert_eq!(predict(&cp, &s[0], &opts).unwrap(), predict(&back, &s[0], &opts).unwrap());
}

#[test]
fn checkpoint_layout() {
    let cp = checkpoint(0);
    let bytes = encode_checkpoint(&cp);
    assert_eq!(&bytes[..4], b"UNCK");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let text = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
    assert!(text.contains("aspp_rates=1,2\n") && text.contains("ref_rows=32\n"));
    let mut pos = 12 + len;
    let count = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;
    let mut names = Vec::new();
    for _ in 0..count {
        let n = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
        names.push(String::from_utf8(bytes[pos + 2..pos + 2 + n].to_vec()).unwrap());
        pos += 2 + n;
        let rank = bytes[pos] as usize;
        pos += 1;
        let dims: Vec<usize> = (0..rank)
            .map(|i| u32::from_le_bytes(bytes[pos + 4 * i..pos + 4 * i + 4].try_into().unwrap()) as usize)
            .collect();
        pos += 4 * rank + 4 * dims.iter().product::<usize>();
    }
    assert_eq!(pos, bytes.len());
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
    assert_eq!(names.len(), cp.params.len());
}

#[test]
fn checkpoint_errors() {
    let bytes = encode_checkpoint(&checkpoint(0));
    for cut in [2, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(decode_checkpoint(&bytes[..cut]), Err(TrainError::TruncatedData { .. })),
            "cut {cut}"
        );
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(TrainError::BadMagic)));

    let text = String::from_utf8_lossy(&bytes[12..]).to_string();
    let i = text.find("depth=2").unwrap() + 12 + 6;
    let mut other = bytes.clone();
    other[i] = b'3';
    assert!(matches!(decode_checkpoint(&other), Err(TrainError::ConfigMismatch(_))));
}

#[test]
fn zero_checkpoint_predicts_roi() {
    let mut cp = checkpoint(5);
    let names: Vec<String> = cp.params.names().map(String::from).collect();
    for n in names {
        let shape = cp.params.value(&n).unwrap().shape().to_vec();
        cp.params.set_value(&n, Tensor::zeros(&shape)).unwrap();
    }
    let (s, _) = phantom_samples(1, 50);
    let pred = predict(&cp, &s[0], &PredictOptions::default()).unwrap();
    assert_eq!((pred.mask.rows(), pred.mask.cols()), s[0].orig_dims);
    assert!(pred.prob.values().iter().all(|&p| p == 0.5));
    assert_eq!(pred.mask, s[0].roi_support());

    let unclamped = PredictOptions {
        roi_clamp: false,
        ..PredictOptions::default()
    };
    assert_eq!(predict(&cp, &s[0], &unclamped).unwrap().mask.count_ones(), 30 * 44);
}

#[test]
fn prediction_stays_inside_roi() {
    let cp = checkpoint(6);
    let (s, _) = phantom_samples(2, 60);
    for sample in &s {
        let pred = predict(&cp, sample, &PredictOptions { threshold: 0.0, roi_clamp: true }).unwrap();
        assert_eq!(pred.mask, sample.roi_support());
    }
}

#[test]
fn predict_rejects_other_frame() {
    let cp = checkpoint(7);
    let ph = gen_phantom(&PhantomSpec::new(30, 44, 6, 21, 1)).unwrap();
    let s = prepare_sample(&ph.image, ReferenceDims::new(32, 64), &PrepareParams::default()).unwrap();
    assert!(matches!(
        predict(&cp, &s, &PredictOptions::default()),
        Err(TrainError::DimMismatch(_))
    ));
}
