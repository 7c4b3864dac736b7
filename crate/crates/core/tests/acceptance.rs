//! End-to-end acceptance checks. Runs without the libtest harness so the
//! per-criterion verdict lines always reach the output.

use std::time::{Duration, Instant};

use cystseg::dataio::{gen_phantom, phantom_series, BinaryMask, GrayImage};
use cystseg::metrics::{score_pair, EvalReport};
use cystseg::preprocess::{bilateral_filter, BilateralParams};
use cystseg::retinagraph::{shortest_layer_path, GradientField};
use cystseg::rng::SplitMix64;
use cystseg::samplekit::{crop_from_reference, pad_to_reference, prepare_scan, FloatImage, PrepareParams, ReferenceDims};
use cystseg::tensornet::{
    attention_gate, build_unet, conv2d, AttentionGateParams, GateVars, Graph, Mode, ParamStore, Tensor, UNetConfig,
};
use cystseg::trainer::{
    adam_step, bce_loss, decode_checkpoint, encode_checkpoint, predict, train, AdamState, Checkpoint, PredictOptions,
    TrainConfig, TrainSample,
};

const W_MIN: f64 = 1e-5;

type Check = fn() -> Verdict;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let cfg = UNetConfig::scaled(2, 2, vec![1, 2, 4, 8, 16], 3);
    let (net, params) = build_unet::<f64>(&cfg).unwrap();
    let mut rng = SplitMix64::new(5);
    let x = Tensor::new(&[2, 16, 16], (0..512).map(|_| rng.next_f64()).collect()).unwrap();
    let t = Tensor::new(&[1, 16, 16], (0..256).map(|_| (rng.next_f64() < 0.3) as u8 as f64).collect()).unwrap();
    let loss = |p: &ParamStore<f64>| {
        let y = net.forward(p, &x, Mode::Eval).unwrap();
        bce_loss(&y, &t, 1e-7).unwrap()
    };

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = net.record(&mut g, &params, xv, Mode::Eval).unwrap();
    let l = g.bce(y, &t, 1e-7).unwrap();
    let grads = g.backward(l).unwrap();

    let h = 1e-5;
    let (mut worst, mut count) = (0.0f64, 0usize);
    for name in params.names() {
        let base = params.value(name).unwrap().clone();
        let analytic = grads.param(name).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; base.numel()]);
        let mut probe = params.clone();
        for (i, &an) in analytic.iter().enumerate() {
            let mut v = base.clone();
            v.data_mut()[i] += h;
            probe.set_value(name, v.clone()).unwrap();
            let up = loss(&probe);
            v.data_mut()[i] -= 2.0 * h;
            probe.set_value(name, v).unwrap();
            let down = loss(&probe);
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
            count += 1;
        }
        probe.set_value(name, base).unwrap();
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-4 && secs < 120.0,
        format!("{count} parameters, max relative error {worst:.2e}, {secs:.1} s"),
    )
}

/// Cheapest path by enumerating every start row and every sequence of
/// row steps in {-1, 0, +1}. Ties keep the first path in an order that
/// prefers the smallest row at the last column, then smaller rows going
/// right to left.
fn brute_force_path(g: &[Vec<f64>], w_min: f64) -> (f64, Vec<usize>) {
    let (rows, cols) = (g.len(), g[0].len());
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut path = vec![0usize; cols];
    fn walk(
        g: &[Vec<f64>],
        w_min: f64,
        c: usize,
        cost: f64,
        path: &mut Vec<usize>,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        let (rows, cols) = (g.len(), g[0].len());
        if c == cols {
            let total = cost + w_min;
            let better = match best {
                None => true,
                Some((b, bp)) => {
                    total < *b || (total == *b && path.iter().rev().lt(bp.iter().rev()))
                }
            };
            if better {
                *best = Some((total, path.clone()));
            }
            return;
        }
        let prev = path[c - 1];
        for r in prev.saturating_sub(1)..=(prev + 1).min(rows - 1) {
            path[c] = r;
            let w = 2.0 - (g[prev][c - 1] + g[r][c]) + w_min;
            walk(g, w_min, c + 1, cost + w, path, best);
        }
    }
    for r in 0..rows {
        path[0] = r;
        walk(g, w_min, 1, w_min, &mut path, &mut best);
    }
    best.unwrap()
}

fn dijkstra_oracle() -> Verdict {
    let mut rng = SplitMix64::new(21);
    let (mut worst, mut path_mismatch) = (0.0f64, 0);
    for _ in 0..50 {
        let g: Vec<Vec<f64>> = (0..6).map(|_| (0..8).map(|_| rng.next_f64()).collect()).collect();
        let field = GradientField::new(6, 8, g.concat()).unwrap();
        let sp = shortest_layer_path(&field, W_MIN).unwrap();
        let (cost, path) = brute_force_path(&g, W_MIN);
        worst = worst.max((sp.cost - cost).abs());
        if sp.path.rows() != path.as_slice() {
            path_mismatch += 1;
        }
    }
    let uniform = GradientField::new(6, 8, vec![0.5; 48]).unwrap();
    let top = shortest_layer_path(&uniform, W_MIN).unwrap().path.rows().iter().all(|&r| r == 0);
    verdict(
        worst <= 1e-12 && path_mismatch == 0 && top,
        format!("max |dcost| {worst:.1e}, {path_mismatch} path mismatches, uniform field to top row: {top}"),
    )
}

/// Per-pixel weighted mean over the clipped window, straight from the
/// definition.
fn direct_bilateral(img: &GrayImage, sd: f64, sr: f64, radius: usize) -> Vec<u8> {
    let (rows, cols) = (img.rows() as isize, img.cols() as isize);
    let rad = radius as isize;
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let center = img.get(r as usize, c as usize) as f64;
            let (mut num, mut den) = (0.0, 0.0);
            for y in r - rad..=r + rad {
                for x in c - rad..=c + rad {
                    if y < 0 || x < 0 || y >= rows || x >= cols {
                        continue;
                    }
                    let v = img.get(y as usize, x as usize) as f64;
                    let d2 = ((y - r) * (y - r) + (x - c) * (x - c)) as f64;
                    let w = (-d2 / (2.0 * sd * sd)).exp() * (-(v - center).powi(2) / (2.0 * sr * sr)).exp();
                    num += w * v;
                    den += w;
                }
            }
            out.push((num / den).round() as u8);
        }
    }
    out
}

fn bilateral_oracle() -> Verdict {
    let mut rng = SplitMix64::new(31);
    let mut worst = 0u8;
    for _ in 0..20 {
        let img = GrayImage::from_fn(16, 16, |_, _| rng.below(256) as u8).unwrap();
        let sd = rng.uniform(0.5, 3.0);
        let sr = rng.uniform(5.0, 80.0);
        let p = BilateralParams::with_default_radius(sd, sr).unwrap();
        let fast = bilateral_filter(&img, &p);
        let direct = direct_bilateral(&img, sd, sr, p.radius);
        for (a, b) in fast.pixels().iter().zip(&direct) {
            worst = worst.max(a.abs_diff(*b));
        }
    }
    verdict(worst == 0, format!("max rounded intensity difference {worst}"))
}

fn dilation_equivalence() -> Verdict {
    let mut rng = SplitMix64::new(41);
    let mut worst = 0.0f64;
    for &r in &[2usize, 4, 8, 16] {
        let x = random(&[3, 20, 23], &mut rng);
        let w = random(&[2, 3, 3, 3], &mut rng);
        let k = 2 * r + 1;
        let mut inflated = Tensor::zeros(&[2, 3, k, k]);
        for f in 0..2 {
            for c in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        inflated.data_mut()[((f * 3 + c) * k + ky * r) * k + kx * r] =
                            w.data()[((f * 3 + c) * 3 + ky) * 3 + kx];
                    }
                }
            }
        }
        let a = conv2d(&x, &w, None, r).unwrap();
        let b = conv2d(&x, &inflated, None, 1).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            worst = worst.max((p - q).abs());
        }
    }
    verdict(worst <= 1e-6, format!("max |d| {worst:.1e} over rates 2, 4, 8, 16"))
}

fn mask(rows: &[&str]) -> BinaryMask {
    BinaryMask::from_fn(rows.len(), rows[0].len(), |r, c| rows[r].as_bytes()[c] == b'#').unwrap()
}

fn metric_exactness() -> Verdict {
    let mut fails = Vec::new();
    let s = score_pair(&mask(&["##..", "#...", "....", "...."]), &mask(&["##..", ".###", "....", "...."])).unwrap();
    let c = s.counts;
    if (c.tp, c.fp, c.fn_, c.tn) != (2, 1, 3, 10) || s.dice != 0.5 || s.recall != 2.0 / 5.0 || s.precision != 2.0 / 3.0 {
        fails.push("overlap fixture".to_string());
    }
    let full = mask(&["####", "#..#", "#..#", "####"]);
    let same = score_pair(&full, &full).unwrap();
    if (same.recall, same.precision, same.dice) != (1.0, 1.0, 1.0) {
        fails.push("identical fixture".into());
    }
    if score_pair(&mask(&["##..", "##..", "....", "...."]), &mask(&["....", "....", "..##", "..##"])).unwrap().dice != 0.0 {
        fails.push("disjoint fixture".into());
    }

    let mut rng = SplitMix64::new(51);
    let (mut asym, mut wrong, mut empties) = (0, 0, 0);
    for _ in 0..1000 {
        let (rows, cols) = (rng.range_inclusive(1, 6), rng.range_inclusive(1, 6));
        let pa = rng.next_f64() * 0.6;
        let pb = rng.next_f64() * 0.6;
        let a = BinaryMask::from_fn(rows, cols, |_, _| rng.next_f64() < pa).unwrap();
        let b = BinaryMask::from_fn(rows, cols, |_, _| rng.next_f64() < pb).unwrap();
        let ab = score_pair(&a, &b).unwrap().dice;
        if ab != score_pair(&b, &a).unwrap().dice {
            asym += 1;
        }
        let inter = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x == 1 && **y == 1).count();
        let sizes = a.count_ones() + b.count_ones();
        let expect = if sizes == 0 {
            empties += 1;
            1.0
        } else {
            (2 * inter) as f64 / sizes as f64
        };
        if ab != expect {
            wrong += 1;
        }
    }
    let zero = BinaryMask::zeros(4, 4).unwrap();
    let both_empty = score_pair(&zero, &zero).unwrap();
    if (both_empty.recall, both_empty.precision, both_empty.dice) != (1.0, 1.0, 1.0) {
        fails.push("both-empty fixture".into());
    }
    verdict(
        fails.is_empty() && asym == 0 && wrong == 0,
        format!("fixture failures {fails:?}, {asym} asymmetric and {wrong} wrong of 1000 random pairs ({empties} both empty)"),
    )
}

fn tiny_training_run(seed: u64) -> Checkpoint {
    let reference = ReferenceDims::new(32, 48);
    let data: Vec<_> = phantom_series(6, 30, 44, 60)
        .iter()
        .map(|s| {
            let ph = gen_phantom(s).unwrap();
            let sample = prepare_scan(&ph.image, reference, &PrepareParams::default()).unwrap().sample;
            TrainSample::new(&sample, &ph.mask).unwrap()
        })
        .collect();
    let cfg = UNetConfig::scaled(2, 2, vec![1, 2], seed);
    let tc = TrainConfig {
        batch_size: 2,
        epochs: 2,
        seed,
        ..TrainConfig::default()
    };
    train(&data, &cfg, &tc, |_| {}).unwrap().checkpoint
}

fn round_trips() -> Verdict {
    let mut rng = SplitMix64::new(61);
    let mut pad_ok = true;
    for _ in 0..50 {
        let (rows, cols) = (rng.range_inclusive(1, 30), rng.range_inclusive(1, 40));
        let img = FloatImage::new(rows, cols, (0..rows * cols).map(|_| rng.uniform(-5.0, 5.0) as f32).collect()).unwrap();
        let reference = ReferenceDims::new(rng.range_inclusive(rows, 40), rng.range_inclusive(cols, 48));
        let (padded, offset) = pad_to_reference(&img, reference).unwrap();
        let back = crop_from_reference(&padded, offset, (rows, cols)).unwrap();
        pad_ok &= back.data.iter().map(|v| v.to_bits()).eq(img.data.iter().map(|v| v.to_bits()));
    }

    let a = tiny_training_run(9);
    let bytes = encode_checkpoint(&a);
    let decoded = decode_checkpoint(&bytes).unwrap();
    let ck_ok = decoded == a && encode_checkpoint(&decoded) == bytes;
    let same_seed = encode_checkpoint(&tiny_training_run(9)) == bytes;
    verdict(
        pad_ok && ck_ok && same_seed,
        format!("pad/crop exact: {pad_ok}, checkpoint exact: {ck_ok}, same seed identical: {same_seed}"),
    )
}

fn gate_range() -> Verdict {
    let mut rng = SplitMix64::new(71);
    let mut outside = 0usize;
    let mut total = 0usize;
    for i in 0..100 {
        // Parameter scale grows so later inputs drive the gate deep into saturation.
        let scale = 1.0 + i as f64;
        let x = random(&[4, 5, 5], &mut rng).cast::<f32>();
        let gate = random(&[4, 5, 5], &mut rng).map(|v| scale * v).cast::<f32>();
        let mut g = Graph::new();
        let xv = g.input(x);
        let gv = g.input(gate);
        let vars = GateVars {
            wx: g.input(random(&[3, 4, 1, 1], &mut rng).cast()),
            wg: g.input(random(&[3, 4, 1, 1], &mut rng).cast()),
            bxg: g.input(random(&[3], &mut rng).cast()),
            psi: g.input(random(&[1, 3, 1, 1], &mut rng).map(|v| scale * v).cast()),
            bpsi: g.input(random(&[1], &mut rng).cast()),
        };
        let (_, alpha) = g.attention_gate(xv, gv, &vars).unwrap();
        let a = g.value(alpha).unwrap().data();
        total += a.len();
        outside += a.iter().filter(|&&v| !(v > 0.0 && v < 1.0)).count();
    }

    let mut p = AttentionGateParams {
        wx: random(&[3, 4, 1, 1], &mut rng),
        wg: random(&[3, 4, 1, 1], &mut rng),
        bxg: random(&[3], &mut rng),
        psi: Tensor::zeros(&[1, 3, 1, 1]),
        bpsi: Tensor::zeros(&[1]),
    };
    p.bxg = p.bxg.map(|v| 3.0 * v);
    let x = random(&[4, 6, 7], &mut rng);
    let y = attention_gate(&x, &random(&[4, 6, 7], &mut rng), &p).unwrap();
    let half = y == x.map(|v| 0.5 * v);
    verdict(
        outside == 0 && half,
        format!("{outside} of {total} coefficients outside (0,1), zero psi gives 0.5x exactly: {half}"),
    )
}

fn loss_and_optimizer() -> Verdict {
    let mut rng = SplitMix64::new(81);
    let target = Tensor::new(&[1, 8, 8], (0..64).map(|_| (rng.next_f64() < 0.4) as u8 as f64).collect()).unwrap();
    let bce = bce_loss(&Tensor::filled(&[1, 8, 8], 0.5), &target, 1e-7).unwrap();
    let bce_err = (bce - std::f64::consts::LN_2).abs();

    let mut store = ParamStore::new();
    store.insert("theta", Tensor::scalar(0.0f64)).unwrap();
    let mut g = Graph::new();
    let p = g.param("theta", Tensor::scalar(0.0));
    let l = g.weighted_sum(p, &Tensor::scalar(1.0)).unwrap();
    store.accumulate(&g.backward(l).unwrap()).unwrap();
    let mut state = AdamState::new(&store);
    let cfg = TrainConfig::default();
    adam_step(&mut store, &mut state, &cfg).unwrap();
    let step = store.value("theta").unwrap().data()[0].abs();
    let adam_err = (step - cfg.learning_rate).abs();
    verdict(
        bce_err <= 1e-7 && adam_err <= 1e-9,
        format!("|bce - ln 2| {bce_err:.1e}, |step - lr| {adam_err:.1e}"),
    )
}

fn desk_run() -> Verdict {
    let start = Instant::now();
    let reference = ReferenceDims::new(64, 96);
    let mut samples = Vec::new();
    let mut masks = Vec::new();
    for spec in phantom_series(50, 64, 96, 2024) {
        let ph = gen_phantom(&spec).unwrap();
        samples.push(prepare_scan(&ph.image, reference, &PrepareParams::default()).unwrap().sample);
        masks.push(ph.mask);
    }
    let data: Vec<_> = samples[..40].iter().zip(&masks[..40]).map(|(s, m)| TrainSample::new(s, m).unwrap()).collect();
    let cfg = UNetConfig::scaled(4, 3, vec![1, 2, 4], 1);
    let tc = TrainConfig {
        batch_size: 2,
        epochs: 60,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train(&data, &cfg, &tc, |_| {}).unwrap();
    let first = out.history.first().unwrap().loss;
    let last = out.history.last().unwrap().loss;
    let opts = PredictOptions::default();
    let preds: Vec<_> = samples[40..].iter().map(|s| predict(&out.checkpoint, s, &opts).unwrap().mask).collect();
    let names: Vec<String> = (40..50).map(|i| format!("phantom_{i:04}")).collect();
    let report =
        EvalReport::evaluate((0..10).map(|i| (names[i].as_str(), &preds[i], &masks[40 + i]))).unwrap();
    let dice = report.dice.mean;
    let elapsed = start.elapsed();
    verdict(
        dice >= 0.60 && last < 0.25 * first && elapsed <= Duration::from_secs(15 * 60),
        format!(
            "held-out mean dice {dice:.3}, loss {first:.4} -> {last:.4} ({:.1}%), {:.0} s",
            100.0 * last / first,
            elapsed.as_secs_f64()
        ),
    )
}

fn layer_sanity() -> Verdict {
    let (mut close, mut ordered, mut total) = (0, 0, 0);
    for spec in phantom_series(50, 64, 96, 77) {
        let ph = gen_phantom(&spec).unwrap();
        let scan = prepare_scan(&ph.image, ReferenceDims::new(64, 96), &PrepareParams::default()).unwrap();
        let (ilm, ism) = (&scan.layers.ilm, &scan.layers.ism);
        for c in 0..spec.cols {
            total += 1;
            if ilm.row_at(c).abs_diff(ph.ilm.row_at(c)) <= 1 && ism.row_at(c).abs_diff(ph.ism.row_at(c)) <= 1 {
                close += 1;
            }
            if ilm.row_at(c) < ism.row_at(c) {
                ordered += 1;
            }
        }
    }
    let frac = close as f64 / total as f64;
    verdict(
        frac >= 0.95 && ordered == total,
        format!("{:.1}% of columns within 1 row, ordering holds on {ordered}/{total}", 100.0 * frac),
    )
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("gradient correctness", gradient_check),
        ("shortest path oracle", dijkstra_oracle),
        ("bilateral oracle", bilateral_oracle),
        ("dilated conv equivalence", dilation_equivalence),
        ("metric exactness", metric_exactness),
        ("round trips and determinism", round_trips),
        ("attention gate range", gate_range),
        ("bce and adam fixtures", loss_and_optimizer),
        ("end-to-end desk run", desk_run),
        ("layer segmentation sanity", layer_sanity),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {tag} {name}: {}", i + 1, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
