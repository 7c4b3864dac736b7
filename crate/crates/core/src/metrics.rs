//! Overlap scores between binary masks and their aggregation over a set.

use std::fmt::Write as _;

use thiserror::Error;

use crate::dataio::BinaryMask;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("mask dims differ: {0}x{1} vs {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
    #[error("need at least one value")]
    EmptyList,
    #[error("need at least two masks, got {0}")]
    TooFew(usize),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Scores of one prediction against one reference. A 0/0 ratio counts as
/// 1.0: two empty masks agree perfectly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScore {
    pub counts: ConfusionCounts,
    pub recall: f64,
    pub precision: f64,
    pub dice: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn check_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(MetricsError::DimMismatch(a.rows(), a.cols(), b.rows(), b.cols()))
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    check_dims(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn score_pair(pred: &BinaryMask, gt: &BinaryMask) -> Result<PairScore> {
    let counts = confusion(pred, gt)?;
    let ConfusionCounts { tp, fp, fn_, .. } = counts;
    Ok(PairScore {
        counts,
        recall: ratio(tp, tp + fn_),
        precision: ratio(tp, tp + fp),
        dice: ratio(2 * tp, 2 * tp + fp + fn_),
    })
}

/// Mean and sample standard deviation (`n - 1`; zero for a single value).
pub fn aggregate_stats(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

/// Dice between two graders' masks.
pub fn grader_iov(gt1: &BinaryMask, gt2: &BinaryMask) -> Result<f64> {
    Ok(score_pair(gt1, gt2)?.dice)
}

/// Pixelwise AND of two or more masks.
pub fn intersect_masks(masks: &[BinaryMask]) -> Result<BinaryMask> {
    if masks.len() < 2 {
        return Err(MetricsError::TooFew(masks.len()));
    }
    let first = &masks[0];
    for m in &masks[1..] {
        check_dims(first, m)?;
    }
    let bits = (0..first.bits().len())
        .map(|i| masks.iter().all(|m| m.bits()[i] != 0) as u8)
        .collect();
    Ok(BinaryMask::new(first.rows(), first.cols(), bits).expect("dims checked, bits are 0/1"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub score: PairScore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Per-image scores and their mean (std) over the set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    pub recall: MeanStd,
    pub precision: MeanStd,
    pub dice: MeanStd,
}

impl EvalReport {
    pub fn from_scores(images: Vec<ImageScore>) -> Result<Self> {
        let stat = |f: fn(&PairScore) -> f64| -> Result<MeanStd> {
            let v: Vec<f64> = images.iter().map(|i| f(&i.score)).collect();
            let (mean, std) = aggregate_stats(&v)?;
            Ok(MeanStd { mean, std })
        };
        Ok(Self {
            recall: stat(|s| s.recall)?,
            precision: stat(|s| s.precision)?,
            dice: stat(|s| s.dice)?,
            images,
        })
    }

    /// Scores `(name, prediction, reference)` triples.
    pub fn evaluate<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a BinaryMask, &'a BinaryMask)>) -> Result<Self> {
        let images = pairs
            .into_iter()
            .map(|(name, pred, gt)| {
                Ok(ImageScore {
                    name: name.to_string(),
                    score: score_pair(pred, gt)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_scores(images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for i in &self.images {
            let s = &i.score;
            let _ = writeln!(
                out,
                "image={} recall={:.6} precision={:.6} dice={:.6}",
                i.name, s.recall, s.precision, s.dice
            );
        }
        for (label, m) in [("recall", self.recall), ("precision", self.precision), ("dice", self.dice)] {
            let _ = writeln!(out, "mean {label}={:.6} std={:.6}", m.mean, m.std);
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("image\trecall\tprecision\tdice\ttp\tfp\tfn\ttn\n");
        for i in &self.images {
            let s = &i.score;
            let c = s.counts;
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}",
                i.name, s.recall, s.precision, s.dice, c.tp, c.fp, c.fn_, c.tn
            );
        }
        let _ = writeln!(out, "mean\t{:.6}\t{:.6}\t{:.6}", self.recall.mean, self.precision.mean, self.dice.mean);
        let _ = writeln!(out, "std\t{:.6}\t{:.6}\t{:.6}", self.recall.std, self.precision.std, self.dice.std);
        out
    }
}
