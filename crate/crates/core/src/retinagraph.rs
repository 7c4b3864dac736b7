//! ILM / ISM boundary extraction as two shortest paths through a
//! gradient-weighted pixel graph, and the region-of-interest mask between
//! them.
//!
//! Each pixel is a node. Node `(r, c)` links to `(r-1, c+1)`, `(r, c+1)`
//! and `(r+1, c+1)`; a link between pixels `a` and `b` costs
//! `2 - (g_a + g_b) + w_min`, where `g` is the normalized dark-to-light
//! vertical gradient. Virtual source and sink columns attach to every row
//! of the first and last columns at cost `w_min`, so paths pick their own
//! endpoints.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::dataio::{BinaryMask, GrayImage};

/// Default minimum edge weight.
pub const DEFAULT_W_MIN: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("image has {rows} rows; at least {needed} are required")]
    ImageTooSmall { rows: usize, needed: usize },
    #[error("gradient field is empty")]
    EmptyField,
    #[error("path has no pixels strictly above or strictly below it")]
    DegeneratePath,
    #[error("no dark-to-light contrast anywhere in the image")]
    NoLayerContrast,
    #[error("column {col}: subgraph has {rows} rows left after the cut (need 3)")]
    SubgraphTooThin { col: usize, rows: usize },
    #[error("ILM does not lie strictly above ISM at column {0}")]
    OrderingViolation(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid layer path: {0}")]
    InvalidPath(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Normalized vertical gradient, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    rows: usize,
    cols: usize,
    g: Vec<f64>,
}

impl GradientField {
    pub fn new(rows: usize, cols: usize, g: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(GraphError::EmptyField);
        }
        if g.len() != rows * cols {
            return Err(GraphError::DimMismatch(format!(
                "{rows}x{cols} field with {} values",
                g.len()
            )));
        }
        if let Some(v) = g.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GraphError::InvalidPath(format!("gradient value {v} outside [0, 1]")));
        }
        Ok(Self { rows, cols, g })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.g
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.g[r * self.cols + c]
    }

    pub fn is_flat(&self) -> bool {
        self.g.iter().all(|&v| v == 0.0)
    }
}

/// One boundary row per column, 8-connected across columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPath {
    row_at: Vec<usize>,
}

impl LayerPath {
    pub fn new(row_at: Vec<usize>) -> Result<Self> {
        if row_at.is_empty() {
            return Err(GraphError::InvalidPath("path has no columns".into()));
        }
        if let Some(c) = row_at.windows(2).position(|w| w[0].abs_diff(w[1]) > 1) {
            return Err(GraphError::InvalidPath(format!(
                "jump between columns {c} and {}",
                c + 1
            )));
        }
        Ok(Self { row_at })
    }

    /// Horizontal path at `row`.
    pub fn flat(row: usize, cols: usize) -> Self {
        Self {
            row_at: vec![row; cols],
        }
    }

    pub fn cols(&self) -> usize {
        self.row_at.len()
    }

    #[inline]
    pub fn row_at(&self, c: usize) -> usize {
        self.row_at[c]
    }

    pub fn rows(&self) -> &[usize] {
        &self.row_at
    }

    /// Path cost on `field`: source and sink links plus every column-to-column
    /// link, summed left to right.
    pub fn cost(&self, field: &GradientField, w_min: f64) -> f64 {
        let mut total = w_min;
        for c in 1..self.row_at.len() {
            total += edge_weight(
                field.get(self.row_at[c - 1], c - 1),
                field.get(self.row_at[c], c),
                w_min,
            );
        }
        total + w_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Ilm,
    Ism,
}

/// Clamped dark-to-light central difference `I(r+1) - I(r-1)`, border rows
/// copied from their interior neighbour, min-max normalized to `[0, 1]`.
pub fn vertical_gradient(img: &GrayImage) -> Result<GradientField> {
    let (rows, cols) = (img.rows(), img.cols());
    if rows < 3 {
        return Err(GraphError::ImageTooSmall { rows, needed: 3 });
    }
    let mut d = vec![0.0f64; rows * cols];
    for r in 1..rows - 1 {
        for c in 0..cols {
            let diff = img.get(r + 1, c) as f64 - img.get(r - 1, c) as f64;
            d[r * cols + c] = diff.max(0.0);
        }
    }
    d.copy_within(cols..2 * cols, 0);
    d.copy_within((rows - 2) * cols..(rows - 1) * cols, (rows - 1) * cols);

    let (lo, hi) = d
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi == lo {
        d.iter_mut().for_each(|v| *v = 0.0);
    } else {
        d.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    }
    GradientField::new(rows, cols, d)
}

/// Link weight between two pixels with gradients `g_a`, `g_b`.
#[inline]
pub fn edge_weight(g_a: f64, g_b: f64, w_min: f64) -> f64 {
    2.0 - (g_a + g_b) + w_min
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShortestPath {
    pub path: LayerPath,
    pub cost: f64,
}

/// Minimum-cost left-to-right path over the whole field.
pub fn shortest_layer_path(field: &GradientField, w_min: f64) -> Result<ShortestPath> {
    let bounds = vec![(0, field.rows()); field.cols()];
    shortest_path_within(field, w_min, &bounds)
}

#[derive(Debug, PartialEq)]
struct Frontier {
    cost: f64,
    row: usize,
    col: usize,
    seq: u64,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    // Min-heap on cost, then smaller row, then earlier insertion.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.row.cmp(&self.row))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra restricted to rows `bounds[c].0 .. bounds[c].1` in column `c`.
///
/// Among equal-cost alternatives the path takes the smallest row at the
/// sink, and each node keeps its smallest-row predecessor.
pub fn shortest_path_within(
    field: &GradientField,
    w_min: f64,
    bounds: &[(usize, usize)],
) -> Result<ShortestPath> {
    let (rows, cols) = (field.rows(), field.cols());
    if rows == 0 || cols == 0 {
        return Err(GraphError::EmptyField);
    }
    if bounds.len() != cols {
        return Err(GraphError::DimMismatch(format!(
            "{} column bounds for {cols} columns",
            bounds.len()
        )));
    }
    for (c, &(lo, hi)) in bounds.iter().enumerate() {
        if lo >= hi || hi > rows {
            return Err(GraphError::SubgraphTooThin {
                col: c,
                rows: hi.saturating_sub(lo),
            });
        }
    }

    let idx = |r: usize, c: usize| c * rows + r;
    let mut dist = vec![f64::INFINITY; rows * cols];
    let mut pred = vec![usize::MAX; rows * cols];
    let mut settled = vec![false; rows * cols];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;

    let (lo0, hi0) = bounds[0];
    for r in lo0..hi0 {
        dist[idx(r, 0)] = w_min;
        heap.push(Frontier {
            cost: w_min,
            row: r,
            col: 0,
            seq,
        });
        seq += 1;
    }

    while let Some(Frontier { cost, row, col, .. }) = heap.pop() {
        let u = idx(row, col);
        if settled[u] || cost > dist[u] {
            continue;
        }
        settled[u] = true;
        if col + 1 == cols {
            continue;
        }
        let next = col + 1;
        let (lo, hi) = bounds[next];
        let g_u = field.get(row, col);
        for nr in row.saturating_sub(1)..=(row + 1) {
            if nr < lo || nr >= hi {
                continue;
            }
            let v = idx(nr, next);
            let nd = cost + edge_weight(g_u, field.get(nr, next), w_min);
            if nd < dist[v] {
                dist[v] = nd;
                pred[v] = row;
                heap.push(Frontier {
                    cost: nd,
                    row: nr,
                    col: next,
                    seq,
                });
                seq += 1;
            } else if nd == dist[v] && row < pred[v] {
                pred[v] = row;
            }
        }
    }

    let last = cols - 1;
    let (lo, hi) = bounds[last];
    let mut best: Option<(f64, usize)> = None;
    for r in lo..hi {
        let d = dist[idx(r, last)];
        if !d.is_finite() {
            continue;
        }
        let total = d + w_min;
        if best.is_none_or(|(b, _)| total < b) {
            best = Some((total, r));
        }
    }
    let (cost, mut r) = best.ok_or(GraphError::SubgraphTooThin { col: last, rows: 0 })?;

    let mut row_at = vec![0; cols];
    for c in (0..cols).rev() {
        row_at[c] = r;
        if c > 0 {
            r = pred[idx(r, c)];
        }
    }
    Ok(ShortestPath {
        path: LayerPath::new(row_at)?,
        cost,
    })
}

/// ISM if the mean intensity strictly above the path exceeds the mean
/// strictly below it, ILM otherwise.
pub fn classify_layer(img: &GrayImage, path: &LayerPath) -> Result<LayerKind> {
    check_path(path, img.rows(), img.cols())?;
    let (mut above, mut n_above, mut below, mut n_below) = (0u64, 0u64, 0u64, 0u64);
    for c in 0..img.cols() {
        let p = path.row_at(c);
        for r in 0..img.rows() {
            let v = img.get(r, c) as u64;
            match r.cmp(&p) {
                Ordering::Less => {
                    above += v;
                    n_above += 1;
                }
                Ordering::Greater => {
                    below += v;
                    n_below += 1;
                }
                Ordering::Equal => {}
            }
        }
    }
    if n_above == 0 || n_below == 0 {
        return Err(GraphError::DegeneratePath);
    }
    let mean_above = above as f64 / n_above as f64;
    let mean_below = below as f64 / n_below as f64;
    Ok(if mean_above > mean_below {
        LayerKind::Ism
    } else {
        LayerKind::Ilm
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSegmentation {
    pub ilm: LayerPath,
    pub ism: LayerPath,
    /// Which boundary the first (whole-graph) path turned out to be.
    pub first: LayerKind,
}

/// Finds the strongest boundary, classifies it, cuts the graph along it,
/// and searches the other boundary in the remaining half.
pub fn segment_layers(img: &GrayImage, w_min: f64) -> Result<LayerSegmentation> {
    let (rows, cols) = (img.rows(), img.cols());
    if rows < 5 {
        return Err(GraphError::ImageTooSmall { rows, needed: 5 });
    }
    let field = vertical_gradient(img)?;
    if field.is_flat() {
        return Err(GraphError::NoLayerContrast);
    }
    let first = shortest_layer_path(&field, w_min)?.path;
    let kind = classify_layer(img, &first)?;

    // A step edge responds on two rows of the central difference, so the
    // cut also drops the path's neighbour on the searched side.
    let bounds: Vec<(usize, usize)> = match kind {
        LayerKind::Ism => (0..cols).map(|c| (0, first.row_at(c).saturating_sub(1))).collect(),
        LayerKind::Ilm => (0..cols).map(|c| ((first.row_at(c) + 2).min(rows), rows)).collect(),
    };
    if let Some((col, &(lo, hi))) = bounds.iter().enumerate().find(|(_, (lo, hi))| hi - lo < 3) {
        return Err(GraphError::SubgraphTooThin { col, rows: hi - lo });
    }
    let second = shortest_path_within(&field, w_min, &bounds)?.path;

    let (ilm, ism) = match kind {
        LayerKind::Ism => (second, first),
        LayerKind::Ilm => (first, second),
    };
    if let Some(c) = (0..cols).find(|&c| ilm.row_at(c) >= ism.row_at(c)) {
        return Err(GraphError::OrderingViolation(c));
    }
    Ok(LayerSegmentation {
        ilm,
        ism,
        first: kind,
    })
}

/// Region strictly between the two boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    pub mask: BinaryMask,
    pub ilm: LayerPath,
    pub ism: LayerPath,
}

pub fn roi_mask(ilm: &LayerPath, ism: &LayerPath, rows: usize, cols: usize) -> Result<RoiMask> {
    check_path(ilm, rows, cols)?;
    check_path(ism, rows, cols)?;
    if let Some(c) = (0..cols).find(|&c| ilm.row_at(c) >= ism.row_at(c)) {
        return Err(GraphError::OrderingViolation(c));
    }
    let mask = BinaryMask::from_fn(rows, cols, |r, c| ilm.row_at(c) < r && r < ism.row_at(c))
        .map_err(|e| GraphError::DimMismatch(e.to_string()))?;
    Ok(RoiMask {
        mask,
        ilm: ilm.clone(),
        ism: ism.clone(),
    })
}

fn check_path(path: &LayerPath, rows: usize, cols: usize) -> Result<()> {
    if path.cols() != cols {
        return Err(GraphError::DimMismatch(format!(
            "path spans {} columns, image has {cols}",
            path.cols()
        )));
    }
    if let Some(c) = (0..cols).find(|&c| path.row_at(c) >= rows) {
        return Err(GraphError::InvalidPath(format!(
            "row {} at column {c} is outside {rows} rows",
            path.row_at(c)
        )));
    }
    Ok(())
}
