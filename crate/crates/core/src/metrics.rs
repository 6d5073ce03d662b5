//! Segmentation metrics: Dice overlap, Hausdorff distance and
//! non-connectivity (share of foreground outside a random seed's component).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{flood_fill_mask, Adjacency, BinaryMask, Coord, RngState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
}

fn check_shapes(a: &BinaryMask, b: &BinaryMask) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks agree perfectly.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricError> {
    check_shapes(pred, gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in pred.as_slice().iter().zip(gt.as_slice()) {
        inter += (a && b) as usize;
        total += a as usize + b as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Per-axis pixel size, for anisotropic grids.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub row: f64,
    pub col: f64,
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing { row: 1.0, col: 1.0 }
    }
}

/// 1D squared distance transform of sampled function `f` with sample pitch
/// `step` (lower envelope of parabolas).
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let s2 = step * step;
    let mut k = 0usize;
    let Some(first) = f.iter().position(|v| v.is_finite()) else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + s2 * (q * q) as f64) - (f[p] + s2 * (p * p) as f64)) / (2.0 * s2 * (q - p) as f64);
            if s <= z[k] {
                // A finite parabola is never dominated at -inf, so k > 0 here.
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *slot = s2 * d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest set pixel of
/// `mask` (infinite everywhere if the mask is empty).
pub fn squared_distance_transform(mask: &BinaryMask, spacing: Spacing) -> Vec<f64> {
    let (h, w) = mask.shape();
    let n = h.max(w);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut col_in = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    let mut stage = vec![0.0; h * w];
    for c in 0..w {
        for r in 0..h {
            col_in[r] = if mask[(r, c)] { 0.0 } else { f64::INFINITY };
        }
        edt_1d(&col_in, spacing.row, &mut col_out, &mut v, &mut z);
        for r in 0..h {
            stage[r * w + c] = col_out[r];
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        edt_1d(&stage[r * w..(r + 1) * w], spacing.col, &mut out[r * w..(r + 1) * w], &mut v, &mut z);
    }
    out
}

/// Symmetric Hausdorff distance in pixel units (scaled by `spacing`).
pub fn hausdorff_with_spacing(pred: &BinaryMask, gt: &BinaryMask, spacing: Spacing) -> Result<f64, MetricError> {
    check_shapes(pred, gt)?;
    if pred.count() == 0 || gt.count() == 0 {
        return Err(MetricError::Undefined("Hausdorff distance of an empty mask"));
    }
    let to_gt = squared_distance_transform(gt, spacing);
    let to_pred = squared_distance_transform(pred, spacing);
    let directed = |from: &BinaryMask, field: &[f64]| {
        from.as_slice()
            .iter()
            .zip(field)
            .filter(|(&set, _)| set)
            .map(|(_, &d)| d)
            .fold(0.0, f64::max)
    };
    Ok(directed(pred, &to_gt).max(directed(gt, &to_pred)).sqrt())
}

pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricError> {
    hausdorff_with_spacing(pred, gt, Spacing::default())
}

/// Percentage of foreground outside the component of `seed`.
pub fn n_conn_from_seed(mask: &BinaryMask, seed: Coord, adjacency: Adjacency) -> f64 {
    let total = mask.count();
    if total == 0 {
        return 0.0;
    }
    let component = flood_fill_mask(mask, seed, adjacency)
        .map(|c| c.count())
        .unwrap_or(0);
    100.0 * (total - component) as f64 / total as f64
}

/// Non-connectivity for one uniformly drawn foreground seed; 0 for an empty
/// mask. Returns the value and the seed used.
pub fn n_conn(mask: &BinaryMask, adjacency: Adjacency, rng: &mut RngState) -> (f64, Option<Coord>) {
    let fg: Vec<Coord> = mask.foreground().collect();
    if fg.is_empty() {
        return (0.0, None);
    }
    let seed = fg[rng.below(fg.len())];
    (n_conn_from_seed(mask, seed, adjacency), Some(seed))
}

/// Mean and sample standard deviation of `n_conn` over `draws` seeds.
pub fn n_conn_mean(mask: &BinaryMask, adjacency: Adjacency, draws: usize, rng: &mut RngState) -> (f64, f64) {
    let values: Vec<f64> = (0..draws.max(1)).map(|_| n_conn(mask, adjacency, rng).0).collect();
    mean_std(&values)
}

/// Mean and sample (n − 1) standard deviation; std is 0 for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Metrics of one prediction against its ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub dsc: f64,
    /// `None` when either mask is empty.
    pub hd: Option<f64>,
    pub n_conn: f64,
    pub n_conn_std: f64,
}

pub fn image_metrics(
    pred: &BinaryMask,
    gt: &BinaryMask,
    adjacency: Adjacency,
    n_conn_draws: usize,
    rng: &mut RngState,
) -> Result<ImageMetrics, MetricError> {
    let dsc = dsc(pred, gt)?;
    let hd = match hausdorff(pred, gt) {
        Ok(v) => Some(v),
        Err(MetricError::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    let (n_conn, n_conn_std) = n_conn_mean(pred, adjacency, n_conn_draws, rng);
    Ok(ImageMetrics {
        dsc,
        hd,
        n_conn,
        n_conn_std,
    })
}

/// Aggregate over an image set. `hd` averages only images where it is
/// defined (`NaN` if none); `hd_missing` counts the rest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dsc: f64,
    pub hd: f64,
    pub n_conn: f64,
    pub images: usize,
    pub hd_missing: usize,
}

impl MetricReport {
    pub fn aggregate(per_image: &[ImageMetrics]) -> MetricReport {
        let dscs: Vec<f64> = per_image.iter().map(|m| m.dsc).collect();
        let hds: Vec<f64> = per_image.iter().filter_map(|m| m.hd).collect();
        let ncs: Vec<f64> = per_image.iter().map(|m| m.n_conn).collect();
        MetricReport {
            dsc: mean_std(&dscs).0,
            hd: mean_std(&hds).0,
            n_conn: mean_std(&ncs).0,
            images: per_image.len(),
            hd_missing: per_image.len() - hds.len(),
        }
    }
}
