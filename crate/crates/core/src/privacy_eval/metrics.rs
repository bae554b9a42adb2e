use crate::{Error, Result};

/// Number of points the density curves are sampled on.
pub const DENSITY_GRID: usize = 512;
/// Bandwidth used when a class has zero spread.
const MIN_BANDWIDTH: f64 = 0.02;

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateInput("ROC analysis needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::DegenerateInput("scores contain NaN".into()));
    }
    Ok((pos, neg))
}

/// Cumulative `(false positives, true positives)` at each distinct
/// threshold, from the highest score down, starting at `(0, 0)`.
fn roc_counts(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![(0, 0)];
    let (mut fp, mut tp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((fp, tp));
    }
    out
}

/// ROC curve as `(false-positive rate, true-positive rate)` points.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check(scores, labels)?;
    Ok(roc_counts(scores, labels)
        .into_iter()
        .map(|(fp, tp)| (fp as f64 / neg as f64, tp as f64 / pos as f64))
        .collect())
}

/// Area under the ROC curve by the trapezoid rule over all thresholds, so
/// tied scores earn half credit.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let counts = roc_counts(scores, labels);
    // twice the area in units of one positive-negative pair, exact in integers
    let doubled: u128 = counts
        .windows(2)
        .map(|w| ((w[1].0 - w[0].0) * (w[1].1 + w[0].1)) as u128)
        .sum();
    Ok(doubled as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Trapezoid area under a polyline.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Gaussian kernel density sampled on `DENSITY_GRID` points over `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

fn silverman(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let h = 1.06 * var.sqrt() * n.powf(-0.2);
    if h > 0.0 {
        h.max(MIN_BANDWIDTH / 4.0)
    } else {
        MIN_BANDWIDTH
    }
}

/// KDE with Silverman's bandwidth, renormalized to unit mass on the grid
/// since kernels near 0 or 1 spill outside the interval.
pub fn kde(values: &[f64]) -> Result<DensityCurve> {
    if values.is_empty() {
        return Err(Error::DegenerateInput("density estimate of an empty class".into()));
    }
    if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
    }
    let h = silverman(values);
    let grid: Vec<f64> = (0..DENSITY_GRID)
        .map(|i| i as f64 / (DENSITY_GRID - 1) as f64)
        .collect();
    let mut density: Vec<f64> = grid
        .iter()
        .map(|&x| {
            values
                .iter()
                .map(|&v| (-0.5 * ((x - v) / h).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    let mass = trapezoid(&grid.iter().copied().zip(density.iter().copied()).collect::<Vec<_>>());
    density.iter_mut().for_each(|d| *d /= mass);
    Ok(DensityCurve {
        grid,
        density,
        bandwidth: h,
    })
}

/// Per-class densities: `(positive class, negative class)`.
pub fn probability_density(probs: &[f64], labels: &[bool]) -> Result<(DensityCurve, DensityCurve)> {
    if probs.len() != labels.len() {
        return Err(Error::shape(probs.len(), labels.len()));
    }
    let pick = |want: bool| {
        probs
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == want)
            .map(|(&p, _)| p)
            .collect::<Vec<_>>()
    };
    Ok((kde(&pick(true))?, kde(&pick(false))?))
}

/// Integral of the pointwise minimum of two densities on the same grid.
pub fn density_overlap(a: &DensityCurve, b: &DensityCurve) -> f64 {
    let pts: Vec<(f64, f64)> = a
        .grid
        .iter()
        .zip(a.density.iter().zip(&b.density))
        .map(|(&x, (&p, &q))| (x, p.min(q)))
        .collect();
    trapezoid(&pts)
}
