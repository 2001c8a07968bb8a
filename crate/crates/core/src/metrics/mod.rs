//! Image-quality metrics on masked voxels and the paired tests used to
//! compare normalization methods.

mod report;
mod ssim;
mod wilcoxon;

use crate::error::{Error, Result};
use crate::volume::{same_dims, Mask, Volume};

pub use report::{
    bootstrap_mean_ci, consistent_winner, Comparison, Metric, MetricRow, QualityReport, Summary,
    BOOTSTRAP_RESAMPLES,
};
pub use ssim::{mssim, SsimOptions};
pub use wilcoxon::{exact_null_counts, wilcoxon_signed_rank, Wilcoxon, EXACT_MAX_N, MIN_NONZERO};

pub const DEFAULT_BINS: usize = 32;

fn paired_values(a: &Volume, b: &Volume, m: &Mask) -> Result<(Vec<f64>, Vec<f64>)> {
    same_dims(a.dims(), b.dims())?;
    Ok((a.masked_values(m)?, b.masked_values(m)?))
}

/// Pearson correlation of the masked voxel pairs.
pub fn ncc(a: &Volume, b: &Volume, m: &Mask) -> Result<f64> {
    let (x, y) = paired_values(a, b, m)?;
    if x.len() < 2 {
        return Err(Error::EmptyMask("correlation needs at least two voxels".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, q) in x.iter().zip(&y) {
        let (dx, dy) = (p - mx, q - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::ZeroVariance("an input is constant inside the mask".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Equal-width bin index of each value over its own min..max range.
fn bin_indices(values: &[f64], bins: usize) -> Vec<usize> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = hi - lo;
    values
        .iter()
        .map(|&v| {
            if width > 0.0 {
                (((v - lo) / width * bins as f64) as usize).min(bins - 1)
            } else {
                0
            }
        })
        .collect()
}

/// Plug-in entropy (nats) of the masked intensities in `bins` equal-width bins.
pub fn entropy(a: &Volume, m: &Mask, bins: usize) -> Result<f64> {
    let x = a.masked_values(m)?;
    if bins == 0 || x.is_empty() {
        return Err(Error::invalid("entropy needs voxels and at least one bin"));
    }
    let mut counts = vec![0usize; bins];
    for i in bin_indices(&x, bins) {
        counts[i] += 1;
    }
    let n = x.len() as f64;
    Ok(-counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>())
}

/// Plug-in mutual information (nats) of the joint histogram of masked voxel
/// pairs; each image is binned over its own masked range.
pub fn mutual_information(a: &Volume, b: &Volume, m: &Mask, bins: usize) -> Result<f64> {
    let (x, y) = paired_values(a, b, m)?;
    if bins < 2 {
        return Err(Error::invalid("mutual information needs at least two bins"));
    }
    if x.len() < bins * bins {
        return Err(Error::EmptyMask(format!(
            "{} masked voxels are too few for a {bins}x{bins} joint histogram",
            x.len()
        )));
    }
    let (bx, by) = (bin_indices(&x, bins), bin_indices(&y, bins));
    let mut joint = vec![0usize; bins * bins];
    let mut px = vec![0usize; bins];
    let mut py = vec![0usize; bins];
    for (&i, &j) in bx.iter().zip(&by) {
        joint[i * bins + j] += 1;
        px[i] += 1;
        py[j] += 1;
    }
    let n = x.len() as f64;
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c > 0 {
                let pij = c as f64 / n;
                mi += pij * (pij / (px[i] as f64 / n * (py[j] as f64 / n))).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}
