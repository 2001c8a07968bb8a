//! Image-wise normalizers: Z-score, white-matter scaling and WhiteStripe.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::density::{find_modes, kde_sorted, select_tissue_mode, SortedSamples, MIN_KDE_SAMPLES};
use crate::error::{Error, Result};
use crate::tissue::{self, class_index, class_mask, FcmOptions, GmmOptions, Tissue};
use crate::volume::{masked_stats, Contrast, Mask, Volume};

/// Smallest number of voxels accepted inside a white stripe.
pub const MIN_STRIPE_VOXELS: usize = 100;
/// Quantile fractions are clamped into `[STRIPE_EPS, 1 - STRIPE_EPS]`.
pub const STRIPE_EPS: f64 = 1e-4;

/// `(v - mean_B) / std_B` over every voxel, statistics taken inside `b`.
pub fn zscore_normalize(v: &Volume, b: &Mask) -> Result<Volume> {
    let s = masked_stats(v, b)?;
    if !(s.std > 0.0) {
        return Err(Error::ZeroVariance("brain-mask intensities are constant".into()));
    }
    v.map(|x| (x - s.mean) / s.std)
}

/// `c * v / wm_value` over every voxel.
pub fn wm_scale_normalize(v: &Volume, wm_value: f64, c: f64) -> Result<Volume> {
    if !(wm_value > 0.0 && wm_value.is_finite()) {
        return Err(Error::invalid(format!(
            "white-matter statistic must be positive, got {wm_value}"
        )));
    }
    if !(c > 0.0) {
        return Err(Error::invalid(format!("scale constant must be positive, got {c}")));
    }
    let k = c / wm_value;
    v.map(|x| x * k)
}

/// White-matter mask from three-class fuzzy c-means on `v` itself.
pub fn fcm_wm_mask(v: &Volume, b: &Mask, contrast: Contrast) -> Result<Mask> {
    let mm = tissue::fcm_segment(v, b, FcmOptions::default())?;
    class_mask(&mm.hard_labels(), contrast, Tissue::Wm)
}

/// White-matter mask from the maximum-posterior classes of a 3-GMM.
pub fn gmm_wm_mask(v: &Volume, b: &Mask, contrast: Contrast) -> Result<Mask> {
    let g = tissue::gmm_fit(v, b, GmmOptions::default())?;
    class_mask(&g.hard_labels(v, b)?, contrast, Tissue::Wm)
}

/// Mean of the GMM component that the contrast rule names white matter.
pub fn gmm_wm_mean(v: &Volume, b: &Mask, contrast: Contrast) -> Result<f64> {
    let g = tissue::gmm_fit(v, b, GmmOptions::default())?;
    Ok(g.means[class_index(contrast, Tissue::Wm)])
}

/// White-matter peak of the kernel density of the masked intensities.
pub fn kde_wm_peak(v: &Volume, b: &Mask, contrast: Contrast, prominence: f64) -> Result<f64> {
    let s = SortedSamples::new(v.masked_values(b)?)?;
    tissue_peak(&s, contrast, prominence)
}

fn tissue_peak(s: &SortedSamples, contrast: Contrast, prominence: f64) -> Result<f64> {
    if s.len() < MIN_KDE_SAMPLES {
        return Err(Error::EmptyMask(format!(
            "peak finding needs {MIN_KDE_SAMPLES} voxels, mask has {}",
            s.len()
        )));
    }
    let d = kde_sorted(s, None)?;
    select_tissue_mode(&find_modes(&d, prominence), contrast)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhiteStripe {
    /// Kernel-density white-matter peak.
    pub mode: f64,
    /// Open intensity interval of the stripe.
    pub interval: [f64; 2],
    /// Mean of the stripe intensities.
    pub mean: f64,
    /// Sample standard deviation (n - 1) of the stripe intensities.
    pub std: f64,
    pub count: usize,
}

/// Locates the white stripe: voxels whose intensity lies strictly between
/// the `F(mode) - tau` and `F(mode) + tau` quantiles of the masked
/// distribution, `F` being its empirical CDF.
pub fn white_stripe(
    v: &Volume,
    b: &Mask,
    contrast: Contrast,
    tau: f64,
    prominence: f64,
) -> Result<WhiteStripe> {
    if !(tau > 0.0 && tau < 0.5) {
        return Err(Error::invalid(format!("stripe width {tau} outside (0, 0.5)")));
    }
    let s = SortedSamples::new(v.masked_values(b)?)?;
    let mode = tissue_peak(&s, contrast, prominence)?;
    let f = s.cdf(mode);
    let clamp = |p: f64| {
        if p < STRIPE_EPS || p > 1.0 - STRIPE_EPS {
            warn!("white stripe quantile {p:.4} clamped into ({STRIPE_EPS}, {})", 1.0 - STRIPE_EPS);
        }
        p.clamp(STRIPE_EPS, 1.0 - STRIPE_EPS)
    };
    let lo = s.quantile(clamp(f - tau))?;
    let hi = s.quantile(clamp(f + tau))?;
    let xs = s.as_slice();
    let inside = &xs[xs.partition_point(|&x| x <= lo)..xs.partition_point(|&x| x < hi)];
    if inside.len() < MIN_STRIPE_VOXELS {
        return Err(Error::EmptyMask(format!(
            "white stripe holds {} voxels, need {MIN_STRIPE_VOXELS}",
            inside.len()
        )));
    }
    let n = inside.len() as f64;
    let mean = inside.iter().sum::<f64>() / n;
    let std = (inside.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(std > 0.0) {
        return Err(Error::ZeroVariance("white stripe intensities are constant".into()));
    }
    Ok(WhiteStripe {
        mode,
        interval: [lo, hi],
        mean,
        std,
        count: inside.len(),
    })
}

/// WhiteStripe normalization: `(v - mean_ws) / std_ws` over every voxel.
pub fn whitestripe_normalize(
    v: &Volume,
    b: &Mask,
    contrast: Contrast,
    tau: f64,
    prominence: f64,
) -> Result<(Volume, WhiteStripe)> {
    let ws = white_stripe(v, b, contrast, tau, prominence)?;
    Ok((v.map(|x| (x - ws.mean) / ws.std)?, ws))
}
