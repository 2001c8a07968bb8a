//! Empirical quantiles, Gaussian kernel density estimation and peak picking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Contrast;

/// Number of grid points in every [`DensityEstimate`].
pub const GRID_POINTS: usize = 512;
/// Minimum sample count accepted by [`kde_estimate`].
pub const MIN_KDE_SAMPLES: usize = 50;
/// Default peak prominence, as a fraction of the global density maximum.
pub const DEFAULT_PROMINENCE: f64 = 0.05;

/// Sorted, finite samples with linear-interpolation quantiles and an ECDF.
#[derive(Debug, Clone)]
pub struct SortedSamples(Vec<f64>);

impl SortedSamples {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("quantile of an empty collection"));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite sample"));
        }
        values.sort_unstable_by(f64::total_cmp);
        Ok(SortedSamples(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Quantile at fraction `p`, interpolating linearly between order
    /// statistics at position `(n - 1) p`.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("quantile fraction {p} outside [0, 1]")));
        }
        let xs = &self.0;
        let h = (xs.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        if lo + 1 >= xs.len() {
            return Ok(xs[xs.len() - 1]);
        }
        let t = h - lo as f64;
        Ok(xs[lo] + t * (xs[lo + 1] - xs[lo]))
    }

    /// Fraction of samples `<= x`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.0.partition_point(|&v| v <= x) as f64 / self.0.len() as f64
    }
}

pub fn quantile(intensities: &[f64], p: f64) -> Result<f64> {
    SortedSamples::new(intensities.to_vec())?.quantile(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkVector {
    /// Percentile labels in percent.
    pub percentiles: Vec<f64>,
    pub values: Vec<f64>,
}

pub fn landmark_percentiles(intensities: &[f64], labels: &[f64]) -> Result<LandmarkVector> {
    landmarks_sorted(&SortedSamples::new(intensities.to_vec())?, labels)
}

pub(crate) fn landmarks_sorted(s: &SortedSamples, labels: &[f64]) -> Result<LandmarkVector> {
    if labels.is_empty() {
        return Err(Error::invalid("no landmark labels"));
    }
    if labels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("landmark labels must be strictly ascending"));
    }
    let values = labels
        .iter()
        .map(|&l| s.quantile(l / 100.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(LandmarkVector {
        percentiles: labels.to_vec(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    grid: Vec<f64>,
    pdf: Vec<f64>,
    bandwidth: f64,
}

impl DensityEstimate {
    pub fn new(grid: Vec<f64>, pdf: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if grid.len() < 3 || grid.len() != pdf.len() {
            return Err(Error::invalid("grid and pdf must have equal length >= 3"));
        }
        if grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("grid must be strictly increasing"));
        }
        if pdf.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("pdf must be finite and nonnegative"));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::invalid("bandwidth must be positive"));
        }
        Ok(DensityEstimate {
            grid,
            pdf,
            bandwidth,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn pdf(&self) -> &[f64] {
        &self.pdf
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Trapezoidal integral of the density over the grid.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.pdf)
    }

    /// Density at `x` by linear interpolation; zero off the grid.
    pub fn pdf_at(&self, x: f64) -> f64 {
        let g = &self.grid;
        if x < g[0] || x > g[g.len() - 1] {
            return 0.0;
        }
        let i = g.partition_point(|&v| v <= x).clamp(1, g.len() - 1);
        let t = (x - g[i - 1]) / (g[i] - g[i - 1]);
        self.pdf[i - 1] + t * (self.pdf[i] - self.pdf[i - 1])
    }
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xw, yw)| 0.5 * (xw[1] - xw[0]) * (yw[0] + yw[1]))
        .sum()
}

/// Silverman's rule of thumb: `0.9 min(sd, IQR / 1.34) n^(-1/5)`.
pub fn silverman_bandwidth(s: &SortedSamples) -> Result<f64> {
    let xs = s.as_slice();
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return Err(Error::invalid("bandwidth needs at least two samples"));
    }
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let iqr = s.quantile(0.75)? - s.quantile(0.25)?;
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if !(spread > 0.0) {
        return Err(Error::ZeroVariance("kernel density of constant samples".into()));
    }
    Ok(0.9 * spread * n.powf(-0.2))
}

/// Gaussian kernel density estimate on a uniform [`GRID_POINTS`] grid over
/// `[min - 3h, max + 3h]`.
///
/// Samples are linearly binned onto the grid and convolved with the sampled
/// kernel; the result is rescaled so its trapezoidal integral is one.
pub fn kde_estimate(intensities: &[f64], bandwidth: Option<f64>) -> Result<DensityEstimate> {
    if intensities.len() < MIN_KDE_SAMPLES {
        return Err(Error::invalid(format!(
            "kernel density needs at least {MIN_KDE_SAMPLES} samples, got {}",
            intensities.len()
        )));
    }
    let s = SortedSamples::new(intensities.to_vec())?;
    kde_sorted(&s, bandwidth)
}

pub(crate) fn kde_sorted(s: &SortedSamples, bandwidth: Option<f64>) -> Result<DensityEstimate> {
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::invalid(format!("bandwidth {h} must be positive"))),
        None => silverman_bandwidth(s)?,
    };
    let xs = s.as_slice();
    let lo = xs[0] - 3.0 * h;
    let hi = xs[xs.len() - 1] + 3.0 * h;
    let g = GRID_POINTS;
    let step = (hi - lo) / (g - 1) as f64;
    let grid: Vec<f64> = (0..g).map(|i| lo + i as f64 * step).collect();

    let mut weights = vec![0.0; g];
    for &x in xs {
        let pos = ((x - lo) / step).clamp(0.0, (g - 1) as f64);
        let i = (pos.floor() as usize).min(g - 2);
        let t = pos - i as f64;
        weights[i] += 1.0 - t;
        weights[i + 1] += t;
    }
    let kernel: Vec<f64> = (0..g)
        .map(|d| {
            let u = d as f64 * step / h;
            (-0.5 * u * u).exp()
        })
        .collect();
    let mut pdf: Vec<f64> = (0..g)
        .map(|j| {
            weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(i, w)| w * kernel[i.abs_diff(j)])
                .sum::<f64>()
        })
        .collect();
    let area = trapezoid(&grid, &pdf);
    if !(area > 0.0) {
        return Err(Error::Degenerate("density integrates to zero".into()));
    }
    pdf.iter_mut().for_each(|p| *p /= area);
    DensityEstimate::new(grid, pdf, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    /// Intensity at the peak (parabolic refinement between grid points).
    pub location: f64,
    pub density: f64,
}

/// Interior local maxima of `d` whose topographic prominence is at least
/// `min_prominence * max(pdf)`, sorted by location.
pub fn find_modes(d: &DensityEstimate, min_prominence: f64) -> Vec<Mode> {
    let y = &d.pdf;
    let n = y.len();
    let ymax = y.iter().cloned().fold(0.0, f64::max);
    let threshold = min_prominence * ymax;
    let step = d.grid[1] - d.grid[0];
    let mut modes = Vec::new();

    let mut i = 1;
    while i + 1 < n {
        if y[i] > y[i - 1] {
            // extend across a plateau
            let mut j = i;
            while j + 1 < n && y[j + 1] == y[i] {
                j += 1;
            }
            if j + 1 < n && y[j + 1] < y[i] {
                let height = y[i];
                let mut left_min = height;
                for k in (0..i).rev() {
                    if y[k] > height {
                        break;
                    }
                    left_min = left_min.min(y[k]);
                }
                let mut right_min = height;
                for &v in &y[j + 1..] {
                    if v > height {
                        break;
                    }
                    right_min = right_min.min(v);
                }
                let prominence = height - left_min.max(right_min);
                if prominence >= threshold && prominence > 0.0 {
                    let mode = if i == j {
                        let (y0, y1, y2) = (y[i - 1], y[i], y[i + 1]);
                        let denom = y0 - 2.0 * y1 + y2;
                        let delta = if denom < 0.0 { 0.5 * (y0 - y2) / denom } else { 0.0 };
                        Mode {
                            location: d.grid[i] + delta * step,
                            density: y1 - 0.25 * (y0 - y2) * delta,
                        }
                    } else {
                        Mode {
                            location: 0.5 * (d.grid[i] + d.grid[j]),
                            density: height,
                        }
                    };
                    modes.push(mode);
                }
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    modes
}

/// Picks the white-matter peak: greatest location for T1 and FLAIR (and
/// untagged images), tallest peak for T2 with ties going to the darker mode.
pub fn select_tissue_mode(modes: &[Mode], contrast: Contrast) -> Result<f64> {
    if modes.is_empty() {
        return Err(Error::NoPeak);
    }
    let pick = match contrast {
        Contrast::T2 => modes.iter().fold(modes[0], |best, m| {
            if m.density > best.density
                || (m.density == best.density && m.location < best.location)
            {
                *m
            } else {
                best
            }
        }),
        _ => *modes
            .iter()
            .max_by(|a, b| a.location.total_cmp(&b.location))
            .expect("nonempty"),
    };
    Ok(pick.location)
}
