//! Mean structural similarity with a separable Gaussian window.

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{coords, same_dims, Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimOptions {
    /// Odd window side length in voxels.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Smooth within axial slices only (x and y), not across them.
    pub axial_2d: bool,
}

impl Default for SsimOptions {
    fn default() -> Self {
        SsimOptions {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            axial_2d: false,
        }
    }
}

impl SsimOptions {
    fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        (0..self.window)
            .map(|t| {
                let d = t as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect()
    }

    fn axes(&self) -> &'static [usize] {
        if self.axial_2d {
            &[0, 1]
        } else {
            &[0, 1, 2]
        }
    }
}

/// Weighted average along one axis; kernel taps that fall outside the volume
/// are dropped and the remaining weights renormalized.
fn smooth_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let len = dims[axis] as i64;
    let mut out = vec![0.0; data.len()];
    par::for_each_chunk_mut(&mut out, dims[0] * dims[1], |off, chunk| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let idx = off + k;
            let c = coords(dims, idx)[axis] as i64;
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (t, &w) in kernel.iter().enumerate() {
                let p = c + t as i64 - r;
                if (0..len).contains(&p) {
                    acc += w * data[(idx as i64 + (p - c) * stride as i64) as usize];
                    wsum += w;
                }
            }
            *o = acc / wsum;
        }
    });
    out
}

fn smooth(data: Vec<f64>, dims: [usize; 3], opts: &SsimOptions, kernel: &[f64]) -> Vec<f64> {
    opts.axes()
        .iter()
        .fold(data, |d, &axis| smooth_axis(&d, dims, axis, kernel))
}

/// Mean of the local SSIM over windows centered at masked voxels. The
/// dynamic range is the joint masked max minus min of both images.
pub fn mssim(a: &Volume, b: &Volume, m: &Mask, opts: SsimOptions) -> Result<f64> {
    same_dims(a.dims(), b.dims())?;
    same_dims(a.dims(), m.dims())?;
    if opts.window % 2 == 0 || opts.window == 0 || !(opts.sigma > 0.0) {
        return Err(Error::invalid("SSIM window must be odd with positive sigma"));
    }
    let dims = a.dims();
    if opts.axes().iter().any(|&ax| dims[ax] < opts.window) {
        return Err(Error::invalid(format!(
            "SSIM window {} does not fit in volume {dims:?}",
            opts.window
        )));
    }
    if m.count() == 0 {
        return Err(Error::EmptyMask("SSIM needs at least one masked voxel".into()));
    }
    let (lo, hi) = m.indices().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
        let (x, y) = (a.data()[i], b.data()[i]);
        (lo.min(x).min(y), hi.max(x).max(y))
    });
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::ZeroVariance("SSIM dynamic range is zero".into()));
    }
    let c1 = (opts.k1 * range).powi(2);
    let c2 = (opts.k2 * range).powi(2);
    let kernel = opts.kernel();
    let (x, y) = (a.data(), b.data());
    let mu_x = smooth(x.to_vec(), dims, &opts, &kernel);
    let mu_y = smooth(y.to_vec(), dims, &opts, &kernel);
    let xx = smooth(x.iter().map(|v| v * v).collect(), dims, &opts, &kernel);
    let yy = smooth(y.iter().map(|v| v * v).collect(), dims, &opts, &kernel);
    let xy = smooth(x.iter().zip(y).map(|(p, q)| p * q).collect(), dims, &opts, &kernel);
    let idx: Vec<usize> = m.indices().collect();
    let total = par::reduce_chunks(
        idx.len(),
        0.0,
        |range| {
            idx[range]
                .iter()
                .map(|&i| {
                    let (mx, my) = (mu_x[i], mu_y[i]);
                    let vx = xx[i] - mx * mx;
                    let vy = yy[i] - my * my;
                    let cxy = xy[i] - mx * my;
                    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
                })
                .sum::<f64>()
        },
        |acc, s| acc + s,
    );
    Ok(total / idx.len() as f64)
}
