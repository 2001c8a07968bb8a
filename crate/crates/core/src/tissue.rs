//! Three-class tissue models: fuzzy c-means and Gaussian mixtures over the
//! masked intensities, plus the contrast rules that name the classes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::density::SortedSamples;
use crate::error::{Error, Result};
use crate::par;
use crate::volume::{same_dims, Contrast, Mask, Volume};

/// Smallest brain mask the segmenters accept.
pub const MIN_SEGMENT_VOXELS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tissue {
    Csf,
    Gm,
    Wm,
}

impl fmt::Display for Tissue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tissue::Csf => "csf",
            Tissue::Gm => "gm",
            Tissue::Wm => "wm",
        })
    }
}

impl FromStr for Tissue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csf" => Ok(Tissue::Csf),
            "gm" => Ok(Tissue::Gm),
            "wm" => Ok(Tissue::Wm),
            _ => Err(Error::invalid(format!("unknown tissue '{s}'"))),
        }
    }
}

/// Index, among three classes sorted by ascending mean, of `tissue` on
/// `contrast`.
///
/// T1: CSF < GM < WM. T2: WM < GM < CSF. FLAIR: CSF < WM < GM.
/// Untagged images follow the T1 ordering.
pub fn class_index(contrast: Contrast, tissue: Tissue) -> usize {
    match (contrast, tissue) {
        (Contrast::T2, Tissue::Wm) => 0,
        (Contrast::T2, Tissue::Gm) => 1,
        (Contrast::T2, Tissue::Csf) => 2,
        (Contrast::Flair, Tissue::Csf) => 0,
        (Contrast::Flair, Tissue::Wm) => 1,
        (Contrast::Flair, Tissue::Gm) => 2,
        (_, Tissue::Csf) => 0,
        (_, Tissue::Gm) => 1,
        (_, Tissue::Wm) => 2,
    }
}

fn segment_inputs(v: &Volume, b: &Mask, k: usize) -> Result<Vec<f64>> {
    same_dims(v.dims(), b.dims())?;
    if k == 0 {
        return Err(Error::invalid("class count must be at least 1"));
    }
    if b.count() < MIN_SEGMENT_VOXELS {
        return Err(Error::EmptyMask(format!(
            "segmentation needs at least {MIN_SEGMENT_VOXELS} voxels, mask has {}",
            b.count()
        )));
    }
    let x = v.masked_values(b)?;
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if lo == hi {
        return Err(Error::ZeroVariance("masked intensities are constant".into()));
    }
    Ok(x)
}

/// Hard class per voxel; classes are numbered by ascending mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    dims: [usize; 3],
    k: usize,
    labels: Vec<Option<u8>>,
}

impl LabelMap {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> &[Option<u8>] {
        &self.labels
    }

    pub fn class(&self, class: usize) -> Result<Mask> {
        let data = self.labels.iter().map(|l| *l == Some(class as u8)).collect();
        Mask::new(self.dims, data)
    }
}

/// Hard mask of `tissue` under the per-contrast class ordering; needs `k = 3`.
pub fn class_mask(labels: &LabelMap, contrast: Contrast, tissue: Tissue) -> Result<Mask> {
    if labels.k != 3 {
        return Err(Error::invalid(format!(
            "tissue masks need a 3-class model, got k = {}",
            labels.k
        )));
    }
    labels.class(class_index(contrast, tissue))
}

#[derive(Debug, Clone, Copy)]
pub struct FcmOptions {
    pub k: usize,
    pub fuzziness: f64,
    /// Relative change of the objective that counts as converged.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FcmOptions {
    fn default() -> Self {
        FcmOptions {
            k: 3,
            fuzziness: 2.0,
            tol: 1e-5,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MembershipMap {
    dims: [usize; 3],
    k: usize,
    /// `k` memberships per voxel, voxel-major; zero outside the mask.
    memberships: Vec<f64>,
    class_means: Vec<f64>,
    pub iterations: usize,
    pub objective: f64,
}

impl MembershipMap {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn class_means(&self) -> &[f64] {
        &self.class_means
    }

    pub fn membership(&self, voxel: usize) -> &[f64] {
        &self.memberships[voxel * self.k..(voxel + 1) * self.k]
    }

    /// Argmax membership inside the mask.
    pub fn hard_labels(&self) -> LabelMap {
        let n: usize = self.dims.iter().product();
        let labels = (0..n)
            .map(|i| {
                let u = self.membership(i);
                if u.iter().all(|&x| x == 0.0) {
                    None
                } else {
                    Some(argmax(u) as u8)
                }
            })
            .collect();
        LabelMap {
            dims: self.dims,
            k: self.k,
            labels,
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Memberships of `x` against `centers`; writes into `u`.
fn fcm_memberships(x: f64, centers: &[f64], exponent: f64, u: &mut [f64]) {
    let mut zeros = 0;
    for (c, uk) in centers.iter().zip(u.iter_mut()) {
        let d2 = (x - c) * (x - c);
        if d2 == 0.0 {
            zeros += 1;
            *uk = f64::INFINITY;
        } else {
            *uk = d2.powf(-exponent);
        }
    }
    if zeros > 0 {
        for uk in u.iter_mut() {
            *uk = if uk.is_infinite() { 1.0 / zeros as f64 } else { 0.0 };
        }
        return;
    }
    let s: f64 = u.iter().sum();
    u.iter_mut().for_each(|uk| *uk /= s);
}

/// Fuzzy c-means over the intensities inside `b`.
///
/// Centers start at evenly spaced masked percentiles (25/50/75 for three
/// classes). Returned class means are sorted ascending.
pub fn fcm_segment(v: &Volume, b: &Mask, opts: FcmOptions) -> Result<MembershipMap> {
    let x = segment_inputs(v, b, opts.k)?;
    if !(opts.fuzziness > 1.0) {
        return Err(Error::invalid("fuzziness must exceed 1"));
    }
    let k = opts.k;
    let m = opts.fuzziness;
    let exponent = 1.0 / (m - 1.0);
    let sorted = SortedSamples::new(x.clone())?;
    let mut centers = (0..k)
        .map(|i| sorted.quantile((i + 1) as f64 / (k + 1) as f64))
        .collect::<Result<Vec<_>>>()?;

    let mut prev_obj = f64::NAN;
    let mut obj = f64::NAN;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let c = centers.clone();
        // accumulators: [num_0..k, den_0..k, objective]
        let acc = par::reduce_chunks(
            x.len(),
            vec![0.0; 2 * k + 1],
            |r| {
                let mut acc = vec![0.0; 2 * k + 1];
                let mut u = vec![0.0; k];
                for &xi in &x[r] {
                    fcm_memberships(xi, &c, exponent, &mut u);
                    for j in 0..k {
                        let um = u[j].powf(m);
                        acc[j] += um * xi;
                        acc[k + j] += um;
                        acc[2 * k] += um * (xi - c[j]) * (xi - c[j]);
                    }
                }
                acc
            },
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
        obj = acc[2 * k];
        for j in 0..k {
            if acc[k + j] > 0.0 {
                centers[j] = acc[j] / acc[k + j];
            }
        }
        if obj == 0.0 || (prev_obj.is_finite() && (prev_obj - obj).abs() <= opts.tol * obj) {
            converged = true;
            break;
        }
        prev_obj = obj;
    }
    if !converged {
        return Err(Error::NonConvergence {
            what: "fuzzy c-means",
            iterations,
            objective: obj,
        });
    }

    centers.sort_by(f64::total_cmp);
    if centers.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Degenerate(format!(
            "fuzzy c-means classes collapsed: {centers:?}"
        )));
    }
    let n: usize = v.len();
    let mut memberships = vec![0.0; n * k];
    par::for_each_chunk_mut(&mut memberships, k * par::REDUCE_CHUNK, |off, chunk| {
        let first = off / k;
        for (local, u) in chunk.chunks_mut(k).enumerate() {
            if b.contains(first + local) {
                fcm_memberships(v.data()[first + local], &centers, exponent, u);
            }
        }
    });
    Ok(MembershipMap {
        dims: v.dims(),
        k,
        memberships,
        class_means: centers,
        iterations,
        objective: obj,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub iterations: usize,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GmmOptions {
    pub k: usize,
    /// Converged when the per-sample log-likelihood gain drops below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions {
            k: 3,
            tol: 1e-9,
            max_iter: 1000,
        }
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl GmmParams {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    fn log_joint(&self, x: f64, out: &mut [f64]) {
        for j in 0..self.k() {
            let d = x - self.means[j];
            out[j] = self.weights[j].ln()
                - 0.5 * (LN_2PI + self.variances[j].ln() + d * d / self.variances[j]);
        }
    }

    /// Component with the largest posterior for intensity `x`.
    pub fn classify(&self, x: f64) -> usize {
        let mut lj = vec![0.0; self.k()];
        self.log_joint(x, &mut lj);
        argmax(&lj)
    }

    /// Maximum-posterior class of every voxel inside `b`.
    pub fn hard_labels(&self, v: &Volume, b: &Mask) -> Result<LabelMap> {
        same_dims(v.dims(), b.dims())?;
        let labels = v
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &inside)| inside.then(|| self.classify(x) as u8))
            .collect();
        Ok(LabelMap {
            dims: v.dims(),
            k: self.k(),
            labels,
        })
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Expectation-maximization fit of a `k`-component Gaussian mixture to the
/// masked intensities, started from the hard fuzzy c-means classes.
pub fn gmm_fit(v: &Volume, b: &Mask, opts: GmmOptions) -> Result<GmmParams> {
    let x = segment_inputs(v, b, opts.k)?;
    let k = opts.k;
    let fcm = fcm_segment(
        v,
        b,
        FcmOptions {
            k,
            ..FcmOptions::default()
        },
    )?;
    let labels = fcm.hard_labels();
    let n = x.len() as f64;
    let mut count = vec![0.0; k];
    let mut sum = vec![0.0; k];
    for (l, xi) in labels.labels.iter().flatten().zip(&x) {
        count[*l as usize] += 1.0;
        sum[*l as usize] += xi;
    }
    let mut means: Vec<f64> = (0..k).map(|j| sum[j] / count[j]).collect();
    let mut var = vec![0.0; k];
    for (l, xi) in labels.labels.iter().flatten().zip(&x) {
        let j = *l as usize;
        var[j] += (xi - means[j]).powi(2);
    }
    let total_var = {
        let mu = x.iter().sum::<f64>() / n;
        x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n
    };
    let floor = total_var * 1e-10;
    for j in 0..k {
        if count[j] < 2.0 {
            return Err(Error::Degenerate(format!("initial class {j} has fewer than 2 voxels")));
        }
        var[j] /= count[j];
    }
    let mut params = GmmParams {
        weights: count.iter().map(|c| c / n).collect(),
        means: std::mem::take(&mut means),
        variances: var,
        iterations: 0,
        log_likelihood: f64::NEG_INFINITY,
    };

    let mut prev_ll = f64::NEG_INFINITY;
    for it in 1..=opts.max_iter {
        if let Some(j) = params.variances.iter().position(|&s| !(s > floor)) {
            return Err(Error::Degenerate(format!("component {j} variance collapsed")));
        }
        let p = params.clone();
        // accumulators: [resp_0..k, resp*x_0..k, resp*x^2_0..k, loglik]
        let acc = par::reduce_chunks(
            x.len(),
            vec![0.0; 3 * k + 1],
            |r| {
                let mut acc = vec![0.0; 3 * k + 1];
                let mut lj = vec![0.0; k];
                for &xi in &x[r] {
                    p.log_joint(xi, &mut lj);
                    let lse = log_sum_exp(&lj);
                    acc[3 * k] += lse;
                    for j in 0..k {
                        let rj = (lj[j] - lse).exp();
                        let d = xi - p.means[j];
                        acc[j] += rj;
                        acc[k + j] += rj * d;
                        acc[2 * k + j] += rj * d * d;
                    }
                }
                acc
            },
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
        let ll = acc[3 * k];
        params.log_likelihood = ll;
        params.iterations = it;
        for j in 0..k {
            let nj = acc[j];
            if !(nj > 0.0) {
                return Err(Error::Degenerate(format!("component {j} lost all mass")));
            }
            // moments about the previous mean keep the update well conditioned
            let shift = acc[k + j] / nj;
            params.weights[j] = nj / n;
            params.means[j] = p.means[j] + shift;
            params.variances[j] = (acc[2 * k + j] / nj - shift * shift).max(0.0);
        }
        if (ll - prev_ll).abs() / n < opts.tol {
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| params.means[a].total_cmp(&params.means[b]));
            let pick = |xs: &[f64]| order.iter().map(|&i| xs[i]).collect::<Vec<_>>();
            params.weights = pick(&params.weights);
            params.means = pick(&params.means);
            params.variances = pick(&params.variances);
            if let Some(j) = params.variances.iter().position(|&s| !(s > floor)) {
                return Err(Error::Degenerate(format!("component {j} variance collapsed")));
            }
            let wsum: f64 = params.weights.iter().sum();
            params.weights.iter_mut().for_each(|w| *w /= wsum);
            return Ok(params);
        }
        prev_ll = ll;
    }
    Err(Error::NonConvergence {
        what: "gaussian mixture EM",
        iterations: opts.max_iter,
        objective: params.log_likelihood,
    })
}

/// Mean intensity inside `w`.
pub fn wm_mean(v: &Volume, w: &Mask) -> Result<f64> {
    same_dims(v.dims(), w.dims())?;
    if w.count() == 0 {
        return Err(Error::EmptyMask("white-matter mask is empty".into()));
    }
    Ok(w.indices().map(|i| v.data()[i]).sum::<f64>() / w.count() as f64)
}
