//! Piecewise-linear histogram matching against a learned standard histogram.

use serde::{Deserialize, Serialize};

use crate::density::{landmarks_sorted, SortedSamples};
use crate::error::{Error, Result};
use crate::serial::{f17_pair, f17_vec};
use crate::volume::{Mask, Volume};

/// Percentile labels 1, 10, 20, ..., 90, 99.
pub fn default_labels() -> Vec<f64> {
    let mut l = vec![1.0];
    l.extend((1..=9).map(|d| 10.0 * d as f64));
    l.push(99.0);
    l
}

pub const DEFAULT_SCALE: [f64; 2] = [1.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardHistogram {
    #[serde(with = "f17_vec")]
    pub labels: Vec<f64>,
    #[serde(with = "f17_vec")]
    pub standard_values: Vec<f64>,
    #[serde(with = "f17_pair")]
    pub scale: [f64; 2],
}

impl StandardHistogram {
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() < 2 || self.labels.len() != self.standard_values.len() {
            return Err(Error::Schema("standard histogram needs >= 2 matched landmarks".into()));
        }
        if self.standard_values.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Schema("standard values must be nondecreasing".into()));
        }
        Ok(())
    }
}

fn image_landmarks(v: &Volume, b: &Mask, labels: &[f64]) -> Result<Vec<f64>> {
    let s = SortedSamples::new(v.masked_values(b)?)?;
    Ok(landmarks_sorted(&s, labels)?.values)
}

/// Learns the standard histogram: each image's landmarks are mapped affinely
/// so the first and last land on the scale ends, then averaged per landmark.
pub fn hm_fit(sample: &[(&Volume, &Mask)], labels: &[f64], scale: [f64; 2]) -> Result<StandardHistogram> {
    if sample.is_empty() {
        return Err(Error::invalid("histogram matching needs at least one image"));
    }
    if labels.len() < 2 {
        return Err(Error::invalid("histogram matching needs at least two landmarks"));
    }
    if !(scale[0] < scale[1]) {
        return Err(Error::invalid(format!("standard scale {scale:?} is empty")));
    }
    let per_image = sample
        .iter()
        .map(|(v, b)| image_landmarks(v, b, labels))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![0.0; labels.len()];
    for lm in &per_image {
        let (p_lo, p_hi) = (lm[0], lm[lm.len() - 1]);
        if !(p_hi > p_lo) {
            return Err(Error::Degenerate(format!(
                "image landmarks collapse: {}% = {}% = {p_lo}",
                labels[0],
                labels[labels.len() - 1]
            )));
        }
        for (a, x) in acc.iter_mut().zip(lm) {
            *a += scale[0] + (x - p_lo) / (p_hi - p_lo) * (scale[1] - scale[0]);
        }
    }
    let m = per_image.len() as f64;
    Ok(StandardHistogram {
        labels: labels.to_vec(),
        standard_values: acc.into_iter().map(|a| a / m).collect(),
        scale,
    })
}

/// Piecewise-linear map through `(knots[i], targets[i])`, extended beyond the
/// end knots with the first and last segment slopes.
#[derive(Debug, Clone)]
pub struct PiecewiseLinear {
    knots: Vec<f64>,
    targets: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn new(knots: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 || knots.len() != targets.len() {
            return Err(Error::invalid("piecewise map needs >= 2 matched knots"));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid(
                "image landmarks are not strictly increasing (zero-width segment)",
            ));
        }
        Ok(PiecewiseLinear { knots, targets })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = &self.knots;
        let t = &self.targets;
        let seg = k.partition_point(|&v| v <= x).clamp(1, k.len() - 1) - 1;
        let slope = (t[seg + 1] - t[seg]) / (k[seg + 1] - k[seg]);
        t[seg] + slope * (x - k[seg])
    }
}

/// Maps `v` onto the standard scale through its own landmarks.
pub fn hm_apply(v: &Volume, b: &Mask, sh: &StandardHistogram) -> Result<Volume> {
    sh.validate()?;
    let lm = image_landmarks(v, b, &sh.labels)?;
    let map = PiecewiseLinear::new(lm, sh.standard_values.clone())?;
    v.map(|x| map.eval(x))
}
