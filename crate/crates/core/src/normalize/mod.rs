//! The seven normalizers behind one fit/apply interface, plus the JSON model
//! file format.

mod hm;
mod methods;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::density::{SortedSamples, DEFAULT_PROMINENCE};
use crate::error::{Error, Result};
use crate::nifti;
use crate::ravel::{ravel_fit_apply, RavelInput, RavelModel};
use crate::serial::{f17, f17_pair, f17_rows, f17_vec};
use crate::tissue;
use crate::volume::{same_dims, Contrast, Mask, Volume};

pub use hm::{default_labels, hm_apply, hm_fit, PiecewiseLinear, StandardHistogram, DEFAULT_SCALE};
pub use methods::{
    fcm_wm_mask, gmm_wm_mask, gmm_wm_mean, kde_wm_peak, white_stripe, whitestripe_normalize,
    wm_scale_normalize, zscore_normalize, WhiteStripe, MIN_STRIPE_VOXELS, STRIPE_EPS,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Zscore,
    Fcm,
    Gmm,
    Kde,
    Hm,
    Whitestripe,
    Ravel,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Zscore,
        Method::Fcm,
        Method::Gmm,
        Method::Kde,
        Method::Hm,
        Method::Whitestripe,
        Method::Ravel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Zscore => "zscore",
            Method::Fcm => "fcm",
            Method::Gmm => "gmm",
            Method::Kde => "kde",
            Method::Hm => "hm",
            Method::Whitestripe => "whitestripe",
            Method::Ravel => "ravel",
        }
    }

    /// Where the white-matter statistic comes from when the caller does not
    /// say: the T1 segmentation for FCM, the image itself otherwise.
    pub fn default_wm_source(self) -> WmSource {
        match self {
            Method::Fcm => WmSource::T1,
            _ => WmSource::SelfImage,
        }
    }

    /// Methods whose white-matter statistic can be taken over a supplied mask.
    pub fn uses_wm_mask(self) -> bool {
        matches!(self, Method::Fcm | Method::Gmm | Method::Kde)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zscore" | "z-score" => Ok(Method::Zscore),
            "fcm" => Ok(Method::Fcm),
            "gmm" => Ok(Method::Gmm),
            "kde" => Ok(Method::Kde),
            "hm" | "nyul" => Ok(Method::Hm),
            "whitestripe" | "ws" => Ok(Method::Whitestripe),
            "ravel" => Ok(Method::Ravel),
            _ => Err(Error::invalid(format!("unknown normalization method '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WmSource {
    #[serde(rename = "t1")]
    T1,
    #[serde(rename = "self")]
    SelfImage,
}

impl FromStr for WmSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t1" => Ok(WmSource::T1),
            "self" => Ok(WmSource::SelfImage),
            _ => Err(Error::invalid(format!("--wm-from must be t1 or self, got '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizerParams {
    /// WM scale constant for FCM, GMM and KDE.
    #[serde(with = "f17")]
    pub c: f64,
    /// White-stripe half width in CDF units.
    #[serde(with = "f17")]
    pub tau: f64,
    /// Histogram-matching percentile landmarks.
    #[serde(with = "f17_vec")]
    pub labels: Vec<f64>,
    #[serde(with = "f17_pair")]
    pub scale: [f64; 2],
    /// RAVEL basis rank.
    pub rank: usize,
    /// Center CSF voxel series before the SVD and regress with an intercept.
    pub center: bool,
    /// Minimum KDE peak prominence as a fraction of the tallest peak.
    #[serde(with = "f17")]
    pub prominence: f64,
    pub contrast: Contrast,
}

impl Default for NormalizerParams {
    fn default() -> Self {
        NormalizerParams {
            c: 1000.0,
            tau: 0.05,
            labels: default_labels(),
            scale: DEFAULT_SCALE,
            rank: 1,
            center: true,
            prominence: DEFAULT_PROMINENCE,
            contrast: Contrast::Other,
        }
    }
}

impl NormalizerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::invalid(format!("c must be positive, got {}", self.c)));
        }
        if !(self.tau > 0.0 && self.tau < 0.5) {
            return Err(Error::invalid(format!("tau must lie in (0, 0.5), got {}", self.tau)));
        }
        if self.rank == 0 {
            return Err(Error::invalid("RAVEL rank must be at least 1"));
        }
        if self.labels.len() < 2
            || self.labels.windows(2).any(|w| !(w[0] < w[1]))
            || self.labels.iter().any(|l| !(0.0..=100.0).contains(l))
        {
            return Err(Error::invalid("landmark labels must be strictly increasing percentiles"));
        }
        if !(self.scale[0] < self.scale[1]) {
            return Err(Error::invalid(format!("standard scale {:?} is empty", self.scale)));
        }
        if !(0.0..1.0).contains(&self.prominence) {
            return Err(Error::invalid(format!(
                "prominence must lie in [0, 1), got {}",
                self.prominence
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerSpec {
    pub method: Method,
    pub params: NormalizerParams,
}

impl NormalizerSpec {
    pub fn new(method: Method) -> Self {
        NormalizerSpec {
            method,
            params: NormalizerParams::default(),
        }
    }

    pub fn with_contrast(mut self, contrast: Contrast) -> Self {
        self.params.contrast = contrast;
        self
    }
}

/// One image handed to fit or apply.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub id: &'a str,
    pub volume: &'a Volume,
    pub brain: &'a Mask,
    /// White-matter mask to take the WM statistic over (FCM, GMM, KDE),
    /// typically segmented from the subject's T1. Without it each method
    /// finds white matter in the image itself.
    pub wm: Option<&'a Mask>,
    /// CSF mask, needed by RAVEL.
    pub csf: Option<&'a Mask>,
}

impl<'a> Sample<'a> {
    pub fn new(id: &'a str, volume: &'a Volume, brain: &'a Mask) -> Self {
        Sample {
            id,
            volume,
            brain,
            wm: None,
            csf: None,
        }
    }

    pub fn with_wm(mut self, wm: &'a Mask) -> Self {
        self.wm = Some(wm);
        self
    }

    pub fn with_csf(mut self, csf: &'a Mask) -> Self {
        self.csf = Some(csf);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelState {
    None,
    Hm(StandardHistogram),
    Ravel(RavelModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizerModel {
    pub spec: NormalizerSpec,
    pub state: ModelState,
}

/// Per-image record of what a normalizer measured.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub method: Option<Method>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    /// WM mean or peak that was scaled to `c`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wm_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stripe: Option<WhiteStripe>,
    /// Image landmark values for histogram matching.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<Vec<f64>>,
}

fn effective_contrast(spec: &NormalizerSpec, v: &Volume) -> Result<Contrast> {
    let want = spec.params.contrast;
    match (want, v.contrast) {
        (Contrast::Other, c) | (c, Contrast::Other) => Ok(c),
        (a, b) if a == b => Ok(a),
        (a, b) => Err(Error::invalid(format!(
            "model was fitted for {a} images but the input is {b}"
        ))),
    }
}

fn check_sample(s: &Sample<'_>) -> Result<()> {
    same_dims(s.volume.dims(), s.brain.dims())?;
    for m in [s.wm, s.csf].into_iter().flatten() {
        same_dims(s.volume.dims(), m.dims())?;
    }
    Ok(())
}

fn ravel_inputs<'a>(
    sample: &[Sample<'a>],
    ws: &'a [Volume],
) -> Result<Vec<RavelInput<'a>>> {
    sample
        .iter()
        .zip(ws)
        .map(|(s, v)| {
            let csf = s
                .csf
                .ok_or_else(|| Error::invalid(format!("RAVEL needs a CSF mask for '{}'", s.id)))?;
            Ok(RavelInput {
                id: s.id,
                volume: v,
                brain: s.brain,
                csf,
            })
        })
        .collect()
}

/// Fits a normalizer on `sample`. Image-wise methods carry no state.
pub fn fit(spec: &NormalizerSpec, sample: &[Sample<'_>]) -> Result<NormalizerModel> {
    spec.params.validate()?;
    if sample.is_empty() {
        return Err(Error::invalid("cannot fit a normalizer on an empty sample"));
    }
    for s in sample {
        check_sample(s)?;
        effective_contrast(spec, s.volume)?;
    }
    let p = &spec.params;
    let state = match spec.method {
        Method::Zscore | Method::Fcm | Method::Gmm | Method::Kde | Method::Whitestripe => {
            ModelState::None
        }
        Method::Hm => {
            let pairs: Vec<(&Volume, &Mask)> = sample.iter().map(|s| (s.volume, s.brain)).collect();
            ModelState::Hm(hm_fit(&pairs, &p.labels, p.scale)?)
        }
        Method::Ravel => {
            let ws = sample
                .iter()
                .map(|s| {
                    let c = effective_contrast(spec, s.volume)?;
                    Ok(whitestripe_normalize(s.volume, s.brain, c, p.tau, p.prominence)?.0)
                })
                .collect::<Result<Vec<_>>>()?;
            let (_, model) = ravel_fit_apply(&ravel_inputs(sample, &ws)?, p.rank, p.center)?;
            ModelState::Ravel(model)
        }
    };
    Ok(NormalizerModel {
        spec: spec.clone(),
        state,
    })
}

/// Applies a fitted normalizer, returning the normalized volume and what was
/// measured along the way.
pub fn apply_with_audit(model: &NormalizerModel, s: &Sample<'_>) -> Result<(Volume, Audit)> {
    check_sample(s)?;
    let spec = &model.spec;
    let p = &spec.params;
    let contrast = effective_contrast(spec, s.volume)?;
    let (v, b) = (s.volume, s.brain);
    let mut audit = Audit {
        method: Some(spec.method),
        ..Audit::default()
    };
    let out = match (spec.method, &model.state) {
        (Method::Zscore, ModelState::None) => {
            let st = crate::volume::masked_stats(v, b)?;
            audit.mean = Some(st.mean);
            audit.std = Some(st.std);
            zscore_normalize(v, b)?
        }
        (Method::Fcm | Method::Gmm | Method::Kde, ModelState::None) => {
            let wm = wm_statistic(spec.method, s, contrast, p.prominence)?;
            audit.wm_value = Some(wm);
            wm_scale_normalize(v, wm, p.c)?
        }
        (Method::Whitestripe, ModelState::None) => {
            let (out, ws) = whitestripe_normalize(v, b, contrast, p.tau, p.prominence)?;
            audit.mean = Some(ws.mean);
            audit.std = Some(ws.std);
            audit.stripe = Some(ws);
            out
        }
        (Method::Hm, ModelState::Hm(sh)) => {
            let s = SortedSamples::new(v.masked_values(b)?)?;
            let lm = crate::density::landmarks_sorted(&s, &sh.labels)?;
            audit.landmarks = Some(lm.values);
            hm_apply(v, b, sh)?
        }
        (Method::Ravel, ModelState::Ravel(rm)) => {
            rm.image_position(s.id)?;
            let (ws_vol, ws) = whitestripe_normalize(v, b, contrast, p.tau, p.prominence)?;
            audit.stripe = Some(ws);
            rm.correct(s.id, &ws_vol)?
        }
        (m, _) => {
            return Err(Error::Schema(format!("model state does not match method {m}")));
        }
    };
    Ok((out, audit))
}

pub fn apply(model: &NormalizerModel, s: &Sample<'_>) -> Result<Volume> {
    apply_with_audit(model, s).map(|(v, _)| v)
}

fn wm_statistic(method: Method, s: &Sample<'_>, contrast: Contrast, prominence: f64) -> Result<f64> {
    match (method, s.wm) {
        (Method::Fcm | Method::Gmm, Some(wm)) => tissue::wm_mean(s.volume, wm),
        (Method::Kde, Some(wm)) => kde_wm_peak(s.volume, wm, contrast, prominence),
        (Method::Fcm, None) => {
            let wm = fcm_wm_mask(s.volume, s.brain, contrast)?;
            tissue::wm_mean(s.volume, &wm)
        }
        (Method::Gmm, None) => gmm_wm_mean(s.volume, s.brain, contrast),
        (Method::Kde, None) => kde_wm_peak(s.volume, s.brain, contrast, prominence),
        (m, _) => Err(Error::invalid(format!("{m} has no white-matter statistic"))),
    }
}

#[derive(Serialize, Deserialize)]
struct RavelState {
    rank: usize,
    centered: bool,
    image_ids: Vec<String>,
    /// One row per image, one column per basis vector.
    #[serde(with = "f17_rows")]
    basis: Vec<Vec<f64>>,
    /// Coefficient volume file names, relative to the model file.
    coefficients: Vec<String>,
}

#[derive(Serialize)]
struct ModelFileOut<'a, S: Serialize> {
    schema_version: u32,
    method: Method,
    params: &'a NormalizerParams,
    state: S,
}

#[derive(Deserialize)]
struct ModelFileIn {
    schema_version: u32,
    method: String,
    params: serde_json::Value,
    #[serde(default)]
    state: serde_json::Value,
}

#[derive(Serialize)]
struct Empty {}

fn coefficient_path(model_path: &Path, j: usize) -> (PathBuf, String) {
    let name = model_path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("model.json");
    let stem = name.strip_suffix(".json").unwrap_or(name);
    let file = format!("{stem}.gamma{j}.nii.gz");
    (model_path.with_file_name(&file), file)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the model as JSON. RAVEL coefficient volumes go to sibling
/// `<stem>.gamma<j>.nii.gz` files next to it.
pub fn save_model(model: &NormalizerModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = &model.spec;
    let text = match &model.state {
        ModelState::None => serde_json::to_string_pretty(&ModelFileOut {
            schema_version: SCHEMA_VERSION,
            method: spec.method,
            params: &spec.params,
            state: Empty {},
        })?,
        ModelState::Hm(sh) => serde_json::to_string_pretty(&ModelFileOut {
            schema_version: SCHEMA_VERSION,
            method: spec.method,
            params: &spec.params,
            state: sh,
        })?,
        ModelState::Ravel(rm) => {
            let mut names = Vec::with_capacity(rm.coefficients.len());
            for (j, coef) in rm.coefficients.iter().enumerate() {
                let (p, name) = coefficient_path(path, j);
                nifti::save_volume(coef, &p)?;
                names.push(name);
            }
            let basis = (0..rm.basis.nrows())
                .map(|r| rm.basis.row(r).iter().copied().collect())
                .collect();
            serde_json::to_string_pretty(&ModelFileOut {
                schema_version: SCHEMA_VERSION,
                method: spec.method,
                params: &spec.params,
                state: RavelState {
                    rank: rm.rank,
                    centered: rm.centered,
                    image_ids: rm.image_ids.clone(),
                    basis,
                    coefficients: names,
                },
            })?
        }
    };
    write_text(path, &text)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NormalizerModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFileIn = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "schema version {} is not supported (expected {SCHEMA_VERSION})",
            file.schema_version
        )));
    }
    let method: Method = file
        .method
        .parse()
        .map_err(|_| Error::Schema(format!("unknown method '{}'", file.method)))?;
    let params: NormalizerParams = serde_json::from_value(file.params)
        .map_err(|e| Error::Schema(format!("bad params: {e}")))?;
    params
        .validate()
        .map_err(|e| Error::Schema(e.to_string()))?;
    let state = match method {
        Method::Hm => {
            let sh: StandardHistogram = serde_json::from_value(file.state)
                .map_err(|e| Error::Schema(format!("bad histogram state: {e}")))?;
            sh.validate()?;
            ModelState::Hm(sh)
        }
        Method::Ravel => {
            let rs: RavelState = serde_json::from_value(file.state)
                .map_err(|e| Error::Schema(format!("bad RAVEL state: {e}")))?;
            let m = rs.image_ids.len();
            if rs.basis.len() != m
                || rs.basis.iter().any(|r| r.len() != rs.rank)
                || rs.coefficients.len() != rs.rank
            {
                return Err(Error::Schema("RAVEL basis shape does not match its rank".into()));
            }
            let basis = nalgebra::DMatrix::from_fn(m, rs.rank, |r, c| rs.basis[r][c]);
            let coefficients = rs
                .coefficients
                .iter()
                .map(|name| nifti::load_volume(path.with_file_name(name)))
                .collect::<Result<Vec<_>>>()?;
            if let Some(first) = coefficients.first() {
                for c in &coefficients {
                    same_dims(first.dims(), c.dims())?;
                }
            }
            ModelState::Ravel(RavelModel {
                basis,
                rank: rs.rank,
                centered: rs.centered,
                image_ids: rs.image_ids,
                coefficients,
            })
        }
        _ => ModelState::None,
    };
    Ok(NormalizerModel {
        spec: NormalizerSpec { method, params },
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::masked_stats;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Three concentric tissue shells plus noise, T1-like ordering.
    fn t1_phantom(gain: f64, seed: u64) -> (Volume, Mask, Mask) {
        let dims = [24, 24, 24];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 15.0).unwrap();
        let r = |i: usize, j: usize, k: usize| {
            let c = 11.5;
            (((i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2)).sqrt()) / 11.0
        };
        let truth = |i, j, k| {
            let rho = r(i, j, k);
            if rho < 0.25 {
                250.0
            } else if rho < 0.7 {
                950.0
            } else {
                650.0
            }
        };
        let clean = Volume::from_fn(dims, truth).unwrap();
        let data = clean.data().iter().map(|x| gain * (x + noise.sample(&mut rng))).collect();
        let v = clean.with_data(data).unwrap().with_contrast(Contrast::T1);
        let brain = Mask::from_fn(dims, |i, j, k| r(i, j, k) < 1.0).unwrap();
        let wm = Mask::from_fn(dims, |i, j, k| {
            let rho = r(i, j, k);
            (0.25..0.7).contains(&rho)
        })
        .unwrap();
        (v, brain, wm)
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn params_validation() {
        let ok = NormalizerParams::default();
        ok.validate().unwrap();
        for bad in [
            NormalizerParams { c: 0.0, ..ok.clone() },
            NormalizerParams { tau: 0.5, ..ok.clone() },
            NormalizerParams { tau: 0.0, ..ok.clone() },
            NormalizerParams { rank: 0, ..ok.clone() },
            NormalizerParams { labels: vec![50.0, 10.0], ..ok.clone() },
            NormalizerParams { scale: [5.0, 5.0], ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn zscore_dispatch_matches_direct() {
        let (v, b, _) = t1_phantom(1.0, 1);
        let spec = NormalizerSpec::new(Method::Zscore);
        let model = fit(&spec, &[Sample::new("a", &v, &b)]).unwrap();
        assert_eq!(model.state, ModelState::None);
        let out = apply(&model, &Sample::new("a", &v, &b)).unwrap();
        assert_eq!(out, zscore_normalize(&v, &b).unwrap());
    }

    #[test]
    fn fcm_model_hits_scale_constant() {
        let (v, b, truth_wm) = t1_phantom(1.7, 2);
        let spec = NormalizerSpec::new(Method::Fcm).with_contrast(Contrast::T1);
        let model = fit(&spec, &[Sample::new("a", &v, &b)]).unwrap();
        let out = apply(&model, &Sample::new("a", &v, &b)).unwrap();
        let wm = masked_stats(&out, &truth_wm).unwrap().mean;
        assert!((wm - 1000.0).abs() < 10.0, "{wm}");
        // with the supplied mask the statistic is exact by construction
        let s = Sample::new("a", &v, &b).with_wm(&truth_wm);
        let out = apply(&model, &s).unwrap();
        assert!((masked_stats(&out, &truth_wm).unwrap().mean - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn contrast_mismatch_rejected() {
        let (v, b, _) = t1_phantom(1.0, 3);
        let model = fit(&NormalizerSpec::new(Method::Kde).with_contrast(Contrast::T1), &[Sample::new("a", &v, &b)])
            .unwrap();
        let t2 = v.clone().with_contrast(Contrast::T2);
        assert!(apply(&model, &Sample::new("a", &t2, &b)).is_err());
        let untagged = v.clone().with_contrast(Contrast::Other);
        apply(&model, &Sample::new("a", &untagged, &b)).unwrap();
    }

    #[test]
    fn hm_single_image_state_and_range() {
        let (v, b, _) = t1_phantom(1.0, 4);
        let spec = NormalizerSpec::new(Method::Hm);
        let model = fit(&spec, &[Sample::new("a", &v, &b)]).unwrap();
        let direct = hm_fit(&[(&v, &b)], &default_labels(), DEFAULT_SCALE).unwrap();
        assert_eq!(model.state, ModelState::Hm(direct));
        let out = apply(&model, &Sample::new("a", &v, &b)).unwrap();
        let st = masked_stats(&out, &b).unwrap();
        // tails extrapolate a little beyond [1, 100]
        assert!(st.min > -50.0 && st.max < 150.0, "{st:?}");
    }

    #[test]
    fn gain_invariance_of_wm_methods() {
        let (v, b, _) = t1_phantom(1.0, 5);
        for method in [Method::Fcm, Method::Gmm, Method::Kde, Method::Hm, Method::Whitestripe] {
            let spec = NormalizerSpec::new(method).with_contrast(Contrast::T1);
            let base = {
                let m = fit(&spec, &[Sample::new("a", &v, &b)]).unwrap();
                apply(&m, &Sample::new("a", &v, &b)).unwrap()
            };
            for a in [0.5, 2.0, 10.0] {
                let va = v.map(|x| a * x).unwrap();
                let m = fit(&spec, &[Sample::new("a", &va, &b)]).unwrap();
                let out = apply(&m, &Sample::new("a", &va, &b)).unwrap();
                let scale = base.data().iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
                let err = out
                    .data()
                    .iter()
                    .zip(base.data())
                    .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
                assert!(err <= 1e-6 * scale, "{method} a={a}: {err}");
            }
        }
    }

    fn ravel_cohort() -> (Vec<Volume>, Mask, Mask) {
        let (base, brain, _) = t1_phantom(1.0, 6);
        let dims = base.dims();
        let csf = Mask::from_fn(dims, |i, j, k| {
            let c = 11.5;
            ((i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2)).sqrt() < 2.5
        })
        .unwrap();
        let vols = [0.9, 1.0, 1.1, 1.2, 0.95]
            .iter()
            .map(|g| base.map(|x| g * x + 30.0 * g).unwrap())
            .collect();
        (vols, brain, csf)
    }

    #[test]
    fn ravel_fit_apply_and_unknown_image() {
        let (vols, brain, csf) = ravel_cohort();
        let ids: Vec<String> = (0..vols.len()).map(|i| format!("s{i}")).collect();
        let sample: Vec<Sample> = vols
            .iter()
            .zip(&ids)
            .map(|(v, id)| Sample::new(id, v, &brain).with_csf(&csf))
            .collect();
        let spec = NormalizerSpec::new(Method::Ravel).with_contrast(Contrast::T1);
        let model = fit(&spec, &sample).unwrap();
        let out = apply(&model, &sample[2]).unwrap();
        assert_eq!(out.dims(), vols[2].dims());
        assert!(apply(&model, &Sample::new("ghost", &vols[0], &brain)).is_err());

        let missing_csf: Vec<Sample> = sample.iter().map(|s| Sample { csf: None, ..*s }).collect();
        assert!(fit(&spec, &missing_csf).is_err());

        let small = Volume::zeros([4, 4, 4]).unwrap();
        let mut bad = sample.clone();
        bad[1].volume = &small;
        assert!(fit(&spec, &bad).is_err());
    }

    #[test]
    fn model_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (v, b, _) = t1_phantom(1.0, 7);
        let hm = fit(&NormalizerSpec::new(Method::Hm), &[Sample::new("a", &v, &b)]).unwrap();
        let p = dir.path().join("hm_t1.json");
        save_model(&hm, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"schema_version\": 1"));
        assert!(text.contains("\"standard_values\""));
        assert_eq!(load_model(&p).unwrap(), hm);

        let zs = fit(&NormalizerSpec::new(Method::Zscore), &[Sample::new("a", &v, &b)]).unwrap();
        let p = dir.path().join("zscore.json");
        save_model(&zs, &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), zs);

        let (vols, brain, csf) = ravel_cohort();
        let ids: Vec<String> = (0..vols.len()).map(|i| format!("s{i}")).collect();
        let sample: Vec<Sample> = vols
            .iter()
            .zip(&ids)
            .map(|(v, id)| Sample::new(id, v, &brain).with_csf(&csf))
            .collect();
        let rv = fit(&NormalizerSpec::new(Method::Ravel), &sample).unwrap();
        let p = dir.path().join("ravel_t1.json");
        save_model(&rv, &p).unwrap();
        assert!(dir.path().join("ravel_t1.gamma0.nii.gz").exists());
        let back = load_model(&p).unwrap();
        let (ModelState::Ravel(a), ModelState::Ravel(b)) = (&rv.state, &back.state) else {
            panic!("state kind changed");
        };
        assert!((&a.basis - &b.basis).amax() <= 1e-15);
        assert_eq!(a.coefficients, b.coefficients);
    }

    #[test]
    fn model_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        std::fs::write(&p, r#"{"schema_version":1,"method":"magic","params":{},"state":{}}"#).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Schema(_))));
        std::fs::write(&p, r#"{"schema_version":2,"method":"zscore","params":{},"state":{}}"#).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Schema(_))));
        std::fs::write(&p, r#"{"schema_version":1,"method":"zscore","params":{},"state":{}}"#).unwrap();
        assert_eq!(load_model(&p).unwrap().spec, NormalizerSpec::new(Method::Zscore));
        assert!(matches!(load_model(dir.path().join("none.json")), Err(Error::MissingFile(_))));
    }
}
