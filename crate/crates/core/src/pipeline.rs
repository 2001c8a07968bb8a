//! The normalize, synthesize, evaluate experiment over a cohort.
//!
//! Normalizers and synthesis models are fitted on the training subjects only.
//! RAVEL is the exception that needs the images it corrects inside its own
//! fit, so test images get a separate RAVEL fit over the test subjects.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::LoadedSubject;
use crate::metrics::{mssim, mutual_information, ncc, Metric, MetricRow, QualityReport, SsimOptions};
use crate::normalize::{
    apply_with_audit, fcm_wm_mask, fit, gmm_wm_mask, Audit, Method, NormalizerModel, NormalizerParams,
    NormalizerSpec, Sample, WmSource,
};
use crate::synth::{
    fit_forest, fit_poly, predict_volume, sample_patches, ForestOptions, PatchSpec, PolyOptions, RegressionModel,
    TrainingSet,
};
use crate::tissue::{class_mask, fcm_segment, FcmOptions, Tissue};
use crate::volume::{Contrast, Mask, Volume};
use crate::{par, rng};

/// Name of the unnormalized baseline.
pub const RAW: &str = "raw";

/// A normalization method or the raw passthrough.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Normalization {
    Raw,
    Method(Method),
}

impl Normalization {
    /// Raw first, then every method.
    pub fn all() -> Vec<Normalization> {
        std::iter::once(Normalization::Raw)
            .chain(Method::ALL.into_iter().map(Normalization::Method))
            .collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Normalization::Raw => RAW,
            Normalization::Method(m) => m.as_str(),
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case(RAW) || s.eq_ignore_ascii_case("none") {
            Ok(Normalization::Raw)
        } else {
            s.parse().map(Normalization::Method)
        }
    }
}

impl TryFrom<String> for Normalization {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Normalization> for String {
    fn from(n: Normalization) -> String {
        n.as_str().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SynthKind {
    #[serde(rename = "pr")]
    Poly,
    #[serde(rename = "rf")]
    Forest,
}

impl SynthKind {
    pub const ALL: [SynthKind; 2] = [SynthKind::Poly, SynthKind::Forest];

    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::Poly => "pr",
            SynthKind::Forest => "rf",
        }
    }

    /// Center plus six neighbours for the polynomial, the 25-voxel
    /// long-range cross for the forest.
    pub fn patch(self) -> PatchSpec {
        match self {
            SynthKind::Poly => PatchSpec::center_six(),
            SynthKind::Forest => PatchSpec::jog25(),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pr" | "poly" | "poly3" => Ok(SynthKind::Poly),
            "rf" | "forest" => Ok(SynthKind::Forest),
            _ => Err(Error::invalid(format!("unknown synthesis model '{s}'"))),
        }
    }
}

/// Source and target contrast of a synthesis task, written `t1:flair`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ContrastPair {
    pub source: Contrast,
    pub target: Contrast,
}

impl ContrastPair {
    pub fn new(source: Contrast, target: Contrast) -> Self {
        ContrastPair { source, target }
    }

    /// T1 to FLAIR and T1 to T2.
    pub fn defaults() -> Vec<ContrastPair> {
        vec![
            ContrastPair::new(Contrast::T1, Contrast::Flair),
            ContrastPair::new(Contrast::T1, Contrast::T2),
        ]
    }

    /// Task label used in reports and file names, e.g. `t1-flair`.
    pub fn label(&self) -> String {
        format!("{}-{}", self.source, self.target)
    }
}

impl fmt::Display for ContrastPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.source, self.target)
    }
}

impl FromStr for ContrastPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once("->")
            .or_else(|| s.split_once(':'))
            .or_else(|| s.split_once('-'))
            .ok_or_else(|| Error::invalid(format!("contrast pair '{s}' is not source:target")))?;
        let pair = ContrastPair::new(a.trim().parse()?, b.trim().parse()?);
        if pair.source == pair.target || pair.source == Contrast::Other || pair.target == Contrast::Other {
            return Err(Error::invalid(format!("contrast pair '{s}' needs two distinct tagged contrasts")));
        }
        Ok(pair)
    }
}

impl TryFrom<String> for ContrastPair {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ContrastPair> for String {
    fn from(p: ContrastPair) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormSettings {
    pub params: NormalizerParams,
    /// Where FCM, GMM and KDE take their white-matter region from; `None`
    /// means each method's default.
    pub wm_from: Option<WmSource>,
}

impl NormSettings {
    pub fn wm_source(&self, method: Method) -> WmSource {
        self.wm_from.unwrap_or(method.default_wm_source())
    }
}

/// White-matter mask segmented from the subject's T1, with the same
/// segmenter the method itself uses.
pub fn t1_wm_mask(method: Method, s: &LoadedSubject) -> Result<Mask> {
    let t1 = s.image(Contrast::T1)?;
    match method {
        Method::Gmm => gmm_wm_mask(t1, &s.brain, Contrast::T1),
        _ => fcm_wm_mask(t1, &s.brain, Contrast::T1),
    }
}

/// CSF mask from an FCM segmentation of the subject's T1, used by RAVEL.
pub fn t1_csf_mask(s: &LoadedSubject) -> Result<Mask> {
    let mm = fcm_segment(s.image(Contrast::T1)?, &s.brain, FcmOptions::default())?;
    class_mask(&mm.hard_labels(), Contrast::T1, Tissue::Csf)
}

/// Fits one model per contrast for `method` on `subjects`.
pub fn fit_normalizers(
    method: Method,
    subjects: &[&LoadedSubject],
    contrasts: &[Contrast],
    settings: &NormSettings,
) -> Result<BTreeMap<Contrast, NormalizerModel>> {
    let csf: Vec<Option<Mask>> = if method == Method::Ravel {
        par::map_slice(subjects, |s| t1_csf_mask(s).map(Some))
            .into_iter()
            .collect::<Result<_>>()?
    } else {
        vec![None; subjects.len()]
    };
    let mut models = BTreeMap::new();
    for &c in contrasts {
        let spec = NormalizerSpec {
            method,
            params: settings.params.clone(),
        }
        .with_contrast(c);
        let samples = subjects
            .iter()
            .zip(&csf)
            .map(|(s, m)| {
                let sample = Sample::new(&s.id, s.image(c)?, &s.brain);
                Ok(match m {
                    Some(m) => sample.with_csf(m),
                    None => sample,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        models.insert(c, fit(&spec, &samples)?);
    }
    Ok(models)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSubject {
    pub id: String,
    pub volumes: BTreeMap<Contrast, Volume>,
    /// Empty for the raw passthrough.
    pub audits: BTreeMap<Contrast, Audit>,
}

/// Applies per-contrast models to one subject.
pub fn normalize_subject(
    models: &BTreeMap<Contrast, NormalizerModel>,
    s: &LoadedSubject,
    settings: &NormSettings,
) -> Result<NormalizedSubject> {
    let method = models
        .values()
        .next()
        .map(|m| m.spec.method)
        .ok_or_else(|| Error::invalid("no normalizer models to apply"))?;
    let wm = if method.uses_wm_mask() && settings.wm_source(method) == WmSource::T1 {
        Some(t1_wm_mask(method, s)?)
    } else {
        None
    };
    let mut volumes = BTreeMap::new();
    let mut audits = BTreeMap::new();
    for (&c, model) in models {
        let sample = Sample::new(&s.id, s.image(c)?, &s.brain);
        let sample = match &wm {
            Some(m) => sample.with_wm(m),
            None => sample,
        };
        let (v, audit) = apply_with_audit(model, &sample)?;
        volumes.insert(c, v);
        audits.insert(c, audit);
    }
    Ok(NormalizedSubject {
        id: s.id.clone(),
        volumes,
        audits,
    })
}

/// Copies the requested contrasts unchanged.
pub fn raw_subject(s: &LoadedSubject, contrasts: &[Contrast]) -> Result<NormalizedSubject> {
    let volumes = contrasts
        .iter()
        .map(|&c| Ok((c, s.image(c)?.clone())))
        .collect::<Result<_>>()?;
    Ok(NormalizedSubject {
        id: s.id.clone(),
        volumes,
        audits: BTreeMap::new(),
    })
}

/// Models fitted for one normalization: on the training subjects, plus a
/// RAVEL fit over the test subjects when the method is RAVEL.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FittedNormalizers {
    pub train: BTreeMap<Contrast, NormalizerModel>,
    pub test: Option<BTreeMap<Contrast, NormalizerModel>>,
}

pub fn fit_for_split(
    norm: Normalization,
    train: &[&LoadedSubject],
    test: &[&LoadedSubject],
    contrasts: &[Contrast],
    settings: &NormSettings,
) -> Result<FittedNormalizers> {
    match norm {
        Normalization::Raw => Ok(FittedNormalizers::default()),
        Normalization::Method(m) => Ok(FittedNormalizers {
            train: fit_normalizers(m, train, contrasts, settings)?,
            test: if m == Method::Ravel && !test.is_empty() {
                Some(fit_normalizers(m, test, contrasts, settings)?)
            } else {
                None
            },
        }),
    }
}

/// Normalizes the training then the test subjects, in that order.
pub fn normalize_split(
    norm: Normalization,
    train: &[&LoadedSubject],
    test: &[&LoadedSubject],
    contrasts: &[Contrast],
    settings: &NormSettings,
) -> Result<Vec<NormalizedSubject>> {
    let fitted = fit_for_split(norm, train, test, contrasts, settings)?;
    let run = |subjects: &[&LoadedSubject], models: &BTreeMap<Contrast, NormalizerModel>| {
        par::map_slice(subjects, |s| match norm {
            Normalization::Raw => raw_subject(s, contrasts),
            Normalization::Method(_) => normalize_subject(models, s, settings),
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()
    };
    let mut out = run(train, &fitted.train)?;
    out.extend(run(test, fitted.test.as_ref().unwrap_or(&fitted.train))?);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    /// Voxels drawn per training image.
    pub samples_per_image: usize,
    pub poly: PolyOptions,
    /// The forest seed is replaced by one derived from `seed`.
    pub forest: ForestOptions,
    pub seed: u64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            samples_per_image: 100_000,
            poly: PolyOptions::default(),
            forest: ForestOptions::default(),
            seed: 0,
        }
    }
}

/// Source image, target image and brain mask of one training subject.
pub type SynthInput<'a> = (&'a str, &'a Volume, &'a Volume, &'a Mask);

/// Samples patches from every training image and concatenates them in input
/// order. Voxel draws depend on the subject and task, not on the
/// normalization, so methods are compared on the same voxels.
pub fn training_set(kind: SynthKind, pair: ContrastPair, inputs: &[SynthInput<'_>], settings: &SynthSettings) -> Result<TrainingSet> {
    let patch = kind.patch();
    let stage = format!("sample/{}/{kind}", pair.label());
    let sets = par::map_slice(inputs, |&(id, src, tgt, b)| {
        sample_patches(id, src, tgt, b, &patch, settings.samples_per_image, rng::derive(settings.seed, &stage, id))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    TrainingSet::concat(&sets)
}

pub fn train_synth(
    kind: SynthKind,
    pair: ContrastPair,
    normalization: &str,
    inputs: &[SynthInput<'_>],
    settings: &SynthSettings,
) -> Result<RegressionModel> {
    let ts = training_set(kind, pair, inputs, settings)?;
    info!("{normalization} {} {kind}: fitting on {} rows", pair.label(), ts.len());
    match kind {
        SynthKind::Poly => fit_poly(&ts, &kind.patch(), normalization, settings.poly),
        SynthKind::Forest => {
            let opts = ForestOptions {
                seed: rng::derive(settings.seed, "forest", &pair.label()),
                ..settings.forest
            };
            fit_forest(&ts, &kind.patch(), normalization, opts)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub ssim: SsimOptions,
    pub mi_bins: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            ssim: SsimOptions::default(),
            mi_bins: crate::metrics::DEFAULT_BINS,
        }
    }
}

/// NCC, MSSIM and MI of a prediction against its target inside `b`.
pub fn score(pred: &Volume, target: &Volume, b: &Mask, settings: &EvalSettings) -> Result<[(Metric, f64); 3]> {
    Ok([
        (Metric::Ncc, ncc(pred, target, b)?),
        (Metric::Mssim, mssim(pred, target, b, settings.ssim)?),
        (Metric::Mi, mutual_information(pred, target, b, settings.mi_bins)?),
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub normalizations: Vec<Normalization>,
    pub pairs: Vec<ContrastPair>,
    pub synth: Vec<SynthKind>,
    pub norm: NormSettings,
    pub synth_settings: SynthSettings,
    pub eval: EvalSettings,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            normalizations: Normalization::all(),
            pairs: ContrastPair::defaults(),
            synth: SynthKind::ALL.to_vec(),
            norm: NormSettings::default(),
            synth_settings: SynthSettings::default(),
            eval: EvalSettings::default(),
            resamples: crate::metrics::BOOTSTRAP_RESAMPLES,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn contrasts(&self) -> Vec<Contrast> {
        let mut c: Vec<Contrast> = self.pairs.iter().flat_map(|p| [p.source, p.target]).collect();
        c.sort();
        c.dedup();
        c
    }
}

/// Checks the split names known, distinct subjects and returns them.
pub fn split_subjects<'a>(
    subjects: &'a [LoadedSubject],
    train: &[String],
    test: &[String],
) -> Result<(Vec<&'a LoadedSubject>, Vec<&'a LoadedSubject>)> {
    let find = |id: &String| {
        subjects
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::invalid(format!("split names unknown subject '{id}'")))
    };
    if let Some(id) = train.iter().find(|id| test.contains(id)) {
        return Err(Error::invalid(format!("subject '{id}' is in both train and test sets")));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("train and test sets must both be non-empty"));
    }
    Ok((
        train.iter().map(find).collect::<Result<_>>()?,
        test.iter().map(find).collect::<Result<_>>()?,
    ))
}

/// Runs every normalization, task and synthesis model, scoring test-set
/// predictions against the identically normalized target images.
pub fn run_experiment(
    subjects: &[LoadedSubject],
    train: &[String],
    test: &[String],
    cfg: &ExperimentConfig,
) -> Result<QualityReport> {
    let (train_s, test_s) = split_subjects(subjects, train, test)?;
    if !cfg.normalizations.contains(&Normalization::Raw) {
        return Err(Error::invalid("the experiment needs the raw baseline"));
    }
    let contrasts = cfg.contrasts();
    let mut rows = Vec::new();
    for &norm in &cfg.normalizations {
        info!("normalizing with {norm}");
        let normalized = normalize_split(norm, &train_s, &test_s, &contrasts, &cfg.norm)?;
        let (tr, te) = normalized.split_at(train_s.len());
        for pair in &cfg.pairs {
            let inputs: Vec<SynthInput<'_>> = tr
                .iter()
                .zip(&train_s)
                .map(|(n, s)| (n.id.as_str(), &n.volumes[&pair.source], &n.volumes[&pair.target], &s.brain))
                .collect();
            for &kind in &cfg.synth {
                let model = train_synth(kind, *pair, norm.as_str(), &inputs, &cfg.synth_settings)?;
                let scores = par::map_slice(&te.iter().zip(&test_s).collect::<Vec<_>>(), |(n, s)| {
                    let pred = predict_volume(&model, &n.volumes[&pair.source], &s.brain)?;
                    score(&pred, &n.volumes[&pair.target], &s.brain, &cfg.eval)
                });
                for (n, sc) in te.iter().zip(scores) {
                    for (metric, value) in sc? {
                        rows.push(MetricRow {
                            task: pair.label(),
                            synth: kind.to_string(),
                            method: norm.to_string(),
                            subject: n.id.clone(),
                            metric,
                            value,
                        });
                    }
                }
            }
        }
    }
    QualityReport::build(rows, RAW, cfg.resamples, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_cohort, PhantomSpec, Subject};

    fn loaded(s: &Subject) -> LoadedSubject {
        LoadedSubject {
            id: s.id.clone(),
            images: BTreeMap::from([
                (Contrast::T1, s.t1.clone()),
                (Contrast::T2, s.t2.clone()),
                (Contrast::Flair, s.flair.clone()),
            ]),
            brain: s.brain.clone(),
            truth: None,
        }
    }

    fn cohort(n: usize, seed: u64) -> Vec<LoadedSubject> {
        let spec = PhantomSpec {
            n_subjects: n,
            dims: [32, 32, 32],
            seed,
            ..PhantomSpec::default()
        };
        generate_cohort(&spec).unwrap().iter().map(loaded).collect()
    }

    #[test]
    fn names_parse_and_print() {
        for n in Normalization::all() {
            assert_eq!(n.as_str().parse::<Normalization>().unwrap(), n);
        }
        let p: ContrastPair = "t1:flair".parse().unwrap();
        assert_eq!(p, "T1->FLAIR".parse().unwrap());
        assert_eq!(p.label(), "t1-flair");
        assert_eq!(p.label().parse::<ContrastPair>().unwrap(), p);
        assert!("t1:t1".parse::<ContrastPair>().is_err());
        assert!("t1".parse::<ContrastPair>().is_err());
        assert_eq!(serde_json::to_string(&p).unwrap(), "\"t1:flair\"");
        assert_eq!("rf".parse::<SynthKind>().unwrap().patch().len(), 25);
        assert_eq!("pr".parse::<SynthKind>().unwrap().patch().len(), 7);
    }

    #[test]
    fn split_rejects_overlap() {
        let c = cohort(3, 1);
        let ids = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(split_subjects(&c, &ids(&["sub-01"]), &ids(&["sub-02", "sub-03"])).is_ok());
        assert!(split_subjects(&c, &ids(&["sub-01"]), &ids(&["sub-01"])).is_err());
        assert!(split_subjects(&c, &ids(&["sub-09"]), &ids(&["sub-01"])).is_err());
        assert!(split_subjects(&c, &[], &ids(&["sub-01"])).is_err());
    }

    #[test]
    fn raw_passthrough_is_bit_identical() {
        let c = cohort(2, 2);
        let s = raw_subject(&c[0], &[Contrast::T1, Contrast::Flair]).unwrap();
        assert_eq!(s.volumes[&Contrast::T1], c[0].images[&Contrast::T1]);
        assert!(s.audits.is_empty());
    }

    #[test]
    fn fcm_brings_wm_to_scale() {
        let c = cohort(2, 3);
        let refs: Vec<&LoadedSubject> = c.iter().collect();
        let settings = NormSettings::default();
        let out = normalize_split(Normalization::Method(Method::Fcm), &refs[..1], &refs[1..], &[Contrast::T1], &settings).unwrap();
        for (n, s) in out.iter().zip(&c) {
            let wm = t1_wm_mask(Method::Fcm, s).unwrap();
            let mean = crate::volume::masked_stats(&n.volumes[&Contrast::T1], &wm).unwrap().mean;
            assert!((mean - 1000.0).abs() < 1e-9 * 1000.0, "{mean}");
        }
    }

    #[test]
    fn training_models_ignore_test_images() {
        let mut c = cohort(4, 4);
        let train: Vec<String> = vec!["sub-01".into(), "sub-02".into()];
        let test: Vec<String> = vec!["sub-03".into(), "sub-04".into()];
        let settings = NormSettings::default();
        let fit_train = |c: &[LoadedSubject]| {
            let (tr, te) = split_subjects(c, &train, &test).unwrap();
            fit_for_split(Normalization::Method(Method::Hm), &tr, &te, &[Contrast::T1], &settings).unwrap()
        };
        let before = fit_train(&c);
        let t1 = c[3].images.get_mut(&Contrast::T1).unwrap();
        *t1 = t1.map(|x| 3.0 * x + 50.0).unwrap();
        assert_eq!(fit_train(&c), before);
    }

    #[test]
    fn small_experiment_is_deterministic() {
        let c = cohort(4, 5);
        let train: Vec<String> = vec!["sub-01".into(), "sub-02".into()];
        let test: Vec<String> = vec!["sub-03".into(), "sub-04".into()];
        let cfg = ExperimentConfig {
            normalizations: vec![Normalization::Raw, Normalization::Method(Method::Zscore)],
            pairs: vec![ContrastPair::new(Contrast::T1, Contrast::Flair)],
            synth_settings: SynthSettings {
                samples_per_image: 400,
                forest: ForestOptions { trees: 4, ..ForestOptions::default() },
                ..SynthSettings::default()
            },
            eval: EvalSettings {
                ssim: SsimOptions { window: 5, ..SsimOptions::default() },
                mi_bins: 16,
            },
            resamples: 200,
            ..ExperimentConfig::default()
        };
        let a = run_experiment(&c, &train, &test, &cfg).unwrap();
        // methods x tasks x synth x metrics x test images
        assert_eq!(a.rows.len(), 2 * 2 * 3 * 2);
        let b = par::sequential(|| run_experiment(&c, &train, &test, &cfg)).unwrap();
        assert_eq!(a, b);
    }
}
