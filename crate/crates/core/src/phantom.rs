//! Synthetic multi-contrast brain phantoms with per-subject scanner
//! intensity corruption.
//!
//! Every subject is a deformed ellipsoid with a central CSF ventricle, white
//! matter around it, a grey-matter shell and an outer CSF rim. All three
//! contrasts share one label map, so they are co-registered by construction.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{CohortManifest, SubjectEntry, TruthPaths};
use crate::nifti;
use crate::par;
use crate::rng;
use crate::volume::{masked_stats, Contrast, Mask, Volume};

/// Clean tissue means for one contrast.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueMeans {
    pub csf: f64,
    pub gm: f64,
    pub wm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub n_subjects: usize,
    pub dims: [usize; 3],
    pub t1: TissueMeans,
    pub t2: TissueMeans,
    pub flair: TissueMeans,
    /// Standard deviation of the noise added to the clean image.
    pub noise: f64,
    pub gain: [f64; 2],
    pub gamma: [f64; 2],
    pub offset: [f64; 2],
    /// Largest relative change of the ellipsoid axes and of the tissue
    /// boundaries between subjects. Kept small by default: it stands in for
    /// the residual misalignment left after deformable registration, which
    /// RAVEL's voxelwise regression assumes.
    pub deformation: f64,
    pub seed: u64,
    /// Compress the last subject's T1 histogram (power law below one) and
    /// rescale it so its GM mean sits at the cohort's mean T1 WM intensity.
    pub outlier: bool,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            n_subjects: 18,
            dims: [64, 64, 64],
            t1: TissueMeans { csf: 250.0, gm: 650.0, wm: 950.0 },
            t2: TissueMeans { csf: 1600.0, gm: 750.0, wm: 500.0 },
            flair: TissueMeans { csf: 150.0, gm: 1000.0, wm: 700.0 },
            noise: 20.0,
            gain: [0.5, 2.0],
            gamma: [0.9, 1.1],
            offset: [0.0, 0.0],
            deformation: 0.01,
            seed: 0,
            outlier: false,
        }
    }
}

/// Reference intensity that the gamma curve pivots around.
const GAMMA_PIVOT: f64 = 1000.0;
/// Exponent that compresses the outlier's T1 histogram.
const OUTLIER_GAMMA: f64 = 0.75;

fn range_ok(r: [f64; 2]) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::invalid("phantom cohort needs at least one subject"));
        }
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::invalid(format!("phantom dims {:?} are below 16", self.dims)));
        }
        if !(range_ok(self.gain) && self.gain[0] > 0.0) {
            return Err(Error::invalid(format!("gain range {:?} must be positive", self.gain)));
        }
        if !(range_ok(self.gamma) && self.gamma[0] > 0.0) {
            return Err(Error::invalid(format!("gamma range {:?} must be positive", self.gamma)));
        }
        if !range_ok(self.offset) {
            return Err(Error::invalid(format!("offset range {:?} is invalid", self.offset)));
        }
        if !(self.noise >= 0.0) || !(0.0..0.2).contains(&self.deformation) {
            return Err(Error::invalid("noise must be >= 0 and deformation in [0, 0.2)"));
        }
        let t1 = &self.t1;
        let t2 = &self.t2;
        let fl = &self.flair;
        let all_positive = [t1, t2, fl].iter().all(|m| m.csf > 0.0 && m.gm > 0.0 && m.wm > 0.0);
        if !all_positive
            || !(t1.csf < t1.gm && t1.gm < t1.wm)
            || !(t2.wm < t2.gm && t2.gm < t2.csf)
            || !(fl.csf < fl.gm && fl.csf < fl.wm)
        {
            return Err(Error::invalid(
                "tissue means must be positive with T1 CSF<GM<WM, T2 WM<GM<CSF, FLAIR CSF lowest",
            ));
        }
        Ok(())
    }

    fn means(&self, c: Contrast) -> TissueMeans {
        match c {
            Contrast::T2 => self.t2,
            Contrast::Flair => self.flair,
            _ => self.t1,
        }
    }
}

/// Monotone intensity corruption `gain * p * (I / p)^gamma + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub gain: f64,
    pub gamma: f64,
    pub offset: f64,
}

impl Corruption {
    pub fn apply(&self, x: f64) -> f64 {
        let curved = if self.gamma == 1.0 {
            x
        } else {
            GAMMA_PIVOT * (x.max(0.0) / GAMMA_PIVOT).powf(self.gamma)
        };
        self.gain * curved + self.offset
    }
}

/// Extra power-law compression `gain * p * (I / p)^gamma` applied on top of
/// the outlier's regular corruption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierTransform {
    pub gain: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub t1: Volume,
    pub t2: Volume,
    pub flair: Volume,
    pub brain: Mask,
    pub csf: Mask,
    pub gm: Mask,
    pub wm: Mask,
    pub corruption: BTreeMap<Contrast, Corruption>,
    pub outlier: Option<OutlierTransform>,
}

impl Subject {
    pub fn image(&self, c: Contrast) -> Result<&Volume> {
        match c {
            Contrast::T1 => Ok(&self.t1),
            Contrast::T2 => Ok(&self.t2),
            Contrast::Flair => Ok(&self.flair),
            Contrast::Other => Err(Error::invalid("phantoms have no untagged contrast")),
        }
    }
}

#[derive(Clone, Copy)]
enum Label {
    Background,
    Csf,
    Gm,
    Wm,
}

struct Geometry {
    axes: [f64; 3],
    /// Coefficients of the smooth angular deformation terms.
    warp: [f64; 4],
    /// Normalized radii of the ventricle, WM outer, and GM outer boundaries.
    bounds: [f64; 3],
}

impl Geometry {
    fn draw(dims: [usize; 3], amount: f64, rng: &mut impl Rng) -> Self {
        let mut jitter = |s: f64| 1.0 + s * amount * rng.random_range(-1.0..1.0);
        let base = [0.32, 0.30, 0.27];
        let axes = [0, 1, 2].map(|a| base[a] * dims[a] as f64);
        let axes = axes.map(|x| x * jitter(1.0));
        let warp = [0; 4].map(|_| jitter(0.5) - 1.0);
        let bounds = [0.30 * jitter(0.6), 0.75 * jitter(0.4), 0.95];
        Geometry { axes, warp, bounds }
    }

    fn label(&self, dims: [usize; 3], i: usize, j: usize, k: usize) -> Label {
        let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
        let d = [i as f64 - c[0], j as f64 - c[1], k as f64 - c[2]];
        let q = [d[0] / self.axes[0], d[1] / self.axes[1], d[2] / self.axes[2]];
        let r = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        let rho = if r > 0.0 {
            let u = q.map(|x| x / r);
            let w = &self.warp;
            r * (1.0 + w[0] * u[0] * u[1] + w[1] * u[1] * u[2] + w[2] * u[0] * u[2] + w[3] * (u[0] * u[0] - u[1] * u[1]))
        } else {
            0.0
        };
        match rho {
            x if x >= 1.0 => Label::Background,
            x if x < self.bounds[0] || x >= self.bounds[2] => Label::Csf,
            x if x < self.bounds[1] => Label::Wm,
            _ => Label::Gm,
        }
    }
}

fn draw(range: [f64; 2], rng: &mut impl Rng) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

fn subject(spec: &PhantomSpec, index: usize) -> Result<Subject> {
    let mut rng = rng::stream(spec.seed, index as u64);
    let dims = spec.dims;
    let geo = Geometry::draw(dims, spec.deformation, &mut rng);
    let labels: Vec<Label> = (0..dims[0] * dims[1] * dims[2])
        .map(|idx| {
            let [i, j, k] = crate::volume::coords(dims, idx);
            geo.label(dims, i, j, k)
        })
        .collect();
    let mask_of = |f: fn(Label) -> bool| Mask::new(dims, labels.iter().map(|&l| f(l)).collect());
    let brain = mask_of(|l| !matches!(l, Label::Background))?;
    let csf = mask_of(|l| matches!(l, Label::Csf))?;
    let gm = mask_of(|l| matches!(l, Label::Gm))?;
    let wm = mask_of(|l| matches!(l, Label::Wm))?;

    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid sd");
    let mut corruption = BTreeMap::new();
    let mut image = |contrast: Contrast, rng: &mut rand_chacha::ChaCha8Rng| -> Result<Volume> {
        let tm = spec.means(contrast);
        let cor = Corruption {
            gain: draw(spec.gain, rng),
            gamma: draw(spec.gamma, rng),
            offset: draw(spec.offset, rng),
        };
        corruption.insert(contrast, cor);
        let data = labels
            .iter()
            .map(|l| {
                let clean = match l {
                    Label::Background => return 0.0,
                    Label::Csf => tm.csf,
                    Label::Gm => tm.gm,
                    Label::Wm => tm.wm,
                };
                let eps = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                cor.apply((clean + eps).max(1.0))
            })
            .collect();
        Ok(Volume::new(dims, [1.0; 3], data)?.with_contrast(contrast))
    };
    let t1 = image(Contrast::T1, &mut rng)?;
    let t2 = image(Contrast::T2, &mut rng)?;
    let flair = image(Contrast::Flair, &mut rng)?;
    Ok(Subject {
        id: format!("sub-{:02}", index + 1),
        t1,
        t2,
        flair,
        brain,
        csf,
        gm,
        wm,
        corruption,
        outlier: None,
    })
}

/// Generates the cohort. Subject `i` draws from stream `i` of the seed, so
/// the result does not depend on how subjects are scheduled.
pub fn generate_cohort(spec: &PhantomSpec) -> Result<Vec<Subject>> {
    spec.validate()?;
    let mut subjects = par::map_range(spec.n_subjects, |i| subject(spec, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    if spec.outlier && subjects.len() >= 2 {
        let n = subjects.len();
        let cohort_wm = subjects[..n - 1]
            .iter()
            .map(|s| masked_stats(&s.t1, &s.wm).map(|st| st.mean))
            .sum::<Result<f64>>()?
            / (n - 1) as f64;
        let last = &mut subjects[n - 1];
        let curve = Corruption {
            gain: 1.0,
            gamma: OUTLIER_GAMMA,
            offset: 0.0,
        };
        let curved = last.t1.map(|x| curve.apply(x))?;
        let tf = OutlierTransform {
            gain: cohort_wm / masked_stats(&curved, &last.gm)?.mean,
            gamma: OUTLIER_GAMMA,
        };
        let data = curved
            .data()
            .iter()
            .zip(last.brain.data())
            .map(|(&x, &inside)| if inside { tf.gain * x } else { 0.0 })
            .collect();
        last.t1 = last.t1.with_data(data)?;
        last.outlier = Some(tf);
    }
    Ok(subjects)
}

/// Writes every subject under `dir/<id>/` and a `manifest.json` splitting
/// the cohort into a first-half training set and a second-half test set.
pub fn write_cohort(subjects: &[Subject], dir: impl AsRef<Path>) -> Result<CohortManifest> {
    let dir = dir.as_ref();
    let mut entries = Vec::with_capacity(subjects.len());
    for s in subjects {
        let sub = dir.join(&s.id);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let rel = |name: &str| format!("{}/{name}", s.id);
        let mut images = BTreeMap::new();
        for c in [Contrast::T1, Contrast::T2, Contrast::Flair] {
            let name = format!("{c}.nii.gz");
            nifti::save_volume(s.image(c)?, sub.join(&name))?;
            images.insert(c, rel(&name).into());
        }
        for (m, name) in [(&s.brain, "brain"), (&s.csf, "csf"), (&s.gm, "gm"), (&s.wm, "wm")] {
            nifti::save_mask(m, sub.join(format!("{name}.nii.gz")))?;
        }
        entries.push(SubjectEntry {
            id: s.id.clone(),
            images,
            brain: rel("brain.nii.gz").into(),
            truth: Some(TruthPaths {
                csf: rel("csf.nii.gz").into(),
                gm: rel("gm.nii.gz").into(),
                wm: rel("wm.nii.gz").into(),
            }),
            corruption: s.corruption.clone(),
            outlier: s.outlier,
        });
    }
    let half = subjects.len() / 2;
    let manifest = CohortManifest {
        train: entries[..half].iter().map(|e| e.id.clone()).collect(),
        test: entries[half..].iter().map(|e| e.id.clone()).collect(),
        subjects: entries,
    };
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}
