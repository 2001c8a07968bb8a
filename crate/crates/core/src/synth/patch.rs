//! Patch layouts and training-set sampling.

use std::collections::HashSet;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::volume::{same_dims, Mask, Volume};

/// Voxel offsets gathered around each patch center. The zero offset comes
/// first by construction of the built-in layouts but may sit anywhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[i32; 3]>", into = "Vec<[i32; 3]>")]
pub struct PatchSpec {
    offsets: Vec<[i32; 3]>,
}

impl PatchSpec {
    pub fn new(offsets: Vec<[i32; 3]>) -> Result<Self> {
        if !offsets.contains(&[0, 0, 0]) {
            return Err(Error::invalid("patch must contain the center offset"));
        }
        let unique: HashSet<_> = offsets.iter().collect();
        if unique.len() != offsets.len() {
            return Err(Error::invalid("patch offsets must be unique"));
        }
        Ok(PatchSpec { offsets })
    }

    /// Center voxel and its six face neighbors.
    pub fn center_six() -> Self {
        Self::axial_rays(&[1])
    }

    /// Center plus voxels 1, 3, 5 and 7 steps away along each axis.
    pub fn jog25() -> Self {
        Self::axial_rays(&[1, 3, 5, 7])
    }

    fn axial_rays(steps: &[i32]) -> Self {
        let mut offsets = vec![[0, 0, 0]];
        for &s in steps {
            for axis in 0..3 {
                for sign in [-1, 1] {
                    let mut o = [0; 3];
                    o[axis] = sign * s;
                    offsets.push(o);
                }
            }
        }
        PatchSpec { offsets }
    }

    pub fn offsets(&self) -> &[[i32; 3]] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Largest reach of the patch along each axis, as (negative, positive).
    fn reach(&self) -> [(i64, i64); 3] {
        let mut r = [(0i64, 0i64); 3];
        for o in &self.offsets {
            for a in 0..3 {
                r[a].0 = r[a].0.min(o[a] as i64);
                r[a].1 = r[a].1.max(o[a] as i64);
            }
        }
        r
    }

    /// Whether the patch centered at `idx` stays inside `dims`.
    pub fn fits(&self, dims: [usize; 3], idx: usize) -> bool {
        let c = crate::volume::coords(dims, idx);
        self.reach()
            .iter()
            .enumerate()
            .all(|(a, &(lo, hi))| c[a] as i64 + lo >= 0 && c[a] as i64 + hi < dims[a] as i64)
    }

    /// Writes the patch intensities around `idx` into `out`; returns false
    /// (leaving `out` unspecified) when the patch leaves the volume.
    pub fn gather(&self, v: &Volume, idx: usize, out: &mut [f64]) -> bool {
        let dims = v.dims();
        let c = crate::volume::coords(dims, idx);
        for (o, slot) in self.offsets.iter().zip(out.iter_mut()) {
            let mut p = [0usize; 3];
            for a in 0..3 {
                let x = c[a] as i64 + o[a] as i64;
                if x < 0 || x >= dims[a] as i64 {
                    return false;
                }
                p[a] = x as usize;
            }
            *slot = v.data()[p[0] + dims[0] * (p[1] + dims[1] * p[2])];
        }
        true
    }
}

impl TryFrom<Vec<[i32; 3]>> for PatchSpec {
    type Error = Error;

    fn try_from(offsets: Vec<[i32; 3]>) -> Result<Self> {
        PatchSpec::new(offsets)
    }
}

impl From<PatchSpec> for Vec<[i32; 3]> {
    fn from(p: PatchSpec) -> Self {
        p.offsets
    }
}

/// Where a training row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    /// Index into [`TrainingSet::image_ids`].
    pub image: usize,
    pub voxel: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    /// Row-major `n_samples x n_features`.
    pub features: Vec<f64>,
    pub n_features: usize,
    pub targets: Vec<f64>,
    pub seed: u64,
    pub image_ids: Vec<String>,
    pub provenance: Vec<Origin>,
}

impl TrainingSet {
    pub fn from_rows(features: Vec<f64>, n_features: usize, targets: Vec<f64>) -> Result<Self> {
        if n_features == 0 || features.len() != n_features * targets.len() {
            return Err(Error::invalid(format!(
                "{} feature values do not make {} rows of {n_features}",
                features.len(),
                targets.len()
            )));
        }
        if features.iter().chain(&targets).any(|x| !x.is_finite()) {
            return Err(Error::invalid("training data must be finite"));
        }
        Ok(TrainingSet {
            features,
            n_features,
            provenance: Vec::new(),
            targets,
            seed: 0,
            image_ids: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Stacks sets in order; image indices in the provenance are remapped.
    pub fn concat(sets: &[TrainingSet]) -> Result<TrainingSet> {
        let Some(first) = sets.first() else {
            return Err(Error::invalid("nothing to concatenate"));
        };
        let mut out = TrainingSet {
            features: Vec::new(),
            n_features: first.n_features,
            targets: Vec::new(),
            seed: first.seed,
            image_ids: Vec::new(),
            provenance: Vec::new(),
        };
        for s in sets {
            if s.n_features != out.n_features {
                return Err(Error::invalid("training sets differ in feature count"));
            }
            let base = out.image_ids.len();
            out.features.extend_from_slice(&s.features);
            out.targets.extend_from_slice(&s.targets);
            out.image_ids.extend(s.image_ids.iter().cloned());
            out.provenance.extend(s.provenance.iter().map(|o| Origin {
                image: o.image + base,
                voxel: o.voxel,
            }));
        }
        Ok(out)
    }
}

/// Draws up to `n` masked voxels whose patch fits inside the volume, without
/// replacement, and records source patches and target center intensities.
pub fn sample_patches(
    id: &str,
    source: &Volume,
    target: &Volume,
    b: &Mask,
    spec: &PatchSpec,
    n: usize,
    seed: u64,
) -> Result<TrainingSet> {
    same_dims(source.dims(), target.dims())?;
    same_dims(source.dims(), b.dims())?;
    let dims = source.dims();
    let eligible: Vec<usize> = b.indices().filter(|&i| spec.fits(dims, i)).collect();
    if eligible.is_empty() {
        return Err(Error::EmptyMask(format!(
            "no masked voxel of '{id}' has its whole patch inside the volume"
        )));
    }
    let chosen: Vec<usize> = if eligible.len() <= n {
        if eligible.len() < n {
            warn!("'{id}': only {} eligible voxels, wanted {n}", eligible.len());
        }
        eligible
    } else {
        let mut picks = rand::seq::index::sample(&mut rng::seeded(seed), eligible.len(), n).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|k| eligible[k]).collect()
    };
    let p = spec.len();
    let mut features = vec![0.0; chosen.len() * p];
    for (row, &idx) in features.chunks_mut(p).zip(&chosen) {
        spec.gather(source, idx, row);
    }
    Ok(TrainingSet {
        features,
        n_features: p,
        targets: chosen.iter().map(|&i| target.data()[i]).collect(),
        seed,
        image_ids: vec![id.to_string()],
        provenance: chosen
            .iter()
            .map(|&i| Origin {
                image: 0,
                voxel: crate::volume::coords(dims, i),
            })
            .collect(),
    })
}
