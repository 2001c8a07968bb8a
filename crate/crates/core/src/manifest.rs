//! Cohort manifest: subject id to per-contrast image paths, brain mask,
//! optional tissue truth, and the train/test split.
//!
//! Relative paths resolve against the manifest's own directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti;
use crate::phantom::{Corruption, OutlierTransform};
use crate::volume::{same_dims, Contrast, Mask, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthPaths {
    pub csf: PathBuf,
    pub gm: PathBuf,
    pub wm: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub images: BTreeMap<Contrast, PathBuf>,
    pub brain: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthPaths>,
    /// Scanner corruption the phantom generator applied, for reference.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub corruption: BTreeMap<Contrast, Corruption>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outlier: Option<OutlierTransform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub subjects: Vec<SubjectEntry>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthMasks {
    pub csf: Mask,
    pub gm: Mask,
    pub wm: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSubject {
    pub id: String,
    pub images: BTreeMap<Contrast, Volume>,
    pub brain: Mask,
    pub truth: Option<TruthMasks>,
}

impl LoadedSubject {
    pub fn image(&self, c: Contrast) -> Result<&Volume> {
        self.images
            .get(&c)
            .ok_or_else(|| Error::invalid(format!("subject {} has no {c} image", self.id)))
    }
}

/// Manifest together with the directory its paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub manifest: CohortManifest,
    pub root: PathBuf,
}

impl CohortManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for s in &self.subjects {
            if s.id.is_empty() || s.id.contains(['/', '\\']) {
                return Err(Error::invalid(format!("bad subject id '{}'", s.id)));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("duplicate subject id '{}'", s.id)));
            }
            if s.images.is_empty() {
                return Err(Error::invalid(format!("subject {} lists no images", s.id)));
            }
        }
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.test) {
            if !ids.contains(id.as_str()) {
                return Err(Error::invalid(format!("split names unknown subject '{id}'")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!(
                    "subject '{id}' appears twice in the train/test split"
                )));
            }
        }
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::invalid("train and test sets must both be non-empty"));
        }
        Ok(())
    }

    pub fn entry(&self, id: &str) -> Result<&SubjectEntry> {
        self.subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::invalid(format!("unknown subject '{id}'")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Reads and validates a manifest; see [`Cohort`] for path resolution.
    pub fn load(path: impl AsRef<Path>) -> Result<Cohort> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: CohortManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Cohort { manifest, root })
    }
}

impl Cohort {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn train(&self) -> &[String] {
        &self.manifest.train
    }

    pub fn test(&self) -> &[String] {
        &self.manifest.test
    }

    /// Loads the listed contrasts (all when `contrasts` is empty) plus masks,
    /// checking every file shares the brain mask's grid.
    pub fn load_contrasts(&self, id: &str, contrasts: &[Contrast]) -> Result<LoadedSubject> {
        let entry = self.manifest.entry(id)?;
        let brain = nifti::load_mask(self.resolve(&entry.brain))?;
        let mut images = BTreeMap::new();
        for (&c, p) in &entry.images {
            if contrasts.is_empty() || contrasts.contains(&c) {
                let v = nifti::load_volume(self.resolve(p))?.with_contrast(c);
                same_dims(v.dims(), brain.dims())?;
                images.insert(c, v);
            }
        }
        for c in contrasts {
            if !images.contains_key(c) {
                return Err(Error::invalid(format!("subject {id} has no {c} image")));
            }
        }
        let truth = match &entry.truth {
            Some(t) => {
                let load = |p: &Path| -> Result<Mask> {
                    let m = nifti::load_mask(self.resolve(p))?;
                    same_dims(m.dims(), brain.dims())?;
                    Ok(m)
                };
                Some(TruthMasks {
                    csf: load(&t.csf)?,
                    gm: load(&t.gm)?,
                    wm: load(&t.wm)?,
                })
            }
            None => None,
        };
        Ok(LoadedSubject {
            id: id.to_string(),
            images,
            brain,
            truth,
        })
    }

    pub fn load_subject(&self, id: &str) -> Result<LoadedSubject> {
        self.load_contrasts(id, &[])
    }
}
