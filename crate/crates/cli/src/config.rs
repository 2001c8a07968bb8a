//! Run configuration: an optional TOML or JSON file, overridden by flags.

use std::path::{Path, PathBuf};

use mrnorm::normalize::{NormalizerParams, WmSource};
use mrnorm::phantom::PhantomSpec;
use mrnorm::pipeline::{ContrastPair, Normalization, SynthKind};
use mrnorm::synth::ForestOptions;
use serde::Deserialize;

use crate::cli::Common;
use crate::failure::Failure;

/// Config file layout. Every field is optional and mirrors a flag where one
/// exists.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub methods: Option<Vec<Normalization>>,
    pub contrast_pairs: Option<Vec<ContrastPair>>,
    pub models: Option<Vec<SynthKind>>,
    pub seed: Option<u64>,
    pub wm_from: Option<WmSource>,
    pub jobs: Option<usize>,
    /// Override the manifest's split.
    pub train: Option<Vec<String>>,
    pub test: Option<Vec<String>>,
    pub samples_per_image: Option<usize>,
    pub trees: Option<usize>,
    pub min_leaf: Option<usize>,
    pub resamples: Option<usize>,
    pub params: Option<NormalizerParams>,
    pub phantom: Option<PhantomSpec>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        if is_toml {
            toml::from_str(&text).map_err(|e| Failure::contract(format!("{}: {e}", path.display())))
        } else {
            serde_json::from_str(&text).map_err(|e| Failure::contract(format!("{}: {e}", path.display())))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub normalizations: Vec<Normalization>,
    pub pairs: Vec<ContrastPair>,
    pub models: Vec<SynthKind>,
    pub seed: u64,
    pub wm_from: Option<WmSource>,
    pub jobs: Option<usize>,
    pub train: Option<Vec<String>>,
    pub test: Option<Vec<String>>,
    pub samples_per_image: usize,
    pub forest: ForestOptions,
    pub resamples: usize,
    pub params: NormalizerParams,
    pub phantom: PhantomSpec,
}

impl PipelineConfig {
    /// Flags win over the file, the file over built-in defaults.
    pub fn resolve(flags: &Common) -> Result<Self, Failure> {
        let file = match &flags.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let normalizations = if flags.method.is_empty() {
            file.methods.unwrap_or_else(Normalization::all)
        } else {
            parse_all(&flags.method)?
        };
        let pairs = if flags.contrast_pair.is_empty() {
            file.contrast_pairs.unwrap_or_else(ContrastPair::defaults)
        } else {
            parse_all(&flags.contrast_pair)?
        };
        let models = if flags.model.is_empty() {
            file.models.unwrap_or_else(|| SynthKind::ALL.to_vec())
        } else {
            parse_all(&flags.model)?
        };
        let wm_from = match &flags.wm_from {
            Some(s) => Some(s.parse()?),
            None => file.wm_from,
        };
        let seed = flags.seed.or(file.seed).unwrap_or(0);
        let mut phantom = file.phantom.unwrap_or_default();
        if let Some(s) = flags.seed {
            phantom.seed = s;
        } else if let Some(s) = file.seed {
            phantom.seed = s;
        }
        let defaults = ForestOptions::default();
        let cfg = PipelineConfig {
            manifest: flags.manifest.clone().or(file.manifest),
            out: flags
                .out
                .clone()
                .or(file.out)
                .ok_or_else(|| Failure::contract("no output directory: pass --out or set `out` in the config"))?,
            normalizations: dedup(normalizations),
            pairs: dedup(pairs),
            models: dedup(models),
            seed,
            wm_from,
            jobs: flags.jobs.or(file.jobs),
            train: file.train,
            test: file.test,
            samples_per_image: flags.samples.or(file.samples_per_image).unwrap_or(100_000),
            forest: ForestOptions {
                trees: file.trees.unwrap_or(defaults.trees),
                min_leaf: file.min_leaf.unwrap_or(defaults.min_leaf),
                ..defaults
            },
            resamples: file.resamples.unwrap_or(mrnorm::metrics::BOOTSTRAP_RESAMPLES),
            params: file.params.unwrap_or_default(),
            phantom,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), Failure> {
        if self.normalizations.is_empty() || self.pairs.is_empty() || self.models.is_empty() {
            return Err(Failure::contract("method, contrast pair and model lists must be non-empty"));
        }
        if self.samples_per_image == 0 || self.resamples == 0 || self.forest.trees == 0 {
            return Err(Failure::contract("samples, resamples and trees must be positive"));
        }
        if self.jobs == Some(0) {
            return Err(Failure::contract("--jobs must be at least 1"));
        }
        if let (Some(tr), Some(te)) = (&self.train, &self.test) {
            if let Some(id) = tr.iter().find(|id| te.contains(id)) {
                return Err(Failure::contract(format!("subject '{id}' is in both train and test sets")));
            }
        }
        self.params.validate()?;
        Ok(())
    }

    pub fn manifest(&self) -> Result<&Path, Failure> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Failure::contract("no manifest: pass --manifest or set `manifest` in the config"))
    }
}

/// Parses flag values given either repeated or comma separated.
fn parse_all<T: std::str::FromStr<Err = mrnorm::Error>>(raw: &[String]) -> Result<Vec<T>, Failure> {
    raw.iter()
        .flat_map(|s| s.split(','))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(Failure::from))
        .collect()
}

fn dedup<T: PartialEq>(items: Vec<T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::with_capacity(items.len());
    for it in items {
        if !out.contains(&it) {
            out.push(it);
        }
    }
    out
}
