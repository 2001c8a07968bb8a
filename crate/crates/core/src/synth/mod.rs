//! Patch-based cross-contrast synthesis: a target-contrast voxel is
//! regressed from a patch of source-contrast intensities around it.

mod forest;
mod patch;
mod poly;

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{same_dims, Mask, Volume};

pub use forest::{rf_fit, Forest, ForestOptions, Node, Tree};
pub use patch::{sample_patches, Origin, PatchSpec, TrainingSet};
pub use poly::{expansion_terms, poly_fit, Expansion, PolyModel, PolyOptions};

pub const FORMAT_VERSION: u32 = 1;
const POLY_FORMAT: &str = "mrnorm-poly";
const FOREST_FORMAT: &str = "mrnorm-forest";
const NODE_BYTES: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Poly(PolyModel),
    Forest(Forest),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionModel {
    pub patch: PatchSpec,
    /// Normalization the training images went through, kept for audit.
    pub normalization: String,
    pub predictor: Predictor,
}

impl RegressionModel {
    pub fn kind(&self) -> &'static str {
        match self.predictor {
            Predictor::Poly(_) => "poly3",
            Predictor::Forest(_) => "forest",
        }
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        match &self.predictor {
            Predictor::Poly(m) => m.predict_row(x),
            Predictor::Forest(f) => f.predict_row(x),
        }
    }
}

pub fn fit_poly(ts: &TrainingSet, patch: &PatchSpec, normalization: &str, opts: PolyOptions) -> Result<RegressionModel> {
    check_width(ts, patch)?;
    Ok(RegressionModel {
        patch: patch.clone(),
        normalization: normalization.to_string(),
        predictor: Predictor::Poly(poly_fit(ts, opts)?),
    })
}

pub fn fit_forest(
    ts: &TrainingSet,
    patch: &PatchSpec,
    normalization: &str,
    opts: ForestOptions,
) -> Result<RegressionModel> {
    check_width(ts, patch)?;
    Ok(RegressionModel {
        patch: patch.clone(),
        normalization: normalization.to_string(),
        predictor: Predictor::Forest(rf_fit(ts, opts)?),
    })
}

fn check_width(ts: &TrainingSet, patch: &PatchSpec) -> Result<()> {
    if ts.n_features != patch.len() {
        return Err(Error::invalid(format!(
            "training rows have {} features but the patch has {} offsets",
            ts.n_features,
            patch.len()
        )));
    }
    Ok(())
}

/// Predicts every masked voxel from its source patch. Background is exactly
/// zero; masked voxels whose patch leaves the volume are zero too.
pub fn predict_volume(model: &RegressionModel, source: &Volume, b: &Mask) -> Result<Volume> {
    same_dims(source.dims(), b.dims())?;
    let idx: Vec<usize> = b.indices().collect();
    let p = model.patch.len();
    let poly = match &model.predictor {
        Predictor::Poly(m) => Some(m.predictor()),
        Predictor::Forest(_) => None,
    };
    let chunks: Vec<(Vec<f64>, usize)> = par::map_range(idx.len().div_ceil(par::REDUCE_CHUNK), |c| {
        let lo = c * par::REDUCE_CHUNK;
        let hi = (lo + par::REDUCE_CHUNK).min(idx.len());
        let mut row = vec![0.0; p];
        let mut skipped = 0;
        let vals = idx[lo..hi]
            .iter()
            .map(|&i| {
                if !model.patch.gather(source, i, &mut row) {
                    skipped += 1;
                    return 0.0;
                }
                match (&poly, &model.predictor) {
                    (Some(f), _) => f(&row),
                    (None, Predictor::Forest(forest)) => forest.predict_row(&row),
                    (None, Predictor::Poly(m)) => m.predict_row(&row),
                }
            })
            .collect();
        (vals, skipped)
    });
    let mut out = vec![0.0; source.len()];
    let mut skipped = 0;
    let mut k = 0;
    for (vals, s) in chunks {
        skipped += s;
        for v in vals {
            out[idx[k]] = v;
            k += 1;
        }
    }
    if skipped > 0 {
        warn!("{skipped} masked voxels have patches outside the volume; predicted as 0");
    }
    source.with_data(out)
}

#[derive(Serialize, Deserialize)]
struct PolyFile {
    format: String,
    version: u32,
    patch: PatchSpec,
    normalization: String,
    model: PolyModel,
}

#[derive(Serialize, Deserialize)]
struct ForestHeader {
    format: String,
    version: u32,
    patch: PatchSpec,
    normalization: String,
    n_features: usize,
    options: ForestOptions,
    /// Node count of each tree, in order.
    tree_sizes: Vec<usize>,
    record_bytes: usize,
}

fn write_node(w: &mut impl Write, node: &Node) -> std::io::Result<()> {
    match *node {
        Node::Leaf { value, n } => {
            w.write_u8(0)?;
            w.write_u32::<LittleEndian>(0)?;
            w.write_f64::<LittleEndian>(value)?;
            w.write_u32::<LittleEndian>(0)?;
            w.write_u32::<LittleEndian>(0)?;
            w.write_u32::<LittleEndian>(n)
        }
        Node::Split {
            feature,
            threshold,
            left,
            right,
            n,
        } => {
            w.write_u8(1)?;
            w.write_u32::<LittleEndian>(feature)?;
            w.write_f64::<LittleEndian>(threshold)?;
            w.write_u32::<LittleEndian>(left)?;
            w.write_u32::<LittleEndian>(right)?;
            w.write_u32::<LittleEndian>(n)
        }
    }
}

fn read_node(r: &mut impl Read) -> std::io::Result<Node> {
    let tag = r.read_u8()?;
    let feature = r.read_u32::<LittleEndian>()?;
    let x = r.read_f64::<LittleEndian>()?;
    let left = r.read_u32::<LittleEndian>()?;
    let right = r.read_u32::<LittleEndian>()?;
    let n = r.read_u32::<LittleEndian>()?;
    Ok(match tag {
        0 => Node::Leaf { value: x, n },
        _ => Node::Split {
            feature,
            threshold: x,
            left,
            right,
            n,
        },
    })
}

/// Polynomial models are written as JSON; forests as one JSON header line
/// followed by fixed-size little-endian node records.
pub fn save_regression(model: &RegressionModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match &model.predictor {
        Predictor::Poly(m) => serde_json::to_vec_pretty(&PolyFile {
            format: POLY_FORMAT.into(),
            version: FORMAT_VERSION,
            patch: model.patch.clone(),
            normalization: model.normalization.clone(),
            model: m.clone(),
        })?,
        Predictor::Forest(f) => {
            let header = ForestHeader {
                format: FOREST_FORMAT.into(),
                version: FORMAT_VERSION,
                patch: model.patch.clone(),
                normalization: model.normalization.clone(),
                n_features: f.n_features,
                options: f.options,
                tree_sizes: f.trees.iter().map(|t| t.nodes.len()).collect(),
                record_bytes: NODE_BYTES,
            };
            let mut buf = serde_json::to_vec(&header)?;
            buf.push(b'\n');
            for node in f.trees.iter().flat_map(|t| &t.nodes) {
                write_node(&mut buf, node).map_err(|e| Error::io(path, e))?;
            }
            buf
        }
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_regression(path: impl AsRef<Path>) -> Result<RegressionModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let line_end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
    if let Ok(header) = serde_json::from_slice::<ForestHeader>(&bytes[..line_end]) {
        if header.format != FOREST_FORMAT {
            return Err(Error::Schema(format!("unknown model format '{}'", header.format)));
        }
        if header.version != FORMAT_VERSION || header.record_bytes != NODE_BYTES {
            return Err(Error::Schema(format!(
                "forest format version {} is not supported",
                header.version
            )));
        }
        let body = &bytes[(line_end + 1).min(bytes.len())..];
        let total: usize = header.tree_sizes.iter().sum();
        if body.len() != total * NODE_BYTES {
            return Err(Error::Schema(format!(
                "forest body holds {} bytes, header promises {}",
                body.len(),
                total * NODE_BYTES
            )));
        }
        let mut cur = Cursor::new(body);
        let mut trees = Vec::with_capacity(header.tree_sizes.len());
        for &size in &header.tree_sizes {
            let nodes = (0..size)
                .map(|_| read_node(&mut cur))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(|e| Error::io(path, e))?;
            for node in &nodes {
                if let Node::Split { feature, left, right, .. } = *node {
                    if feature as usize >= header.n_features || left as usize >= size || right as usize >= size {
                        return Err(Error::Schema("forest node points outside its tree".into()));
                    }
                }
            }
            trees.push(Tree { nodes });
        }
        if header.patch.len() != header.n_features || trees.is_empty() {
            return Err(Error::Schema("forest header is inconsistent".into()));
        }
        return Ok(RegressionModel {
            patch: header.patch,
            normalization: header.normalization,
            predictor: Predictor::Forest(Forest {
                n_features: header.n_features,
                options: header.options,
                trees,
            }),
        });
    }
    let file: PolyFile =
        serde_json::from_slice(&bytes).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if file.format != POLY_FORMAT || file.version != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported model format '{}' version {}",
            file.format, file.version
        )));
    }
    let m = &file.model;
    if m.terms.len() != m.coefficients.len()
        || m.feature_mean.len() != file.patch.len()
        || m.feature_scale.len() != file.patch.len()
        || m.terms.iter().any(|t| t.len() != file.patch.len())
    {
        return Err(Error::Schema("polynomial model shape does not match its patch".into()));
    }
    Ok(RegressionModel {
        patch: file.patch,
        normalization: file.normalization,
        predictor: Predictor::Poly(file.model),
    })
}
