//! Removal of unwanted technical variation across a co-registered cohort.
//!
//! CSF voxels common to every image form an `n x m` matrix whose leading
//! right singular vectors span the unwanted factors. Each voxel's series of
//! `m` intensities is regressed on that basis and the fitted unwanted part
//! is subtracted.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{same_dims, Mask, Volume};

pub struct RavelInput<'a> {
    pub id: &'a str,
    /// WhiteStripe-normalized intensities.
    pub volume: &'a Volume,
    pub brain: &'a Mask,
    pub csf: &'a Mask,
}

#[derive(Debug, Clone)]
pub struct CsfMatrix {
    /// `n x m`: rows are voxels, columns are images.
    pub values: DMatrix<f64>,
    pub voxel_index: Vec<usize>,
    pub image_ids: Vec<String>,
}

/// Stacks the intensities of the voxels inside every CSF mask.
pub fn build_csf_matrix(sample: &[(&str, &Volume, &Mask)]) -> Result<CsfMatrix> {
    let Some((_, first, _)) = sample.first() else {
        return Err(Error::invalid("no images"));
    };
    let dims = first.dims();
    for (_, v, m) in sample {
        same_dims(dims, v.dims())?;
        same_dims(dims, m.dims())?;
    }
    let voxel_index: Vec<usize> = (0..first.len())
        .filter(|&i| sample.iter().all(|(_, _, m)| m.contains(i)))
        .collect();
    if voxel_index.is_empty() {
        return Err(Error::EmptyCsfIntersection);
    }
    let (n, m) = (voxel_index.len(), sample.len());
    if n < m {
        return Err(Error::invalid(format!(
            "CSF intersection has {n} voxels but there are {m} images"
        )));
    }
    let values = DMatrix::from_fn(n, m, |r, c| sample[c].1.data()[voxel_index[r]]);
    Ok(CsfMatrix {
        values,
        voxel_index,
        image_ids: sample.iter().map(|(id, _, _)| id.to_string()).collect(),
    })
}

/// First `rank` right singular vectors of the CSF matrix as an `m x rank`
/// matrix. With `center`, each voxel's row is centered across images first.
/// Columns are sign-fixed so their first non-negligible entry is positive.
pub fn estimate_unwanted_basis(vc: &CsfMatrix, rank: usize, center: bool) -> Result<DMatrix<f64>> {
    basis_and_spectrum(vc, rank, center).map(|(b, _)| b)
}

/// Basis plus the singular value behind each column.
fn basis_and_spectrum(vc: &CsfMatrix, rank: usize, center: bool) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (n, m) = vc.values.shape();
    if rank == 0 || rank > m {
        return Err(Error::invalid(format!("basis rank {rank} outside 1..={m}")));
    }
    if vc.values.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("CSF matrix has non-finite entries"));
    }
    let mut a = vc.values.clone();
    if center {
        for mut row in a.row_iter_mut() {
            let mean = row.mean();
            row.add_scalar_mut(-mean);
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD did not produce V".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]).then(i.cmp(&j)));
    if rank < n.min(m) {
        let (s_b, s_next) = (sv[order[rank - 1]], sv[order[rank]]);
        if (s_b - s_next).abs() <= 1e-12 * sv[order[0]].max(f64::MIN_POSITIVE) {
            warn!("singular values {} and {} tie; basis order fixed by convention", rank, rank + 1);
        }
    }
    let mut basis = DMatrix::zeros(m, rank);
    for (c, &idx) in order.iter().take(rank).enumerate() {
        let mut col: DVector<f64> = v_t.row(idx).transpose();
        let scale = col.amax();
        if let Some(first) = col.iter().find(|x| x.abs() > 1e-12 * scale) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        basis.set_column(c, &col);
    }
    Ok((basis, order.iter().take(rank).map(|&i| sv[i]).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RavelModel {
    /// `m x rank` basis of unwanted factors, one row per image.
    pub basis: DMatrix<f64>,
    pub rank: usize,
    pub centered: bool,
    pub image_ids: Vec<String>,
    /// One coefficient volume per basis column; zero outside the union mask.
    pub coefficients: Vec<Volume>,
}

impl RavelModel {
    pub fn image_position(&self, id: &str) -> Result<usize> {
        self.image_ids.iter().position(|x| x == id).ok_or_else(|| {
            Error::invalid(format!(
                "image '{id}' was not in the cohort this RAVEL model was fitted on"
            ))
        })
    }

    /// Subtracts the fitted unwanted component from image `id`.
    pub fn correct(&self, id: &str, v: &Volume) -> Result<Volume> {
        let pos = self.image_position(id)?;
        if let Some(c) = self.coefficients.first() {
            same_dims(c.dims(), v.dims())?;
        }
        let w: Vec<f64> = (0..self.rank).map(|j| self.basis[(pos, j)]).collect();
        let mut out = v.data().to_vec();
        for (j, coef) in self.coefficients.iter().enumerate() {
            for (o, g) in out.iter_mut().zip(coef.data()) {
                *o -= g * w[j];
            }
        }
        v.with_data(out)
    }
}

/// Fits the unwanted-variation basis on the cohort's CSF and corrects every
/// image. Requires `rank + 2` or more images sharing dims.
pub fn ravel_fit_apply(
    sample: &[RavelInput<'_>],
    rank: usize,
    center: bool,
) -> Result<(Vec<Volume>, RavelModel)> {
    let m = sample.len();
    if m < rank + 2 {
        return Err(Error::invalid(format!(
            "RAVEL with rank {rank} needs at least {} images, got {m}",
            rank + 2
        )));
    }
    let dims = sample[0].volume.dims();
    for s in sample {
        same_dims(dims, s.volume.dims())?;
        same_dims(dims, s.brain.dims())?;
    }
    let stack: Vec<(&str, &Volume, &Mask)> =
        sample.iter().map(|s| (s.id, s.volume, s.csf)).collect();
    let vc = build_csf_matrix(&stack)?;
    let (basis, spectrum) = basis_and_spectrum(&vc, rank, center)?;
    // Components at rounding level carry no variation; regressing on them
    // would only amplify noise, so they get zero coefficients.
    let tol = 1e-10 * vc.values.norm().max(f64::MIN_POSITIVE);
    let active: Vec<usize> = (0..rank).filter(|&j| spectrum[j] > tol).collect();
    if active.len() < rank {
        warn!(
            "{} of {rank} RAVEL components carry no CSF variation; left uncorrected",
            rank - active.len()
        );
    }

    // Projection P = (X^T X)^-1 X^T with X = [1 | W] (intercept) or W.
    let offset = usize::from(center);
    let design = DMatrix::from_fn(m, active.len() + offset, |r, c| {
        if c < offset {
            1.0
        } else {
            basis[(r, active[c - offset])]
        }
    });
    let gram = design.transpose() * &design;
    let gram_inv = gram
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("RAVEL design matrix is singular".into()))?;
    let proj = gram_inv * design.transpose();

    let union: Vec<bool> = (0..sample[0].volume.len())
        .map(|i| sample.iter().any(|s| s.brain.contains(i)))
        .collect();
    let n_vox = union.len();
    // gamma, voxel-major: rank entries per voxel
    let mut gamma = vec![0.0; n_vox * rank];
    par::for_each_chunk_mut(&mut gamma, rank * par::REDUCE_CHUNK, |off, chunk| {
        let first = off / rank;
        for (local, g) in chunk.chunks_mut(rank).enumerate() {
            let idx = first + local;
            if !union[idx] {
                continue;
            }
            for (a, &j) in active.iter().enumerate() {
                g[j] = (0..m)
                    .map(|i| proj[(a + offset, i)] * sample[i].volume.data()[idx])
                    .sum();
            }
        }
    });

    let template = sample[0].volume;
    let coefficients = (0..rank)
        .map(|j| {
            Volume::new(dims, template.spacing(), (0..n_vox).map(|v| gamma[v * rank + j]).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let model = RavelModel {
        basis,
        rank,
        centered: center,
        image_ids: sample.iter().map(|s| s.id.to_string()).collect(),
        coefficients,
    };
    let outputs = sample
        .iter()
        .map(|s| model.correct(s.id, s.volume))
        .collect::<Result<Vec<_>>>()?;
    Ok((outputs, model))
}
