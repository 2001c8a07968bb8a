//! 3D scalar volumes, binary masks and masked summary statistics.
//!
//! Voxels are stored x-fastest (NIfTI order): `idx = i + nx * (j + ny * k)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// MR acquisition weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Contrast {
    T1,
    T2,
    Flair,
    #[default]
    Other,
}

impl Contrast {
    pub const ALL: [Contrast; 3] = [Contrast::T1, Contrast::T2, Contrast::Flair];

    pub fn as_str(self) -> &'static str {
        match self {
            Contrast::T1 => "t1",
            Contrast::T2 => "t2",
            Contrast::Flair => "flair",
            Contrast::Other => "other",
        }
    }
}

impl fmt::Display for Contrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Contrast {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" | "t1w" => Ok(Contrast::T1),
            "t2" | "t2w" => Ok(Contrast::T2),
            "flair" => Ok(Contrast::Flair),
            "other" => Ok(Contrast::Other),
            _ => Err(Error::invalid(format!("unknown contrast '{s}'"))),
        }
    }
}

/// Orientation fields copied verbatim from the NIfTI header; never interpreted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    pub qfac: f32,
    /// quatern_b, quatern_c, quatern_d, qoffset_x, qoffset_y, qoffset_z
    pub quatern: [f32; 6],
    pub srow: [[f32; 4]; 3],
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation {
            qform_code: 0,
            sform_code: 0,
            qfac: 1.0,
            quatern: [0.0; 6],
            srow: [[0.0; 4]; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
    pub contrast: Contrast,
    pub orientation: Orientation,
}

fn check_dims(dims: [usize; 3]) -> Result<usize> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("zero-sized dims {dims:?}")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::invalid(format!("dims {dims:?} overflow")))
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        let n = check_dims(dims)?;
        if data.len() != n {
            return Err(Error::invalid(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(format!("spacing {spacing:?} must be positive")));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite intensity"));
        }
        Ok(Volume {
            dims,
            spacing,
            data,
            contrast: Contrast::Other,
            orientation: Orientation::default(),
        })
    }

    pub fn zeros(dims: [usize; 3]) -> Result<Self> {
        let n = check_dims(dims)?;
        Volume::new(dims, [1.0; 3], vec![0.0; n])
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let n = check_dims(dims)?;
        let mut data = Vec::with_capacity(n);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume::new(dims, [1.0; 3], data)
    }

    pub fn with_contrast(mut self, contrast: Contrast) -> Self {
        self.contrast = contrast;
        self
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(format!("spacing {spacing:?} must be positive")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        coords(self.dims, idx)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    /// Copy of `self` with new intensities; geometry and tags are kept.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::invalid("replacement data has wrong length"));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Degenerate("transform produced non-finite intensity".into()));
        }
        Ok(Volume {
            data,
            ..self.clone()
        })
    }

    /// Applies `f` to every voxel.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        self.with_data(self.data.iter().map(|&x| f(x)).collect())
    }

    /// Intensities inside `m`, in voxel order.
    pub fn masked_values(&self, m: &Mask) -> Result<Vec<f64>> {
        same_dims(self.dims, m.dims)?;
        Ok(m.indices().map(|i| self.data[i]).collect())
    }
}

#[inline]
pub(crate) fn coords(dims: [usize; 3], idx: usize) -> [usize; 3] {
    let i = idx % dims[0];
    let r = idx / dims[0];
    [i, r % dims[1], r / dims[1]]
}

pub(crate) fn same_dims(a: [usize; 3], b: [usize; 3]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::DimMismatch(a, b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<bool>,
    count: usize,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        let n = check_dims(dims)?;
        if data.len() != n {
            return Err(Error::invalid(format!(
                "mask length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        let count = data.iter().filter(|&&b| b).count();
        Ok(Mask { dims, data, count })
    }

    pub fn full(dims: [usize; 3]) -> Result<Self> {
        let n = check_dims(dims)?;
        Mask::new(dims, vec![true; n])
    }

    pub fn empty(dims: [usize; 3]) -> Result<Self> {
        let n = check_dims(dims)?;
        Mask::new(dims, vec![false; n])
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> bool) -> Result<Self> {
        let n = check_dims(dims)?;
        let data = (0..n)
            .map(|idx| {
                let [i, j, k] = coords(dims, idx);
                f(i, j, k)
            })
            .collect();
        Mask::new(dims, data)
    }

    /// Nonzero voxels of `v` become true.
    pub fn from_volume(v: &Volume) -> Self {
        let data: Vec<bool> = v.data.iter().map(|&x| x != 0.0).collect();
        let count = data.iter().filter(|&&b| b).count();
        Mask {
            dims: v.dims,
            data,
            count,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn contains(&self, idx: usize) -> bool {
        self.data[idx]
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + Clone + '_ {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        same_dims(self.dims, other.dims)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect();
        Mask::new(self.dims, data)
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        same_dims(self.dims, other.dims)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect();
        Mask::new(self.dims, data)
    }

    /// 1.0 inside, 0.0 outside; handy for writing masks as NIfTI.
    pub fn to_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            spacing: [1.0; 3],
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            contrast: Contrast::Other,
            orientation: Orientation::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskedStats {
    pub mean: f64,
    /// Population standard deviation (divides by `n`).
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

/// Mean, population std and range of the intensities inside `m`.
pub fn masked_stats(v: &Volume, m: &Mask) -> Result<MaskedStats> {
    same_dims(v.dims, m.dims)?;
    if m.count < 2 {
        return Err(Error::EmptyMask(format!(
            "statistics need at least 2 voxels, mask has {}",
            m.count
        )));
    }
    Ok(stats_of(m.indices().map(|i| v.data[i]), m.count))
}

pub(crate) fn stats_of(values: impl Iterator<Item = f64> + Clone, n: usize) -> MaskedStats {
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for x in values.clone() {
        sum += x;
        min = min.min(x);
        max = max.max(x);
    }
    let mean = (sum / n as f64).clamp(min, max);
    let ss: f64 = values.map(|x| (x - mean) * (x - mean)).sum();
    MaskedStats {
        mean,
        std: (ss / n as f64).sqrt(),
        min,
        max,
        n,
    }
}

/// Zeroes every voxel outside `m`.
pub fn apply_mask(v: &Volume, m: &Mask) -> Result<Volume> {
    same_dims(v.dims, m.dims)?;
    let data = v
        .data
        .iter()
        .zip(&m.data)
        .map(|(&x, &b)| if b { x } else { 0.0 })
        .collect();
    Ok(Volume {
        data,
        ..v.clone()
    })
}
