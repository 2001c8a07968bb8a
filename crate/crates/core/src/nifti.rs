//! Minimal NIfTI-1 single-file (`n+1`) reader and writer.
//!
//! Gzip is detected from the magic bytes on read; on write a path ending in
//! `.gz` is compressed. Data is always written as FLOAT64 with no scaling, so
//! a save/load round trip is bit-exact. Orientation fields are carried through
//! unchanged.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{Contrast, Mask, Orientation, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const DESCRIP_TAG: &str = "mrnorm contrast=";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;
const DT_INT64: i16 = 1024;
const DT_UINT64: i16 = 1280;

fn bytes_per_voxel(datatype: i16) -> Option<usize> {
    match datatype {
        DT_UINT8 | DT_INT8 => Some(1),
        DT_INT16 | DT_UINT16 => Some(2),
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => Some(4),
        DT_INT64 | DT_UINT64 | DT_FLOAT64 => Some(8),
        _ => None,
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(Cursor::new(raw))
            .read_to_end(&mut out)
            .map_err(|e| Error::MalformedHeader(format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn decode<B: ByteOrder>(bytes: &[u8], path: &Path) -> Result<Volume> {
    let h = &bytes[..HEADER_SIZE];
    if &h[344..347] != b"n+1" {
        return Err(Error::MalformedHeader(format!(
            "{}: magic is not 'n+1'",
            path.display()
        )));
    }
    let mut dim = [0i16; 8];
    B::read_i16_into(&h[40..56], &mut dim);
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::MalformedHeader(format!("dim[0] = {ndim}")));
    }
    if dim[1..=ndim as usize].iter().any(|&d| d < 1) {
        return Err(Error::MalformedHeader(format!("nonpositive dim {dim:?}")));
    }
    if ndim > 3 && dim[4..=ndim as usize].iter().any(|&d| d > 1) {
        return Err(Error::NotScalar3d(format!("dim = {:?}", &dim[..=ndim as usize])));
    }
    let dims = [
        dim[1] as usize,
        if ndim >= 2 { dim[2] as usize } else { 1 },
        if ndim >= 3 { dim[3] as usize } else { 1 },
    ];
    let datatype = B::read_i16(&h[70..72]);
    let bpv = bytes_per_voxel(datatype)
        .ok_or_else(|| Error::NotScalar3d(format!("unsupported datatype code {datatype}")))?;
    let mut pixdim = [0f32; 8];
    B::read_f32_into(&h[76..108], &mut pixdim);
    let spacing = [pixdim[1] as f64, pixdim[2] as f64, pixdim[3] as f64];
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::MalformedHeader(format!("pixdim {spacing:?}")));
    }
    let vox_offset = B::read_f32(&h[108..112]);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::MalformedHeader(format!("vox_offset {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;
    let slope = B::read_f32(&h[112..116]) as f64;
    let inter = B::read_f32(&h[116..120]) as f64;
    let n: usize = dims.iter().product();
    let end = vox_offset + n * bpv;
    if bytes.len() < end {
        return Err(Error::MalformedHeader(format!(
            "file holds {} bytes, need {end}",
            bytes.len()
        )));
    }
    let raw = &bytes[vox_offset..end];
    let mut data: Vec<f64> = match datatype {
        DT_UINT8 => raw.iter().map(|&b| b as f64).collect(),
        DT_INT8 => raw.iter().map(|&b| b as i8 as f64).collect(),
        DT_INT16 => raw.chunks_exact(2).map(|c| B::read_i16(c) as f64).collect(),
        DT_UINT16 => raw.chunks_exact(2).map(|c| B::read_u16(c) as f64).collect(),
        DT_INT32 => raw.chunks_exact(4).map(|c| B::read_i32(c) as f64).collect(),
        DT_UINT32 => raw.chunks_exact(4).map(|c| B::read_u32(c) as f64).collect(),
        DT_FLOAT32 => raw.chunks_exact(4).map(|c| B::read_f32(c) as f64).collect(),
        DT_INT64 => raw.chunks_exact(8).map(|c| B::read_i64(c) as f64).collect(),
        DT_UINT64 => raw.chunks_exact(8).map(|c| B::read_u64(c) as f64).collect(),
        DT_FLOAT64 => raw.chunks_exact(8).map(B::read_f64).collect(),
        _ => unreachable!(),
    };
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        for x in &mut data {
            *x = *x * slope + inter;
        }
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::MalformedHeader(format!(
            "{}: non-finite voxel values",
            path.display()
        )));
    }

    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        B::read_f32_into(&h[280 + 16 * r..296 + 16 * r], row);
    }
    let mut quatern = [0f32; 6];
    B::read_f32_into(&h[256..280], &mut quatern);
    let orientation = Orientation {
        qform_code: B::read_i16(&h[252..254]),
        sform_code: B::read_i16(&h[254..256]),
        qfac: if pixdim[0] == -1.0 { -1.0 } else { 1.0 },
        quatern,
        srow,
    };

    let descrip = String::from_utf8_lossy(&h[148..228]);
    let contrast = descrip
        .trim_end_matches('\0')
        .strip_prefix(DESCRIP_TAG)
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(Contrast::Other);

    let mut v = Volume::new(dims, spacing, data)?.with_contrast(contrast);
    v.orientation = orientation;
    Ok(v)
}

/// Reads a NIfTI-1 file (`.nii` or gzip-compressed) as a 64-bit volume.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::MalformedHeader(format!(
            "{}: {} bytes is shorter than a header",
            path.display(),
            bytes.len()
        )));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        decode::<LittleEndian>(&bytes, path)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        decode::<BigEndian>(&bytes, path)
    } else {
        Err(Error::MalformedHeader(format!(
            "{}: sizeof_hdr is not 348",
            path.display()
        )))
    }
}

/// Loads a mask; any nonzero voxel is inside.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    Ok(Mask::from_volume(&load_volume(path)?))
}

fn encode(v: &Volume) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let [nx, ny, nz] = v.dims();
    let dim = [3i16, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    LittleEndian::write_i16_into(&dim, &mut h[40..56]);
    LittleEndian::write_i16(&mut h[70..72], DT_FLOAT64);
    LittleEndian::write_i16(&mut h[72..74], 64);
    let sp = v.spacing();
    let o = &v.orientation;
    let pixdim = [o.qfac, sp[0] as f32, sp[1] as f32, sp[2] as f32, 1.0, 1.0, 1.0, 1.0];
    LittleEndian::write_f32_into(&pixdim, &mut h[76..108]);
    LittleEndian::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    // scl_slope = 0 means "no scaling"
    h[123] = 2; // xyzt_units: mm
    let descrip = format!("{DESCRIP_TAG}{}", v.contrast);
    h[148..148 + descrip.len()].copy_from_slice(descrip.as_bytes());
    LittleEndian::write_i16(&mut h[252..254], o.qform_code);
    LittleEndian::write_i16(&mut h[254..256], o.sform_code);
    LittleEndian::write_f32_into(&o.quatern, &mut h[256..280]);
    for (r, row) in o.srow.iter().enumerate() {
        LittleEndian::write_f32_into(row, &mut h[280 + 16 * r..296 + 16 * r]);
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let mut out = h;
    out.reserve(v.len() * 8);
    for &x in v.data() {
        out.write_f64::<LittleEndian>(x).expect("vec write");
    }
    out
}

/// Writes `v` as NIfTI-1 FLOAT64; gzip when the path ends in `.gz`.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if v.dims().iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::invalid(format!("dims {:?} exceed NIfTI-1 limits", v.dims())));
    }
    let bytes = encode(v);
    let gz = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    let payload = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, payload).map_err(|e| Error::io(path, e))
}

pub fn save_mask(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    save_volume(&m.to_volume(), path)
}
