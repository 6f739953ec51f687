//! Uncompressed single-file NIfTI-1 (`.nii`) reading and writing.
//!
//! Only what the pipeline needs: 2- or 3-dimensional little-endian
//! volumes of `uint8`, `int16` or `float32` voxels. The first three
//! `dim` entries are width, height and depth with width varying fastest,
//! which matches the row-major `[depth, height, width]` layout of
//! [`Volume`].

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::volume::{Dims, LabelMap, Spacing, Volume, VolumeError};

const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag.
const DATA_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
/// `xyzt_units` code for millimetres.
const UNITS_MM: u8 = 2;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {found:?}, expected \"n+1\\0\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported datatype code {0} (expected uint8, int16 or float32)")]
    UnsupportedDatatype(i16),
    #[error("truncated file: need {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("invalid header: {0}")]
    BadHeader(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> NiftiError + '_ {
    move |source| NiftiError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().expect("4 bytes"))
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().expect("4 bytes"))
}

/// Decoded header fields the pipeline uses.
#[derive(Debug, Clone, PartialEq)]
struct Header {
    dims: Dims,
    spacing: Spacing,
    datatype: i16,
    vox_offset: usize,
    slope: f64,
    inter: f64,
}

fn parse_header(bytes: &[u8]) -> Result<Header, NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated {
            needed: HEADER_SIZE,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[344..348].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(NiftiError::BadMagic { found: magic });
    }
    let sizeof_hdr = i32_at(bytes, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(NiftiError::BadHeader(format!(
            "sizeof_hdr {sizeof_hdr} (only little-endian NIfTI-1 is supported)"
        )));
    }
    let dim: Vec<i16> = (0..8).map(|i| i16_at(bytes, 40 + 2 * i)).collect();
    let rank = dim[0];
    if !(1..=7).contains(&rank) {
        return Err(NiftiError::BadHeader(format!("dim[0] = {rank}")));
    }
    let extent = |i: usize| -> Result<usize, NiftiError> {
        if i > rank as usize {
            return Ok(1);
        }
        match dim[i] {
            d if d >= 1 => Ok(d as usize),
            d => Err(NiftiError::BadHeader(format!("dim[{i}] = {d}"))),
        }
    };
    let (w, h, d) = (extent(1)?, extent(2)?, extent(3)?);
    for i in 4..=7 {
        if extent(i)? != 1 {
            return Err(NiftiError::BadHeader(format!("dim[{i}] = {} (only 3-D volumes)", dim[i])));
        }
    }
    let datatype = i16_at(bytes, 70);
    if ![DT_UINT8, DT_INT16, DT_FLOAT32].contains(&datatype) {
        return Err(NiftiError::UnsupportedDatatype(datatype));
    }
    let pix = |i: usize| {
        let v = f32_at(bytes, 76 + 4 * i).abs() as f64;
        if v.is_finite() && v > 0.0 {
            v
        } else {
            1.0
        }
    };
    let spacing = Spacing::new(pix(1), pix(2), pix(3))?;
    let vox_offset = f32_at(bytes, 108);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(NiftiError::BadHeader(format!("vox_offset {vox_offset}")));
    }
    let slope = f32_at(bytes, 112) as f64;
    let inter = f32_at(bytes, 116) as f64;
    let (slope, inter) = if slope.is_finite() && slope != 0.0 {
        (slope, if inter.is_finite() { inter } else { 0.0 })
    } else {
        (1.0, 0.0)
    };
    Ok(Header {
        dims: [d, h, w],
        spacing,
        datatype,
        vox_offset: vox_offset as usize,
        slope,
        inter,
    })
}

/// Parses an in-memory `.nii` image.
pub fn decode_volume(bytes: &[u8]) -> Result<Volume, NiftiError> {
    let hdr = parse_header(bytes)?;
    let n: usize = hdr.dims.iter().product();
    let width = match hdr.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        _ => 4,
    };
    let needed = hdr.vox_offset + n * width;
    if bytes.len() < needed {
        return Err(NiftiError::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    let payload = &bytes[hdr.vox_offset..needed];
    let raw: Vec<f64> = match hdr.datatype {
        DT_UINT8 => payload.iter().map(|&v| v as f64).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    let data = if (hdr.slope, hdr.inter) == (1.0, 0.0) {
        raw
    } else {
        raw.into_iter().map(|v| v * hdr.slope + hdr.inter).collect()
    };
    Ok(Volume::new(hdr.dims, hdr.spacing, data)?)
}

pub fn read_volume(path: &Path) -> Result<Volume, NiftiError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_volume(&bytes)
}

/// Reads a label image; every voxel must be a small non-negative integer.
pub fn read_labels(path: &Path) -> Result<LabelMap, NiftiError> {
    let vol = read_volume(path)?;
    let mut labels = Vec::with_capacity(vol.data().len());
    for (i, &v) in vol.data().iter().enumerate() {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(NiftiError::BadHeader(format!("voxel {i} = {v} is not a label value")));
        }
        labels.push(v as u8);
    }
    Ok(LabelMap::new(vol.dims(), labels)?)
}

fn encode_header(dims: Dims, spacing: Spacing, datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    let [d, hh, w] = dims;
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dim = [3, w as i16, hh as i16, d as i16, 1, 1, 1, 1];
    for (i, v) in dim.into_iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, v);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    let pixdim = [1.0, spacing.x as f32, spacing.y as f32, spacing.z as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, v) in pixdim.into_iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, v);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = UNITS_MM;
    h[344..348].copy_from_slice(MAGIC);
    h
}

fn check_extents(dims: Dims) -> Result<(), NiftiError> {
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(NiftiError::BadHeader(format!("dims {dims:?} exceed the int16 header range")));
    }
    Ok(())
}

/// Serializes intensities as little-endian `float32`; spacing is stored
/// in single precision as well.
pub fn encode_volume(volume: &Volume) -> Result<Vec<u8>, NiftiError> {
    check_extents(volume.dims())?;
    let mut bytes = encode_header(volume.dims(), volume.spacing, DT_FLOAT32, 32);
    bytes.reserve(volume.data().len() * 4);
    for &v in volume.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(bytes)
}

/// Writes intensities as `float32`. Values and spacing that are not exactly
/// representable in single precision are rounded.
pub fn write_volume(volume: &Volume, path: &Path) -> Result<(), NiftiError> {
    fs::write(path, encode_volume(volume)?).map_err(io_err(path))
}

pub fn encode_labels(labels: &LabelMap, spacing: Spacing) -> Result<Vec<u8>, NiftiError> {
    check_extents(labels.dims())?;
    let mut bytes = encode_header(labels.dims(), spacing, DT_UINT8, 8);
    bytes.extend_from_slice(labels.data());
    Ok(bytes)
}

/// Writes a label map as `uint8`.
pub fn write_labels(labels: &LabelMap, spacing: Spacing, path: &Path) -> Result<(), NiftiError> {
    fs::write(path, encode_labels(labels, spacing)?).map_err(io_err(path))
}
