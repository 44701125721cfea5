//! Minimal single-file NIfTI-1 (`.nii`) reader and float32 writer.
//!
//! Supported payloads: uint8, int16, uint16 and float32. Byte order is taken
//! from the `sizeof_hdr` field, which must read 348 in one of the two orders.
//! Compressed `.nii.gz` files must be decompressed by the caller.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::volume::{LabelVolume, Volume3D, VolumeError};

pub const HEADER_SIZE: usize = 348;
pub const DATA_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_UINT16: i16 = 512;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("file too short for a NIfTI-1 header ({0} bytes)")]
    ShortHeader(usize),
    #[error("header size field is neither 348 little- nor big-endian")]
    BadHeaderSize,
    #[error("bad magic {0:?}, expected \"n+1\\0\"")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensionality dim[0] = {0}")]
    UnsupportedRank(i16),
    #[error("4D image with {0} volumes; only single-volume images are supported")]
    MultipleVolumes(usize),
    #[error("invalid extent {0} in dim field")]
    BadExtent(i16),
    #[error("vox_offset {0} is invalid")]
    BadOffset(f32),
    #[error("payload truncated: need {needed} bytes after offset, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// Header fields the toolkit reads.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiMeta {
    /// `dim[0..=4]` as stored: rank followed by x, y, z, t extents.
    pub dims: [usize; 5],
    pub datatype: i16,
    pub scl_slope: f32,
    pub scl_inter: f32,
    /// Voxel size along x, y, z.
    pub pixdim: [f32; 3],
    pub byte_swapped: bool,
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        match self.endian {
            Endian::Little => i16::from_le_bytes(b),
            Endian::Big => i16::from_be_bytes(b),
        }
    }

    fn u16(&self, off: usize) -> u16 {
        self.i16(off) as u16
    }

    fn f32(&self, off: usize) -> f32 {
        let b = [
            self.bytes[off],
            self.bytes[off + 1],
            self.bytes[off + 2],
            self.bytes[off + 3],
        ];
        match self.endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        }
    }
}

fn host_endian() -> Endian {
    if cfg!(target_endian = "little") {
        Endian::Little
    } else {
        Endian::Big
    }
}

/// Decodes an in-memory `.nii` image into header metadata and scaled voxel values.
pub fn decode(bytes: &[u8]) -> Result<(NiftiMeta, Vec<f32>), NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::ShortHeader(bytes.len()));
    }
    let size = [bytes[0], bytes[1], bytes[2], bytes[3]];
    let endian = if i32::from_le_bytes(size) == HEADER_SIZE as i32 {
        Endian::Little
    } else if i32::from_be_bytes(size) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(NiftiError::BadHeaderSize);
    };
    let magic = [bytes[344], bytes[345], bytes[346], bytes[347]];
    if &magic != MAGIC {
        return Err(NiftiError::BadMagic(magic));
    }
    let r = Reader { bytes, endian };
    let rank = r.i16(40);
    if !(rank == 3 || rank == 4) {
        return Err(NiftiError::UnsupportedRank(rank));
    }
    let mut dims = [rank as usize, 1, 1, 1, 1];
    for (i, d) in dims.iter_mut().enumerate().skip(1).take(rank as usize) {
        let v = r.i16(40 + 2 * i);
        if v < 1 {
            return Err(NiftiError::BadExtent(v));
        }
        *d = v as usize;
    }
    if dims[4] > 1 {
        return Err(NiftiError::MultipleVolumes(dims[4]));
    }
    let datatype = r.i16(70);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    let vox_offset = r.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= DATA_OFFSET as f32) {
        return Err(NiftiError::BadOffset(vox_offset));
    }
    let offset = vox_offset as usize;
    let count = dims[1] * dims[2] * dims[3];
    let needed = count * width;
    let found = bytes.len().saturating_sub(offset);
    if found < needed {
        return Err(NiftiError::Truncated { needed, found });
    }
    let payload = Reader {
        bytes: &bytes[offset..offset + needed],
        endian,
    };
    let mut values: Vec<f32> = match datatype {
        DT_UINT8 => payload.bytes.iter().map(|&b| b as f32).collect(),
        DT_INT16 => (0..count).map(|i| payload.i16(2 * i) as f32).collect(),
        DT_UINT16 => (0..count).map(|i| payload.u16(2 * i) as f32).collect(),
        _ => (0..count).map(|i| payload.f32(4 * i)).collect(),
    };
    let scl_slope = r.f32(112);
    let scl_inter = r.f32(116);
    if scl_slope != 0.0 && scl_slope.is_finite() && scl_inter.is_finite() {
        for v in &mut values {
            *v = *v * scl_slope + scl_inter;
        }
    }
    let meta = NiftiMeta {
        dims,
        datatype,
        scl_slope,
        scl_inter,
        pixdim: [r.f32(80), r.f32(84), r.f32(88)],
        byte_swapped: endian != host_endian(),
    };
    Ok((meta, values))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, NiftiError> {
    fs::read(path).map_err(|source| NiftiError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn volume_dims(meta: &NiftiMeta) -> [usize; 3] {
    // file order is x fastest; volumes are indexed (z, y, x)
    [meta.dims[3], meta.dims[2], meta.dims[1]]
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<(Volume3D, NiftiMeta), NiftiError> {
    let (meta, values) = decode(&read_bytes(path.as_ref())?)?;
    let spacing = meta.pixdim;
    let vol = Volume3D::new(volume_dims(&meta), values)?
        .with_spacing(Some([spacing[2], spacing[1], spacing[0]]));
    Ok((vol, meta))
}

/// Reads a segmentation mask, remapping BraTS label 4 to 3.
pub fn read_nifti_labels(path: impl AsRef<Path>) -> Result<(LabelVolume, NiftiMeta), NiftiError> {
    let (meta, values) = decode(&read_bytes(path.as_ref())?)?;
    let labels = LabelVolume::from_brats(volume_dims(&meta), &values)?;
    Ok((labels, meta))
}

fn encode(dims: [usize; 3], spacing: [f32; 3], datatype: i16, payload: &[u8]) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 =
        |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 =
        |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let [d, hh, w] = dims;
    for (i, v) in [3, w, hh, d, 1, 1, 1, 1].into_iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, v as i16);
    }
    put_i16(&mut h, 70, datatype);
    let bitpix = match datatype {
        DT_UINT8 => 8,
        DT_INT16 | DT_UINT16 => 16,
        _ => 32,
    };
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    // pixdim[1..3] = x, y, z spacing
    put_f32(&mut h, 80, spacing[2]);
    put_f32(&mut h, 84, spacing[1]);
    put_f32(&mut h, 88, spacing[0]);
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    // scl_slope = 0: stored values are used unscaled
    put_f32(&mut h, 112, 0.0);
    h[123] = 2; // xyzt_units: millimetres
    h[344..348].copy_from_slice(MAGIC);
    h.extend_from_slice(payload);
    h
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), NiftiError> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|source| NiftiError::Io {
            path: path.display().to_string(),
            source,
        })
}

/// Writes a little-endian float32 NIfTI-1 image.
pub fn write_nifti(v: &Volume3D, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    let payload: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    let bytes = encode(
        v.dims(),
        v.spacing().unwrap_or([1.0; 3]),
        DT_FLOAT32,
        &payload,
    );
    write_file(path.as_ref(), &bytes)
}

/// Writes a uint8 mask with BraTS label values (3 stored as 4).
pub fn write_nifti_labels(l: &LabelVolume, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    let bytes = encode(l.dims(), [1.0; 3], DT_UINT8, &l.to_brats());
    write_file(path.as_ref(), &bytes)
}
