//! `VOL1` cache format: the magic `VOL1`, four little-endian `u32` extents
//! `(channels, depth, height, width)`, then little-endian float32 voxels,
//! channel-major with x fastest.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const RAW_MAGIC: &[u8; 4] = b"VOL1";
pub const RAW_HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum RawError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"VOL1\"")]
    BadMagic(Vec<u8>),
    #[error("payload is {found} bytes, header dims {dims:?} require {expected}")]
    SizeMismatch {
        dims: [u32; 4],
        expected: usize,
        found: usize,
    },
    #[error("tensor of shape {0:?} is not a (C, D, H, W) stack")]
    Rank(Vec<usize>),
}

pub fn encode_raw(t: &Tensor<f32>) -> Result<Vec<u8>, RawError> {
    let &[c, d, h, w] = t.shape() else {
        return Err(RawError::Rank(t.shape().to_vec()));
    };
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + 4 * t.len());
    out.extend_from_slice(RAW_MAGIC);
    for v in [c, d, h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raw(bytes: &[u8]) -> Result<Tensor<f32>, RawError> {
    if bytes.len() < RAW_HEADER_LEN || &bytes[..4] != RAW_MAGIC {
        return Err(RawError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
    }
    let mut dims = [0u32; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    }
    let payload = &bytes[RAW_HEADER_LEN..];
    let expected = dims
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d as usize))
        .unwrap_or(usize::MAX);
    if payload.len() != expected {
        return Err(RawError::SizeMismatch {
            dims,
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::new(dims.map(|d| d as usize).to_vec(), data).expect("length checked"))
}

pub fn write_raw(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<(), RawError> {
    let path = path.as_ref();
    fs::write(path, encode_raw(t)?).map_err(|source| RawError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<Tensor<f32>, RawError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| RawError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_raw(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_twenty_bytes() {
        let t = Tensor::from_fn(vec![1, 2, 2, 2], |i| i as f32);
        let bytes = encode_raw(&t).unwrap();
        assert_eq!(bytes.len(), RAW_HEADER_LEN + 8 * 4);
        assert_eq!(&bytes[..4], b"VOL1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &0.0f32.to_le_bytes());
    }

    #[test]
    fn size_mismatch_and_magic() {
        let t = Tensor::from_fn(vec![1, 2, 2, 2], |i| i as f32);
        let bytes = encode_raw(&t).unwrap();
        assert!(matches!(
            decode_raw(&bytes[..bytes.len() - 4]),
            Err(RawError::SizeMismatch { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_raw(&bad), Err(RawError::BadMagic(_))));
        assert!(matches!(
            encode_raw(&Tensor::<f32>::zeros(vec![2, 2])),
            Err(RawError::Rank(_))
        ));
    }
}
