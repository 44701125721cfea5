//! `AUNC` checkpoint files, all integers and floats little-endian:
//!
//! ```text
//! magic "AUNC" | version u32
//! depth u32 | base_channels u32 | in_channels u32 | num_classes u32 | gate u8 | seed u64
//! epoch u64
//! adam: beta1 f64 | beta2 f64 | eps f64 | step u64
//! history: rows u32, then per row epoch u32 and six f64 (NaN = undefined)
//! tensors: count u32, then per tensor
//!     name_len u16 | name utf-8 | rank u8 | dims u64 × rank | f32 payload
//! ```
//!
//! The tensor table holds the parameters followed by the Adam moments,
//! named `adam.m.<param>` and `adam.v.<param>`.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::model::{ModelConfig, ModelError, UNet};
use super::train::EpochRecord;
use crate::autodiff::AdamState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AUNC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint ends early while reading {0}")]
    Truncated(&'static str),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config {found:?} does not match expected {expected:?}")]
    ConfigMismatch {
        found: ModelConfig,
        expected: ModelConfig,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Model, optimizer state, epochs completed and per-epoch history.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: UNet,
    pub adam: AdamState,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn initial(cfg: ModelConfig) -> Result<Self, ModelError> {
        let model = UNet::new(cfg)?;
        let adam = AdamState::new(model.params());
        Ok(Self {
            model,
            adam,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Errors unless the stored config equals `expected`.
    pub fn ensure_config(&self, expected: &ModelConfig) -> Result<(), CheckpointError> {
        let found = *self.model.config();
        if &found != expected {
            return Err(CheckpointError::ConfigMismatch {
                found,
                expected: *expected,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = self.model.config();
        for v in [
            cfg.depth,
            cfg.base_channels,
            cfg.in_channels,
            cfg.num_classes,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(cfg.gate as u8);
        out.extend_from_slice(&cfg.seed.to_le_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        for v in [self.adam.beta1, self.adam.beta2, self.adam.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        out.extend_from_slice(&(self.history.len() as u32).to_le_bytes());
        for r in &self.history {
            out.extend_from_slice(&(r.epoch as u32).to_le_bytes());
            out.extend_from_slice(&r.loss.to_le_bytes());
            for v in [r.dice, r.iou, r.accuracy, r.sensitivity, r.specificity] {
                out.extend_from_slice(&v.unwrap_or(f64::NAN).to_le_bytes());
            }
        }

        let names = self.model.names();
        let params = self.model.params();
        let count = names.len() * 3;
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let mut put = |name: &str, shape: &[usize], data: &[f32]| {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, p) in names.iter().zip(params) {
            put(name, p.shape(), p.data());
        }
        for (i, (name, p)) in names.iter().zip(params).enumerate() {
            put(&format!("adam.m.{name}"), p.shape(), &self.adam.m[i]);
        }
        for (i, (name, p)) in names.iter().zip(params).enumerate() {
            put(&format!("adam.v.{name}"), p.shape(), &self.adam.v[i]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let depth = r.u32("config")? as usize;
        let base_channels = r.u32("config")? as usize;
        let in_channels = r.u32("config")? as usize;
        let num_classes = r.u32("config")? as usize;
        let gate = match r.take(1, "config")?[0] {
            0 => false,
            1 => true,
            other => return Err(CheckpointError::Corrupt(format!("gate flag {other}"))),
        };
        let seed = r.u64("config")?;
        let cfg = ModelConfig {
            depth,
            base_channels,
            in_channels,
            num_classes,
            gate,
            seed,
        };
        cfg.validate()?;
        let epoch = r.u64("epoch")? as usize;
        let (beta1, beta2, eps) = (r.f64("adam")?, r.f64("adam")?, r.f64("adam")?);
        let step = r.u64("adam")?;
        let rows = r.u32("history")? as usize;
        let mut history = Vec::with_capacity(rows.min(1 << 20));
        let defined = |v: f64| (!v.is_nan()).then_some(v);
        for _ in 0..rows {
            history.push(EpochRecord {
                epoch: r.u32("history")? as usize,
                loss: r.f64("history")?,
                dice: defined(r.f64("history")?),
                iou: defined(r.f64("history")?),
                accuracy: defined(r.f64("history")?),
                sensitivity: defined(r.f64("history")?),
                specificity: defined(r.f64("history")?),
            });
        }

        let count = r.u32("tensor table")? as usize;
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let len = r.u16("tensor name")? as usize;
            let name = String::from_utf8(r.take(len, "tensor name")?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("tensor name is not utf-8".into()))?;
            let rank = r.take(1, "tensor rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("tensor shape")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {name} is too large")))?;
            let payload = r.take(
                n.checked_mul(4)
                    .ok_or(CheckpointError::Truncated("tensor payload"))?,
                "tensor payload",
            )?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t =
                Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            if let Some(p) = name.strip_prefix("adam.m.") {
                m.push((p.to_string(), t));
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                v.push((p.to_string(), t));
            } else {
                params.push((name, t));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }

        let model = UNet::from_params(cfg, params)?;
        let moments = |list: Vec<(String, Tensor<f32>)>,
                       kind: &str|
         -> Result<Vec<Vec<f32>>, CheckpointError> {
            model
                .names()
                .iter()
                .zip(model.params())
                .map(|(name, p)| {
                    let (_, t) = list.iter().find(|(n, _)| n == name).ok_or_else(|| {
                        CheckpointError::Corrupt(format!("missing adam {kind} for {name}"))
                    })?;
                    if t.shape() != p.shape() {
                        return Err(CheckpointError::Corrupt(format!(
                            "adam {kind} shape for {name}"
                        )));
                    }
                    Ok(t.data().to_vec())
                })
                .collect()
        };
        if m.len() != model.names().len() || v.len() != model.names().len() {
            return Err(CheckpointError::Corrupt("optimizer moment count".into()));
        }
        let adam = AdamState {
            beta1,
            beta2,
            eps,
            step,
            m: moments(m, "m")?,
            v: moments(v, "v")?,
        };
        Ok(Self {
            model,
            adam,
            epoch,
            history,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, c.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let mut c = Checkpoint::initial(ModelConfig {
            depth: 2,
            base_channels: 2,
            ..ModelConfig::toy(9)
        })
        .unwrap();
        c.epoch = 3;
        c.adam.step = 7;
        c.adam.m[0][0] = 0.5;
        c.history.push(EpochRecord {
            epoch: 1,
            loss: 0.75,
            dice: Some(0.1),
            iou: None,
            accuracy: Some(0.9),
            sensitivity: Some(0.2),
            specificity: Some(0.99),
        });
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = small();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"AUNC");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = small().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Version { found: 9, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn truncation_detected() {
        let bytes = small().to_bytes();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                Checkpoint::from_bytes(&bytes[..cut]).is_err(),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let mut bytes = small().to_bytes();
        // num_classes lives after magic, version, depth, base, in_channels
        bytes[20..24].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Model(_))
        ));
        let c = small();
        let other = ModelConfig {
            num_classes: 3,
            ..*c.model.config()
        };
        assert!(c.ensure_config(&other).is_err());
    }
}
