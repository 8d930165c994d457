//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//! magic `MIXOECKP` | version u32 | phase u8 | config hash [32] |
//! architecture length u32 | architecture utf-8 | param count u64 |
//! params f64… | SHA-256 of everything before it [32]

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Phase, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Classifier;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MIXOECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    /// Hex SHA-256 of the training config that produced the parameters.
    pub config_hash: String,
    pub architecture: String,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn capture<M: Classifier>(model: &M, phase: Phase, config: &TrainConfig) -> Self {
        Self {
            phase,
            config_hash: config.hash(),
            architecture: model.architecture(),
            params: model.params(),
        }
    }

    pub fn restore<M: Classifier>(&self, model: &mut M) -> Result<()> {
        let arch = model.architecture();
        if !self.architecture.is_empty() && !arch.is_empty() && arch != self.architecture {
            return Err(Error::invalid_arg("checkpoint architecture does not match the model"));
        }
        model.set_params(&self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(96 + self.architecture.len() + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(match self.phase {
            Phase::Standard => 0,
            Phase::Finetune => 1,
        });
        let hash = hex::decode(&self.config_hash).unwrap_or_default();
        let mut fixed = [0u8; 32];
        let n = hash.len().min(32);
        fixed[..n].copy_from_slice(&hash[..n]);
        out.extend_from_slice(&fixed);
        out.extend_from_slice(&(self.architecture.len() as u32).to_le_bytes());
        out.extend_from_slice(self.architecture.as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 8 + 4 + 1 + 32 + 4 + 8 + 32 {
            return Err("file is too short".into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err("checksum mismatch".into());
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err("not a checkpoint file".into());
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let phase = match r.take(1)?[0] {
            0 => Phase::Standard,
            1 => Phase::Finetune,
            other => return Err(format!("unknown phase tag {other}")),
        };
        let config_hash = hex::encode(r.take(32)?);
        let arch_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let architecture =
            String::from_utf8(r.take(arch_len)?.to_vec()).map_err(|_| "architecture is not utf-8".to_string())?;
        let n = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let raw = r.take(n.checked_mul(8).ok_or("parameter count overflows")?)?;
        if r.pos != body.len() {
            return Err("trailing bytes".into());
        }
        let params = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            phase,
            config_hash,
            architecture,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint, rejecting it when `expected_hash` is given and
    /// differs from the embedded config hash.
    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Self::from_bytes(&bytes).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })?;
        if let Some(expected) = expected_hash {
            if expected != ckpt.config_hash {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    reason: format!("config hash {} does not match expected {expected}", ckpt.config_hash),
                });
            }
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err("truncated".into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::test_support::mlp;

    fn sample() -> (Checkpoint, TrainConfig) {
        let cfg = TrainConfig::standard(3);
        (Checkpoint::capture(&mlp(3, 2), Phase::Standard, &cfg), cfg)
    }

    #[test]
    fn round_trip_is_exact() {
        let (ckpt, cfg) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path, Some(&cfg.hash())).unwrap();
        assert_eq!(back, ckpt);
        let mut model = mlp(3, 99);
        back.restore(&mut model).unwrap();
        assert_eq!(model, mlp(3, 2));
    }

    #[test]
    fn hash_mismatch_and_corruption_rejected() {
        let (ckpt, _) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let other = TrainConfig::standard(4).hash();
        assert!(matches!(
            Checkpoint::load(&path, Some(&other)),
            Err(Error::Checkpoint { .. })
        ));
        let mut bytes = ckpt.to_bytes();
        bytes[40] ^= 1;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let (ckpt, _) = sample();
        assert!(ckpt.restore(&mut mlp(4, 0)).is_err());
    }
}
