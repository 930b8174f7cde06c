//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DIME" | u32 version | [u8; 32] sha256(config json)
//! u64 len | config json
//! [u8; 32] rng seed | u64 rng stream | u128 rng word position
//! u64 epoch | f64 dev macro-F1
//! u64 count | count x (u32 len | name | u32 ndim | ndim x u64 | f64 values)
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::data::{write_atomic, SplitSpec};
use crate::error::{DimeError, Result};
use crate::model::{DimeModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DIME";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub split: Option<SplitSpec>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub rng: RngState,
    pub epoch: usize,
    pub dev_macro_f1: f64,
    /// Every parameter in store order, frozen ones included.
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(
        model: &DimeModel,
        config: CheckpointConfig,
        rng: RngState,
        epoch: usize,
        dev_macro_f1: f64,
    ) -> Self {
        Self {
            config,
            rng,
            epoch,
            dev_macro_f1,
            params: model.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    /// Rebuilds the model; fails without side effects if any parameter is
    /// missing or misshapen.
    pub fn to_model(&self) -> Result<DimeModel> {
        let mut model = DimeModel::new(self.config.model.clone())?;
        model.store.load_values(self.params.clone())?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(Sha256::digest(&json).as_slice());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.dev_macro_f1.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.error(0, "not a checkpoint file (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(DimeError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let digest = r.take(32, "config digest")?.to_vec();
        let len = r.u64("config length")? as usize;
        let at = r.pos;
        let json = r.take(len, "config")?;
        if Sha256::digest(json).as_slice() != digest.as_slice() {
            return Err(r.error(at, "config digest mismatch"));
        }
        let config: CheckpointConfig =
            serde_json::from_slice(json).map_err(|e| r.error(at, &format!("invalid config: {e}")))?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32, "rng seed")?);
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        let epoch = r.u64("epoch")? as usize;
        let dev_macro_f1 = f64::from_le_bytes(r.take(8, "dev macro-F1")?.try_into().expect("8 bytes"));
        let count = r.u64("parameter count")? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos;
            let n = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|_| r.error(at, "parameter name is not UTF-8"))?
                .to_string();
            let ndim = r.u32("rank")? as usize;
            if ndim == 0 || ndim > 4 {
                return Err(r.error(at, &format!("parameter {name} has unsupported rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n > 0 && n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.error(at, &format!("parameter {name} has an impossible shape {shape:?}")))?;
            let raw = r.take(numel * 8, "values")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(r.error(r.pos, "trailing bytes after the last parameter"));
        }
        Ok(Self {
            config,
            rng: RngState { seed, stream, word_pos },
            epoch,
            dev_macro_f1,
            params,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn error(&self, offset: usize, message: &str) -> DimeError {
        DimeError::Checkpoint {
            offset,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.error(self.pos, &format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &ckpt.to_bytes())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| DimeError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let model = DimeModel::new(ModelConfig::tiny(3, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        let cfg = CheckpointConfig {
            model: model.config.clone(),
            split: Some(SplitSpec::in_target(3)),
            train: Some(TrainConfig::default()),
        };
        Checkpoint::from_model(&model, cfg, RngState::capture(&rng), 4, 0.625)
    }

    #[test]
    fn round_trips_losslessly() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let mut a = c.rng.restore();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        assert_eq!(a.next_u64(), rng.next_u64());
    }

    #[test]
    fn every_truncation_is_rejected_with_an_offset() {
        let bytes = sample().to_bytes();
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(DimeError::Checkpoint { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn version_and_digest_are_checked() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, DimeError::Version { found: 2, expected: 1 }), "{err}");

        let mut bytes = sample().to_bytes();
        let at = 4 + 4 + 32 + 8 + 3;
        bytes[at] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(DimeError::Checkpoint { .. })));
    }

    #[test]
    fn mismatched_parameters_build_no_model() {
        let mut c = sample();
        c.params.pop();
        assert!(c.to_model().is_err());
        let mut c = sample();
        c.params[0].1 = Tensor::zeros(&[1]);
        assert!(c.to_model().is_err());
    }
}
