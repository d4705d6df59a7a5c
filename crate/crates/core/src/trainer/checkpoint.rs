//! Binary checkpoint format.
//!
//! Layout: the 8 magic bytes `HANERF01`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then for every parameter in header order its value,
//! first moment and second moment as little-endian `f64`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{init_model, TrainConfig};
use crate::diffcore::{Array, Parameter, ParameterSet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HANERF01";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Exact position in a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().unwrap_or(0));
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iteration: u64,
    pub rng: RngState,
    pub num_train_images: usize,
    pub params: ParameterSet,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: TrainConfig,
    iteration: u64,
    rng: RngState,
    num_train_images: usize,
    params: Vec<ParamHeader>,
}

impl Checkpoint {
    /// Fails unless this checkpoint was trained in `cfg`'s mode with the same
    /// parameter names and shapes.
    pub fn check_compatible(&self, cfg: &TrainConfig, num_train_images: usize) -> Result<()> {
        if self.config.mode != cfg.mode {
            return Err(Error::Incompatible(format!(
                "checkpoint was trained in {} mode, configuration asks for {}",
                self.config.mode, cfg.mode
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let expected = init_model(cfg.mode, &cfg.model, num_train_images, &mut rng)?;
        let have: Vec<&str> = self.params.names().collect();
        let want: Vec<&str> = expected.names().collect();
        if have != want {
            let missing: Vec<&str> = want
                .iter()
                .filter(|n| !self.params.contains(n))
                .copied()
                .collect();
            let extra: Vec<&str> = have
                .iter()
                .filter(|n| !expected.contains(n))
                .copied()
                .collect();
            return Err(Error::Incompatible(format!(
                "parameter sets differ (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        for (name, p) in expected.iter() {
            let found = self.params.value(name).expect("names match");
            if found.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: p.value.shape().to_vec(),
                    found: found.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            iteration: self.iteration,
            rng: self.rng.clone(),
            num_train_images: self.num_train_images,
            params: self
                .params
                .iter()
                .map(|(name, p)| ParamHeader {
                    name: name.to_string(),
                    shape: p.value.shape().to_vec(),
                    step: p.step,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 24 * self.params.num_values());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.params.iter() {
            for a in [&p.value, &p.first_moment, &p.second_moment] {
                for v in a.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated("missing magic bytes".into()));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
        }
        let len_bytes = bytes
            .get(8..16)
            .ok_or_else(|| Error::Truncated("missing header length".into()))?;
        let header_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16usize.saturating_add(header_len))
            .ok_or_else(|| {
                Error::Truncated(format!("header of {header_len} bytes is cut short"))
            })?;
        let raw: serde_json::Value = serde_json::from_slice(json)
            .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
        let version = raw.get("version").and_then(serde_json::Value::as_u64);
        if version != Some(u64::from(CHECKPOINT_VERSION)) {
            return Err(Error::Version {
                found: version.map_or(0, |v| v as u32),
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(raw)
            .map_err(|e| Error::Format(format!("malformed header: {e}")))?;

        let mut pos = 16 + header_len;
        let mut read = |n: usize, name: &str| -> Result<Array> {
            let end = pos + 8 * n;
            let chunk = bytes
                .get(pos..end)
                .ok_or_else(|| Error::Truncated(format!("data for `{name}` is cut short")))?;
            pos = end;
            Ok(Array::new(
                &[n],
                chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            ))
        };
        let mut params = ParameterSet::new();
        for ph in &header.params {
            let n: usize = ph.shape.iter().product();
            let value = read(n, &ph.name)?.reshaped(&ph.shape);
            let first_moment = read(n, &ph.name)?.reshaped(&ph.shape);
            let second_moment = read(n, &ph.name)?.reshaped(&ph.shape);
            if params.contains(&ph.name) {
                return Err(Error::Format(format!(
                    "parameter `{}` listed twice",
                    ph.name
                )));
            }
            params.insert_with_state(
                ph.name.clone(),
                Parameter {
                    value,
                    first_moment,
                    second_moment,
                    step: ph.step,
                },
            );
        }
        if pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - pos
            )));
        }
        Ok(Self {
            config: header.config,
            iteration: header.iteration,
            rng: header.rng,
            num_train_images: header.num_train_images,
            params,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
