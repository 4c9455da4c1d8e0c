// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint files.
//!
//! Layout: the magic `MIPC`, a little-endian `u32` format version, a
//! little-endian `u32` header length, a JSON header, then every tensor as
//! little-endian `f32` in header order. Parameters come first, followed by
//! the first and second optimizer moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamWState, TrainConfig};
use crate::error::{Error, Result};
use crate::transformer::{ModelConfig, Parameters};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MIPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Validation loss recorded after `step` optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: usize,
    pub loss: f64,
}

/// Full training state at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters<f32>,
    pub optimizer: AdamWState<f32>,
    pub step: usize,
    pub val_history: Vec<ValPoint>,
    /// Seed of the token permutation the model was trained or rewritten
    /// under, if any.
    pub obfuscation_seed: Option<u64>,
    pub train_config: Option<TrainConfig>,
}

impl Checkpoint {
    /// A step-0 checkpoint with fresh optimizer state.
    pub fn fresh(params: Parameters<f32>) -> Self {
        let optimizer = AdamWState::new(&params);
        Self {
            params,
            optimizer,
            step: 0,
            val_history: Vec::new(),
            obfuscation_seed: None,
            train_config: None,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    step: usize,
    optimizer_step: usize,
    val_history: Vec<ValPoint>,
    obfuscation_seed: Option<u64>,
    tensors: Vec<TensorEntry>,
}

/// `(section prefix, tensors)` in payload order.
fn sections(ck: &Checkpoint) -> [(&'static str, &Parameters<f32>); 3] {
    [
        ("", &ck.params),
        ("adam.m.", &ck.optimizer.m),
        ("adam.v.", &ck.optimizer.v),
    ]
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (prefix, p) in sections(ck) {
        for (name, _, t) in p.tensors() {
            entries.push(TensorEntry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            payload.reserve(t.len() * 4);
            for x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let header = Header {
        model_config: ck.params.config.clone(),
        train_config: ck.train_config.clone(),
        step: ck.step,
        optimizer_step: ck.optimizer.step,
        val_history: ck.val_history.clone(),
        obfuscation_seed: ck.obfuscation_seed,
        tensors: entries,
    };
    let header = serde_json::to_vec_pretty(&header)?;
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    load(path.as_ref(), None)
}

/// Loads a checkpoint and requires every tensor to match `expected`.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<Checkpoint> {
    load(path.as_ref(), Some(expected))
}

fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let corrupt = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let truncated = |need: usize| Error::CheckpointTruncated {
        path: path.to_path_buf(),
        expected: need,
        found: bytes.len(),
    };
    if bytes.len() < 12 {
        return Err(truncated(12));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic bytes".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let header_end = 12 + u32_at(8) as usize;
    if bytes.len() < header_end {
        return Err(truncated(header_end));
    }
    let header: Header = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| corrupt(format!("malformed header: {e}")))?;
    header
        .model_config
        .validate()
        .map_err(|e| corrupt(e.to_string()))?;

    let target = expected.unwrap_or(&header.model_config);
    let mut params = Parameters::<f32>::zeros(target);
    let mut m = Parameters::<f32>::zeros(target);
    let mut v = Parameters::<f32>::zeros(target);

    let mut need = header_end;
    let mut entries = header.tensors.iter();
    for (prefix, p) in [("", &mut params), ("adam.m.", &mut m), ("adam.v.", &mut v)] {
        for (name, _, t) in p.tensors_mut() {
            let full = format!("{prefix}{name}");
            let entry = entries
                .next()
                .ok_or_else(|| corrupt(format!("tensor table ends before {full}")))?;
            if entry.name != full {
                return Err(corrupt(format!(
                    "tensor table lists {} where {full} was expected",
                    entry.name
                )));
            }
            if entry.shape != t.shape() {
                return Err(Error::CheckpointShape {
                    path: path.to_path_buf(),
                    tensor: full,
                    expected: t.shape().to_vec(),
                    found: entry.shape.clone(),
                });
            }
            let start = header_end + entry.offset;
            let end = start + 4 * t.len();
            need = need.max(end);
            if bytes.len() < end {
                return Err(truncated(end));
            }
            for (x, chunk) in t.data_mut().iter_mut().zip(bytes[start..end].chunks_exact(4)) {
                *x = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
    }
    if entries.next().is_some() {
        return Err(corrupt("tensor table has extra entries".into()));
    }
    if bytes.len() > need {
        return Err(corrupt(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - need
        )));
    }
    // Non-finite payloads cannot come from training, which checks every step.
    for (name, _, t) in params.tensors() {
        if !t.data().iter().all(|x| x.is_finite()) {
            return Err(corrupt(format!("tensor {name} holds non-finite values")));
        }
    }
    Ok(Checkpoint {
        params,
        optimizer: AdamWState {
            step: header.optimizer_step,
            m,
            v,
        },
        step: header.step,
        val_history: header.val_history,
        obfuscation_seed: header.obfuscation_seed,
        train_config: header.train_config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            n_layer: 2,
            n_head: 2,
            d_model: 8,
            n_ctx: 6,
            vocab_size: 13,
            ..ModelConfig::desk(13)
        };
        let mut ck = Checkpoint::fresh(Parameters::init(&cfg, 5).unwrap());
        ck.optimizer.m = Parameters::init(&cfg, 6).unwrap();
        ck.optimizer.v = Parameters::init(&cfg, 7).unwrap();
        ck.optimizer.step = 3;
        ck.step = 3;
        ck.val_history = vec![ValPoint { step: 0, loss: 2.5 }, ValPoint { step: 3, loss: 2.25 }];
        ck.obfuscation_seed = Some(42);
        ck.train_config = Some(TrainConfig::default());
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample();
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        for ((_, _, a), (_, _, b)) in back.params.tensors().iter().zip(ck.params.tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointTruncated { .. })
        ));
        fs::write(&path, &bytes[..7]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointTruncated { .. })
        ));
    }

    #[test]
    fn wrong_config_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample();
        save_checkpoint(&path, &ck).unwrap();
        let mut other = ck.params.config.clone();
        other.d_model = 16;
        match load_checkpoint_expecting(&path, &other) {
            Err(Error::CheckpointShape { tensor, .. }) => assert_eq!(tensor, "embed.W_E"),
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn corrupt_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));

        let mut bad = good.clone();
        bad[13] = b'#';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));

        let mut bad = good;
        bad.push(0);
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
    }
}
