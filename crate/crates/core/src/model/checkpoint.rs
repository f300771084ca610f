//! Checkpoint container and binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CLMQ" | u32 version = 1 | u64 metadata_len | metadata (UTF-8 JSON)
//!        | f32 payload ... | u64 FNV-1a digest of the payload bytes
//! ```
//!
//! The metadata holds the model config and an ordered table of
//! `{name, shape, offset}` entries; `offset` is a byte offset into the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::util::{fnv1a, Fnv1a};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLMQ";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Validates the tensor inventory against the config and checks finiteness.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = self.config.tensor_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::SchemaError(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in &expected {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::SchemaError(format!("missing tensor {name}")))?;
            if &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::SchemaError(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::SchemaError(format!(
                    "tensor {name} has non-finite values"
                )));
            }
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::SchemaError(format!("missing tensor {name}")))
    }

    /// FNV-1a digest of the canonical payload, as hex.
    pub fn digest(&self) -> String {
        let mut h = Fnv1a::new();
        for (name, _) in self.config.tensor_shapes() {
            if let Some(t) = self.tensors.get(&name) {
                for v in &t.data {
                    h.update(&v.to_le_bytes());
                }
            }
        }
        format!("{:016x}", h.finish())
    }
}

/// Deterministic random weights: matrices ~ N(0, 1/fan_in) with fan_in the
/// input (column) dimension, embeddings ~ N(0, 1), norm gains = 1. Tensors
/// are drawn in file order from one ChaCha8 stream seeded with `seed`.
pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.tensor_shapes() {
        let mut t = Tensor::zeros(shape);
        if t.shape.len() == 1 {
            t.data.fill(1.0);
        } else {
            let std = if name == "embed" {
                1.0
            } else {
                1.0 / (t.shape[1] as f32).sqrt()
            };
            for v in t.data.iter_mut() {
                let z: f32 = StandardNormal.sample(&mut rng);
                *v = z * std;
            }
        }
        tensors.insert(name, t);
    }
    Ok(Checkpoint {
        config: config.clone(),
        tensors,
    })
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.validate()?;
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (name, shape) in ckpt.config.tensor_shapes() {
        let t = &ckpt.tensors[&name];
        entries.push(TensorEntry {
            name,
            shape,
            offset: payload.len() as u64,
        });
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = serde_json::to_vec(&Metadata {
        config: ckpt.config.clone(),
        tensors: entries,
    })
    .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + meta.len() + payload.len() + 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&fnv1a(&payload).to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < 16 {
        return Err(corrupt("file shorter than header"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let meta_end = usize::try_from(meta_len)
        .ok()
        .and_then(|m| m.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated metadata"))?;
    if bytes.len() < meta_end + 8 {
        return Err(corrupt("truncated payload"));
    }
    let meta: Metadata = serde_json::from_slice(&bytes[16..meta_end])
        .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
    let payload = &bytes[meta_end..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    meta.config
        .validate()
        .map_err(|e| Error::SchemaError(e.to_string()))?;

    let expected = meta.config.tensor_shapes();
    let want_bytes: usize = expected
        .iter()
        .map(|(_, s)| 4 * s.iter().product::<usize>())
        .sum();
    if payload.len() < want_bytes {
        return Err(corrupt("truncated payload"));
    }
    if payload.len() > want_bytes {
        return Err(Error::SchemaError(format!(
            "payload has {} bytes, config implies {want_bytes}",
            payload.len()
        )));
    }
    if fnv1a(payload) != stored {
        return Err(corrupt("payload digest mismatch"));
    }
    if meta.tensors.len() != expected.len() {
        return Err(Error::SchemaError(format!(
            "table lists {} tensors, config implies {}",
            meta.tensors.len(),
            expected.len()
        )));
    }
    let mut tensors = BTreeMap::new();
    for entry in meta.tensors {
        let Some((_, shape)) = expected.iter().find(|(n, _)| *n == entry.name) else {
            return Err(Error::SchemaError(format!(
                "unexpected tensor {}",
                entry.name
            )));
        };
        if *shape != entry.shape {
            return Err(Error::SchemaError(format!(
                "tensor {} has shape {:?}, config implies {shape:?}",
                entry.name, entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        let start = usize::try_from(entry.offset).map_err(|_| corrupt("bad offset"))?;
        let end = start
            .checked_add(4 * n)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| Error::SchemaError(format!("tensor {} exceeds payload", entry.name)))?;
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors
            .insert(
                entry.name.clone(),
                Tensor {
                    shape: shape.clone(),
                    data,
                },
            )
            .is_some()
        {
            return Err(Error::SchemaError(format!(
                "duplicate tensor {}",
                entry.name
            )));
        }
    }
    let ckpt = Checkpoint {
        config: meta.config,
        tensors,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            model_dim: 8,
            ffn_dim: 12,
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 1,
            max_seq_len: 16,
            rope_theta: 10_000.0,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_random(&tiny(), 7).unwrap();
        let b = init_random(&tiny(), 7).unwrap();
        assert_eq!(a, b);
        let c = init_random(&tiny(), 8).unwrap();
        assert!(a.tensors.iter().any(|(k, t)| c.tensors[k].data != t.data));
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn init_scales_by_fan_in() {
        let cfg = ModelConfig::clm_micro();
        let ck = init_random(&cfg, 1).unwrap();
        let down = &ck.tensors["layers.0.down"].data;
        let var: f64 = down.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / down.len() as f64;
        assert!((var * 192.0 - 1.0).abs() < 0.05, "{var}");
        assert!(ck.tensors["final_norm"].data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn encode_decode_round_trip() {
        let ck = init_random(&tiny(), 3).unwrap();
        let bytes = encode_checkpoint(&ck).unwrap();
        assert_eq!(&bytes[..4], b"CLMQ");
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
    }

    #[test]
    fn corrupt_inputs() {
        let ck = init_random(&tiny(), 3).unwrap();
        let bytes = encode_checkpoint(&ck).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::CorruptCheckpoint(_))
        ));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::CorruptCheckpoint(_))
        ));

        let mut bad = bytes.clone();
        let i = bytes.len() - 20;
        bad[i] ^= 0x01;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::CorruptCheckpoint(_))
        ));

        for cut in [3, 15, 40, bytes.len() - 1, bytes.len() - 9] {
            assert!(
                matches!(
                    decode_checkpoint(&bytes[..cut]),
                    Err(Error::CorruptCheckpoint(_))
                ),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn shape_mismatch_is_schema_error() {
        let mut ck = init_random(&tiny(), 3).unwrap();
        let bytes = encode_checkpoint(&ck).unwrap();
        // Rewrite metadata with a config that implies different shapes.
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut meta: serde_json::Value =
            serde_json::from_slice(&bytes[16..16 + meta_len]).unwrap();
        meta["config"]["ffn_dim"] = serde_json::json!(10);
        let meta = serde_json::to_vec(&meta).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&bytes[16 + meta_len..]);
        assert!(matches!(
            decode_checkpoint(&out),
            Err(Error::SchemaError(_))
        ));

        ck.tensors.remove("head");
        assert!(matches!(encode_checkpoint(&ck), Err(Error::SchemaError(_))));
    }
}
