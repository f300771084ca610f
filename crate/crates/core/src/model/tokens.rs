//! Token corpora: raw little-endian `u32` files and seeded synthesis.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Checkpoint, Model};
use crate::error::{Error, Result};
use crate::util::{derive_seed, Fnv1a};

pub fn write_tokens(path: impl AsRef<Path>, tokens: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_tokens(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::InvalidInput(format!(
            "token file length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Hex FNV-1a digest of the token file bytes.
pub fn tokens_digest(tokens: &[u32]) -> String {
    let mut h = Fnv1a::new();
    for t in tokens {
        h.update(&t.to_le_bytes());
    }
    format!("{:016x}", h.finish())
}

/// `count` tokens drawn uniformly from the vocabulary.
pub fn uniform_tokens(vocab_size: usize, count: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| rng.random_range(0..vocab_size as u32))
        .collect()
}

/// `count` tokens sampled from the full-precision model itself, one
/// `max_seq_len` window at a time (uniform first token, then temperature-1
/// ancestral sampling). On such a corpus the unquantized model is the data
/// distribution, so quantization noise raises the expected loss.
pub fn sample_tokens(ckpt: &Checkpoint, count: usize, seed: u64) -> Result<Vec<u32>> {
    let model = Model::new(ckpt)?;
    let cfg = model.config().clone();
    let mut out = Vec::with_capacity(count);
    let mut window = 0u64;
    while out.len() < count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, window));
        let len = cfg.max_seq_len.min(count - out.len());
        let first = rng.random_range(0..cfg.vocab_size as u32);
        let seq = model.sample_sequence(first, len, |logits| {
            let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let weights: Vec<f64> = logits.iter().map(|&v| f64::from(v - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    return i as u32;
                }
                u -= w;
            }
            (weights.len() - 1) as u32
        })?;
        out.extend_from_slice(&seq);
        window += 1;
    }
    Ok(out)
}
