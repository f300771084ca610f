//! Forward-only micro causal LM with per-site quantization hooks.
//!
//! Architecture (Llama-3 style): token embedding, `n_layers` pre-norm blocks
//! of grouped-query attention with rotary embeddings and a SiLU-gated FFN,
//! final RMSNorm and an untied output head.
//!
//! Tensor inventory, row-major `[rows, cols]` with `hd = model_dim / n_heads`:
//!
//! | name                   | shape                      |
//! |------------------------|----------------------------|
//! | `embed`                | `[vocab, dim]`             |
//! | `layers.{i}.attn_norm` | `[dim]`                    |
//! | `layers.{i}.q`         | `[dim, dim]`               |
//! | `layers.{i}.k`         | `[n_kv_heads * hd, dim]`   |
//! | `layers.{i}.v`         | `[n_kv_heads * hd, dim]`   |
//! | `layers.{i}.o`         | `[dim, dim]`               |
//! | `layers.{i}.ffn_norm`  | `[dim]`                    |
//! | `layers.{i}.gate`      | `[ffn, dim]`               |
//! | `layers.{i}.up`        | `[ffn, dim]`               |
//! | `layers.{i}.down`      | `[dim, ffn]`               |
//! | `final_norm`           | `[dim]`                    |
//! | `head`                 | `[vocab, dim]`             |
//!
//! Weight matrices are stored `[out, in]`; quantization blocks run along the
//! input (reduction) dimension for weights and activations alike.

mod checkpoint;
mod forward;
mod sites;
mod tokens;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, init_random, load_checkpoint, save_checkpoint,
    Checkpoint, Tensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use forward::{forward_loss, ForwardTrace, LowWeights, Model, ModelEvaluator};
pub use sites::{enumerate_sites, Granularity, Matmul, QuantPlan, SiteId};
pub use tokens::{read_tokens, sample_tokens, tokens_digest, uniform_tokens, write_tokens};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub max_seq_len: usize,
    pub rope_theta: f64,
}

impl ModelConfig {
    /// Desk-scale default: the CLM shapes scaled down roughly 100x.
    pub fn clm_micro() -> Self {
        ModelConfig {
            vocab_size: 256,
            model_dim: 64,
            ffn_dim: 192,
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: 2,
            max_seq_len: 128,
            rope_theta: 10_000.0,
        }
    }

    /// Looks up a named preset.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "clm-micro" => Some(Self::clm_micro()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let dims = [
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be >= 1"));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if !self.model_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            ));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return bad(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim()
            ));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 1.0) {
            return bad(format!(
                "rope_theta must be finite and > 1, got {}",
                self.rope_theta
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    /// `(out, in)` shape of one matmul weight.
    pub fn matmul_shape(&self, m: Matmul) -> (usize, usize) {
        let (d, f, kv) = (self.model_dim, self.ffn_dim, self.kv_dim());
        match m {
            Matmul::Q | Matmul::O => (d, d),
            Matmul::K | Matmul::V => (kv, d),
            Matmul::Gate | Matmul::Up => (f, d),
            Matmul::Down => (d, f),
        }
    }

    /// Ordered tensor inventory (file order) with shapes.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d) = (self.vocab_size, self.model_dim);
        let mut out = vec![("embed".to_string(), vec![v, d])];
        for i in 0..self.n_layers {
            out.push((format!("layers.{i}.attn_norm"), vec![d]));
            for m in [Matmul::Q, Matmul::K, Matmul::V, Matmul::O] {
                let (r, c) = self.matmul_shape(m);
                out.push((weight_name(i, m), vec![r, c]));
            }
            out.push((format!("layers.{i}.ffn_norm"), vec![d]));
            for m in [Matmul::Gate, Matmul::Up, Matmul::Down] {
                let (r, c) = self.matmul_shape(m);
                out.push((weight_name(i, m), vec![r, c]));
            }
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("head".to_string(), vec![v, d]));
        out
    }

    /// Parameters in the seven matmuls of one layer.
    pub fn layer_params(&self) -> u64 {
        Matmul::ALL
            .iter()
            .map(|&m| {
                let (r, c) = self.matmul_shape(m);
                (r * c) as u64
            })
            .sum()
    }

    /// Non-embedding matmul parameters (the ratio denominator).
    pub fn non_embedding_params(&self) -> u64 {
        self.layer_params() * self.n_layers as u64
    }
}

pub(crate) fn weight_name(layer: usize, m: Matmul) -> String {
    format!("layers.{layer}.{}", m.name())
}
