//! Mixed-precision post-training quantization emulation and loss-degeneration
//! scaling laws.
//!
//! The crate is organized bottom-up:
//!
//! - [`formats`]: block-scaled fake-quantization kernels (MXINT, group-wise affine).
//! - [`model`]: a forward-only Llama-style micro causal LM with per-site
//!   quantization hooks and a binary checkpoint format.
//! - [`search`]: exact-ratio plan sampling, the random-search harness and the
//!   min/mean degeneration estimators.
//! - [`laws`]: Chinchilla, precision-law and weak/strong degeneration laws,
//!   log-space fitting and closed-form inversions.
//! - [`oracle`]: synthetic data from the laws and Monte-Carlo estimator checks.
//! - [`store`]: JSONL trial logs, contour tables and CSV export.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod formats;
pub mod laws;
pub mod model;
pub mod oracle;
pub mod search;
pub mod store;
pub mod util;

pub use error::{Error, Result};
