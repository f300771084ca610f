//! Block-scaled fake quantization.
//!
//! Two element formats are emulated, both as quantize-then-dequantize on
//! `f32` data so that the surrounding computation stays in full precision:
//!
//! * **MXINT**: one shared power-of-two exponent per block and symmetric
//!   `bits`-wide signed integer mantissas.
//! * **Affine INT**: a group-wise asymmetric integer quantizer with a
//!   per-group scale and integer zero-point.
//!
//! Blocks are contiguous runs of `block_size` elements. A trailing partial
//! block is quantized as a short block, never padded.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;
pub const MAX_BLOCK_SIZE: usize = 4096;
pub const MIN_EXPONENT: i32 = -126;
pub const MAX_EXPONENT: i32 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FormatKind {
    MxInt,
    AffineInt,
}

impl FormatKind {
    fn prefix(self) -> &'static str {
        match self {
            FormatKind::MxInt => "mxint",
            FormatKind::AffineInt => "affine",
        }
    }
}

/// Numeric format descriptor: element kind, element bit-width and block size.
///
/// Textual form is `mxint<bits>:<block>` or `affine<bits>:<block>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockFormat {
    kind: FormatKind,
    bits: u8,
    block_size: usize,
}

impl BlockFormat {
    pub fn new(kind: FormatKind, bits: u8, block_size: usize) -> Result<Self> {
        let fmt = BlockFormat {
            kind,
            bits,
            block_size,
        };
        fmt.validate()?;
        Ok(fmt)
    }

    pub fn mxint(bits: u8, block_size: usize) -> Result<Self> {
        Self::new(FormatKind::MxInt, bits, block_size)
    }

    pub fn affine(bits: u8, block_size: usize) -> Result<Self> {
        Self::new(FormatKind::AffineInt, bits, block_size)
    }

    pub fn kind(&self) -> FormatKind {
        self.kind
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Largest mantissa magnitude for the symmetric MXINT range.
    pub fn max_mantissa(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    fn validate(&self) -> Result<()> {
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return Err(Error::InvalidFormat(format!(
                "bits must be in [{MIN_BITS}, {MAX_BITS}], got {}",
                self.bits
            )));
        }
        if self.block_size == 0
            || self.block_size > MAX_BLOCK_SIZE
            || !self.block_size.is_power_of_two()
        {
            return Err(Error::InvalidFormat(format!(
                "block size must be a power of two in [1, {MAX_BLOCK_SIZE}], got {}",
                self.block_size
            )));
        }
        Ok(())
    }
}

impl fmt::Display for BlockFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}:{}", self.kind.prefix(), self.bits, self.block_size)
    }
}

impl FromStr for BlockFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidFormat(format!(
                "expected mxint<bits>:<block> or affine<bits>:<block>, got {s:?}"
            ))
        };
        let (head, block) = s.trim().split_once(':').ok_or_else(bad)?;
        let (kind, bits) = if let Some(b) = head.strip_prefix("mxint") {
            (FormatKind::MxInt, b)
        } else if let Some(b) = head.strip_prefix("affine") {
            (FormatKind::AffineInt, b)
        } else {
            return Err(bad());
        };
        let bits: u8 = bits.parse().map_err(|_| bad())?;
        let block: usize = block.parse().map_err(|_| bad())?;
        BlockFormat::new(kind, bits, block)
    }
}

impl Serialize for BlockFormat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockFormat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One encoded MXINT block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedBlock {
    pub shared_exponent: i32,
    pub mantissas: Vec<i32>,
}

impl QuantizedBlock {
    pub fn decode(&self) -> Vec<f32> {
        let scale = pow2(self.shared_exponent);
        self.mantissas.iter().map(|&m| m as f32 * scale).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QuantStats {
    pub mse: f64,
    pub max_abs_err: f64,
    pub saturation_count: usize,
}

/// Fake-quantized values plus the number of elements clamped while encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub values: Vec<f32>,
    pub saturation_count: usize,
}

/// Exact `2^e` for `e` in the normal exponent range.
fn pow2(e: i32) -> f32 {
    debug_assert!((MIN_EXPONENT..=MAX_EXPONENT).contains(&e));
    f32::from_bits(((e + 127) as u32) << 23)
}

/// `floor(log2(x))` for a positive normal `x`; `None` for subnormals.
fn floor_log2(x: f32) -> Option<i32> {
    let biased = ((x.to_bits() >> 23) & 0xff) as i32;
    (biased != 0).then(|| biased - 127)
}

fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidInput(format!(
            "non-finite value {} at index {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// Shared exponent for a block with absolute maximum `amax`, or `None` when
/// the block is zero or underflows the exponent range.
fn mxint_exponent(amax: f32, bits: u8) -> Option<i32> {
    if amax == 0.0 {
        return None;
    }
    let e = floor_log2(amax)? - (i32::from(bits) - 2);
    (e >= MIN_EXPONENT).then_some(e.min(MAX_EXPONENT))
}

/// Encodes one block. Returns the block and its saturation count.
pub fn encode_mxint_block(block: &[f32], bits: u8) -> (QuantizedBlock, usize) {
    let amax = block.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let Some(e) = mxint_exponent(amax, bits) else {
        return (
            QuantizedBlock {
                shared_exponent: 0,
                mantissas: vec![0; block.len()],
            },
            0,
        );
    };
    let limit = (1i32 << (bits - 1)) - 1;
    let inv = 1.0 / pow2(e);
    let mut saturated = 0;
    let mantissas = block
        .iter()
        .map(|&x| {
            let m = (x * inv).round_ties_even() as i32;
            if m.abs() > limit {
                saturated += 1;
            }
            m.clamp(-limit, limit)
        })
        .collect();
    (
        QuantizedBlock {
            shared_exponent: e,
            mantissas,
        },
        saturated,
    )
}

fn mxint_block_in_place(block: &mut [f32], bits: u8) -> usize {
    let amax = block.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let Some(e) = mxint_exponent(amax, bits) else {
        block.fill(0.0);
        return 0;
    };
    let limit = ((1i32 << (bits - 1)) - 1) as f32;
    let scale = pow2(e);
    let inv = 1.0 / scale;
    let mut saturated = 0;
    for x in block.iter_mut() {
        let m = (*x * inv).round_ties_even();
        if m.abs() > limit {
            saturated += 1;
        }
        *x = m.clamp(-limit, limit) * scale;
    }
    saturated
}

/// Number of significant bits needed to hold `n` exactly.
fn bit_len(n: u64) -> u32 {
    64 - n.leading_zeros()
}

/// Truncates `x` toward zero to `keep` significant bits.
fn truncate_mantissa(x: f32, keep: u32) -> f32 {
    let drop = 24u32.saturating_sub(keep).min(23);
    f32::from_bits(x.to_bits() & !((1u32 << drop) - 1))
}

/// Scale and zero-point for an affine group with range `[lo, hi]`, `lo < hi`.
///
/// The direct `(hi - lo) / levels` scale is used when re-quantizing the
/// dequantized group reproduces the same scale and zero-point. Otherwise the
/// scale is rounded down to the mantissa width that keeps every grid point
/// `(q - zp) * scale` exact, which restores that fixed point.
fn affine_params(lo: f32, hi: f32, levels: u32) -> (f32, f32) {
    let k = levels as f32;
    let scale = (hi - lo) / k;
    let zp = (-lo / scale).round_ties_even();
    let q_hi = ((hi / scale).round_ties_even() + zp).clamp(0.0, k);
    let lo2 = (0.0 - zp) * scale;
    let hi2 = (k - zp) * scale;
    let scale2 = (hi2 - lo2) / k;
    if q_hi == k && scale2 == scale && (-lo2 / scale2).round_ties_even() == zp {
        return (scale, zp);
    }

    let exact = (f64::from(hi) - f64::from(lo)) / f64::from(levels) * (1.0 - f64::EPSILON * 4.0);
    let mut scale = exact as f32;
    if f64::from(scale) > exact {
        scale = f32::from_bits(scale.to_bits() - 1);
    }
    let mut zp = (-lo / scale).round_ties_even();
    for _ in 0..4 {
        let need = bit_len(zp.abs() as u64 + u64::from(levels));
        let truncated = truncate_mantissa(scale, 24u32.saturating_sub(need).max(1));
        if truncated == scale || truncated == 0.0 {
            break;
        }
        scale = truncated;
        zp = (-lo / scale).round_ties_even();
    }
    (scale, zp)
}

fn affine_block_in_place(block: &mut [f32], bits: u8) -> usize {
    let (lo, hi) = block
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if lo == hi {
        return 0;
    }
    let levels = (1u32 << bits) - 1;
    let k = levels as f32;
    let (scale, zp) = affine_params(lo, hi, levels);
    let mut saturated = 0;
    for x in block.iter_mut() {
        let q = (*x / scale).round_ties_even() + zp;
        if q < 0.0 || q > k {
            saturated += 1;
        }
        *x = (q.clamp(0.0, k) - zp) * scale;
    }
    saturated
}

fn apply_blocks(values: &mut [f32], fmt: &BlockFormat, row_len: usize) -> usize {
    let bits = fmt.bits;
    let block = fmt.block_size;
    let mut saturated = 0;
    for row in values.chunks_mut(row_len.max(1)) {
        for chunk in row.chunks_mut(block) {
            saturated += match fmt.kind {
                FormatKind::MxInt => mxint_block_in_place(chunk, bits),
                FormatKind::AffineInt => affine_block_in_place(chunk, bits),
            };
        }
    }
    saturated
}

/// Fake-quantizes `values` in place with blocks running along rows of length
/// `row_len` (blocks never straddle two rows). Returns the saturation count.
pub fn fake_quant_rows_in_place(
    values: &mut [f32],
    row_len: usize,
    fmt: &BlockFormat,
) -> Result<usize> {
    fmt.validate()?;
    check_finite(values)?;
    if row_len == 0 || !values.len().is_multiple_of(row_len) {
        return Err(Error::InvalidInput(format!(
            "length {} is not a multiple of row length {row_len}",
            values.len()
        )));
    }
    Ok(apply_blocks(values, fmt, row_len))
}

/// Fake-quantizes a flat sequence in place. Returns the saturation count.
pub fn fake_quant_in_place(values: &mut [f32], fmt: &BlockFormat) -> Result<usize> {
    fmt.validate()?;
    check_finite(values)?;
    Ok(apply_blocks(values, fmt, values.len()))
}

/// Dispatches on the format kind.
pub fn fake_quant(values: &[f32], fmt: &BlockFormat) -> Result<Quantized> {
    let mut out = values.to_vec();
    let saturation_count = fake_quant_in_place(&mut out, fmt)?;
    Ok(Quantized {
        values: out,
        saturation_count,
    })
}

/// MXINT quantize-dequantize. Idempotent and exactly covariant under scaling
/// by powers of two (within the exponent range).
pub fn mxint_fake_quant(values: &[f32], fmt: &BlockFormat) -> Result<Quantized> {
    if fmt.kind != FormatKind::MxInt {
        return Err(Error::InvalidFormat(format!(
            "{fmt} is not an mxint format"
        )));
    }
    fake_quant(values, fmt)
}

/// Group-wise affine quantize-dequantize.
///
/// Per group: `scale = (max - min) / (2^bits - 1)`, `zp = round(-min / scale)`,
/// `q = clamp(round(x / scale) + zp, 0, 2^bits - 1)`, output `(q - zp) * scale`.
/// Constant groups are reproduced exactly. Idempotent whenever
/// `|zp| + 2^bits - 1 < 2^22`.
pub fn affine_fake_quant(values: &[f32], fmt: &BlockFormat) -> Result<Quantized> {
    if fmt.kind != FormatKind::AffineInt {
        return Err(Error::InvalidFormat(format!(
            "{fmt} is not an affine format"
        )));
    }
    fake_quant(values, fmt)
}

/// Encodes a whole sequence into MXINT blocks.
pub fn mxint_encode(values: &[f32], fmt: &BlockFormat) -> Result<Vec<QuantizedBlock>> {
    if fmt.kind != FormatKind::MxInt {
        return Err(Error::InvalidFormat(format!(
            "{fmt} is not an mxint format"
        )));
    }
    fmt.validate()?;
    check_finite(values)?;
    Ok(values
        .chunks(fmt.block_size)
        .map(|c| encode_mxint_block(c, fmt.bits).0)
        .collect())
}

pub fn quant_error(original: &[f32], quantized: &Quantized) -> Result<QuantStats> {
    let q = &quantized.values;
    if original.len() != q.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} vs {}",
            original.len(),
            q.len()
        )));
    }
    let mut sq = 0.0f64;
    let mut max_abs = 0.0f64;
    for (&a, &b) in original.iter().zip(q) {
        let d = f64::from(a) - f64::from(b);
        sq += d * d;
        max_abs = max_abs.max(d.abs());
    }
    let mse = if q.is_empty() {
        0.0
    } else {
        sq / q.len() as f64
    };
    Ok(QuantStats {
        mse,
        max_abs_err: max_abs,
        saturation_count: quantized.saturation_count,
    })
}
