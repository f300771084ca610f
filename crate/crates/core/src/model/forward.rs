//! f32 forward pass with optional per-site fake quantization.

use std::sync::{Arc, Mutex};

use super::{weight_name, Checkpoint, Matmul, ModelConfig, QuantPlan};
use crate::error::{Error, Result};
use crate::formats::{fake_quant_rows_in_place, BlockFormat};
use crate::util::KahanSum;

const NORM_EPS: f32 = 1e-5;

/// Weight matrix stored transposed for the row-times-matrix kernel.
#[derive(Debug, Clone)]
struct Linear {
    in_dim: usize,
    out_dim: usize,
    /// `[in, out]`
    wt: Vec<f32>,
}

impl Linear {
    fn from_rows(w: &[f32], out_dim: usize, in_dim: usize) -> Self {
        let mut wt = vec![0.0; w.len()];
        for o in 0..out_dim {
            for i in 0..in_dim {
                wt[i * out_dim + o] = w[o * in_dim + i];
            }
        }
        Linear {
            in_dim,
            out_dim,
            wt,
        }
    }

    /// `y = x · W^T` for `rows` input rows.
    ///
    /// Every output element is accumulated over `k = 0..in` in order from
    /// zero, whatever tile it falls in, so results do not depend on `rows`.
    #[allow(clippy::needless_range_loop)]
    fn apply(&self, x: &[f32], rows: usize, y: &mut Vec<f32>) {
        let (n_in, n_out) = (self.in_dim, self.out_dim);
        y.clear();
        y.resize(rows * n_out, 0.0);
        let full_cols = n_out - n_out % TILE_C;
        let mut r = 0;
        while r + TILE_R <= rows {
            let xs: [&[f32]; TILE_R] =
                std::array::from_fn(|i| &x[(r + i) * n_in..(r + i + 1) * n_in]);
            for c in (0..full_cols).step_by(TILE_C) {
                let mut acc = [[0.0f32; TILE_C]; TILE_R];
                for k in 0..n_in {
                    let w: &[f32; TILE_C] = self.wt[k * n_out + c..k * n_out + c + TILE_C]
                        .try_into()
                        .unwrap();
                    for i in 0..TILE_R {
                        let a = xs[i][k];
                        for j in 0..TILE_C {
                            acc[i][j] += a * w[j];
                        }
                    }
                }
                for (i, row) in acc.iter().enumerate() {
                    y[(r + i) * n_out + c..(r + i) * n_out + c + TILE_C].copy_from_slice(row);
                }
            }
            for i in 0..TILE_R {
                self.tail_columns(
                    xs[i],
                    full_cols,
                    &mut y[(r + i) * n_out..(r + i + 1) * n_out],
                );
            }
            r += TILE_R;
        }
        for i in r..rows {
            let xi = &x[i * n_in..(i + 1) * n_in];
            let yi = &mut y[i * n_out..(i + 1) * n_out];
            for c in (0..full_cols).step_by(TILE_C) {
                let mut acc = [0.0f32; TILE_C];
                for (k, &a) in xi.iter().enumerate() {
                    let w = &self.wt[k * n_out + c..k * n_out + c + TILE_C];
                    for j in 0..TILE_C {
                        acc[j] += a * w[j];
                    }
                }
                yi[c..c + TILE_C].copy_from_slice(&acc);
            }
            self.tail_columns(xi, full_cols, yi);
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn tail_columns(&self, x: &[f32], from: usize, y: &mut [f32]) {
        let n_out = self.out_dim;
        for c in from..n_out {
            let mut acc = 0.0f32;
            for (k, &a) in x.iter().enumerate() {
                acc += a * self.wt[k * n_out + c];
            }
            y[c] = acc;
        }
    }
}

const TILE_R: usize = 4;
const TILE_C: usize = 16;

#[derive(Debug, Clone)]
struct Layer {
    attn_norm: Vec<f32>,
    ffn_norm: Vec<f32>,
    /// Indexed by `Matmul::index`.
    mats: Vec<Linear>,
    /// Stored `[out, in]` weights, kept for re-quantization.
    raw: Vec<Vec<f32>>,
}

/// Fake-quantized copies of every matmul weight for one format.
#[derive(Debug)]
pub struct LowWeights {
    format: BlockFormat,
    mats: Vec<Vec<Linear>>,
}

/// Names and shapes of intermediate tensors seen during one forward pass.
pub type ForwardTrace = Vec<(String, Vec<usize>)>;

/// Forward-ready model built from a checkpoint.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    embed: Vec<f32>,
    layers: Vec<Layer>,
    final_norm: Vec<f32>,
    head: Linear,
    /// `[max_seq_len, head_dim / 2]`
    rope_cos: Vec<f32>,
    rope_sin: Vec<f32>,
}

struct KvCache {
    /// Per layer, keys transposed to `[kv_dim, max_seq_len]`.
    kt: Vec<Vec<f32>>,
    /// Per layer, `[pos, kv_dim]`.
    v: Vec<Vec<f32>>,
    cap: usize,
    len: usize,
}

impl KvCache {
    fn new(cfg: &ModelConfig) -> Self {
        KvCache {
            kt: vec![vec![0.0; cfg.kv_dim() * cfg.max_seq_len]; cfg.n_layers],
            v: vec![Vec::with_capacity(cfg.kv_dim() * cfg.max_seq_len); cfg.n_layers],
            cap: cfg.max_seq_len,
            len: 0,
        }
    }
}

struct LayerPlan<'a> {
    mats: [&'a Linear; 7],
    quant_act: [bool; 7],
    format: Option<BlockFormat>,
}

fn rms_norm(x: &[f32], gain: &[f32], out: &mut Vec<f32>) {
    let d = gain.len();
    out.clear();
    out.reserve(x.len());
    for row in x.chunks_exact(d) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        out.extend(row.iter().zip(gain).map(|(v, g)| v * inv * g));
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

impl Model {
    pub fn new(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.validate()?;
        let cfg = ckpt.config.clone();
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let mut mats = Vec::with_capacity(7);
                let mut raw = Vec::with_capacity(7);
                for m in Matmul::ALL {
                    let (o, n) = cfg.matmul_shape(m);
                    let w = &ckpt.tensor(&weight_name(i, m))?.data;
                    mats.push(Linear::from_rows(w, o, n));
                    raw.push(w.clone());
                }
                Ok(Layer {
                    attn_norm: ckpt.tensor(&format!("layers.{i}.attn_norm"))?.data.clone(),
                    ffn_norm: ckpt.tensor(&format!("layers.{i}.ffn_norm"))?.data.clone(),
                    mats,
                    raw,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let half = cfg.head_dim() / 2;
        let mut rope_cos = Vec::with_capacity(cfg.max_seq_len * half);
        let mut rope_sin = Vec::with_capacity(cfg.max_seq_len * half);
        for pos in 0..cfg.max_seq_len {
            for i in 0..half {
                let freq = cfg.rope_theta.powf(-2.0 * i as f64 / cfg.head_dim() as f64);
                let angle = pos as f64 * freq;
                rope_cos.push(angle.cos() as f32);
                rope_sin.push(angle.sin() as f32);
            }
        }
        Ok(Model {
            embed: ckpt.tensor("embed")?.data.clone(),
            final_norm: ckpt.tensor("final_norm")?.data.clone(),
            head: Linear::from_rows(&ckpt.tensor("head")?.data, cfg.vocab_size, cfg.model_dim),
            layers,
            rope_cos,
            rope_sin,
            config: cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Fake-quantizes every matmul weight with `format`, blocks along rows.
    pub fn low_weights(&self, format: BlockFormat) -> Result<LowWeights> {
        let mats = self
            .layers
            .iter()
            .map(|layer| {
                Matmul::ALL
                    .iter()
                    .map(|&m| {
                        let (o, n) = self.config.matmul_shape(m);
                        let mut w = layer.raw[m.index()].clone();
                        fake_quant_rows_in_place(&mut w, n, &format)?;
                        Ok(Linear::from_rows(&w, o, n))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LowWeights { format, mats })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() < 2 {
            return Err(Error::InvalidInput("need at least 2 tokens".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::InvalidInput(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        self.check_vocab(tokens)
    }

    fn check_vocab(&self, tokens: &[u32]) -> Result<()> {
        if let Some(t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::InvalidInput(format!(
                "token {t} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn layer_plans<'a>(
        &'a self,
        quant: Option<(&QuantPlan, &'a LowWeights)>,
    ) -> Result<Vec<LayerPlan<'a>>> {
        if let Some((plan, low)) = quant {
            plan.check_against(&self.config)?;
            if plan.method != low.format {
                return Err(Error::InvalidInput(format!(
                    "plan format {} does not match prepared weights {}",
                    plan.method, low.format
                )));
            }
        }
        Ok(self
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let mut mats = [&layer.mats[0]; 7];
                let mut quant_act = [false; 7];
                for m in Matmul::ALL {
                    let j = m.index();
                    mats[j] = &layer.mats[j];
                    if let Some((plan, low)) = quant {
                        if plan.is_low(i, m) {
                            mats[j] = &low.mats[i][j];
                            quant_act[j] = plan.weight_and_activation;
                        }
                    }
                }
                LayerPlan {
                    mats,
                    quant_act,
                    format: quant.map(|(p, _)| p.method),
                }
            })
            .collect())
    }

    fn rope(&self, x: &mut [f32], width: usize, start_pos: usize) {
        let hd = self.config.head_dim();
        let half = hd / 2;
        for (t, row) in x.chunks_exact_mut(width).enumerate() {
            let pos = start_pos + t;
            let cos = &self.rope_cos[pos * half..(pos + 1) * half];
            let sin = &self.rope_sin[pos * half..(pos + 1) * half];
            for head in row.chunks_exact_mut(hd) {
                for i in 0..half {
                    let (a, b) = (head[2 * i], head[2 * i + 1]);
                    head[2 * i] = a * cos[i] - b * sin[i];
                    head[2 * i + 1] = a * sin[i] + b * cos[i];
                }
            }
        }
    }

    /// Runs `tokens` at positions `cache.len..`, appending to the cache.
    /// Returns final-norm hidden states `[tokens, dim]`.
    fn forward_hidden(
        &self,
        tokens: &[u32],
        cache: &mut KvCache,
        plans: &[LayerPlan<'_>],
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Vec<f32>> {
        let cfg = &self.config;
        let (d, hd, kvd) = (cfg.model_dim, cfg.head_dim(), cfg.kv_dim());
        let group = cfg.n_heads / cfg.n_kv_heads;
        let t_new = tokens.len();
        let start = cache.len;
        let total = start + t_new;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut record = |name: &str, shape: Vec<usize>| {
            if let Some(tr) = trace.as_deref_mut() {
                tr.push((name.to_string(), shape));
            }
        };

        let mut x = Vec::with_capacity(t_new * d);
        for &tok in tokens {
            let t = tok as usize;
            x.extend_from_slice(&self.embed[t * d..(t + 1) * d]);
        }
        record("embed", vec![t_new, d]);

        let mut h = Vec::new();
        let mut qbuf = Vec::new();
        let mut kbuf = Vec::new();
        let mut vbuf = Vec::new();
        let mut attn = vec![0.0f32; t_new * d];
        let mut proj = Vec::new();
        let mut gate = Vec::new();
        let mut up = Vec::new();
        let mut scores = vec![0.0f32; total];
        let mut act_in = Vec::new();

        // Sites sharing an input share one quantized copy of it.
        let quantize_input = |lp: &LayerPlan<'_>,
                              ms: &[Matmul],
                              input: &[f32],
                              row_len: usize,
                              out: &mut Vec<f32>|
         -> Result<bool> {
            if !ms.iter().any(|m| lp.quant_act[m.index()]) {
                return Ok(false);
            }
            let fmt = lp
                .format
                .as_ref()
                .expect("activation format set with quant_act");
            out.clear();
            out.extend_from_slice(input);
            fake_quant_rows_in_place(out, row_len, fmt)?;
            Ok(true)
        };
        let linear = |m: Matmul,
                      lp: &LayerPlan<'_>,
                      plain: &[f32],
                      quantized: &[f32],
                      rows: usize,
                      out: &mut Vec<f32>| {
            let j = m.index();
            lp.mats[j].apply(if lp.quant_act[j] { quantized } else { plain }, rows, out);
        };

        for (li, (layer, lp)) in self.layers.iter().zip(plans).enumerate() {
            rms_norm(&x, &layer.attn_norm, &mut h);
            record(&format!("layers.{li}.attn_norm"), vec![t_new, d]);
            quantize_input(lp, &[Matmul::Q, Matmul::K, Matmul::V], &h, d, &mut act_in)?;
            linear(Matmul::Q, lp, &h, &act_in, t_new, &mut qbuf);
            linear(Matmul::K, lp, &h, &act_in, t_new, &mut kbuf);
            linear(Matmul::V, lp, &h, &act_in, t_new, &mut vbuf);
            record(&format!("layers.{li}.q"), vec![t_new, d]);
            record(&format!("layers.{li}.k"), vec![t_new, kvd]);
            record(&format!("layers.{li}.v"), vec![t_new, kvd]);
            self.rope(&mut qbuf, d, start);
            self.rope(&mut kbuf, kvd, start);
            let cap = cache.cap;
            let kt = &mut cache.kt[li];
            for (t, row) in kbuf.chunks_exact(kvd).enumerate() {
                for (c, &kv) in row.iter().enumerate() {
                    kt[c * cap + start + t] = kv;
                }
            }
            cache.v[li].extend_from_slice(&vbuf);
            let (kt, vc) = (&cache.kt[li], &cache.v[li]);

            for t in 0..t_new {
                let pos = start + t;
                let n = pos + 1;
                for head in 0..cfg.n_heads {
                    let g = head / group;
                    let q = &qbuf[t * d + head * hd..t * d + (head + 1) * hd];
                    let s = &mut scores[..n];
                    s.fill(0.0);
                    for (c, &qc) in q.iter().enumerate() {
                        let krow = &kt[(g * hd + c) * cap..(g * hd + c) * cap + n];
                        for (sj, &kj) in s.iter_mut().zip(krow) {
                            *sj += qc * kj;
                        }
                    }
                    let mut max = f32::NEG_INFINITY;
                    for sj in s.iter_mut() {
                        *sj *= scale;
                        max = max.max(*sj);
                    }
                    let mut denom = 0.0f32;
                    for sj in s.iter_mut() {
                        *sj = (*sj - max).exp();
                        denom += *sj;
                    }
                    let out = &mut attn[t * d + head * hd..t * d + (head + 1) * hd];
                    out.fill(0.0);
                    for (j, &w) in s.iter().enumerate() {
                        let v = &vc[j * kvd + g * hd..j * kvd + (g + 1) * hd];
                        let w = w / denom;
                        for (o, &vv) in out.iter_mut().zip(v) {
                            *o += w * vv;
                        }
                    }
                }
            }
            record(&format!("layers.{li}.attn"), vec![t_new, d]);
            quantize_input(lp, &[Matmul::O], &attn, d, &mut act_in)?;
            linear(Matmul::O, lp, &attn, &act_in, t_new, &mut proj);
            record(&format!("layers.{li}.o"), vec![t_new, d]);
            for (a, b) in x.iter_mut().zip(&proj) {
                *a += b;
            }

            rms_norm(&x, &layer.ffn_norm, &mut h);
            record(&format!("layers.{li}.ffn_norm"), vec![t_new, d]);
            quantize_input(lp, &[Matmul::Gate, Matmul::Up], &h, d, &mut act_in)?;
            linear(Matmul::Gate, lp, &h, &act_in, t_new, &mut gate);
            linear(Matmul::Up, lp, &h, &act_in, t_new, &mut up);
            record(&format!("layers.{li}.gate"), vec![t_new, cfg.ffn_dim]);
            record(&format!("layers.{li}.up"), vec![t_new, cfg.ffn_dim]);
            for (g, u) in gate.iter_mut().zip(&up) {
                *g = silu(*g) * u;
            }
            quantize_input(lp, &[Matmul::Down], &gate, cfg.ffn_dim, &mut act_in)?;
            linear(Matmul::Down, lp, &gate, &act_in, t_new, &mut proj);
            record(&format!("layers.{li}.down"), vec![t_new, d]);
            for (a, b) in x.iter_mut().zip(&proj) {
                *a += b;
            }
        }
        cache.len = total;
        rms_norm(&x, &self.final_norm, &mut h);
        record("final_norm", vec![t_new, d]);
        Ok(h)
    }

    /// Sum of next-token cross-entropies (nats) and the number of predictions.
    fn sequence_nll(&self, tokens: &[u32], plans: &[LayerPlan<'_>]) -> Result<(f64, usize)> {
        self.check_tokens(tokens)?;
        let mut cache = KvCache::new(&self.config);
        let n_pred = tokens.len() - 1;
        let h = self.forward_hidden(&tokens[..n_pred], &mut cache, plans, None)?;
        let mut logits = Vec::new();
        self.head.apply(&h, n_pred, &mut logits);
        let v = self.config.vocab_size;
        let mut nll = KahanSum::default();
        for (row, &target) in logits.chunks_exact(v).zip(&tokens[1..]) {
            nll.add(cross_entropy(row, target as usize));
        }
        let total = nll.total();
        if !total.is_finite() {
            return Err(Error::InvalidInput("non-finite loss".into()));
        }
        Ok((total, n_pred))
    }

    /// Mean next-token cross-entropy of one sequence.
    pub fn loss(&self, tokens: &[u32], quant: Option<(&QuantPlan, &LowWeights)>) -> Result<f64> {
        let plans = self.layer_plans(quant)?;
        let (nll, n) = self.sequence_nll(tokens, &plans)?;
        Ok(nll / n as f64)
    }

    /// Shapes of every intermediate produced while running `tokens`.
    pub fn trace_shapes(&self, tokens: &[u32]) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        let plans = self.layer_plans(None)?;
        let mut cache = KvCache::new(&self.config);
        let mut trace = Vec::new();
        let h = self.forward_hidden(tokens, &mut cache, &plans, Some(&mut trace))?;
        let mut logits = Vec::new();
        self.head.apply(&h, tokens.len(), &mut logits);
        trace.push((
            "logits".to_string(),
            vec![tokens.len(), self.config.vocab_size],
        ));
        debug_assert_eq!(logits.len(), tokens.len() * self.config.vocab_size);
        Ok(trace)
    }

    /// Extends `first` to `len` tokens, feeding each step's logits to `draw`.
    pub(crate) fn sample_sequence(
        &self,
        first: u32,
        len: usize,
        mut draw: impl FnMut(&[f32]) -> u32,
    ) -> Result<Vec<u32>> {
        self.check_vocab(&[first])?;
        let plans = self.layer_plans(None)?;
        let mut cache = KvCache::new(&self.config);
        let mut seq = vec![first];
        let mut logits = Vec::new();
        while seq.len() < len.min(self.config.max_seq_len) {
            let last = *seq.last().unwrap();
            let h = self.forward_hidden(&[last], &mut cache, &plans, None)?;
            self.head.apply(&h, 1, &mut logits);
            seq.push(draw(&logits));
        }
        Ok(seq)
    }
}

fn cross_entropy(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let sum: f64 = logits.iter().map(|&v| f64::from(v - max).exp()).sum();
    f64::from(max) + sum.ln() - f64::from(logits[target])
}

/// Mean next-token cross-entropy (nats/token) of one sequence, optionally
/// under a quantization plan.
pub fn forward_loss(ckpt: &Checkpoint, tokens: &[u32], plan: Option<&QuantPlan>) -> Result<f64> {
    let model = Model::new(ckpt)?;
    match plan {
        None => model.loss(tokens, None),
        Some(p) => {
            let low = model.low_weights(p.method)?;
            model.loss(tokens, Some((p, &low)))
        }
    }
}

/// Loss evaluator over a token corpus split into `max_seq_len` windows.
///
/// Quantized weights are prepared once per format and shared across calls.
pub struct ModelEvaluator {
    model: Model,
    windows: Vec<Vec<u32>>,
    low: Mutex<Vec<Arc<LowWeights>>>,
}

impl ModelEvaluator {
    pub fn new(ckpt: &Checkpoint, tokens: &[u32]) -> Result<Self> {
        let model = Model::new(ckpt)?;
        model.check_vocab(tokens)?;
        let windows: Vec<Vec<u32>> = tokens
            .chunks(model.config.max_seq_len)
            .filter(|w| w.len() >= 2)
            .map(<[u32]>::to_vec)
            .collect();
        if windows.is_empty() {
            return Err(Error::InvalidInput(
                "token corpus needs at least 2 tokens".into(),
            ));
        }
        Ok(ModelEvaluator {
            model,
            windows,
            low: Mutex::new(Vec::new()),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn n_predictions(&self) -> usize {
        self.windows.iter().map(|w| w.len() - 1).sum()
    }

    fn low_for(&self, format: BlockFormat) -> Result<Arc<LowWeights>> {
        let mut cache = self.low.lock().expect("low-weight cache poisoned");
        if let Some(w) = cache.iter().find(|w| w.format == format) {
            return Ok(Arc::clone(w));
        }
        let w = Arc::new(self.model.low_weights(format)?);
        cache.push(Arc::clone(&w));
        Ok(w)
    }

    /// Token-weighted mean cross-entropy over all windows.
    pub fn loss(&self, plan: Option<&QuantPlan>) -> Result<f64> {
        let low = plan.map(|p| self.low_for(p.method)).transpose()?;
        let quant = plan.zip(low.as_deref());
        let plans = self.model.layer_plans(quant)?;
        let mut nll = KahanSum::default();
        let mut n = 0;
        for w in &self.windows {
            let (s, k) = self.model.sequence_nll(w, &plans)?;
            nll.add(s);
            n += k;
        }
        Ok(nll.total() / n as f64)
    }
}
