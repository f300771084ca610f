//! Synthetic law data and Monte-Carlo checks of the trial estimators.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::BlockFormat;
use crate::laws::{eval_law, ExperimentPoint, LawParams};
use crate::model::Granularity;
use crate::search::{RunHeader, SearchSpec, TrialRecord, TrialSet};
use crate::util::{derive_seed, KahanSum};

/// Finite distribution of the degeneration over plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDelta {
    support: Vec<f64>,
    probs: Vec<f64>,
}

impl DiscreteDelta {
    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("invalid distribution: {m}")));
        if support.is_empty() || support.len() != probs.len() {
            return bad("support and probabilities must be non-empty and equally long");
        }
        if support.iter().any(|v| !v.is_finite()) {
            return bad("support must be finite");
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return bad("support must be strictly increasing");
        }
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return bad("probabilities must be >= 0");
        }
        let total: KahanSum = probs.iter().copied().collect();
        if (total.total() - 1.0).abs() > 1e-12 {
            return bad("probabilities must sum to 1");
        }
        Ok(DiscreteDelta { support, probs })
    }

    pub fn uniform(support: Vec<f64>) -> Result<Self> {
        let n = support.len().max(1);
        Self::new(support, vec![1.0 / n as f64; n])
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn min(&self) -> f64 {
        self.support[0]
    }

    pub fn mean(&self) -> f64 {
        self.support
            .iter()
            .zip(&self.probs)
            .map(|(v, p)| v * p)
            .sum()
    }

    pub fn sd(&self) -> f64 {
        let m = self.mean();
        self.support
            .iter()
            .zip(&self.probs)
            .map(|(v, p)| p * (v - m).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Probability that the minimum of `n` draws hits the support minimum.
    pub fn prob_min_hit(&self, n: u32) -> f64 {
        1.0 - (1.0 - self.probs[0]).powi(n as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub n_draws: usize,
    pub repetitions: usize,
    pub mean_of_means: f64,
    pub mean_of_mins: f64,
    pub prob_min_hit: f64,
}

/// Law values at each grid point times `exp(eps)`, `eps ~ N(0, sigma^2)`.
pub fn gen_dataset(
    p: &LawParams,
    grid: &[ExperimentPoint],
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<(ExperimentPoint, f64)>> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "noise sigma must be >= 0, got {noise_sigma}"
        )));
    }
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grid.iter()
        .map(|pt| {
            let v = eval_law(p, pt)?;
            let eps: f64 = normal.sample(&mut rng);
            Ok((*pt, if noise_sigma == 0.0 { v } else { v * eps.exp() }))
        })
        .collect()
}

/// Repeats `n_draws` i.i.d. draws `repetitions` times and averages the
/// sample mean, the sample minimum, and how often the minimum was exact.
pub fn estimator_sim(
    dist: &DiscreteDelta,
    n_draws: usize,
    repetitions: usize,
    seed: u64,
) -> Result<EstimatorReport> {
    if n_draws == 0 || repetitions == 0 {
        return Err(Error::InvalidInput(
            "n_draws and repetitions must be >= 1".into(),
        ));
    }
    let index = WeightedIndex::new(&dist.probs).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut means = KahanSum::default();
    let mut mins = KahanSum::default();
    let mut hits = 0usize;
    for rep in 0..repetitions {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, rep as u64));
        let mut sum = KahanSum::default();
        let mut min = f64::INFINITY;
        for _ in 0..n_draws {
            let v = dist.support[index.sample(&mut rng)];
            sum.add(v);
            min = min.min(v);
        }
        means.add(sum.total() / n_draws as f64);
        mins.add(min);
        if min == dist.min() {
            hits += 1;
        }
    }
    let reps = repetitions as f64;
    Ok(EstimatorReport {
        n_draws,
        repetitions,
        mean_of_means: means.total() / reps,
        mean_of_mins: mins.total() / reps,
        prob_min_hit: hits as f64 / reps,
    })
}

/// Wraps synthetic `(point, delta)` pairs as single-trial runs so they flow
/// through the same store and fitting path as measured searches.
pub fn synthetic_runs(
    data: &[(ExperimentPoint, f64)],
    method: BlockFormat,
    seed: u64,
) -> Result<Vec<TrialSet>> {
    data.iter()
        .enumerate()
        .map(|(i, (pt, delta))| {
            let format = BlockFormat::new(method.kind(), method.bits(), pt.q_b)?;
            let mut extra = BTreeMap::new();
            if let Some(d) = pt.d_tokens {
                extra.insert("d_tokens".to_string(), serde_json::json!(d));
            }
            Ok(TrialSet {
                header: RunHeader {
                    run_id: format!("synth-{seed:016x}-{i:05}"),
                    model_id: "synthetic".into(),
                    model_digest: "synthetic".into(),
                    tokens_digest: "synthetic".into(),
                    n_params: pt.n_params,
                    baseline_loss: 0.0,
                    source: "synthetic".into(),
                    extra,
                },
                spec: SearchSpec {
                    qr_target: pt.q_r,
                    qb: pt.q_b,
                    granularity: Granularity::Matmul,
                    method: format,
                    weight_and_activation: true,
                    trials: 1,
                    seed: derive_seed(seed, i as u64),
                    ratio_tolerance: crate::search::DEFAULT_RATIO_TOLERANCE,
                },
                records: vec![TrialRecord {
                    trial_index: 0,
                    seed: derive_seed(seed, i as u64),
                    qr_achieved: pt.q_r,
                    plan_digest: String::new(),
                    loss: Some(*delta),
                    delta: Some(*delta),
                    error: None,
                    extra: BTreeMap::new(),
                }],
            })
        })
        .collect()
}
