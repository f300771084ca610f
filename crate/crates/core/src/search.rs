//! Random search over quantization plans at a fixed ratio, and the
//! degeneration estimators computed from its trials.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::formats::BlockFormat;
use crate::model::{Granularity, ModelEvaluator, QuantPlan, SiteId};
use crate::util::{derive_seed, KahanSum};

pub const DEFAULT_RATIO_TOLERANCE: f64 = 0.02;
/// Fresh shuffles tried by `sample_plan` before giving up.
pub const MAX_SAMPLE_ATTEMPTS: usize = 64;
/// Largest tolerated fraction of failed trials in one run.
pub const MAX_FAILED_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpec {
    pub qr_target: f64,
    pub qb: usize,
    pub granularity: Granularity,
    pub method: BlockFormat,
    #[serde(default = "default_wa")]
    pub weight_and_activation: bool,
    pub trials: usize,
    pub seed: u64,
    #[serde(default = "default_tolerance")]
    pub ratio_tolerance: f64,
}

fn default_wa() -> bool {
    true
}

fn default_tolerance() -> f64 {
    DEFAULT_RATIO_TOLERANCE
}

impl SearchSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.qr_target) {
            return Err(Error::InvalidInput(format!(
                "qr_target {} outside [0, 1]",
                self.qr_target
            )));
        }
        if self.trials == 0 {
            return Err(Error::InvalidInput("trials must be >= 1".into()));
        }
        if !(self.ratio_tolerance > 0.0 && self.ratio_tolerance <= 0.1) {
            return Err(Error::InvalidInput(format!(
                "ratio_tolerance {} outside (0, 0.1]",
                self.ratio_tolerance
            )));
        }
        if self.method.block_size() != self.qb {
            return Err(Error::InvalidInput(format!(
                "method {} has block size {}, but qb is {}",
                self.method,
                self.method.block_size(),
                self.qb
            )));
        }
        Ok(())
    }

    /// Seed of one trial.
    pub fn trial_seed(&self, trial_index: usize) -> u64 {
        derive_seed(self.seed, trial_index as u64)
    }
}

/// One search trial. `loss` and `delta` are absent when the evaluator failed,
/// in which case `error` says why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub seed: u64,
    pub qr_achieved: f64,
    pub plan_digest: String,
    pub loss: Option<f64>,
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Fields this version does not know about, kept for round-tripping.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, Value>,
}

impl TrialRecord {
    pub fn succeeded(&self) -> bool {
        self.delta.is_some()
    }
}

/// Run metadata shared by every trial of one search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub run_id: String,
    pub model_id: String,
    pub model_digest: String,
    pub tokens_digest: String,
    /// Billions of non-embedding parameters.
    pub n_params: f64,
    pub baseline_loss: f64,
    /// `search` for measured runs, `synthetic` for generated data.
    pub source: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub header: RunHeader,
    pub spec: SearchSpec,
    pub records: Vec<TrialRecord>,
}

impl TrialSet {
    pub fn successful_deltas(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.delta).collect()
    }

    pub fn failed(&self) -> usize {
        self.records.iter().filter(|r| !r.succeeded()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub delta_opt: f64,
    pub delta_mu: f64,
    /// Successful trials the estimates are computed from.
    pub n: usize,
}

/// Anything that maps a plan (or none, for the baseline) to a loss.
pub trait Evaluator: Sync {
    fn loss(&self, plan: Option<&QuantPlan>) -> Result<f64>;
}

impl Evaluator for ModelEvaluator {
    fn loss(&self, plan: Option<&QuantPlan>) -> Result<f64> {
        ModelEvaluator::loss(self, plan)
    }
}

impl<F> Evaluator for F
where
    F: Fn(Option<&QuantPlan>) -> Result<f64> + Sync,
{
    fn loss(&self, plan: Option<&QuantPlan>) -> Result<f64> {
        self(plan)
    }
}

/// Draws a random plan whose low-precision parameter share is within
/// `tolerance` of `qr_target`.
///
/// Each attempt shuffles the sites, adds them in order whenever they still
/// fit under the target mass, then applies the single extra site (if any)
/// that brings the ratio closest to the target.
pub fn sample_plan(
    sites: &[(SiteId, u64)],
    qr_target: f64,
    seed: u64,
    tolerance: f64,
    method: BlockFormat,
    weight_and_activation: bool,
) -> Result<QuantPlan> {
    if sites.is_empty() {
        return Err(Error::InvalidInput("no quantization sites".into()));
    }
    if !(0.0..=1.0).contains(&qr_target) {
        return Err(Error::InvalidInput(format!(
            "qr_target {qr_target} outside [0, 1]"
        )));
    }
    let total: u64 = sites.iter().map(|(_, p)| p).sum();
    if total == 0 {
        return Err(Error::InvalidInput("sites hold no parameters".into()));
    }
    let total_f = total as f64;
    let target_mass = qr_target * total_f;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..sites.len()).collect();
    let mut closest = f64::NAN;

    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        order.shuffle(&mut rng);
        let mut chosen = vec![false; sites.len()];
        let mut mass = 0u64;
        for &i in &order {
            let p = sites[i].1;
            if (mass + p) as f64 <= target_mass {
                chosen[i] = true;
                mass += p;
            }
        }
        let mut best: Option<usize> = None;
        let mut best_gap = (mass as f64 - target_mass).abs();
        for &i in &order {
            if !chosen[i] {
                let gap = ((mass + sites[i].1) as f64 - target_mass).abs();
                if gap < best_gap {
                    best_gap = gap;
                    best = Some(i);
                }
            }
        }
        if let Some(i) = best {
            chosen[i] = true;
            mass += sites[i].1;
        }
        let achieved = mass as f64 / total_f;
        if closest.is_nan() || (achieved - qr_target).abs() < (closest - qr_target).abs() {
            closest = achieved;
        }
        if (achieved - qr_target).abs() <= tolerance {
            let low = sites
                .iter()
                .zip(&chosen)
                .filter(|(_, &c)| c)
                .map(|((s, _), _)| *s);
            return QuantPlan::new(method, weight_and_activation, sites, low);
        }
    }
    Err(Error::RatioInfeasible {
        target: qr_target,
        tolerance,
        closest,
    })
}

/// Runs one trial's plan through the evaluator. Plan sampling errors abort
/// the run; evaluator errors are recorded on the trial.
fn run_trial(
    evaluator: &dyn Evaluator,
    sites: &[(SiteId, u64)],
    spec: &SearchSpec,
    baseline_loss: f64,
    trial_index: usize,
) -> Result<TrialRecord> {
    let seed = spec.trial_seed(trial_index);
    let plan = sample_plan(
        sites,
        spec.qr_target,
        seed,
        spec.ratio_tolerance,
        spec.method,
        spec.weight_and_activation,
    )?;
    let (loss, delta, error) = match evaluator.loss(Some(&plan)) {
        Ok(loss) if loss.is_finite() => (Some(loss), Some(loss - baseline_loss), None),
        Ok(loss) => (None, None, Some(format!("non-finite loss {loss}"))),
        Err(e) => (None, None, Some(e.to_string())),
    };
    Ok(TrialRecord {
        trial_index,
        seed,
        qr_achieved: plan.achieved_ratio(),
        plan_digest: plan.digest(),
        loss,
        delta,
        error,
        extra: BTreeMap::new(),
    })
}

/// Runs `spec.trials` independent trials on up to `jobs` threads. Records come
/// back ordered by trial index whatever the thread count.
pub fn run_search(
    evaluator: &dyn Evaluator,
    sites: &[(SiteId, u64)],
    spec: &SearchSpec,
    header: RunHeader,
    jobs: usize,
) -> Result<TrialSet> {
    spec.validate()?;
    if let Some((s, _)) = sites
        .iter()
        .find(|(s, _)| s.granularity() != spec.granularity)
    {
        return Err(Error::InvalidInput(format!(
            "site {s} does not match granularity {}",
            spec.granularity
        )));
    }
    if !header.baseline_loss.is_finite() {
        return Err(Error::InvalidInput("baseline loss is not finite".into()));
    }
    let baseline = header.baseline_loss;
    let trial = |i| run_trial(evaluator, sites, spec, baseline, i);
    let records = if jobs <= 1 {
        (0..spec.trials).map(trial).collect::<Result<Vec<_>>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;
        pool.install(|| {
            (0..spec.trials)
                .into_par_iter()
                .map(trial)
                .collect::<Result<Vec<_>>>()
        })?
    };
    let failed = records.iter().filter(|r| !r.succeeded()).count();
    if failed as f64 > MAX_FAILED_FRACTION * spec.trials as f64 {
        return Err(Error::RunFailed {
            failed,
            trials: spec.trials,
        });
    }
    Ok(TrialSet {
        header,
        spec: spec.clone(),
        records,
    })
}

/// Minimum and mean of a delta sample.
pub fn estimate_deltas(deltas: &[f64]) -> Result<Estimates> {
    if deltas.is_empty() {
        return Err(Error::EmptyRun);
    }
    let sum: KahanSum = deltas.iter().copied().collect();
    Ok(Estimates {
        delta_opt: deltas.iter().copied().fold(f64::INFINITY, f64::min),
        delta_mu: sum.total() / deltas.len() as f64,
        n: deltas.len(),
    })
}

/// Estimates over the successful trials of a run.
pub fn estimate(set: &TrialSet) -> Result<Estimates> {
    estimate_deltas(&set.successful_deltas())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn equal_sites(n: usize) -> Vec<(SiteId, u64)> {
        (0..n).map(|i| (SiteId::layer(i), 100)).collect()
    }

    fn fmt() -> BlockFormat {
        BlockFormat::mxint(4, 32).unwrap()
    }

    #[test]
    fn ratio_extremes() {
        let sites = equal_sites(7);
        let p0 = sample_plan(&sites, 0.0, 1, 0.02, fmt(), true).unwrap();
        assert!(p0.low_precision_sites.is_empty());
        let p1 = sample_plan(&sites, 1.0, 1, 0.02, fmt(), true).unwrap();
        assert_eq!(p1.achieved_ratio(), 1.0);
    }

    #[test]
    fn equal_sites_force_the_count() {
        let p = sample_plan(&equal_sites(10), 0.5, 9, 0.02, fmt(), true).unwrap();
        assert_eq!(p.low_precision_sites.len(), 5);
        assert_eq!(p.achieved_ratio(), 0.5);
    }

    #[test]
    fn infeasible_reports_closest() {
        let sites = equal_sites(3);
        match sample_plan(&sites, 0.5, 1, 0.02, fmt(), true) {
            Err(Error::RatioInfeasible { closest, .. }) => {
                assert!((closest - 1.0 / 3.0).abs() < 1e-12 || (closest - 2.0 / 3.0).abs() < 1e-12)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn estimates_of_small_samples() {
        let e = estimate_deltas(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((e.delta_opt, e.delta_mu, e.n), (1.0, 2.0, 3));
        let e = estimate_deltas(&[0.7]).unwrap();
        assert_eq!((e.delta_opt, e.delta_mu), (0.7, 0.7));
        let e = estimate_deltas(&[-0.5, 0.5, 1.5]).unwrap();
        assert_eq!(e.delta_opt, -0.5);
        assert!(matches!(estimate_deltas(&[]), Err(Error::EmptyRun)));
    }
}
