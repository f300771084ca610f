//! Loss-degeneration laws: evaluation, inversion and fitting.
//!
//! Weak law: `delta = C * exp(A * Qr) * N^(-gamma_n)`.
//! Strong law: the weak law times `(Qb + d)^gamma_c`.
//!
//! `N` is measured in billions of non-embedding parameters. All logarithms
//! are natural.

mod fit;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fit::{fit_law, FitResult, ResidualSummary, N_UNITS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LawKind {
    Weak,
    Strong,
}

/// Which estimator a law describes: the minimum over trials or their mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Opt,
    Mean,
}

impl fmt::Display for LawKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LawKind::Weak => "weak",
            LawKind::Strong => "strong",
        })
    }
}

impl FromStr for LawKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weak" => Ok(LawKind::Weak),
            "strong" => Ok(LawKind::Strong),
            _ => Err(Error::InvalidInput(format!("unknown law {s:?}"))),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Opt => "opt",
            Target::Mean => "mean",
        })
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "opt" => Ok(Target::Opt),
            "mean" => Ok(Target::Mean),
            _ => Err(Error::InvalidInput(format!("unknown target {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChinchillaParams {
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
    pub e_irreducible: f64,
}

/// Post-training precision law constants. `gamma_n` here is unrelated to
/// [`LawParams::gamma_n`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionLawParams {
    pub c_t: f64,
    pub gamma_post: f64,
    pub gamma_d: f64,
    pub gamma_n: f64,
    pub c_w: f64,
    pub c_a: f64,
    pub c_kv: f64,
    pub p_w: f64,
    pub p_a: f64,
    pub p_kv: f64,
    pub p_post: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawParams {
    pub c: f64,
    pub a_ratio: f64,
    pub gamma_n: f64,
    /// Strong law only.
    #[serde(default)]
    pub d_shift: f64,
    /// Strong law only.
    #[serde(default)]
    pub gamma_c: f64,
    pub law: LawKind,
    pub target: Target,
}

impl LawParams {
    pub fn weak(c: f64, a_ratio: f64, gamma_n: f64) -> Self {
        LawParams {
            c,
            a_ratio,
            gamma_n,
            d_shift: 0.0,
            gamma_c: 0.0,
            law: LawKind::Weak,
            target: Target::Opt,
        }
    }

    pub fn strong(c: f64, a_ratio: f64, gamma_n: f64, d_shift: f64, gamma_c: f64) -> Self {
        LawParams {
            c,
            a_ratio,
            gamma_n,
            d_shift,
            gamma_c,
            law: LawKind::Strong,
            target: Target::Opt,
        }
    }

    pub fn with_target(self, target: Target) -> Self {
        LawParams { target, ..self }
    }

    fn check_finite(&self) -> Result<()> {
        let vals = [
            self.c,
            self.a_ratio,
            self.gamma_n,
            self.d_shift,
            self.gamma_c,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite law parameter in {self:?}"
            )));
        }
        Ok(())
    }

    /// `ln((Qb + d)^gamma_c)`, zero for the weak law.
    fn log_granularity(&self, q_b: usize) -> Result<f64> {
        match self.law {
            LawKind::Weak => Ok(0.0),
            LawKind::Strong => {
                let base = q_b as f64 + self.d_shift;
                if base <= 0.0 {
                    return Err(Error::DomainError(format!(
                        "q_b + d = {q_b} + {} is not positive",
                        self.d_shift
                    )));
                }
                Ok(self.gamma_c * base.ln())
            }
        }
    }
}

/// Published CLM constants, MXINT4 W&A.
pub mod presets {
    use super::LawParams;

    /// Layer-wise weak law for the minimum over trials.
    pub fn clm_weak_layerwise() -> LawParams {
        LawParams::weak(0.2187, 2.2312, 0.8405)
    }

    /// Block-size strong law for the minimum over trials.
    pub fn clm_strong() -> LawParams {
        LawParams::strong(0.0028, 5.2055, 0.7651, 13.6320, 0.4741)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPoint {
    /// Billions of non-embedding parameters.
    pub n_params: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_tokens: Option<f64>,
    pub q_r: f64,
    pub q_b: usize,
}

impl ExperimentPoint {
    pub fn new(n_params: f64, q_r: f64, q_b: usize) -> Self {
        ExperimentPoint {
            n_params,
            d_tokens: None,
            q_r,
            q_b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n_params.is_finite() && self.n_params > 0.0) {
            return Err(Error::InvalidInput(format!(
                "n_params must be > 0, got {}",
                self.n_params
            )));
        }
        if !(0.0..=1.0).contains(&self.q_r) {
            return Err(Error::InvalidInput(format!(
                "q_r {} outside [0, 1]",
                self.q_r
            )));
        }
        if self.q_b == 0 {
            return Err(Error::InvalidInput("q_b must be >= 1".into()));
        }
        if let Some(d) = self.d_tokens {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "d_tokens must be > 0, got {d}"
                )));
            }
        }
        Ok(())
    }

    fn tokens(&self) -> Result<f64> {
        self.d_tokens
            .ok_or_else(|| Error::InvalidInput("point has no token count D".into()))
    }
}

pub fn eval_chinchilla(p: &ChinchillaParams, point: &ExperimentPoint) -> Result<f64> {
    point.validate()?;
    let d = point.tokens()?;
    Ok(p.a * point.n_params.powf(-p.alpha) + p.b * d.powf(-p.beta) + p.e_irreducible)
}

pub fn eval_precision_law(p: &PrecisionLawParams, point: &ExperimentPoint) -> Result<f64> {
    point.validate()?;
    let d = point.tokens()?;
    if !(p.gamma_post > 0.0) {
        return Err(Error::InvalidInput(format!(
            "gamma_post must be > 0, got {}",
            p.gamma_post
        )));
    }
    if [p.p_w, p.p_a, p.p_kv, p.p_post].iter().any(|&b| !(b > 0.0)) {
        return Err(Error::InvalidInput("bit-widths must be > 0".into()));
    }
    let mut v = p.c_t * (-p.p_post / p.gamma_post).exp() * d.powf(p.gamma_d)
        / point.n_params.powf(p.gamma_n);
    for (c, bits) in [(p.c_w, p.p_w), (p.c_a, p.p_a), (p.c_kv, p.p_kv)] {
        v *= 1.0 - (-c * (bits - p.p_post)).exp();
    }
    Ok(v)
}

/// Predicted degeneration at `point`.
pub fn eval_law(p: &LawParams, point: &ExperimentPoint) -> Result<f64> {
    point.validate()?;
    p.check_finite()?;
    let gran = p.log_granularity(point.q_b)?;
    Ok(p.c * (p.a_ratio * point.q_r - p.gamma_n * point.n_params.ln() + gran).exp())
}

/// Chinchilla loss plus predicted degeneration.
pub fn combined_loss(ch: &ChinchillaParams, p: &LawParams, point: &ExperimentPoint) -> Result<f64> {
    Ok(eval_chinchilla(ch, point)? + eval_law(p, point)?)
}

/// Weak law with the strong law's ratio term at `Qr = 1` folded into `C`,
/// i.e. `C * e^A * N^(-gamma_n) * (Qb + d)^gamma_c`.
pub fn reduced_at_full_ratio(p: &LawParams, n_params: f64, q_b: usize) -> Result<f64> {
    let folded = LawParams {
        c: p.c * p.a_ratio.exp(),
        a_ratio: 0.0,
        ..*p
    };
    eval_law(&folded, &ExperimentPoint::new(n_params, 0.0, q_b))
}

/// `ln N = a2 * Qr + c2` along a fixed loss budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompensationLine {
    pub a2: f64,
    pub c2: f64,
    pub budget_l: f64,
}

impl CompensationLine {
    /// Model size (billions) on the line at ratio `q_r`.
    pub fn n_at(&self, q_r: f64) -> f64 {
        (self.a2 * q_r + self.c2).exp()
    }
}

pub fn compensation_line(p: &LawParams, budget_l: f64) -> Result<CompensationLine> {
    if p.law != LawKind::Weak {
        return Err(Error::InvalidInput(
            "compensation line needs weak-law parameters".into(),
        ));
    }
    check_budget(budget_l)?;
    p.check_finite()?;
    if p.gamma_n == 0.0 {
        return Err(Error::DomainError(
            "gamma_n = 0 gives no compensation line".into(),
        ));
    }
    if !(p.c > 0.0) {
        return Err(Error::DomainError(format!(
            "ln C undefined for C = {}",
            p.c
        )));
    }
    Ok(CompensationLine {
        a2: p.a_ratio / p.gamma_n,
        c2: (p.c.ln() - budget_l.ln()) / p.gamma_n,
        budget_l,
    })
}

fn check_budget(budget_l: f64) -> Result<()> {
    if !(budget_l.is_finite() && budget_l > 0.0) {
        return Err(Error::InvalidInput(format!(
            "budget must be > 0, got {budget_l}"
        )));
    }
    Ok(())
}

/// Largest `Qr` in `[0, 1]` whose predicted degeneration stays within the
/// budget. Returns 0 when even `Qr = 0` exceeds it.
pub fn max_ratio(p: &LawParams, n_params: f64, q_b: usize, budget_l: f64) -> Result<f64> {
    check_budget(budget_l)?;
    let at = |q_r| eval_law(p, &ExperimentPoint::new(n_params, q_r, q_b));
    let (lo, hi) = (at(0.0)?, at(1.0)?);
    if hi <= budget_l {
        return Ok(1.0);
    }
    if lo > budget_l || p.a_ratio <= 0.0 {
        return Ok(0.0);
    }
    // lo <= budget < hi with A > 0: invert the exponential.
    Ok(((budget_l / lo).ln() / p.a_ratio).clamp(0.0, 1.0))
}

/// Smallest model size (billions) whose predicted degeneration at
/// `(q_r, q_b)` stays within the budget.
pub fn min_n(p: &LawParams, q_r: f64, q_b: usize, budget_l: f64) -> Result<f64> {
    check_budget(budget_l)?;
    if !(p.gamma_n > 0.0) {
        return Err(Error::DomainError(format!(
            "gamma_n = {} does not shrink degeneration with N",
            p.gamma_n
        )));
    }
    let at_one = eval_law(p, &ExperimentPoint::new(1.0, q_r, q_b))?;
    if at_one <= 0.0 {
        return Err(Error::DomainError(
            "predicted degeneration is not positive".into(),
        ));
    }
    Ok((at_one / budget_l).powf(1.0 / p.gamma_n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(n: f64, qr: f64, qb: usize) -> ExperimentPoint {
        ExperimentPoint::new(n, qr, qb)
    }

    #[test]
    fn chinchilla_examples() {
        let flat = ChinchillaParams {
            a: 0.0,
            b: 0.0,
            alpha: 0.3,
            beta: 0.3,
            e_irreducible: 2.5,
        };
        let with_d = ExperimentPoint {
            d_tokens: Some(4.0),
            ..pt(2.0, 0.5, 32)
        };
        assert_eq!(eval_chinchilla(&flat, &with_d).unwrap(), 2.5);
        let unit = ChinchillaParams {
            a: 1.0,
            b: 1.0,
            alpha: 1.0,
            beta: 1.0,
            e_irreducible: 0.0,
        };
        assert_eq!(eval_chinchilla(&unit, &with_d).unwrap(), 0.75);
        assert!(matches!(
            eval_chinchilla(&unit, &pt(2.0, 0.5, 32)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn precision_law_zero_cases() {
        let p = PrecisionLawParams {
            c_t: 1.3,
            gamma_post: 2.0,
            gamma_d: 0.5,
            gamma_n: 0.4,
            c_w: 1.0,
            c_a: 1.0,
            c_kv: 1.0,
            p_w: 8.0,
            p_a: 8.0,
            p_kv: 8.0,
            p_post: 8.0,
        };
        let point = ExperimentPoint {
            d_tokens: Some(1e9),
            ..pt(1.0, 1.0, 32)
        };
        assert_eq!(eval_precision_law(&p, &point).unwrap(), 0.0);
        let q = PrecisionLawParams { p_post: 4.0, ..p };
        assert!(eval_precision_law(&q, &point).unwrap() > 0.0);
        assert_eq!(
            eval_precision_law(&PrecisionLawParams { c_t: 0.0, ..q }, &point).unwrap(),
            0.0
        );
    }

    #[test]
    fn strong_law_domain() {
        let p = LawParams::strong(1.0, 1.0, 1.0, -40.0, 0.5);
        assert!(matches!(
            eval_law(&p, &pt(1.0, 0.5, 32)),
            Err(Error::DomainError(_))
        ));
        assert!(eval_law(&p, &pt(1.0, 0.5, 64)).is_ok());
    }

    #[test]
    fn max_ratio_clamps_and_inverts() {
        let p = presets::clm_weak_layerwise();
        let (n, qb) = (1.0, 32);
        let hi = eval_law(&p, &pt(n, 1.0, qb)).unwrap();
        let lo = eval_law(&p, &pt(n, 0.0, qb)).unwrap();
        assert_eq!(max_ratio(&p, n, qb, hi * 1.01).unwrap(), 1.0);
        assert_eq!(max_ratio(&p, n, qb, lo * 0.99).unwrap(), 0.0);
        let l = (lo * hi).sqrt();
        let r = max_ratio(&p, n, qb, l).unwrap();
        assert!((eval_law(&p, &pt(n, r, qb)).unwrap() - l).abs() <= 1e-9 * l);
    }

    #[test]
    fn min_n_inverts_in_n() {
        let p = presets::clm_strong();
        let n = min_n(&p, 0.9, 64, 0.05).unwrap();
        let v = eval_law(&p, &pt(n, 0.9, 64)).unwrap();
        assert!((v - 0.05).abs() < 1e-12);
    }

    #[test]
    fn compensation_examples() {
        let p = LawParams::weak(0.3, 0.7, 0.7);
        assert_eq!(compensation_line(&p, 0.1).unwrap().a2, 1.0);
        assert_eq!(compensation_line(&p, 0.3).unwrap().c2, 0.0);
        let clm = presets::clm_weak_layerwise();
        let line = compensation_line(&clm, 0.1).unwrap();
        assert!((line.a2 - 2.2312 / 0.8405).abs() < 1e-15);
        assert!((line.c2 - (0.2187f64.ln() - 0.1f64.ln()) / 0.8405).abs() < 1e-15);
        assert!(matches!(
            compensation_line(&LawParams::weak(0.3, 0.7, 0.0), 0.1),
            Err(Error::DomainError(_))
        ));
        assert!(compensation_line(&presets::clm_strong(), 0.1).is_err());
    }

    #[test]
    fn points_on_the_line_meet_the_budget() {
        let p = presets::clm_weak_layerwise();
        let line = compensation_line(&p, 0.05).unwrap();
        for qr in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let v = eval_law(&p, &pt(line.n_at(qr), qr, 32)).unwrap();
            assert!((v - 0.05).abs() <= 1e-9, "{qr}: {v}");
        }
    }
}
