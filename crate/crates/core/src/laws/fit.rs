//! Log-space least squares for the weak and strong laws.
//!
//! Given `d`, `ln delta` is linear in `(ln C, A, gamma_n, gamma_c)`, so the
//! strong fit is ordinary least squares inside a 1-D search over `d`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{eval_law, ExperimentPoint, LawKind, LawParams, Target};
use crate::error::{Error, Result};

/// Units tag recorded with every fit.
pub const N_UNITS: &str = "billions_non_embedding";

/// Upper end of the `d` search interval.
const D_MAX: f64 = 1024.0;
/// Gap kept between `d` and `-min(Qb)`.
const D_MARGIN: f64 = 1e-3;
const D_SCAN_POINTS: usize = 257;
const GOLDEN_ITERS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    /// Root-mean-square log residual.
    pub rms_log: f64,
    pub max_abs_log: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: LawParams,
    pub r2_log: f64,
    pub r2_linear: f64,
    pub n_points: usize,
    pub n_dropped_nonpositive: usize,
    pub residuals: ResidualSummary,
    pub units: String,
}

struct Ols {
    coef: DVector<f64>,
    sse: f64,
}

/// Least squares with a rank check. Columns are centred and scaled before
/// solving so the check does not depend on the units of each axis.
fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Ols> {
    let (n, k) = x.shape();
    if n < k {
        return Err(Error::Underdetermined(format!(
            "{n} points for {k} coefficients"
        )));
    }
    let mut z = x.clone();
    let mut means = vec![0.0; k];
    let mut scales = vec![1.0; k];
    // Column 0 is the intercept.
    for j in 1..k {
        let col = x.column(j);
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::Underdetermined(format!("fit axis {j} is constant")));
        }
        means[j] = mean;
        scales[j] = sd;
        for i in 0..n {
            z[(i, j)] = (x[(i, j)] - mean) / sd;
        }
    }
    let svd = z.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.rank(smax * 1e-10) < k {
        return Err(Error::Underdetermined(
            "design matrix is rank deficient".into(),
        ));
    }
    let b = svd
        .solve(y, smax * 1e-12)
        .map_err(|e| Error::Underdetermined(e.to_string()))?;
    let mut coef = DVector::zeros(k);
    let mut intercept = b[0];
    for j in 1..k {
        coef[j] = b[j] / scales[j];
        intercept -= coef[j] * means[j];
    }
    coef[0] = intercept;
    let resid = y - x * &coef;
    Ok(Ols {
        sse: resid.norm_squared(),
        coef,
    })
}

fn design(points: &[ExperimentPoint], d: Option<f64>) -> DMatrix<f64> {
    let k = if d.is_some() { 4 } else { 3 };
    DMatrix::from_fn(points.len(), k, |i, j| {
        let p = &points[i];
        match j {
            0 => 1.0,
            1 => p.q_r,
            2 => p.n_params.ln(),
            _ => (p.q_b as f64 + d.unwrap_or(0.0)).ln(),
        }
    })
}

fn distinct(values: impl Iterator<Item = f64>) -> usize {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

/// Golden-section minimum of `f` on `[a, b]`.
fn golden(mut a: f64, mut b: f64, f: &dyn Fn(f64) -> f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..GOLDEN_ITERS {
        if b - a <= 1e-14 * (a.abs() + b.abs()).max(1e-12) {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        x1
    } else {
        x2
    }
}

/// Best `d` in `(-min Qb, D_MAX]`. A scan on a log grid of offsets from the
/// lower bound brackets the minimum, then golden-section refines it.
fn search_d(points: &[ExperimentPoint], y: &DVector<f64>) -> Result<f64> {
    let min_qb = points.iter().map(|p| p.q_b).min().unwrap_or(1) as f64;
    let lo = -min_qb + D_MARGIN;
    let span = D_MAX - lo;
    let sse = |d: f64| {
        ols(&design(points, Some(d)), y)
            .map(|o| o.sse)
            .unwrap_or(f64::INFINITY)
    };
    let grid: Vec<f64> = (0..D_SCAN_POINTS)
        .map(|i| {
            let t = i as f64 / (D_SCAN_POINTS - 1) as f64;
            // Offsets from D_MARGIN-ish to span, evenly spaced in log.
            lo + (span.ln() * t + D_MARGIN.ln() * (1.0 - t)).exp() - D_MARGIN
        })
        .collect();
    let values: Vec<f64> = grid.iter().map(|&d| sse(d)).collect();
    let best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    if !values[best].is_finite() {
        return Err(Error::Underdetermined(
            "no value of d gives a full-rank design".into(),
        ));
    }
    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(grid.len() - 1)];
    let d = golden(a, b, &sse);
    Ok(if sse(d) <= values[best] {
        d
    } else {
        grid[best]
    })
}

/// Fits a law to `(point, delta)` pairs in log space. Nonpositive deltas are
/// dropped and counted.
pub fn fit_law(data: &[(ExperimentPoint, f64)], law: LawKind, target: Target) -> Result<FitResult> {
    for (p, d) in data {
        p.validate()?;
        if d.is_nan() {
            return Err(Error::InvalidInput("delta is NaN".into()));
        }
    }
    let kept: Vec<&(ExperimentPoint, f64)> = data
        .iter()
        .filter(|(_, d)| *d > 0.0 && d.is_finite())
        .collect();
    let dropped = data.len() - kept.len();
    if kept.is_empty() && !data.is_empty() {
        return Err(Error::NoFittableData);
    }
    let min_points = match law {
        LawKind::Weak => 4,
        LawKind::Strong => 6,
    };
    if kept.len() < min_points {
        return Err(Error::Underdetermined(format!(
            "{} usable points, need at least {min_points}",
            kept.len()
        )));
    }
    let points: Vec<ExperimentPoint> = kept.iter().map(|(p, _)| *p).collect();
    let y = DVector::from_iterator(kept.len(), kept.iter().map(|(_, d)| d.ln()));
    let mut axes = vec![
        ("n_params", distinct(points.iter().map(|p| p.n_params))),
        ("q_r", distinct(points.iter().map(|p| p.q_r))),
    ];
    if law == LawKind::Strong {
        axes.push(("q_b", distinct(points.iter().map(|p| p.q_b as f64))));
    }
    if let Some((name, _)) = axes.iter().find(|(_, n)| *n < 2) {
        return Err(Error::Underdetermined(format!(
            "{name} takes a single value"
        )));
    }

    let d = match law {
        LawKind::Weak => None,
        LawKind::Strong => Some(search_d(&points, &y)?),
    };
    let fit = ols(&design(&points, d), &y)?;
    let params = LawParams {
        c: fit.coef[0].exp(),
        a_ratio: fit.coef[1],
        gamma_n: -fit.coef[2],
        d_shift: d.unwrap_or(0.0),
        gamma_c: if d.is_some() { fit.coef[3] } else { 0.0 },
        law,
        target,
    };

    let n = points.len() as f64;
    let y_mean = y.mean();
    let sst_log: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();
    let mut sse_lin = 0.0;
    let mut max_abs_log = 0.0f64;
    let mut sse_log = 0.0;
    let deltas: Vec<f64> = kept.iter().map(|(_, d)| *d).collect();
    let d_mean = deltas.iter().sum::<f64>() / n;
    let sst_lin: f64 = deltas.iter().map(|v| (v - d_mean).powi(2)).sum();
    for (p, &delta) in points.iter().zip(&deltas) {
        let pred = eval_law(&params, p)?;
        let r = delta.ln() - pred.ln();
        sse_log += r * r;
        max_abs_log = max_abs_log.max(r.abs());
        sse_lin += (delta - pred).powi(2);
    }
    Ok(FitResult {
        params,
        r2_log: r_squared(sse_log, sst_log),
        r2_linear: r_squared(sse_lin, sst_lin),
        n_points: points.len(),
        n_dropped_nonpositive: dropped,
        residuals: ResidualSummary {
            rms_log: (sse_log / n).sqrt(),
            max_abs_log,
        },
        units: N_UNITS.to_string(),
    })
}

fn r_squared(sse: f64, sst: f64) -> f64 {
    if sst > 0.0 {
        1.0 - sse / sst
    } else if sse == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_finds_parabola_minimum() {
        let x = golden(-3.0, 5.0, &|x| (x - 1.25).powi(2));
        assert!((x - 1.25).abs() < 1e-7);
    }

    #[test]
    fn ols_recovers_a_plane() {
        let x = DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0],
        );
        let y = DVector::from_iterator(4, (0..4).map(|i| 2.0 + 3.0 * x[(i, 1)] - 0.5 * x[(i, 2)]));
        let o = ols(&x, &y).unwrap();
        assert!((o.coef[0] - 2.0).abs() < 1e-12);
        assert!((o.coef[1] - 3.0).abs() < 1e-12);
        assert!((o.coef[2] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn collinear_axes_are_rejected() {
        // q_r and ln N move together.
        let x = DMatrix::from_fn(5, 3, |i, j| match j {
            0 => 1.0,
            1 => i as f64,
            _ => 2.0 * i as f64 + 1.0,
        });
        let y = DVector::from_element(5, 1.0);
        assert!(matches!(ols(&x, &y), Err(Error::Underdetermined(_))));
    }
}
