//! Robust loss aggregation and the KL-DRO primal/dual pair.
//!
//! [`aggregate`] is what training optimizes. [`worst_case_oracle`] solves the
//! KL-constrained inner maximization directly by exponential tilting and
//! bisection; [`dual_risk`] minimizes the dual over the temperature by
//! golden-section search. The two are computed along independent routes and
//! certify each other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, weighted_log_sum_exp};
use crate::policy::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AggregatorKind {
    /// `mean(u)`
    Erm,
    /// `λ·log mean(exp(u/λ))`
    Dro,
    /// `mean(h̃·u)`
    Reweight,
    /// `λ·log mean(exp(h̃·u/λ))`
    Dora,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 4] = [
        AggregatorKind::Erm,
        AggregatorKind::Dro,
        AggregatorKind::Reweight,
        AggregatorKind::Dora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Erm => "ERM",
            AggregatorKind::Dro => "DRO",
            AggregatorKind::Reweight => "REWEIGHT",
            AggregatorKind::Dora => "DORA",
        }
    }

    pub fn is_robust(self) -> bool {
        matches!(self, AggregatorKind::Dro | AggregatorKind::Dora)
    }

    pub fn uses_calibration(self) -> bool {
        matches!(self, AggregatorKind::Reweight | AggregatorKind::Dora)
    }
}

fn validate(losses: &[f64], calib: &[f64], kind: AggregatorKind, lambda: f64) -> Result<()> {
    if losses.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    if losses.len() != calib.len() {
        return Err(Error::Arity(format!(
            "{} losses but {} calibration factors",
            losses.len(),
            calib.len()
        )));
    }
    if kind.is_robust() && !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::config("lambda", format!("must be positive, got {lambda}")));
    }
    if losses.iter().any(|u| !u.is_finite()) {
        return Err(Error::NonFinite("loss batch".into()));
    }
    if kind.uses_calibration() && calib.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
        return Err(Error::config("calibration", "factors must be positive and finite"));
    }
    Ok(())
}

/// Per-sample scores fed to the aggregator: `h̃·u` when calibrated, `u`
/// otherwise. Multiplying by `h̃ = 1` is exact, so `h̃ ≡ 1` reproduces the
/// uncalibrated sibling bit-for-bit.
fn scores(losses: &[f64], calib: &[f64], kind: AggregatorKind) -> Vec<f64> {
    if kind.uses_calibration() {
        losses.iter().zip(calib).map(|(u, h)| h * u).collect()
    } else {
        losses.to_vec()
    }
}

/// Aggregated objective together with the per-sample weights that define
/// its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub value: f64,
    /// `ω_i`: softmax of `score_i / λ` for robust kinds, `1/N` otherwise.
    pub omega: Vec<f64>,
    /// `∂value/∂u_i`: `ω_i·h̃_i` for calibrated kinds, `ω_i` otherwise.
    pub coefficients: Vec<f64>,
}

pub fn aggregate_weights(
    losses: &[f64],
    calib: &[f64],
    kind: AggregatorKind,
    lambda: f64,
) -> Result<Aggregation> {
    validate(losses, calib, kind, lambda)?;
    let n = losses.len() as f64;
    let v = scores(losses, calib, kind);
    let (value, omega) = if kind.is_robust() {
        let scaled: Vec<f64> = v.iter().map(|s| s / lambda).collect();
        let lse = log_sum_exp(&scaled);
        let omega: Vec<f64> = scaled.iter().map(|s| (s - lse).exp()).collect();
        (lambda * (lse - n.ln()), omega)
    } else {
        (v.iter().sum::<f64>() / n, vec![1.0 / n; losses.len()])
    };
    let coefficients = if kind.uses_calibration() {
        omega.iter().zip(calib).map(|(w, h)| w * h).collect()
    } else {
        omega.clone()
    };
    Ok(Aggregation {
        value,
        omega,
        coefficients,
    })
}

pub fn aggregate(losses: &[f64], calib: &[f64], kind: AggregatorKind, lambda: f64) -> Result<f64> {
    Ok(aggregate_weights(losses, calib, kind, lambda)?.value)
}

/// Aggregated value and its gradient `Σ_i coefficient_i·∇u_i`, summed in
/// index order.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateGrad {
    pub aggregation: Aggregation,
    pub gradient: Table,
}

pub fn aggregate_grad(
    losses: &[f64],
    loss_grads: &[Table],
    calib: &[f64],
    kind: AggregatorKind,
    lambda: f64,
) -> Result<AggregateGrad> {
    if loss_grads.len() != losses.len() {
        return Err(Error::Arity("one gradient per loss required".into()));
    }
    let aggregation = aggregate_weights(losses, calib, kind, lambda)?;
    let first = &loss_grads[0];
    let mut gradient = Table::zeros(first.rows(), first.cols());
    for (g, c) in loss_grads.iter().zip(&aggregation.coefficients) {
        if !g.same_shape(first) {
            return Err(Error::Arity("loss gradients differ in shape".into()));
        }
        gradient.add_scaled(*c, g);
    }
    Ok(AggregateGrad {
        aggregation,
        gradient,
    })
}

/// Solution of `max_q Σ q_i u_i  s.t.  KL(q‖p) ≤ ρ`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorstCaseSolution {
    /// The tilted distribution `q*`.
    pub weights: Vec<f64>,
    /// Optimal tilt `η = 1/λ*`; infinite when the budget reaches the
    /// max-support vertex.
    pub tilt: f64,
    /// `KL(q*‖p)`.
    pub kl: f64,
    /// Worst-case expected loss `Σ q*_i u_i`.
    pub value: f64,
    /// `log Σ p_i exp(η u_i)`, the log partition value of the tilt.
    pub log_normalizer: f64,
    /// The KL budget binds (`KL(q*‖p) = ρ`).
    pub constraint_active: bool,
    /// `q*` is `p` restricted to the maximal-loss set.
    pub boundary: bool,
}

fn validate_problem(losses: &[f64], base: &[f64], rho: f64) -> Result<()> {
    if losses.is_empty() {
        return Err(Error::Empty("loss vector"));
    }
    if losses.len() != base.len() {
        return Err(Error::Arity("losses and base weights differ in length".into()));
    }
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(Error::config("rho", format!("must be nonnegative, got {rho}")));
    }
    if losses.iter().any(|u| !u.is_finite()) {
        return Err(Error::NonFinite("losses".into()));
    }
    if base.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidDistribution("base weights must be nonnegative".into()));
    }
    let total: f64 = base.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(format!("base weights sum to {total}")));
    }
    Ok(())
}

struct Support {
    max: f64,
    min: f64,
    /// Base mass on `argmax u`.
    top_mass: f64,
}

fn support(losses: &[f64], base: &[f64]) -> Support {
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    for (u, p) in losses.iter().zip(base) {
        if *p > 0.0 {
            max = max.max(*u);
            min = min.min(*u);
        }
    }
    let top_mass = losses
        .iter()
        .zip(base)
        .filter(|(u, p)| **p > 0.0 && **u == max)
        .map(|(_, p)| p)
        .sum();
    Support { max, min, top_mass }
}

/// Tilted distribution at `eta` with its KL and log partition value.
fn tilt_at(losses: &[f64], base: &[f64], max: f64, eta: f64) -> (Vec<f64>, f64, f64) {
    let a: Vec<f64> = losses.iter().map(|u| eta * (u - max)).collect();
    let log_z = weighted_log_sum_exp(base, &a);
    let mut q = Vec::with_capacity(base.len());
    let mut kl = 0.0;
    for (p, ai) in base.iter().zip(&a) {
        if *p > 0.0 {
            let log_ratio = ai - log_z;
            let qi = p * log_ratio.exp();
            kl += qi * log_ratio;
            q.push(qi);
        } else {
            q.push(0.0);
        }
    }
    (q, kl.max(0.0), log_z + eta * max)
}

const KL_TOLERANCE: f64 = 1e-12;

/// Primal worst case by exponential tilting `q_i ∝ p_i·exp(η u_i)` with
/// bisection on `η` until `KL(q‖p) = ρ`.
pub fn worst_case_oracle(losses: &[f64], base: &[f64], rho: f64) -> Result<WorstCaseSolution> {
    validate_problem(losses, base, rho)?;
    let sup = support(losses, base);
    let expectation: f64 = losses.iter().zip(base).map(|(u, p)| u * p).sum();
    let untilted = |active: bool| WorstCaseSolution {
        weights: base.to_vec(),
        tilt: 0.0,
        kl: 0.0,
        value: expectation,
        log_normalizer: 0.0,
        constraint_active: active,
        boundary: false,
    };
    if sup.max == sup.min {
        return Ok(untilted(false));
    }
    if rho == 0.0 {
        return Ok(untilted(true));
    }
    let kl_max = -sup.top_mass.ln();
    let vertex = || {
        let weights: Vec<f64> = losses
            .iter()
            .zip(base)
            .map(|(u, p)| if *p > 0.0 && *u == sup.max { p / sup.top_mass } else { 0.0 })
            .collect();
        WorstCaseSolution {
            weights,
            tilt: f64::INFINITY,
            kl: kl_max,
            value: sup.max,
            log_normalizer: f64::INFINITY,
            constraint_active: rho == kl_max,
            boundary: true,
        }
    };
    if rho >= kl_max {
        return Ok(vertex());
    }

    let max_abs = losses.iter().fold(0.0f64, |m, u| m.max(u.abs()));
    let mut hi = 700.0 / max_abs;
    let mut expansions = 0;
    while tilt_at(losses, base, sup.max, hi).1 < rho {
        hi *= 2.0;
        expansions += 1;
        if expansions > 2000 || !hi.is_finite() {
            // ρ is within rounding of the vertex KL.
            return Ok(vertex());
        }
    }
    let mut lo = 0.0;
    let mut best = hi;
    let mut best_gap = f64::INFINITY;
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let kl = tilt_at(losses, base, sup.max, mid).1;
        let gap = (kl - rho).abs();
        if gap < best_gap {
            best_gap = gap;
            best = mid;
        }
        if gap <= KL_TOLERANCE {
            break;
        }
        if kl < rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (weights, kl, log_normalizer) = tilt_at(losses, base, sup.max, best);
    let value = weights.iter().zip(losses).map(|(q, u)| q * u).sum();
    Ok(WorstCaseSolution {
        weights,
        tilt: best,
        kl,
        value,
        log_normalizer,
        constraint_active: true,
        boundary: false,
    })
}

/// Dual objective `λ·log Σ p_i exp(u_i/λ) + λρ`, evaluated stably.
pub fn dual_objective(losses: &[f64], base: &[f64], rho: f64, lambda: f64) -> f64 {
    let max = losses
        .iter()
        .zip(base)
        .filter(|(_, p)| **p > 0.0)
        .map(|(u, _)| *u)
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = losses.iter().map(|u| (u - max) / lambda).collect();
    max + lambda * (weighted_log_sum_exp(base, &shifted) + rho)
}

const GOLDEN: f64 = 0.618_033_988_749_894_8;

/// Dual risk `inf_{λ>0} { λ·log E_p[exp(u/λ)] + λρ }` by a log-spaced scan
/// for a bracket followed by golden-section search over `log λ`.
pub fn dual_risk(losses: &[f64], base: &[f64], rho: f64) -> Result<f64> {
    validate_problem(losses, base, rho)?;
    let sup = support(losses, base);
    if rho == 0.0 {
        return Ok(losses.iter().zip(base).map(|(u, p)| u * p).sum());
    }
    if sup.max == sup.min {
        return Ok(sup.max);
    }
    if rho >= -sup.top_mass.ln() {
        // The objective decreases all the way to λ → 0⁺, where it tends to max u.
        return Ok(sup.max);
    }
    let g = |t: f64| dual_objective(losses, base, rho, t.exp());
    let center = (sup.max - sup.min).ln();
    let (lo, hi, steps) = (center - 45.0, center + 45.0, 450);
    let grid: Vec<f64> = (0..=steps)
        .map(|k| lo + (hi - lo) * k as f64 / steps as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|&t| g(t)).collect();
    let best = (0..values.len())
        .min_by(|a, b| values[*a].total_cmp(&values[*b]))
        .expect("nonempty grid");
    if best == 0 || best == steps {
        return Err(Error::Bracketing { lo, hi });
    }
    let (mut a, mut b) = (grid[best - 1], grid[best + 1]);
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let (mut gc, mut gd) = (g(c), g(d));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-13 * (1.0 + a.abs()) {
            break;
        }
        if gc < gd {
            b = d;
            d = c;
            gd = gc;
            c = b - GOLDEN * (b - a);
            gc = g(c);
        } else {
            a = c;
            c = d;
            gc = gd;
            d = a + GOLDEN * (b - a);
            gd = g(d);
        }
    }
    Ok(gc.min(gd).min(values[best]))
}
