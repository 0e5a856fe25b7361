//! Central finite differences for checking analytic gradients over logit
//! tables.

use crate::policy::Table;

pub const FD_STEP: f64 = 1e-5;

/// Smallest denominator used by [`relative_error`].
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// `(f(θ + h·d) − f(θ − h·d)) / 2h`.
pub fn directional_difference<F>(mut f: F, at: &Table, direction: &Table, h: f64) -> f64
where
    F: FnMut(&Table) -> f64,
{
    let mut plus = at.clone();
    plus.add_scaled(h, direction);
    let mut minus = at.clone();
    minus.add_scaled(-h, direction);
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Full numerical gradient, one coordinate at a time.
pub fn numerical_gradient<F>(mut f: F, at: &Table, h: f64) -> Table
where
    F: FnMut(&Table) -> f64,
{
    let mut grad = Table::zeros(at.rows(), at.cols());
    let mut probe = at.clone();
    for k in 0..at.as_slice().len() {
        let base = probe.as_slice()[k];
        probe.as_mut_slice()[k] = base + h;
        let up = f(&probe);
        probe.as_mut_slice()[k] = base - h;
        let down = f(&probe);
        probe.as_mut_slice()[k] = base;
        grad.as_mut_slice()[k] = (up - down) / (2.0 * h);
    }
    grad
}

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    /// `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖, floor)` over the whole table.
    pub relative_error: f64,
    /// Largest coordinate-wise absolute difference.
    pub max_abs_error: f64,
}

pub fn check_gradient<F>(f: F, at: &Table, analytic: &Table, h: f64) -> GradientCheck
where
    F: FnMut(&Table) -> f64,
{
    let numeric = numerical_gradient(f, at, h);
    let mut diff = analytic.clone();
    diff.add_scaled(-1.0, &numeric);
    let max_abs_error = diff.as_slice().iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let scale = analytic.norm().max(numeric.norm()).max(RELATIVE_FLOOR);
    GradientCheck {
        relative_error: diff.norm() / scale,
        max_abs_error,
    }
}

/// Relative error of `⟨g, d⟩` against the directional difference along `d`.
pub fn check_direction<F>(f: F, at: &Table, analytic: &Table, direction: &Table, h: f64) -> f64
where
    F: FnMut(&Table) -> f64,
{
    relative_error(analytic.dot(direction), directional_difference(f, at, direction, h))
}
