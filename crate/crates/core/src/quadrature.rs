//! Adaptive Gauss-Legendre quadrature for complex-valued integrands on a
//! bounded interval.
//!
//! Each panel is integrated with an `n`-point rule and compared against the
//! same rule applied to its two halves; panels whose discrepancy exceeds the
//! local budget are bisected. The acceptance test is mixed absolute/relative:
//! a panel is accepted once
//! `|whole - halves| <= max(abs_tol * width / total_width, rel_tol * L1(panel))`,
//! where `L1(panel)` is the rule's estimate of `∫|f|` over the panel.

use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

use crate::math;

/// Failure modes of [`integrate_adaptive`].
#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum QuadratureError {
    #[error("interval [{0}, {1}] is empty or not finite")]
    BadInterval(f64, f64),
    #[error("panel budget of {0} exhausted before reaching tolerance")]
    PanelBudget(usize),
    #[error("integrand returned a non-finite value at x = {0}")]
    NonFinite(f64),
}

/// Nodes and weights of an `n`-point Gauss-Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Builds the rule by Newton iteration on the Legendre polynomial `P_n`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "a Gauss-Legendre rule needs at least one node");
        let mut nodes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            // Tricomi initial guess, refined by Newton.
            let mut x = math::cos(PI * (i as f64 + 0.75) / (n as f64 + 0.5));
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if math::abs(dx) < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            nodes.push(x);
            weights.push(2.0 / ((1.0 - x * x) * dp * dp));
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Integrates `f` over `[a, b]`, returning `(∫f, ∫|f|)`.
    fn panel<F>(&self, f: &F, a: f64, b: f64) -> Result<(Complex64, f64), QuadratureError>
    where
        F: Fn(f64) -> Complex64,
    {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut sum = Complex64::new(0.0, 0.0);
        let mut l1 = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            let t = mid + half * x;
            let v = f(t);
            if !(v.re.is_finite() && v.im.is_finite()) {
                return Err(QuadratureError::NonFinite(t));
            }
            sum += v * *w;
            l1 += v.norm() * *w;
        }
        Ok((sum * half, l1 * half))
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Tolerances for [`integrate_adaptive`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
    pub max_panels: usize,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            abs: 1e-11,
            rel: 1e-13,
            max_panels: 400_000,
        }
    }
}

/// Integrates `f` over `[a, b]`. Interior `breakpoints` (points where the
/// integrand is sharply peaked) seed the initial panel boundaries; points
/// outside `(a, b)` are ignored.
pub fn integrate_adaptive<F>(
    f: F,
    a: f64,
    b: f64,
    breakpoints: &[f64],
    rule: &GaussLegendre,
    tol: Tolerance,
) -> Result<Complex64, QuadratureError>
where
    F: Fn(f64) -> Complex64,
{
    if !(a.is_finite() && b.is_finite()) || b <= a {
        return Err(QuadratureError::BadInterval(a, b));
    }
    let total = b - a;

    let mut cuts: Vec<f64> = Vec::with_capacity(breakpoints.len() + 2);
    cuts.push(a);
    cuts.extend(breakpoints.iter().copied().filter(|p| *p > a && *p < b));
    cuts.push(b);
    cuts.sort_by(|x, y| x.total_cmp(y));
    cuts.dedup_by(|x, y| (*x - *y).abs() <= 1e-15 * total);

    let mut stack: Vec<(f64, f64, Complex64, f64)> = Vec::new();
    for w in cuts.windows(2) {
        let (v, l1) = rule.panel(&f, w[0], w[1])?;
        stack.push((w[0], w[1], v, l1));
    }

    let mut result = Complex64::new(0.0, 0.0);
    let mut panels = stack.len();
    while let Some((lo, hi, whole, l1)) = stack.pop() {
        let mid = 0.5 * (lo + hi);
        let (left, l1_left) = rule.panel(&f, lo, mid)?;
        let (right, l1_right) = rule.panel(&f, mid, hi)?;
        let halves = left + right;
        let budget = (tol.abs * (hi - lo) / total).max(tol.rel * l1.max(l1_left + l1_right));
        // Stop refining once the panel is too narrow to split in floating point.
        let degenerate = mid <= lo || mid >= hi || (hi - lo) <= 4.0 * f64::EPSILON * lo.abs().max(hi.abs());
        if (whole - halves).norm() <= budget || degenerate {
            result += halves;
            continue;
        }
        panels += 2;
        if panels > tol.max_panels {
            return Err(QuadratureError::PanelBudget(tol.max_panels));
        }
        stack.push((lo, mid, left, l1_left));
        stack.push((mid, hi, right, l1_right));
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_integrates_polynomials_exactly() {
        let rule = GaussLegendre::new(8);
        let s: f64 = rule.weights().iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
        // x^14 on [-1, 1] has integral 2/15; degree 2n-1 = 15 is exact.
        let v: f64 = rule
            .nodes()
            .iter()
            .zip(rule.weights())
            .map(|(x, w)| w * x.powi(14))
            .sum();
        assert!((v - 2.0 / 15.0).abs() < 1e-14);
    }

    #[test]
    fn adaptive_handles_sharp_lorentzian() {
        let rule = GaussLegendre::new(12);
        let eta = 1e-6;
        let f = |x: f64| Complex64::new(eta / (x * x + eta * eta), 0.0);
        let v = integrate_adaptive(f, -1.0, 1.0, &[0.0], &rule, Tolerance::default()).unwrap();
        let exact = 2.0 * (1.0 / eta).atan();
        assert!((v.re - exact).abs() < 1e-10 * exact, "{} vs {}", v.re, exact);
    }

    #[test]
    fn rejects_empty_interval() {
        let rule = GaussLegendre::new(4);
        let r = integrate_adaptive(|_| Complex64::new(1.0, 0.0), 1.0, 1.0, &[], &rule, Tolerance::default());
        assert_eq!(r, Err(QuadratureError::BadInterval(1.0, 1.0)));
    }
}
