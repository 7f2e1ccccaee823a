//! Finitely supported complex laws with prescribed moments up to third
//! order, and the Gaussian-division step that precedes an OU evolution.
//!
//! `m_{i,j}(Z) = E[conj(Z)^i Z^j]`. A centered law with `m_{1,1} = 1` is
//! built from the origin and five lines through it: line `j` carries the
//! atoms `r_j ω_j` and `-r̂_j ω_j` (`|ω_j| = 1`) with weights chosen so that
//! the line is centered. Writing `B_j` for its `|Z|^2` mass and
//! `C_j = B_j (r_j - r̂_j)`, the line contributes `B_j`, `ω_j^2 B_j`,
//! `ω_j^3 C_j` and `ω_j C_j` to `m_{1,1}`, `m_{0,2}`, `m_{0,3}` and `m_{1,2}`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

use crate::math;

/// Upper bound on the number of atoms of a matched law.
pub const MAX_ATOMS: usize = 11;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MomentError {
    #[error("|m02| = {0} exceeds 1")]
    SecondMoment(f64),
    #[error("|m02| = 1 forces a law on one line, which needs m03 * conj(w)^3 = m12 * conj(w) real (w^2 = m02)")]
    Inconsistent,
    #[error("third-moment system is singular")]
    Singular,
    #[error("gamma = {0} outside (0, 1)")]
    Gamma(f64),
    #[error("invalid atomic law: {0}")]
    Invalid(&'static str),
    #[error("malformed record line {line}")]
    Record { line: usize },
}

/// A finitely supported law on `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicDistribution {
    points: Vec<Complex64>,
    weights: Vec<f64>,
}

impl AtomicDistribution {
    /// Validates the atoms: at most [`MAX_ATOMS`], weights `>= -1e-14`
    /// (clamped to zero) summing to one within `1e-12`, then renormalized.
    pub fn new(points: Vec<Complex64>, weights: Vec<f64>) -> Result<Self, MomentError> {
        if points.len() != weights.len() {
            return Err(MomentError::Invalid("points and weights differ in length"));
        }
        if points.is_empty() || points.len() > MAX_ATOMS {
            return Err(MomentError::Invalid("number of atoms outside 1..=11"));
        }
        if weights.iter().any(|w| !(*w >= -1e-14) || !w.is_finite()) {
            return Err(MomentError::Invalid("negative weight"));
        }
        if points.iter().any(|p| !p.re.is_finite() || !p.im.is_finite()) {
            return Err(MomentError::Invalid("non-finite atom"));
        }
        let weights: Vec<f64> = weights.into_iter().map(|w| w.max(0.0)).collect();
        let total: f64 = weights.iter().sum();
        if math::abs(total - 1.0) > 1e-12 {
            return Err(MomentError::Invalid("weights do not sum to one"));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { points, weights })
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `E[conj(Z)^i Z^j]`.
    pub fn moment(&self, i: u32, j: u32) -> Complex64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| z.conj().powu(i) * z.powu(j) * *w)
            .sum()
    }

    /// Draws an atom index from a uniform variate `u ∈ [0, 1)`.
    pub fn sample_index(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }

    /// One `re,im,weight` line per atom, each number with 17 significant digits.
    pub fn to_record(&self) -> String {
        let mut s = String::new();
        for (p, w) in self.points.iter().zip(&self.weights) {
            s.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", p.re, p.im, w));
        }
        s
    }

    pub fn from_record(record: &str) -> Result<Self, MomentError> {
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (line_no, line) in record.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse = |s: Option<&str>| -> Result<f64, MomentError> {
                s.and_then(|v| v.trim().parse::<f64>().ok())
                    .ok_or(MomentError::Record { line: line_no + 1 })
            };
            let mut it = line.split(',');
            let re = parse(it.next())?;
            let im = parse(it.next())?;
            let w = parse(it.next())?;
            if it.next().is_some() {
                return Err(MomentError::Record { line: line_no + 1 });
            }
            points.push(Complex64::new(re, im));
            weights.push(w);
        }
        Self::new(points, weights)
    }
}

/// Solves the 4x4 system `a x = b` by Gaussian elimination with partial
/// pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Result<[f64; 4], MomentError> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(math::abs(*v)));
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&i, &j| math::abs(a[i][col]).total_cmp(&math::abs(a[j][col])))
            .unwrap_or(col);
        if math::abs(a[piv][col]) <= 1e-12 * scale {
            return Err(MomentError::Singular);
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for c in col..4 {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let mut s = b[row];
        for c in row + 1..4 {
            s -= a[row][c] * x[c];
        }
        x[row] = s / a[row][row];
    }
    Ok(x)
}

/// Atoms of one centered line with `|Z|^2`-mass `b` and third-moment
/// coefficient `c`. The two radii satisfy `r r̂ = 1`, so the line's
/// probability mass equals `b`.
fn line_atoms(omega: Complex64, b: f64, c: f64, points: &mut Vec<Complex64>, weights: &mut Vec<f64>) {
    if b <= 0.0 {
        return;
    }
    let d = c / b;
    let s = math::sqrt(d * d + 4.0);
    let r = 0.5 * (s + d);
    let r_hat = 0.5 * (s - d);
    let mass = b / s;
    points.push(omega * r);
    weights.push(mass / r);
    points.push(-omega * r_hat);
    weights.push(mass / r_hat);
}

/// A law `Z` with `E Z = 0`, `E|Z|^2 = 1`, `E Z^2 = m02`, `E Z^3 = m03` and
/// `E|Z|^2 Z = m12`, supported on at most eleven points.
///
/// Lines `j = 1..4` sit at angles `jπ/4` and share the mass `1 - |m02|`
/// equally; the fifth line is aligned with `sqrt(m02)` and carries mass
/// `|m02|`. The four real third-moment coefficients of the first four lines
/// solve the two complex third-moment equations.
pub fn match_moments(m02: Complex64, m03: Complex64, m12: Complex64) -> Result<AtomicDistribution, MomentError> {
    let a02 = m02.norm();
    if a02 > 1.0 + 1e-14 {
        return Err(MomentError::SecondMoment(a02));
    }
    let a02 = a02.min(1.0);
    let omega5 = if a02 > 0.0 {
        Complex64::from_polar(1.0, 0.5 * m02.arg())
    } else {
        Complex64::new(1.0, 0.0)
    };
    let mut points = Vec::with_capacity(MAX_ATOMS);
    let mut weights = Vec::with_capacity(MAX_ATOMS);
    let b_side = (1.0 - a02) / 4.0;

    if b_side <= 1e-15 {
        // The law must live on the line through omega5.
        let c5 = m12 * omega5.conj();
        let c5_alt = m03 * omega5.conj().powu(3);
        let tol = 1e-12 * (1.0 + m12.norm() + m03.norm());
        if math::abs(c5.im) > tol || (c5 - c5_alt).norm() > tol {
            return Err(MomentError::Inconsistent);
        }
        line_atoms(omega5, 1.0, c5.re, &mut points, &mut weights);
        return AtomicDistribution::new(points, weights);
    }

    let omegas: Vec<Complex64> = (1..=4).map(|j| Complex64::from_polar(1.0, j as f64 * PI / 4.0)).collect();
    // rows: Re/Im of Σ ω_j^3 C_j = m03, Re/Im of Σ ω_j C_j = m12
    let mut a = [[0.0; 4]; 4];
    for (col, w) in omegas.iter().enumerate() {
        let w3 = w.powu(3);
        a[0][col] = w3.re;
        a[1][col] = w3.im;
        a[2][col] = w.re;
        a[3][col] = w.im;
    }
    let cs = solve4(a, [m03.re, m03.im, m12.re, m12.im])?;

    points.push(Complex64::new(0.0, 0.0));
    weights.push(0.0);
    for (w, c) in omegas.iter().zip(cs) {
        line_atoms(*w, b_side, c, &mut points, &mut weights);
    }
    line_atoms(omega5, a02, 0.0, &mut points, &mut weights);
    // the origin keeps whatever mass rounding leaves over
    let rest = 1.0 - weights.iter().sum::<f64>();
    weights[0] = rest.max(0.0);
    let (points, weights): (Vec<_>, Vec<_>) = points.into_iter().zip(weights).filter(|(_, w)| *w > 0.0).unzip();
    AtomicDistribution::new(points, weights)
}

/// Law of `Z'` such that `sqrt(1 - γ) Z' + sqrt(γ) ξ` has the prescribed
/// moments, `ξ` being a centered complex Gaussian with `E|ξ|^2 = 1` and
/// `E ξ^2 = m02`. Second moments pass through unchanged; the third moments
/// are divided by `(1 - γ)^{3/2}`.
pub fn gaussian_division(m02: Complex64, m03: Complex64, m12: Complex64, gamma: f64) -> Result<AtomicDistribution, MomentError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(MomentError::Gamma(gamma));
    }
    let f = math::powf(1.0 - gamma, 1.5);
    match_moments(m02, m03 / f, m12 / f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn check(law: &AtomicDistribution, m02: Complex64, m03: Complex64, m12: Complex64) {
        assert!(law.len() <= MAX_ATOMS);
        assert!((law.weights().iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(law.weights().iter().all(|w| *w >= -1e-14));
        // direct summation over the atoms
        let direct = |i: u32, j: u32| -> Complex64 {
            law.points()
                .iter()
                .zip(law.weights())
                .map(|(z, w)| {
                    let mut v = c(*w, 0.0);
                    for _ in 0..i {
                        v *= z.conj();
                    }
                    for _ in 0..j {
                        v *= z;
                    }
                    v
                })
                .sum()
        };
        assert!(direct(0, 1).norm() < 1e-10);
        assert!((direct(1, 1) - 1.0).norm() < 1e-10);
        assert!((direct(0, 2) - m02).norm() < 1e-10);
        assert!((direct(0, 3) - m03).norm() < 1e-10, "{} vs {m03}", direct(0, 3));
        assert!((direct(1, 2) - m12).norm() < 1e-10);
    }

    #[test]
    fn zero_moments() {
        let z = c(0.0, 0.0);
        let law = match_moments(z, z, z).unwrap();
        check(&law, z, z, z);
        let witness = AtomicDistribution::new(vec![c(1.0, 0.0), c(-1.0, 0.0), c(0.0, 1.0), c(0.0, -1.0)], vec![0.25; 4]).unwrap();
        for (i, j) in [(0, 1), (0, 2), (0, 3), (1, 2)] {
            assert!(witness.moment(i, j).norm() < 1e-15);
        }
    }

    #[test]
    fn real_line_law() {
        let law = match_moments(c(1.0, 0.0), c(0.7, 0.0), c(0.7, 0.0)).unwrap();
        check(&law, c(1.0, 0.0), c(0.7, 0.0), c(0.7, 0.0));
        assert!(law.points().iter().all(|p| p.im.abs() < 1e-10));
        // classical real two-point law with mean 0, variance 1, skewness s:
        // atoms (s ± sqrt(s^2 + 4)) / 2
        let s = 0.7f64;
        let top = (s + (s * s + 4.0).sqrt()) / 2.0;
        assert!(law.points().iter().any(|p| (p.re - top).abs() < 1e-12));
        assert!(matches!(match_moments(c(1.0, 0.0), c(0.7, 0.0), c(0.2, 0.0)), Err(MomentError::Inconsistent)));
    }

    #[test]
    fn rejects_large_second_moment() {
        assert!(matches!(match_moments(c(0.9, 0.9), c(0.0, 0.0), c(0.0, 0.0)), Err(MomentError::SecondMoment(_))));
    }

    #[test]
    fn gaussian_division_bookkeeping() {
        assert!(matches!(gaussian_division(c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), 1.0), Err(MomentError::Gamma(_))));
        let (m02, m03, m12) = (c(0.3, 0.1), c(0.2, -0.4), c(-0.1, 0.3));
        let law = gaussian_division(m02, m03, m12, 0.2).unwrap();
        let f = 0.8f64.powf(1.5);
        check(&law, m02, m03 / f, m12 / f);
        let g = gaussian_division(m02, c(0.0, 0.0), c(0.0, 0.0), 0.5).unwrap();
        assert!(g.moment(0, 3).norm() < 1e-12 && g.moment(1, 2).norm() < 1e-12);
        // small gamma barely changes the target
        let small = gaussian_division(m02, m03, m12, 1e-9).unwrap();
        assert!((small.moment(0, 3) - m03).norm() < 1e-8);
    }

    #[test]
    fn composition_matches_to_third_order() {
        // Z' scaled by sqrt(1-γ) plus an independent sqrt(γ) Gaussian: the
        // mixed moments follow from independence and vanishing odd Gaussian moments.
        let (m02, m03, m12) = (c(-0.2, 0.5), c(0.4, 0.4), c(0.1, -0.2));
        let gamma = 0.3;
        let law = gaussian_division(m02, m03, m12, gamma).unwrap();
        let a = (1.0 - gamma).sqrt();
        let total = |i: u32, j: u32| -> Complex64 {
            match (i, j) {
                (1, 1) => law.moment(1, 1) * a * a + gamma,
                (0, 2) => law.moment(0, 2) * a * a + m02 * gamma,
                (0, 3) => law.moment(0, 3) * a.powi(3),
                (1, 2) => law.moment(1, 2) * a.powi(3),
                _ => unreachable!(),
            }
        };
        assert!((total(1, 1) - 1.0).norm() < 1e-10);
        assert!((total(0, 2) - m02).norm() < 1e-10);
        assert!((total(0, 3) - m03).norm() < 1e-10);
        assert!((total(1, 2) - m12).norm() < 1e-10);
    }

    #[test]
    fn record_round_trip() {
        let law = match_moments(c(0.1, 0.2), c(0.3, 0.0), c(0.0, -0.5)).unwrap();
        let rec = law.to_record();
        assert_eq!(rec.lines().count(), law.len());
        let back = AtomicDistribution::from_record(&rec).unwrap();
        for (p, q) in law.points().iter().zip(back.points()) {
            assert!((p - q).norm() <= 1e-15 * p.norm().max(1.0));
        }
        assert!(matches!(AtomicDistribution::from_record("1,2\n"), Err(MomentError::Record { line: 1 })));
    }

    #[test]
    fn sample_index_partitions_unit_interval() {
        let law = AtomicDistribution::new(vec![c(1.0, 0.0), c(-1.0, 0.0)], vec![0.25, 0.75]).unwrap();
        assert_eq!(law.sample_index(0.1), 0);
        assert_eq!(law.sample_index(0.5), 1);
        assert_eq!(law.sample_index(0.999_999), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn random_admissible_targets(
            r in 0.0f64..0.999, phi in 0.0f64..(2.0 * PI),
            a in -3.0f64..3.0, b in -3.0f64..3.0, cc in -3.0f64..3.0, d in -3.0f64..3.0,
        ) {
            let m02 = Complex64::from_polar(r, phi);
            let law = match_moments(m02, c(a, b), c(cc, d)).unwrap();
            prop_assert!(law.len() <= MAX_ATOMS);
            prop_assert!(law.weights().iter().all(|w| *w >= 0.0));
            prop_assert!(law.moment(0, 1).norm() < 1e-10);
            prop_assert!((law.moment(1, 1) - 1.0).norm() < 1e-10);
            prop_assert!((law.moment(0, 2) - m02).norm() < 1e-10);
            prop_assert!((law.moment(0, 3) - c(a, b)).norm() < 1e-10);
            prop_assert!((law.moment(1, 2) - c(cc, d)).norm() < 1e-10);
        }
    }
}
