//! Scalar analytic layer of the semicircle law.
//!
//! `m(z)` denotes the Stieltjes transform of `rho_sc(x) = sqrt(4 - x^2) / (2 pi)`,
//! i.e. the root of `m^2 + z m + 1 = 0` with `Im m * Im z > 0`. Iterated divided
//! differences are evaluated as integrals against `rho_sc` after the
//! substitution `x = 2 cos(theta)`, which turns `rho_sc(x) dx` into the smooth
//! weight `(2 / pi) sin^2(theta) d theta`.

use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

use crate::math;
use crate::quadrature::{self, GaussLegendre, QuadratureError, Tolerance};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticError {
    #[error("spectral parameter {0} lies on the real axis")]
    RealAxis(Complex64),
    #[error("empty spectral set")]
    EmptySet,
    #[error("{flags} Im-flags given for {points} spectral points")]
    FlagMismatch { points: usize, flags: usize },
    #[error("quantile index {i} outside 1..={n}")]
    QuantileRange { i: usize, n: usize },
    #[error("invalid eta(E) input: {0}")]
    EtaInput(&'static str),
    #[error("no eta <= 10 solves N eta rho(E + i eta) = N^eps for E = {energy}")]
    EtaAboveCap { energy: f64 },
    #[error("solution of the eta(E) equation lies below 1e-8 for E = {energy}")]
    EtaBelowFloor { energy: f64 },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// Stieltjes transform of the semicircle law.
///
/// Uses `m = -2 / (z + sqrt(z - 2) sqrt(z + 2))`, which is free of
/// cancellation for large `|z|`; the product of principal square roots has
/// its cut on `[-2, 2]` and behaves like `z` at infinity.
pub fn msc(z: Complex64) -> Result<Complex64, AnalyticError> {
    if z.im == 0.0 || !z.re.is_finite() || !z.im.is_finite() {
        return Err(AnalyticError::RealAxis(z));
    }
    let two = Complex64::new(2.0, 0.0);
    let s = (z - two).sqrt() * (z + two).sqrt();
    let mut m = -two / (z + s);
    if m.im * z.im <= 0.0 {
        // the other root of the quadratic
        m = m.inv();
    }
    Ok(m)
}

/// Density `rho_sc(x)`.
pub fn density(x: f64) -> f64 {
    let d = 4.0 - x * x;
    if d <= 0.0 {
        0.0
    } else {
        math::sqrt(d) / (2.0 * PI)
    }
}

/// Cumulative distribution function of the semicircle law.
pub fn cdf(x: f64) -> f64 {
    if x <= -2.0 {
        return 0.0;
    }
    if x >= 2.0 {
        return 1.0;
    }
    0.5 + x * math::sqrt(4.0 - x * x) / (4.0 * PI) + math::asin(0.5 * x) / PI
}

/// A spectral parameter together with the derived quantities
/// `eta = |Im z|`, `m = m_sc(z)` and `rho = |Im m| / pi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralPoint {
    pub z: Complex64,
    pub eta: f64,
    pub m: Complex64,
    pub rho: f64,
}

impl SpectralPoint {
    pub fn new(z: Complex64) -> Result<Self, AnalyticError> {
        let m = msc(z)?;
        Ok(Self {
            z,
            eta: math::abs(z.im),
            m,
            rho: math::abs(m.im) / PI,
        })
    }

    pub fn from_parts(energy: f64, eta: f64) -> Result<Self, AnalyticError> {
        Self::new(Complex64::new(energy, eta))
    }

    /// The point reflected across the real axis.
    pub fn conj(&self) -> Self {
        Self {
            z: self.z.conj(),
            eta: self.eta,
            m: self.m.conj(),
            rho: self.rho,
        }
    }

    /// Distance from `z` to the support `[-2, 2]`.
    pub fn dist_to_support(&self) -> f64 {
        let dx = if self.z.re > 2.0 {
            self.z.re - 2.0
        } else if self.z.re < -2.0 {
            -2.0 - self.z.re
        } else {
            0.0
        };
        math::sqrt(dx * dx + self.eta * self.eta)
    }
}

/// One factor of a divided-difference integrand: `1/(x - z)`, or its
/// imaginary part `Im 1/(x - z) = Im z / |x - z|^2` when `imag` is set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub z: Complex64,
    pub imag: bool,
}

impl Kernel {
    pub fn plain(z: Complex64) -> Self {
        Self { z, imag: false }
    }

    pub fn imag(z: Complex64) -> Self {
        Self { z, imag: true }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> Complex64 {
        let dx = x - self.z.re;
        let dy = self.z.im;
        let d2 = dx * dx + dy * dy;
        if self.imag {
            Complex64::new(dy / d2, 0.0)
        } else {
            Complex64::new(dx / d2, dy / d2)
        }
    }
}

/// Spectral points with a set of indices carrying the `Im` decoration.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedSpectralSet {
    points: Vec<SpectralPoint>,
    imag_flags: Vec<bool>,
}

impl IndexedSpectralSet {
    pub fn new(points: Vec<SpectralPoint>, imag_flags: Vec<bool>) -> Result<Self, AnalyticError> {
        if points.is_empty() {
            return Err(AnalyticError::EmptySet);
        }
        if points.len() != imag_flags.len() {
            return Err(AnalyticError::FlagMismatch {
                points: points.len(),
                flags: imag_flags.len(),
            });
        }
        Ok(Self { points, imag_flags })
    }

    /// All points undecorated.
    pub fn plain(points: Vec<SpectralPoint>) -> Result<Self, AnalyticError> {
        let flags = alloc::vec![false; points.len()];
        Self::new(points, flags)
    }

    pub fn points(&self) -> &[SpectralPoint] {
        &self.points
    }

    pub fn imag_flags(&self) -> &[bool] {
        &self.imag_flags
    }

    pub fn kernels(&self) -> Vec<Kernel> {
        self.points
            .iter()
            .zip(&self.imag_flags)
            .map(|(p, &imag)| Kernel { z: p.z, imag })
            .collect()
    }
}

/// `m^{(J)}[S] = ∫ rho_sc(x) ∏_{i∈J} Im(x - z_i)^{-1} ∏_{i∉J} (x - z_i)^{-1} dx`.
pub fn divided_difference(set: &IndexedSpectralSet) -> Result<Complex64, AnalyticError> {
    kernel_integral(&set.kernels())
}

/// Integral of `rho_sc` against the product of the given kernels.
///
/// Always evaluated by quadrature, so coincident and nearly coincident
/// points need no special treatment.
pub fn kernel_integral(kernels: &[Kernel]) -> Result<Complex64, AnalyticError> {
    if kernels.is_empty() {
        return Err(AnalyticError::EmptySet);
    }
    for k in kernels {
        if k.z.im == 0.0 {
            return Err(AnalyticError::RealAxis(k.z));
        }
    }
    let rule = GaussLegendre::new(12);
    let breaks: Vec<f64> = kernels
        .iter()
        .filter(|k| k.z.re > -2.0 && k.z.re < 2.0)
        .map(|k| math::acos(0.5 * k.z.re))
        .collect();
    let integrand = |theta: f64| {
        let s = math::sin(theta);
        let x = 2.0 * math::cos(theta);
        let mut acc = Complex64::new(2.0 / PI * s * s, 0.0);
        for k in kernels {
            acc *= k.eval(x);
        }
        acc
    };
    let v = quadrature::integrate_adaptive(integrand, 0.0, PI, &breaks, &rule, Tolerance::default())?;
    Ok(v)
}

/// The `i`-th `N`-quantile `gamma_i` of the semicircle law, `F_sc(gamma_i) = i / N`.
pub fn quantile(i: usize, n: usize) -> Result<f64, AnalyticError> {
    if n == 0 || i == 0 || i > n {
        return Err(AnalyticError::QuantileRange { i, n });
    }
    if i == n {
        return Ok(2.0);
    }
    let p = i as f64 / n as f64;
    Ok(invert_cdf(p))
}

/// Solves `F_sc(x) = p` in the angle variable `x = -2 cos(theta)`, where
/// `F_sc = (theta - sin(theta) cos(theta)) / pi` stays well conditioned near
/// the edges. Newton steps are safeguarded by bisection.
fn invert_cdf(p: f64) -> f64 {
    let target = PI * p;
    let g = |t: f64| t - math::sin(t) * math::cos(t) - target;
    let (mut lo, mut hi) = (0.0_f64, PI);
    let mut t = PI * p;
    let mut best = (f64::INFINITY, t);
    for _ in 0..200 {
        let f = g(t);
        if math::abs(f) < best.0 {
            best = (math::abs(f), t);
        }
        if f == 0.0 {
            break;
        }
        if f > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
        let s = math::sin(t);
        let d = 2.0 * s * s;
        let newton = t - f / d;
        t = if d > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    -2.0 * math::cos(best.1)
}

/// Solves `N eta rho(E + i eta) = N^epsilon` for `eta`.
///
/// The left side is strictly increasing in `eta` (it tends to `N / pi`), so
/// the root is unique when it exists. Bisection runs in log-scale on
/// `[1e-8, 10]` down to relative width `1e-10`.
pub fn eta_of_e(energy: f64, epsilon: f64, n: usize) -> Result<f64, AnalyticError> {
    if !(-2.0..=2.0).contains(&energy) {
        return Err(AnalyticError::EtaInput("energy must lie in [-2, 2]"));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(AnalyticError::EtaInput("epsilon must lie in (0, 1)"));
    }
    if n < 2 {
        return Err(AnalyticError::EtaInput("N must be at least 2"));
    }
    let nf = n as f64;
    let target = math::powf(nf, epsilon);
    let g = |eta: f64| -> Result<f64, AnalyticError> {
        let p = SpectralPoint::from_parts(energy, eta)?;
        Ok(nf * eta * p.rho - target)
    };
    let (mut lo, mut hi) = (1e-8_f64, 10.0_f64);
    if g(hi)? < 0.0 {
        return Err(AnalyticError::EtaAboveCap { energy });
    }
    if g(lo)? > 0.0 {
        return Err(AnalyticError::EtaBelowFloor { energy });
    }
    while hi / lo - 1.0 > 1e-10 {
        let mid = math::sqrt(lo * hi);
        if g(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(math::sqrt(lo * hi))
}

/// `count` points spaced geometrically from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count < 2 {
        return alloc::vec![lo];
    }
    let (a, b) = (math::ln(lo), math::ln(hi));
    (0..count)
        .map(|i| math::exp(a + (b - a) * i as f64 / (count - 1) as f64))
        .collect()
}
