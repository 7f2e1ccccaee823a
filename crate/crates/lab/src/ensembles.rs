//! Wigner matrix sampling and the Ornstein-Uhlenbeck flow.
//!
//! Entries are `w_ab = N^{-1/2} χ_od` above the diagonal and
//! `w_aa = N^{-1/2} χ_d` on it, with `E χ_od = 0`, `E|χ_od|^2 = 1` and
//! `E χ_od^2 = σ`.

use ethlab_core::matrix::ComplexMatrix;
use ethlab_core::moments::AtomicDistribution;
use ethlab_core::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error("|sigma| = {0} must be < 1")]
    Sigma(f64),
    #[error("N = {0} must be at least 2")]
    Dimension(usize),
    #[error("t = {0} outside [0, 1]")]
    Time(f64),
    #[error("diagonal second moment {0} must be finite and >= 0")]
    DiagonalMoment(f64),
    #[error("atomic law: {0}")]
    Atomic(String),
}

/// Distribution family of one entry type.
#[derive(Debug, Clone, PartialEq)]
pub enum EntryLaw {
    Gaussian,
    /// Symmetric `±1` signs in place of the Gaussians.
    Rademacher,
    Atomic(AtomicDistribution),
}

impl EntryLaw {
    pub fn tag(&self) -> &'static str {
        match self {
            EntryLaw::Gaussian => "gaussian",
            EntryLaw::Rademacher => "rademacher",
            EntryLaw::Atomic(_) => "atomic",
        }
    }
}

/// Serializable description of an [`EntryLaw`]; atomic laws are given by
/// `(re, im, weight)` triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EntryLawSpec {
    Gaussian,
    Rademacher,
    Atomic { atoms: Vec<(f64, f64, f64)> },
}

impl EntryLawSpec {
    pub fn build(&self) -> Result<EntryLaw, EnsembleError> {
        Ok(match self {
            EntryLawSpec::Gaussian => EntryLaw::Gaussian,
            EntryLawSpec::Rademacher => EntryLaw::Rademacher,
            EntryLawSpec::Atomic { atoms } => {
                let points = atoms.iter().map(|a| Complex64::new(a.0, a.1)).collect();
                let weights = atoms.iter().map(|a| a.2).collect();
                EntryLaw::Atomic(AtomicDistribution::new(points, weights).map_err(|e| EnsembleError::Atomic(e.to_string()))?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleParams {
    pub n: usize,
    /// `E χ_od^2`
    pub sigma: Complex64,
    /// `E χ_d^2`
    pub diag_second_moment: f64,
    pub offdiag_law: EntryLaw,
    pub diag_law: EntryLaw,
    pub seed: u64,
}

impl EnsembleParams {
    pub fn gue(n: usize, seed: u64) -> Self {
        Self {
            n,
            sigma: Complex64::new(0.0, 0.0),
            diag_second_moment: 1.0,
            offdiag_law: EntryLaw::Gaussian,
            diag_law: EntryLaw::Gaussian,
            seed,
        }
    }

    /// Gaussian entries with `E χ_od^2 = σ` and `E χ_d^2 = 1 + Re σ`.
    pub fn gaussian(n: usize, sigma: Complex64, seed: u64) -> Self {
        Self {
            sigma,
            diag_second_moment: 1.0 + sigma.re,
            ..Self::gue(n, seed)
        }
    }

    /// Off-diagonal entries drawn from `law`; `σ` is read off the law.
    pub fn atomic(n: usize, law: AtomicDistribution, seed: u64) -> Self {
        Self {
            sigma: law.moment(0, 2),
            offdiag_law: EntryLaw::Atomic(law),
            ..Self::gue(n, seed)
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.n < 2 {
            return Err(EnsembleError::Dimension(self.n));
        }
        let s = self.sigma.norm();
        if !(s < 1.0) {
            return Err(EnsembleError::Sigma(s));
        }
        let d = self.diag_second_moment;
        if !(d.is_finite() && d >= 0.0) {
            return Err(EnsembleError::DiagonalMoment(d));
        }
        if let EntryLaw::Atomic(law) = &self.offdiag_law {
            let tol = 1e-10;
            if law.moment(0, 1).norm() > tol {
                return Err(EnsembleError::Atomic("off-diagonal law is not centered".into()));
            }
            if (law.moment(1, 1).re - 1.0).abs() > tol {
                return Err(EnsembleError::Atomic("off-diagonal law needs E|χ|^2 = 1".into()));
            }
            if (law.moment(0, 2) - self.sigma).norm() > tol {
                return Err(EnsembleError::Atomic("E χ^2 of the law differs from sigma".into()));
            }
        }
        if let EntryLaw::Atomic(law) = &self.diag_law {
            let tol = 1e-10;
            if law.points().iter().any(|p| p.im != 0.0) {
                return Err(EnsembleError::Atomic("diagonal law must be real".into()));
            }
            if law.moment(0, 1).norm() > tol {
                return Err(EnsembleError::Atomic("diagonal law is not centered".into()));
            }
            if (law.moment(0, 2).re - d).abs() > tol {
                return Err(EnsembleError::Atomic("diagonal law second moment differs".into()));
            }
        }
        Ok(())
    }
}

/// A Hermitian sample; `entries` is exactly equal to its conjugate transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct WignerMatrix {
    pub entries: ComplexMatrix,
    pub params: EnsembleParams,
}

impl WignerMatrix {
    pub fn dim(&self) -> usize {
        self.entries.dim()
    }

    pub fn is_hermitian(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (i..n).all(|j| self.entries[(i, j)] == self.entries[(j, i)].conj()))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// `seed ⊕ hash(parts)`: independent streams for every task index tuple.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let h = parts.iter().fold(0x6a09_e667_f3bc_c909_u64, |h, &p| splitmix64(h ^ p));
    seed ^ h
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn sign(rng: &mut impl Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// `χ = e^{iφ/2} (a X + i b Y)` with `a^2 = (1 + |σ|)/2`, `b^2 = (1 - |σ|)/2`
/// and `φ = arg σ`, so that `E|χ|^2 = 1` and `E χ^2 = σ`.
fn offdiag_entry(law: &EntryLaw, sigma: Complex64, rng: &mut impl Rng) -> Complex64 {
    let shaped = |x: f64, y: f64| {
        let s = sigma.norm();
        let a = ((1.0 + s) / 2.0).sqrt();
        let b = ((1.0 - s) / 2.0).sqrt();
        Complex64::from_polar(1.0, 0.5 * sigma.arg()) * Complex64::new(a * x, b * y)
    };
    match law {
        EntryLaw::Gaussian => {
            let (x, y) = (normal(rng), normal(rng));
            shaped(x, y)
        }
        EntryLaw::Rademacher => {
            let (x, y) = (sign(rng), sign(rng));
            shaped(x, y)
        }
        EntryLaw::Atomic(d) => d.points()[d.sample_index(rng.random::<f64>())],
    }
}

fn diag_entry(law: &EntryLaw, second_moment: f64, rng: &mut impl Rng) -> f64 {
    match law {
        EntryLaw::Gaussian => second_moment.sqrt() * normal(rng),
        EntryLaw::Rademacher => second_moment.sqrt() * sign(rng),
        EntryLaw::Atomic(d) => d.points()[d.sample_index(rng.random::<f64>())].re,
    }
}

fn fill_hermitian(
    n: usize,
    rng: &mut impl Rng,
    offdiag_law: &EntryLaw,
    sigma: Complex64,
    diag_law: &EntryLaw,
    diag_moment: f64,
) -> ComplexMatrix {
    let scale = 1.0 / (n as f64).sqrt();
    let mut m = ComplexMatrix::zeros(n);
    for a in 0..n {
        let d = diag_entry(diag_law, diag_moment, rng);
        m[(a, a)] = Complex64::new(scale * d, 0.0);
        for b in a + 1..n {
            let w = offdiag_entry(offdiag_law, sigma, rng) * scale;
            m[(a, b)] = w;
            m[(b, a)] = w.conj();
        }
    }
    m
}

/// One draw, deterministic in `params.seed`. Entries are filled row by row
/// over the upper triangle.
pub fn sample_wigner(params: &EnsembleParams) -> Result<WignerMatrix, EnsembleError> {
    params.validate()?;
    let mut rng = rng_from_seed(params.seed);
    let entries = fill_hermitian(
        params.n,
        &mut rng,
        &params.offdiag_law,
        params.sigma,
        &params.diag_law,
        params.diag_second_moment,
    );
    Ok(WignerMatrix {
        entries,
        params: params.clone(),
    })
}

/// Second moments `(E ξ_od^2, E ξ_d^2)` of the Gaussian driving the flow:
/// `(σ, 1 + σ)` for real `σ`, `(0, 1)` otherwise.
pub fn ou_noise_moments(sigma: Complex64) -> (Complex64, f64) {
    if sigma.im == 0.0 {
        (sigma, 1.0 + sigma.re)
    } else {
        (Complex64::new(0.0, 0.0), 1.0)
    }
}

/// A sample of `W_t = e^{-t/2} W_0 + sqrt(1 - e^{-t}) Ξ` with an independent
/// Gaussian Wigner matrix `Ξ` drawn from `seed`.
pub fn ou_evolve(w0: &WignerMatrix, t: f64, seed: u64) -> Result<WignerMatrix, EnsembleError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(EnsembleError::Time(t));
    }
    if t == 0.0 {
        return Ok(w0.clone());
    }
    let n = w0.dim();
    let (s_xi, d_xi) = ou_noise_moments(w0.params.sigma);
    let mut rng = rng_from_seed(seed);
    let xi = fill_hermitian(n, &mut rng, &EntryLaw::Gaussian, s_xi, &EntryLaw::Gaussian, d_xi);
    let decay = (-0.5 * t).exp();
    let gamma = 1.0 - (-t).exp();
    let noise = gamma.sqrt();
    let mut entries = ComplexMatrix::zeros(n);
    for a in 0..n {
        let v = w0.entries[(a, a)].re * decay + xi[(a, a)].re * noise;
        entries[(a, a)] = Complex64::new(v, 0.0);
        for b in a + 1..n {
            let v = w0.entries[(a, b)] * decay + xi[(a, b)] * noise;
            entries[(a, b)] = v;
            entries[(b, a)] = v.conj();
        }
    }
    let mut params = w0.params.clone();
    params.sigma = w0.params.sigma * (1.0 - gamma) + s_xi * gamma;
    params.diag_second_moment = w0.params.diag_second_moment * (1.0 - gamma) + d_xi * gamma;
    Ok(WignerMatrix { entries, params })
}
