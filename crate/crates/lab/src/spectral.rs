//! Resolvent chains evaluated through one eigendecomposition.
//!
//! With `W = U Λ U*`, every resolvent factor is diagonal in the eigenbasis,
//! `U* G(z) U = diag((λ_i - z)^{-1})`, and observables enter as
//! `Ã = U* A U`. Transposed factors become `V̄ D V` with `V = U^t U`.

use std::sync::Arc;

use ethlab_core::det_approx::{m_bound, ChainKind, ChainSpec, Decoration, DetApprox, DetError, ProductOracle, ResolventFactor};
use ethlab_core::matrix::{ComplexMatrix, ObservableMatrix};
use ethlab_core::semicircle::SpectralPoint;
use ethlab_core::Complex64;
use faer::{Mat, MatRef, Side};
use thiserror::Error;

use crate::ensembles::WignerMatrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpectralError {
    #[error("matrix is not Hermitian")]
    NotHermitian,
    #[error("eigensolver failed: {0}")]
    Eigensolver(String),
    #[error("dimension mismatch: decomposition {0}, chain {1}")]
    Dimension(usize, usize),
    #[error("expected an {0} chain")]
    WrongKind(&'static str),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("observable is zero")]
    ZeroObservable,
    #[error(transparent)]
    Det(#[from] DetError),
}

fn zero() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

pub fn to_faer(m: &ComplexMatrix) -> Mat<Complex64> {
    Mat::from_fn(m.dim(), m.dim(), |i, j| m[(i, j)])
}

pub fn from_faer(m: MatRef<'_, Complex64>) -> ComplexMatrix {
    ComplexMatrix::from_fn(m.nrows(), |i, j| m[(i, j)])
}

/// Ascending eigenvalues and the unitary matrix of column eigenvectors.
#[derive(Debug, Clone)]
pub struct EigenDecomp {
    lambdas: Vec<f64>,
    basis: Mat<Complex64>,
}

/// Eigendecomposition of an exactly Hermitian matrix.
pub fn eigendecompose(w: &WignerMatrix) -> Result<EigenDecomp, SpectralError> {
    eigendecompose_matrix(&w.entries)
}

pub fn eigendecompose_matrix(w: &ComplexMatrix) -> Result<EigenDecomp, SpectralError> {
    let n = w.dim();
    for i in 0..n {
        for j in i..n {
            if w[(i, j)] != w[(j, i)].conj() {
                return Err(SpectralError::NotHermitian);
            }
        }
    }
    let evd = to_faer(w)
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| SpectralError::Eigensolver(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    let lambdas: Vec<f64> = (0..n).map(|i| s[i].re).collect();
    if lambdas.iter().any(|l| !l.is_finite()) {
        return Err(SpectralError::Eigensolver("non-finite eigenvalue".into()));
    }
    Ok(EigenDecomp {
        lambdas,
        basis: evd.U().to_owned(),
    })
}

impl EigenDecomp {
    pub fn dim(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn basis(&self) -> MatRef<'_, Complex64> {
        self.basis.as_ref()
    }

    /// `Ã = U* A U`.
    pub fn rotate(&self, a: &ComplexMatrix) -> Mat<Complex64> {
        let a = to_faer(a);
        self.basis.adjoint() * &a * &self.basis
    }

    /// `U* x`.
    pub fn rotate_vector(&self, x: &[Complex64]) -> Vec<Complex64> {
        let n = self.dim();
        (0..n)
            .map(|i| (0..n).map(|a| self.basis[(a, i)].conj() * x[a]).sum())
            .collect()
    }

    /// `V = U^t U`, the eigenbasis image of the transposition.
    pub fn transpose_overlap(&self) -> Mat<Complex64> {
        self.basis.transpose() * &self.basis
    }

    /// `max_i ‖W u_i - λ_i u_i‖` over the columns `cols`.
    pub fn max_residual(&self, w: &ComplexMatrix, cols: impl IntoIterator<Item = usize>) -> f64 {
        let n = self.dim();
        let mut worst: f64 = 0.0;
        for c in cols {
            let u: Vec<Complex64> = (0..n).map(|a| self.basis[(a, c)]).collect();
            let wu = w.apply(&u);
            let r: f64 = wu
                .iter()
                .zip(&u)
                .map(|(x, y)| (x - y * self.lambdas[c]).norm_sqr())
                .sum();
            worst = worst.max(r.sqrt());
        }
        worst
    }

    /// `‖U* U - I‖_max`.
    pub fn unitarity_defect(&self) -> f64 {
        let g = self.basis.adjoint() * &self.basis;
        let n = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let d = if i == j { Complex64::new(1.0, 0.0) } else { zero() };
                worst = worst.max((g[(i, j)] - d).norm());
            }
        }
        worst
    }

    fn kernel(&self, f: &ResolventFactor) -> Vec<Complex64> {
        let z = f.point.z;
        self.lambdas
            .iter()
            .map(|&l| match f.decoration {
                Decoration::Plain | Decoration::Transpose => (Complex64::new(l, 0.0) - z).inv(),
                Decoration::Adjoint => (Complex64::new(l, 0.0) - z.conj()).inv(),
                Decoration::Imag | Decoration::ImagTranspose => {
                    Complex64::new(((Complex64::new(l, 0.0) - z).inv()).im, 0.0)
                }
            })
            .collect()
    }

    /// The factor in the eigenbasis: a diagonal, or `V̄ D V` for transposes.
    fn factor(&self, f: &ResolventFactor, v: &mut Option<Mat<Complex64>>) -> Factor {
        let d = self.kernel(f);
        if !f.decoration.is_transpose() {
            return Factor::Diagonal(d);
        }
        let v = v.get_or_insert_with(|| self.transpose_overlap());
        let n = self.dim();
        let dv = Mat::from_fn(n, n, |i, j| d[i] * v[(i, j)]);
        let vbar = Mat::from_fn(n, n, |i, j| v[(i, j)].conj());
        Factor::Dense(vbar * dv)
    }
}

enum Factor {
    Diagonal(Vec<Complex64>),
    Dense(Mat<Complex64>),
}

impl Factor {
    fn is_diagonal(&self) -> bool {
        matches!(self, Factor::Diagonal(_))
    }

    /// `self · rhs`
    fn left_mul(&self, rhs: MatRef<'_, Complex64>) -> Mat<Complex64> {
        match self {
            Factor::Diagonal(d) => Mat::from_fn(rhs.nrows(), rhs.ncols(), |i, j| d[i] * rhs[(i, j)]),
            Factor::Dense(m) => m * rhs,
        }
    }

    /// `lhs · self`
    fn right_mul(&self, lhs: MatRef<'_, Complex64>) -> Mat<Complex64> {
        match self {
            Factor::Diagonal(d) => Mat::from_fn(lhs.nrows(), lhs.ncols(), |i, j| lhs[(i, j)] * d[j]),
            Factor::Dense(m) => lhs * m,
        }
    }

    fn apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        match self {
            Factor::Diagonal(d) => d.iter().zip(v).map(|(a, b)| a * b).collect(),
            Factor::Dense(m) => mat_vec(m.as_ref(), v),
        }
    }
}

fn mat_vec(m: MatRef<'_, Complex64>, v: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![zero(); m.nrows()];
    for (j, vj) in v.iter().enumerate() {
        if *vj == zero() {
            continue;
        }
        let col = m.col(j);
        for (i, o) in out.iter_mut().enumerate() {
            *o += col[i] * vj;
        }
    }
    out
}

/// `⟨𝓖_1 Ã_1 𝓖_2 Ã_2 .. 𝓖_k Ã_k⟩` for pre-rotated observables, `Ã_k` closing.
pub fn contract_avg(decomp: &EigenDecomp, factors: &[ResolventFactor], rotated: &[MatRef<'_, Complex64>]) -> Complex64 {
    assert_eq!(factors.len(), rotated.len(), "one observable per factor");
    let n = decomp.dim();
    let nf = n as f64;
    let mut v = None;
    let fs: Vec<Factor> = factors.iter().map(|f| decomp.factor(f, &mut v)).collect();
    let diag = |f: &Factor| match f {
        Factor::Diagonal(d) => d.clone(),
        Factor::Dense(_) => unreachable!(),
    };
    match (fs.len(), fs.iter().all(Factor::is_diagonal)) {
        (1, true) => {
            let k1 = diag(&fs[0]);
            (0..n).map(|i| k1[i] * rotated[0][(i, i)]).sum::<Complex64>() / nf
        }
        (2, true) => {
            let (k1, k2) = (diag(&fs[0]), diag(&fs[1]));
            let (a1, a2) = (rotated[0], rotated[1]);
            let mut acc = zero();
            for i in 0..n {
                let mut row = zero();
                for j in 0..n {
                    row += a1[(i, j)] * k2[j] * a2[(j, i)];
                }
                acc += k1[i] * row;
            }
            acc / nf
        }
        (k, _) => {
            let mut p = fs[0].left_mul(rotated[0]);
            if k == 1 {
                return (0..n).map(|i| p[(i, i)]).sum::<Complex64>() / nf;
            }
            for (f, a) in fs[1..k - 1].iter().zip(&rotated[1..k - 1]) {
                p = f.right_mul(p.as_ref());
                p = &p * a;
            }
            p = fs[k - 1].right_mul(p.as_ref());
            let last = rotated[k - 1];
            let mut acc = zero();
            for i in 0..n {
                for j in 0..n {
                    acc += p[(i, j)] * last[(j, i)];
                }
            }
            acc / nf
        }
    }
}

/// `⟨x̃, 𝓖_1 Ã_1 .. Ã_k 𝓖_{k+1} ỹ⟩` for pre-rotated observables and vectors.
pub fn contract_iso(
    decomp: &EigenDecomp,
    factors: &[ResolventFactor],
    rotated: &[MatRef<'_, Complex64>],
    xt: &[Complex64],
    yt: &[Complex64],
) -> Complex64 {
    assert_eq!(factors.len(), rotated.len() + 1, "one observable between factors");
    let mut vcache = None;
    let mut v = yt.to_vec();
    for (i, f) in factors.iter().enumerate().rev() {
        v = decomp.factor(f, &mut vcache).apply(&v);
        if i > 0 {
            v = mat_vec(rotated[i - 1], &v);
        }
    }
    xt.iter().zip(&v).map(|(a, b)| a.conj() * b).sum()
}

/// Observables in the eigenbasis with their normalized traces of products
/// available to the deterministic approximation.
pub struct RotatedProducts<'a> {
    mats: Vec<MatRef<'a, Complex64>>,
}

impl<'a> RotatedProducts<'a> {
    pub fn new(mats: Vec<MatRef<'a, Complex64>>) -> Self {
        Self { mats }
    }
}

impl ProductOracle for RotatedProducts<'_> {
    fn dim(&self) -> usize {
        self.mats.first().map_or(0, |m| m.nrows())
    }

    fn trace_product(&self, slots: &[usize]) -> Complex64 {
        let n = self.dim();
        match slots.len() {
            0 => Complex64::new(1.0, 0.0),
            1 => {
                let a = self.mats[slots[0]];
                (0..n).map(|i| a[(i, i)]).sum::<Complex64>() / n as f64
            }
            m => {
                let mut p = self.mats[slots[0]].to_owned();
                for &s in &slots[1..m - 1] {
                    p = &p * self.mats[s];
                }
                let last = self.mats[slots[m - 1]];
                let mut acc = zero();
                for i in 0..n {
                    for j in 0..n {
                        acc += p[(i, j)] * last[(j, i)];
                    }
                }
                acc / n as f64
            }
        }
    }

    fn apply_product(&self, slots: &[usize], v: &[Complex64]) -> Vec<Complex64> {
        slots.iter().rev().fold(v.to_vec(), |acc, &s| mat_vec(self.mats[s], &acc))
    }
}

/// A chain value next to its deterministic approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainValue {
    pub value: Complex64,
    pub m_value: Complex64,
    /// `value - m_value`
    pub fluctuation: Complex64,
    /// `|fluctuation| / error_scale`
    pub normalized: f64,
    pub error_scale: f64,
}

impl ChainValue {
    fn new(value: Complex64, m_value: Complex64, error_scale: f64) -> Self {
        let fluctuation = value - m_value;
        Self {
            value,
            m_value,
            fluctuation,
            normalized: fluctuation.norm() / error_scale,
            error_scale,
        }
    }
}

/// Rotates each distinct observable of the chain once; `Arc` identity
/// decides distinctness.
pub fn rotate_observables(decomp: &EigenDecomp, obs: &[Arc<ObservableMatrix>]) -> Vec<Arc<Mat<Complex64>>> {
    let mut done: Vec<(*const ObservableMatrix, Arc<Mat<Complex64>>)> = Vec::new();
    obs.iter()
        .map(|o| {
            let key = Arc::as_ptr(o);
            if let Some((_, m)) = done.iter().find(|(k, _)| *k == key) {
                return m.clone();
            }
            let m = Arc::new(decomp.rotate(o.data()));
            done.push((key, m.clone()));
            m
        })
        .collect()
}

fn chain_observables(chain: &ChainSpec) -> Vec<Arc<ObservableMatrix>> {
    let mut v = chain.observables.clone();
    if let ChainKind::Averaged { closing } = &chain.kind {
        v.push(closing.clone());
    }
    v
}

fn check(decomp: &EigenDecomp, chain: &ChainSpec) -> Result<(), SpectralError> {
    chain.validate()?;
    if chain.dim() != decomp.dim() {
        return Err(SpectralError::Dimension(decomp.dim(), chain.dim()));
    }
    Ok(())
}

/// `⟨𝓖_1 A_1 .. 𝓖_k A_k⟩` against `⟨M_{[1,k]} A_k⟩`.
pub fn chain_avg(decomp: &EigenDecomp, chain: &ChainSpec) -> Result<ChainValue, SpectralError> {
    check(decomp, chain)?;
    let rotated = rotate_observables(decomp, &chain_observables(chain));
    chain_avg_rotated(decomp, chain, &rotated)
}

/// [`chain_avg`] with observables already rotated (closing one last).
pub fn chain_avg_rotated(
    decomp: &EigenDecomp,
    chain: &ChainSpec,
    rotated: &[Arc<Mat<Complex64>>],
) -> Result<ChainValue, SpectralError> {
    check(decomp, chain)?;
    if !chain.is_averaged() {
        return Err(SpectralError::WrongKind("averaged"));
    }
    let refs: Vec<MatRef<'_, Complex64>> = rotated.iter().map(|m| m.as_ref().as_ref()).collect();
    let value = contract_avg(decomp, &chain.factors, &refs);
    let m_value = DetApprox::new(&chain.factors)?.averaged(&RotatedProducts::new(refs));
    Ok(ChainValue::new(value, m_value, m_bound(chain)?.error_scale))
}

/// `⟨x, 𝓖_1 A_1 .. A_k 𝓖_{k+1} y⟩` against `⟨x, M_{[1,k+1]} y⟩`.
pub fn chain_iso(decomp: &EigenDecomp, chain: &ChainSpec) -> Result<ChainValue, SpectralError> {
    check(decomp, chain)?;
    let ChainKind::Isotropic { x, y } = &chain.kind else {
        return Err(SpectralError::WrongKind("isotropic"));
    };
    let rotated = rotate_observables(decomp, &chain.observables);
    let refs: Vec<MatRef<'_, Complex64>> = rotated.iter().map(|m| m.as_ref().as_ref()).collect();
    let (xt, yt) = (decomp.rotate_vector(x), decomp.rotate_vector(y));
    let value = contract_iso(decomp, &chain.factors, &refs, &xt, &yt);
    let m_value = DetApprox::new(&chain.factors)?.isotropic(&RotatedProducts::new(refs), &xt, &yt);
    Ok(ChainValue::new(value, m_value, m_bound(chain)?.error_scale))
}

/// `|η ⟨G G*⟩ - ⟨Im G⟩|` with `G = U D U*` assembled explicitly, so that the
/// left side uses all entries of `G` and the right side only its diagonal.
pub fn ward_residual(decomp: &EigenDecomp, z: &SpectralPoint) -> f64 {
    let n = decomp.dim();
    let d = decomp.kernel(&ResolventFactor::plain(*z));
    let u = decomp.basis();
    let ud = Mat::from_fn(n, n, |i, j| u[(i, j)] * d[j]);
    let g = &ud * u.adjoint();
    let mut frob = 0.0;
    let mut im_tr = 0.0;
    for i in 0..n {
        im_tr += g[(i, i)].im;
        for j in 0..n {
            frob += g[(i, j)].norm_sqr();
        }
    }
    let nf = n as f64;
    (z.z.im * frob / nf - im_tr / nf).abs()
}

/// `⟨Im G(z)⟩`.
pub fn mean_im_resolvent(decomp: &EigenDecomp, z: &SpectralPoint) -> f64 {
    let d = decomp.kernel(&ResolventFactor::imag(*z));
    d.iter().map(|v| v.re).sum::<f64>() / decomp.dim() as f64
}

/// Largest eigenvector overlap of the traceless part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EthStatistic {
    /// `√N max_{ij} |⟨u_i, A u_j⟩ - δ_ij ⟨A⟩| / ⟨|Å|^2⟩^{1/2}`
    pub statistic: f64,
    /// `max_{ij} |⟨u_i, A u_j⟩ - δ_ij ⟨A⟩|`
    pub max_overlap: f64,
    pub argmax: (usize, usize),
}

pub fn eth_statistic(decomp: &EigenDecomp, a: &ObservableMatrix) -> Result<EthStatistic, SpectralError> {
    let rotated = decomp.rotate(a.data());
    eth_statistic_rotated(decomp.dim(), rotated.as_ref(), a)
}

pub fn eth_statistic_rotated(n: usize, rotated: MatRef<'_, Complex64>, a: &ObservableMatrix) -> Result<EthStatistic, SpectralError> {
    if a.hs_norm() == 0.0 {
        return Err(SpectralError::ZeroObservable);
    }
    let hs = a.traceless_part().hs_norm();
    if hs == 0.0 {
        return Ok(EthStatistic {
            statistic: 0.0,
            max_overlap: 0.0,
            argmax: (0, 0),
        });
    }
    let mean = a.data().normalized_trace();
    let mut best = (0.0, (0, 0));
    for i in 0..n {
        for j in 0..n {
            let v = if i == j { rotated[(i, j)] - mean } else { rotated[(i, j)] };
            let v = v.norm();
            if v > best.0 {
                best = (v, (i, j));
            }
        }
    }
    Ok(EthStatistic {
        statistic: (n as f64).sqrt() * best.0 / hs,
        max_overlap: best.0,
        argmax: best.1,
    })
}

/// `|⟨u_i, A u_j⟩|^2`.
pub fn overlap_matrix(decomp: &EigenDecomp, a: &ObservableMatrix) -> Mat<f64> {
    let r = decomp.rotate(a.data());
    Mat::from_fn(r.nrows(), r.ncols(), |i, j| r[(i, j)].norm_sqr())
}

/// Empirical and predicted size of the fluctuation of `⟨G A G A⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceCheck {
    /// Sample standard deviation of the complex fluctuations.
    pub empirical: f64,
    /// `⟨A^2⟩ / (N η) + sqrt(ρ) ⟨A^4⟩^{1/2} / (N sqrt(η))`
    pub predicted: f64,
}

impl VarianceCheck {
    pub fn ratio(&self) -> f64 {
        self.empirical / self.predicted
    }
}

pub const MIN_VARIANCE_SAMPLES: usize = 100;

pub fn gue_variance_check(
    samples: &[ChainValue],
    n: usize,
    z: &SpectralPoint,
    a: &ObservableMatrix,
) -> Result<VarianceCheck, SpectralError> {
    if samples.len() < MIN_VARIANCE_SAMPLES {
        return Err(SpectralError::TooFewSamples {
            need: MIN_VARIANCE_SAMPLES,
            got: samples.len(),
        });
    }
    let count = samples.len() as f64;
    let mean: Complex64 = samples.iter().map(|s| s.fluctuation).sum::<Complex64>() / count;
    let var = samples.iter().map(|s| (s.fluctuation - mean).norm_sqr()).sum::<f64>() / (count - 1.0);
    let a2 = a.data().matmul(a.data());
    let a2_tr = a2.normalized_trace().re;
    let a4_tr = a2.normalized_trace_of_product(&a2).re;
    let nf = n as f64;
    let predicted = a2_tr / (nf * z.eta) + z.rho.sqrt() * a4_tr.max(0.0).sqrt() / (nf * z.eta.sqrt());
    Ok(VarianceCheck {
        empirical: var.sqrt(),
        predicted,
    })
}
