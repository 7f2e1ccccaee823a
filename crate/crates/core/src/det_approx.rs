//! Deterministic approximation of resolvent chains
//! `G_1 B_1 G_2 ... B_{k-1} G_k`, where some `G_j` may be replaced by `Im G_j`.
//!
//! ```text
//! M(z_1, B_1, .., B_{k-1}, z_k; J) = Σ_{π ∈ NC(k)} pTr_{K(π)}(B_1, .., B_{k-1}) ∏_{S ∈ π} m_∘^{(J)}[S]
//! ```
//!
//! The partial trace multiplies the normalized traces `⟨∏_{j∈S} B_j⟩` of the
//! Kreweras blocks not containing `k` with the matrix product over the block
//! containing `k` (with `k` itself removed).

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;
use thiserror::Error;

use crate::math;
use crate::matrix::{inner, vector_norm, ComplexMatrix, ObservableMatrix};
use crate::nc::{self, CumulantTable, NcError, NcPartition};
use crate::semicircle::{self, AnalyticError, Kernel, SpectralPoint};

/// Longest chain (number of resolvents) accepted by the partition sum.
pub const MAX_CHAIN: usize = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetError {
    #[error("chain with {0} resolvents outside 1..={MAX_CHAIN}")]
    ChainLength(usize),
    #[error("inconsistent chain: {0}")]
    Shape(&'static str),
    #[error("vector norm {0} differs from 1")]
    NotUnit(f64),
    #[error("operation needs an {0} chain")]
    WrongKind(&'static str),
    #[error("spectral parameter with non-positive eta")]
    NonPositiveEta,
    #[error(transparent)]
    Analytic(#[from] AnalyticError),
    #[error(transparent)]
    Nc(#[from] NcError),
}

/// How a resolvent enters the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decoration {
    /// `G(z)`
    Plain,
    /// `Im G(z) = (G(z) - G(z)*) / 2i`
    Imag,
    /// `G(z)* = G(z̄)`
    Adjoint,
    /// `G(z)^t`
    Transpose,
    /// `Im G(z)^t`
    ImagTranspose,
}

impl Decoration {
    pub fn is_imag(self) -> bool {
        matches!(self, Decoration::Imag | Decoration::ImagTranspose)
    }

    pub fn is_transpose(self) -> bool {
        matches!(self, Decoration::Transpose | Decoration::ImagTranspose)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolventFactor {
    pub point: SpectralPoint,
    pub decoration: Decoration,
}

impl ResolventFactor {
    pub fn new(point: SpectralPoint, decoration: Decoration) -> Self {
        Self { point, decoration }
    }

    pub fn plain(point: SpectralPoint) -> Self {
        Self::new(point, Decoration::Plain)
    }

    pub fn imag(point: SpectralPoint) -> Self {
        Self::new(point, Decoration::Imag)
    }

    /// The spectral point and `Im` flag seen by the scalar approximation.
    /// Transposition does not change the semicircle kernel.
    pub fn effective(&self) -> (SpectralPoint, bool) {
        match self.decoration {
            Decoration::Adjoint => (self.point.conj(), false),
            d => (self.point, d.is_imag()),
        }
    }

    /// `Im m` for `Im`-decorated factors, `m` otherwise.
    pub fn leading_scalar(&self) -> Complex64 {
        let (p, imag) = self.effective();
        if imag {
            Complex64::new(p.m.im, 0.0)
        } else {
            p.m
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChainKind {
    /// `⟨G_1 B_1 .. G_k A_k⟩` with closing observable `A_k`.
    Averaged { closing: Arc<ObservableMatrix> },
    /// `⟨x, G_1 B_1 .. B_k G_{k+1} y⟩`.
    Isotropic { x: Vec<Complex64>, y: Vec<Complex64> },
}

/// A resolvent chain: `factors.len() == observables.len() + 1` in both forms.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec {
    pub factors: Vec<ResolventFactor>,
    pub observables: Vec<Arc<ObservableMatrix>>,
    pub kind: ChainKind,
}

impl ChainSpec {
    pub fn averaged(
        factors: Vec<ResolventFactor>,
        observables: Vec<Arc<ObservableMatrix>>,
        closing: Arc<ObservableMatrix>,
    ) -> Result<Self, DetError> {
        let c = Self {
            factors,
            observables,
            kind: ChainKind::Averaged { closing },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn isotropic(
        factors: Vec<ResolventFactor>,
        observables: Vec<Arc<ObservableMatrix>>,
        x: Vec<Complex64>,
        y: Vec<Complex64>,
    ) -> Result<Self, DetError> {
        let c = Self {
            factors,
            observables,
            kind: ChainKind::Isotropic { x, y },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), DetError> {
        if self.factors.is_empty() || self.factors.len() > MAX_CHAIN {
            return Err(DetError::ChainLength(self.factors.len()));
        }
        if self.observables.len() + 1 != self.factors.len() {
            return Err(DetError::Shape("need exactly one observable between consecutive resolvents"));
        }
        if self.factors.iter().any(|f| f.point.eta <= 0.0) {
            return Err(DetError::NonPositiveEta);
        }
        let n = self.dim();
        if self.observables.iter().any(|o| o.dim() != n) {
            return Err(DetError::Shape("observable dimensions differ"));
        }
        match &self.kind {
            ChainKind::Averaged { closing } => {
                if closing.dim() != n {
                    return Err(DetError::Shape("closing observable dimension differs"));
                }
            }
            ChainKind::Isotropic { x, y } => {
                if x.len() != n || y.len() != n {
                    return Err(DetError::Shape("vector dimension differs"));
                }
                for v in [x, y] {
                    let nv = vector_norm(v);
                    if math::abs(nv - 1.0) > 1e-12 {
                        return Err(DetError::NotUnit(nv));
                    }
                }
            }
        }
        Ok(())
    }

    /// Matrix dimension `N`.
    pub fn dim(&self) -> usize {
        match (&self.kind, self.observables.first()) {
            (_, Some(o)) => o.dim(),
            (ChainKind::Averaged { closing }, None) => closing.dim(),
            (ChainKind::Isotropic { x, .. }, None) => x.len(),
        }
    }

    pub fn is_averaged(&self) -> bool {
        matches!(self.kind, ChainKind::Averaged { .. })
    }

    /// All observables of the chain, including the closing one of the
    /// averaged form.
    pub fn all_observables(&self) -> Vec<&ObservableMatrix> {
        let mut v: Vec<&ObservableMatrix> = self.observables.iter().map(|o| o.as_ref()).collect();
        if let ChainKind::Averaged { closing } = &self.kind {
            v.push(closing.as_ref());
        }
        v
    }

    pub fn imag_set(&self) -> Vec<usize> {
        self.factors
            .iter()
            .enumerate()
            .filter(|(_, f)| f.decoration.is_imag())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Products of observables, addressed by slot index.
///
/// Slots are always passed in increasing order.
pub trait ProductOracle {
    fn dim(&self) -> usize;

    /// `⟨B_{s_1} B_{s_2} ..⟩`; the empty product is the identity.
    fn trace_product(&self, slots: &[usize]) -> Complex64;

    /// `B_{s_1} B_{s_2} .. v`.
    fn apply_product(&self, slots: &[usize], v: &[Complex64]) -> Vec<Complex64>;
}

/// [`ProductOracle`] backed by dense [`ComplexMatrix`] values.
pub struct DenseProducts<'a> {
    mats: Vec<&'a ComplexMatrix>,
}

impl<'a> DenseProducts<'a> {
    pub fn new(mats: Vec<&'a ComplexMatrix>) -> Self {
        Self { mats }
    }

    pub fn product(&self, slots: &[usize], n: usize) -> ComplexMatrix {
        let mut it = slots.iter();
        match it.next() {
            None => ComplexMatrix::identity(n),
            Some(&first) => it.fold(self.mats[first].clone(), |acc, &s| acc.matmul(self.mats[s])),
        }
    }
}

impl ProductOracle for DenseProducts<'_> {
    fn dim(&self) -> usize {
        self.mats.first().map_or(0, |m| m.dim())
    }

    fn trace_product(&self, slots: &[usize]) -> Complex64 {
        match slots.len() {
            0 => Complex64::new(1.0, 0.0),
            1 => self.mats[slots[0]].normalized_trace(),
            m => {
                let head = self.product(&slots[..m - 1], self.dim());
                head.normalized_trace_of_product(self.mats[slots[m - 1]])
            }
        }
    }

    fn apply_product(&self, slots: &[usize], v: &[Complex64]) -> Vec<Complex64> {
        slots.iter().rev().fold(v.to_vec(), |acc, &s| self.mats[s].apply(&acc))
    }
}

/// One term of the partition sum.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionTerm {
    pub pi: NcPartition,
    pub kreweras: NcPartition,
    /// `∏_{S ∈ π} m_∘^{(J)}[S]`
    pub weight: Complex64,
}

/// Scalar part of the deterministic approximation for fixed spectral data:
/// the free-cumulant table and the partition weights, reusable across
/// observables.
#[derive(Debug, Clone)]
pub struct DetApprox {
    k: usize,
    moments: CumulantTable,
    cumulants: CumulantTable,
    terms: Vec<PartitionTerm>,
}

fn mask_of(block: &[usize]) -> u32 {
    block.iter().fold(0u32, |m, &i| m | (1 << i))
}

impl DetApprox {
    pub fn new(factors: &[ResolventFactor]) -> Result<Self, DetError> {
        let k = factors.len();
        if k == 0 || k > MAX_CHAIN {
            return Err(DetError::ChainLength(k));
        }
        let kernels: Vec<Kernel> = factors
            .iter()
            .map(|f| {
                let (p, imag) = f.effective();
                Kernel { z: p.z, imag }
            })
            .collect();
        let moments = CumulantTable::try_from_fn(k, |mask| {
            let sub: Vec<Kernel> = (0..k).filter(|i| mask & (1 << i) != 0).map(|i| kernels[i]).collect();
            semicircle::kernel_integral(&sub)
        })??;
        let cumulants = nc::free_cumulants(&moments)?;
        let mut terms = Vec::new();
        for pi in nc::enumerate_nc(k)? {
            let mut weight = Complex64::new(1.0, 0.0);
            for b in pi.blocks() {
                weight *= cumulants.get(mask_of(b)).ok_or(NcError::IncompleteTable { k, mask: mask_of(b) })?;
            }
            let kreweras = nc::kreweras(&pi);
            terms.push(PartitionTerm { pi, kreweras, weight });
        }
        Ok(Self {
            k,
            moments,
            cumulants,
            terms,
        })
    }

    /// Number of resolvents.
    pub fn k(&self) -> usize {
        self.k
    }

    /// `m^{(J)}[S]` for all subsets.
    pub fn moments(&self) -> &CumulantTable {
        &self.moments
    }

    /// `m_∘^{(J)}[S]` for all subsets.
    pub fn cumulants(&self) -> &CumulantTable {
        &self.cumulants
    }

    pub fn terms(&self) -> &[PartitionTerm] {
        &self.terms
    }

    /// `⟨M B_k⟩` where the oracle holds `B_1, .., B_k` in slots `0..k`.
    pub fn averaged(&self, oracle: &impl ProductOracle) -> Complex64 {
        self.averaged_terms(oracle).into_iter().sum()
    }

    /// Contribution of each partition (in [`Self::terms`] order) to
    /// [`Self::averaged`].
    pub fn averaged_terms(&self, oracle: &impl ProductOracle) -> Vec<Complex64> {
        let mut cache: Vec<Option<Complex64>> = vec![None; 1 << self.k];
        self.terms
            .iter()
            .map(|t| {
                let mut v = t.weight;
                for b in t.kreweras.blocks() {
                    let key = mask_of(b) as usize;
                    let tr = *cache[key].get_or_insert_with(|| oracle.trace_product(b));
                    v *= tr;
                }
                v
            })
            .collect()
    }

    /// `⟨x, M y⟩` where the oracle holds `B_1, .., B_{k-1}` in slots `0..k-1`.
    pub fn isotropic(&self, oracle: &impl ProductOracle, x: &[Complex64], y: &[Complex64]) -> Complex64 {
        self.isotropic_terms(oracle, x, y).into_iter().sum()
    }

    pub fn isotropic_terms(&self, oracle: &impl ProductOracle, x: &[Complex64], y: &[Complex64]) -> Vec<Complex64> {
        let last = self.k - 1;
        let mut traces: Vec<Option<Complex64>> = vec![None; 1 << self.k];
        let mut sandwiches: Vec<Option<Complex64>> = vec![None; 1 << self.k];
        self.terms
            .iter()
            .map(|t| {
                let mut v = t.weight;
                for b in t.kreweras.blocks() {
                    let key = mask_of(b) as usize;
                    if b.contains(&last) {
                        let open = &b[..b.len() - 1];
                        v *= *sandwiches[key].get_or_insert_with(|| inner(x, &oracle.apply_product(open, y)));
                    } else {
                        v *= *traces[key].get_or_insert_with(|| oracle.trace_product(b));
                    }
                }
                v
            })
            .collect()
    }

    /// The full matrix `M` for `B_1, .., B_{k-1}` of dimension `n`.
    pub fn matrix(&self, observables: &[&ComplexMatrix], n: usize) -> ComplexMatrix {
        let last = self.k - 1;
        let dense = DenseProducts::new(observables.to_vec());
        let mut out = ComplexMatrix::zeros(n);
        for t in &self.terms {
            let mut scalar = t.weight;
            let mut open: &[usize] = &[];
            for b in t.kreweras.blocks() {
                if b.contains(&last) {
                    open = &b[..b.len() - 1];
                } else {
                    scalar *= dense.trace_product(b);
                }
            }
            out = out.add(&dense.product(open, n).scale(scalar));
        }
        out
    }
}

/// `pTr_κ(B_1, .., B_{k-1})` for a partition `κ` of `{0, .., k-1}`.
pub fn partial_trace(kappa: &NcPartition, matrices: &[&ComplexMatrix]) -> Result<ComplexMatrix, DetError> {
    let k = kappa.k();
    if matrices.len() + 1 != k {
        return Err(DetError::Shape("partial trace needs k - 1 matrices"));
    }
    let n = match matrices.first() {
        Some(m) => m.dim(),
        None => 1,
    };
    if matrices.iter().any(|m| m.dim() != n) {
        return Err(DetError::Shape("matrix dimensions differ"));
    }
    let dense = DenseProducts::new(matrices.to_vec());
    let mut scalar = Complex64::new(1.0, 0.0);
    let mut open: &[usize] = &[];
    for b in kappa.blocks() {
        if b.contains(&(k - 1)) {
            open = &b[..b.len() - 1];
        } else {
            scalar *= dense.trace_product(b);
        }
    }
    Ok(dense.product(open, n).scale(scalar))
}

/// The matrix `M_{[1,k]}` built from the chain's resolvents and its
/// observables `B_1, .., B_{k-1}` (the closing observable of an averaged
/// chain is not part of `M`).
pub fn m_det(chain: &ChainSpec) -> Result<ComplexMatrix, DetError> {
    chain.validate()?;
    let d = DetApprox::new(&chain.factors)?;
    let mats: Vec<&ComplexMatrix> = chain.observables.iter().map(|o| o.data()).collect();
    Ok(d.matrix(&mats, chain.dim()))
}

/// `⟨M_{[1,k]} A_k⟩`.
pub fn m_det_avg(chain: &ChainSpec) -> Result<Complex64, DetError> {
    chain.validate()?;
    if !chain.is_averaged() {
        return Err(DetError::WrongKind("averaged"));
    }
    let d = DetApprox::new(&chain.factors)?;
    let mats: Vec<&ComplexMatrix> = chain.all_observables().into_iter().map(|o| o.data()).collect();
    Ok(d.averaged(&DenseProducts::new(mats)))
}

/// `⟨x, M_{[1,k+1]} y⟩`.
pub fn m_det_iso(chain: &ChainSpec) -> Result<Complex64, DetError> {
    chain.validate()?;
    let ChainKind::Isotropic { x, y } = &chain.kind else {
        return Err(DetError::WrongKind("isotropic"));
    };
    let d = DetApprox::new(&chain.factors)?;
    let mats: Vec<&ComplexMatrix> = chain.observables.iter().map(|o| o.data()).collect();
    Ok(d.isotropic(&DenseProducts::new(mats), x, y))
}

/// The singleton-partition term
/// `(∏_{i∈J} Im m_i)(∏_{i∉J} m_i) ⟨A_1 .. A_k⟩` (or `⟨x, A_1 .. A_k y⟩`).
pub fn leading_term(chain: &ChainSpec) -> Result<Complex64, DetError> {
    chain.validate()?;
    let scalar: Complex64 = chain.factors.iter().map(|f| f.leading_scalar()).product();
    let all = chain.all_observables();
    let mats: Vec<&ComplexMatrix> = all.iter().map(|o| o.data()).collect();
    let dense = DenseProducts::new(mats);
    let slots: Vec<usize> = (0..all.len()).collect();
    let value = match &chain.kind {
        ChainKind::Averaged { .. } => dense.trace_product(&slots),
        ChainKind::Isotropic { x, y } => inner(x, &dense.apply_product(&slots, y)),
    };
    Ok(scalar * value)
}

/// Size bounds of the deterministic approximation and of the fluctuation
/// around it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    /// `min_j η_j (ρ_j + 1(j ∉ J))`
    pub ell: f64,
    /// `min_j η_j ρ_j`
    pub ell_hat: f64,
    pub m_bound: f64,
    pub error_scale: f64,
    /// `N ℓ < 1`: the bounds are outside their range of validity.
    pub below_resolution: bool,
}

/// `(ℓ, ℓ̂)` of a list of factors.
pub fn ell_pair(factors: &[ResolventFactor]) -> (f64, f64) {
    let mut ell = f64::INFINITY;
    let mut ell_hat = f64::INFINITY;
    for f in factors {
        let p = f.point;
        let ind = if f.decoration.is_imag() { 0.0 } else { 1.0 };
        ell = ell.min(p.eta * (p.rho + ind));
        ell_hat = ell_hat.min(p.eta * p.rho);
    }
    (ell, ell_hat)
}

/// `N^{k/2 - 1}` (averaged) or `N^{k/2}` (isotropic), `k` the number of
/// observables.
fn n_power(chain: &ChainSpec) -> f64 {
    let n = chain.dim() as f64;
    let k = chain.all_observables().len() as f64;
    let e = if chain.is_averaged() { 0.5 * k - 1.0 } else { 0.5 * k };
    math::powf(n, e)
}

fn hs_product(chain: &ChainSpec) -> f64 {
    chain.all_observables().iter().map(|o| o.hs_norm()).product()
}

fn rho_product_imag(chain: &ChainSpec) -> f64 {
    chain
        .factors
        .iter()
        .filter(|f| f.decoration.is_imag())
        .map(|f| f.point.rho)
        .product()
}

pub fn m_bound(chain: &ChainSpec) -> Result<BoundReport, DetError> {
    chain.validate()?;
    let (ell, ell_hat) = ell_pair(&chain.factors);
    let n = chain.dim() as f64;
    let rho_j = rho_product_imag(chain);
    let max_sqrt_rho = chain.factors.iter().map(|f| math::sqrt(f.point.rho)).fold(0.0, f64::max);
    let base = n_power(chain) * hs_product(chain);
    Ok(BoundReport {
        ell,
        ell_hat,
        m_bound: rho_j * base,
        error_scale: rho_j.min(max_sqrt_rho) * base / math::sqrt(n * ell),
        below_resolution: n * ell < 1.0,
    })
}

/// Prefactor turning `|⟨(G - M) A_k⟩|` of an averaged chain into an order
/// one quantity:
/// `N sqrt(ℓ̂) / (ρ ⟨|A|^2⟩^{1/2})` for `k = 1`, and
/// `sqrt(N ℓ̂) / (N^{k/2-1} ∏ρ_i ∏⟨|A_j|^2⟩^{1/2})` for `k >= 2`.
pub fn phi_normalization(chain: &ChainSpec) -> Result<f64, DetError> {
    chain.validate()?;
    if !chain.is_averaged() {
        return Err(DetError::WrongKind("averaged"));
    }
    let n = chain.dim() as f64;
    let (_, ell_hat) = ell_pair(&chain.factors);
    let rho: f64 = chain.factors.iter().map(|f| f.point.rho).product();
    let hs = hs_product(chain);
    let k = chain.factors.len();
    Ok(if k == 1 {
        n * math::sqrt(ell_hat) / (rho * hs)
    } else {
        math::sqrt(n * ell_hat) / (n_power(chain) * rho * hs)
    })
}

/// `⟨|M|^2⟩` of the matrix `M` of the chain.
pub fn m_hs_norm_sq(chain: &ChainSpec) -> Result<f64, DetError> {
    Ok(m_det(chain)?.hs_norm_sq())
}

/// `N^k (∏_{i∈J} ρ_i)^2 [(max_i(ρ_i + 1(i ∉ J)) / (N ℓ))^2 ∨ 1/N] ∏⟨|A_j|^2⟩`
/// for `M` with `k` observables, the reference size of [`m_hs_norm_sq`].
pub fn m_hs_bound(chain: &ChainSpec) -> Result<f64, DetError> {
    chain.validate()?;
    let n = chain.dim() as f64;
    let k = chain.observables.len() as i32;
    let (ell, _) = ell_pair(&chain.factors);
    let rho_j = rho_product_imag(chain);
    let max_r = chain
        .factors
        .iter()
        .map(|f| f.point.rho + if f.decoration.is_imag() { 0.0 } else { 1.0 })
        .fold(0.0, f64::max);
    let a = max_r / (n * ell);
    let hs_sq: f64 = chain.observables.iter().map(|o| o.hs_norm() * o.hs_norm()).product();
    Ok(math::powf(n, k as f64) * rho_j * rho_j * (a * a).max(1.0 / n) * hs_sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semicircle::{divided_difference, IndexedSpectralSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn sp(re: f64, im: f64) -> SpectralPoint {
        SpectralPoint::new(c(re, im)).unwrap()
    }

    fn random_matrix(n: usize, rng: &mut ChaCha8Rng) -> ComplexMatrix {
        ComplexMatrix::from_fn(n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    fn random_hermitian_traceless(n: usize, rng: &mut ChaCha8Rng) -> ObservableMatrix {
        let a = random_matrix(n, rng);
        let h = a.add(&a.adjoint()).scale(c(0.5, 0.0));
        let t = ObservableMatrix::new(h).traceless_part();
        let s = 1.0 / t.hs_norm();
        ObservableMatrix::new(t.data().scale(c(s, 0.0)))
    }

    fn arc(m: ObservableMatrix) -> Arc<ObservableMatrix> {
        Arc::new(m)
    }

    fn plain_dd(zs: &[Complex64]) -> Complex64 {
        // recursive divided difference, valid for distinct points
        if zs.len() == 1 {
            return semicircle::msc(zs[0]).unwrap();
        }
        let n = zs.len();
        (plain_dd(&zs[..n - 1]) - plain_dd(&zs[1..])) / (zs[0] - zs[n - 1])
    }

    #[test]
    fn partial_trace_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b1 = random_matrix(2, &mut rng);
        let b2 = random_matrix(2, &mut rng);
        let mats = [&b1, &b2];
        let full = partial_trace(&NcPartition::full(3), &mats).unwrap();
        assert!(full.max_abs_diff(&b1.matmul(&b2)) < 1e-14);
        let single = partial_trace(&NcPartition::singletons(3), &mats).unwrap();
        let expect = ComplexMatrix::identity(2).scale(b1.normalized_trace() * b2.normalized_trace());
        assert!(single.max_abs_diff(&expect) < 1e-14);
        let kappa = NcPartition::from_blocks(3, vec![vec![0], vec![1, 2]]).unwrap();
        let v = partial_trace(&kappa, &mats).unwrap();
        let tr = (b1[(0, 0)] + b1[(1, 1)]) / 2.0;
        assert!(v.max_abs_diff(&b2.scale(tr)) < 1e-14);
        assert!(partial_trace(&kappa, &[&b1]).is_err());
    }

    #[test]
    fn single_resolvent() {
        let p = sp(0.3, 0.1);
        let x = vec![c(1.0, 0.0), c(0.0, 0.0)];
        let y = vec![c(0.0, 0.0), c(1.0, 0.0)];
        let chain = ChainSpec::isotropic(vec![ResolventFactor::plain(p)], vec![], x.clone(), x.clone()).unwrap();
        let m = m_det(&chain).unwrap();
        assert!(m.max_abs_diff(&ComplexMatrix::identity(2).scale(p.m)) < 1e-10);
        assert!((m_det_iso(&chain).unwrap() - p.m).norm() < 1e-10);
        assert!((m_hs_norm_sq(&chain).unwrap() - p.m.norm_sqr()).abs() < 1e-10);
        let orth = ChainSpec::isotropic(vec![ResolventFactor::plain(p)], vec![], x.clone(), y).unwrap();
        assert!(m_det_iso(&orth).unwrap().norm() < 1e-14);
        let im = ChainSpec::isotropic(vec![ResolventFactor::imag(p)], vec![], x.clone(), x).unwrap();
        assert!((m_det_iso(&im).unwrap() - c(p.m.im, 0.0)).norm() < 1e-10);

        let a = ObservableMatrix::new(ComplexMatrix::from_diagonal(&[c(1.0, 0.0), c(-1.0, 0.0)]));
        let avg = ChainSpec::averaged(vec![ResolventFactor::plain(p)], vec![], arc(a)).unwrap();
        assert!(m_det_avg(&avg).unwrap().norm() < 1e-14);
        assert!(leading_term(&avg).unwrap().norm() < 1e-14);
    }

    #[test]
    fn two_resolvents_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (p1, p2) = (sp(0.4, 0.2), sp(-0.9, -0.3));
        let b = ObservableMatrix::new(random_matrix(3, &mut rng));
        let chain = ChainSpec::isotropic(
            vec![ResolventFactor::plain(p1), ResolventFactor::plain(p2)],
            vec![arc(b.clone())],
            vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)],
            vec![c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)],
        )
        .unwrap();
        let m = m_det(&chain).unwrap();
        let m12 = plain_dd(&[p1.z, p2.z]);
        let expect = ComplexMatrix::identity(3)
            .scale(b.data().normalized_trace() * (m12 - p1.m * p2.m))
            .add(&b.data().scale(p1.m * p2.m));
        assert!(m.max_abs_diff(&expect) < 1e-9, "{}", m.max_abs_diff(&expect));

        let a = b.traceless_part();
        let chain = ChainSpec::isotropic(
            vec![ResolventFactor::plain(p1), ResolventFactor::plain(p2)],
            vec![arc(a.clone())],
            vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)],
            vec![c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)],
        )
        .unwrap();
        let m = m_det(&chain).unwrap();
        assert!(m.max_abs_diff(&a.data().scale(p1.m * p2.m)) < 1e-10);
        let iso = m_det_iso(&chain).unwrap();
        assert!((iso - p1.m * p2.m * a.data()[(0, 1)]).norm() < 1e-10);
        assert!((iso - leading_term(&chain).unwrap()).norm() < 1e-10);
        let hs = m_hs_norm_sq(&chain).unwrap();
        let expect = (p1.m * p2.m).norm_sqr() * a.hs_norm() * a.hs_norm();
        assert!((hs - expect).abs() < 1e-10 * expect);
    }

    #[test]
    fn averaged_two_resolvent_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = arc(random_hermitian_traceless(4, &mut rng));
        let a2 = a.data().normalized_trace_of_product(a.data());
        let p = sp(0.2, 0.05);
        let chain = ChainSpec::averaged(
            vec![ResolventFactor::plain(p), ResolventFactor::plain(p.conj())],
            vec![a.clone()],
            a.clone(),
        )
        .unwrap();
        let v = m_det_avg(&chain).unwrap();
        assert!((v - p.m.norm_sqr() * a2).norm() < 1e-10);
        assert!((v - leading_term(&chain).unwrap()).norm() < 1e-10);

        let chain = ChainSpec::averaged(vec![ResolventFactor::imag(p), ResolventFactor::imag(p)], vec![a.clone()], a.clone()).unwrap();
        let v = m_det_avg(&chain).unwrap();
        assert!((v - p.m.im * p.m.im * a2).norm() < 1e-10);
    }

    #[test]
    fn three_resolvent_isotropic_has_one_correction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a1 = arc(random_hermitian_traceless(4, &mut rng));
        let a2 = arc(random_hermitian_traceless(4, &mut rng));
        let (p1, p2, p3) = (sp(0.1, 0.3), sp(-0.5, 0.2), sp(1.1, -0.25));
        let mut x = vec![c(0.5, 0.0); 4];
        x[1] = c(0.0, 0.5);
        let y = x.clone();
        let chain = ChainSpec::isotropic(
            vec![ResolventFactor::plain(p1), ResolventFactor::plain(p2), ResolventFactor::plain(p3)],
            vec![a1.clone(), a2.clone()],
            x.clone(),
            y.clone(),
        )
        .unwrap();
        let diff = m_det_iso(&chain).unwrap() - leading_term(&chain).unwrap();
        // only π = {{1,3},{2}} with K(π) = {{1,2},{3}} survives
        let cum13 = plain_dd(&[p1.z, p3.z]) - p1.m * p3.m;
        let expect = cum13 * p2.m * a1.data().normalized_trace_of_product(a2.data()) * inner(&x, &y);
        assert!((diff - expect).norm() < 1e-9, "{diff} vs {expect}");
    }

    /// Expands every `Im` factor as `(G(z) - G(z̄)) / 2i` into plain chains.
    fn im_expansion_avg(chain: &ChainSpec) -> Complex64 {
        let imag = chain.imag_set();
        let mut total = c(0.0, 0.0);
        for signs in 0..(1u32 << imag.len()) {
            let mut coeff = c(1.0, 0.0);
            let mut factors = chain.factors.clone();
            for (bit, &i) in imag.iter().enumerate() {
                let conj = signs & (1 << bit) != 0;
                let p = chain.factors[i].point;
                factors[i] = ResolventFactor::plain(if conj { p.conj() } else { p });
                coeff *= if conj { c(-1.0, 0.0) } else { c(1.0, 0.0) } / c(0.0, 2.0);
            }
            let mut sub = chain.clone();
            sub.factors = factors;
            total += coeff * m_det_avg(&sub).unwrap();
        }
        total
    }

    fn random_chain(k: usize, n: usize, seed: u64, traceless: bool) -> ChainSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors: Vec<ResolventFactor> = (0..k)
            .map(|_| {
                let p = sp(rng.random_range(-2.2..2.2), rng.random_range(0.05..0.8) * if rng.random_bool(0.5) { 1.0 } else { -1.0 });
                if rng.random_bool(0.4) {
                    ResolventFactor::imag(p)
                } else {
                    ResolventFactor::plain(p)
                }
            })
            .collect();
        let mut obs = || {
            if traceless {
                arc(random_hermitian_traceless(n, &mut rng))
            } else {
                arc(ObservableMatrix::new(random_matrix(n, &mut rng)))
            }
        };
        let observables: Vec<_> = (0..k - 1).map(|_| obs()).collect();
        let closing = obs();
        ChainSpec::averaged(factors, observables, closing).unwrap()
    }

    #[test]
    fn imaginary_parts_match_expansion() {
        for (k, seed) in [(2, 1), (3, 2), (4, 3)] {
            let mut chain = random_chain(k, 3, seed, false);
            chain.factors[0].decoration = Decoration::Imag;
            let direct = m_det_avg(&chain).unwrap();
            let expanded = im_expansion_avg(&chain);
            assert!((direct - expanded).norm() < 1e-8 * (1.0 + direct.norm()), "k={k}: {direct} vs {expanded}");
        }
    }

    #[test]
    fn decorated_divided_differences_feed_the_table() {
        let chain = random_chain(3, 2, 9, false);
        let d = DetApprox::new(&chain.factors).unwrap();
        let pts: Vec<SpectralPoint> = chain.factors.iter().map(|f| f.point).collect();
        let flags: Vec<bool> = chain.factors.iter().map(|f| f.decoration.is_imag()).collect();
        let v = divided_difference(&IndexedSpectralSet::new(pts, flags).unwrap()).unwrap();
        assert!((d.moments().get(0b111).unwrap() - v).norm() < 1e-14);
    }

    #[test]
    fn adjoint_equals_conjugate_point() {
        let mut chain = random_chain(3, 3, 21, false);
        for f in &mut chain.factors {
            f.decoration = Decoration::Plain;
        }
        let mut adj = chain.clone();
        adj.factors[1].decoration = Decoration::Adjoint;
        let mut conj = chain.clone();
        conj.factors[1].point = conj.factors[1].point.conj();
        assert!((m_det_avg(&adj).unwrap() - m_det_avg(&conj).unwrap()).norm() < 1e-12);
    }

    #[test]
    fn traceless_singleton_blocks_vanish() {
        for k in 2..=5 {
            let chain = random_chain(k, 4, 100 + k as u64, true);
            let d = DetApprox::new(&chain.factors).unwrap();
            let mats: Vec<&ComplexMatrix> = chain.all_observables().into_iter().map(|o| o.data()).collect();
            let terms = d.averaged_terms(&DenseProducts::new(mats));
            for (t, v) in d.terms().iter().zip(&terms) {
                if t.kreweras.blocks().iter().any(|b| b.len() == 1) {
                    assert!(v.norm() < 1e-12, "k = {k}, π = {:?}", t.pi);
                }
            }
        }
    }

    #[test]
    fn bound_examples() {
        let (p1, p2) = (sp(0.3, 0.01), sp(1.5, 0.02));
        let a = ObservableMatrix::new(ComplexMatrix::from_diagonal(&[c(1.0, 0.0), c(-1.0, 0.0)]));
        let chain = ChainSpec::averaged(vec![ResolventFactor::imag(p1), ResolventFactor::plain(p2)], vec![arc(a.clone())], arc(a.clone()))
            .unwrap();
        let r = m_bound(&chain).unwrap();
        let ell = (p1.eta * p1.rho).min(p2.eta * (p2.rho + 1.0));
        assert_eq!(r.ell, ell);
        assert_eq!(r.ell_hat, (p1.eta * p1.rho).min(p2.eta * p2.rho));
        assert!((r.m_bound - p1.rho).abs() < 1e-15);
        assert!(r.below_resolution);

        let one = ChainSpec::averaged(vec![ResolventFactor::imag(p1)], vec![], arc(a)).unwrap();
        let phi = phi_normalization(&one).unwrap();
        assert!((phi - 2.0 * (p1.eta * p1.rho).sqrt() / p1.rho).abs() < 1e-12 * phi);
    }

    #[test]
    fn averaged_values_respect_bound() {
        let mut worst: f64 = 0.0;
        for seed in 0..40u64 {
            let k = 2 + (seed % 3) as usize;
            let chain = random_chain(k, 24, 500 + seed, true);
            let r = m_bound(&chain).unwrap();
            let v = m_det_avg(&chain).unwrap();
            worst = worst.max(v.norm() / r.m_bound);
        }
        assert!(worst <= 10.0, "ratio {worst}");
    }

    #[test]
    fn hs_norm_respects_gain_bound() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 16;
            let factors: Vec<ResolventFactor> = (0..3)
                .map(|_| ResolventFactor::plain(sp(rng.random_range(-1.8..1.8), rng.random_range(0.1..0.5))))
                .collect();
            let obs = vec![arc(random_hermitian_traceless(n, &mut rng)), arc(random_hermitian_traceless(n, &mut rng))];
            let mut x = vec![c(0.0, 0.0); n];
            x[0] = c(1.0, 0.0);
            let chain = ChainSpec::isotropic(factors, obs, x.clone(), x).unwrap();
            let ratio = m_hs_norm_sq(&chain).unwrap() / m_hs_bound(&chain).unwrap();
            assert!(ratio <= 100.0, "ratio {ratio}");
        }
    }

    #[test]
    fn rejects_bad_chains() {
        let p = sp(0.0, 0.1);
        let a = arc(ObservableMatrix::identity(2));
        assert!(matches!(
            ChainSpec::averaged(vec![ResolventFactor::plain(p); 2], vec![], a.clone()),
            Err(DetError::Shape(_))
        ));
        assert!(matches!(
            ChainSpec::averaged(vec![ResolventFactor::plain(p); 7], vec![a.clone(); 6], a.clone()),
            Err(DetError::ChainLength(7))
        ));
        assert!(matches!(
            ChainSpec::isotropic(vec![ResolventFactor::plain(p)], vec![], vec![c(2.0, 0.0), c(0.0, 0.0)], vec![c(1.0, 0.0), c(0.0, 0.0)]),
            Err(DetError::NotUnit(_))
        ));
        let avg = ChainSpec::averaged(vec![ResolventFactor::plain(p)], vec![], a).unwrap();
        assert!(matches!(m_det_iso(&avg), Err(DetError::WrongKind(_))));
    }

    fn with_observables(chain: &ChainSpec, obs: Vec<ObservableMatrix>) -> ChainSpec {
        let mut c = chain.clone();
        let k = obs.len();
        let mut it = obs.into_iter();
        c.observables = (0..k - 1).map(|_| arc(it.next().unwrap())).collect();
        c.kind = ChainKind::Averaged { closing: arc(it.next().unwrap()) };
        c
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn multilinear_in_each_slot(k in 2usize..=4, seed in any::<u64>(), slot_pick in any::<prop::sample::Index>()) {
            let chain = random_chain(k, 3, seed, false);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let slot = slot_pick.index(k);
            let obs: Vec<ObservableMatrix> = chain.all_observables().into_iter().cloned().collect();
            let other = random_matrix(3, &mut rng);
            let (s, t) = (c(0.7, -0.2), c(-1.3, 0.4));
            let mut mixed = obs.clone();
            mixed[slot] = ObservableMatrix::new(obs[slot].data().scale(s).add(&other.scale(t)));
            let mut only_other = obs.clone();
            only_other[slot] = ObservableMatrix::new(other);
            let lhs = m_det_avg(&with_observables(&chain, mixed)).unwrap();
            let rhs = s * m_det_avg(&chain).unwrap() + t * m_det_avg(&with_observables(&chain, only_other)).unwrap();
            prop_assert!((lhs - rhs).norm() < 1e-10 * (1.0 + lhs.norm()));
        }

        #[test]
        fn trace_decomposition(k in 2usize..=4, seed in any::<u64>(), slot_pick in any::<prop::sample::Index>()) {
            let chain = random_chain(k, 3, seed, false);
            let slot = slot_pick.index(k - 1);
            let obs: Vec<ObservableMatrix> = chain.all_observables().into_iter().cloned().collect();
            let b = &obs[slot];
            let tr = b.data().normalized_trace();
            let mut id = obs.clone();
            id[slot] = ObservableMatrix::identity(3);
            let mut tl = obs.clone();
            tl[slot] = b.traceless_part();
            let lhs = m_det_avg(&chain).unwrap();
            let rhs = tr * m_det_avg(&with_observables(&chain, id)).unwrap() + m_det_avg(&with_observables(&chain, tl)).unwrap();
            prop_assert!((lhs - rhs).norm() < 1e-10 * (1.0 + lhs.norm()));
        }

        #[test]
        fn conjugation_reverses_chain(k in 1usize..=4, seed in any::<u64>()) {
            let chain = random_chain(k, 3, seed, false);
            let obs: Vec<ObservableMatrix> = chain.all_observables().into_iter().cloned().collect();
            // ⟨G_1 B_1 .. G_k A_k⟩* = ⟨G_k* B_{k-1}* .. G_1* A_k*⟩
            let mut rev = chain.clone();
            // Im G is self-adjoint, G(z)* = G(z̄)
            rev.factors = chain.factors.iter().rev()
                .map(|f| if f.decoration.is_imag() { *f } else { ResolventFactor::plain(f.point.conj()) })
                .collect();
            let mut robs: Vec<ObservableMatrix> = obs[..k - 1].iter().rev().map(|o| o.adjoint()).collect();
            robs.push(obs[k - 1].adjoint());
            let rev = with_observables(&rev, robs);
            let a = m_det_avg(&chain).unwrap();
            let b = m_det_avg(&rev).unwrap();
            prop_assert!((a.conj() - b).norm() < 1e-9 * (1.0 + a.norm()), "{} vs {}", a, b);
        }
    }
}
