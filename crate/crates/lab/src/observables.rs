//! Deterministic observables generated from a seed.

use ethlab_core::matrix::{ComplexMatrix, ObservableMatrix};
use ethlab_core::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensembles::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObservableRecipe {
    /// Hermitian with Gaussian entries, projected to its traceless part and
    /// scaled to `⟨|A|^2⟩ = 1`.
    RandomTraceless,
    /// `A = P - (r/N) I` for the projection `P` onto `r` random orthonormal
    /// vectors.
    RankProjection { rank: usize },
    /// `diag(p_1, .., p_m, p_1, ..)` repeating the pattern along the diagonal.
    DiagonalPattern { pattern: Vec<f64> },
    Identity,
    /// `Å + I` with `Å` from [`ObservableRecipe::RandomTraceless`].
    RandomGeneral,
}

impl ObservableRecipe {
    pub fn tag(&self) -> String {
        match self {
            ObservableRecipe::RandomTraceless => "random-traceless".into(),
            ObservableRecipe::RankProjection { rank } => format!("rank-{rank}-projection"),
            ObservableRecipe::DiagonalPattern { .. } => "diagonal-pattern".into(),
            ObservableRecipe::Identity => "identity".into(),
            ObservableRecipe::RandomGeneral => "random-general".into(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), String> {
        match self {
            ObservableRecipe::RankProjection { rank } if *rank == 0 || *rank > n => {
                Err(format!("rank {rank} outside 1..={n}"))
            }
            ObservableRecipe::DiagonalPattern { pattern } if pattern.is_empty() => Err("empty diagonal pattern".into()),
            _ => Ok(()),
        }
    }

    pub fn build(&self, n: usize, seed: u64) -> ObservableMatrix {
        match self {
            ObservableRecipe::RandomTraceless => random_traceless(n, seed),
            ObservableRecipe::RankProjection { rank } => rank_projection(n, *rank, seed),
            ObservableRecipe::DiagonalPattern { pattern } => {
                let d: Vec<Complex64> = (0..n).map(|i| Complex64::new(pattern[i % pattern.len()], 0.0)).collect();
                ObservableMatrix::new(ComplexMatrix::from_diagonal(&d))
            }
            ObservableRecipe::Identity => ObservableMatrix::identity(n),
            ObservableRecipe::RandomGeneral => {
                let a = random_traceless(n, seed);
                ObservableMatrix::new(a.data().add(&ComplexMatrix::identity(n)))
            }
        }
    }
}

fn gaussian(rng: &mut impl Rng) -> Complex64 {
    Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
}

fn random_traceless(n: usize, seed: u64) -> ObservableMatrix {
    let mut rng = rng_from_seed(seed);
    let mut m = ComplexMatrix::zeros(n);
    for i in 0..n {
        m[(i, i)] = Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0);
        for j in i + 1..n {
            let v = gaussian(&mut rng);
            m[(i, j)] = v;
            m[(j, i)] = v.conj();
        }
    }
    let a = ObservableMatrix::new(m).traceless_part();
    let s = a.hs_norm();
    ObservableMatrix::new(a.data().scale(Complex64::new(1.0 / s, 0.0)))
}

fn rank_projection(n: usize, rank: usize, seed: u64) -> ObservableMatrix {
    let mut rng = rng_from_seed(seed);
    let mut basis: Vec<Vec<Complex64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v: Vec<Complex64> = (0..n).map(|_| gaussian(&mut rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let c: Complex64 = b.iter().zip(&v).map(|(x, y)| x.conj() * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let norm = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let shift = rank as f64 / n as f64;
    let m = ComplexMatrix::from_fn(n, |i, j| {
        let p: Complex64 = basis.iter().map(|b| b[i] * b[j].conj()).sum();
        if i == j {
            p - shift
        } else {
            p
        }
    });
    ObservableMatrix::new(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipes_have_their_shapes() {
        let n = 20;
        let a = ObservableRecipe::RandomTraceless.build(n, 1);
        assert!(a.is_traceless());
        assert!((a.hs_norm() - 1.0).abs() < 1e-12);
        assert_eq!(a.data().max_abs_diff(&a.data().adjoint()), 0.0);
        assert_eq!(a, ObservableRecipe::RandomTraceless.build(n, 1));

        let p = ObservableRecipe::RankProjection { rank: 3 }.build(n, 2);
        assert!(p.is_traceless());
        // (P - r/N)^2 = (1 - 2r/N) P + (r/N)^2, so ⟨|A|^2⟩ = r/N (1 - r/N)
        let r = 3.0 / n as f64;
        assert!((p.hs_norm().powi(2) - r * (1.0 - r)).abs() < 1e-12);
        let shifted = ObservableMatrix::new(p.data().add(&ComplexMatrix::identity(n).scale(Complex64::new(r, 0.0))));
        let sq = shifted.data().matmul(shifted.data());
        assert!(sq.max_abs_diff(shifted.data()) < 1e-12);

        let d = ObservableRecipe::DiagonalPattern { pattern: vec![1.0, -1.0] }.build(n, 0);
        assert!(d.is_traceless());
        let g = ObservableRecipe::RandomGeneral.build(n, 3);
        assert!((g.data().normalized_trace().re - 1.0).abs() < 1e-12);
        assert!(ObservableRecipe::RankProjection { rank: 0 }.validate(n).is_err());
    }
}
