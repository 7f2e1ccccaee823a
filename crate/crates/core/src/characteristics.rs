//! Characteristics of the semicircular flow, `∂_t z = -m(z) - z/2`.
//!
//! Along a characteristic `e^{-t/2} m(z_t)` is constant. The integrator is
//! classical RK4 whose step size is controlled by the drift of this
//! conserved quantity: a step ending at time `t` is accepted only while the
//! accumulated drift stays below `tol * t / T`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;
use thiserror::Error;

use crate::det_approx::{self, ChainKind, ChainSpec, DetError, Decoration, ResolventFactor};
use crate::math;
use crate::matrix::ObservableMatrix;
use crate::semicircle::{msc, AnalyticError, SpectralPoint};

/// Trajectories are aborted once `|Im z|` drops below this value.
pub const ETA_FLOOR: f64 = 1e-8;

const MIN_STEP: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("flow time {0} outside [0, 0.9]")]
    Time(f64),
    #[error("tolerance must be positive and finite")]
    Tolerance,
    #[error("trajectory reached the real axis; last safe time {last_safe_time}")]
    AxisCrossing { last_safe_time: f64 },
    #[error("step size underflow at time {0}")]
    StepUnderflow(f64),
    #[error("round-trip residual {residual} exceeds {bound}")]
    RoundTrip { residual: f64, bound: f64 },
    #[error("shooting produced z0 at distance {dist} from [-2, 2], below {bound}")]
    TooClose { dist: f64, bound: f64 },
    #[error("derivative check needs an averaged chain of 1..=3 resolvents, all plain or all Im")]
    UnsupportedChain,
    #[error("finite-difference step {0} outside [1e-6, 1e-3]")]
    Step(f64),
    #[error(transparent)]
    Analytic(#[from] AnalyticError),
    #[error(transparent)]
    Det(#[from] DetError),
}

/// Sampled solution of the characteristic equation for several initial
/// points, integrated jointly on a common time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CharTrajectory {
    pub times: Vec<f64>,
    /// `states[s][i]` is `z_{i, times[s]}`.
    pub states: Vec<Vec<Complex64>>,
    /// `conserved[s][i] = e^{-t/2} m(z_{i,t})`, signed by the direction of time.
    pub conserved: Vec<Vec<Complex64>>,
}

impl CharTrajectory {
    pub fn final_states(&self) -> &[Complex64] {
        self.states.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Largest deviation of the conserved quantity from its initial value.
    pub fn max_drift(&self) -> f64 {
        let first = &self.conserved[0];
        self.conserved
            .iter()
            .flat_map(|row| row.iter().zip(first).map(|(c, c0)| (c - c0).norm()))
            .fold(0.0, f64::max)
    }
}

/// Vector field `dir * (m(z) + z/2)`: `dir = -1` is the forward flow,
/// `dir = +1` its time reversal.
fn field(z: Complex64, dir: f64) -> Result<Complex64, FlowError> {
    Ok((msc(z)? + z * 0.5) * dir)
}

fn rk4_step(zs: &[Complex64], h: f64, dir: f64) -> Result<Vec<Complex64>, FlowError> {
    let mut out = Vec::with_capacity(zs.len());
    for &z in zs {
        let k1 = field(z, dir)?;
        let k2 = field(z + k1 * (0.5 * h), dir)?;
        let k3 = field(z + k2 * (0.5 * h), dir)?;
        let k4 = field(z + k3 * h, dir)?;
        out.push(z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0));
    }
    Ok(out)
}

/// Integrates `dir * (m + z/2)` for time `total`, with the invariant
/// `e^{dir * t / 2} m(z_t)`.
fn integrate(z0: &[Complex64], total: f64, tol: f64, dir: f64) -> Result<CharTrajectory, FlowError> {
    if !(0.0..=0.9).contains(&total) {
        return Err(FlowError::Time(total));
    }
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(FlowError::Tolerance);
    }
    let m0: Vec<Complex64> = z0.iter().map(|&z| msc(z)).collect::<Result<_, _>>()?;
    let signs: Vec<f64> = z0.iter().map(|z| z.im.signum()).collect();
    if z0.iter().any(|z| math::abs(z.im) < ETA_FLOOR) {
        return Err(FlowError::AxisCrossing { last_safe_time: 0.0 });
    }
    let mut traj = CharTrajectory {
        times: vec![0.0],
        states: vec![z0.to_vec()],
        conserved: vec![m0.clone()],
    };
    if total == 0.0 {
        return Ok(traj);
    }
    let mut t = 0.0;
    let mut z = z0.to_vec();
    let mut h = total / 16.0;
    while t < total {
        if t + h > total {
            h = total - t;
        }
        let candidate = rk4_step(&z, h, dir)?;
        let t_new = t + h;
        let crossed = candidate
            .iter()
            .zip(&signs)
            .any(|(w, s)| !(w.im * s >= ETA_FLOOR) || !w.re.is_finite());
        let mut accept = !crossed;
        let mut conserved = Vec::with_capacity(z.len());
        let mut drift: f64 = 0.0;
        if accept {
            let scale = math::exp(dir * t_new * 0.5);
            for (w, c0) in candidate.iter().zip(&m0) {
                let c = msc(*w)? * scale;
                drift = drift.max((c - c0).norm());
                conserved.push(c);
            }
            accept = drift <= tol * t_new / total;
        }
        if !accept {
            if crossed && h <= MIN_STEP * 1e3 {
                return Err(FlowError::AxisCrossing { last_safe_time: t });
            }
            h *= 0.5;
            if h < MIN_STEP {
                return Err(if crossed {
                    FlowError::AxisCrossing { last_safe_time: t }
                } else {
                    FlowError::StepUnderflow(t)
                });
            }
            continue;
        }
        t = if total - t_new < MIN_STEP { total } else { t_new };
        z = candidate;
        traj.times.push(t);
        traj.states.push(z.clone());
        traj.conserved.push(conserved);
        if drift < 0.25 * tol * t / total {
            h *= 2.0;
        }
    }
    Ok(traj)
}

/// Forward characteristic flow of several points on a common time grid.
pub fn flow_forward_many(z0: &[Complex64], total: f64, tol: f64) -> Result<CharTrajectory, FlowError> {
    integrate(z0, total, tol, -1.0)
}

/// Forward characteristic flow `∂_t z = -m(z) - z/2` up to time `total`.
pub fn flow_forward(z0: Complex64, total: f64, tol: f64) -> Result<CharTrajectory, FlowError> {
    flow_forward_many(&[z0], total, tol)
}

fn dist_to_support(z: Complex64) -> f64 {
    let dx = if z.re > 2.0 {
        z.re - 2.0
    } else if z.re < -2.0 {
        -2.0 - z.re
    } else {
        0.0
    };
    math::sqrt(dx * dx + z.im * z.im)
}

/// Initial condition `z0` whose forward characteristic reaches `z_target`
/// at time `total`, found by integrating the reversed field. The result is
/// verified by a forward round trip and, when the round trip misses by more
/// than `10 tol`, recomputed at a tighter tolerance.
pub fn shoot_backward(z_target: Complex64, total: f64, tol: f64) -> Result<Complex64, FlowError> {
    if !(total > 0.0 && total <= 0.9) {
        return Err(FlowError::Time(total));
    }
    let bound = 10.0 * tol;
    let mut inner_tol = tol;
    let mut residual = f64::INFINITY;
    for _ in 0..4 {
        let back = integrate(&[z_target], total, inner_tol, 1.0)?;
        let z0 = back.final_states()[0];
        let fwd = flow_forward(z0, total, inner_tol)?;
        residual = (fwd.final_states()[0] - z_target).norm();
        if residual <= bound {
            let dist = dist_to_support(z0);
            let min_dist = 0.1 * total;
            if dist < min_dist {
                return Err(FlowError::TooClose { dist, bound: min_dist });
            }
            return Ok(z0);
        }
        inner_tol *= 0.1;
    }
    Err(FlowError::RoundTrip { residual, bound })
}

/// A resolvent in a segment chain: `(index, decoration)`.
type Slot = (usize, Decoration);

/// The averaged chain `⟨G_{s_1} A_{s_1} G_{s_2} .. G_{s_last}⟩` (closing
/// observable `I`) over the given slots, where `A_l` follows `G_l`.
fn segment_trace(
    points: &[SpectralPoint],
    observables: &[Arc<ObservableMatrix>],
    identity: &Arc<ObservableMatrix>,
    slots: &[Slot],
) -> Result<Complex64, FlowError> {
    let factors: Vec<ResolventFactor> = slots.iter().map(|&(i, d)| ResolventFactor::new(points[i], d)).collect();
    let obs: Vec<Arc<ObservableMatrix>> = slots[..slots.len() - 1].iter().map(|&(i, _)| observables[i].clone()).collect();
    let chain = ChainSpec::averaged(factors, obs, identity.clone())?;
    Ok(det_approx::m_det_avg(&chain)?)
}

/// Indices `i, i+1, .., j` cyclically modulo `k` (wrapping past `k - 1`
/// when `i > j`).
fn cyclic_range(i: usize, j: usize, k: usize) -> Vec<usize> {
    let mut v = vec![i];
    let mut c = i;
    while c != j {
        c = (c + 1) % k;
        v.push(c);
    }
    v
}

fn decorated_segment(i: usize, j: usize, k: usize, first: Decoration, last: Decoration, middle: Decoration) -> Vec<Slot> {
    let idx = cyclic_range(i, j, k);
    let n = idx.len();
    idx.into_iter()
        .enumerate()
        .map(|(p, l)| {
            let d = if p == 0 {
                first
            } else if p == n - 1 {
                last
            } else {
                middle
            };
            (l, d)
        })
        .collect()
}

/// Right-hand side of the derivative identity for `⟨M A_k⟩` at the given
/// spectral points.
fn derivative_rhs(
    points: &[SpectralPoint],
    observables: &[Arc<ObservableMatrix>],
    identity: &Arc<ObservableMatrix>,
    imag: bool,
    value: Complex64,
) -> Result<Complex64, FlowError> {
    use Decoration::{Adjoint as S, Imag as H, Plain as P};
    let k = points.len();
    let mut rhs = value * (k as f64 * 0.5);
    let tr = |first, last, i, j| segment_trace(points, observables, identity, &decorated_segment(i, j, k, first, last, if imag { H } else { P }));
    for i in 0..k {
        for j in i + 1..k {
            if imag {
                rhs += tr(H, P, i, j)? * tr(H, P, j, i)?;
                rhs += tr(S, H, i, j)? * tr(S, H, j, i)?;
                rhs += tr(H, H, i, j)? * tr(S, P, j, i)?;
                rhs += tr(S, P, i, j)? * tr(H, H, j, i)?;
            } else {
                rhs += tr(P, P, i, j)? * tr(P, P, j, i)?;
            }
        }
    }
    Ok(rhs)
}

/// Outcome of [`m_flow_derivative_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeCheck {
    /// Centered finite difference of `⟨M A_k⟩` along the flow.
    pub finite_difference: Complex64,
    /// The identity's right-hand side at the central time.
    pub rhs: Complex64,
    /// `|fd - rhs| / max(|fd|, |rhs|)`, or the absolute difference when both vanish.
    pub residual: f64,
}

/// Compares the time derivative of `⟨M A_k⟩` along the characteristics with
/// `k/2 ⟨M A_k⟩ + Σ_{i<j} ⟨M_{[i,j]}⟩⟨M_{[j,i]}⟩` (plain chains) or with
/// its four-sum decorated analog (all-`Im` chains).
pub fn m_flow_derivative_check(chain: &ChainSpec, dt: f64) -> Result<DerivativeCheck, FlowError> {
    chain.validate()?;
    if !(1e-6..=1e-3).contains(&dt) {
        return Err(FlowError::Step(dt));
    }
    let ChainKind::Averaged { closing } = &chain.kind else {
        return Err(FlowError::UnsupportedChain);
    };
    let k = chain.factors.len();
    let all_plain = chain.factors.iter().all(|f| f.decoration == Decoration::Plain);
    let all_imag = chain.factors.iter().all(|f| f.decoration == Decoration::Imag);
    if k > 3 || !(all_plain || all_imag) {
        return Err(FlowError::UnsupportedChain);
    }
    let decoration = if all_imag { Decoration::Imag } else { Decoration::Plain };
    let mut observables = chain.observables.clone();
    observables.push(closing.clone());
    let identity = Arc::new(ObservableMatrix::identity(chain.dim()));

    let z: Vec<Complex64> = chain.factors.iter().map(|f| f.point.z).collect();
    let tight = 1e-14;
    let ahead = integrate(&z, dt, tight, -1.0)?;
    let behind = integrate(&z, dt, tight, 1.0)?;
    let value_at = |zs: &[Complex64]| -> Result<Complex64, FlowError> {
        let factors: Vec<ResolventFactor> = zs
            .iter()
            .map(|&w| Ok(ResolventFactor::new(SpectralPoint::new(w)?, decoration)))
            .collect::<Result<_, FlowError>>()?;
        let c = ChainSpec::averaged(factors, chain.observables.clone(), closing.clone())?;
        Ok(det_approx::m_det_avg(&c)?)
    };
    let plus = value_at(ahead.final_states())?;
    let minus = value_at(behind.final_states())?;
    let finite_difference = (plus - minus) / (2.0 * dt);

    let points: Vec<SpectralPoint> = chain.factors.iter().map(|f| f.point).collect();
    let value = value_at(&z)?;
    let rhs = derivative_rhs(&points, &observables, &identity, all_imag, value)?;
    let scale = finite_difference.norm().max(rhs.norm());
    let diff = (finite_difference - rhs).norm();
    let residual = if scale > 1e-300 { diff / scale } else { diff };
    Ok(DerivativeCheck {
        finite_difference,
        rhs,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::ComplexMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// Exact characteristic: `m_t = e^{t/2} m_0`, `z_t = -m_t - 1/m_t`.
    fn exact(z0: Complex64, t: f64) -> Complex64 {
        let m = msc(z0).unwrap() * (0.5 * t).exp();
        -m - m.inv()
    }

    #[test]
    fn zero_time_is_identity() {
        let tr = flow_forward(c(0.3, 0.4), 0.0, 1e-10).unwrap();
        assert_eq!(tr.times, vec![0.0]);
        assert_eq!(tr.final_states(), &[c(0.3, 0.4)]);
    }

    #[test]
    fn conservation_and_density_growth() {
        let tol = 1e-10;
        let z0 = c(1.0, 0.5);
        let tr = flow_forward(z0, 0.3, tol).unwrap();
        let zt = tr.final_states()[0];
        let m0 = msc(z0).unwrap();
        let mt = msc(zt).unwrap();
        assert!(((-0.15f64).exp() * mt - m0).norm() <= 10.0 * tol);
        assert!(tr.max_drift() <= 10.0 * tol);
        let rho0 = m0.im / core::f64::consts::PI;
        let rhot = mt.im / core::f64::consts::PI;
        assert!((rhot - (0.15f64).exp() * rho0).abs() <= 10.0 * tol);
        assert!((zt - exact(z0, 0.3)).norm() < 1e-8);
        for w in tr.states.windows(2) {
            assert!(w[1][0].im < w[0][0].im);
        }
    }

    #[test]
    fn lower_half_plane_is_mirrored() {
        let tr = flow_forward(c(-0.4, -0.7), 0.6, 1e-11).unwrap();
        assert!((tr.final_states()[0] - exact(c(-0.4, -0.7), 0.6)).norm() < 1e-8);
    }

    #[test]
    fn axis_crossing_is_reported() {
        // |m(z0)| close to one: the flow hits the real axis almost immediately
        match flow_forward(c(0.5, 1e-3), 0.5, 1e-10) {
            Err(FlowError::AxisCrossing { last_safe_time }) => assert!(last_safe_time < 0.01),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shooting_round_trip() {
        let tol = 1e-10;
        let target = c(0.5, 1e-3);
        let z0 = shoot_backward(target, 0.5, tol).unwrap();
        let back = flow_forward(z0, 0.5, tol).unwrap().final_states()[0];
        assert!((back - target).norm() <= 10.0 * tol);
        // oracle: invert the closed-form characteristic
        let m0 = msc(target).unwrap() * (-0.25f64).exp();
        assert!((z0 - (-m0 - m0.inv())).norm() < 1e-8);
    }

    #[test]
    fn shooting_from_the_edge_moves_away() {
        let z0 = shoot_backward(c(2.0, 1e-4), 0.5, 1e-10).unwrap();
        assert!(dist_to_support(z0) >= 0.05);
    }

    #[test]
    fn shooting_small_time_is_close() {
        let target = c(-1.2, 0.2);
        let z0 = shoot_backward(target, 1e-4, 1e-12).unwrap();
        assert!((z0 - target).norm() < 1e-3);
        assert!(matches!(shoot_backward(target, 0.0, 1e-12), Err(FlowError::Time(_))));
    }

    #[test]
    fn round_trip_grid() {
        let tol = 1e-10;
        let mut count = 0;
        for &re in &[-2.1, -1.9, -1.0, 0.0, 0.7, 1.5, 1.95, 2.0, 2.2, 3.0] {
            for &im in &[1e-3, -0.05] {
                let target = c(re, im);
                let z0 = shoot_backward(target, 0.5, tol).unwrap();
                let back = flow_forward(z0, 0.5, tol).unwrap();
                assert!((back.final_states()[0] - target).norm() <= 10.0 * tol, "{target}");
                assert!(back.max_drift() <= 10.0 * tol);
                count += 1;
            }
        }
        assert_eq!(count, 20);
    }

    fn traceless(n: usize, rng: &mut ChaCha8Rng) -> Arc<ObservableMatrix> {
        let a = ComplexMatrix::from_fn(n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let h = a.add(&a.adjoint());
        Arc::new(ObservableMatrix::new(h).traceless_part())
    }

    fn chain(k: usize, decoration: Decoration, seed: u64) -> ChainSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = [c(0.3, 0.4), c(-0.8, 0.3), c(1.2, -0.5)];
        let factors = pts[..k]
            .iter()
            .map(|&z| ResolventFactor::new(SpectralPoint::new(z).unwrap(), decoration))
            .collect();
        let obs = (0..k - 1).map(|_| traceless(4, &mut rng)).collect();
        ChainSpec::averaged(factors, obs, traceless(4, &mut rng)).unwrap()
    }

    #[test]
    fn single_resolvent_traceless_is_trivial() {
        let r = m_flow_derivative_check(&chain(1, Decoration::Plain, 1), 1e-4).unwrap();
        assert!(r.residual < 1e-12);
        assert!(r.rhs.norm() < 1e-12);
    }

    #[test]
    fn plain_identity_holds() {
        for k in 2..=3 {
            let dt = 1e-4;
            let r = m_flow_derivative_check(&chain(k, Decoration::Plain, 7), dt).unwrap();
            assert!(r.residual <= 100.0 * dt * dt, "k = {k}: {r:?}");
        }
    }

    #[test]
    fn imag_identity_holds() {
        for k in 1..=3 {
            let dt = 1e-4;
            let r = m_flow_derivative_check(&chain(k, Decoration::Imag, 9), dt).unwrap();
            assert!(r.residual <= 100.0 * dt * dt, "k = {k}: {r:?}");
        }
    }

    #[test]
    fn identity_with_general_observables() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ch = chain(2, Decoration::Plain, 3);
        let b = ComplexMatrix::from_fn(4, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        ch.observables[0] = Arc::new(ObservableMatrix::new(b));
        let r = m_flow_derivative_check(&ch, 1e-4).unwrap();
        assert!(r.residual <= 1e-6, "{r:?}");
    }

    #[test]
    fn derivative_check_rejects_mixed_chains() {
        let mut ch = chain(2, Decoration::Plain, 3);
        ch.factors[0].decoration = Decoration::Imag;
        assert!(matches!(m_flow_derivative_check(&ch, 1e-4), Err(FlowError::UnsupportedChain)));
        assert!(matches!(m_flow_derivative_check(&chain(2, Decoration::Plain, 3), 1e-2), Err(FlowError::Step(_))));
    }
}
