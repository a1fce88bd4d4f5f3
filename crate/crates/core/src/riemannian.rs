//! Riemannian machinery on the L² unit sphere with the metric induced by a
//! preconditioner: tangent projection, Riemannian gradient, normalized
//! retraction and step-size selection.

use serde::{Deserialize, Serialize};

use crate::error::{GprgError, Result};
use crate::grid::Field;
use crate::operators::{EnergyCurve, OperatorSet};
use crate::precond::{PreconditionerHandle, PreconditionerKind};

/// Denominators `(φ, P⁻¹φ)` below this are treated as a coercivity failure.
const DEGENERATE_DENOMINATOR: f64 = 1e-14;
/// Tolerated relative violation of `(φ, v) = 0` on retraction input.
const TANGENCY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepPolicy {
    Fixed {
        tau: f64,
    },
    Backtracking {
        #[serde(default = "one")]
        tau_init: f64,
        #[serde(default = "half")]
        shrink: f64,
        #[serde(default = "default_armijo")]
        armijo: f64,
        #[serde(default = "default_halvings")]
        max_halvings: usize,
    },
    #[serde(rename = "exact_1d")]
    Exact1d {
        #[serde(default = "two")]
        growth: f64,
        #[serde(default = "default_line_tol")]
        tolerance: f64,
        #[serde(default = "one")]
        tau_init: f64,
    },
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn half() -> f64 {
    0.5
}
fn default_armijo() -> f64 {
    1e-4
}
fn default_halvings() -> usize {
    60
}
fn default_line_tol() -> f64 {
    1e-10
}

impl Default for StepPolicy {
    fn default() -> Self {
        Self::backtracking()
    }
}

impl StepPolicy {
    pub fn backtracking() -> Self {
        Self::Backtracking {
            tau_init: 1.0,
            shrink: 0.5,
            armijo: 1e-4,
            max_halvings: 60,
        }
    }

    pub fn exact() -> Self {
        Self::Exact1d {
            growth: 2.0,
            tolerance: 1e-10,
            tau_init: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(GprgError::Config(format!("step policy: {what}")));
        match *self {
            Self::Fixed { tau } if !(tau.is_finite() && tau > 0.0) => bad("tau must be positive"),
            Self::Backtracking {
                tau_init,
                shrink,
                armijo,
                ..
            } => {
                if !(tau_init.is_finite() && tau_init > 0.0) {
                    bad("tau_init must be positive")
                } else if !(shrink > 0.0 && shrink < 1.0) {
                    bad("shrink must lie in (0, 1)")
                } else if !(armijo > 0.0 && armijo < 1.0) {
                    bad("armijo must lie in (0, 1)")
                } else {
                    Ok(())
                }
            }
            Self::Exact1d {
                growth,
                tolerance,
                tau_init,
            } => {
                if !(growth > 1.0 && growth.is_finite()) {
                    bad("growth must exceed 1")
                } else if !(tolerance > 0.0 && tolerance < 1.0) {
                    bad("tolerance must lie in (0, 1)")
                } else if !(tau_init.is_finite() && tau_init > 0.0) {
                    bad("tau_init must be positive")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Riemannian gradient `P⁻¹H_φφ − λ_φ P⁻¹φ` together with the quantities
/// the outer iteration reuses.
#[derive(Debug, Clone)]
pub struct RiemannianGradient {
    pub direction: Field,
    pub lambda_phi: f64,
    /// `‖d‖²_P = ⟨P d, d⟩`.
    pub norm_p_sq: f64,
}

/// `P_φ`-orthogonal projection onto the tangent space at `state`:
/// `v − (φ, v)/(φ, P⁻¹φ) · P⁻¹φ`.
pub fn project_tangent(state: &Field, v: &Field, handle: &PreconditionerHandle) -> Result<Field> {
    let p_inv_phi = handle.apply_inverse(state)?;
    let denom = state.inner_l2(&p_inv_phi);
    check_denominator(denom)?;
    let mut out = v.clone();
    out.axpy(-state.inner_l2(v) / denom, &p_inv_phi);
    Ok(out)
}

fn check_denominator(denom: f64) -> Result<()> {
    if !(denom.abs() >= DEGENERATE_DENOMINATOR) {
        return Err(GprgError::NotCoercive {
            detail: format!("degenerate projection denominator (phi, P^-1 phi) = {denom:.3e}"),
        });
    }
    Ok(())
}

/// Riemannian gradient of `E` at a normalized `state` in the metric of `handle`.
pub fn riemannian_gradient(
    ops: &OperatorSet,
    state: &Field,
    handle: &PreconditionerHandle,
) -> Result<RiemannianGradient> {
    let h_phi_phi = ops.euclidean_gradient(state);
    riemannian_gradient_with(state, &h_phi_phi, handle)
}

/// As [`riemannian_gradient`] with `H_φ φ` supplied by the caller.
pub fn riemannian_gradient_with(
    state: &Field,
    h_phi_phi: &Field,
    handle: &PreconditionerHandle,
) -> Result<RiemannianGradient> {
    let p_inv_phi = handle.apply_inverse(state)?;
    // For P = H_φ frozen at this very state, P⁻¹H_φφ = φ.
    let p_inv_h = if is_own_h_phi(state, handle) {
        state.clone()
    } else {
        handle.apply_inverse(h_phi_phi)?
    };
    let denom = state.inner_l2(&p_inv_phi);
    check_denominator(denom)?;
    let lambda_phi = state.inner_l2(&p_inv_h) / denom;
    let direction = p_inv_h.lin_comb(1.0, &p_inv_phi, -lambda_phi);
    // P d = H_φφ − λφ and (φ, d) = 0
    let norm_p_sq = h_phi_phi.inner_l2(&direction) - lambda_phi * state.inner_l2(&direction);
    Ok(RiemannianGradient {
        direction,
        lambda_phi,
        norm_p_sq,
    })
}

fn is_own_h_phi(state: &Field, handle: &PreconditionerHandle) -> bool {
    handle.kind() == PreconditionerKind::P3
        && handle.spec().shift_a == 0.0
        && handle.state().is_some_and(|s| s == state)
}

/// Normalized retraction `(φ + τv)/‖φ + τv‖` for a tangent `v`.
pub fn retract(state: &Field, v: &Field, tau: f64) -> Result<Field> {
    let vn = v.norm_l2();
    let overlap = state.inner_l2(v);
    // absolute floor: cancellation in d = P⁻¹H_φφ − λP⁻¹φ leaves O(eps) overlap
    if overlap.abs() > TANGENCY_TOL * vn + 1e-13 * state.norm_l2() {
        return Err(GprgError::InvalidArgument(format!(
            "retraction input is not tangent: (phi, v) = {overlap:.3e}, |v| = {vn:.3e}"
        )));
    }
    if tau == 0.0 {
        return Ok(state.clone());
    }
    let moved = state.lin_comb(1.0, v, tau);
    let n = moved.norm_l2();
    assert!(n >= 1e-14, "retraction norm collapsed ({n:e})");
    Ok(moved.scaled(1.0 / n))
}

/// Result of a line search along `τ ↦ R_φ(−τ d)`.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub tau: f64,
    pub trial_energy: f64,
    /// `E(trial) − E(φ)`, evaluated from the state difference.
    pub energy_change: f64,
    pub trial: Field,
    pub halvings: usize,
}

/// Chooses `τ` along the retraction of `−direction`; returns the step and
/// the trial energy.
pub fn select_step(
    ops: &OperatorSet,
    state: &Field,
    direction: &Field,
    policy: &StepPolicy,
) -> Result<(f64, f64)> {
    let energy = ops.energy(state);
    let h_phi_phi = ops.euclidean_gradient(state);
    // ⟨P d, d⟩ = ⟨H_φφ, d⟩ for tangent d
    let slope = h_phi_phi.inner_l2(direction);
    let out = line_search(ops, state, energy, direction, slope, policy)?;
    Ok((out.tau, out.trial_energy))
}

/// Line search with the current energy and the descent measure
/// `⟨P d, d⟩` supplied. Trial energies come from the scalar model of `E`
/// along the retraction curve, so no trial field is formed before the
/// step is accepted.
pub fn line_search(
    ops: &OperatorSet,
    state: &Field,
    energy: f64,
    direction: &Field,
    descent: f64,
    policy: &StepPolicy,
) -> Result<StepOutcome> {
    let minus_d = direction.scaled(-1.0);
    let curve = ops.energy_curve(state, &minus_d);
    let accept = |tau: f64, de: f64, halvings: usize| -> Result<StepOutcome> {
        Ok(StepOutcome {
            tau,
            trial_energy: energy + de,
            energy_change: de,
            trial: retract(state, &minus_d, tau)?,
            halvings,
        })
    };
    match *policy {
        StepPolicy::Fixed { tau } => accept(tau, curve.change(tau), 0),
        StepPolicy::Backtracking {
            tau_init,
            shrink,
            armijo,
            max_halvings,
        } => {
            let mut tau = tau_init;
            for k in 0..=max_halvings {
                let de = curve.change(tau);
                if de <= -armijo * tau * descent && de < 0.0 {
                    return accept(tau, de, k);
                }
                tau *= shrink;
            }
            Err(GprgError::LineSearchFailed {
                halvings: max_halvings,
                tau: tau / shrink,
            })
        }
        StepPolicy::Exact1d {
            growth,
            tolerance,
            tau_init,
        } => {
            let tau = minimize_curve(&curve, tau_init, growth, tolerance)?;
            let de = curve.change(tau);
            if !(de < 0.0) {
                return Err(GprgError::LineSearchFailed { halvings: 0, tau });
            }
            accept(tau, de, 0)
        }
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Brackets and golden-section-minimizes the curve energy on `τ > 0`, then
/// polishes the minimizer on the sign change of the slope, which resolves
/// `τ` far below the `sqrt(eps)` limit of value comparisons.
fn minimize_curve(curve: &EnergyCurve, tau_init: f64, growth: f64, tolerance: f64) -> Result<f64> {
    let f = |t: f64| curve.change(t);
    let (mut a, mut b, mut c);
    let mut fb = f(tau_init);
    if fb >= 0.0 {
        let mut t = tau_init;
        let mut k = 0;
        loop {
            let next = t / growth;
            let fnext = f(next);
            if fnext < 0.0 {
                (a, b, c) = (0.0, next, t);
                fb = fnext;
                break;
            }
            t = next;
            k += 1;
            if k > 200 {
                return Err(GprgError::LineSearchFailed { halvings: k, tau: t });
            }
        }
    } else {
        (a, b, c) = (0.0, tau_init, tau_init * growth);
        let mut fc = f(c);
        let mut k = 0;
        while fc < fb {
            (a, b) = (b, c);
            fb = fc;
            c *= growth;
            fc = f(c);
            k += 1;
            if k > 200 || !c.is_finite() {
                return Err(GprgError::LineSearchFailed { halvings: k, tau: c });
            }
        }
    }
    let (mut x1, mut x2) = (c - INV_PHI * (c - a), a + INV_PHI * (c - a));
    let (mut f1, mut f2) = (f(x1), f(x2));
    let mut best = (b, fb);
    for _ in 0..300 {
        if (c - a) <= tolerance * (1.0 + best.0.abs()) {
            break;
        }
        if f1 < f2 {
            c = x2;
            (x2, f2) = (x1, f1);
            x1 = c - INV_PHI * (c - a);
            f1 = f(x1);
        } else {
            a = x1;
            (x1, f1) = (x2, f2);
            x2 = a + INV_PHI * (c - a);
            f2 = f(x2);
        }
        for (x, fx) in [(x1, f1), (x2, f2)] {
            if fx < best.1 {
                best = (x, fx);
            }
        }
    }
    let width = (c - a).max(1e-6 * (1.0 + best.0.abs()));
    let (mut lo, mut hi) = ((best.0 - width).max(0.0), best.0 + width);
    let (mut s_lo, mut s_hi) = (curve.slope(lo), curve.slope(hi));
    if !(s_lo < 0.0 && s_hi > 0.0) {
        return Ok(best.0);
    }
    let mut x = best.0;
    for _ in 0..200 {
        let mut t = lo - s_lo * (hi - lo) / (s_hi - s_lo);
        if !(t > lo && t < hi) {
            t = 0.5 * (lo + hi);
        }
        let st = curve.slope(t);
        x = t;
        if st == 0.0 {
            break;
        }
        // Illinois damping keeps both ends moving
        if st < 0.0 {
            (lo, s_lo) = (t, st);
            s_hi *= 0.5;
        } else {
            (hi, s_hi) = (t, st);
            s_lo *= 0.5;
        }
        if (hi - lo) <= 4.0 * f64::EPSILON * (1.0 + t.abs()) {
            break;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PolarGrid;
    use crate::operators::ProblemParams;
    use crate::precond::{assemble, PreconditionerSpec};
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn setup(eta: f64) -> (OperatorSet, Field) {
        let g = Arc::new(PolarGrid::new(16, 32, 6.0).unwrap());
        let ops = OperatorSet::new(g.clone(), ProblemParams::harmonic(0.5, eta)).unwrap();
        (ops, random_state(&g, 1))
    }

    fn random_state(g: &Arc<PolarGrid>, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<Complex64> = (0..4)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        Field::from_fn(g, |r, t| {
            let env = (-r * r / 2.0).exp();
            c[0] * env
                + c[1] * Complex64::from_polar(r * env, t)
                + c[2] * Complex64::from_polar(r * env, -t)
                + c[3] * Complex64::from_polar(r * r * env, 2.0 * t)
        })
        .normalized()
        .unwrap()
    }

    fn handle(ops: &OperatorSet, state: &Field, kind: PreconditionerKind) -> PreconditionerHandle {
        let mut spec = PreconditionerSpec::new(kind);
        spec.sigma0 = 50.0;
        assemble(&spec, ops, state).unwrap()
    }

    #[test]
    fn projection_properties() {
        let (ops, phi) = setup(20.0);
        let h = handle(&ops, &phi, PreconditionerKind::P2);
        let v = random_state(ops.grid(), 9).scaled(3.0);
        let pv = project_tangent(&phi, &v, &h).unwrap();
        assert!(phi.inner_l2(&pv).abs() <= 1e-10 * v.norm_l2());
        let ppv = project_tangent(&phi, &pv, &h).unwrap();
        assert!(ppv.sub(&pv).norm_l2() <= 1e-10 * pv.norm_l2());
        let pphi = project_tangent(&phi, &phi, &h).unwrap();
        assert!(phi.inner_l2(&pphi).abs() <= 1e-10);
    }

    #[test]
    fn gradient_is_tangent_and_descending_for_every_kind() {
        let (ops, phi) = setup(20.0);
        for kind in PreconditionerKind::ALL {
            let h = handle(&ops, &phi, kind);
            let g = riemannian_gradient(&ops, &phi, &h).unwrap();
            assert!(phi.inner_l2(&g.direction).abs() <= 1e-10 * g.direction.norm_l2(), "{kind}");
            let pdd = h.apply(&g.direction).inner_l2(&g.direction);
            assert!(pdd > 0.0);
            assert!((pdd - g.norm_p_sq).abs() <= 1e-8 * pdd, "{kind}: {pdd} vs {}", g.norm_p_sq);
            let e0 = ops.energy(&phi);
            let next = retract(&phi, &g.direction.scaled(-1.0), 1e-3).unwrap();
            assert!(ops.energy(&next) < e0, "{kind}");
        }
    }

    #[test]
    fn p3_shortcut_matches_explicit_solve() {
        let (ops, phi) = setup(20.0);
        let h = handle(&ops, &phi, PreconditionerKind::P3);
        let fast = riemannian_gradient(&ops, &phi, &h).unwrap();
        let p_inv_h = h.apply_inverse(&ops.euclidean_gradient(&phi)).unwrap();
        assert!(p_inv_h.sub(&phi).norm_l2() <= 1e-10);
        let _ = fast;
    }

    #[test]
    fn retraction_properties() {
        let (ops, phi) = setup(0.0);
        let h = handle(&ops, &phi, PreconditionerKind::P1);
        let v = project_tangent(&phi, &random_state(ops.grid(), 5), &h).unwrap();
        assert_eq!(retract(&phi, &v, 0.0).unwrap(), phi);
        for tau in [0.1, 1.0, 10.0] {
            let r = retract(&phi, &v, tau).unwrap();
            assert!((r.norm_l2() - 1.0).abs() <= 1e-13);
            let raw = phi.lin_comb(1.0, &v, tau).norm_l2().powi(2);
            let expect = 1.0 + tau * tau * v.norm_l2().powi(2);
            assert!((raw - expect).abs() <= 1e-12 * expect);
        }
        assert!(retract(&phi, &phi, 0.5).is_err());
    }

    #[test]
    fn exact_line_search_matches_closed_form_for_linear_problem() {
        // With η = 0, E(R(τv)) = ½(a + 2bτ + cτ²)/(1 + sτ²).
        let (ops, phi) = setup(0.0);
        let h = handle(&ops, &phi, PreconditionerKind::P2);
        let g = riemannian_gradient(&ops, &phi, &h).unwrap();
        let d = &g.direction;
        let (tau, trial) =
            select_step(&ops, &phi, d, &StepPolicy::exact()).unwrap();
        let h0phi = ops.apply_h0(&phi);
        let h0d = ops.apply_h0(d);
        let a = h0phi.inner_l2(&phi);
        let b = -h0phi.inner_l2(d);
        let c = h0d.inner_l2(d);
        let s = d.norm_l2().powi(2);
        // stationarity: bsτ² + (c − as)τ − b = 0 with b < 0 here
        let (qa, qb, qc) = (-b * s, c - a * s, b);
        let disc = (qb * qb - 4.0 * qa * qc).sqrt();
        let roots = [(-qb + disc) / (2.0 * qa), (-qb - disc) / (2.0 * qa)];
        let energy = |t: f64| 0.5 * (a + 2.0 * b * t + c * t * t) / (1.0 + s * t * t);
        let oracle = roots
            .iter()
            .copied()
            .filter(|t| *t > 0.0)
            .min_by(|x, y| energy(*x).partial_cmp(&energy(*y)).unwrap())
            .unwrap();
        assert!((tau - oracle).abs() <= 1e-8 * oracle.max(1.0), "{tau} vs {oracle}");
        assert!((trial - energy(oracle)).abs() <= 1e-12);
    }

    #[test]
    fn backtracking_accepts_only_decrease() {
        let (ops, phi) = setup(20.0);
        let h = handle(&ops, &phi, PreconditionerKind::P3);
        let g = riemannian_gradient(&ops, &phi, &h).unwrap();
        let (tau, trial) =
            select_step(&ops, &phi, &g.direction, &StepPolicy::backtracking()).unwrap();
        assert!(tau > 0.0 && tau <= 1.0);
        assert!(trial < ops.energy(&phi));
    }

    #[test]
    fn backtracking_reports_non_descent_direction() {
        let (ops, phi) = setup(20.0);
        let h = handle(&ops, &phi, PreconditionerKind::P2);
        let g = riemannian_gradient(&ops, &phi, &h).unwrap();
        let wrong = g.direction.scaled(-1.0);
        let policy = StepPolicy::Backtracking {
            tau_init: 1.0,
            shrink: 0.5,
            armijo: 1e-4,
            max_halvings: 10,
        };
        assert!(matches!(
            select_step(&ops, &phi, &wrong, &policy),
            Err(GprgError::LineSearchFailed { .. })
        ));
    }

    #[test]
    fn policy_validation() {
        assert!(StepPolicy::Fixed { tau: 0.0 }.validate().is_err());
        assert!(StepPolicy::backtracking().validate().is_ok());
        let bad = StepPolicy::Backtracking {
            tau_init: 1.0,
            shrink: 1.5,
            armijo: 1e-4,
            max_halvings: 3,
        };
        assert!(bad.validate().is_err());
    }
}
