//! Preconditioner family `P1 = −½Δ + V`, `P2 = H₀`, `P3 = H_φ` (each with an
//! optional shift `a ≥ 0`) and the locally optimal `P4 = E″(φ) − (λ̃_φ − σ₀)`.
//!
//! P1 and P2 have Θ-independent coefficients and are inverted directly mode
//! by mode. P3 and P4 are inverted by conjugate gradients with the P2 direct
//! solve as inner preconditioner; every inverse is certified to
//! `inverse_tol` in relative L² residual.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{GprgError, Result};
use crate::grid::Field;
use crate::linalg::{minres, pcg, ModeSolver, SolveStats};
use crate::operators::{LinearTerms, OperatorSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PreconditionerKind {
    P1,
    P2,
    P3,
    P4,
}

impl PreconditionerKind {
    pub const ALL: [PreconditionerKind; 4] = [Self::P1, Self::P2, Self::P3, Self::P4];

    /// Whether the operator depends on the current state.
    pub fn is_state_dependent(self) -> bool {
        matches!(self, Self::P3 | Self::P4)
    }
}

impl fmt::Display for PreconditionerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::P1 => "P1",
            Self::P2 => "P2",
            Self::P3 => "P3",
            Self::P4 => "P4",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for PreconditionerKind {
    type Err = GprgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "P1" => Ok(Self::P1),
            "P2" => Ok(Self::P2),
            "P3" => Ok(Self::P3),
            "P4" => Ok(Self::P4),
            other => Err(GprgError::Config(format!(
                "unknown preconditioner kind '{other}' (expected P1, P2, P3 or P4)"
            ))),
        }
    }
}

pub const DEFAULT_SIGMA0: f64 = 1e-3;
pub const DEFAULT_INVERSE_TOL: f64 = 1e-12;
pub const DEFAULT_INVERSE_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreconditionerSpec {
    pub kind: PreconditionerKind,
    #[serde(default)]
    pub shift_a: f64,
    #[serde(default = "default_sigma0")]
    pub sigma0: f64,
    #[serde(default = "default_inverse_tol")]
    pub inverse_tol: f64,
    #[serde(default = "default_inverse_max_iter")]
    pub inverse_max_iter: usize,
}

fn default_sigma0() -> f64 {
    DEFAULT_SIGMA0
}

fn default_inverse_tol() -> f64 {
    DEFAULT_INVERSE_TOL
}

fn default_inverse_max_iter() -> usize {
    DEFAULT_INVERSE_MAX_ITER
}

impl PreconditionerSpec {
    pub fn new(kind: PreconditionerKind) -> Self {
        Self {
            kind,
            shift_a: 0.0,
            sigma0: DEFAULT_SIGMA0,
            inverse_tol: DEFAULT_INVERSE_TOL,
            inverse_max_iter: DEFAULT_INVERSE_MAX_ITER,
        }
    }

    pub fn p4(sigma0: f64) -> Self {
        Self {
            sigma0,
            ..Self::new(PreconditionerKind::P4)
        }
    }

    pub fn with_inverse_tol(mut self, tol: f64) -> Self {
        self.inverse_tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shift_a.is_finite() && self.shift_a >= 0.0) {
            return Err(GprgError::Config(format!(
                "shift_a must be finite and non-negative, got {}",
                self.shift_a
            )));
        }
        if self.kind == PreconditionerKind::P4 && !(self.sigma0.is_finite() && self.sigma0 > 0.0) {
            return Err(GprgError::Config(format!(
                "sigma0 must be positive for P4, got {}",
                self.sigma0
            )));
        }
        if !(self.inverse_tol.is_finite() && self.inverse_tol > 0.0 && self.inverse_tol < 1.0) {
            return Err(GprgError::Config(format!(
                "inverse_tol must lie in (0, 1), got {}",
                self.inverse_tol
            )));
        }
        if self.inverse_max_iter == 0 {
            return Err(GprgError::Config("inverse_max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// State-independent direct solvers, shareable between handles.
#[derive(Debug, Clone)]
pub struct DirectSolvers {
    p2: Arc<ModeSolver>,
    shift: f64,
}

impl DirectSolvers {
    /// Factorizes `H₀ + shift`.
    pub fn new(ops: &OperatorSet, shift: f64) -> Result<Self> {
        Ok(Self {
            p2: Arc::new(ModeSolver::new(ops, true, shift)?),
            shift,
        })
    }
}

/// An assembled preconditioner, frozen at one state.
#[derive(Debug)]
pub struct PreconditionerHandle {
    spec: PreconditionerSpec,
    ops: OperatorSet,
    state: Option<Field>,
    lambda_tilde: Option<f64>,
    /// `f(|φ|²)` for P3, `2f′(ρ)|φ|²` for P4.
    density: Option<Vec<f64>>,
    direct: Option<Arc<ModeSolver>>,
    inner: Option<Arc<ModeSolver>>,
    inner_iterations: AtomicUsize,
}

/// Assembles the preconditioner described by `spec` at `state`.
pub fn assemble(
    spec: &PreconditionerSpec,
    ops: &OperatorSet,
    state: &Field,
) -> Result<PreconditionerHandle> {
    assemble_with(spec, ops, state, None)
}

/// As [`assemble`], reusing an existing P2 factorization for the inner
/// preconditioner of P3/P4.
pub fn assemble_with(
    spec: &PreconditionerSpec,
    ops: &OperatorSet,
    state: &Field,
    shared: Option<&DirectSolvers>,
) -> Result<PreconditionerHandle> {
    spec.validate()?;
    let inner_for = |shift: f64| -> Result<Arc<ModeSolver>> {
        match shared {
            Some(d) if d.shift == shift => Ok(Arc::clone(&d.p2)),
            _ => Ok(Arc::new(ModeSolver::new(ops, true, shift)?)),
        }
    };
    let mut handle = PreconditionerHandle {
        spec: spec.clone(),
        ops: ops.clone(),
        state: None,
        lambda_tilde: None,
        density: None,
        direct: None,
        inner: None,
        inner_iterations: AtomicUsize::new(0),
    };
    match spec.kind {
        PreconditionerKind::P1 => {
            handle.direct = Some(Arc::new(ModeSolver::new(ops, false, spec.shift_a)?));
        }
        PreconditionerKind::P2 => {
            handle.direct = Some(inner_for(spec.shift_a)?);
        }
        PreconditionerKind::P3 => {
            let density = ops.density(state);
            handle.inner = Some(mean_field_inner(ops, &density, 1.0, spec.shift_a, &inner_for)?);
            handle.density = Some(density);
            handle.state = Some(state.clone());
        }
        PreconditionerKind::P4 => {
            let eta = ops.eta();
            handle.density = Some(
                state
                    .values()
                    .iter()
                    .map(|z| 2.0 * eta * z.norm_sqr())
                    .collect(),
            );
            handle.lambda_tilde = Some(ops.lambda_tilde(state));
            handle.state = Some(state.clone());
            let density = handle.density.as_deref().expect("set above");
            handle.inner = Some(mean_field_inner(ops, density, 0.5, 0.0, &inner_for)?);
        }
    }
    Ok(handle)
}

/// `H₀ + shift + weight·ρ̄(r)` where `ρ̄` is the angular mean of `density`;
/// with zero weight this is the shared P2 factorization.
fn mean_field_inner(
    ops: &OperatorSet,
    density: &[f64],
    weight: f64,
    shift: f64,
    fallback: &dyn Fn(f64) -> Result<Arc<ModeSolver>>,
) -> Result<Arc<ModeSolver>> {
    if weight == 0.0 || ops.eta() == 0.0 {
        return fallback(shift);
    }
    let n_t = ops.grid().n_theta();
    let mean: Vec<f64> = density
        .chunks_exact(n_t)
        .map(|row| weight * row.iter().sum::<f64>() / n_t as f64)
        .collect();
    Ok(Arc::new(ModeSolver::with_radial(ops, true, shift, Some(&mean))?))
}

impl PreconditionerHandle {
    pub fn spec(&self) -> &PreconditionerSpec {
        &self.spec
    }

    pub fn kind(&self) -> PreconditionerKind {
        self.spec.kind
    }

    /// Frozen state snapshot (P3/P4 only).
    pub fn state(&self) -> Option<&Field> {
        self.state.as_ref()
    }

    /// `λ̃` of the frozen state (P4 only).
    pub fn lambda_tilde(&self) -> Option<f64> {
        self.lambda_tilde
    }

    /// Total conjugate-gradient iterations spent in inverse solves so far.
    pub fn inner_iterations(&self) -> usize {
        self.inner_iterations.load(Ordering::Relaxed)
    }

    /// Forward application `P u`.
    pub fn apply(&self, u: &Field) -> Field {
        let shift = self.spec.shift_a;
        match self.spec.kind {
            PreconditionerKind::P1 => self.ops.apply_linear(
                u,
                LinearTerms {
                    rotation: false,
                    shift,
                    density: None,
                },
            ),
            PreconditionerKind::P2 => self.ops.apply_linear(
                u,
                LinearTerms {
                    rotation: true,
                    shift,
                    density: None,
                },
            ),
            PreconditionerKind::P3 => self.ops.apply_linear(
                u,
                LinearTerms {
                    rotation: true,
                    shift,
                    density: self.density.as_deref(),
                },
            ),
            PreconditionerKind::P4 => {
                let lambda = self.lambda_tilde.expect("P4 handle carries lambda");
                let state = self.state.as_ref().expect("P4 handle carries its state");
                let mut out = self.ops.apply_linear(
                    u,
                    LinearTerms {
                        rotation: true,
                        shift: self.spec.sigma0 - lambda,
                        density: self.density.as_deref(),
                    },
                );
                let eta = self.ops.eta();
                if eta != 0.0 {
                    for ((o, p), v) in out
                        .values_mut()
                        .iter_mut()
                        .zip(state.values())
                        .zip(u.values())
                    {
                        *o += p * p * v.conj() * eta;
                    }
                }
                out
            }
        }
    }

    /// `P⁻¹ w`, with `‖P v − w‖ ≤ inverse_tol ‖w‖`.
    pub fn apply_inverse(&self, w: &Field) -> Result<Field> {
        self.apply_inverse_with_stats(w).map(|(v, _)| v)
    }

    pub fn apply_inverse_with_stats(&self, w: &Field) -> Result<(Field, SolveStats)> {
        if let Some(direct) = &self.direct {
            let v = direct.solve(w);
            if !v.is_finite() {
                return Err(GprgError::NotCoercive {
                    detail: "direct solve produced non-finite values".into(),
                });
            }
            return Ok((
                v,
                SolveStats {
                    iterations: 0,
                    relative_residual: f64::NAN,
                },
            ));
        }
        let inner = self.inner.as_ref().expect("iterative handle has inner solver");
        let out = pcg(
            |u| self.apply(u),
            |r| Ok(inner.solve(r)),
            w,
            self.spec.inverse_tol,
            self.spec.inverse_max_iter,
        );
        let out = match out {
            // the shifted Hessian may be indefinite away from the minimizer
            Err(GprgError::NotCoercive { detail }) if self.spec.kind == PreconditionerKind::P4 => minres(
                |u| self.apply(u),
                |r| Ok(inner.solve(r)),
                w,
                self.spec.inverse_tol,
                self.spec.inverse_max_iter,
            )
            .map_err(|e| GprgError::NotCoercive {
                detail: format!("{detail}; MINRES fallback: {e}"),
            }),
            other => other,
        };
        match out {
            Ok((v, stats)) => {
                self.inner_iterations
                    .fetch_add(stats.iterations, Ordering::Relaxed);
                Ok((v, stats))
            }
            Err(GprgError::NotCoercive { detail }) => Err(GprgError::NotCoercive {
                detail: format!("{} inverse: {detail}", self.spec.kind),
            }),
            Err(e) => Err(e),
        }
    }

    /// One direct solve: exact for P1/P2, the angular mean-field
    /// approximation of the operator for P3/P4.
    pub fn apply_inverse_approx(&self, w: &Field) -> Field {
        match (&self.direct, &self.inner) {
            (Some(d), _) => d.solve(w),
            (None, Some(inner)) => inner.solve(w),
            (None, None) => unreachable!("every handle carries a direct or inner solver"),
        }
    }

    /// Solves `P v = w` with conjugate gradients regardless of kind, using
    /// `inner` as preconditioner. Used to cross-check the direct solves.
    pub fn apply_inverse_krylov(&self, w: &Field, inner: &ModeSolver) -> Result<Field> {
        pcg(
            |u| self.apply(u),
            |r| Ok(inner.solve(r)),
            w,
            self.spec.inverse_tol,
            self.spec.inverse_max_iter,
        )
        .map(|(v, _)| v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PolarGrid;
    use crate::operators::ProblemParams;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n_r: usize, n_t: usize) -> (OperatorSet, Field) {
        let g = Arc::new(PolarGrid::new(n_r, n_t, 6.0).unwrap());
        let ops = OperatorSet::new(g.clone(), ProblemParams::harmonic(0.6, 30.0)).unwrap();
        let state = Field::from_fn(&g, |r, t| {
            Complex64::new((-r * r / 2.0).exp(), 0.0)
                + Complex64::from_polar(0.3 * r * (-r * r / 2.0).exp(), t)
        })
        .normalized()
        .unwrap();
        (ops, state)
    }

    /// Smooth random field: random low angular modes with Gaussian envelope.
    fn smooth_random(g: &Arc<PolarGrid>, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs: Vec<(i32, Complex64, f64)> = (-3..=3)
            .map(|m| {
                (
                    m,
                    Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                    rng.gen_range(0.5..2.0),
                )
            })
            .collect();
        Field::from_fn(g, |r, t| {
            coeffs
                .iter()
                .map(|&(m, c, s)| {
                    c * Complex64::from_polar(r.powi(m.abs()) * (-r * r / (2.0 * s)).exp(), m as f64 * t)
                })
                .sum()
        })
    }

    fn rough_random(g: &Arc<PolarGrid>, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(g, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn p1_and_p2_forward_match_definitions() {
        let (ops, state) = setup(12, 32);
        let u = rough_random(ops.grid(), 1);
        let p1 = assemble(&PreconditionerSpec::new(PreconditionerKind::P1), &ops, &state).unwrap();
        let p2 = assemble(&PreconditionerSpec::new(PreconditionerKind::P2), &ops, &state).unwrap();
        let lap = ops.apply_laplacian(&u);
        let mut expected = lap.scaled(-0.5);
        for (k, (e, v)) in expected.values_mut().iter_mut().zip(u.values()).enumerate() {
            *e += v * ops.potential()[k / 32];
        }
        let scale = expected.max_abs();
        assert!(p1.apply(&u).sub(&expected).max_abs() <= 1e-14 * scale);
        let diff = p2.apply(&u).sub(&p1.apply(&u));
        let rot = ops.apply_lz(&u).scaled(-ops.omega());
        assert!(diff.sub(&rot).max_abs() <= 1e-14 * scale);
    }

    #[test]
    fn round_trips_recover_the_input() {
        let (ops, state) = setup(24, 64);
        let u = smooth_random(ops.grid(), 3);
        for kind in PreconditionerKind::ALL {
            let mut spec = PreconditionerSpec::new(kind);
            spec.sigma0 = 50.0;
            let h = assemble(&spec, &ops, &state).unwrap();
            let back = h.apply_inverse(&h.apply(&u)).unwrap();
            let err = back.sub(&u).norm_l2() / u.norm_l2();
            assert!(err <= 10.0 * spec.inverse_tol, "{kind}: {err:e}");
        }
    }

    #[test]
    fn inverse_meets_residual_tolerance() {
        let (ops, state) = setup(16, 32);
        let w = rough_random(ops.grid(), 7);
        for kind in [PreconditionerKind::P3, PreconditionerKind::P4] {
            let mut spec = PreconditionerSpec::new(kind);
            spec.sigma0 = 50.0;
            let h = assemble(&spec, &ops, &state).unwrap();
            let v = h.apply_inverse(&w).unwrap();
            let res = h.apply(&v).sub(&w).norm_l2() / w.norm_l2();
            assert!(res <= spec.inverse_tol, "{kind}: {res:e}");
        }
    }

    #[test]
    fn direct_and_krylov_p2_inverses_agree() {
        let (ops, state) = setup(32, 64);
        let h = assemble(&PreconditionerSpec::new(PreconditionerKind::P2), &ops, &state).unwrap();
        let w = smooth_random(ops.grid(), 5);
        let direct = h.apply_inverse(&w).unwrap();
        let p1 = ModeSolver::new(&ops, false, 0.0).unwrap();
        let krylov = h.apply_inverse_krylov(&w, &p1).unwrap();
        let err = direct.sub(&krylov).norm_l2() / direct.norm_l2();
        assert!(err <= 1e-10, "{err:e}");
    }

    #[test]
    fn forward_operators_are_symmetric_and_coercive() {
        let (ops, state) = setup(12, 32);
        for kind in [PreconditionerKind::P1, PreconditionerKind::P2, PreconditionerKind::P3] {
            let h = assemble(&PreconditionerSpec::new(kind), &ops, &state).unwrap();
            let (u, v) = (rough_random(ops.grid(), 11), rough_random(ops.grid(), 12));
            let (a, b) = (h.apply(&u).inner_l2(&v), h.apply(&v).inner_l2(&u));
            assert!((a - b).abs() <= 1e-11 * a.abs().max(b.abs()));
            for seed in 0..100 {
                let x = rough_random(ops.grid(), 100 + seed);
                assert!(h.apply(&x).inner_l2(&x) > 0.0, "{kind} not coercive");
            }
        }
    }

    #[test]
    fn rotation_equivariance_of_inverse() {
        let (ops, state) = setup(12, 32);
        let u = smooth_random(ops.grid(), 21);
        for kind in PreconditionerKind::ALL {
            let mut spec = PreconditionerSpec::new(kind);
            spec.sigma0 = 50.0;
            let h = assemble(&spec, &ops, &state).unwrap();
            let hr = assemble(&spec, &ops, &state.rotate_by_index(5)).unwrap();
            let a = hr.apply_inverse(&u.rotate_by_index(5)).unwrap();
            let b = h.apply_inverse(&u).unwrap().rotate_by_index(5);
            assert!(a.sub(&b).norm_l2() <= 1e-10 * b.norm_l2(), "{kind}");
        }
    }

    #[test]
    fn indefinite_p4_falls_back_to_minres() {
        let (ops, _) = setup(12, 32);
        // far from any minimizer with a tiny sigma0 the shifted Hessian is indefinite
        let far = rough_random(ops.grid(), 99).normalized().unwrap();
        let spec = PreconditionerSpec::p4(1e-8);
        let h = assemble(&spec, &ops, &far).unwrap();
        let w = smooth_random(ops.grid(), 2);
        let v = h.apply_inverse(&w).unwrap();
        assert!(h.apply(&v).sub(&w).norm_l2() <= 1e-9 * w.norm_l2());

        let capped = PreconditionerSpec {
            inverse_max_iter: 3,
            ..spec
        };
        let h = assemble(&capped, &ops, &far).unwrap();
        match h.apply_inverse(&w) {
            Err(GprgError::NotCoercive { detail }) => assert!(detail.contains("P4") && detail.contains("MINRES")),
            other => panic!("expected a coercivity failure, got {other:?}"),
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = PreconditionerSpec::p4(0.0);
        assert!(s.validate().is_err());
        s.sigma0 = 0.1;
        assert!(s.validate().is_ok());
        s.shift_a = -1.0;
        assert!(s.validate().is_err());
        assert_eq!("p3".parse::<PreconditionerKind>().unwrap(), PreconditionerKind::P3);
        assert!("P5".parse::<PreconditionerKind>().is_err());
    }
}
