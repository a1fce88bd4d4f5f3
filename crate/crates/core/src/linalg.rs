//! Krylov and direct solvers working on [`Field`]s under the weighted L²
//! inner product.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{GprgError, Result};
use crate::grid::Field;
use crate::operators::OperatorSet;
use crate::stencil;

/// Outcome of an iterative solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// `‖b − A x‖ / ‖b‖` of the returned iterate, recomputed from scratch.
    pub relative_residual: f64,
}

/// Preconditioned conjugate gradients for an operator that is symmetric
/// and positive definite in the weighted L² inner product.
///
/// A non-positive curvature `⟨p, A p⟩ ≤ 0` aborts with
/// [`GprgError::NotCoercive`].
pub fn pcg<A, M>(
    apply_a: A,
    precond: M,
    b: &Field,
    tol: f64,
    max_iter: usize,
) -> Result<(Field, SolveStats)>
where
    A: Fn(&Field) -> Field,
    M: Fn(&Field) -> Result<Field>,
{
    let b_norm = b.norm_l2();
    let mut x = Field::zeros(b.grid());
    if b_norm == 0.0 {
        return Ok((
            x,
            SolveStats {
                iterations: 0,
                relative_residual: 0.0,
            },
        ));
    }
    let target = tol * b_norm;
    let mut r = b.clone();
    let mut iterations = 0;
    // Outer loop restarts from the true residual if the recurrence drifted.
    for _restart in 0..3 {
        let mut z = precond(&r)?;
        let mut p = z.clone();
        let mut rz = r.inner_l2(&z);
        while iterations < max_iter {
            let ap = apply_a(&p);
            let curvature = p.inner_l2(&ap);
            if !(curvature > 0.0) {
                return Err(GprgError::NotCoercive {
                    detail: format!(
                        "non-positive curvature {curvature:.3e} in conjugate gradients at iteration {iterations}"
                    ),
                });
            }
            let alpha = rz / curvature;
            x.axpy(alpha, &p);
            r.axpy(-alpha, &ap);
            iterations += 1;
            if r.norm_l2() <= target {
                break;
            }
            z = precond(&r)?;
            let rz_new = r.inner_l2(&z);
            let beta = rz_new / rz;
            rz = rz_new;
            p = z.lin_comb(1.0, &p, beta);
        }
        r = b.sub(&apply_a(&x));
        let res = r.norm_l2();
        if res <= target {
            return Ok((
                x,
                SolveStats {
                    iterations,
                    relative_residual: res / b_norm,
                },
            ));
        }
        if iterations >= max_iter {
            return Err(GprgError::SolveNotConverged {
                iterations,
                residual: res / b_norm,
                target: tol,
            });
        }
    }
    let res = b.sub(&apply_a(&x)).norm_l2() / b_norm;
    Err(GprgError::SolveNotConverged {
        iterations,
        residual: res,
        target: tol,
    })
}

/// Preconditioned MINRES for a symmetric, possibly indefinite operator;
/// `precond` must be symmetric positive definite.
pub fn minres<A, M>(
    apply_a: A,
    precond: M,
    b: &Field,
    tol: f64,
    max_iter: usize,
) -> Result<(Field, SolveStats)>
where
    A: Fn(&Field) -> Field,
    M: Fn(&Field) -> Result<Field>,
{
    let b_norm = b.norm_l2();
    let mut x = Field::zeros(b.grid());
    if b_norm == 0.0 {
        return Ok((
            x,
            SolveStats {
                iterations: 0,
                relative_residual: 0.0,
            },
        ));
    }
    let target = tol * b_norm;
    let mut iterations = 0;
    for _restart in 0..3 {
        let r0 = b.sub(&apply_a(&x));
        let mut r1 = r0.clone();
        let mut r2 = r0;
        let mut y = precond(&r1)?;
        let beta1 = r1.inner_l2(&y);
        if !(beta1 > 0.0) {
            return Err(GprgError::NotCoercive {
                detail: "MINRES inner preconditioner is not positive definite".into(),
            });
        }
        let beta1 = beta1.sqrt();
        let (mut oldb, mut beta) = (0.0, beta1);
        let (mut dbar, mut epsln, mut phibar) = (0.0, 0.0, beta1);
        let (mut cs, mut sn) = (-1.0, 0.0);
        let mut w = Field::zeros(b.grid());
        let mut w2 = Field::zeros(b.grid());
        let mut itn = 0;
        while iterations < max_iter {
            itn += 1;
            iterations += 1;
            let v = y.scaled(1.0 / beta);
            y = apply_a(&v);
            if itn >= 2 {
                y.axpy(-beta / oldb, &r1);
            }
            let alfa = v.inner_l2(&y);
            y.axpy(-alfa / beta, &r2);
            r1 = std::mem::replace(&mut r2, y.clone());
            y = precond(&r2)?;
            oldb = beta;
            let bb = r2.inner_l2(&y);
            if bb < 0.0 {
                return Err(GprgError::NotCoercive {
                    detail: "MINRES inner preconditioner is not positive definite".into(),
                });
            }
            beta = bb.sqrt();
            let oldeps = epsln;
            let delta = cs * dbar + sn * alfa;
            let gbar = sn * dbar - cs * alfa;
            epsln = sn * beta;
            dbar = -cs * beta;
            let gamma = gbar.hypot(beta).max(f64::EPSILON);
            cs = gbar / gamma;
            sn = beta / gamma;
            let phi = cs * phibar;
            phibar *= sn;
            let w1 = std::mem::replace(&mut w2, w.clone());
            w = v;
            w.axpy(-oldeps, &w1);
            w.axpy(-delta, &w2);
            w.scale(1.0 / gamma);
            x.axpy(phi, &w);
            // phibar bounds the residual in the preconditioner norm
            if phibar <= 1e-2 * tol * beta1 || beta == 0.0 {
                break;
            }
            if itn % 10 == 0 && b.sub(&apply_a(&x)).norm_l2() <= target {
                break;
            }
        }
        let res = b.sub(&apply_a(&x)).norm_l2();
        if res <= target {
            return Ok((
                x,
                SolveStats {
                    iterations,
                    relative_residual: res / b_norm,
                },
            ));
        }
        if iterations >= max_iter {
            return Err(GprgError::SolveNotConverged {
                iterations,
                residual: res / b_norm,
                target: tol,
            });
        }
    }
    let res = b.sub(&apply_a(&x)).norm_l2() / b_norm;
    Err(GprgError::SolveNotConverged {
        iterations,
        residual: res,
        target: tol,
    })
}

/// Direct solver for `−½Δ + V + shift [− Ω L_z]`.
///
/// The coefficients do not depend on Θ, so the discrete Fourier transform
/// in Θ splits the operator into one real tridiagonal radial system per
/// angular wavenumber; all systems are factorized once.
pub struct ModeSolver {
    n_r: usize,
    n_theta: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// Sub-diagonal per row (independent of the mode).
    sub: Vec<f64>,
    /// Thomas factors laid out `[i][k]`.
    inv_denom: Vec<f64>,
    c_prime: Vec<f64>,
}

impl std::fmt::Debug for ModeSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModeSolver")
            .field("n_r", &self.n_r)
            .field("n_theta", &self.n_theta)
            .finish_non_exhaustive()
    }
}

impl ModeSolver {
    pub fn new(ops: &OperatorSet, rotation: bool, shift: f64) -> Result<Self> {
        Self::with_radial(ops, rotation, shift, None)
    }

    /// As [`new`](Self::new) with an additional radial potential, one
    /// value per radial row.
    pub fn with_radial(
        ops: &OperatorSet,
        rotation: bool,
        shift: f64,
        extra: Option<&[f64]>,
    ) -> Result<Self> {
        let grid = ops.grid();
        let (n_r, n_t) = (grid.n_r(), grid.n_theta());
        let ht = grid.h_theta();
        let (lower, upper, diag) = ops.radial_bands();
        let inv_r2 = ops.inv_r2();
        let v = ops.potential();
        let omega = if rotation { ops.omega() } else { 0.0 };
        let s1: Vec<f64> = (0..n_t)
            .map(|k| stencil::first_symbol(stencil::wavenumber(k, n_t), ht))
            .collect();
        let s2: Vec<f64> = (0..n_t)
            .map(|k| stencil::second_symbol(stencil::wavenumber(k, n_t), ht))
            .collect();
        let sub: Vec<f64> = lower.iter().map(|c| -0.5 * c).collect();
        let sup: Vec<f64> = upper.iter().map(|a| -0.5 * a).collect();
        if let Some(e) = extra {
            if e.len() != n_r {
                return Err(GprgError::InvalidArgument(format!(
                    "radial potential has {} rows, grid has {n_r}",
                    e.len()
                )));
            }
        }
        let extra_at = |i: usize| extra.map_or(0.0, |e| e[i]);
        let mut inv_denom = vec![0.0; n_r * n_t];
        let mut c_prime = vec![0.0; n_r * n_t];
        for i in 0..n_r {
            for k in 0..n_t {
                let d = -0.5 * (diag + inv_r2[i] * s2[k]) + v[i] + extra_at(i) + shift
                    - omega * s1[k];
                let denom = if i == 0 {
                    d
                } else {
                    d - sub[i] * c_prime[(i - 1) * n_t + k]
                };
                if !(denom.abs() > 1e-300) || !denom.is_finite() {
                    return Err(GprgError::NotCoercive {
                        detail: format!("singular radial system at row {i}, mode {k}"),
                    });
                }
                inv_denom[i * n_t + k] = 1.0 / denom;
                c_prime[i * n_t + k] = if i + 1 < n_r { sup[i] / denom } else { 0.0 };
            }
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            n_r,
            n_theta: n_t,
            forward: planner.plan_fft_forward(n_t),
            inverse: planner.plan_fft_inverse(n_t),
            sub,
            inv_denom,
            c_prime,
        })
    }

    pub fn solve(&self, b: &Field) -> Field {
        let (n_r, n_t) = (self.n_r, self.n_theta);
        assert_eq!(b.grid().len(), n_r * n_t, "grid mismatch in mode solver");
        let mut buf = b.values().to_vec();
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for row in buf.chunks_exact_mut(n_t) {
            self.forward.process_with_scratch(row, &mut scratch);
        }
        for i in 0..n_r {
            let (head, tail) = buf.split_at_mut(i * n_t);
            let cur = &mut tail[..n_t];
            let inv = &self.inv_denom[i * n_t..(i + 1) * n_t];
            if i == 0 {
                for (x, d) in cur.iter_mut().zip(inv) {
                    *x *= *d;
                }
            } else {
                let prev = &head[(i - 1) * n_t..];
                let a = self.sub[i];
                for ((x, p), d) in cur.iter_mut().zip(prev).zip(inv) {
                    *x = (*x - p * a) * *d;
                }
            }
        }
        for i in (0..n_r.saturating_sub(1)).rev() {
            let (head, tail) = buf.split_at_mut((i + 1) * n_t);
            let cur = &mut head[i * n_t..];
            let next = &tail[..n_t];
            let cp = &self.c_prime[i * n_t..(i + 1) * n_t];
            for ((x, nx), c) in cur.iter_mut().zip(next).zip(cp) {
                *x -= nx * *c;
            }
        }
        let scale = 1.0 / n_t as f64;
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        for row in buf.chunks_exact_mut(n_t) {
            self.inverse.process_with_scratch(row, &mut scratch);
            for x in row.iter_mut() {
                *x *= scale;
            }
        }
        Field::from_values(b.grid(), buf).expect("length checked above")
    }
}
