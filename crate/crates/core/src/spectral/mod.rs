//! Constrained second-order analysis at a converged state: tangent-space
//! Hessian eigenvalues, the Morse–Bott verdict, and the extreme eigenvalues
//! of the preconditioned pencil on the normal space.

pub mod lobpcg;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use crate::error::{GprgError, Result};
use crate::grid::Field;
use crate::operators::OperatorSet;
use crate::precond::{assemble, PreconditionerHandle, PreconditionerKind, PreconditionerSpec};

pub use lobpcg::{lobpcg, Deflation, LobpcgOptions, LobpcgResult, Pencil};

/// Principal angles above this fail the alignment sub-verdict.
pub const ALIGNMENT_TOL: f64 = 1e-3;
/// Relative agreement of consecutive upper-bound estimates.
pub const L_AGREEMENT: f64 = 5e-3;
/// `‖L_z φ‖` below this (relative to `‖φ‖`) means a rotationally symmetric state.
const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct EigenOptions {
    /// Relative eigen-residual target.
    pub tol: f64,
    pub max_iters: usize,
    /// Shift `σ` of the inverse `(E″ − λ̃ + σ)⁻¹` used as preconditioner.
    pub shift_sigma: f64,
    /// Relative tolerance of that inner inverse.
    pub inner_tol: f64,
    /// Extra block vectors beyond the requested count.
    pub extra: usize,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 400,
            shift_sigma: 1e-3,
            inner_tol: 1e-6,
            extra: 2,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Eigenpair {
    pub value: f64,
    pub vector: Field,
    pub residual: f64,
}

/// `i φ` and `i L_z φ`, the infinitesimal phase and rotation generators;
/// the second is dropped for a rotationally symmetric state.
pub fn symmetry_generators(ops: &OperatorSet, state: &Field) -> Vec<Field> {
    let mut out = vec![state.times_i()];
    let lz = ops.apply_lz(state);
    if lz.norm_l2() > SYMMETRY_TOL * state.norm_l2() {
        out.push(lz.times_i());
    }
    out
}

/// Pointwise random complex multiples of `state`, seeded.
fn random_block(state: &Field, n: usize, seed: u64) -> Vec<Field> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = 1e-3 * state.max_abs();
    (0..n)
        .map(|_| {
            let values = state
                .values()
                .iter()
                .map(|z| {
                    let a: f64 = rng.gen_range(-1.0..1.0);
                    let b: f64 = rng.gen_range(-1.0..1.0);
                    Complex64::new(a, b) * (z.norm() + floor)
                })
                .collect();
            Field::from_values(state.grid(), values).expect("same grid")
        })
        .collect()
}

/// The shifted Hessian inverse `(E″ − λ̃ + σ)⁻¹`.
fn shift_invert(ops: &OperatorSet, state: &Field, opts: &EigenOptions) -> Result<PreconditionerHandle> {
    let spec = PreconditionerSpec::p4(opts.shift_sigma).with_inverse_tol(opts.inner_tol);
    assemble(&spec, ops, state)
}

fn collect_pairs(res: LobpcgResult) -> Vec<Eigenpair> {
    res.values
        .into_iter()
        .zip(res.vectors)
        .zip(res.residuals)
        .map(|((value, vector), residual)| Eigenpair {
            value,
            vector,
            residual,
        })
        .collect()
}

fn not_converged(res: &LobpcgResult) -> GprgError {
    GprgError::EigenNotConverged {
        iterations: res.iterations,
        residual: res.residuals.iter().cloned().fold(0.0, f64::max),
    }
}

/// The `k` smallest eigenpairs of `E″(φ)` on the tangent space
/// `{v : (v, φ) = 0}`, ascending and L²-orthonormal.
pub fn hessian_tangent_eigs(
    ops: &OperatorSet,
    state: &Field,
    k: usize,
    opts: &EigenOptions,
) -> Result<Vec<Eigenpair>> {
    let deflation = Deflation::new(std::slice::from_ref(state));
    let handle = shift_invert(ops, state, opts)?;
    let apply_a = |v: &Field| ops.apply_hessian(state, v);
    let precond = |r: &Field| handle.apply_inverse(r);
    let pencil = Pencil {
        apply_a: &apply_a,
        apply_b: None,
        precond: &precond,
        shift: 0.0,
    };
    let mut initial = symmetry_generators(ops, state);
    let m = k + opts.extra;
    let fill = m.saturating_sub(initial.len());
    initial.extend(random_block(state, fill, opts.seed));
    initial.truncate(m.max(k));
    let res = lobpcg(
        &pencil,
        &deflation,
        initial,
        k,
        &LobpcgOptions {
            tol: opts.tol,
            max_iters: opts.max_iters,
            largest: false,
        },
    )?;
    if !res.converged {
        return Err(not_converged(&res));
    }
    Ok(collect_pairs(res))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MorseBottVerdict {
    /// Number of independent symmetry generators (2, or 1 for a
    /// rotationally symmetric state).
    pub symmetry_dim: usize,
    pub lambda1_degenerate: bool,
    /// `None` when the symmetry dimension is 1.
    pub lambda2_degenerate: Option<bool>,
    /// First eigenvalue above the symmetry block minus `λ_g`.
    pub gap: f64,
    pub gap_ok: bool,
    /// Principal angles between the lowest eigenvectors and the generators.
    pub angles: Vec<f64>,
    pub aligned: bool,
    pub is_morse_bott: bool,
}

/// Principal angles between two families of fields in the L² product,
/// largest first.
pub fn principal_angles(a: &[Field], b: &[Field]) -> Vec<f64> {
    let qa = orthonormalize(a);
    let qb = orthonormalize(b);
    if qa.is_empty() || qb.is_empty() {
        return Vec::new();
    }
    // sines from the component of span(a) outside span(b)
    let residual: Vec<Field> = qa
        .iter()
        .map(|v| {
            let mut w = v.clone();
            for _ in 0..2 {
                for q in &qb {
                    w.axpy(-q.inner_l2(&w), q);
                }
            }
            w
        })
        .collect();
    let g = lobpcg::cross_gram(&residual, &residual);
    let eig = SymmetricEigen::new(g);
    let mut angles: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|s2| s2.max(0.0).sqrt().min(1.0).asin())
        .collect();
    angles.sort_by(|x, y| y.total_cmp(x));
    angles
}

fn orthonormalize(fs: &[Field]) -> Vec<Field> {
    let mut out: Vec<Field> = Vec::new();
    for f in fs {
        let mut w = f.clone();
        for _ in 0..2 {
            for q in &out {
                w.axpy(-q.inner_l2(&w), q);
            }
        }
        let n = w.norm_l2();
        if n > 1e-12 * f.norm_l2() && n > 0.0 {
            out.push(w.scaled(1.0 / n));
        }
    }
    out
}

/// Morse–Bott verdict from tangent eigenpairs sorted ascending.
pub fn morse_bott_check(
    ops: &OperatorSet,
    state: &Field,
    lambda_g: f64,
    eigs: &[Eigenpair],
    tol_degenerate: f64,
    tol_gap: f64,
) -> Result<MorseBottVerdict> {
    let generators = symmetry_generators(ops, state);
    let dim = generators.len();
    if eigs.len() < dim + 1 {
        return Err(GprgError::InvalidArgument(format!(
            "{} tangent eigenvalues given, at least {} needed",
            eigs.len(),
            dim + 1
        )));
    }
    let degenerate = |v: f64| (v - lambda_g).abs() <= tol_degenerate * lambda_g.abs();
    let lambda1_degenerate = degenerate(eigs[0].value);
    let lambda2_degenerate = (dim == 2).then(|| degenerate(eigs[1].value));
    let gap = eigs[dim].value - lambda_g;
    let gap_ok = gap >= tol_gap;
    let lowest: Vec<Field> = eigs[..dim].iter().map(|p| p.vector.clone()).collect();
    let angles = principal_angles(&lowest, &generators);
    let aligned = angles.len() == dim && angles.iter().all(|&a| a <= ALIGNMENT_TOL);
    let is_morse_bott = lambda1_degenerate && lambda2_degenerate.unwrap_or(true) && gap_ok && aligned;
    Ok(MorseBottVerdict {
        symmetry_dim: dim,
        lambda1_degenerate,
        lambda2_degenerate,
        gap,
        gap_ok,
        angles,
        aligned,
        is_morse_bott,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PencilBounds {
    pub kind: PreconditionerKind,
    pub mu: f64,
    pub l: f64,
    /// Two consecutive upper estimates agreed within [`L_AGREEMENT`].
    pub l_converged: bool,
    /// Largest Ritz value per subspace size.
    pub l_history: Vec<f64>,
    pub mu_residual: f64,
    pub lambda_g: f64,
}

#[derive(Debug, Clone)]
pub struct PencilOptions {
    pub eig: EigenOptions,
    /// Iteration cap of each upper-bound run.
    pub upper_iters: usize,
    /// Number of ascending subspace sizes tried for the upper bound.
    pub upper_levels: usize,
}

impl Default for PencilOptions {
    fn default() -> Self {
        Self {
            eig: EigenOptions::default(),
            upper_iters: 60,
            upper_levels: 4,
        }
    }
}

/// Extreme eigenvalues of `(E″(φ) − λ̃, P_φ)` on the normal space
/// L²-orthogonal to `φ`, `iφ` and `iL_zφ`.
pub fn pencil_extremes(
    ops: &OperatorSet,
    state: &Field,
    handle: &PreconditionerHandle,
    k_each: usize,
    opts: &PencilOptions,
) -> Result<PencilBounds> {
    if k_each == 0 {
        return Err(GprgError::InvalidArgument("k_each must be positive".into()));
    }
    let lambda_g = ops.lambda_tilde(state);
    let mut constraints = vec![state.clone()];
    constraints.extend(symmetry_generators(ops, state));
    let deflation = Deflation::new(&constraints);
    let apply_a = |v: &Field| ops.apply_hessian_shifted(state, v, -lambda_g);
    let apply_b = |v: &Field| handle.apply(v);

    let inverse = shift_invert(ops, state, &opts.eig)?;
    let lower_pc = |r: &Field| inverse.apply_inverse(r);
    let lower = lobpcg(
        &Pencil {
            apply_a: &apply_a,
            apply_b: Some(&apply_b),
            precond: &lower_pc,
            shift: lambda_g,
        },
        &deflation,
        random_block(state, k_each + opts.eig.extra, opts.eig.seed),
        k_each,
        &LobpcgOptions {
            tol: opts.eig.tol,
            max_iters: opts.eig.max_iters,
            largest: false,
        },
    )?;
    if !lower.converged {
        return Err(not_converged(&lower));
    }

    let upper_pc = |r: &Field| Ok(handle.apply_inverse_approx(r));
    let upper_pencil = Pencil {
        apply_a: &apply_a,
        apply_b: Some(&apply_b),
        precond: &upper_pc,
        shift: lambda_g,
    };
    let mut l_history: Vec<f64> = Vec::new();
    let mut l_converged = false;
    let mut warm: Vec<Field> = Vec::new();
    for level in 0..opts.upper_levels.max(1) {
        let size = k_each << level;
        let mut block = warm.clone();
        block.extend(random_block(
            state,
            size + opts.eig.extra - block.len().min(size + opts.eig.extra),
            opts.eig.seed.wrapping_add(1 + level as u64),
        ));
        let res = lobpcg(
            &upper_pencil,
            &deflation,
            block,
            size,
            &LobpcgOptions {
                tol: opts.eig.tol,
                max_iters: opts.upper_iters,
                largest: true,
            },
        )?;
        let top = res.values[0];
        log::debug!("upper bound level {level}: block {size}, estimate {top:.10}");
        if let Some(&prev) = l_history.last() {
            if (top - prev).abs() <= L_AGREEMENT * top.abs() {
                l_converged = true;
            }
        }
        l_history.push(top);
        warm = res.vectors;
        if l_converged {
            break;
        }
    }
    let l = l_history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(PencilBounds {
        kind: handle.kind(),
        mu: lower.values[0],
        l,
        l_converged,
        l_history,
        mu_residual: lower.residuals[0],
        lambda_g,
    })
}

/// Optimal fixed step and the predicted contraction factor.
pub fn theoretical_rate(mu: f64, l: f64, kind: PreconditionerKind) -> Result<(f64, f64)> {
    if !(mu > 0.0 && mu <= l && l.is_finite()) {
        return Err(GprgError::InvalidArgument(format!(
            "spectral bounds must satisfy 0 < mu <= L (mu = {mu}, L = {l})"
        )));
    }
    Ok(match kind {
        PreconditionerKind::P4 => (2.0 / (l + mu), (l - mu) / (l + mu)),
        _ => (1.0 / l, (1.0 - mu / l).sqrt()),
    })
}

/// Closed-form lower bound of the P4 pencil from the tangent gap.
pub fn p4_closed_form_mu(gap: f64, sigma0: f64) -> f64 {
    gap / (gap + sigma0)
}

#[derive(Debug, Clone)]
pub struct SpectrumReport {
    pub lambda_g: f64,
    pub tangent_eigs: Vec<Eigenpair>,
    pub morse_bott: Option<MorseBottVerdict>,
    pub bounds: PencilBounds,
    pub sigma0: Option<f64>,
    pub tau_star: f64,
    pub rho: f64,
    /// Free-form diagnostics, e.g. `L_not_converged`.
    pub flags: Vec<String>,
}

impl SpectrumReport {
    pub fn new(
        lambda_g: f64,
        tangent_eigs: Vec<Eigenpair>,
        morse_bott: Option<MorseBottVerdict>,
        bounds: PencilBounds,
        sigma0: Option<f64>,
    ) -> Result<Self> {
        let (tau_star, rho) = theoretical_rate(bounds.mu, bounds.l, bounds.kind)?;
        let mut flags = Vec::new();
        if !bounds.l_converged {
            flags.push("L_not_converged".to_string());
        }
        if bounds.kind == PreconditionerKind::P4 && (bounds.l - 1.0).abs() > 1e-2 {
            flags.push("L_differs_from_one".to_string());
        }
        if let (Some(mb), Some(s)) = (&morse_bott, sigma0) {
            if bounds.kind == PreconditionerKind::P4
                && (bounds.mu - p4_closed_form_mu(mb.gap, s)).abs() > 1e-4
            {
                flags.push("mu_closed_form_mismatch".to_string());
            }
        }
        Ok(Self {
            lambda_g,
            tangent_eigs,
            morse_bott,
            bounds,
            sigma0,
            tau_star,
            rho,
            flags,
        })
    }

    /// Flat key-value document.
    pub fn to_json(&self) -> Value {
        let mut map = BTreeMap::new();
        map.insert("lambda_g".to_string(), Value::from(self.lambda_g));
        for (n, p) in self.tangent_eigs.iter().enumerate() {
            map.insert(format!("eig_{}", n + 1), Value::from(p.value));
        }
        if let Some(mb) = &self.morse_bott {
            map.insert("gap".into(), Value::from(mb.gap));
            map.insert("is_morse_bott".into(), Value::from(mb.is_morse_bott));
            map.insert("symmetry_dim".into(), Value::from(mb.symmetry_dim));
            map.insert("lambda1_degenerate".into(), Value::from(mb.lambda1_degenerate));
            map.insert(
                "lambda2_degenerate".into(),
                mb.lambda2_degenerate.map_or(Value::Null, Value::from),
            );
            map.insert("gap_ok".into(), Value::from(mb.gap_ok));
            map.insert("aligned".into(), Value::from(mb.aligned));
            for (n, a) in mb.angles.iter().enumerate() {
                map.insert(format!("angle_{}", n + 1), Value::from(*a));
            }
        }
        map.insert("mu".into(), Value::from(self.bounds.mu));
        map.insert("L".into(), Value::from(self.bounds.l));
        map.insert("L_converged".into(), Value::from(self.bounds.l_converged));
        map.insert("tau_star".into(), Value::from(self.tau_star));
        map.insert("rho".into(), Value::from(self.rho));
        map.insert("precond_kind".into(), Value::from(self.bounds.kind.to_string()));
        if let Some(s) = self.sigma0 {
            map.insert("sigma0".into(), Value::from(s));
        }
        map.insert("flags".into(), Value::from(self.flags.join(";")));
        Value::Object(map.into_iter().collect())
    }
}

/// Dense Gram helper for tests and diagnostics.
pub fn gram_matrix(fs: &[Field]) -> DMatrix<f64> {
    lobpcg::cross_gram(fs, fs)
}
