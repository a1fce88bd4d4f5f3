//! Local convergence-rate experiments: fixed-step runs started from a
//! seeded perturbation of a converged reference, tail fits of the energy
//! error, and the energy / state error equivalence band.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{GprgError, Result};
use crate::grid::Field;
use crate::operators::OperatorSet;
use crate::precond::{assemble, assemble_with, DirectSolvers, PreconditionerHandle, PreconditionerKind, PreconditionerSpec};
use crate::riemannian::StepPolicy;
use crate::solver::{step_with, IterationRow};
use crate::spectral::{pencil_extremes, theoretical_rate, PencilBounds, PencilOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateSettings {
    /// Discrete H¹ size of the initial perturbation.
    pub perturbation: f64,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once `E − E_g` falls to this level.
    pub energy_gap_stop: f64,
    /// The fit window opens once the residual drops below this.
    pub fit_residual: f64,
    /// Fraction of the remaining iterations used for the fit.
    pub fit_fraction: f64,
}

impl Default for RateSettings {
    fn default() -> Self {
        Self {
            perturbation: 2e-2,
            seed: 1,
            max_iters: 2000,
            energy_gap_stop: 1e-14,
            fit_residual: 1e-4,
            fit_fraction: 0.6,
        }
    }
}

impl RateSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(GprgError::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive(self.perturbation, "perturbation")?;
        positive(self.energy_gap_stop, "energy_gap_stop")?;
        positive(self.fit_residual, "fit_residual")?;
        if !(self.fit_fraction > 0.0 && self.fit_fraction <= 1.0) {
            return Err(GprgError::Config(format!(
                "fit_fraction must lie in (0, 1], got {}",
                self.fit_fraction
            )));
        }
        if self.max_iters == 0 {
            return Err(GprgError::Config("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// `normalize(φ_g + δ)` with `δ = P1⁻¹ ξ` for seeded pointwise noise `ξ`,
/// scaled to `‖δ‖_{H¹} = size`.
pub fn perturbed_start(ops: &OperatorSet, reference: &Field, size: f64, seed: u64) -> Result<Field> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..reference.grid().len())
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let noise = Field::from_values(reference.grid(), values)?;
    let p1 = assemble(&PreconditionerSpec::new(PreconditionerKind::P1), ops, reference)?;
    let delta = p1.apply_inverse(&noise)?;
    let delta = delta.scaled(size / delta.norm_h1_discrete());
    reference
        .add(&delta)
        .normalized()
        .ok_or_else(|| GprgError::InvalidArgument("perturbed state vanished".into()))
}

/// Per-row angular spectral transforms for continuous rotations.
struct AngularSpectrum {
    fwd: Arc<dyn rustfft::Fft<f64>>,
    inv: Arc<dyn rustfft::Fft<f64>>,
    n: usize,
}

impl AngularSpectrum {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            n,
        }
    }

    fn mode(&self, k: usize) -> f64 {
        if 2 * k < self.n {
            k as f64
        } else {
            k as f64 - self.n as f64
        }
    }

    /// `u(θ − β)` together with `∂_β` of it.
    fn rotate(&self, u: &Field, beta: f64) -> (Field, Field) {
        let n = self.n;
        let mut rotated = u.values().to_vec();
        let mut deriv = vec![Complex64::new(0.0, 0.0); rotated.len()];
        for (row, drow) in rotated.chunks_exact_mut(n).zip(deriv.chunks_exact_mut(n)) {
            self.fwd.process(row);
            for (k, (z, d)) in row.iter_mut().zip(drow.iter_mut()).enumerate() {
                if 2 * k == n {
                    // the Nyquist mode stays real
                    *z *= (0.5 * n as f64 * beta).cos() / n as f64;
                    *d = Complex64::new(0.0, 0.0);
                } else {
                    let m = self.mode(k);
                    *z *= Complex64::from_polar(1.0 / n as f64, -m * beta);
                    *d = *z * Complex64::new(0.0, -m);
                }
            }
            self.inv.process(row);
            self.inv.process(drow);
        }
        let grid = u.grid();
        (
            Field::from_values(grid, rotated).expect("same grid"),
            Field::from_values(grid, deriv).expect("same grid"),
        )
    }
}

/// Distance from `state` to the symmetry orbit `{e^{iα} R_β φ_g}` of the
/// reference, in the discrete H¹ norm. The alignment minimizes the L²
/// distance by Gauss–Newton in `(α, β)`.
pub fn orbit_distance_h1(state: &Field, reference: &Field) -> f64 {
    let spectrum = AngularSpectrum::new(state.grid().n_theta());
    let overlap: Complex64 = state
        .values()
        .iter()
        .zip(reference.values())
        .enumerate()
        .map(|(k, (a, b))| b * a.conj() * state.grid().weight(k / state.grid().n_theta()))
        .sum();
    let mut alpha = overlap.arg();
    let mut beta = 0.0;
    let mut aligned = state.with_phase(alpha);
    for _ in 0..20 {
        let (rot, d_beta) = spectrum.rotate(state, beta);
        let psi = rot.with_phase(alpha);
        let j1 = psi.times_i();
        let j2 = d_beta.with_phase(alpha);
        let d = psi.sub(reference);
        let (a11, a12, a22) = (j1.inner_l2(&j1), j1.inner_l2(&j2), j2.inner_l2(&j2));
        let (b1, b2) = (-j1.inner_l2(&d), -j2.inner_l2(&d));
        let det = a11 * a22 - a12 * a12;
        aligned = psi;
        if !(det > 0.0) {
            break;
        }
        let da = (a22 * b1 - a12 * b2) / det;
        let db = (a11 * b2 - a12 * b1) / det;
        alpha += da;
        beta += db;
        if da.abs() + db.abs() < 1e-15 {
            let (rot, _) = spectrum.rotate(state, beta);
            aligned = rot.with_phase(alpha);
            break;
        }
    }
    aligned.sub(reference).norm_h1_discrete()
}

/// One iterate of a fixed-step run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateSample {
    pub row: IterationRow,
    /// `E(φⁿ) − E(φ_g)`, evaluated from the difference of the states.
    pub energy_gap: f64,
    /// H¹ distance to the symmetry orbit of `φ_g`.
    pub distance_h1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RateStatus {
    GapMet,
    MaxIters,
    Error(String),
}

impl fmt::Display for RateStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::GapMet => f.write_str("gap_met"),
            Self::MaxIters => f.write_str("max_iters"),
            Self::Error(e) => write!(f, "error: {e}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixedRun {
    pub samples: Vec<RateSample>,
    pub status: RateStatus,
}

impl FixedRun {
    pub fn iterations(&self) -> usize {
        self.samples.len().saturating_sub(1)
    }
}

/// Fixed-step P-RG from `start` with preconditioner `spec` and step `tau`,
/// measuring the energy gap to `reference` at every iterate.
pub fn fixed_step_run(
    ops: &OperatorSet,
    reference: &Field,
    start: &Field,
    spec: &PreconditionerSpec,
    tau: f64,
    settings: &RateSettings,
) -> Result<FixedRun> {
    let policy = StepPolicy::Fixed { tau };
    policy.validate()?;
    let shared = DirectSolvers::new(ops, if spec.kind.is_state_dependent() { 0.0 } else { spec.shift_a })?;
    let mut fixed: Option<PreconditionerHandle> = None;
    let mut state = start.clone();
    let mut eval = ops.evaluate(&state);
    let sample = |state: &Field, row: IterationRow| RateSample {
        row,
        energy_gap: ops.energy_difference(state, reference),
        distance_h1: orbit_distance_h1(state, reference),
    };
    let mut samples = vec![sample(
        &state,
        IterationRow {
            n: 0,
            energy: eval.energy,
            lambda_tilde: eval.lambda_tilde,
            residual_inf: eval.residual_inf,
            step_tau: 0.0,
            direction_p_norm: 0.0,
            wall_seconds: 0.0,
        },
    )];
    for n in 1..=settings.max_iters {
        if samples.last().expect("non-empty").energy_gap <= settings.energy_gap_stop {
            return Ok(FixedRun {
                samples,
                status: RateStatus::GapMet,
            });
        }
        let frozen;
        let handle = if spec.kind.is_state_dependent() {
            frozen = assemble_with(spec, ops, &state, Some(&shared));
            match &frozen {
                Ok(h) => h,
                Err(e) => {
                    return Ok(FixedRun {
                        samples,
                        status: RateStatus::Error(e.to_string()),
                    })
                }
            }
        } else {
            if fixed.is_none() {
                fixed = Some(assemble_with(spec, ops, &state, Some(&shared))?);
            }
            fixed.as_ref().expect("assembled above")
        };
        match step_with(ops, &state, &eval, handle, &policy) {
            Ok((next, next_eval, mut row)) => {
                row.n = n;
                state = next;
                eval = next_eval;
                samples.push(sample(&state, row));
            }
            Err(e) => {
                return Ok(FixedRun {
                    samples,
                    status: RateStatus::Error(e.to_string()),
                })
            }
        }
    }
    let status = if samples.last().expect("non-empty").energy_gap <= settings.energy_gap_stop {
        RateStatus::GapMet
    } else {
        RateStatus::MaxIters
    };
    Ok(FixedRun { samples, status })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailFit {
    /// Least-squares slope of `log₁₀ √(Eⁿ − E_g)` against `n`.
    pub slope: f64,
    pub rho: f64,
    /// First and last iterate used.
    pub window: (usize, usize),
    /// The residual never reached the threshold; the whole run was used.
    pub fallback: bool,
}

/// Tail fit over the last `fit_fraction` (at least two) of the iterates
/// after the residual first drops below `fit_residual`. Gaps at or below
/// `energy_gap_stop` are not resolved by the energy evaluation and are skipped.
/// With fewer than two resolved iterates past that point all resolved iterates
/// are used and the fit is marked as a fallback.
pub fn fit_tail(samples: &[RateSample], settings: &RateSettings) -> Option<TailFit> {
    let resolved_from = |open: usize| -> Vec<(f64, f64)> {
        samples[open..]
            .iter()
            .filter(|s| s.energy_gap > settings.energy_gap_stop)
            .map(|s| (s.row.n as f64, 0.5 * s.energy_gap.log10()))
            .collect()
    };
    let opened = samples
        .iter()
        .position(|s| s.row.residual_inf < settings.fit_residual)
        .map(resolved_from)
        .filter(|r| r.len() >= 2);
    let (resolved, fallback) = match opened {
        Some(r) => (r, false),
        None => (resolved_from(0), true),
    };
    let width = ((resolved.len() as f64 * settings.fit_fraction).round() as usize)
        .max(2)
        .min(resolved.len());
    let points = &resolved[resolved.len() - width..];
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some(TailFit {
        slope,
        rho: 10f64.powf(slope),
        window: (points[0].0 as usize, points[points.len() - 1].0 as usize),
        fallback,
    })
}

/// Smallest and largest `√(Eⁿ − E_g) / ‖φⁿ − φ_g‖_{H¹}` over the last
/// `count` iterates with positive gap and distance.
pub fn equivalence_band(samples: &[RateSample], count: usize) -> Option<(f64, f64)> {
    let start = samples.len().saturating_sub(count);
    let ratios: Vec<f64> = samples[start..]
        .iter()
        .filter(|s| s.energy_gap > 0.0 && s.distance_h1 > 0.0)
        .map(|s| s.energy_gap.sqrt() / s.distance_h1)
        .collect();
    if ratios.is_empty() {
        return None;
    }
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Some((lo, hi))
}

/// One line of the rate comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub precond: String,
    pub mu: f64,
    pub l: f64,
    pub tau_star: f64,
    pub rho_theory: f64,
    pub rho_fitted: Option<f64>,
    pub iters: usize,
    pub status: String,
}

pub const RATES_CSV_HEADER: &str = "precond,mu,L,tau_star,rho_theory,rho_fitted,iters,status";

impl RateRow {
    pub fn to_csv_line(&self) -> String {
        let fitted = self.rho_fitted.map_or_else(|| "nan".to_string(), |r| format!("{r:.16e}"));
        format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{}",
            self.precond, self.mu, self.l, self.tau_star, self.rho_theory, fitted, self.iters, self.status
        )
    }
}

pub fn rates_csv(rows: &[RateRow]) -> String {
    let mut out = String::from(RATES_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// Everything produced for one preconditioner by [`rate_experiment`].
#[derive(Debug, Clone)]
pub struct RateExperiment {
    pub bounds: PencilBounds,
    pub tau_star: f64,
    pub rho_theory: f64,
    pub run: FixedRun,
    pub fit: Option<TailFit>,
}

impl RateExperiment {
    pub fn row(&self) -> RateRow {
        RateRow {
            precond: self.bounds.kind.to_string(),
            mu: self.bounds.mu,
            l: self.bounds.l,
            tau_star: self.tau_star,
            rho_theory: self.rho_theory,
            rho_fitted: self.fit.map(|f| f.rho),
            iters: self.run.iterations(),
            status: self.run.status.to_string(),
        }
    }
}

/// Spectral bounds of `spec` at `reference`, the optimal fixed step, and a
/// fixed-step run from a seeded perturbation with its tail fit.
pub fn rate_experiment(
    ops: &OperatorSet,
    reference: &Field,
    spec: &PreconditionerSpec,
    settings: &RateSettings,
    pencil: &PencilOptions,
) -> Result<RateExperiment> {
    settings.validate()?;
    let handle = assemble(spec, ops, reference)?;
    let bounds = pencil_extremes(ops, reference, &handle, 2, pencil)?;
    let (tau_star, rho_theory) = theoretical_rate(bounds.mu, bounds.l, spec.kind)?;
    let start = perturbed_start(ops, reference, settings.perturbation, settings.seed)?;
    let run = fixed_step_run(ops, reference, &start, spec, tau_star, settings)?;
    let fit = fit_tail(&run.samples, settings);
    Ok(RateExperiment {
        bounds,
        tau_star,
        rho_theory,
        run,
        fit,
    })
}
