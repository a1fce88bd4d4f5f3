//! Preconditioned Riemannian gradient iteration with staged preconditioner
//! schedules and full convergence histories.

use std::fmt;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GprgError, Result};
use crate::grid::{Field, PolarGrid};
use crate::operators::{OperatorSet, StateEval};
use crate::precond::{assemble_with, DirectSolvers, PreconditionerHandle, PreconditionerSpec};
use crate::riemannian::{line_search, riemannian_gradient_with, StepPolicy};

/// Highest angular harmonic in the `perturbed` initial guess.
const PERTURB_MODES: i32 = 6;
/// Relative energy increase on an accepted step that aborts a run.
const DIVERGENCE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub precond: PreconditionerSpec,
    #[serde(default)]
    pub policy: StepPolicy,
    pub max_iters: usize,
    pub stop_residual: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_energy_delta: Option<f64>,
}

impl StageSpec {
    pub fn new(precond: PreconditionerSpec, policy: StepPolicy, max_iters: usize, stop_residual: f64) -> Self {
        Self {
            precond,
            policy,
            max_iters,
            stop_residual,
            stop_energy_delta: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.precond.validate()?;
        self.policy.validate()?;
        if !(self.stop_residual.is_finite() && self.stop_residual > 0.0) {
            return Err(GprgError::Config(format!(
                "stop_residual must be positive, got {}",
                self.stop_residual
            )));
        }
        if let Some(d) = self.stop_energy_delta {
            if !(d.is_finite() && d > 0.0) {
                return Err(GprgError::Config(format!(
                    "stop_energy_delta must be positive, got {d}"
                )));
            }
        }
        Ok(())
    }
}

/// One logged iterate. Row 0 is the stage's starting state; row `n > 0`
/// describes `φⁿ` together with the step `τ` and `‖d‖_P` that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRow {
    pub n: usize,
    pub energy: f64,
    pub lambda_tilde: f64,
    pub residual_inf: f64,
    pub step_tau: f64,
    pub direction_p_norm: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopStatus {
    ResidualMet,
    EnergyDeltaMet,
    MaxIters,
    Error(String),
}

impl fmt::Display for StopStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ResidualMet => f.write_str("residual_met"),
            Self::EnergyDeltaMet => f.write_str("energy_delta_met"),
            Self::MaxIters => f.write_str("max_iters"),
            Self::Error(e) => write!(f, "error: {e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRecord {
    pub rows: Vec<IterationRow>,
    pub status: StopStatus,
}

pub const CSV_HEADER: &str = "n,energy,lambda,residual_inf,tau,dnorm_P,wall_s";

impl ConvergenceRecord {
    /// Number of steps taken (rows minus the initial row).
    pub fn iterations(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }

    pub fn last(&self) -> Option<&IterationRow> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.6}",
                r.n,
                r.energy,
                r.lambda_tilde,
                r.residual_inf,
                r.step_tau,
                r.direction_p_norm,
                r.wall_seconds
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ASCII")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialGuess {
    Gaussian,
    GaussianWinding { m: i32 },
    Perturbed { seed: u64, amplitude: f64 },
}

/// Deterministic normalized starting field.
///
/// `perturbed` adds `amplitude` times a seeded random combination of the
/// harmonic-oscillator profiles `r^|m| e^{−r²/2} e^{imΘ}`, `|m| ≤ 6`, each
/// scaled to unit peak; this breaks rotational symmetry so that vortices
/// can enter while keeping the start smooth.
pub fn initial_guess(kind: InitialGuess, grid: &Arc<PolarGrid>) -> Field {
    let gaussian = |r: f64| (-r * r / 2.0).exp();
    let field = match kind {
        InitialGuess::Gaussian => Field::from_fn(grid, |r, _| Complex64::new(gaussian(r), 0.0)),
        InitialGuess::GaussianWinding { m } => Field::from_fn(grid, |r, t| {
            Complex64::from_polar(r.powi(m.abs()) * gaussian(r), m as f64 * t)
        }),
        InitialGuess::Perturbed { seed, amplitude } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let modes: Vec<(i32, Complex64)> = (-PERTURB_MODES..=PERTURB_MODES)
                .map(|m| {
                    let c = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                    (m, c)
                })
                .collect();
            Field::from_fn(grid, |r, t| {
                let noise: Complex64 = modes
                    .iter()
                    .map(|&(m, c)| c * Complex64::from_polar(unit_harmonic(m, r), m as f64 * t))
                    .sum();
                gaussian(r) + amplitude * noise
            })
        }
    };
    field.normalized().expect("initial guess is nonzero")
}

/// `r^|m| e^{−r²/2}` scaled to peak value 1 (attained at `r² = |m|`).
fn unit_harmonic(m: i32, r: f64) -> f64 {
    let m = f64::from(m.abs());
    if m == 0.0 {
        return (-r * r / 2.0).exp();
    }
    ((r * r / m).ln() * m / 2.0 + (m - r * r) / 2.0).exp()
}

/// Performs one step from `state` with an already assembled preconditioner.
/// `eval` must describe `state`. Returns the next state, its evaluation and
/// the logged row (with `n` and wall time left zero).
pub fn step_with(
    ops: &OperatorSet,
    state: &Field,
    eval: &StateEval,
    handle: &PreconditionerHandle,
    policy: &StepPolicy,
) -> Result<(Field, StateEval, IterationRow)> {
    let grad = riemannian_gradient_with(state, &eval.h_phi_phi, handle)?;
    let out = line_search(ops, state, eval.energy, &grad.direction, grad.norm_p_sq, policy)?;
    if out.energy_change > DIVERGENCE_TOL * eval.energy.abs() {
        return Err(GprgError::Divergence {
            before: eval.energy,
            after: out.trial_energy,
        });
    }
    let next_eval = ops.evaluate(&out.trial);
    let row = IterationRow {
        n: 0,
        energy: next_eval.energy,
        lambda_tilde: next_eval.lambda_tilde,
        residual_inf: next_eval.residual_inf,
        step_tau: out.tau,
        direction_p_norm: grad.norm_p_sq.max(0.0).sqrt(),
        wall_seconds: 0.0,
    };
    Ok((out.trial, next_eval, row))
}

/// One P-RG step: Riemannian gradient `d`, step size `τ`, then
/// `retract(state, −τd)`.
pub fn step(
    ops: &OperatorSet,
    state: &Field,
    handle: &PreconditionerHandle,
    policy: &StepPolicy,
) -> Result<(Field, IterationRow)> {
    let eval = ops.evaluate(state);
    step_with(ops, state, &eval, handle, policy).map(|(s, _, r)| (s, r))
}

/// Result of a completed multi-stage run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: Field,
    pub records: Vec<ConvergenceRecord>,
}

/// A run aborted by an error; the records up to and including the failing
/// stage are kept, as is the last accepted state.
#[derive(Debug)]
pub struct RunFailure {
    pub error: GprgError,
    pub partial: RunOutcome,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (after {} stage(s))",
            self.error,
            self.partial.records.len()
        )
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Runs `stages` in order starting from `initial` (normalized on entry).
pub fn run(
    stages: &[StageSpec],
    ops: &OperatorSet,
    initial: &Field,
) -> std::result::Result<RunOutcome, RunFailure> {
    let mut outcome = RunOutcome {
        state: initial.clone(),
        records: Vec::new(),
    };
    let fail = |error: GprgError, partial: RunOutcome| RunFailure { error, partial };
    if stages.is_empty() {
        return Err(fail(
            GprgError::InvalidArgument("run needs at least one stage".into()),
            outcome,
        ));
    }
    for s in stages {
        if let Err(e) = s.validate() {
            return Err(fail(e, outcome));
        }
    }
    match initial.normalized() {
        Some(s) => outcome.state = s,
        None => {
            return Err(fail(
                GprgError::InvalidArgument("initial field is zero".into()),
                outcome,
            ))
        }
    }
    for (k, stage) in stages.iter().enumerate() {
        let (state, record, error) = run_stage(stage, ops, outcome.state.clone());
        log::info!(
            "stage {}: {} after {} iterations",
            k + 1,
            record.status,
            record.iterations()
        );
        outcome.state = state;
        outcome.records.push(record);
        if let Some(e) = error {
            return Err(fail(e, outcome));
        }
    }
    Ok(outcome)
}

fn run_stage(
    stage: &StageSpec,
    ops: &OperatorSet,
    mut state: Field,
) -> (Field, ConvergenceRecord, Option<GprgError>) {
    let start = Instant::now();
    let mut eval = ops.evaluate(&state);
    let mut rows = vec![IterationRow {
        n: 0,
        energy: eval.energy,
        lambda_tilde: eval.lambda_tilde,
        residual_inf: eval.residual_inf,
        step_tau: 0.0,
        direction_p_norm: 0.0,
        wall_seconds: 0.0,
    }];
    let finish = |state, rows, status, err| (state, ConvergenceRecord { rows, status }, err);
    let shared = match DirectSolvers::new(ops, if stage.precond.kind.is_state_dependent() { 0.0 } else { stage.precond.shift_a }) {
        Ok(d) => d,
        Err(e) => return finish(state, rows, StopStatus::Error(e.to_string()), Some(e)),
    };
    let mut fixed: Option<PreconditionerHandle> = None;
    let mut n = 0;
    loop {
        if eval.residual_inf <= stage.stop_residual {
            return finish(state, rows, StopStatus::ResidualMet, None);
        }
        if n >= stage.max_iters {
            return finish(state, rows, StopStatus::MaxIters, None);
        }
        let frozen;
        let handle = if stage.precond.kind.is_state_dependent() {
            match assemble_with(&stage.precond, ops, &state, Some(&shared)) {
                Ok(h) => {
                    frozen = h;
                    &frozen
                }
                Err(e) => return finish(state, rows, StopStatus::Error(e.to_string()), Some(e)),
            }
        } else {
            if fixed.is_none() {
                match assemble_with(&stage.precond, ops, &state, Some(&shared)) {
                    Ok(h) => fixed = Some(h),
                    Err(e) => {
                        return finish(state, rows, StopStatus::Error(e.to_string()), Some(e))
                    }
                }
            }
            fixed.as_ref().expect("assembled above")
        };
        match step_with(ops, &state, &eval, handle, &stage.policy) {
            Ok((next, next_eval, mut row)) => {
                n += 1;
                row.n = n;
                row.wall_seconds = start.elapsed().as_secs_f64();
                let delta = (row.energy - eval.energy).abs();
                rows.push(row);
                state = next;
                eval = next_eval;
                if n % 100 == 0 {
                    log::debug!(
                        "iter {n}: E = {:.15e}, residual = {:.3e}, tau = {:.3e}",
                        row.energy,
                        row.residual_inf,
                        row.step_tau
                    );
                }
                if eval.residual_inf > stage.stop_residual {
                    if let Some(tol) = stage.stop_energy_delta {
                        if delta <= tol {
                            return finish(state, rows, StopStatus::EnergyDeltaMet, None);
                        }
                    }
                }
            }
            Err(e) => return finish(state, rows, StopStatus::Error(e.to_string()), Some(e)),
        }
    }
}
