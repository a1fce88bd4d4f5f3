//! `solve`, `spectrum` and `rates`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use gprg_core::field_io;
use gprg_core::rates::{rate_experiment, rates_csv, RateExperiment, RateRow};
use gprg_core::solver::{self, initial_guess, RunFailure, RunOutcome};
use gprg_core::spectral::{hessian_tangent_eigs, morse_bott_check, pencil_extremes, SpectrumReport};
use gprg_core::{assemble, Field, OperatorSet, PolarGrid, PreconditionerKind, PreconditionerSpec};
use serde_json::{json, Value};

use crate::config::{InitialConfig, RunConfig, SpectrumConfig};
use crate::error::CliError;

fn setup(cfg: &RunConfig) -> Result<(Arc<PolarGrid>, OperatorSet), CliError> {
    let grid = cfg.grid.build().map_err(CliError::from_core)?;
    let ops = OperatorSet::new(grid.clone(), cfg.problem.clone()).map_err(CliError::from_core)?;
    Ok((grid, ops))
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.run_directory();
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Solver(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    field_io::write_atomic(&path, bytes)
        .map_err(|e| CliError::Solver(format!("cannot write {}: {e}", path.display())))
}

fn write_json(dir: &Path, name: &str, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    text.push('\n');
    write(dir, name, text.as_bytes())
}

fn read_field(path: &Path, grid: &Arc<PolarGrid>) -> Result<Field, CliError> {
    field_io::read_on(path, grid).map_err(|e| match e {
        gprg_core::GprgError::Io(io) => CliError::Input(format!("cannot read {}: {io}", path.display())),
        other => CliError::Input(format!("{}: {other}", path.display())),
    })
}

fn starting_field(cfg: &RunConfig, grid: &Arc<PolarGrid>) -> Result<Field, CliError> {
    match &cfg.initial {
        InitialConfig::Field { path } => {
            let field = field_io::read(path)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            if **field.grid() == **grid {
                Ok(field)
            } else {
                field.resample(grid).map_err(CliError::from_core)
            }
        }
        other => Ok(initial_guess(other.guess().expect("non-field initial"), grid)),
    }
}

pub fn solve(cfg: &RunConfig) -> Result<(), CliError> {
    let (grid, ops) = setup(cfg)?;
    let start = starting_field(cfg, &grid)?;
    let dir = output_dir(cfg)?;

    let mut outcome = RunOutcome {
        state: start,
        records: Vec::new(),
    };
    let mut failure = None;
    for (k, stage) in cfg.stages.iter().enumerate() {
        let result = solver::run(std::slice::from_ref(stage), &ops, &outcome.state);
        let (step, error) = match result {
            Ok(o) => (o, None),
            Err(RunFailure { error, partial }) => (partial, Some(error)),
        };
        outcome.state = step.state;
        outcome.records.extend(step.records);
        if cfg.outputs.snapshot_every > 0 && (k + 1) % cfg.outputs.snapshot_every == 0 {
            write(&dir, &format!("stage{}.gpfld", k + 1), &field_io::encode(&outcome.state))?;
        }
        if let Some(e) = error {
            failure = Some(format!("stage {}: {e}", k + 1));
            break;
        }
    }

    if cfg.outputs.emit_csv {
        for (k, record) in outcome.records.iter().enumerate() {
            write(&dir, &format!("history_stage{}.csv", k + 1), record.to_csv().as_bytes())?;
        }
    }
    if cfg.outputs.emit_field {
        write(&dir, "final.gpfld", &field_io::encode(&outcome.state))?;
    }
    let eval = ops.evaluate(&outcome.state);
    let summary = json!({
        "name": cfg.name,
        "E_g": eval.energy,
        "lambda_g": eval.lambda_tilde,
        "residual": eval.residual_inf,
        "iterations": outcome.records.iter().map(|r| r.iterations()).collect::<Vec<_>>(),
        "status": outcome.records.iter().map(|r| r.status.to_string()).collect::<Vec<_>>(),
        "error": failure,
    });
    write_json(&dir, "summary.json", &summary)?;
    if let Some(f) = failure {
        return Err(CliError::Solver(f));
    }
    log::info!(
        "E_g = {:.12}, lambda_g = {:.12}, residual = {:.3e}",
        eval.energy,
        eval.lambda_tilde,
        eval.residual_inf
    );
    if cfg.spectrum.enabled {
        spectrum_on(&ops, &outcome.state, &cfg.spectrum, &dir)?;
    }
    Ok(())
}

pub fn spectrum(cfg: &RunConfig, field: &Path) -> Result<(), CliError> {
    let (grid, ops) = setup(cfg)?;
    let state = read_field(field, &grid)?;
    let dir = output_dir(cfg)?;
    spectrum_on(&ops, &state, &cfg.spectrum, &dir)
}

fn sigma_of(spec: &PreconditionerSpec) -> Option<f64> {
    (spec.kind == PreconditionerKind::P4).then_some(spec.sigma0)
}

/// Writes `spectrum.json`: one flat object per analysed preconditioner.
fn spectrum_on(ops: &OperatorSet, state: &Field, cfg: &SpectrumConfig, dir: &Path) -> Result<(), CliError> {
    let state = state
        .normalized()
        .ok_or_else(|| CliError::Input("field is identically zero".into()))?;
    let lambda_g = ops.evaluate(&state).lambda_tilde;
    let eigs = hessian_tangent_eigs(ops, &state, cfg.k, &cfg.eigen_options())
        .map_err(|e| CliError::Solver(format!("tangent eigensolve: {e}")))?;
    let morse_bott = morse_bott_check(ops, &state, lambda_g, &eigs, cfg.tol_degenerate, cfg.tol_gap).ok();
    let pencil = cfg.pencil_options();
    let mut reports = Vec::new();
    let mut errors = Vec::new();
    for spec in cfg.specs() {
        let label = label(&spec);
        let report = assemble(&spec, ops, &state)
            .and_then(|h| pencil_extremes(ops, &state, &h, 2, &pencil))
            .and_then(|b| SpectrumReport::new(lambda_g, eigs.clone(), morse_bott.clone(), b, sigma_of(&spec)));
        match report {
            Ok(r) => reports.push(r.to_json()),
            Err(e) => {
                log::error!("{label}: {e}");
                reports.push(json!({ "precond_kind": label, "error": e.to_string() }));
                errors.push(format!("{label}: {e}"));
            }
        }
    }
    write_json(dir, "spectrum.json", &Value::Array(reports))?;
    if errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::Solver(errors.join("; ")))
    }
}

fn label(spec: &PreconditionerSpec) -> String {
    match sigma_of(spec) {
        Some(s) => format!("P4_s{s:e}"),
        None => spec.kind.to_string(),
    }
}

pub fn rates(cfg: &RunConfig, field: &Path) -> Result<(), CliError> {
    let (grid, ops) = setup(cfg)?;
    let reference = read_field(field, &grid)?
        .normalized()
        .ok_or_else(|| CliError::Input("reference field is identically zero".into()))?;
    let dir = output_dir(cfg)?;
    let settings = cfg.rates.settings();
    let pencil = cfg.spectrum.pencil_options();
    let specs = cfg.rates.specs();
    let run = |spec: &PreconditionerSpec| rate_experiment(&ops, &reference, spec, &settings, &pencil);
    let results: Vec<gprg_core::Result<RateExperiment>> = if cfg.rates.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = specs.iter().map(|spec| s.spawn(move || run(spec))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("rate experiment panicked"))
                .collect()
        })
    } else {
        specs.iter().map(run).collect()
    };

    let mut rows = Vec::new();
    for (spec, result) in specs.iter().zip(&results) {
        let label = label(spec);
        match result {
            Ok(exp) => {
                let mut row = exp.row();
                row.precond = label.clone();
                rows.push(row);
                if cfg.outputs.emit_csv {
                    write(&dir, &format!("rates_history_{label}.csv"), history_csv(exp).as_bytes())?;
                }
            }
            Err(e) => {
                log::error!("{label}: {e}");
                rows.push(RateRow {
                    precond: label,
                    mu: f64::NAN,
                    l: f64::NAN,
                    tau_star: f64::NAN,
                    rho_theory: f64::NAN,
                    rho_fitted: None,
                    iters: 0,
                    status: format!("error: {e}").replace([',', '\n'], ";"),
                });
            }
        }
    }
    write(&dir, "rates.csv", rates_csv(&rows).as_bytes())?;
    if results.iter().all(|r| r.is_err()) {
        return Err(CliError::Solver("every rate experiment failed".into()));
    }
    Ok(())
}

/// Per-iterate data of one fixed-step run.
fn history_csv(exp: &RateExperiment) -> String {
    let mut out = String::from("n,energy,energy_gap,distance_h1,residual_inf,tau,wall_s\n");
    for s in &exp.run.samples {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.6}\n",
            s.row.n,
            s.row.energy,
            s.energy_gap,
            s.distance_h1,
            s.row.residual_inf,
            s.row.step_tau,
            s.row.wall_seconds
        ));
    }
    out
}
