//! Run configuration: TOML text with strict key checking.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use gprg_core::rates::RateSettings;
use gprg_core::solver::{InitialGuess, StageSpec};
use gprg_core::spectral::{EigenOptions, PencilOptions};
use gprg_core::{PolarGrid, PreconditionerKind, PreconditionerSpec, ProblemParams};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Subdirectory of `outputs.directory` receiving this run's files.
    #[serde(default = "default_name")]
    pub name: String,
    pub grid: GridConfig,
    pub problem: ProblemParams,
    pub initial: InitialConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
    #[serde(default)]
    pub spectrum: SpectrumConfig,
    #[serde(default)]
    pub rates: RatesConfig,
    pub stages: Vec<StageSpec>,
}

fn default_name() -> String {
    "run".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n_r: usize,
    pub n_theta: usize,
    pub radius: f64,
}

impl GridConfig {
    pub fn build(&self) -> gprg_core::Result<Arc<PolarGrid>> {
        PolarGrid::new(self.n_r, self.n_theta, self.radius).map(Arc::new)
    }
}

/// Starting field of `solve`. `field` loads a snapshot and resamples it to
/// the configured grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    Gaussian,
    GaussianWinding { m: i32 },
    Perturbed { seed: u64, amplitude: f64 },
    Field { path: PathBuf },
}

impl InitialConfig {
    pub fn guess(&self) -> Option<InitialGuess> {
        match *self {
            Self::Gaussian => Some(InitialGuess::Gaussian),
            Self::GaussianWinding { m } => Some(InitialGuess::GaussianWinding { m }),
            Self::Perturbed { seed, amplitude } => Some(InitialGuess::Perturbed { seed, amplitude }),
            Self::Field { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: PathBuf,
    /// Write `stageK.gpfld` after every `snapshot_every`-th stage; 0 disables.
    pub snapshot_every: usize,
    pub emit_csv: bool,
    pub emit_field: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            snapshot_every: 0,
            emit_csv: true,
            emit_field: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumConfig {
    /// Also analyse the final state at the end of `solve`.
    pub enabled: bool,
    /// Number of tangent Hessian eigenvalues.
    pub k: usize,
    pub preconditioners: Vec<PreconditionerKind>,
    /// One P4 analysis per entry.
    pub sigma0: Vec<f64>,
    /// Relative tolerance on `|λᵢ − λ_g|` for the kernel eigenvalues.
    pub tol_degenerate: f64,
    /// Smallest accepted `λ_{d+1} − λ_g`.
    pub tol_gap: f64,
    pub eig_tol: f64,
    pub max_iters: usize,
    pub upper_iters: usize,
    pub upper_levels: usize,
    /// Relative tolerance of the P3/P4 inner solves.
    pub inverse_tol: f64,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        let eig = EigenOptions::default();
        let pencil = PencilOptions::default();
        Self {
            enabled: false,
            k: 5,
            preconditioners: vec![PreconditionerKind::P4],
            sigma0: vec![gprg_core::precond::DEFAULT_SIGMA0],
            tol_degenerate: 1e-6,
            tol_gap: 1e-6,
            eig_tol: eig.tol,
            max_iters: eig.max_iters,
            upper_iters: pencil.upper_iters,
            upper_levels: pencil.upper_levels,
            inverse_tol: 1e-10,
        }
    }
}

impl SpectrumConfig {
    pub fn pencil_options(&self) -> PencilOptions {
        PencilOptions {
            eig: self.eigen_options(),
            upper_iters: self.upper_iters,
            upper_levels: self.upper_levels,
        }
    }

    pub fn eigen_options(&self) -> EigenOptions {
        EigenOptions {
            tol: self.eig_tol,
            max_iters: self.max_iters,
            ..EigenOptions::default()
        }
    }

    /// Preconditioner specs in analysis order, P4 expanded over `sigma0`.
    pub fn specs(&self) -> Vec<PreconditionerSpec> {
        expand_specs(&self.preconditioners, &self.sigma0, self.inverse_tol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RatesConfig {
    pub preconditioners: Vec<PreconditionerKind>,
    pub sigma0: Vec<f64>,
    pub inverse_tol: f64,
    pub perturbation: f64,
    pub seed: u64,
    pub max_iters: usize,
    pub energy_gap_stop: f64,
    pub fit_residual: f64,
    pub fit_fraction: f64,
    /// Run the preconditioners on separate threads.
    pub parallel: bool,
}

impl Default for RatesConfig {
    fn default() -> Self {
        let s = RateSettings::default();
        Self {
            preconditioners: PreconditionerKind::ALL.to_vec(),
            sigma0: vec![gprg_core::precond::DEFAULT_SIGMA0],
            inverse_tol: 1e-10,
            perturbation: s.perturbation,
            seed: s.seed,
            max_iters: s.max_iters,
            energy_gap_stop: s.energy_gap_stop,
            fit_residual: s.fit_residual,
            fit_fraction: s.fit_fraction,
            parallel: false,
        }
    }
}

impl RatesConfig {
    pub fn settings(&self) -> RateSettings {
        RateSettings {
            perturbation: self.perturbation,
            seed: self.seed,
            max_iters: self.max_iters,
            energy_gap_stop: self.energy_gap_stop,
            fit_residual: self.fit_residual,
            fit_fraction: self.fit_fraction,
        }
    }

    pub fn specs(&self) -> Vec<PreconditionerSpec> {
        expand_specs(&self.preconditioners, &self.sigma0, self.inverse_tol)
    }
}

fn expand_specs(kinds: &[PreconditionerKind], sigma0: &[f64], inverse_tol: f64) -> Vec<PreconditionerSpec> {
    kinds
        .iter()
        .flat_map(|&kind| {
            if kind == PreconditionerKind::P4 {
                sigma0
                    .iter()
                    .map(|&s| PreconditionerSpec::p4(s).with_inverse_tol(inverse_tol))
                    .collect()
            } else {
                vec![PreconditionerSpec::new(kind).with_inverse_tol(inverse_tol)]
            }
        })
        .collect()
}

impl RunConfig {
    /// Parses and validates. Diagnostics carry the line of the offending key
    /// when it can be located.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start));
            CliError::Config {
                key: None,
                line,
                message: e.message().trim().to_string(),
            }
        })?;
        cfg.validate().map_err(|(key, message)| CliError::Config {
            line: locate_key(text, &key),
            key: Some(key),
            message,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let InitialConfig::Field { path: p } = &mut cfg.initial {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    /// Overrides the initial-guess seed and the rate-perturbation seed.
    pub fn apply_seed(&mut self, seed: u64) {
        if let InitialConfig::Perturbed { seed: s, .. } = &mut self.initial {
            *s = seed;
        }
        self.rates.seed = seed;
    }

    pub fn run_directory(&self) -> PathBuf {
        self.outputs.directory.join(&self.name)
    }

    fn validate(&self) -> Result<(), (String, String)> {
        let issue = |key: &str, msg: String| Err((key.to_string(), msg));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == ".." {
            return issue("name", format!("not a plain directory name: {:?}", self.name));
        }
        if let Err(e) = self.grid.build() {
            let key = if e.to_string().contains("radius") {
                "grid.radius"
            } else if e.to_string().contains("n_r") {
                "grid.n_r"
            } else {
                "grid.n_theta"
            };
            return issue(key, e.to_string());
        }
        let p = &self.problem;
        if !(p.omega.is_finite() && p.omega >= 0.0) {
            return issue("problem.omega", format!("must be finite and non-negative, got {}", p.omega));
        }
        if !(p.eta.is_finite() && p.eta >= 0.0) {
            return issue("problem.eta", format!("must be finite and non-negative, got {}", p.eta));
        }
        if let gprg_core::Potential::Radial(v) = &p.potential {
            if v.len() != self.grid.n_r {
                return issue(
                    "problem.potential",
                    format!("radial profile has {} values, grid has n_r = {}", v.len(), self.grid.n_r),
                );
            }
        }
        if let Err(e) = p.validate() {
            return issue("problem.potential", e.to_string());
        }
        if let InitialConfig::Perturbed { amplitude, .. } = self.initial {
            if !(amplitude.is_finite() && amplitude >= 0.0) {
                return issue("initial.amplitude", format!("must be finite and non-negative, got {amplitude}"));
            }
        }
        if self.stages.is_empty() {
            return issue("stages", "at least one stage is required".into());
        }
        for (k, s) in self.stages.iter().enumerate() {
            if s.max_iters == 0 {
                return issue(&format!("stages[{k}].max_iters"), "must be positive".into());
            }
            if let Err(e) = s.validate() {
                return issue(&format!("stages[{k}]"), e.to_string());
            }
        }
        let sp = &self.spectrum;
        if sp.k == 0 {
            return issue("spectrum.k", "must be positive".into());
        }
        if sp.preconditioners.is_empty() {
            return issue("spectrum.preconditioners", "must not be empty".into());
        }
        if sp.preconditioners.contains(&PreconditionerKind::P4) && sp.sigma0.is_empty() {
            return issue("spectrum.sigma0", "P4 requested without a sigma0 value".into());
        }
        for (key, v) in [
            ("spectrum.tol_degenerate", sp.tol_degenerate),
            ("spectrum.tol_gap", sp.tol_gap),
            ("spectrum.eig_tol", sp.eig_tol),
            ("spectrum.inverse_tol", sp.inverse_tol),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return issue(key, format!("must be positive, got {v}"));
            }
        }
        if sp.max_iters == 0 || sp.upper_iters == 0 || sp.upper_levels == 0 {
            return issue("spectrum", "iteration counts must be positive".into());
        }
        let r = &self.rates;
        if r.preconditioners.is_empty() {
            return issue("rates.preconditioners", "must not be empty".into());
        }
        if r.preconditioners.contains(&PreconditionerKind::P4) && r.sigma0.is_empty() {
            return issue("rates.sigma0", "P4 requested without a sigma0 value".into());
        }
        if !(r.inverse_tol.is_finite() && r.inverse_tol > 0.0) {
            return issue("rates.inverse_tol", format!("must be positive, got {}", r.inverse_tol));
        }
        for (section, specs) in [("spectrum.sigma0", sp.specs()), ("rates.sigma0", r.specs())] {
            for s in specs {
                if let Err(e) = s.validate() {
                    return issue(section, e.to_string());
                }
            }
        }
        if let Err(e) = r.settings().validate() {
            let msg = e.to_string();
            let key = ["perturbation", "energy_gap_stop", "fit_residual", "fit_fraction", "max_iters"]
                .into_iter()
                .find(|k| msg.contains(k))
                .map_or_else(|| "rates".to_string(), |k| format!("rates.{k}"));
            return Err((key, msg));
        }
        Ok(())
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Best-effort 1-based line of a dotted key such as `problem.eta` or
/// `stages[1].stop_residual`. Falls back to the enclosing table header.
pub fn locate_key(text: &str, key: &str) -> Option<usize> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = if parts.len() > 1 { parts.pop() } else { None };
    let (table, index) = match parts[0].split_once('[') {
        Some((t, rest)) => (t, rest.trim_end_matches(']').parse::<usize>().ok()),
        None => (parts[0], None),
    };
    let lines: Vec<&str> = text.lines().collect();
    let header = |l: &str| {
        let l = l.trim();
        match index {
            Some(_) => l.starts_with("[[") && l.trim_matches(['[', ']', ' ']) == table,
            None => l.starts_with('[') && !l.starts_with("[[") && l.trim_matches(['[', ']', ' ']) == table,
        }
    };
    let top_level = |l: &str| {
        let t = l.trim_start();
        t.starts_with(table) && t[table.len()..].trim_start().starts_with('=')
    };
    let start = match index {
        Some(k) => lines.iter().enumerate().filter(|(_, l)| header(l)).nth(k).map(|(i, _)| i),
        None => lines.iter().position(|l| header(l)),
    };
    let Some(start) = start else {
        return lines.iter().position(|l| top_level(l)).map(|i| i + 1);
    };
    let Some(leaf) = leaf else {
        return Some(start + 1);
    };
    let is_leaf = |l: &str| {
        let t = l.trim_start();
        t.starts_with(leaf) && t[leaf.len()..].trim_start().starts_with('=')
    };
    let found = lines[start + 1..]
        .iter()
        .take_while(|l| {
            let t = l.trim_start();
            !(t.starts_with('[') && !t.trim_start_matches('[').starts_with(&format!("{table}.")))
        })
        .position(|l| is_leaf(l));
    Some(found.map_or(start + 1, |i| start + 2 + i))
}
