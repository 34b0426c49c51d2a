//! Experiment configuration: a TOML document with top-level run settings and
//! one table per concern (`[objective_options]`, `[overrides]`, `[sweep]`,
//! `[escape]`, `[select]`). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{self, ObjectiveOptions};
use crate::oracles::DriftRewindMode;
use crate::params::ParamConstants;
use crate::privacy::PrivacyBudget;

/// Environment variable consulted for a seed when the config names none.
pub const SEED_ENV: &str = "SOSPKIT_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One client, single-machine oracle.
    #[default]
    Single,
    /// `m` clients, multi-client oracle.
    Distributed,
    /// Single escape rounds from the planted saddle.
    EscapeTest,
    /// Coupled escape trials from the planted saddle.
    CoupledTest,
    /// Direct output against private selection over a grid of dimensions.
    SelectAblation,
    /// Cross product of the `[sweep]` grids.
    Sweep,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Distributed => "distributed",
            Mode::EscapeTest => "escape-test",
            Mode::CoupledTest => "coupled-test",
            Mode::SelectAblation => "select-ablation",
            Mode::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Every parameter from the problem constants.
    #[default]
    Derived,
    /// `chi = 0.01`, `kappa = 0.1`, `Gamma = 10`, `Q = 3` and `eta` from
    /// `learning_rate`, overriding the derived values.
    PaperDefaults,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "derived" => Ok(Preset::Derived),
            "paper-defaults" => Ok(Preset::PaperDefaults),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected derived or paper-defaults)"
            ))),
        }
    }
}

/// Where each run starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Start {
    /// The objective's first planted saddle.
    #[default]
    Saddle,
    Origin,
    /// The objective's first known minimum.
    Minimum,
    /// Uniform in the cube of half-width `start_radius * box_radius`, drawn
    /// per seed.
    Random,
    /// Every coordinate at `start_radius * box_radius`.
    Corner,
}

/// Explicit values that replace planned ones. Unset fields keep the plan.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Overrides {
    /// Escape threshold; alpha, eta, Gamma, R and Q follow from it unless
    /// overridden themselves.
    pub chi: Option<f64>,
    pub eta: Option<f64>,
    pub gamma_steps: Option<usize>,
    pub escape_rounds: Option<usize>,
    pub escape_radius: Option<f64>,
    /// Drift threshold; the batch sizes follow from it unless overridden.
    pub kappa: Option<f64>,
    pub b1: Option<usize>,
    pub b2: Option<usize>,
    /// Fixes the logarithmic factor `mu` instead of solving for it.
    pub log_factor: Option<f64>,
}

/// Grids of the `sweep` mode (and `d` for `select-ablation`). Unset axes
/// stay at the top-level value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub n: Option<Vec<usize>>,
    pub m: Option<Vec<usize>>,
    pub d: Option<Vec<usize>>,
    pub epsilon: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EscapeSettings {
    /// Trials per seed.
    pub trials: usize,
    /// Minibatch size of the plain oracle.
    pub batch: usize,
    /// Per-coordinate standard deviation of the injected Gaussian noise.
    pub noise_std: f64,
}

impl Default for EscapeSettings {
    fn default() -> Self {
        EscapeSettings {
            trials: 400,
            batch: 1,
            noise_std: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectSettings {
    /// Held-out set size per client as a fraction of `n`.
    pub held_out_fraction: f64,
    /// Iterates are thinned evenly (keeping the first and last) to at most
    /// this many candidates.
    pub max_candidates: usize,
}

impl Default for SelectSettings {
    fn default() -> Self {
        SelectSettings {
            held_out_fraction: 1.0,
            max_candidates: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub preset: Preset,
    pub objective: String,
    pub dim: usize,
    /// Training samples per client.
    pub n: usize,
    /// Clients.
    pub m: usize,
    pub epsilon: f64,
    pub delta: f64,
    /// Disables noise injection (for debugging; audits still run).
    pub inject_noise: bool,
    pub s: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub c1: f64,
    pub c2: f64,
    pub omega: f64,
    pub omega_prime: f64,
    /// `None` falls back to [`SEED_ENV`]; an explicit empty list is an error.
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub drift_rewind_mode: DriftRewindMode,
    pub start: Start,
    pub start_radius: f64,
    /// Step size of the `paper-defaults` preset.
    pub learning_rate: f64,
    /// Log exact values and gradients per step (enables the descent audit).
    pub diagnostics: bool,
    /// Write per-run traces (ledgers and audits are always written).
    pub write_traces: bool,
    /// Cap on oracle queries per run; defaults to ten times the step budget.
    pub max_steps: Option<usize>,
    /// Bisection steps of the parameter planner.
    pub planner_iterations: usize,
    pub workers: Option<usize>,
    pub objective_options: ObjectiveOptions,
    pub overrides: Overrides,
    pub sweep: SweepGrid,
    pub escape: EscapeSettings,
    pub select: SelectSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let consts = ParamConstants::default();
        ExperimentConfig {
            mode: Mode::Single,
            preset: Preset::Derived,
            objective: "double-well".into(),
            dim: 10,
            n: 10_000,
            m: 1,
            epsilon: 1.0,
            delta: 1e-5,
            inject_noise: true,
            s: consts.scale,
            c: consts.noise_const,
            c1: 1.0,
            c2: 1.0,
            omega: consts.failure_prob,
            omega_prime: 0.05,
            seeds: None,
            out: None,
            drift_rewind_mode: DriftRewindMode::ActualQueries,
            start: Start::Saddle,
            start_radius: 0.5,
            learning_rate: 0.01,
            diagnostics: false,
            write_traces: true,
            max_steps: None,
            planner_iterations: 60,
            workers: None,
            objective_options: ObjectiveOptions::default(),
            overrides: Overrides::default(),
            sweep: SweepGrid::default(),
            escape: EscapeSettings::default(),
            select: SelectSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML document; unknown keys are named in the error.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn privacy(&self) -> Result<PrivacyBudget> {
        PrivacyBudget::new(self.epsilon, self.delta).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn constants(&self) -> ParamConstants {
        ParamConstants {
            scale: self.s,
            noise_const: self.c,
            failure_prob: self.omega,
            log_factor: self.overrides.log_factor,
        }
    }

    /// Seeds to run: the config's list, else [`SEED_ENV`].
    pub fn resolve_seeds(&self) -> Result<Vec<u64>> {
        let seeds = match &self.seeds {
            Some(list) => list.clone(),
            None => match std::env::var(SEED_ENV) {
                Ok(v) => vec![v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?],
                Err(_) => Vec::new(),
            },
        };
        if seeds.is_empty() {
            return Err(Error::Config(format!("seed list is empty (set `seeds` or {SEED_ENV})")));
        }
        Ok(seeds)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("sospkit-out"))
    }

    /// Checks names, ranges and mode requirements.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 || self.n == 0 || self.m == 0 {
            return bad("dim, n and m must be positive".into());
        }
        objectives::build(&self.objective, self.dim, &self.objective_options).map_err(|e| {
            Error::Config(format!(
                "objective `{}` ({e}); known objectives: {}",
                self.objective,
                objectives::OBJECTIVE_NAMES.join(", ")
            ))
        })?;
        self.privacy()?;
        for (name, v) in [("s", self.s), ("C", self.c), ("c1", self.c1), ("c2", self.c2)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("`{name}` must be positive, got {v}"));
            }
        }
        for (name, v) in [("omega", self.omega), ("omega_prime", self.omega_prime)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("`{name}` must lie in (0,1), got {v}"));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.start_radius >= 0.0) {
            return bad("learning_rate must be positive and start_radius non-negative".into());
        }
        if self.planner_iterations == 0 {
            return bad("planner_iterations must be >= 1".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be >= 1".into());
        }
        if self.mode == Mode::Single && self.m != 1 {
            return bad(format!("mode single runs one client, got m = {}", self.m));
        }
        let grids = [
            ("sweep.n", self.sweep.n.as_ref().map(|v| v.len())),
            ("sweep.m", self.sweep.m.as_ref().map(|v| v.len())),
            ("sweep.d", self.sweep.d.as_ref().map(|v| v.len())),
            ("sweep.epsilon", self.sweep.epsilon.as_ref().map(|v| v.len())),
        ];
        for (name, len) in grids {
            if len == Some(0) {
                return bad(format!("grid `{name}` is empty"));
            }
        }
        if self.mode == Mode::Sweep && grids.iter().all(|(_, len)| len.is_none()) {
            return bad("mode sweep needs at least one grid in [sweep]".into());
        }
        let positive = |v: &Option<Vec<usize>>| v.as_ref().is_none_or(|g| g.iter().all(|&x| x > 0));
        if !positive(&self.sweep.n) || !positive(&self.sweep.m) || !positive(&self.sweep.d) {
            return bad("grid values must be positive".into());
        }
        if let Some(eps) = &self.sweep.epsilon {
            if eps.iter().any(|e| !(*e > 0.0)) {
                return bad("epsilon grid values must be positive".into());
            }
        }
        if self.escape.trials == 0 || self.escape.batch == 0 || !(self.escape.noise_std >= 0.0) {
            return bad("escape needs trials >= 1, batch >= 1 and noise_std >= 0".into());
        }
        if !(self.select.held_out_fraction > 0.0) || self.select.max_candidates == 0 {
            return bad("select needs held_out_fraction > 0 and max_candidates >= 1".into());
        }
        Ok(())
    }
}
