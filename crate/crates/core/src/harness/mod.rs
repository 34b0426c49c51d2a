//! Experiment orchestration: runs the configured mode over grid points and
//! seeds, audits every run, and writes tidy CSV outputs.
//!
//! Output layout under the output directory:
//!
//! - `config.toml`: the effective configuration.
//! - `results.csv`: one [`ResultRow`] per completed run.
//! - `summary.csv`: per-grid-point medians; `slope.csv` for an n-sweep.
//! - `runs/<tag>/`: `audit.json` and `ledger.csv` per run, plus
//!   `trace.csv`, `events.jsonl` and `oracle_trace.csv` when traces are on.
//! - `escape_trials.csv` / `escape_summary.csv`, `coupled_trials.csv` /
//!   `coupled_summary.csv`, `pairs.csv` / `degradation.csv` for the
//!   corresponding modes.

pub mod config;
pub mod plan;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{
    EscapeSettings, ExperimentConfig, Mode, Overrides, Preset, SelectSettings, Start, SweepGrid, SEED_ENV,
};
pub use plan::{plan_plain, plan_spider, Plan};

use crate::error::{Error, Result};
use crate::linalg::dense_smallest_eigenpair;
use crate::objectives::{self, ObjectiveSpec};
use crate::oracles::{
    audit_noise_variances, check_drift_mechanics, save_trace_csv, Branch, ClientPool, DriftCheck, GradientOracle,
    PlainOracle, SpiderConfig, SpiderOracle,
};
use crate::params::PsgdParams;
use crate::privacy::{LedgerAudit, PrivacyLedger};
use crate::psgd::{
    descent_lemma_audit, gamma_descent, gauss_psgd, run_coupled_escape_trial, CoupledNoise, CoupledTrialConfig,
    DescentAudit, EventKind, PsgdOptions,
};
use crate::rng::{mix_seed, SeededRng};
use crate::select::{
    median, private_select, save_selection_csv, selection_degradation_report, write_degradation_csv, ArmResult,
    CandidateSet, DegradationRow, PairedRun, SelectionConfig,
};
use crate::vector::Vector;
use crate::verify::{check_sosp, check_sosp_dense, SospCriterion, SospReport};

/// Absolute tolerance of the descent-inequality audit.
pub const DESCENT_TOL: f64 = 1e-8;

/// Process exit status for an error: 2 for configuration problems, 3 for
/// accounting violations, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::AccountingViolation(_) => 3,
        _ => 1,
    }
}

/// One completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub grid_index: usize,
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub epsilon: f64,
    pub final_grad_norm: f64,
    pub final_lambda_min: f64,
    pub passed_sosp: bool,
    pub alpha: f64,
    pub total_steps: usize,
    pub o1_count: usize,
    pub samples_used: usize,
    pub truncated: bool,
    /// Seconds; the only column that varies between identical reruns.
    pub wall_time: f64,
}

/// Everything checked about one run, written as `audit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAudit {
    pub tag: String,
    pub drift: DriftCheck,
    pub ledger: LedgerAudit,
    /// Noise releases whose variance was recomputed and matched bit-for-bit.
    pub noise_releases: usize,
    /// Present on diagnostic runs whose step size satisfies `eta M <= 1`.
    pub descent: Option<DescentAudit>,
    pub kappa: f64,
    pub b1: usize,
    pub b2: usize,
    pub params: PsgdParams,
    pub planner_iterations: usize,
    pub planner_residual: f64,
    pub max_steps: usize,
    pub truncation_reason: Option<String>,
    pub escape_attempts: usize,
    pub escapes: usize,
}

/// A point of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub index: usize,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub epsilon: f64,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub row: ResultRow,
    pub audit: RunAudit,
    pub x_out: Vector,
    pub report: SospReport,
    pub iterates: Option<Vec<Vector>>,
    pub ledger: PrivacyLedger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub grid_index: usize,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub epsilon: f64,
    pub runs: usize,
    pub passed: usize,
    pub truncated: usize,
    pub median_grad_norm: f64,
    pub median_lambda_min: f64,
    pub median_alpha: f64,
}

/// Least-squares fit of `ln(median grad norm)` against `ln(axis)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub axis: String,
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

/// Per-trial record of the escape experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscapeTrialRow {
    pub seed: u64,
    pub trial: usize,
    pub escaped: bool,
    pub steps: usize,
    pub displacement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledTrialRow {
    pub seed: u64,
    pub trial: usize,
    /// Noise mirrored along the most negative curvature direction.
    pub either_escaped: bool,
    pub max_displacement: f64,
    /// Noise mirrored along the most positive curvature direction instead.
    pub wrong_direction_either_escaped: bool,
}

/// Binomial summary of an escape experiment against its reference rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscapeSummary {
    pub experiment: String,
    pub trials: usize,
    pub escapes: usize,
    pub fraction: f64,
    pub reference: f64,
    /// `reference - 3 sqrt(reference (1 - reference) / trials)`.
    pub lower_bound: f64,
    pub passed: bool,
    pub gamma_steps: usize,
    pub escape_radius: f64,
    pub step_size: f64,
    pub alpha: f64,
}

impl EscapeSummary {
    fn new(experiment: &str, trials: usize, escapes: usize, reference: f64, params: &PsgdParams) -> Self {
        let fraction = escapes as f64 / trials as f64;
        let lower_bound = binomial_lower(reference, trials);
        EscapeSummary {
            experiment: experiment.to_string(),
            trials,
            escapes,
            fraction,
            reference,
            lower_bound,
            passed: fraction >= lower_bound,
            gamma_steps: params.escape_steps,
            escape_radius: params.escape_radius,
            step_size: params.step_size,
            alpha: params.alpha,
        }
    }
}

/// `p - 3 sqrt(p (1 - p) / trials)`.
pub fn binomial_lower(p: f64, trials: usize) -> f64 {
    p - 3.0 * (p * (1.0 - p) / trials as f64).sqrt()
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub rows: Vec<ResultRow>,
    pub audits: Vec<RunAudit>,
    pub summary: Vec<SummaryRow>,
    pub slope: Option<SlopeFit>,
    pub escape_trials: Vec<EscapeTrialRow>,
    pub coupled_trials: Vec<CoupledTrialRow>,
    /// Escape or coupled summaries; the coupled test adds the
    /// wrong-direction comparison as a second entry.
    pub escape: Vec<EscapeSummary>,
    pub pairs: Vec<PairedRun>,
    pub degradation: Vec<DegradationRow>,
}

/// Validates `cfg`, runs its mode and writes every artifact.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let seeds = cfg.resolve_seeds()?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    pool.install(|| match cfg.mode {
        Mode::Single | Mode::Distributed | Mode::Sweep => run_grid(cfg, &seeds, &out),
        Mode::EscapeTest => run_escape_test(cfg, &seeds, &out),
        Mode::CoupledTest => run_coupled_test(cfg, &seeds, &out),
        Mode::SelectAblation => run_select_ablation(cfg, &seeds, &out),
    })
}

/// Grid points of the configured mode, in a fixed order (n outermost,
/// then m, d and epsilon).
pub fn grid_points(cfg: &ExperimentConfig) -> Vec<GridPoint> {
    let axis = |grid: &Option<Vec<usize>>, dflt: usize| grid.clone().unwrap_or_else(|| vec![dflt]);
    let (ns, ms, ds, eps) = match cfg.mode {
        Mode::Sweep => (
            axis(&cfg.sweep.n, cfg.n),
            axis(&cfg.sweep.m, cfg.m),
            axis(&cfg.sweep.d, cfg.dim),
            cfg.sweep.epsilon.clone().unwrap_or_else(|| vec![cfg.epsilon]),
        ),
        Mode::SelectAblation => (vec![cfg.n], vec![cfg.m], axis(&cfg.sweep.d, cfg.dim), vec![cfg.epsilon]),
        _ => (vec![cfg.n], vec![cfg.m], vec![cfg.dim], vec![cfg.epsilon]),
    };
    let mut points = Vec::new();
    for &n in &ns {
        for &m in &ms {
            for &d in &ds {
                for &epsilon in &eps {
                    points.push(GridPoint {
                        index: points.len(),
                        n,
                        m,
                        d,
                        epsilon,
                    });
                }
            }
        }
    }
    points
}

fn build_objective(cfg: &ExperimentConfig, d: usize) -> Result<ObjectiveSpec> {
    objectives::build(&cfg.objective, d, &cfg.objective_options).map_err(|e| Error::Config(e.to_string()))
}

/// Starting point of a run.
pub fn start_point(cfg: &ExperimentConfig, obj: &ObjectiveSpec, seed: u64) -> Result<Vector> {
    let d = obj.dim();
    match cfg.start {
        config::Start::Origin => Ok(Vector::zeros(d)),
        config::Start::Saddle => obj
            .saddle_points()
            .first()
            .cloned()
            .ok_or_else(|| Error::Config(format!("objective `{}` has no planted saddle", cfg.objective))),
        config::Start::Minimum => obj
            .minima()
            .first()
            .cloned()
            .ok_or_else(|| Error::Config(format!("objective `{}` has no known minimum", cfg.objective))),
        config::Start::Corner => Ok(Vector::filled(d, cfg.start_radius * obj.box_radius())),
        config::Start::Random => {
            let half = cfg.start_radius * obj.box_radius();
            let mut rng = SeededRng::new(seed, 0x57a7_0000);
            Vector::new((0..d).map(|_| rng.uniform(-half, half)).collect())
        }
    }
}

/// Exact SOSP verdict, falling back to the dense eigensolver when power
/// iteration does not converge.
pub fn verify_point(obj: &ObjectiveSpec, x: &Vector, crit: &SospCriterion) -> Result<SospReport> {
    match check_sosp(obj, x, crit) {
        Err(Error::ConvergenceFailure { .. }) => check_sosp_dense(obj, x, crit),
        other => other,
    }
}

/// Runs Gauss-PSGD with the variance-reduced oracle at one grid point and
/// seed, audits it, and writes its artifacts under `out` when given.
pub fn run_point(cfg: &ExperimentConfig, point: &GridPoint, seed: u64, out: Option<&Path>) -> Result<RunOutcome> {
    let started = Instant::now();
    let obj = build_objective(cfg, point.d)?;
    let bounds = obj.bounds();
    let privacy = crate::privacy::PrivacyBudget::new(point.epsilon, cfg.delta).map_err(|e| Error::Config(e.to_string()))?;
    let plan = plan_spider(cfg, &bounds, point.n, point.m, point.d, &privacy)?;
    let x0 = start_point(cfg, &obj, seed)?;

    let pool = ClientPool::new(seed, point.m, point.n)?;
    let mut spider_cfg = SpiderConfig::new(&bounds, cfg.inject_noise.then_some(privacy));
    spider_cfg.c1 = cfg.c1;
    spider_cfg.c2 = cfg.c2;
    let mut oracle = SpiderOracle::new(obj.clone(), pool, &plan.schedule, spider_cfg, cfg.drift_rewind_mode)
        .force_distributed(cfg.mode == Mode::Distributed)
        .with_error_tracking(cfg.diagnostics);
    let mut opts = PsgdOptions::new(plan.max_steps).with_objective(obj.clone(), cfg.diagnostics);
    opts.store_iterates = cfg.mode == Mode::SelectAblation;
    let (x_out, trace) = gauss_psgd(&x0, &mut oracle, &plan.params, &opts)?;

    let crit = SospCriterion::alpha_sosp(plan.params.alpha, bounds.hessian_lipschitz)?;
    let report = verify_point(&obj, &x_out, &crit)?;

    let tag = run_tag(point.index, seed);
    let rows = oracle.trace();
    let drift = check_drift_mechanics(rows, plan.schedule.kappa)
        .map_err(|e| Error::Internal(format!("run {tag}: drift audit failed: {e}")))?;
    let ledger_ref = oracle
        .ledger()
        .ok_or_else(|| Error::Internal("variance-reduced oracle has no ledger".into()))?;
    let ledger_audit = ledger_ref.audit(None)?;
    let samples_used = oracle.samples_consumed();
    if ledger_audit.train_samples != samples_used {
        return Err(Error::AccountingViolation(format!(
            "run {tag}: ledger records {} training samples, oracle consumed {samples_used}",
            ledger_audit.train_samples
        )));
    }
    let noise_releases = audit_noise_variances(rows, ledger_ref, oracle.config())?;
    let descent = (cfg.diagnostics && plan.params.step_smoothness <= 1.0)
        .then(|| descent_lemma_audit(&trace.steps, plan.params.step_size));
    if let Some(audit) = &descent {
        if audit.max_violation > DESCENT_TOL {
            return Err(Error::Internal(format!(
                "run {tag}: descent inequality violated by {:e}",
                audit.max_violation
            )));
        }
    }
    let o1_count = rows.iter().filter(|r| r.branch == Branch::O1).count();

    let audit = RunAudit {
        tag: tag.clone(),
        drift,
        ledger: ledger_audit,
        noise_releases,
        descent,
        kappa: plan.schedule.kappa,
        b1: plan.schedule.b1,
        b2: plan.schedule.b2,
        params: plan.params.clone(),
        planner_iterations: plan.iterations,
        planner_residual: plan.residual,
        max_steps: plan.max_steps,
        truncation_reason: trace.truncation_reason.clone(),
        escape_attempts: trace.escape_attempts,
        escapes: trace.escapes,
    };
    if let Some(out) = out {
        let dir = out.join("runs").join(&tag);
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("audit.json"), &audit)?;
        ledger_ref.save_csv(&dir.join("ledger.csv"))?;
        if cfg.write_traces {
            trace.write_csv(fs::File::create(dir.join("trace.csv"))?)?;
            trace.write_jsonl(std::io::BufWriter::new(fs::File::create(dir.join("events.jsonl"))?))?;
            save_trace_csv(rows, &dir.join("oracle_trace.csv"))?;
        }
    }
    debug_assert_eq!(trace.count(EventKind::EscapeSuccess), trace.escapes);

    let row = ResultRow {
        grid_index: point.index,
        seed,
        n: point.n,
        m: point.m,
        d: point.d,
        epsilon: point.epsilon,
        final_grad_norm: report.grad_norm,
        final_lambda_min: report.lambda_min,
        passed_sosp: report.passes,
        alpha: plan.params.alpha,
        total_steps: trace.total_steps,
        o1_count,
        samples_used,
        truncated: trace.truncated,
        wall_time: started.elapsed().as_secs_f64(),
    };
    let ledger = oracle.into_ledger();
    Ok(RunOutcome {
        row,
        audit,
        x_out,
        report,
        iterates: trace.iterates,
        ledger,
    })
}

/// Directory name of a run's artifacts.
pub fn run_tag(grid_index: usize, seed: u64) -> String {
    format!("g{grid_index:03}-s{seed}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Writes serializable rows as a CSV file with a header.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every `(point, seed)` pair in parallel and returns the outcomes
/// sorted by grid index, then seed order.
fn run_all(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<Vec<RunOutcome>> {
    let jobs: Vec<(GridPoint, u64)> = grid_points(cfg)
        .into_iter()
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let outcomes: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|(p, s)| run_point(cfg, p, *s, Some(out)))
        .collect::<Result<_>>()?;
    // par_iter preserves job order, which already is (grid index, seed order)
    check_artifacts(out, &outcomes)?;
    Ok(outcomes)
}

/// Every result row needs its audit and ledger on disk.
fn check_artifacts(out: &Path, outcomes: &[RunOutcome]) -> Result<()> {
    for o in outcomes {
        let dir = out.join("runs").join(&o.audit.tag);
        for file in ["audit.json", "ledger.csv"] {
            if !dir.join(file).is_file() {
                return Err(Error::AccountingViolation(format!("missing {file} for run {}", o.audit.tag)));
            }
        }
    }
    Ok(())
}

fn run_grid(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<ExperimentReport> {
    let outcomes = run_all(cfg, seeds, out)?;
    let rows: Vec<ResultRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    let audits = outcomes.into_iter().map(|o| o.audit).collect();
    let summary = summarize(&rows);
    write_rows(&out.join("results.csv"), &rows)?;
    write_rows(&out.join("summary.csv"), &summary)?;
    let slope = n_sweep_slope(cfg, &summary);
    if let Some(fit) = &slope {
        write_rows(&out.join("slope.csv"), std::slice::from_ref(fit))?;
    }
    Ok(ExperimentReport {
        out_dir: out.to_path_buf(),
        rows,
        audits,
        summary,
        slope,
        ..Default::default()
    })
}

/// Per-grid-point medians of the result rows.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let g = rows[start].grid_index;
        let end = start + rows[start..].iter().take_while(|r| r.grid_index == g).count();
        let group = &rows[start..end];
        let col = |f: fn(&ResultRow) -> f64| median(&group.iter().map(f).collect::<Vec<_>>());
        let r0 = &group[0];
        out.push(SummaryRow {
            grid_index: g,
            n: r0.n,
            m: r0.m,
            d: r0.d,
            epsilon: r0.epsilon,
            runs: group.len(),
            passed: group.iter().filter(|r| r.passed_sosp).count(),
            truncated: group.iter().filter(|r| r.truncated).count(),
            median_grad_norm: col(|r| r.final_grad_norm),
            median_lambda_min: col(|r| r.final_lambda_min),
            median_alpha: col(|r| r.alpha),
        });
        start = end;
    }
    out
}

/// Log-log slope of the median gradient norm against `n`, reported when
/// the sweep varies `n` and nothing else.
pub fn n_sweep_slope(cfg: &ExperimentConfig, summary: &[SummaryRow]) -> Option<SlopeFit> {
    let single = |g: &Option<Vec<usize>>| g.as_ref().is_none_or(|v| v.len() == 1);
    let n_varies = cfg.sweep.n.as_ref().is_some_and(|v| v.len() > 1);
    let others_fixed = single(&cfg.sweep.m)
        && single(&cfg.sweep.d)
        && cfg.sweep.epsilon.as_ref().is_none_or(|v| v.len() == 1);
    if cfg.mode != Mode::Sweep || !n_varies || !others_fixed {
        return None;
    }
    let pts: Vec<(f64, f64)> = summary
        .iter()
        .filter(|s| s.median_grad_norm > 0.0)
        .map(|s| ((s.n as f64).ln(), s.median_grad_norm.ln()))
        .collect();
    let (slope, intercept) = least_squares(&pts)?;
    Some(SlopeFit {
        axis: "n".into(),
        slope,
        intercept,
        points: pts.len(),
    })
}

/// Ordinary least squares `y = a x + b`; `None` for fewer than two
/// distinct abscissae.
pub fn least_squares(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    let k = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let a = sxy / sxx;
    Some((a, my - a * mx))
}

fn saddle_of(cfg: &ExperimentConfig, obj: &ObjectiveSpec) -> Result<Vector> {
    obj.saddle_points()
        .first()
        .cloned()
        .ok_or_else(|| Error::Config(format!("objective `{}` has no planted saddle", cfg.objective)))
}

/// Parameters of the escape experiments: derived from the plain oracle's
/// noise profile, with the escape threshold matched to the saddle so that
/// its curvature sits exactly at the strict-saddle boundary
/// `lambda_min = -sqrt(rho alpha)`, i.e. `chi = lambda_min^2 / (4 rho)`.
/// An explicit `chi` override or the `paper-defaults` preset take precedence.
pub fn escape_params(cfg: &ExperimentConfig, obj: &ObjectiveSpec, saddle: &Vector) -> Result<PsgdParams> {
    let bounds = obj.bounds();
    let esc = &cfg.escape;
    let params = plan_plain(cfg, &bounds, obj.dim(), minibatch_sigma(obj, esc.batch), esc.noise_std)?;
    if cfg.overrides.chi.is_some() || cfg.preset == Preset::PaperDefaults {
        return Ok(params);
    }
    let lambda = dense_smallest_eigenpair(&obj.hessian(saddle)?)?.value;
    if lambda >= 0.0 {
        return Err(Error::Config(format!("objective `{}` has no negative curvature at its saddle", cfg.objective)));
    }
    let chi = lambda * lambda / (4.0 * bounds.hessian_lipschitz);
    let matched = params.with_threshold(&bounds, chi, bounds.value_range)?;
    // keep any explicit step, round or radius overrides
    plan::apply_overrides(
        &ExperimentConfig {
            overrides: Overrides {
                chi: None,
                ..cfg.overrides.clone()
            },
            ..cfg.clone()
        },
        &bounds,
        matched,
    )
}

/// Sub-Gaussian parameter of a `batch`-sample mean of the sample noise.
fn minibatch_sigma(obj: &ObjectiveSpec, batch: usize) -> f64 {
    obj.noise_bound() / (batch as f64).sqrt()
}

fn trial_jobs(cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<(u64, usize)> {
    seeds
        .iter()
        .flat_map(|&s| (0..cfg.escape.trials).map(move |t| (s, t)))
        .collect()
}

/// Single `Gamma`-step escape rounds from the planted saddle with the plain
/// oracle, compared against the 1/8 reference rate.
fn run_escape_test(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<ExperimentReport> {
    let obj = build_objective(cfg, cfg.dim)?;
    let saddle = saddle_of(cfg, &obj)?;
    let esc = &cfg.escape;
    let params = escape_params(cfg, &obj, &saddle)?;
    let trials: Vec<EscapeTrialRow> = trial_jobs(cfg, seeds)
        .par_iter()
        .map(|&(seed, trial)| {
            let n = esc.batch * params.escape_steps;
            let mut oracle = PlainOracle::new(obj.clone(), mix_seed(seed, trial as u64), n, esc.batch, esc.noise_std)?;
            let o = gamma_descent(&saddle, &mut oracle, &params)?;
            Ok(EscapeTrialRow {
                seed,
                trial,
                escaped: o.escaped,
                steps: o.steps_in_round,
                displacement: o.displacement,
            })
        })
        .collect::<Result<_>>()?;
    let escapes = trials.iter().filter(|t| t.escaped).count();
    let summary = EscapeSummary::new("single-round", trials.len(), escapes, 1.0 / 8.0, &params);
    write_rows(&out.join("escape_trials.csv"), &trials)?;
    write_rows(&out.join("escape_summary.csv"), std::slice::from_ref(&summary))?;
    Ok(ExperimentReport {
        out_dir: out.to_path_buf(),
        escape_trials: trials,
        escape: vec![summary],
        ..Default::default()
    })
}

/// Coupled escape trials from the planted saddle, compared against the 1/4
/// reference rate, paired with the same trials mirrored along the most
/// positive curvature direction.
fn run_coupled_test(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<ExperimentReport> {
    let obj = build_objective(cfg, cfg.dim)?;
    let saddle = saddle_of(cfg, &obj)?;
    let esc = &cfg.escape;
    let params = escape_params(cfg, &obj, &saddle)?;
    let noise = CoupledNoise {
        batch: esc.batch,
        noise_std: esc.noise_std,
    };
    let h = obj.hessian(&saddle)?;
    let top = dense_smallest_eigenpair(&(-h))?;
    let trials: Vec<CoupledTrialRow> = trial_jobs(cfg, seeds)
        .par_iter()
        .map(|&(seed, trial)| {
            let tc = CoupledTrialConfig::at_saddle(&obj, &saddle, mix_seed(seed, trial as u64))?;
            let right = run_coupled_escape_trial(&obj, &tc, &noise, &params)?;
            let wrong_cfg = CoupledTrialConfig {
                v_min: top.vector.clone(),
                ..tc
            };
            let wrong = run_coupled_escape_trial(&obj, &wrong_cfg, &noise, &params)?;
            Ok(CoupledTrialRow {
                seed,
                trial,
                either_escaped: right.either(),
                max_displacement: right.max_displacement,
                wrong_direction_either_escaped: wrong.either(),
            })
        })
        .collect::<Result<_>>()?;
    let total = trials.len();
    let right = trials.iter().filter(|t| t.either_escaped).count();
    let wrong = trials.iter().filter(|t| t.wrong_direction_either_escaped).count();
    let summaries = vec![
        EscapeSummary::new("coupled", total, right, 0.25, &params),
        EscapeSummary::new("coupled-wrong-direction", total, wrong, 0.25, &params),
    ];
    write_rows(&out.join("coupled_trials.csv"), &trials)?;
    write_rows(&out.join("coupled_summary.csv"), &summaries)?;
    Ok(ExperimentReport {
        out_dir: out.to_path_buf(),
        coupled_trials: trials,
        escape: summaries,
        ..Default::default()
    })
}

/// At most `k` iterates, evenly spaced, always keeping the first and last.
pub fn thin_candidates(iterates: &[Vector], k: usize) -> Vec<Vector> {
    let len = iterates.len();
    if len <= k {
        return iterates.to_vec();
    }
    if k == 1 {
        return vec![iterates[len - 1].clone()];
    }
    (0..k)
        .map(|i| iterates[(i * (len - 1) + (k - 1) / 2) / (k - 1)].clone())
        .collect()
}

/// Direct Gauss-PSGD output against private selection over the run's
/// iterates, per dimension of the grid.
fn run_select_ablation(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<ExperimentReport> {
    let jobs: Vec<(GridPoint, u64)> = grid_points(cfg)
        .into_iter()
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let held_n = ((cfg.n as f64 * cfg.select.held_out_fraction).ceil() as usize).max(1);
    let results: Vec<(RunOutcome, PairedRun)> = jobs
        .par_iter()
        .map(|(p, seed)| {
            let mut run = run_point(cfg, p, *seed, Some(out))?;
            let obj = build_objective(cfg, p.d)?;
            let bounds = obj.bounds();
            let iterates = run
                .iterates
                .take()
                .ok_or_else(|| Error::Internal("selection needs stored iterates".into()))?;
            let cands = CandidateSet::new(thin_candidates(&iterates, cfg.select.max_candidates))?;
            let mut held = ClientPool::held_out(*seed, p.m, held_n)?;
            let sel_cfg = SelectionConfig {
                alpha: run.row.alpha,
                privacy: crate::privacy::PrivacyBudget::new(p.epsilon, cfg.delta)?,
                omega_prime: cfg.omega_prime,
                c1: cfg.c1,
                c2: cfg.c2,
            };
            let outcome = private_select(&cands, &mut held, &obj, &bounds, &sel_cfg, &mut run.ledger)?;
            run.audit.ledger = run.ledger.audit(Some(cands.len()))?;
            let dir = out.join("runs").join(&run.audit.tag);
            write_json(&dir.join("audit.json"), &run.audit)?;
            run.ledger.save_csv(&dir.join("ledger.csv"))?;
            if cfg.write_traces {
                save_selection_csv(&outcome.trace, &dir.join("selection.csv"))?;
            }
            let crit = SospCriterion::alpha_sosp(run.row.alpha, bounds.hessian_lipschitz)?;
            let selected = match &outcome.selected {
                Some(x) => {
                    let r = verify_point(&obj, x, &crit)?;
                    Some(ArmResult {
                        grad_norm: r.grad_norm,
                        lambda_min: r.lambda_min,
                        passes: r.passes,
                    })
                }
                None => None,
            };
            let pair = PairedRun {
                d: p.d,
                seed: *seed,
                direct: ArmResult {
                    grad_norm: run.report.grad_norm,
                    lambda_min: run.report.lambda_min,
                    passes: run.report.passes,
                },
                selected,
                selected_index: outcome.index,
            };
            Ok((run, pair))
        })
        .collect::<Result<_>>()?;
    let outcomes: Vec<RunOutcome> = results.iter().map(|(o, _)| o.clone()).collect();
    check_artifacts(out, &outcomes)?;
    let rows: Vec<ResultRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    let audits = outcomes.into_iter().map(|o| o.audit).collect();
    let pairs: Vec<PairedRun> = results.into_iter().map(|(_, p)| p).collect();
    let degradation = selection_degradation_report(&pairs);
    let summary = summarize(&rows);
    write_rows(&out.join("results.csv"), &rows)?;
    write_rows(&out.join("summary.csv"), &summary)?;
    write_pairs(&out.join("pairs.csv"), &pairs)?;
    write_degradation_csv(&degradation, fs::File::create(out.join("degradation.csv"))?)?;
    Ok(ExperimentReport {
        out_dir: out.to_path_buf(),
        rows,
        audits,
        summary,
        pairs,
        degradation,
        ..Default::default()
    })
}

fn write_pairs(path: &Path, pairs: &[PairedRun]) -> Result<()> {
    #[derive(Serialize)]
    struct Flat {
        d: usize,
        seed: u64,
        direct_grad_norm: f64,
        direct_lambda_min: f64,
        direct_passes: bool,
        selected_index: Option<usize>,
        selected_grad_norm: Option<f64>,
        selected_lambda_min: Option<f64>,
        selected_passes: Option<bool>,
    }
    let flat: Vec<Flat> = pairs
        .iter()
        .map(|p| Flat {
            d: p.d,
            seed: p.seed,
            direct_grad_norm: p.direct.grad_norm,
            direct_lambda_min: p.direct.lambda_min,
            direct_passes: p.direct.passes,
            selected_index: p.selected_index,
            selected_grad_norm: p.selected.map(|a| a.grad_norm),
            selected_lambda_min: p.selected.map(|a| a.lambda_min),
            selected_passes: p.selected.map(|a| a.passes),
        })
        .collect();
    write_rows(path, &flat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: Mode, out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            mode,
            dim: 4,
            n: 2000,
            seeds: Some(vec![1, 2]),
            out: Some(out.to_path_buf()),
            ..Default::default()
        }
    }

    #[test]
    fn thinning_keeps_endpoints() {
        let its: Vec<Vector> = (0..100).map(|i| Vector::filled(1, i as f64)).collect();
        let t = thin_candidates(&its, 5);
        let v: Vec<f64> = t.iter().map(|x| x[0]).collect();
        assert_eq!(v.first(), Some(&0.0));
        assert_eq!(v.last(), Some(&99.0));
        assert_eq!(v.len(), 5);
        assert!(v.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(thin_candidates(&its[..3], 5).len(), 3);
        assert_eq!(thin_candidates(&its, 1)[0][0], 99.0);
    }

    #[test]
    fn least_squares_recovers_a_line() {
        let pts: Vec<(f64, f64)> = (1..6).map(|i| (i as f64, -0.4 * i as f64 + 2.0)).collect();
        let (a, b) = least_squares(&pts).unwrap();
        assert!((a + 0.4).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
        assert!(least_squares(&pts[..1]).is_none());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::AccountingViolation("x".into())), 3);
        assert_eq!(exit_code(&Error::Internal("x".into())), 1);
    }

    #[test]
    fn grid_is_a_cross_product() {
        let mut cfg = ExperimentConfig {
            mode: Mode::Sweep,
            ..Default::default()
        };
        cfg.sweep.n = Some(vec![10, 20]);
        cfg.sweep.m = Some(vec![1, 2, 3]);
        let g = grid_points(&cfg);
        assert_eq!(g.len(), 6);
        assert_eq!((g[0].n, g[0].m), (10, 1));
        assert_eq!((g[5].n, g[5].m), (20, 3));
        assert!(g.iter().enumerate().all(|(i, p)| p.index == i));
    }

    #[test]
    fn single_run_writes_audited_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&small(Mode::Single, dir.path())).unwrap();
        assert_eq!(report.rows.len(), 2);
        for a in &report.audits {
            let run = dir.path().join("runs").join(&a.tag);
            for f in ["audit.json", "ledger.csv", "trace.csv", "events.jsonl", "oracle_trace.csv"] {
                assert!(run.join(f).is_file(), "{f}");
            }
        }
        for f in ["results.csv", "summary.csv", "config.toml"] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
    }

    #[test]
    fn reruns_are_identical_regardless_of_workers() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut cfg = small(Mode::Distributed, a.path());
        cfg.m = 3;
        cfg.workers = Some(1);
        let ra = run_experiment(&cfg).unwrap();
        cfg.out = Some(b.path().to_path_buf());
        cfg.workers = Some(4);
        let rb = run_experiment(&cfg).unwrap();
        let strip = |rows: &[ResultRow]| -> Vec<ResultRow> {
            rows.iter()
                .map(|r| ResultRow {
                    wall_time: 0.0,
                    ..r.clone()
                })
                .collect()
        };
        assert_eq!(strip(&ra.rows), strip(&rb.rows));
        assert_eq!(ra.audits, rb.audits);
        let ledger = |p: &Path| fs::read(p.join("runs").join(run_tag(0, 1)).join("ledger.csv")).unwrap();
        assert_eq!(ledger(a.path()), ledger(b.path()));
    }

    #[test]
    fn empty_seed_list_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(Mode::Single, dir.path());
        cfg.seeds = Some(vec![]);
        let err = run_experiment(&cfg).unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }
}
