//! Gauss-PSGD: perturbed SGD that detects small gradients, tries up to `Q`
//! rounds of `Gamma`-step escape from the suspected saddle, and returns the
//! anchor when every round stays within radius `R`.
//!
//! Also hosts the coupled-sequence escape experiment and the descent-lemma
//! audit over logged exact quantities.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{DatasetBudget, ObjectiveSpec};
use crate::oracles::GradientOracle;
use crate::params::PsgdParams;
use crate::rng::SeededRng;
use crate::vector::Vector;

/// `||g_hat|| <= 3 chi`, inclusive.
pub fn small_gradient_trigger(g_hat: &Vector, chi: f64) -> bool {
    g_hat.norm() <= 3.0 * chi
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Descent,
    EscapeBegin,
    EscapeRound,
    EscapeSuccess,
    EscapeFail,
    Output,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Descent => "DESCENT",
            EventKind::EscapeBegin => "ESCAPE_BEGIN",
            EventKind::EscapeRound => "ESCAPE_ROUND",
            EventKind::EscapeSuccess => "ESCAPE_SUCCESS",
            EventKind::EscapeFail => "ESCAPE_FAIL",
            EventKind::Output => "OUTPUT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Global step counter (oracle queries so far).
    pub step: usize,
    pub kind: EventKind,
    /// Escape round, for round-scoped events.
    pub round: Option<usize>,
    /// Norm of the oracle estimate behind the event.
    pub grad_norm_est: Option<f64>,
    pub exact_grad_norm: Option<f64>,
    pub value: Option<f64>,
    /// Distance from the escape anchor.
    pub displacement: Option<f64>,
}

/// Exact quantities logged for one step `x -> x - eta * g_hat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Steps sharing a segment form one contiguous path (segments break at
    /// rewinds).
    pub segment: usize,
    pub value_before: f64,
    pub value_after: f64,
    /// `||grad F(x)||^2` at the queried point.
    pub grad_sq: f64,
    /// `||g_hat - grad F(x)||^2`.
    pub noise_sq: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub events: Vec<TraceEvent>,
    /// Every iterate, when requested.
    pub iterates: Option<Vec<Vector>>,
    /// Exact population values at iterates, when diagnostics are on.
    pub function_values: Vec<f64>,
    pub steps: Vec<StepRecord>,
    /// Oracle queries made, including rewound escape rounds.
    pub total_steps: usize,
    pub truncated: bool,
    pub truncation_reason: Option<String>,
    /// Some iterate left the box on which the objective's constants hold.
    pub left_box: bool,
    pub escape_attempts: usize,
    pub escapes: usize,
    /// `F(anchor) - F(exit)` for each successful escape, with diagnostics.
    pub escape_decreases: Vec<f64>,
}

impl RunTrace {
    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    /// CSV with columns
    /// `step,kind,grad_norm_est,exact_grad_norm,F_exact,displacement`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "kind", "grad_norm_est", "exact_grad_norm", "F_exact", "displacement"])?;
        for e in &self.events {
            w.write_record([
                e.step.to_string(),
                e.kind.as_str().to_string(),
                opt(e.grad_norm_est),
                opt(e.exact_grad_norm),
                opt(e.value),
                opt(e.displacement),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One JSON object per event.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.events {
            let line = serde_json::to_string(e).map_err(|err| Error::Internal(err.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Result of one `Gamma`-step escape round.
#[derive(Debug, Clone, PartialEq)]
pub struct EscapeOutcome {
    pub escaped: bool,
    /// Rounds run so far in the current escape phase, including this one.
    pub rounds_used: usize,
    pub steps_in_round: usize,
    /// Distance from the anchor at the last step taken.
    pub displacement: f64,
    /// Last iterate of the round.
    pub end: Vector,
}

/// Knobs of a Gauss-PSGD run beyond the parameter block.
#[derive(Debug, Clone)]
pub struct PsgdOptions {
    /// Cap on oracle queries; reaching it truncates the run.
    pub max_steps: usize,
    /// Objective used for exact diagnostics and the box check.
    pub objective: Option<ObjectiveSpec>,
    /// Log exact values, gradients and noise per step.
    pub diagnostics: bool,
    pub store_iterates: bool,
}

impl PsgdOptions {
    pub fn new(max_steps: usize) -> Self {
        PsgdOptions {
            max_steps,
            objective: None,
            diagnostics: false,
            store_iterates: false,
        }
    }

    pub fn with_objective(mut self, obj: ObjectiveSpec, diagnostics: bool) -> Self {
        self.objective = Some(obj);
        self.diagnostics = diagnostics;
        self
    }
}

/// Default cap on oracle queries: ten times the step budget, at least `Q * Gamma + 1`.
pub fn default_max_steps(params: &PsgdParams, value_gap: f64) -> usize {
    let budget = 10.0 * params.step_budget(value_gap);
    let floor = (params.escape_rounds * params.escape_steps + 1) as f64;
    let cap = budget.max(floor);
    if cap.is_finite() && cap < 1e12 {
        cap.ceil() as usize
    } else {
        1_000_000_000_000
    }
}

enum Stop {
    Cap,
    Budget(Error),
}

struct Runner<'a, O: GradientOracle + ?Sized> {
    oracle: &'a mut O,
    params: &'a PsgdParams,
    opts: &'a PsgdOptions,
    trace: RunTrace,
    segment: usize,
}

impl<O: GradientOracle + ?Sized> Runner<'_, O> {
    fn exact(&self, x: &Vector) -> Result<Option<(f64, Vector)>> {
        match (&self.opts.objective, self.opts.diagnostics) {
            (Some(obj), true) => Ok(Some((obj.value(x)?, obj.gradient(x)?))),
            _ => Ok(None),
        }
    }

    fn query(&mut self, x: &Vector) -> std::result::Result<Vector, Stop> {
        if self.trace.total_steps >= self.opts.max_steps {
            return Err(Stop::Cap);
        }
        match self.oracle.query(x) {
            Ok(out) => {
                self.trace.total_steps += 1;
                Ok(out.g_hat)
            }
            Err(e) => Err(Stop::Budget(e)),
        }
    }

    /// Takes `x - eta * g_hat`, logging exact diagnostics.
    fn step(&mut self, x: &Vector, g_hat: &Vector) -> Result<Vector> {
        let eta = self.params.step_size;
        let next = x.sub(&g_hat.scale(eta));
        self.oracle.after_step(eta, g_hat);
        if let Some((f0, grad)) = self.exact(x)? {
            let (f1, _) = self.exact(&next)?.expect("diagnostics enabled");
            self.trace.steps.push(StepRecord {
                segment: self.segment,
                value_before: f0,
                value_after: f1,
                grad_sq: grad.norm_sq(),
                noise_sq: g_hat.sub(&grad).norm_sq(),
            });
            self.trace.function_values.push(f1);
        }
        if let Some(obj) = &self.opts.objective {
            if !obj.in_box(&next) {
                self.trace.left_box = true;
            }
        }
        if let Some(path) = self.trace.iterates.as_mut() {
            path.push(next.clone());
        }
        if !next.is_finite() {
            return Err(Error::Internal("iterate became non-finite".into()));
        }
        Ok(next)
    }

    fn event(
        &mut self,
        kind: EventKind,
        x: &Vector,
        round: Option<usize>,
        g_hat: Option<&Vector>,
        displacement: Option<f64>,
    ) -> Result<()> {
        let exact = self.exact(x)?;
        self.trace.events.push(TraceEvent {
            step: self.trace.total_steps,
            kind,
            round,
            grad_norm_est: g_hat.map(|g| g.norm()),
            exact_grad_norm: exact.as_ref().map(|(_, g)| g.norm()),
            value: exact.map(|(f, _)| f),
            displacement,
        });
        Ok(())
    }

    fn round(&mut self, anchor: &Vector, round: usize) -> std::result::Result<EscapeOutcome, (Stop, Vector)> {
        let radius = self.params.escape_radius;
        let mut x = anchor.clone();
        let mut displacement = 0.0;
        for tau in 1..=self.params.escape_steps {
            let g = match self.query(&x) {
                Ok(g) => g,
                Err(stop) => return Err((stop, x)),
            };
            x = self.step(&x, &g).map_err(|e| (Stop::Budget(e), anchor.clone()))?;
            displacement = x.distance(anchor);
            if displacement >= radius {
                return Ok(EscapeOutcome {
                    escaped: true,
                    rounds_used: round,
                    steps_in_round: tau,
                    displacement,
                    end: x,
                });
            }
        }
        Ok(EscapeOutcome {
            escaped: false,
            rounds_used: round,
            steps_in_round: self.params.escape_steps,
            displacement,
            end: x,
        })
    }

    fn finish(mut self, x: Vector, stop: Option<Stop>) -> Result<(Vector, RunTrace)> {
        match stop {
            None => {}
            Some(Stop::Cap) => {
                self.trace.truncated = true;
                self.trace.truncation_reason = Some(format!("step cap {} reached", self.opts.max_steps));
            }
            Some(Stop::Budget(e @ Error::BudgetExhausted { .. })) => {
                self.trace.truncated = true;
                self.trace.truncation_reason = Some(e.to_string());
            }
            Some(Stop::Budget(e)) => return Err(e),
        }
        self.event(EventKind::Output, &x, None, None, None)?;
        Ok((x, self.trace))
    }
}

fn validate(params: &PsgdParams) -> Result<()> {
    let ok = params.step_size > 0.0
        && params.step_size.is_finite()
        && params.escape_threshold >= 0.0
        && params.escape_radius >= 0.0
        && params.escape_steps >= 1
        && params.escape_rounds >= 1;
    if ok {
        Ok(())
    } else {
        Err(Error::invalid("PSGD needs eta > 0, chi >= 0, R >= 0, Gamma >= 1, Q >= 1"))
    }
}

/// Runs Gauss-PSGD from `x0`.
///
/// Returns the first anchor at which `Q` escape rounds all stay within `R`.
/// When the step cap or the sample budget runs out first, the run is
/// flagged as truncated and returns the escape anchor (during an escape
/// phase) or the current iterate.
pub fn gauss_psgd<O: GradientOracle + ?Sized>(
    x0: &Vector,
    oracle: &mut O,
    params: &PsgdParams,
    opts: &PsgdOptions,
) -> Result<(Vector, RunTrace)> {
    validate(params)?;
    if opts.max_steps == 0 {
        return Err(Error::invalid("max_steps must be >= 1"));
    }
    if !x0.is_finite() || x0.dim() != oracle.dim() {
        return Err(Error::invalid("initial point must be finite and match the oracle dimension"));
    }
    let mut run = Runner {
        oracle,
        params,
        opts,
        trace: RunTrace {
            iterates: opts.store_iterates.then(|| vec![x0.clone()]),
            ..RunTrace::default()
        },
        segment: 0,
    };
    let mut x = x0.clone();
    loop {
        let g = match run.query(&x) {
            Ok(g) => g,
            Err(stop) => return run.finish(x, Some(stop)),
        };
        if !small_gradient_trigger(&g, params.escape_threshold) {
            x = run.step(&x, &g)?;
            run.event(EventKind::Descent, &x, None, Some(&g), None)?;
            continue;
        }
        let anchor = x.clone();
        run.trace.escape_attempts += 1;
        run.event(EventKind::EscapeBegin, &anchor, None, Some(&g), None)?;
        run.oracle.begin_escape(&anchor);
        let mut escaped = None;
        for q in 1..=params.escape_rounds {
            if q > 1 {
                run.segment += 1;
            }
            run.event(EventKind::EscapeRound, &anchor, Some(q), None, None)?;
            match run.round(&anchor, q) {
                Ok(outcome) if outcome.escaped => {
                    escaped = Some(outcome);
                    break;
                }
                Ok(outcome) => {
                    if q < params.escape_rounds {
                        run.oracle.rewind(&anchor, &outcome.end);
                    }
                }
                Err((stop, _)) => return run.finish(anchor, Some(stop)),
            }
        }
        match escaped {
            Some(outcome) => {
                run.trace.escapes += 1;
                if let (Some((f0, _)), Some((f1, _))) = (run.exact(&anchor)?, run.exact(&outcome.end)?) {
                    run.trace.escape_decreases.push(f0 - f1);
                }
                run.event(
                    EventKind::EscapeSuccess,
                    &outcome.end,
                    Some(outcome.rounds_used),
                    None,
                    Some(outcome.displacement),
                )?;
                x = outcome.end;
            }
            None => {
                run.event(EventKind::EscapeFail, &anchor, Some(params.escape_rounds), None, None)?;
                return run.finish(anchor, None);
            }
        }
    }
}

/// One escape round of at most `Gamma` perturbed steps from `anchor`,
/// stopping at the first iterate at distance `>= R`.
pub fn gamma_descent<O: GradientOracle + ?Sized>(
    anchor: &Vector,
    oracle: &mut O,
    params: &PsgdParams,
) -> Result<EscapeOutcome> {
    validate(params)?;
    let opts = PsgdOptions::new(usize::MAX);
    let mut run = Runner {
        oracle,
        params,
        opts: &opts,
        trace: RunTrace::default(),
        segment: 0,
    };
    match run.round(anchor, 1) {
        Ok(outcome) => Ok(outcome),
        Err((Stop::Budget(e), _)) => Err(e),
        Err((Stop::Cap, _)) => Err(Error::Internal("uncapped round hit the step cap".into())),
    }
}

/// Worst violation of the descent inequality
/// `F(x_{t0+t}) - F(x_{t0}) <= -(eta/2) sum ||grad F||^2 + (eta/2) sum ||nu||^2`
/// over every window of consecutive logged steps within a segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentAudit {
    pub windows: usize,
    /// Largest `lhs - rhs` over all windows (non-positive when the inequality
    /// holds everywhere).
    pub max_violation: f64,
}

pub fn descent_lemma_audit(steps: &[StepRecord], eta: f64) -> DescentAudit {
    let mut windows = 0usize;
    let mut worst = f64::NEG_INFINITY;
    let mut start = 0;
    while start < steps.len() {
        let seg = steps[start].segment;
        let mut end = start;
        while end < steps.len() && steps[end].segment == seg {
            end += 1;
        }
        let run = &steps[start..end];
        // lhs - rhs for window [i, j) is S_j - S_i with
        // S_k = F_k + (eta/2) sum_{l<k} (grad_l - noise_l)
        let mut s = Vec::with_capacity(run.len() + 1);
        s.push(run[0].value_before);
        let mut acc = 0.0;
        for r in run {
            acc += 0.5 * eta * (r.grad_sq - r.noise_sq);
            s.push(r.value_after + acc);
        }
        let mut min_prefix = s[0];
        for &sj in &s[1..] {
            worst = worst.max(sj - min_prefix);
            min_prefix = min_prefix.min(sj);
        }
        let k = run.len();
        windows += k * (k + 1) / 2;
        start = end;
    }
    DescentAudit {
        windows,
        max_violation: if windows == 0 { 0.0 } else { worst },
    }
}

/// Inputs of a coupled escape trial.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledTrialConfig {
    pub saddle: Vector,
    /// Unit direction along which the two sequences' noise is mirrored.
    pub v_min: Vector,
    /// `-lambda_min` of the Hessian at the saddle.
    pub gamma: f64,
    pub seed: u64,
}

impl CoupledTrialConfig {
    /// Builds the configuration at `saddle` from the exact Hessian.
    pub fn at_saddle(obj: &ObjectiveSpec, saddle: &Vector, seed: u64) -> Result<Self> {
        let dense = crate::linalg::dense_smallest_eigenpair(&obj.hessian(saddle)?)?;
        if dense.value >= 0.0 {
            return Err(Error::invalid("coupled trial needs negative curvature at the anchor"));
        }
        Ok(CoupledTrialConfig {
            saddle: saddle.clone(),
            v_min: dense.vector,
            gamma: -dense.value,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if (self.v_min.norm() - 1.0).abs() > 1e-9 || !(self.gamma > 0.0) {
            return Err(Error::invalid("coupled trial needs a unit direction and gamma > 0"));
        }
        Ok(())
    }
}

/// Oracle used by both coupled sequences: `b`-sample minibatch gradient plus
/// isotropic Gaussian noise with per-coordinate std `noise_std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledNoise {
    pub batch: usize,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledOutcome {
    pub a_escaped: bool,
    pub b_escaped: bool,
    pub max_displacement: f64,
    /// Largest `||x_a - x_b||` seen.
    pub max_separation: f64,
}

impl CoupledOutcome {
    pub fn either(&self) -> bool {
        self.a_escaped || self.b_escaped
    }
}

/// Runs two `Gamma`-step sequences from the saddle that share every sample
/// and the noise component orthogonal to `v_min`, with opposite noise
/// components along `v_min`.
pub fn run_coupled_escape_trial(
    obj: &ObjectiveSpec,
    cfg: &CoupledTrialConfig,
    noise: &CoupledNoise,
    params: &PsgdParams,
) -> Result<CoupledOutcome> {
    cfg.validate()?;
    validate(params)?;
    let mut rng = SeededRng::new(cfg.seed, 0xc0_0b1e);
    let mut budget = DatasetBudget::new(0, noise.batch * params.escape_steps);
    let (mut xa, mut xb) = (cfg.saddle.clone(), cfg.saddle.clone());
    let (mut ea, mut eb) = (false, false);
    let mut max_disp: f64 = 0.0;
    let mut max_sep: f64 = 0.0;
    let eta = params.step_size;
    for _ in 0..params.escape_steps {
        let batch = obj.sample_batch(&mut budget, noise.batch, &mut rng)?;
        let xi = rng.gaussian_vector(obj.dim(), noise.noise_std);
        let mirrored = xi.sub(&cfg.v_min.scale(2.0 * cfg.v_min.dot(&xi)));
        if !ea {
            let g = obj.batch_gradient(&xa, &batch, None)?.add(&xi);
            xa = xa.sub(&g.scale(eta));
        }
        if !eb {
            let g = obj.batch_gradient(&xb, &batch, None)?.add(&mirrored);
            xb = xb.sub(&g.scale(eta));
        }
        let (da, db) = (xa.distance(&cfg.saddle), xb.distance(&cfg.saddle));
        max_disp = max_disp.max(da).max(db);
        max_sep = max_sep.max(xa.distance(&xb));
        ea |= da >= params.escape_radius;
        eb |= db >= params.escape_radius;
        if ea && eb {
            break;
        }
    }
    Ok(CoupledOutcome {
        a_escaped: ea,
        b_escaped: eb,
        max_displacement: max_disp,
        max_separation: max_sep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{build, ObjectiveOptions};
    use crate::oracles::PlainOracle;

    fn fixed(eta: f64, chi: f64, radius: f64, gamma: usize, q: usize) -> PsgdParams {
        PsgdParams {
            scale: 1.0,
            noise_const: 1.0,
            failure_prob: 0.1,
            log_factor: 1.0,
            log_factor_branches: [None, None, None, Some(1.0)],
            log_factor_residual: 0.0,
            iota: 1.0,
            escape_threshold: chi,
            alpha: 4.0 * chi,
            escape_steps: gamma,
            escape_radius: radius,
            escape_decrease: 0.0,
            step_size: eta,
            escape_rounds: q,
            psi: 0.0,
            horizon: 1.0,
            smoothness_warning: false,
            step_smoothness: 0.0,
        }
    }

    fn noiseless(name: &str, d: usize) -> crate::objectives::ObjectiveSpec {
        let opts = ObjectiveOptions {
            noise: Some(0.0),
            ..ObjectiveOptions::default()
        };
        build(name, d, &opts).unwrap()
    }

    #[test]
    fn trigger_boundary() {
        let chi = 0.7;
        let g = Vector::new(vec![3.0 * chi, 0.0]).unwrap();
        assert!(small_gradient_trigger(&g, chi));
        assert!(small_gradient_trigger(&Vector::zeros(3), chi));
        let over = Vector::new(vec![3.0 * chi * (1.0 + 1e-9), 0.0]).unwrap();
        assert!(!small_gradient_trigger(&over, chi));
    }

    #[test]
    fn zero_radius_escapes_at_first_step() {
        let obj = noiseless("double-well", 4);
        let mut oracle = PlainOracle::new(obj.clone(), 1, 1000, 1, 0.1).unwrap();
        let out = gamma_descent(&Vector::zeros(4), &mut oracle, &fixed(0.01, 1.0, 0.0, 10, 3)).unwrap();
        assert!(out.escaped);
        assert_eq!(out.steps_in_round, 1);
    }

    #[test]
    fn zero_noise_at_saddle_returns_saddle() {
        let obj = noiseless("double-well", 5);
        let mut oracle = PlainOracle::new(obj.clone(), 2, 10_000, 1, 0.0).unwrap();
        let params = fixed(0.05, 0.01, 0.1, 20, 3);
        let opts = PsgdOptions::new(10_000).with_objective(obj, true);
        let (x, trace) = gauss_psgd(&Vector::zeros(5), &mut oracle, &params, &opts).unwrap();
        assert_eq!(x, Vector::zeros(5));
        assert!(!trace.truncated);
        assert_eq!(trace.count(EventKind::EscapeRound), 3);
        assert_eq!(trace.count(EventKind::EscapeFail), 1);
        assert_eq!(trace.count(EventKind::Output), 1);
        assert_eq!(trace.total_steps, 1 + 3 * 20);
    }

    #[test]
    fn minimum_never_escapes() {
        let obj = noiseless("double-well", 6);
        let chi = 0.05;
        let noise = 1e-3;
        let mut oracle = PlainOracle::new(obj.clone(), 3, 10_000, 1, noise).unwrap();
        let params = fixed(0.05, chi, 0.2, 20, 3);
        let opts = PsgdOptions::new(10_000).with_objective(obj.clone(), true);
        let start = Vector::filled(6, 1.0).add(&Vector::filled(6, 0.01));
        let (x, trace) = gauss_psgd(&start, &mut oracle, &params, &opts).unwrap();
        assert_eq!(trace.count(EventKind::EscapeSuccess), 0);
        assert_eq!(trace.count(EventKind::Output), 1);
        let bound = 3.0 * chi + 6f64.sqrt() * noise * 5.0;
        assert!(obj.gradient(&x).unwrap().norm() <= bound);
    }

    #[test]
    fn escapes_saddle_and_traces_are_consistent() {
        let obj = noiseless("double-well", 4);
        let mut oracle = PlainOracle::new(obj.clone(), 4, 200_000, 1, 0.01).unwrap();
        let params = fixed(0.02, 0.02, 0.01, 100, 4);
        let opts = PsgdOptions::new(50_000).with_objective(obj.clone(), true);
        let (x, trace) = gauss_psgd(&Vector::zeros(4), &mut oracle, &params, &opts).unwrap();
        assert_eq!(trace.count(EventKind::Output), 1);
        assert!(trace.count(EventKind::EscapeSuccess) >= 1);
        for e in trace.events.iter().filter(|e| e.kind == EventKind::EscapeSuccess) {
            assert!(e.displacement.unwrap() >= params.escape_radius);
        }
        assert!(x.distance(&Vector::zeros(4)) > 0.5);
        let audit = descent_lemma_audit(&trace.steps, params.step_size);
        assert!(audit.windows > 0);
        assert!(audit.max_violation <= 1e-8, "violation {}", audit.max_violation);
    }

    #[test]
    fn descent_audit_brute_force() {
        let steps: Vec<StepRecord> = (0..7)
            .map(|i| StepRecord {
                segment: i / 4,
                value_before: 1.0 - 0.1 * i as f64,
                value_after: 1.0 - 0.1 * (i + 1) as f64 + if i == 2 { 0.3 } else { 0.0 },
                grad_sq: 1.0 + i as f64,
                noise_sq: 0.5,
            })
            .collect();
        let eta = 0.1;
        let audit = descent_lemma_audit(&steps, eta);
        let mut worst = f64::NEG_INFINITY;
        let mut windows = 0;
        for i in 0..steps.len() {
            for j in i..steps.len() {
                if steps[j].segment != steps[i].segment {
                    break;
                }
                let lhs = steps[j].value_after - steps[i].value_before;
                let rhs: f64 = steps[i..=j].iter().map(|r| 0.5 * eta * (r.noise_sq - r.grad_sq)).sum();
                worst = worst.max(lhs - rhs);
                windows += 1;
            }
        }
        assert_eq!(audit.windows, windows);
        assert!((audit.max_violation - worst).abs() < 1e-12);
    }

    #[test]
    fn coupled_without_noise_is_identical() {
        let obj = noiseless("quad-saddle", 5);
        let cfg = CoupledTrialConfig::at_saddle(&obj, &Vector::zeros(5), 9).unwrap();
        assert!((cfg.gamma - 1.0).abs() < 1e-9);
        let noise = CoupledNoise {
            batch: 1,
            noise_std: 0.0,
        };
        let out = run_coupled_escape_trial(&obj, &cfg, &noise, &fixed(0.1, 0.01, 0.1, 30, 1)).unwrap();
        assert_eq!(out.max_separation, 0.0);
        assert_eq!(out.a_escaped, out.b_escaped);
    }

    #[test]
    fn trace_exports() {
        let obj = noiseless("double-well", 3);
        let mut oracle = PlainOracle::new(obj.clone(), 5, 1000, 1, 0.0).unwrap();
        let opts = PsgdOptions::new(1000).with_objective(obj, true);
        let (_, trace) = gauss_psgd(&Vector::zeros(3), &mut oracle, &fixed(0.1, 0.1, 0.1, 2, 2), &opts).unwrap();
        let mut csv_out = Vec::new();
        trace.write_csv(&mut csv_out).unwrap();
        let text = String::from_utf8(csv_out).unwrap();
        assert!(text.starts_with("step,kind,grad_norm_est,exact_grad_norm,F_exact,displacement"));
        assert!(text.contains("OUTPUT"));
        let mut jl = Vec::new();
        trace.write_jsonl(&mut jl).unwrap();
        let lines: Vec<_> = String::from_utf8(jl).unwrap().lines().map(String::from).collect();
        assert_eq!(lines.len(), trace.events.len());
        let last: TraceEvent = serde_json::from_str(lines.last().unwrap()).unwrap();
        assert_eq!(last.kind, EventKind::Output);
    }

    #[test]
    fn budget_exhaustion_truncates() {
        let obj = noiseless("double-well", 3);
        let mut oracle = PlainOracle::new(obj.clone(), 6, 5, 1, 0.0).unwrap();
        let start = Vector::filled(3, 0.5);
        let (_, trace) = gauss_psgd(&start, &mut oracle, &fixed(0.01, 1e-6, 0.1, 2, 2), &PsgdOptions::new(100)).unwrap();
        assert!(trace.truncated);
        assert_eq!(trace.total_steps, 5);
        assert_eq!(trace.count(EventKind::Output), 1);
    }
}
