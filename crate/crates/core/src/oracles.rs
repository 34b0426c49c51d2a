//! Perturbed gradient oracles: a plain noisy minibatch oracle, the adaptive
//! variance-reduced oracle switching between anchor (O1) and difference (O2)
//! queries on accumulated drift, and its multi-client variant.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{DatasetBudget, ObjectiveSpec, Sample};
use crate::params::{LossBounds, NoiseProfile, PsgdParams};
use crate::privacy::{self, Mechanism, NoiseCalibration, Phase, PrivacyBudget, PrivacyLedger};
use crate::rng::SeededRng;
use crate::vector::{self, Vector};

/// Which query a step used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Plain,
    O1,
    O2,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Plain => "PLAIN",
            Branch::O1 => "O1",
            Branch::O2 => "O2",
        }
    }
}

/// Result of one oracle query.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    /// The perturbed gradient estimate.
    pub g_hat: Vector,
    pub branch: Branch,
    pub used_o1: bool,
    /// Samples consumed across all clients.
    pub samples_used: usize,
    /// Per-client noise calibration of this query.
    pub noise: NoiseCalibration,
}

/// How the drift accumulator treats escape rounds that are rewound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftRewindMode {
    /// Count every movement of the queried point, including the jump back
    /// to the escape anchor.
    #[default]
    ActualQueries,
    /// Restore the oracle's running state when a round is rewound, so only
    /// the accepted path contributes drift.
    AcceptedPath,
}

/// Running state of the variance-reduced oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpiderState {
    /// Previously queried point.
    pub last_x: Option<Vector>,
    /// Previous (aggregated) estimate.
    pub last_g: Option<Vector>,
    pub drift: f64,
    pub kappa: f64,
    pub b1: usize,
    pub b2: usize,
    pub o1_count: usize,
    pub step_index: usize,
}

impl SpiderState {
    /// Fresh state with `drift = kappa`, so the first query is an anchor.
    pub fn new(schedule: &ScheduleParams) -> Self {
        SpiderState {
            last_x: None,
            last_g: None,
            drift: schedule.kappa,
            kappa: schedule.kappa,
            b1: schedule.b1,
            b2: schedule.b2,
            o1_count: 0,
            step_index: 0,
        }
    }

    fn next_branch(&self) -> Branch {
        if self.drift >= self.kappa || self.last_x.is_none() || self.last_g.is_none() {
            Branch::O1
        } else {
            Branch::O2
        }
    }
}

/// Adds `eta^2 ||g_hat||^2` to the drift.
pub fn drift_update(state: &mut SpiderState, eta: f64, g_hat: &Vector) {
    state.drift += eta * eta * g_hat.norm_sq();
}

/// Batch sizes and drift threshold of the variance-reduced oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub kappa: f64,
    pub b1: usize,
    pub b2: usize,
    /// Unrounded `n kappa / (2 U eta)`.
    pub b1_raw: f64,
    /// Unrounded `n eta chi^2 / (2 U)`.
    pub b2_raw: f64,
    /// Whether either batch size had to be clamped into `[1, n]`.
    pub clamped: bool,
}

impl ScheduleParams {
    pub fn fixed(kappa: f64, b1: usize, b2: usize) -> Result<Self> {
        if !(kappa > 0.0) || b1 == 0 || b2 == 0 {
            return Err(Error::invalid("schedule needs kappa > 0 and positive batch sizes"));
        }
        Ok(ScheduleParams {
            kappa,
            b1,
            b2,
            b1_raw: b1 as f64,
            b2_raw: b2 as f64,
            clamped: false,
        })
    }
}

/// Drift threshold for `m` clients with `n` samples each:
/// `max{ G^1.5 U^0.5 rho^0.5 / (M^2.5 (mn)^0.5),
///       G^(14/15) d^0.4 U^0.8 rho^(8/15) / (M^(34/15) (sqrt(m) n eps)^0.8) }`.
pub fn drift_threshold(bounds: &LossBounds, n: usize, m: usize, d: usize, privacy: &PrivacyBudget) -> f64 {
    let (g, mm, rho, u) = (
        bounds.grad_bound,
        bounds.smoothness,
        bounds.hessian_lipschitz,
        bounds.value_range,
    );
    let (n, m, d) = (n as f64, m as f64, d as f64);
    let statistical = g.powf(1.5) * u.sqrt() * rho.sqrt() / (mm.powf(2.5) * (m * n).sqrt());
    let private = g.powf(14.0 / 15.0) * d.powf(0.4) * u.powf(0.8) * rho.powf(8.0 / 15.0)
        / (mm.powf(34.0 / 15.0) * (m.sqrt() * n * privacy.epsilon).powf(0.8));
    statistical.max(private)
}

/// Drift threshold and batch sizes `b1 = ceil(n kappa / (2 U eta))`,
/// `b2 = ceil(n eta chi^2 / (2 U))`, clamped to `[1, n]`.
pub fn derive_schedule(
    bounds: &LossBounds,
    params: &PsgdParams,
    n: usize,
    m: usize,
    d: usize,
    privacy: &PrivacyBudget,
) -> Result<ScheduleParams> {
    if n == 0 || m == 0 || d == 0 {
        return Err(Error::invalid("schedule needs n, m, d >= 1"));
    }
    privacy.validate()?;
    let kappa = drift_threshold(bounds, n, m, d, privacy);
    schedule_for_threshold(bounds, params, n, kappa)
}

/// The batch-size rules of [`derive_schedule`] for a given drift threshold.
pub fn schedule_for_threshold(bounds: &LossBounds, params: &PsgdParams, n: usize, kappa: f64) -> Result<ScheduleParams> {
    if n == 0 || !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::invalid(format!("schedule needs n >= 1 and kappa > 0, got n={n}, kappa={kappa}")));
    }
    let u = bounds.value_range;
    let eta = params.step_size;
    let chi = params.escape_threshold;
    let b1_raw = n as f64 * kappa / (2.0 * u * eta);
    let b2_raw = n as f64 * eta * chi * chi / (2.0 * u);
    let clamp = |raw: f64| -> (usize, bool) {
        let c = raw.ceil();
        if !(c >= 1.0) {
            (1, true)
        } else if c > n as f64 {
            (n, true)
        } else {
            (c as usize, false)
        }
    };
    let (b1, c1) = clamp(b1_raw);
    let (b2, c2) = clamp(b2_raw);
    Ok(ScheduleParams {
        kappa,
        b1,
        b2,
        b1_raw,
        b2_raw,
        clamped: c1 || c2,
    })
}

/// Noise profile implied by a schedule for `m` clients:
/// `sigma^2 = (G^2/b1 + M^2 kappa/b2) / m` and
/// `r^2 = (c1 G^2 L/(b1^2 eps^2) + c2 M^2 L kappa/(b2^2 eps^2)) / m`
/// with `L = ln(1/delta)`.
pub fn spider_noise_profile(
    bounds: &LossBounds,
    schedule: &ScheduleParams,
    m: usize,
    d: usize,
    privacy: &PrivacyBudget,
    c1: f64,
    c2: f64,
) -> Result<NoiseProfile> {
    let g2 = bounds.grad_bound.powi(2);
    let m2 = bounds.smoothness.powi(2);
    let (b1, b2) = (schedule.b1 as f64, schedule.b2 as f64);
    let k = schedule.kappa;
    let mf = m as f64;
    let l = privacy.log_inv_delta();
    let e2 = privacy.epsilon.powi(2);
    let sigma2 = (g2 / b1 + m2 * k / b2) / mf;
    let r2 = (c1 * g2 * l / (b1 * b1 * e2) + c2 * m2 * l * k / (b2 * b2 * e2)) / mf;
    NoiseProfile::new(sigma2.sqrt(), r2.sqrt(), d)
}

/// Constants shared by every client of a variance-reduced oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct SpiderConfig {
    /// Per-sample gradient clip for anchor queries; also the `G` of the noise
    /// formula.
    pub grad_bound: f64,
    /// Per-sample difference clip factor and the `M` of the noise formula.
    pub smoothness: f64,
    /// `None` disables noise injection.
    pub privacy: Option<PrivacyBudget>,
    pub c1: f64,
    pub c2: f64,
    /// Clip per-sample quantities at the declared bounds.
    pub clip: bool,
}

impl SpiderConfig {
    pub fn new(bounds: &LossBounds, privacy: Option<PrivacyBudget>) -> Self {
        SpiderConfig {
            grad_bound: bounds.grad_bound,
            smoothness: bounds.smoothness,
            privacy,
            c1: 1.0,
            c2: 1.0,
            clip: true,
        }
    }

    fn o1_calibration(&self, b1: usize) -> Result<NoiseCalibration> {
        match &self.privacy {
            Some(p) => privacy::o1_noise_variance(self.grad_bound, b1, p, self.c1),
            None => Ok(NoiseCalibration {
                variance: 0.0,
                mechanism: Mechanism::O1,
                sensitivity: privacy::o1_sensitivity(self.grad_bound, b1),
            }),
        }
    }

    fn o2_calibration(&self, b2: usize, step_dist: f64) -> Result<NoiseCalibration> {
        match &self.privacy {
            Some(p) => privacy::o2_noise_variance(self.smoothness, b2, p, step_dist, self.c2),
            None => Ok(NoiseCalibration {
                variance: 0.0,
                mechanism: Mechanism::O2,
                sensitivity: privacy::o2_sensitivity(self.smoothness, b2, step_dist),
            }),
        }
    }
}

/// Dataset ids at or above this mark held-out evaluation sets.
pub const HELD_OUT_DATASET_BASE: u32 = 1 << 20;

/// One client's private data stream and noise source.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub id: usize,
    pub budget: DatasetBudget,
    pub data_rng: SeededRng,
    pub noise_rng: SeededRng,
    /// The client's previous local estimate.
    pub last_g: Option<Vector>,
}

impl ClientData {
    /// Client `id` of a run seeded with `seed`, owning `n` training samples.
    pub fn new(seed: u64, id: usize, n: usize) -> Self {
        Self::with_dataset(seed, id, n, id as u32, 0x5eed_0000)
    }

    /// Client `id`'s held-out evaluation set of `n` samples, disjoint from
    /// its training set.
    pub fn held_out(seed: u64, id: usize, n: usize) -> Self {
        Self::with_dataset(seed, id, n, HELD_OUT_DATASET_BASE + id as u32, 0x5e1e_c700_0000)
    }

    fn with_dataset(seed: u64, id: usize, n: usize, dataset_id: u32, stream_base: u64) -> Self {
        let base = SeededRng::new(seed, stream_base + id as u64);
        ClientData {
            id,
            budget: DatasetBudget::new(dataset_id, n),
            data_rng: base.substream(1),
            noise_rng: base.substream(2),
            last_g: None,
        }
    }

    pub fn draw(&mut self, obj: &ObjectiveSpec, b: usize) -> Result<Vec<Sample>> {
        obj.sample_batch(&mut self.budget, b, &mut self.data_rng).map_err(|e| match e {
            Error::BudgetExhausted {
                requested, remaining, ..
            } => Error::BudgetExhausted {
                client: Some(self.id),
                requested,
                remaining,
            },
            other => other,
        })
    }
}

/// The simulated clients of a distributed run.
#[derive(Debug, Clone)]
pub struct ClientPool {
    pub clients: Vec<ClientData>,
}

impl ClientPool {
    pub fn new(seed: u64, m: usize, n: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("client pool needs at least one client"));
        }
        Ok(ClientPool {
            clients: (0..m).map(|j| ClientData::new(seed, j, n)).collect(),
        })
    }

    /// Held-out evaluation sets for `m` clients.
    pub fn held_out(seed: u64, m: usize, n: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("client pool needs at least one client"));
        }
        Ok(ClientPool {
            clients: (0..m).map(|j| ClientData::held_out(seed, j, n)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn samples_consumed(&self) -> usize {
        self.clients.iter().map(|c| c.budget.consumed).sum()
    }
}

/// Mean of per-sample gradient differences `grad f(x; z) - grad f(y; z)`,
/// each clipped to norm `clip` when given.
fn batch_difference(
    obj: &ObjectiveSpec,
    x: &Vector,
    y: &Vector,
    batch: &[Sample],
    clip: Option<f64>,
) -> Result<Vector> {
    let mut acc = Vector::zeros(obj.dim());
    for z in batch {
        let diff = obj.sample_gradient(x, z, None)?.sub(&obj.sample_gradient(y, z, None)?);
        let diff = match clip {
            Some(c) => {
                if c > 0.0 {
                    diff.clipped(c)
                } else {
                    Vector::zeros(obj.dim())
                }
            }
            None => diff,
        };
        acc.add_assign(&diff);
    }
    Ok(acc.scale(1.0 / batch.len() as f64))
}

/// A client's local estimate for one step, before aggregation.
struct LocalEstimate {
    g: Vector,
    sample_ids: Vec<u64>,
    noise: NoiseCalibration,
}

fn local_estimate(
    branch: Branch,
    x: &Vector,
    last_x: Option<&Vector>,
    last_g: Option<&Vector>,
    state: &SpiderState,
    obj: &ObjectiveSpec,
    client: &mut ClientData,
    cfg: &SpiderConfig,
) -> Result<LocalEstimate> {
    match branch {
        Branch::O1 => {
            let batch = client.draw(obj, state.b1)?;
            let clip = cfg.clip.then_some(cfg.grad_bound);
            let grad = obj.batch_gradient(x, &batch, clip)?;
            let noise = cfg.o1_calibration(state.b1)?;
            let g = if noise.variance > 0.0 {
                grad.add(&noise.sample(obj.dim(), &mut client.noise_rng))
            } else {
                grad
            };
            Ok(LocalEstimate {
                g,
                sample_ids: batch.iter().map(|s| s.id).collect(),
                noise,
            })
        }
        Branch::O2 => {
            let (Some(prev_x), Some(prev_g)) = (last_x, last_g) else {
                return Err(Error::Internal("difference query without a previous query".into()));
            };
            let batch = client.draw(obj, state.b2)?;
            let step_dist = x.distance(prev_x);
            let clip = cfg.clip.then_some(cfg.smoothness * step_dist);
            let diff = batch_difference(obj, x, prev_x, &batch, clip)?;
            let noise = cfg.o2_calibration(state.b2, step_dist)?;
            let mut g = prev_g.add(&diff);
            if noise.variance > 0.0 {
                g = g.add(&noise.sample(obj.dim(), &mut client.noise_rng));
            }
            Ok(LocalEstimate {
                g,
                sample_ids: batch.iter().map(|s| s.id).collect(),
                noise,
            })
        }
        Branch::Plain => Err(Error::Internal("plain branch in the variance-reduced oracle".into())),
    }
}

fn commit(
    state: &mut SpiderState,
    branch: Branch,
    x: &Vector,
    g: &Vector,
    ledger: &mut PrivacyLedger,
    cfg: &SpiderConfig,
    locals: Vec<LocalEstimate>,
) -> Result<(usize, NoiseCalibration)> {
    let mut samples = 0;
    let noise = locals[0].noise;
    for local in locals {
        samples += local.sample_ids.len();
        ledger.record_touch(local.sample_ids, Phase::Train)?;
        if let Some(p) = &cfg.privacy {
            ledger.record_release(state.step_index, &local.noise, p);
        }
    }
    if branch == Branch::O1 {
        state.drift = 0.0;
        state.o1_count += 1;
    }
    state.last_x = Some(x.clone());
    state.last_g = Some(g.clone());
    state.step_index += 1;
    Ok((samples, noise))
}

/// One query of the single-machine variance-reduced oracle at `x`.
///
/// Uses a fresh anchor batch of size `b1` when `drift >= kappa` (resetting
/// the drift), and otherwise corrects the previous estimate with a batch of
/// `b2` gradient differences between `x` and the previously queried point.
/// The caller applies [`drift_update`] after taking its step.
pub fn spider_step(
    state: &mut SpiderState,
    x: &Vector,
    obj: &ObjectiveSpec,
    client: &mut ClientData,
    cfg: &SpiderConfig,
    ledger: &mut PrivacyLedger,
) -> Result<OracleOutput> {
    x.check_dim(obj.dim(), "spider_step")?;
    let branch = state.next_branch();
    let local = local_estimate(
        branch,
        x,
        state.last_x.as_ref(),
        state.last_g.as_ref(),
        state,
        obj,
        client,
        cfg,
    )?;
    let g = local.g.clone();
    client.last_g = Some(g.clone());
    let (samples_used, noise) = commit(state, branch, x, &g, ledger, cfg, vec![local])?;
    Ok(OracleOutput {
        g_hat: g,
        branch,
        used_o1: branch == Branch::O1,
        samples_used,
        noise,
    })
}

/// One query of the multi-client oracle: every client forms its local
/// estimate with its own data and noise on the branch chosen from the shared
/// drift, and the server averages them.
pub fn distributed_spider_step(
    pool: &mut ClientPool,
    state: &mut SpiderState,
    x: &Vector,
    obj: &ObjectiveSpec,
    cfg: &SpiderConfig,
    ledger: &mut PrivacyLedger,
) -> Result<OracleOutput> {
    x.check_dim(obj.dim(), "distributed_spider_step")?;
    let branch = state.next_branch();
    if branch == Branch::O2 && pool.clients.iter().any(|c| c.last_g.is_none()) {
        return Err(Error::Internal("difference query before every client anchored".into()));
    }
    let snapshot: &SpiderState = state;
    let locals: Vec<Result<LocalEstimate>> = pool
        .clients
        .par_iter_mut()
        .map(|c| {
            let last_g = c.last_g.clone();
            local_estimate(branch, x, snapshot.last_x.as_ref(), last_g.as_ref(), snapshot, obj, c, cfg)
        })
        .collect();
    let locals: Vec<LocalEstimate> = locals.into_iter().collect::<Result<_>>()?;
    for (c, l) in pool.clients.iter_mut().zip(&locals) {
        c.last_g = Some(l.g.clone());
    }
    let g = vector::mean(&locals.iter().map(|l| l.g.clone()).collect::<Vec<_>>());
    let (samples_used, noise) = commit(state, branch, x, &g, ledger, cfg, locals)?;
    Ok(OracleOutput {
        g_hat: g,
        branch,
        used_o1: branch == Branch::O1,
        samples_used,
        noise,
    })
}

/// Mean of `b` per-sample gradients plus isotropic Gaussian noise with
/// per-coordinate standard deviation `noise_r`.
pub fn plain_oracle(
    x: &Vector,
    obj: &ObjectiveSpec,
    budget: &mut DatasetBudget,
    b: usize,
    noise_r: f64,
    rng: &mut SeededRng,
) -> Result<OracleOutput> {
    if !(noise_r >= 0.0) {
        return Err(Error::invalid(format!("noise std must be >= 0, got {noise_r}")));
    }
    let batch = obj.sample_batch(budget, b, rng)?;
    let mut g = obj.batch_gradient(x, &batch, None)?;
    if noise_r > 0.0 {
        g = g.add(&rng.gaussian_vector(obj.dim(), noise_r));
    }
    Ok(OracleOutput {
        g_hat: g,
        branch: Branch::Plain,
        used_o1: false,
        samples_used: b,
        noise: NoiseCalibration {
            variance: noise_r * noise_r,
            mechanism: Mechanism::Plain,
            sensitivity: 0.0,
        },
    })
}

/// One row of the per-query oracle trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTraceRow {
    pub t: usize,
    pub branch: Branch,
    /// Per-client batch size.
    pub batch: usize,
    pub drift_before: f64,
    pub drift_after: f64,
    /// Per-client injected noise variance.
    pub noise_variance: f64,
    /// Distance to the previously queried point (zero for anchors).
    ///
    /// `drift_before`/`drift_after` bracket the query itself; the caller's
    /// step update shows up in the next row's `drift_before`.
    pub step_dist: f64,
    /// `||g_hat - grad F(x)||`, when tracked.
    pub est_error: Option<f64>,
}

pub fn write_trace_csv<W: Write>(rows: &[OracleTraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "t",
        "branch",
        "batch",
        "drift_before",
        "drift_after",
        "noise_variance",
        "est_error",
        "step_dist",
    ])?;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            r.branch.as_str().to_string(),
            r.batch.to_string(),
            format!("{:e}", r.drift_before),
            format!("{:e}", r.drift_after),
            format!("{:e}", r.noise_variance),
            r.est_error.map(|e| format!("{e:e}")).unwrap_or_default(),
            format!("{:e}", r.step_dist),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A stateful gradient oracle driven by Gauss-PSGD.
pub trait GradientOracle {
    fn dim(&self) -> usize;
    /// Perturbed gradient estimate at `x`.
    fn query(&mut self, x: &Vector) -> Result<OracleOutput>;
    /// Informs the oracle that the driver stepped by `-eta * g_hat`.
    fn after_step(&mut self, eta: f64, g_hat: &Vector);
    /// Called once when a small gradient opens an escape phase at `anchor`.
    fn begin_escape(&mut self, _anchor: &Vector) {}
    /// Called when an escape round ending at `from` is rewound to `anchor`.
    fn rewind(&mut self, _anchor: &Vector, _from: &Vector) {}
    fn ledger(&self) -> Option<&PrivacyLedger> {
        None
    }
    fn trace(&self) -> &[OracleTraceRow] {
        &[]
    }
    /// Samples consumed so far, across all clients.
    fn samples_consumed(&self) -> usize;
}

/// Plain minibatch oracle with fixed batch and noise level over one dataset.
#[derive(Debug, Clone)]
pub struct PlainOracle {
    obj: ObjectiveSpec,
    client: ClientData,
    batch: usize,
    noise_std: f64,
    ledger: PrivacyLedger,
    trace: Vec<OracleTraceRow>,
    track_error: bool,
}

impl PlainOracle {
    pub fn new(obj: ObjectiveSpec, seed: u64, n: usize, batch: usize, noise_std: f64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::invalid("plain oracle batch must be >= 1"));
        }
        Ok(PlainOracle {
            obj,
            client: ClientData::new(seed, 0, n),
            batch,
            noise_std,
            ledger: PrivacyLedger::new(),
            trace: Vec::new(),
            track_error: false,
        })
    }

    pub fn with_error_tracking(mut self, on: bool) -> Self {
        self.track_error = on;
        self
    }
}

impl GradientOracle for PlainOracle {
    fn dim(&self) -> usize {
        self.obj.dim()
    }

    fn query(&mut self, x: &Vector) -> Result<OracleOutput> {
        let batch = self.client.draw(&self.obj, self.batch)?;
        let mut g = self.obj.batch_gradient(x, &batch, None)?;
        if self.noise_std > 0.0 {
            g = g.add(&self.client.noise_rng.gaussian_vector(self.obj.dim(), self.noise_std));
        }
        self.ledger.record_touch(batch.iter().map(|s| s.id), Phase::Train)?;
        let est_error = if self.track_error {
            Some(g.distance(&self.obj.gradient(x)?))
        } else {
            None
        };
        self.trace.push(OracleTraceRow {
            t: self.trace.len(),
            branch: Branch::Plain,
            batch: self.batch,
            drift_before: 0.0,
            drift_after: 0.0,
            noise_variance: self.noise_std * self.noise_std,
            step_dist: 0.0,
            est_error,
        });
        Ok(OracleOutput {
            g_hat: g,
            branch: Branch::Plain,
            used_o1: false,
            samples_used: self.batch,
            noise: NoiseCalibration {
                variance: self.noise_std * self.noise_std,
                mechanism: Mechanism::Plain,
                sensitivity: 0.0,
            },
        })
    }

    fn after_step(&mut self, _eta: f64, _g_hat: &Vector) {}

    fn ledger(&self) -> Option<&PrivacyLedger> {
        Some(&self.ledger)
    }

    fn trace(&self) -> &[OracleTraceRow] {
        &self.trace
    }

    fn samples_consumed(&self) -> usize {
        self.client.budget.consumed
    }
}

/// The variance-reduced oracle over one or more clients, with its privacy
/// ledger and trace.
///
/// With a single client it runs the single-machine step; otherwise the
/// multi-client step.
#[derive(Debug, Clone)]
pub struct SpiderOracle {
    obj: ObjectiveSpec,
    pool: ClientPool,
    state: SpiderState,
    cfg: SpiderConfig,
    ledger: PrivacyLedger,
    trace: Vec<OracleTraceRow>,
    mode: DriftRewindMode,
    saved: Option<(SpiderState, Vec<Option<Vector>>)>,
    track_error: bool,
    force_distributed: bool,
}

impl SpiderOracle {
    pub fn new(
        obj: ObjectiveSpec,
        pool: ClientPool,
        schedule: &ScheduleParams,
        cfg: SpiderConfig,
        mode: DriftRewindMode,
    ) -> Self {
        SpiderOracle {
            obj,
            pool,
            state: SpiderState::new(schedule),
            cfg,
            ledger: PrivacyLedger::new(),
            trace: Vec::new(),
            mode,
            saved: None,
            track_error: true,
            force_distributed: false,
        }
    }

    /// Routes single-client pools through the multi-client step as well.
    pub fn force_distributed(mut self, on: bool) -> Self {
        self.force_distributed = on;
        self
    }

    pub fn with_error_tracking(mut self, on: bool) -> Self {
        self.track_error = on;
        self
    }

    pub fn state(&self) -> &SpiderState {
        &self.state
    }

    pub fn pool(&self) -> &ClientPool {
        &self.pool
    }

    pub fn config(&self) -> &SpiderConfig {
        &self.cfg
    }

    pub fn into_ledger(self) -> PrivacyLedger {
        self.ledger
    }
}

impl GradientOracle for SpiderOracle {
    fn dim(&self) -> usize {
        self.obj.dim()
    }

    fn query(&mut self, x: &Vector) -> Result<OracleOutput> {
        let drift_before = self.state.drift;
        let step_dist = match (&self.state.last_x, self.state.next_branch()) {
            (Some(prev), Branch::O2) => x.distance(prev),
            _ => 0.0,
        };
        let out = if self.pool.len() == 1 && !self.force_distributed {
            spider_step(
                &mut self.state,
                x,
                &self.obj,
                &mut self.pool.clients[0],
                &self.cfg,
                &mut self.ledger,
            )?
        } else {
            distributed_spider_step(&mut self.pool, &mut self.state, x, &self.obj, &self.cfg, &mut self.ledger)?
        };
        let est_error = if self.track_error {
            Some(out.g_hat.distance(&self.obj.gradient(x)?))
        } else {
            None
        };
        self.trace.push(OracleTraceRow {
            t: self.state.step_index - 1,
            branch: out.branch,
            batch: if out.used_o1 { self.state.b1 } else { self.state.b2 },
            drift_before,
            drift_after: self.state.drift,
            noise_variance: out.noise.variance,
            step_dist,
            est_error,
        });
        Ok(out)
    }

    fn after_step(&mut self, eta: f64, g_hat: &Vector) {
        drift_update(&mut self.state, eta, g_hat);
    }

    fn begin_escape(&mut self, _anchor: &Vector) {
        if self.mode == DriftRewindMode::AcceptedPath {
            let locals = self.pool.clients.iter().map(|c| c.last_g.clone()).collect();
            self.saved = Some((self.state.clone(), locals));
        }
    }

    fn rewind(&mut self, anchor: &Vector, from: &Vector) {
        match self.mode {
            DriftRewindMode::ActualQueries => {
                self.state.drift += anchor.distance(from).powi(2);
            }
            DriftRewindMode::AcceptedPath => {
                if let Some((saved, locals)) = &self.saved {
                    let o1_count = self.state.o1_count;
                    let step_index = self.state.step_index;
                    self.state = saved.clone();
                    self.state.o1_count = o1_count;
                    self.state.step_index = step_index;
                    for (c, g) in self.pool.clients.iter_mut().zip(locals) {
                        c.last_g = g.clone();
                    }
                }
            }
        }
    }

    fn ledger(&self) -> Option<&PrivacyLedger> {
        Some(&self.ledger)
    }

    fn trace(&self) -> &[OracleTraceRow] {
        &self.trace
    }

    fn samples_consumed(&self) -> usize {
        self.pool.samples_consumed()
    }
}

/// Counts from a successful [`check_drift_mechanics`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftCheck {
    pub anchors: usize,
    pub differences: usize,
}

/// Checks an oracle trace against the branch rule: every anchor leaves the
/// drift at exactly zero, every anchor after the first starts from
/// `drift >= kappa`, and every difference query starts below `kappa`.
pub fn check_drift_mechanics(rows: &[OracleTraceRow], kappa: f64) -> Result<DriftCheck> {
    let mut check = DriftCheck {
        anchors: 0,
        differences: 0,
    };
    for (i, r) in rows.iter().enumerate() {
        match r.branch {
            Branch::O1 => {
                if r.drift_after != 0.0 {
                    return Err(Error::Internal(format!("anchor query {} left drift {}", r.t, r.drift_after)));
                }
                if i > 0 && !(r.drift_before >= kappa) {
                    return Err(Error::Internal(format!(
                        "anchor query {} fired at drift {} < kappa {kappa}",
                        r.t, r.drift_before
                    )));
                }
                check.anchors += 1;
            }
            Branch::O2 => {
                if !(r.drift_before < kappa) || i == 0 {
                    return Err(Error::Internal(format!(
                        "difference query {} ran at drift {} (kappa {kappa})",
                        r.t, r.drift_before
                    )));
                }
                check.differences += 1;
            }
            Branch::Plain => {}
        }
    }
    Ok(check)
}

/// Recomputes every logged injected-noise variance from the oracle formulas
/// and the logged batch size and step distance, and matches it bit-for-bit
/// against both the trace and the ledger's releases. Returns the number of
/// releases checked.
pub fn audit_noise_variances(rows: &[OracleTraceRow], ledger: &PrivacyLedger, cfg: &SpiderConfig) -> Result<usize> {
    let Some(budget) = cfg.privacy else {
        return Ok(0);
    };
    let mut expected = std::collections::HashMap::with_capacity(rows.len());
    for r in rows {
        let cal = match r.branch {
            Branch::O1 => privacy::o1_noise_variance(cfg.grad_bound, r.batch, &budget, cfg.c1)?,
            Branch::O2 => privacy::o2_noise_variance(cfg.smoothness, r.batch, &budget, r.step_dist, cfg.c2)?,
            Branch::Plain => continue,
        };
        if cal.variance.to_bits() != r.noise_variance.to_bits() {
            return Err(Error::AccountingViolation(format!(
                "query {}: logged variance {:e} differs from formula {:e}",
                r.t, r.noise_variance, cal.variance
            )));
        }
        expected.insert(r.t, cal);
    }
    for rel in ledger.releases() {
        let Some(cal) = expected.get(&rel.step) else {
            return Err(Error::AccountingViolation(format!("release at step {} has no trace row", rel.step)));
        };
        if cal.variance.to_bits() != rel.variance.to_bits()
            || cal.mechanism != rel.mechanism
            || rel.epsilon != budget.epsilon
            || rel.delta != budget.delta
        {
            return Err(Error::AccountingViolation(format!(
                "release at step {} ({} variance {:e}) does not match its formula ({:e})",
                rel.step, rel.mechanism, rel.variance, cal.variance
            )));
        }
    }
    Ok(ledger.releases().len())
}

/// Writes an oracle trace to a CSV file.
pub fn save_trace_csv(rows: &[OracleTraceRow], path: &Path) -> Result<()> {
    write_trace_csv(rows, std::fs::File::create(path)?)
}
