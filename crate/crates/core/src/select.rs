//! Private model selection over a list of candidate iterates: each client
//! releases a noised gradient and a noised symmetric Hessian on its held-out
//! set, and the server returns the first candidate whose averaged statistics
//! pass both thresholds.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, PowerIterationOptions};
use crate::objectives::{ObjectiveSpec, Sample};
use crate::oracles::ClientPool;
use crate::params::LossBounds;
use crate::privacy::{selection_noise_variances, NoiseCalibration, Phase, PrivacyBudget, PrivacyLedger};
use crate::rng::SeededRng;
use crate::vector::{self, Vector};

/// Tolerance of the power iteration on the aggregated Hessian.
pub const SELECT_EIG_TOL: f64 = 1e-8;

/// Candidate points, scanned in order.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub points: Vec<Vector>,
}

impl CandidateSet {
    pub fn new(points: Vec<Vector>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("candidate set must hold at least one point"));
        }
        let d = points[0].dim();
        if points.iter().any(|p| p.dim() != d) {
            return Err(Error::invalid("candidates must share one dimension"));
        }
        Ok(CandidateSet { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Pass conditions: `||g|| <= grad_threshold` and `lambda_min >= eig_threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionThresholds {
    pub grad_threshold: f64,
    /// Negative.
    pub eig_threshold: f64,
}

/// Composite thresholds for `m` clients with `n` held-out samples each and
/// `t` candidates:
///
/// gradient `alpha + G ln(8d/w) / sqrt(mn) + G sqrt(d T ln(1/delta) ln(16/w)) / (sqrt(m) n eps)`,
/// eigenvalue `-(sqrt(rho alpha) + M sqrt(ln(8d/w) / (mn)) + M d sqrt(T ln(1/delta) ln(32/w)) / (sqrt(m) n eps))`.
#[allow(clippy::too_many_arguments)]
pub fn build_thresholds(
    alpha: f64,
    bounds: &LossBounds,
    m: usize,
    n: usize,
    t: usize,
    d: usize,
    privacy: &PrivacyBudget,
    omega_prime: f64,
) -> Result<SelectionThresholds> {
    privacy.validate()?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    if m == 0 || n == 0 || t == 0 || d == 0 {
        return Err(Error::invalid("selection thresholds need m, n, T, d >= 1"));
    }
    if !(omega_prime > 0.0 && omega_prime < 1.0) {
        return Err(Error::invalid(format!("omega' must lie in (0,1), got {omega_prime}")));
    }
    bounds.validate()?;
    let (g, mm, rho) = (bounds.grad_bound, bounds.smoothness, bounds.hessian_lipschitz);
    let (mf, nf, tf, df) = (m as f64, n as f64, t as f64, d as f64);
    let log8 = (8.0 * df / omega_prime).ln();
    let need = 4.0 / 9.0 * log8;
    if mf * nf < need {
        return Err(Error::invalid(format!(
            "selection needs m*n >= (4/9) ln(8d/omega') = {need:.4}, got m*n = {}",
            mf * nf
        )));
    }
    let l = privacy.log_inv_delta();
    let eps = privacy.epsilon;
    let priv_scale = mf.sqrt() * nf * eps;
    let grad_threshold = alpha
        + g * log8 / (mf * nf).sqrt()
        + g * (df * tf * l * (16.0 / omega_prime).ln()).sqrt() / priv_scale;
    let eig_threshold = -((rho * alpha).sqrt()
        + mm * (log8 / (mf * nf)).sqrt()
        + mm * df * (tf * l * (32.0 / omega_prime).ln()).sqrt() / priv_scale);
    Ok(SelectionThresholds {
        grad_threshold,
        eig_threshold,
    })
}

/// Symmetric `d x d` matrix with i.i.d. `N(0, variance)` upper triangle
/// (diagonal included), mirrored below.
pub fn symmetric_noise(d: usize, variance: f64, rng: &mut SeededRng) -> DMatrix<f64> {
    let std = variance.sqrt();
    let mut h = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let v = rng.normal(std);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

/// Smallest eigenvalue of a symmetric matrix by shifted power iteration
/// (cap `10 d` iterations, tolerance [`SELECT_EIG_TOL`]), falling back to the
/// dense solver when the cap is hit. The flag reports the fallback.
pub fn selection_lambda_min(h: &DMatrix<f64>, seed: u64) -> Result<(f64, bool)> {
    let d = h.nrows();
    let opts = PowerIterationOptions {
        shift: linalg::gershgorin_radius(h) + 1.0,
        tol: SELECT_EIG_TOL,
        max_iterations: 10 * d,
        seed,
    };
    let hvp = |v: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|i| h.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    };
    match linalg::smallest_eigenpair(d, hvp, &opts) {
        Ok(pair) => Ok((pair.value, false)),
        Err(Error::ConvergenceFailure { .. }) => Ok((linalg::dense_smallest_eigenpair(h)?.value, true)),
        Err(e) => Err(e),
    }
}

/// One scanned candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTraceRow {
    pub candidate_index: usize,
    /// Size `T` of the candidate set the noise was calibrated for.
    pub candidates: usize,
    pub noised_grad_norm: f64,
    pub noised_lambda_min: f64,
    pub grad_threshold: f64,
    pub eig_threshold: f64,
    pub passed: bool,
}

impl SelectionTraceRow {
    /// Recomputes the decision from the logged aggregates and thresholds.
    pub fn replay(&self) -> bool {
        self.noised_grad_norm <= self.grad_threshold && self.noised_lambda_min >= self.eig_threshold
    }
}

pub fn write_selection_csv<W: Write>(rows: &[SelectionTraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "candidate_index",
        "candidates",
        "noised_grad_norm",
        "noised_lambda_min",
        "grad_threshold",
        "eig_threshold",
        "passed",
    ])?;
    for r in rows {
        w.write_record([
            r.candidate_index.to_string(),
            r.candidates.to_string(),
            format!("{:e}", r.noised_grad_norm),
            format!("{:e}", r.noised_lambda_min),
            format!("{:e}", r.grad_threshold),
            format!("{:e}", r.eig_threshold),
            r.passed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_selection_csv(rows: &[SelectionTraceRow], path: &Path) -> Result<()> {
    write_selection_csv(rows, std::fs::File::create(path)?)
}

/// Everything fixed across the candidate scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    pub alpha: f64,
    pub privacy: PrivacyBudget,
    pub omega_prime: f64,
    pub c1: f64,
    pub c2: f64,
}

#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub selected: Option<Vector>,
    pub index: Option<usize>,
    pub thresholds: SelectionThresholds,
    pub grad_noise: NoiseCalibration,
    pub hess_noise: NoiseCalibration,
    pub trace: Vec<SelectionTraceRow>,
    /// Candidates whose eigenvalue needed the dense fallback.
    pub dense_fallbacks: usize,
}

/// Scans `cands` in order and returns the first one whose client-averaged
/// noised gradient and Hessian pass the thresholds.
///
/// `pool` must hold the clients' held-out sets; each is drawn in full once
/// and reused for every candidate, and every use is charged to `ledger` in
/// the selection phase.
pub fn private_select(
    cands: &CandidateSet,
    pool: &mut ClientPool,
    obj: &ObjectiveSpec,
    bounds: &LossBounds,
    cfg: &SelectionConfig,
    ledger: &mut PrivacyLedger,
) -> Result<SelectionOutcome> {
    let m = pool.len();
    let d = obj.dim();
    if cands.points[0].dim() != d {
        return Err(Error::invalid("candidate dimension does not match the objective"));
    }
    let n = pool.clients.first().map(|c| c.budget.total).unwrap_or(0);
    if pool.clients.iter().any(|c| c.budget.total != n || c.budget.consumed != 0) {
        return Err(Error::invalid("held-out sets must be fresh and of equal size"));
    }
    let t = cands.len();
    let thresholds = build_thresholds(cfg.alpha, bounds, m, n, t, d, &cfg.privacy, cfg.omega_prime)?;
    let (grad_noise, hess_noise) = selection_noise_variances(
        bounds.grad_bound,
        bounds.smoothness,
        n,
        t,
        &cfg.privacy,
        d,
        cfg.c1,
        cfg.c2,
    )?;

    let sets: Vec<Vec<Sample>> = pool
        .clients
        .iter_mut()
        .map(|c| c.draw(obj, n))
        .collect::<Result<_>>()?;
    for set in &sets {
        if set.iter().any(|s| s.id >> 40 < crate::oracles::HELD_OUT_DATASET_BASE as u64) {
            return Err(Error::AccountingViolation(
                "selection must run on held-out sets, not training data".into(),
            ));
        }
    }

    let mut trace = Vec::with_capacity(t);
    let mut dense_fallbacks = 0;
    for (k, x) in cands.points.iter().enumerate() {
        let released: Vec<(Vector, DMatrix<f64>)> = pool
            .clients
            .par_iter_mut()
            .zip(sets.par_iter())
            .map(|(client, set)| -> Result<(Vector, DMatrix<f64>)> {
                let g = obj
                    .batch_gradient(x, set, None)?
                    .add(&grad_noise.sample(d, &mut client.noise_rng));
                let h = obj.empirical_hessian(x, set)? + symmetric_noise(d, hess_noise.variance, &mut client.noise_rng);
                Ok((g, h))
            })
            .collect::<Result<_>>()?;
        for set in &sets {
            ledger.record_touch(set.iter().map(|s| s.id), Phase::Select)?;
        }
        for _ in 0..m {
            ledger.record_release(k, &grad_noise, &cfg.privacy);
            ledger.record_release(k, &hess_noise, &cfg.privacy);
        }
        let grads: Vec<Vector> = released.iter().map(|(g, _)| g.clone()).collect();
        let g_bar = vector::mean(&grads);
        let mut h_bar = released[0].1.clone();
        for (_, h) in &released[1..] {
            h_bar += h;
        }
        if m > 1 {
            h_bar /= m as f64;
        }
        let (lambda, fallback) = selection_lambda_min(&h_bar, k as u64)?;
        dense_fallbacks += fallback as usize;
        let row = SelectionTraceRow {
            candidate_index: k,
            candidates: t,
            noised_grad_norm: g_bar.norm(),
            noised_lambda_min: lambda,
            grad_threshold: thresholds.grad_threshold,
            eig_threshold: thresholds.eig_threshold,
            passed: false,
        };
        let passed = row.replay();
        trace.push(SelectionTraceRow { passed, ..row });
        if passed {
            return Ok(SelectionOutcome {
                selected: Some(x.clone()),
                index: Some(k),
                thresholds,
                grad_noise,
                hess_noise,
                trace,
                dense_fallbacks,
            });
        }
    }
    Ok(SelectionOutcome {
        selected: None,
        index: None,
        thresholds,
        grad_noise,
        hess_noise,
        trace,
        dense_fallbacks,
    })
}

/// Exact verdict on one arm's chosen point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub grad_norm: f64,
    pub lambda_min: f64,
    pub passes: bool,
}

/// A run's direct output and its selection-arm pick, sharing one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRun {
    pub d: usize,
    pub seed: u64,
    pub direct: ArmResult,
    /// `None` when no candidate passed.
    pub selected: Option<ArmResult>,
    pub selected_index: Option<usize>,
}

/// Per-dimension comparison of the two arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRow {
    pub d: usize,
    pub runs: usize,
    pub direct_pass_fraction: f64,
    pub direct_median_grad_norm: f64,
    pub direct_median_lambda_min: f64,
    /// Fraction of runs where selection returned a point failing the exact
    /// check, or returned nothing.
    pub selection_non_sosp_fraction: f64,
    pub selection_none_fraction: f64,
    /// Medians over runs where selection returned a point (NaN if none did).
    pub selection_median_grad_norm: f64,
    pub selection_median_lambda_min: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Groups paired runs by dimension (ascending) and summarizes both arms.
pub fn selection_degradation_report(runs: &[PairedRun]) -> Vec<DegradationRow> {
    let mut dims: Vec<usize> = runs.iter().map(|r| r.d).collect();
    dims.sort_unstable();
    dims.dedup();
    dims.into_iter()
        .map(|d| {
            let group: Vec<&PairedRun> = runs.iter().filter(|r| r.d == d).collect();
            let k = group.len() as f64;
            let picked: Vec<&ArmResult> = group.iter().filter_map(|r| r.selected.as_ref()).collect();
            let non_sosp = group
                .iter()
                .filter(|r| !r.selected.as_ref().is_some_and(|s| s.passes))
                .count();
            DegradationRow {
                d,
                runs: group.len(),
                direct_pass_fraction: group.iter().filter(|r| r.direct.passes).count() as f64 / k,
                direct_median_grad_norm: median(&group.iter().map(|r| r.direct.grad_norm).collect::<Vec<_>>()),
                direct_median_lambda_min: median(&group.iter().map(|r| r.direct.lambda_min).collect::<Vec<_>>()),
                selection_non_sosp_fraction: non_sosp as f64 / k,
                selection_none_fraction: (group.len() - picked.len()) as f64 / k,
                selection_median_grad_norm: median(&picked.iter().map(|s| s.grad_norm).collect::<Vec<_>>()),
                selection_median_lambda_min: median(&picked.iter().map(|s| s.lambda_min).collect::<Vec<_>>()),
            }
        })
        .collect()
}

pub fn write_degradation_csv<W: Write>(rows: &[DegradationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
