//! Parameter planning: the Gauss-PSGD block depends on the oracle's noise
//! profile, which depends on the batch schedule, which depends on the block.
//! The planner iterates this loop to a fixed point, then applies the preset
//! and explicit overrides.

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Preset};
use crate::error::{Error, Result};
use crate::oracles::{drift_threshold, schedule_for_threshold, spider_noise_profile, ScheduleParams};
use crate::params::{derive_params_with_gap, LossBounds, NoiseProfile, PsgdParams};
use crate::privacy::PrivacyBudget;
use crate::psgd::default_max_steps;

/// Escape threshold of the `paper-defaults` preset.
pub const PRESET_CHI: f64 = 0.01;
/// Drift threshold of the `paper-defaults` preset.
pub const PRESET_KAPPA: f64 = 0.1;
/// Steps per escape round of the `paper-defaults` preset.
pub const PRESET_GAMMA: usize = 10;
/// Escape rounds of the `paper-defaults` preset.
pub const PRESET_ROUNDS: usize = 3;

/// Change in the noise split or horizon below which planning stops.
const PLAN_TOL: f64 = 1e-9;
/// Rounds of refreshing the noise split and horizon.
const PLAN_REFRESHES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub params: PsgdParams,
    pub schedule: ScheduleParams,
    /// Noise profile the block was derived from (the fixed point).
    pub noise: NoiseProfile,
    /// Parameter evaluations spent.
    pub iterations: usize,
    /// `|ln(psi_implied / psi)|` at the returned plan; nonzero only where the
    /// batch-size rounding makes the map jump across the fixed point.
    pub residual: f64,
    pub max_steps: usize,
}

/// Plans a variance-reduced run with `m` clients of `n` samples each.
///
/// The effective noise `psi` is found by bisection on
/// `ln psi_implied(psi) - ln psi`, which decreases in `psi` (every noise
/// term grows sublinearly in it); the split between inherent and injected
/// noise is then refreshed from the implied profile and the search repeated.
pub fn plan_spider(
    cfg: &ExperimentConfig,
    bounds: &LossBounds,
    n: usize,
    m: usize,
    d: usize,
    privacy: &PrivacyBudget,
) -> Result<Plan> {
    let consts = cfg.constants();
    let gap = bounds.value_range;
    let (g, mf, nf) = (bounds.grad_bound, m as f64, n as f64);
    let sigma0 = g / (mf * nf).sqrt();
    let r0 = (cfg.c1 * privacy.log_inv_delta()).sqrt() * g / (nf * mf.sqrt() * privacy.epsilon);
    let mut guess = NoiseProfile::new(sigma0, r0, d)?;
    let mut horizon: f64 = 1.0;

    // noise profile with effective magnitude `psi` and the split of `guess`
    let evaluate = |psi: f64, guess: &NoiseProfile, horizon: f64| -> Result<Evaluation> {
        let k = psi / guess.psi();
        let noise = NoiseProfile::new(guess.sigma * k, guess.r * k, d)?;
        let base = derive_params_with_gap(bounds, &noise, &consts, horizon, gap)?;
        let params = apply_overrides(cfg, bounds, base)?;
        let schedule = schedule_for(cfg, bounds, &params, n, m, d, privacy)?;
        let implied = spider_noise_profile(bounds, &schedule, m, d, privacy, cfg.c1, cfg.c2)?;
        Ok(Evaluation {
            gap: (implied.psi() / psi).ln(),
            noise,
            params,
            schedule,
            implied,
        })
    };

    let mut best = evaluate(guess.psi(), &guess, horizon)?;
    let mut iterations = 0;
    for _ in 0..PLAN_REFRESHES {
        let psi0 = best.noise.psi();
        let e0 = evaluate(psi0, &guess, horizon)?;
        // bracket the sign change of the log gap
        let (mut lo, mut hi) = (psi0.ln(), psi0.ln());
        let step = if e0.gap > 0.0 { 2.0 } else { -2.0 };
        let mut other = e0.clone();
        let mut found = e0.gap == 0.0;
        for _ in 0..200 {
            if found {
                break;
            }
            let t = if step > 0.0 { hi + step } else { lo + step };
            let e = evaluate(t.exp(), &guess, horizon)?;
            iterations += 1;
            if step > 0.0 {
                lo = hi;
                hi = t;
            } else {
                hi = lo;
                lo = t;
            }
            found = (e.gap > 0.0) != (e0.gap > 0.0) || e.gap == 0.0;
            other = e;
        }
        if !found {
            return Err(Error::Internal("parameter planner could not bracket the noise level".into()));
        }
        let (mut e_lo, mut e_hi) = if step > 0.0 { (e0, other) } else { (other, e0) };
        for _ in 0..cfg.planner_iterations {
            if e_lo.gap == 0.0 || e_hi.gap == 0.0 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let e = evaluate(mid.exp(), &guess, horizon)?;
            iterations += 1;
            if e.gap > 0.0 {
                lo = mid;
                e_lo = e;
            } else {
                hi = mid;
                e_hi = e;
            }
        }
        best = if e_lo.gap.abs() <= e_hi.gap.abs() { e_lo } else { e_hi };
        let split_settled = (best.implied.sigma / best.implied.psi() - guess.sigma / guess.psi()).abs() <= PLAN_TOL;
        let next_horizon = best.params.step_budget(gap).clamp(1.0, 1e300);
        let horizon_settled = consts.log_factor.is_some() || (next_horizon / horizon - 1.0).abs() <= PLAN_TOL;
        guess = NoiseProfile::new(best.implied.sigma, best.implied.r, d)?;
        horizon = next_horizon;
        if split_settled && horizon_settled {
            break;
        }
    }
    let max_steps = cfg.max_steps.unwrap_or_else(|| default_max_steps(&best.params, gap));
    Ok(Plan {
        params: best.params,
        schedule: best.schedule,
        noise: best.noise,
        iterations,
        residual: best.gap.abs(),
        max_steps,
    })
}

#[derive(Clone)]
struct Evaluation {
    /// `ln(psi_implied / psi)`.
    gap: f64,
    noise: NoiseProfile,
    params: PsgdParams,
    schedule: ScheduleParams,
    implied: NoiseProfile,
}

/// Plans a run of the plain minibatch oracle whose minibatch noise has
/// sub-Gaussian parameter `sigma`, plus injected per-coordinate noise
/// `noise_std` (the escape experiments).
pub fn plan_plain(cfg: &ExperimentConfig, bounds: &LossBounds, d: usize, sigma: f64, noise_std: f64) -> Result<PsgdParams> {
    let noise = NoiseProfile::new(sigma, noise_std, d)?;
    let base = derive_params_with_gap(bounds, &noise, &cfg.constants(), 1.0, bounds.value_range)?;
    apply_overrides(cfg, bounds, base)
}

/// Applies the preset, then the explicit overrides.
pub fn apply_overrides(cfg: &ExperimentConfig, bounds: &LossBounds, base: PsgdParams) -> Result<PsgdParams> {
    let o = &cfg.overrides;
    let gap = bounds.value_range;
    let chi = o.chi.or((cfg.preset == Preset::PaperDefaults).then_some(PRESET_CHI));
    let mut p = match chi {
        Some(chi) => base
            .with_threshold(bounds, chi, gap)
            .map_err(|e| Error::Config(format!("overrides.chi: {e}")))?,
        None => base,
    };
    if cfg.preset == Preset::PaperDefaults {
        p.step_size = cfg.learning_rate;
        p.escape_steps = PRESET_GAMMA;
        p.escape_rounds = PRESET_ROUNDS;
    }
    if let Some(eta) = o.eta {
        positive("overrides.eta", eta)?;
        p.step_size = eta;
    }
    if let Some(gamma) = o.gamma_steps {
        at_least_one("overrides.gamma_steps", gamma)?;
        p.escape_steps = gamma;
    }
    if let Some(q) = o.escape_rounds {
        at_least_one("overrides.escape_rounds", q)?;
        p.escape_rounds = q;
    }
    if let Some(radius) = o.escape_radius {
        positive("overrides.escape_radius", radius)?;
        p.escape_radius = radius;
    }
    p.step_smoothness = p.step_size * bounds.smoothness;
    Ok(p)
}

/// The drift threshold (override, preset or derived) and its batch sizes.
pub fn schedule_for(
    cfg: &ExperimentConfig,
    bounds: &LossBounds,
    params: &PsgdParams,
    n: usize,
    m: usize,
    d: usize,
    privacy: &PrivacyBudget,
) -> Result<ScheduleParams> {
    let o = &cfg.overrides;
    let kappa = match (o.kappa, cfg.preset) {
        (Some(k), _) => positive("overrides.kappa", k)?,
        (None, Preset::PaperDefaults) => PRESET_KAPPA,
        (None, Preset::Derived) => drift_threshold(bounds, n, m, d, privacy),
    };
    let mut s = schedule_for_threshold(bounds, params, n, kappa)?;
    for (key, value, slot) in [("overrides.b1", o.b1, &mut s.b1), ("overrides.b2", o.b2, &mut s.b2)] {
        if let Some(b) = value {
            if b == 0 || b > n {
                return Err(Error::Config(format!("{key} = {b} must lie in [1, n = {n}]")));
            }
            *slot = b;
        }
    }
    Ok(s)
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::Config(format!("{key} must be positive, got {v}")))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::Config(format!("{key} must be >= 1")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Overrides;
    use crate::objectives::{build, ObjectiveOptions};

    fn bounds() -> LossBounds {
        build("double-well", 10, &ObjectiveOptions::default()).unwrap().bounds()
    }

    #[test]
    fn planner_reaches_a_fixed_point() {
        let cfg = ExperimentConfig {
            overrides: Overrides {
                log_factor: Some(1.0),
                ..Default::default()
            },
            s: 1.0,
            c: 0.01,
            ..Default::default()
        };
        let bnd = bounds();
        let privacy = cfg.privacy().unwrap();
        let plan = plan_spider(&cfg, &bnd, 4000, 1, 10, &privacy).unwrap();
        // at a rounding jump the implied noise can move by at most one batch unit
        let b = plan.schedule.b1.min(plan.schedule.b2) as f64;
        assert!(plan.residual <= ((b + 1.0) / b).ln(), "residual {} for batch {b}", plan.residual);
        let again = derive_params_with_gap(&bnd, &plan.noise, &cfg.constants(), 1.0, bnd.value_range).unwrap();
        assert_eq!(again.escape_threshold, plan.params.escape_threshold);
    }

    #[test]
    fn more_data_lowers_the_threshold() {
        let cfg = ExperimentConfig {
            overrides: Overrides {
                log_factor: Some(1.0),
                ..Default::default()
            },
            s: 1.0,
            c: 0.01,
            ..Default::default()
        };
        let b = bounds();
        let privacy = cfg.privacy().unwrap();
        let alphas: Vec<f64> = [1000, 4000, 16000, 64000]
            .iter()
            .map(|&n| plan_spider(&cfg, &b, n, 1, 10, &privacy).unwrap().params.alpha)
            .collect();
        assert!(alphas.windows(2).all(|w| w[1] < w[0]), "{alphas:?}");
    }

    #[test]
    fn preset_and_overrides_take_precedence() {
        let b = bounds();
        let mut cfg = ExperimentConfig {
            preset: Preset::PaperDefaults,
            ..Default::default()
        };
        let privacy = cfg.privacy().unwrap();
        let plan = plan_spider(&cfg, &b, 1000, 1, 10, &privacy).unwrap();
        assert_eq!(plan.params.escape_threshold, PRESET_CHI);
        assert_eq!(plan.params.step_size, cfg.learning_rate);
        assert_eq!(plan.params.escape_steps, PRESET_GAMMA);
        assert_eq!(plan.params.escape_rounds, PRESET_ROUNDS);
        assert_eq!(plan.schedule.kappa, PRESET_KAPPA);

        cfg.overrides = Overrides {
            kappa: Some(0.5),
            b1: Some(100),
            gamma_steps: Some(7),
            ..Default::default()
        };
        let plan = plan_spider(&cfg, &b, 1000, 1, 10, &privacy).unwrap();
        assert_eq!(plan.schedule.kappa, 0.5);
        assert_eq!(plan.schedule.b1, 100);
        assert_eq!(plan.params.escape_steps, 7);

        cfg.overrides.b2 = Some(5000);
        let err = plan_spider(&cfg, &b, 1000, 1, 10, &privacy).unwrap_err();
        assert!(err.to_string().contains("overrides.b2"), "{err}");
    }
}
