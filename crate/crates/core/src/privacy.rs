//! Gaussian-mechanism calibration, the noise variances injected by the
//! private oracles and selection, and a ledger of releases and sample touches.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::SampleId;
use crate::rng::SeededRng;
use crate::vector::Vector;

/// An `(epsilon, delta)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let b = PrivacyBudget { epsilon, delta };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }

    /// `ln(1 / delta)`, the factor used by the oracle variance formulas.
    pub fn log_inv_delta(&self) -> f64 {
        (1.0 / self.delta).ln()
    }
}

/// Noise standard deviation of the Gaussian mechanism for an L2 sensitivity:
/// `sensitivity * sqrt(2 ln(1.25 / delta)) / epsilon`.
pub fn gaussian_sigma(sensitivity: f64, budget: &PrivacyBudget) -> Result<f64> {
    budget.validate()?;
    if !(sensitivity >= 0.0 && sensitivity.is_finite()) {
        return Err(Error::invalid(format!("sensitivity must be >= 0, got {sensitivity}")));
    }
    Ok(sensitivity * (2.0 * (1.25 / budget.delta).ln()).sqrt() / budget.epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mechanism {
    /// Anchor query of the variance-reduced oracle.
    O1,
    /// Incremental difference query of the variance-reduced oracle.
    O2,
    /// Plain minibatch gradient with Gaussian noise.
    Plain,
    SelectGrad,
    SelectHess,
}

impl Mechanism {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mechanism::O1 => "O1",
            Mechanism::O2 => "O2",
            Mechanism::Plain => "PLAIN",
            Mechanism::SelectGrad => "SELECT_GRAD",
            Mechanism::SelectHess => "SELECT_HESS",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-coordinate variance of the Gaussian noise injected by one mechanism,
/// together with the L2 sensitivity of the released statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseCalibration {
    pub variance: f64,
    pub mechanism: Mechanism,
    pub sensitivity: f64,
}

impl NoiseCalibration {
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }

    /// Draws an isotropic noise vector with this calibration.
    pub fn sample(&self, dim: usize, rng: &mut SeededRng) -> Vector {
        rng.gaussian_vector(dim, self.std())
    }

    /// Variance the Gaussian mechanism would prescribe for the recorded
    /// sensitivity.
    pub fn mechanism_variance(&self, budget: &PrivacyBudget) -> Result<f64> {
        Ok(gaussian_sigma(self.sensitivity, budget)?.powi(2))
    }
}

fn nonneg(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")))
    }
}

/// L2 sensitivity of a mean of `b` per-sample gradients clipped at `g`
/// under replacement of one sample.
pub fn o1_sensitivity(g: f64, b1: usize) -> f64 {
    2.0 * g / b1 as f64
}

/// L2 sensitivity of a mean of `b` gradient differences, each clipped at
/// `m * step_dist`.
pub fn o2_sensitivity(m: f64, b2: usize, step_dist: f64) -> f64 {
    2.0 * m * step_dist / b2 as f64
}

/// Value of the oracle constants `c1`/`c2` at which the oracle variance
/// formulas coincide with [`gaussian_sigma`] applied to
/// [`o1_sensitivity`]/[`o2_sensitivity`]: `8 ln(1.25/delta) / ln(1/delta)`.
pub fn mechanism_equivalent_constant(budget: &PrivacyBudget) -> Result<f64> {
    budget.validate()?;
    Ok(8.0 * (1.25 / budget.delta).ln() / budget.log_inv_delta())
}

/// Anchor-query noise: `c1 G^2 ln(1/delta) / (b1^2 epsilon^2)`.
pub fn o1_noise_variance(g: f64, b1: usize, budget: &PrivacyBudget, c1: f64) -> Result<NoiseCalibration> {
    budget.validate()?;
    nonneg("G", g)?;
    nonneg("c1", c1)?;
    if b1 == 0 {
        return Err(Error::invalid("anchor batch size b1 must be >= 1"));
    }
    let b = b1 as f64;
    Ok(NoiseCalibration {
        variance: c1 * g * g * budget.log_inv_delta() / (b * b * budget.epsilon * budget.epsilon),
        mechanism: Mechanism::O1,
        sensitivity: o1_sensitivity(g, b1),
    })
}

/// Difference-query noise:
/// `c2 M^2 ln(1/delta) step_dist^2 / (b2^2 epsilon^2)`.
pub fn o2_noise_variance(
    m: f64,
    b2: usize,
    budget: &PrivacyBudget,
    step_dist: f64,
    c2: f64,
) -> Result<NoiseCalibration> {
    budget.validate()?;
    nonneg("M", m)?;
    nonneg("step distance", step_dist)?;
    nonneg("c2", c2)?;
    if b2 == 0 {
        return Err(Error::invalid("difference batch size b2 must be >= 1"));
    }
    let b = b2 as f64;
    Ok(NoiseCalibration {
        variance: c2 * m * m * budget.log_inv_delta() * step_dist * step_dist / (b * b * budget.epsilon * budget.epsilon),
        mechanism: Mechanism::O2,
        sensitivity: o2_sensitivity(m, b2, step_dist),
    })
}

/// Noise for a plain minibatch gradient of `b` samples clipped at `g`, using
/// the anchor-query formula.
pub fn plain_noise_variance(g: f64, b: usize, budget: &PrivacyBudget, c1: f64) -> Result<NoiseCalibration> {
    let mut cal = o1_noise_variance(g, b, budget, c1)?;
    cal.mechanism = Mechanism::Plain;
    Ok(cal)
}

/// Noise for the selection statistics over `t` candidates on `n` samples:
/// gradient `c1 G^2 T ln(1/delta) / (n^2 epsilon^2)` and Hessian entries
/// `c2 M^2 d T ln(1/delta) / (n^2 epsilon^2)`.
#[allow(clippy::too_many_arguments)]
pub fn selection_noise_variances(
    g: f64,
    m: f64,
    n: usize,
    t: usize,
    budget: &PrivacyBudget,
    d: usize,
    c1: f64,
    c2: f64,
) -> Result<(NoiseCalibration, NoiseCalibration)> {
    budget.validate()?;
    nonneg("G", g)?;
    nonneg("M", m)?;
    nonneg("c1", c1)?;
    nonneg("c2", c2)?;
    if n == 0 || t == 0 || d == 0 {
        return Err(Error::invalid("selection needs n, T, d >= 1"));
    }
    let nf = n as f64;
    let tf = t as f64;
    let denom = nf * nf * budget.epsilon * budget.epsilon;
    let l = budget.log_inv_delta();
    let grad = NoiseCalibration {
        variance: c1 * g * g * tf * l / denom,
        mechanism: Mechanism::SelectGrad,
        sensitivity: 2.0 * g / nf,
    };
    let hess = NoiseCalibration {
        variance: c2 * m * m * d as f64 * tf * l / denom,
        mechanism: Mechanism::SelectHess,
        // Frobenius sensitivity of a mean of Hessians with operator norm <= M
        sensitivity: 2.0 * m * (d as f64).sqrt() / nf,
    };
    Ok((grad, hess))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Train,
    Select,
}

/// One noised release.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Release {
    pub step: usize,
    pub mechanism: Mechanism,
    pub sensitivity: f64,
    pub variance: f64,
    pub epsilon: f64,
    pub delta: f64,
}

/// Append-only record of noised releases and per-sample touch counts.
///
/// A TRAIN-phase sample may be touched once; a second touch is an accounting
/// violation. SELECT-phase samples may be touched up to the declared number
/// of candidates, which [`PrivacyLedger::audit`] checks.
#[derive(Debug, Clone, Default)]
pub struct PrivacyLedger {
    releases: Vec<Release>,
    train_touches: HashMap<SampleId, u32>,
    select_touches: HashMap<SampleId, u32>,
}

/// Summary of a ledger audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerAudit {
    pub releases: usize,
    pub train_samples: usize,
    pub max_train_touches: u32,
    pub select_samples: usize,
    pub max_select_touches: u32,
}

impl PrivacyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn releases(&self) -> &[Release] {
        &self.releases
    }

    pub fn touches(&self, id: SampleId, phase: Phase) -> u32 {
        let map = match phase {
            Phase::Train => &self.train_touches,
            Phase::Select => &self.select_touches,
        };
        map.get(&id).copied().unwrap_or(0)
    }

    /// Records one touch of every id. In the TRAIN phase the call is atomic:
    /// if any id (or a duplicate within `ids`) was already touched, nothing is
    /// recorded and an accounting violation is returned.
    pub fn record_touch<I>(&mut self, ids: I, phase: Phase) -> Result<()>
    where
        I: IntoIterator<Item = SampleId>,
    {
        match phase {
            Phase::Train => {
                let ids: Vec<SampleId> = ids.into_iter().collect();
                let mut seen = std::collections::HashSet::with_capacity(ids.len());
                for id in &ids {
                    if self.train_touches.contains_key(id) || !seen.insert(*id) {
                        return Err(Error::AccountingViolation(format!(
                            "training sample {id:#x} touched more than once"
                        )));
                    }
                }
                for id in ids {
                    self.train_touches.insert(id, 1);
                }
            }
            Phase::Select => {
                for id in ids {
                    *self.select_touches.entry(id).or_insert(0) += 1;
                }
            }
        }
        Ok(())
    }

    pub fn record_release(&mut self, step: usize, cal: &NoiseCalibration, budget: &PrivacyBudget) {
        self.releases.push(Release {
            step,
            mechanism: cal.mechanism,
            sensitivity: cal.sensitivity,
            variance: cal.variance,
            epsilon: budget.epsilon,
            delta: budget.delta,
        });
    }

    /// Checks every TRAIN touch count is exactly one, no sample serves both
    /// phases, and every SELECT count is at most `select_limit` (when given).
    pub fn audit(&self, select_limit: Option<usize>) -> Result<LedgerAudit> {
        let max_train = self.train_touches.values().copied().max().unwrap_or(0);
        if max_train > 1 {
            return Err(Error::AccountingViolation(format!(
                "a training sample was touched {max_train} times"
            )));
        }
        if let Some(id) = self.select_touches.keys().find(|id| self.train_touches.contains_key(id)) {
            return Err(Error::AccountingViolation(format!(
                "sample {id:#x} was used for both training and selection"
            )));
        }
        let max_select = self.select_touches.values().copied().max().unwrap_or(0);
        if let Some(limit) = select_limit {
            if max_select as usize > limit {
                return Err(Error::AccountingViolation(format!(
                    "a selection sample was touched {max_select} times, limit {limit}"
                )));
            }
        }
        Ok(LedgerAudit {
            releases: self.releases.len(),
            train_samples: self.train_touches.len(),
            max_train_touches: max_train,
            select_samples: self.select_touches.len(),
            max_select_touches: max_select,
        })
    }

    /// Appends another ledger's records (used to merge per-client ledgers).
    pub fn absorb(&mut self, other: PrivacyLedger) -> Result<()> {
        for (id, _) in other.train_touches {
            self.record_touch([id], Phase::Train)?;
        }
        for (id, c) in other.select_touches {
            *self.select_touches.entry(id).or_insert(0) += c;
        }
        self.releases.extend(other.releases);
        Ok(())
    }

    /// Writes releases as CSV with columns
    /// `step,mechanism,sensitivity,variance,epsilon,delta`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "mechanism", "sensitivity", "variance", "epsilon", "delta"])?;
        for r in &self.releases {
            w.write_record([
                r.step.to_string(),
                r.mechanism.to_string(),
                format!("{:e}", r.sensitivity),
                format!("{:e}", r.variance),
                format!("{:e}", r.epsilon),
                format!("{:e}", r.delta),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn budget(e: f64, d: f64) -> PrivacyBudget {
        PrivacyBudget::new(e, d).unwrap()
    }

    #[test]
    fn gaussian_sigma_examples() {
        let b = budget(1.0, 1e-5);
        assert_eq!(gaussian_sigma(0.0, &b).unwrap(), 0.0);
        let oracle = (2.0 * 125_000f64.ln()).sqrt();
        assert_relative_eq!(gaussian_sigma(1.0, &b).unwrap(), oracle, epsilon = 1e-12);
        assert!((gaussian_sigma(1.0, &b).unwrap() - 4.8448).abs() < 1e-3);
        let doubled = gaussian_sigma(1.0, &budget(2.0, 1e-5)).unwrap();
        assert_eq!(doubled * 2.0, gaussian_sigma(1.0, &b).unwrap());
        assert!(gaussian_sigma(1.0, &PrivacyBudget { epsilon: 0.0, delta: 0.1 }).is_err());
        assert!(gaussian_sigma(1.0, &PrivacyBudget { epsilon: 1.0, delta: 1.0 }).is_err());
        assert!(gaussian_sigma(-1.0, &b).is_err());
    }

    #[test]
    fn o1_examples() {
        let b = budget(1.0, 1e-5);
        assert_eq!(o1_noise_variance(0.0, 10, &b, 1.0).unwrap().variance, 0.0);
        let v = o1_noise_variance(1.0, 100, &b, 1.0).unwrap().variance;
        assert!((v - 1e5f64.ln() / 1e4).abs() < 1e-15);
        assert!((v - 1.1513e-3).abs() < 1e-6);
        let v4 = o1_noise_variance(1.0, 400, &b, 1.0).unwrap().variance;
        assert_relative_eq!(v / v4, 16.0, epsilon = 1e-12);
        assert!(o1_noise_variance(1.0, 0, &b, 1.0).is_err());
    }

    #[test]
    fn o2_examples() {
        let b = budget(0.5, 1e-5);
        assert_eq!(o2_noise_variance(2.0, 10, &b, 0.0, 1.0).unwrap().variance, 0.0);
        let v = o2_noise_variance(2.0, 10, &b, 0.1, 1.0).unwrap().variance;
        let oracle = 4.0 * 1e5f64.ln() * 0.01 / (100.0 * 0.25);
        assert_relative_eq!(v, oracle, epsilon = 1e-15);
        assert!((v - 1.8421e-2).abs() < 1e-5);
        let v1 = o2_noise_variance(2.0, 10, &b, 1.0, 1.0).unwrap().variance;
        let v2 = o2_noise_variance(2.0, 10, &b, 2.0, 1.0).unwrap().variance;
        assert_relative_eq!(v2 / v1, 4.0, epsilon = 1e-12);
        assert!(o2_noise_variance(2.0, 0, &b, 0.1, 1.0).is_err());
    }

    #[test]
    fn selection_examples() {
        let b = budget(1.0, 1e-5);
        let (g, h) = selection_noise_variances(1.0, 1.0, 1000, 100, &b, 50, 1.0, 1.0).unwrap();
        assert!((g.variance - 1.1513e-3).abs() < 1e-6);
        assert!((h.variance - 5.7565e-2).abs() < 1e-6);
        let (g, h) = selection_noise_variances(2.0, 3.0, 100, 1, &b, 1, 1.0, 1.0).unwrap();
        assert_relative_eq!(h.variance, 9.0 / 4.0 * g.variance, epsilon = 1e-14);
        let (g2, h2) = selection_noise_variances(2.0, 3.0, 100, 2, &b, 1, 1.0, 1.0).unwrap();
        assert_relative_eq!(g2.variance, 2.0 * g.variance, epsilon = 1e-14);
        assert_relative_eq!(h2.variance, 2.0 * h.variance, epsilon = 1e-14);
        assert!(selection_noise_variances(1.0, 1.0, 0, 1, &b, 1, 1.0, 1.0).is_err());
    }

    #[test]
    fn equivalent_constant_matches_mechanism() {
        let b = budget(0.7, 1e-6);
        let c = mechanism_equivalent_constant(&b).unwrap();
        let o1 = o1_noise_variance(3.0, 50, &b, c).unwrap();
        assert_relative_eq!(o1.variance, o1.mechanism_variance(&b).unwrap(), epsilon = 1e-12);
        let o2 = o2_noise_variance(3.0, 50, &b, 0.2, c).unwrap();
        assert_relative_eq!(o2.variance, o2.mechanism_variance(&b).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn train_touches_are_one_shot() {
        let mut l = PrivacyLedger::new();
        l.record_touch([1, 2, 3], Phase::Train).unwrap();
        l.record_touch([4, 5], Phase::Train).unwrap();
        assert!(matches!(l.record_touch([1], Phase::Train), Err(Error::AccountingViolation(_))));
        assert!(l.record_touch([9, 9], Phase::Train).is_err());
        assert_eq!(l.touches(9, Phase::Train), 0);
        let a = l.audit(None).unwrap();
        assert_eq!((a.train_samples, a.max_train_touches), (5, 1));
    }

    #[test]
    fn select_touches_respect_limit() {
        let t = 7;
        let mut l = PrivacyLedger::new();
        for _ in 0..t {
            l.record_touch([1], Phase::Select).unwrap();
        }
        assert!(l.audit(Some(t)).is_ok());
        l.record_touch([1], Phase::Select).unwrap();
        assert!(l.audit(Some(t)).is_err());
    }

    #[test]
    fn phase_overlap_is_a_violation() {
        let mut l = PrivacyLedger::new();
        l.record_touch([1, 2], Phase::Train).unwrap();
        l.record_touch([3], Phase::Select).unwrap();
        assert!(l.audit(None).is_ok());
        l.record_touch([2], Phase::Select).unwrap();
        assert!(l.audit(None).is_err());
    }

    #[test]
    fn csv_export() {
        let b = budget(1.0, 1e-5);
        let mut l = PrivacyLedger::new();
        l.record_release(0, &o1_noise_variance(1.0, 100, &b, 1.0).unwrap(), &b);
        l.record_release(1, &o2_noise_variance(1.0, 100, &b, 0.5, 1.0).unwrap(), &b);
        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "step,mechanism,sensitivity,variance,epsilon,delta");
        assert!(lines[1].starts_with("0,O1,"));
        assert!(lines[2].starts_with("1,O2,"));
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let v: f64 = r.records().next().unwrap().unwrap()[3].parse().unwrap();
        assert_eq!(v, l.releases()[0].variance);
    }

    #[test]
    fn sampled_noise_matches_declared_variance() {
        let b = budget(1.0, 1e-5);
        let cal = o1_noise_variance(1.0, 10, &b, 1.0).unwrap();
        let mut rng = SeededRng::new(8, 0);
        let draws = cal.sample(100_000, &mut rng);
        let var = draws.norm_sq() / 100_000.0;
        assert!((var / cal.variance - 1.0).abs() < 0.03);
    }

    proptest! {
        #[test]
        fn calibration_is_monotone(
            g in 0.01f64..10.0, m in 0.01f64..10.0, b in 1usize..1000, n in 1usize..10_000,
            t in 1usize..100, d in 1usize..100, e in 0.05f64..5.0, dl in 1e-9f64..0.5, step in 0.0f64..2.0,
        ) {
            let bud = budget(e, dl);
            let more_eps = budget(e * 1.5, dl);
            let o1 = o1_noise_variance(g, b, &bud, 1.0).unwrap().variance;
            prop_assert!(o1_noise_variance(g, b + 1, &bud, 1.0).unwrap().variance <= o1);
            prop_assert!(o1_noise_variance(g, b, &more_eps, 1.0).unwrap().variance <= o1);
            prop_assert!(o1_noise_variance(g * 1.1, b, &bud, 1.0).unwrap().variance >= o1);
            let o2 = o2_noise_variance(m, b, &bud, step, 1.0).unwrap().variance;
            prop_assert!(o2_noise_variance(m, b + 1, &bud, step, 1.0).unwrap().variance <= o2);
            prop_assert!(o2_noise_variance(m, b, &more_eps, step, 1.0).unwrap().variance <= o2);
            prop_assert!(o2_noise_variance(m * 1.1, b, &bud, step, 1.0).unwrap().variance >= o2);
            let (sg, sh) = selection_noise_variances(g, m, n, t, &bud, d, 1.0, 1.0).unwrap();
            let (sg2, sh2) = selection_noise_variances(g, m, n + 1, t, &bud, d, 1.0, 1.0).unwrap();
            prop_assert!(sg2.variance <= sg.variance && sh2.variance <= sh.variance);
            let (sg3, sh3) = selection_noise_variances(g, m, n, t + 1, &bud, d + 1, 1.0, 1.0).unwrap();
            prop_assert!(sg3.variance >= sg.variance && sh3.variance >= sh.variance);
            let (sg4, sh4) = selection_noise_variances(g, m, n, t, &more_eps, d, 1.0, 1.0).unwrap();
            prop_assert!(sg4.variance <= sg.variance && sh4.variance <= sh.variance);
        }
    }
}
