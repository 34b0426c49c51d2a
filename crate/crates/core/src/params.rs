//! Problem constants, oracle noise profiles and the derived PSGD parameter
//! block (step size, escape threshold, escape radius and friends).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regularity constants of the population risk, valid on the objective's
/// declared box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBounds {
    /// Lipschitz constant of the per-sample loss (bounds gradient norms).
    pub grad_bound: f64,
    /// Smoothness: Lipschitz constant of the gradient.
    pub smoothness: f64,
    /// Lipschitz constant of the Hessian in operator norm.
    pub hessian_lipschitz: f64,
    /// Upper bound on `F(x) - F*` over the box.
    pub value_range: f64,
    /// Population minimum, when known.
    pub min_value: Option<f64>,
}

impl LossBounds {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.grad_bound) || !ok(self.smoothness) || !ok(self.value_range) {
            return Err(Error::invalid(format!(
                "loss bounds must be positive (G={}, M={}, U={})",
                self.grad_bound, self.smoothness, self.value_range
            )));
        }
        if !(self.hessian_lipschitz.is_finite() && self.hessian_lipschitz >= 0.0) {
            return Err(Error::invalid("Hessian-Lipschitz constant must be non-negative"));
        }
        Ok(())
    }
}

/// Noise decomposition of a perturbed gradient oracle: inherent noise with
/// norm-sub-Gaussian parameter `sigma` plus injected isotropic Gaussian noise
/// with per-coordinate standard deviation `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub sigma: f64,
    pub r: f64,
    pub dim: usize,
    psi: f64,
}

impl NoiseProfile {
    pub fn new(sigma: f64, r: f64, dim: usize) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0 && r.is_finite() && r >= 0.0) {
            return Err(Error::invalid(format!(
                "noise parameters must be finite and non-negative (sigma={sigma}, r={r})"
            )));
        }
        if dim == 0 {
            return Err(Error::invalid("noise profile dimension must be positive"));
        }
        Ok(NoiseProfile {
            sigma,
            r,
            dim,
            psi: effective_noise(sigma, r, dim),
        })
    }

    /// Effective noise magnitude `sqrt(sigma^2 + r^2 d)`.
    pub fn psi(&self) -> f64 {
        self.psi
    }
}

fn effective_noise(sigma: f64, r: f64, dim: usize) -> f64 {
    (sigma * sigma + r * r * dim as f64).sqrt()
}

/// The absolute constants left free by the analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamConstants {
    /// `s`: scales the log factor into `iota = s * mu`.
    pub scale: f64,
    /// `C`: the concentration constant in the escape threshold.
    pub noise_const: f64,
    /// `omega`: target failure probability of a full run.
    pub failure_prob: f64,
    /// Fixes `mu` instead of solving for it; `Some(1.0)` with `s = 1` drops
    /// the logarithmic factors altogether.
    pub log_factor: Option<f64>,
}

impl Default for ParamConstants {
    fn default() -> Self {
        ParamConstants {
            scale: 4.0,
            noise_const: 1.0,
            failure_prob: 0.1,
            log_factor: None,
        }
    }
}

/// The derived constant block driving Gauss-PSGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsgdParams {
    pub scale: f64,
    pub noise_const: f64,
    pub failure_prob: f64,
    /// `mu`, the logarithmic factor.
    pub log_factor: f64,
    /// The four candidate values whose maximum defines `mu`; `None` marks a
    /// non-finite branch that was excluded.
    pub log_factor_branches: [Option<f64>; 4],
    /// `|mu(eta(mu)) - mu|` at the returned `mu` (zero when `mu` is fixed).
    pub log_factor_residual: f64,
    /// `iota = s * mu`.
    pub iota: f64,
    /// `chi`: noise level and small-gradient threshold scale.
    pub escape_threshold: f64,
    /// `alpha = 4 chi`: target accuracy of the SOSP guarantee.
    pub alpha: f64,
    /// `Gamma`: steps per escape round.
    pub escape_steps: usize,
    /// `R`: displacement declaring a successful escape.
    pub escape_radius: f64,
    /// `Phi`: guaranteed value decrease per escape.
    pub escape_decrease: f64,
    /// `eta`
    pub step_size: f64,
    /// `Q`: escape rounds before declaring an SOSP.
    pub escape_rounds: usize,
    pub psi: f64,
    pub horizon: f64,
    /// Set when `M < sqrt(rho * alpha)`, an assumption of the analysis.
    pub smoothness_warning: bool,
    /// `eta * M`; the descent analysis needs this to be at most one.
    pub step_smoothness: f64,
}

impl PsgdParams {
    /// `sqrt(rho * alpha)`: curvature below which a point counts as a strict
    /// saddle.
    pub fn curvature_threshold(&self, hessian_lipschitz: f64) -> f64 {
        (hessian_lipschitz * self.alpha).sqrt()
    }

    /// Upper bound on total PSGD steps: `U s^2 mu^4 Q / (2 chi^2 eta)`.
    pub fn step_budget(&self, value_gap: f64) -> f64 {
        value_gap * self.scale.powi(2) * self.log_factor.powi(4) * self.escape_rounds as f64
            / (2.0 * self.escape_threshold.powi(2) * self.step_size)
    }

    /// Replaces the escape threshold and recomputes everything derived from
    /// it (alpha, eta, Gamma, R, Phi, Q), keeping the log factor.
    pub fn with_threshold(&self, bounds: &LossBounds, chi: f64, value_gap: f64) -> Result<PsgdParams> {
        if !(chi.is_finite() && chi > 0.0) {
            return Err(Error::invalid(format!("escape threshold must be positive, got {chi}")));
        }
        let mut p = self.clone();
        let b = block(bounds, p.scale, p.failure_prob, p.log_factor, chi, value_gap)?;
        p.escape_threshold = chi;
        p.alpha = b.alpha;
        p.step_size = b.eta;
        p.escape_steps = b.gamma_steps;
        p.escape_radius = b.radius;
        p.escape_decrease = b.decrease;
        p.escape_rounds = b.rounds;
        p.smoothness_warning = b.smoothness_warning;
        p.step_smoothness = b.eta * bounds.smoothness;
        Ok(p)
    }
}

struct Block {
    alpha: f64,
    eta: f64,
    gamma_steps: usize,
    radius: f64,
    decrease: f64,
    rounds: usize,
    smoothness_warning: bool,
}

/// Everything downstream of `(mu, chi)`.
fn block(bounds: &LossBounds, s: f64, omega: f64, mu: f64, chi: f64, value_gap: f64) -> Result<Block> {
    let rho = bounds.hessian_lipschitz;
    let m = bounds.smoothness;
    let iota = s * mu;
    let alpha = 4.0 * chi;
    let curv = (rho * alpha).sqrt();
    let eta = curv / (m * m * iota * iota);
    let gamma_steps = (iota / (s * eta * curv)).ceil();
    let radius = iota.powf(-1.5) * (alpha / rho).sqrt();
    let decrease = s / (8.0 * iota.powi(3)) * (alpha.powi(3) / rho).sqrt();
    let omega0 = s * omega / (16.0 * iota.powi(3) * value_gap) * (chi.powi(3) / rho).sqrt();
    let rounds = if omega0 >= 1.0 { 1 } else { repetitions_for(omega0)? };
    if !(gamma_steps.is_finite() && gamma_steps >= 1.0 && gamma_steps < usize::MAX as f64) {
        return Err(Error::invalid(format!("escape round length is not representable: {gamma_steps}")));
    }
    Ok(Block {
        alpha,
        eta,
        gamma_steps: gamma_steps as usize,
        radius,
        decrease,
        rounds,
        smoothness_warning: m < curv,
    })
}

/// Smallest `Q` with `(7/8)^Q <= omega0`.
pub fn repetitions_for(omega0: f64) -> Result<usize> {
    if !(omega0 > 0.0 && omega0 < 1.0) {
        return Err(Error::invalid(format!("omega0 must lie in (0,1), got {omega0}")));
    }
    let ratio: f64 = 7.0 / 8.0;
    let mut q = (omega0.ln() / ratio.ln()).ceil().max(1.0) as usize;
    // floating-point guard on both sides of the boundary
    while q > 1 && ratio.powi(q as i32 - 1) <= omega0 {
        q -= 1;
    }
    while ratio.powi(q as i32) > omega0 {
        q += 1;
    }
    Ok(q)
}

/// The sufficient repetition count `ceil((26/5) ln(1/omega0))`.
pub fn repetitions_closed_form(omega0: f64) -> Result<usize> {
    if !(omega0 > 0.0 && omega0 < 1.0) {
        return Err(Error::invalid(format!("omega0 must lie in (0,1), got {omega0}")));
    }
    Ok(((26.0 / 5.0) * (1.0 / omega0).ln()).ceil().max(1.0) as usize)
}

/// Derives the full parameter block, taking the value gap `F_0 - F*` to be
/// the declared range `U`.
pub fn derive_params(
    bounds: &LossBounds,
    noise: &NoiseProfile,
    consts: &ParamConstants,
    horizon_hint: f64,
) -> Result<PsgdParams> {
    derive_params_with_gap(bounds, noise, consts, horizon_hint, bounds.value_range)
}

pub fn derive_params_with_gap(
    bounds: &LossBounds,
    noise: &NoiseProfile,
    consts: &ParamConstants,
    horizon_hint: f64,
    value_gap: f64,
) -> Result<PsgdParams> {
    bounds.validate()?;
    let s = consts.scale;
    let c = consts.noise_const;
    let omega = consts.failure_prob;
    if !(s.is_finite() && s > 0.0 && c.is_finite() && c > 0.0) {
        return Err(Error::invalid(format!("constants s={s}, C={c} must be positive")));
    }
    if !(omega > 0.0 && omega < 1.0) {
        return Err(Error::invalid(format!("failure probability must lie in (0,1), got {omega}")));
    }
    if !(horizon_hint.is_finite() && horizon_hint >= 1.0) {
        return Err(Error::invalid(format!("horizon hint must be >= 1, got {horizon_hint}")));
    }
    if !(value_gap.is_finite() && value_gap > 0.0) {
        return Err(Error::invalid(format!("value gap must be positive, got {value_gap}")));
    }
    let rho = bounds.hessian_lipschitz;
    if rho <= 0.0 {
        return Err(Error::invalid("parameter block needs a positive Hessian-Lipschitz constant"));
    }
    let psi = noise.psi();
    if psi <= 0.0 {
        return Err(Error::invalid("parameter block needs positive effective noise"));
    }
    let m = bounds.smoothness;
    let d = noise.dim as f64;
    let r = noise.r;

    let step_size_for = |mu: f64| {
        let iota = s * mu;
        let alpha = 16.0 * c.sqrt() * s * mu * mu * psi;
        (rho * alpha).sqrt() / (m * m * iota * iota)
    };
    let branches_for = |eta: f64| -> [Option<f64>; 4] {
        let c4 = c.powf(0.25);
        let b1 = {
            let inner_log = ((4.0 * c4 / (s * eta * r)) * (psi / rho).sqrt()).ln();
            ((9.0 * d * inner_log) / (c4 * eta * (s * rho * psi).sqrt())).ln() / s
        };
        let b2 = (160.0 * 2f64.sqrt() * c4 / (s * (eta * r).sqrt()) * (psi / rho).sqrt()).ln();
        let b3 = (c * (4.0 * horizon_hint / omega).ln()).powf(0.25) / (2f64.powf(0.75) * s.sqrt());
        [b1, b2, b3, 1.0].map(|v| v.is_finite().then_some(v))
    };
    let max_branch = |br: &[Option<f64>; 4]| -> Result<f64> {
        br.iter()
            .flatten()
            .copied()
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
            .ok_or_else(|| Error::invalid("every branch of the log factor is non-finite"))
    };

    // mu enters eta, and eta enters mu; iterate the (contracting) map from mu = 1
    let mut mu = 1.0;
    let mut branches = branches_for(step_size_for(mu));
    let residual = match consts.log_factor {
        Some(fixed) => {
            if !(fixed.is_finite() && fixed > 0.0) {
                return Err(Error::invalid(format!("fixed log factor must be positive, got {fixed}")));
            }
            mu = fixed;
            branches = branches_for(step_size_for(mu));
            0.0
        }
        None => {
            for _ in 0..200 {
                let next = max_branch(&branches)?;
                let done = (next - mu).abs() <= 1e-13 * next;
                mu = next;
                branches = branches_for(step_size_for(mu));
                if done {
                    break;
                }
            }
            (max_branch(&branches)? - mu).abs()
        }
    };

    let iota = s * mu;
    let chi = 4.0 * c.sqrt() * s * mu * mu * psi;
    let b = block(bounds, s, omega, mu, chi, value_gap)?;

    Ok(PsgdParams {
        scale: s,
        noise_const: c,
        failure_prob: omega,
        log_factor: mu,
        log_factor_branches: branches,
        log_factor_residual: residual,
        iota,
        escape_threshold: chi,
        alpha: b.alpha,
        escape_steps: b.gamma_steps,
        escape_radius: b.radius,
        escape_decrease: b.decrease,
        step_size: b.eta,
        escape_rounds: b.rounds,
        psi,
        horizon: horizon_hint,
        smoothness_warning: b.smoothness_warning,
        step_smoothness: b.eta * m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds() -> LossBounds {
        LossBounds {
            grad_bound: 5.0,
            smoothness: 6.0,
            hessian_lipschitz: 9.0,
            value_range: 4.0,
            min_value: Some(0.0),
        }
    }

    #[test]
    fn psi_examples() {
        assert_eq!(NoiseProfile::new(3.0, 0.0, 10).unwrap().psi(), 3.0);
        assert_eq!(NoiseProfile::new(0.0, 2.0, 4).unwrap().psi(), 4.0);
        assert!(NoiseProfile::new(-1.0, 0.0, 4).is_err());
    }

    #[test]
    fn repetitions_smallest_integer() {
        assert_eq!(repetitions_for(7.0 / 8.0).unwrap(), 1);
        assert_eq!(repetitions_for(0.5).unwrap(), 6);
        // the closed form gives 24, but (7/8)^24 = 0.0406 > 0.01
        assert_eq!(repetitions_closed_form(0.01).unwrap(), 24);
        assert!(0.875f64.powi(24) > 0.01);
        let q = repetitions_for(0.01).unwrap();
        assert_eq!(q, 35);
        assert!(0.875f64.powi(35) <= 0.01 && 0.875f64.powi(34) > 0.01);
        assert_eq!(repetitions_closed_form(0.5).unwrap(), 4);
        assert!(repetitions_for(0.0).is_err());
        assert!(repetitions_for(1.0).is_err());
    }

    #[test]
    fn block_relations_hold() {
        let noise = NoiseProfile::new(0.05, 0.01, 10).unwrap();
        let p = derive_params(&bounds(), &noise, &ParamConstants::default(), 1e4).unwrap();
        assert_eq!(p.alpha, 4.0 * p.escape_threshold);
        let same = p.with_threshold(&bounds(), p.escape_threshold, bounds().value_range).unwrap();
        assert_eq!(same, p);
        assert_eq!(p.iota, p.scale * p.log_factor);
        assert!(p.log_factor >= 1.0);
        assert!(p.escape_steps >= 1 && p.escape_rounds >= 1);
        assert!(p.step_size > 0.0 && p.escape_radius > 0.0 && p.escape_decrease > 0.0);
        assert!(p.log_factor_residual <= 1e-9 * p.log_factor);
    }

    #[test]
    fn rejects_bad_inputs() {
        let noise = NoiseProfile::new(0.05, 0.01, 10).unwrap();
        let mut b = bounds();
        b.grad_bound = 0.0;
        assert!(derive_params(&b, &noise, &ParamConstants::default(), 1e4).is_err());
        let consts = ParamConstants {
            failure_prob: 1.5,
            ..Default::default()
        };
        assert!(derive_params(&bounds(), &noise, &consts, 1e4).is_err());
    }

    #[test]
    fn fixed_log_factor_is_used_verbatim() {
        let noise = NoiseProfile::new(0.05, 0.01, 10).unwrap();
        let consts = ParamConstants {
            scale: 1.0,
            log_factor: Some(1.0),
            ..Default::default()
        };
        let p = derive_params(&bounds(), &noise, &consts, 1e4).unwrap();
        assert_eq!(p.iota, 1.0);
        assert_eq!(p.log_factor_residual, 0.0);
        assert_eq!(p.escape_threshold, 4.0 * noise.psi());
        assert_eq!(p.step_size, (9.0 * p.alpha).sqrt() / 36.0);
    }

    #[test]
    fn zero_injection_drops_log_branches() {
        let noise = NoiseProfile::new(0.05, 0.0, 10).unwrap();
        let p = derive_params(&bounds(), &noise, &ParamConstants::default(), 1e4).unwrap();
        assert!(p.log_factor_branches[0].is_none());
        assert!(p.log_factor_branches[1].is_none());
        assert!(p.log_factor_branches[3] == Some(1.0));
    }
}
