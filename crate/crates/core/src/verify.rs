//! Exact, non-private checks of second-order stationarity on objectives with
//! analytic gradients and Hessians.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::objectives::ObjectiveSpec;
use crate::params::LossBounds;
use crate::vector::Vector;

/// Residual tolerance of the eigen-solver used by [`check_sosp`].
pub const EIG_TOL: f64 = 1e-10;

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `||grad F(x)|| <= alpha_g` and `lambda_min(hess F(x)) >= -alpha_h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SospCriterion {
    pub alpha_g: f64,
    pub alpha_h: f64,
}

impl SospCriterion {
    pub fn new(alpha_g: f64, alpha_h: f64) -> Result<Self> {
        if !(alpha_g > 0.0 && alpha_h >= 0.0) {
            return Err(Error::invalid(format!(
                "SOSP criterion needs alpha_g > 0 and alpha_h >= 0, got ({alpha_g}, {alpha_h})"
            )));
        }
        Ok(SospCriterion { alpha_g, alpha_h })
    }

    /// The `alpha`-SOSP criterion: `alpha_h = sqrt(rho * alpha)`.
    pub fn alpha_sosp(alpha: f64, rho: f64) -> Result<Self> {
        Self::new(alpha, (rho * alpha).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SospReport {
    pub grad_norm: f64,
    pub lambda_min: f64,
    /// Advisory: only the eigenvalue is contract-bearing.
    pub v_min: Vector,
    pub passes: bool,
    pub criterion: SospCriterion,
}

fn report(grad_norm: f64, lambda_min: f64, v_min: Vector, crit: &SospCriterion) -> SospReport {
    SospReport {
        grad_norm,
        lambda_min,
        v_min,
        passes: grad_norm <= crit.alpha_g && lambda_min >= -crit.alpha_h,
        criterion: *crit,
    }
}

/// Exact gradient norm and smallest Hessian eigenvalue (by power iteration
/// on Hessian-vector products) at `x`, judged against `crit`.
pub fn check_sosp(obj: &ObjectiveSpec, x: &Vector, crit: &SospCriterion) -> Result<SospReport> {
    let grad_norm = obj.gradient(x)?.norm();
    let (lambda_min, v_min) = obj.smallest_eig(x, EIG_TOL)?;
    Ok(report(grad_norm, lambda_min, v_min, crit))
}

/// As [`check_sosp`], with the eigenvalue from a dense decomposition of the
/// assembled Hessian.
pub fn check_sosp_dense(obj: &ObjectiveSpec, x: &Vector, crit: &SospCriterion) -> Result<SospReport> {
    let grad_norm = obj.gradient(x)?.norm();
    let pair = linalg::dense_smallest_eigenpair(&obj.hessian(x)?)?;
    Ok(report(grad_norm, pair.value, pair.vector, crit))
}

/// `lambda_min(hess F(x)) + sqrt(rho * alpha)`; negative at an
/// `alpha`-strict saddle.
pub fn strict_saddle_margin(obj: &ObjectiveSpec, x: &Vector, rho: f64, alpha: f64) -> Result<f64> {
    if !(rho * alpha >= 0.0) {
        return Err(Error::invalid("strict-saddle margin needs rho * alpha >= 0"));
    }
    let (lambda, _) = obj.smallest_eig(x, EIG_TOL)?;
    Ok(lambda + (rho * alpha).sqrt())
}

/// Raised when `M < sqrt(rho * alpha)`, which the analysis assumes away.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessWarning {
    pub smoothness: f64,
    pub curvature_threshold: f64,
}

pub fn smoothness_assumption(bounds: &LossBounds, alpha: f64) -> Option<SmoothnessWarning> {
    let threshold = (bounds.hessian_lipschitz * alpha).sqrt();
    (bounds.smoothness < threshold).then_some(SmoothnessWarning {
        smoothness: bounds.smoothness,
        curvature_threshold: threshold,
    })
}

/// Central finite-difference gradient of the population risk.
pub fn fd_gradient(obj: &ObjectiveSpec, x: &Vector, h: f64) -> Result<Vector> {
    let mut g = Vec::with_capacity(x.dim());
    for i in 0..x.dim() {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi.as_mut_slice()[i] += h;
        lo.as_mut_slice()[i] -= h;
        g.push((obj.value(&hi)? - obj.value(&lo)?) / (2.0 * h));
    }
    Vector::new(g)
}

/// `||a - b|| / max(||a||, ||b||, 1)`.
pub fn relative_error(a: &Vector, b: &Vector) -> f64 {
    a.distance(b) / a.norm().max(b.norm()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{build, ObjectiveOptions};
    use crate::rng::SeededRng;
    use approx::assert_relative_eq;

    fn dw(d: usize) -> ObjectiveSpec {
        build("double-well", d, &ObjectiveOptions::default()).unwrap()
    }

    #[test]
    fn minimum_passes_and_saddle_fails() {
        let obj = dw(6);
        let crit = SospCriterion::new(1e-3, 0.5).unwrap();
        assert!(check_sosp(&obj, &Vector::filled(6, 1.0), &crit).unwrap().passes);
        let r = check_sosp(&obj, &Vector::zeros(6), &crit).unwrap();
        assert!(!r.passes);
        assert_relative_eq!(r.lambda_min, -1.0, epsilon = 1e-9);
    }

    #[test]
    fn grad_norm_matches_finite_differences() {
        let obj = dw(6);
        let mut rng = SeededRng::new(2, 0);
        let x = Vector::filled(6, 1.0).add(&rng.unit_vector(6).scale(0.01));
        let r = check_sosp(&obj, &x, &SospCriterion::new(1.0, 1.0).unwrap()).unwrap();
        let fd = fd_gradient(&obj, &x, FD_STEP).unwrap().norm();
        assert!((r.grad_norm - fd).abs() <= 1e-6 * r.grad_norm.max(1e-3));
    }

    #[test]
    fn margin_examples() {
        // quad-saddle with d = 2, gamma = 2: lambda_min = -2 at the origin
        let opts = ObjectiveOptions {
            negative_curvature: Some(2.0),
            ..Default::default()
        };
        let obj = build("quad-saddle", 2, &opts).unwrap();
        let m = strict_saddle_margin(&obj, &Vector::zeros(2), 1.0, 1.0).unwrap();
        assert_relative_eq!(m, -1.0, epsilon = 1e-9);
        // double-well at x_i = 1/sqrt(3) has Hessian exactly zero
        let obj = dw(3);
        let x = Vector::filled(3, 1.0 / 3f64.sqrt());
        let m = strict_saddle_margin(&obj, &x, 4.0, 0.25).unwrap();
        assert!((m - 1.0).abs() < 1e-9);
    }

    #[test]
    fn margins_agree_with_dense_on_grid() {
        let opts = ObjectiveOptions {
            rotation_seed: Some(3),
            ..Default::default()
        };
        let obj = build("quad-saddle", 8, &opts).unwrap();
        let mut rng = SeededRng::new(4, 0);
        for _ in 0..100 {
            let x = Vector::new((0..8).map(|_| rng.uniform(-1.5, 1.5)).collect()).unwrap();
            let m = strict_saddle_margin(&obj, &x, 0.5, 0.1).unwrap();
            let dense = linalg::dense_smallest_eigenpair(&obj.hessian(&x).unwrap()).unwrap().value;
            assert!((m - (dense + 0.05f64.sqrt())).abs() <= 1e-8);
        }
    }

    #[test]
    fn check_is_deterministic() {
        let obj = dw(5);
        let x = Vector::filled(5, 0.3);
        let crit = SospCriterion::alpha_sosp(0.1, 9.0).unwrap();
        assert_eq!(check_sosp(&obj, &x, &crit).unwrap(), check_sosp(&obj, &x, &crit).unwrap());
    }

    #[test]
    fn smoothness_warning() {
        let b = dw(2).bounds();
        assert!(smoothness_assumption(&b, 0.01).is_none());
        let huge = b.smoothness.powi(2) / b.hessian_lipschitz * 4.0;
        assert!(smoothness_assumption(&b, huge).is_some());
    }

    #[test]
    fn criterion_validation() {
        assert!(SospCriterion::new(0.0, 1.0).is_err());
        assert!(SospCriterion::new(1.0, -1.0).is_err());
        let c = SospCriterion::alpha_sosp(0.04, 25.0).unwrap();
        assert_relative_eq!(c.alpha_h, 1.0, epsilon = 1e-15);
    }
}
