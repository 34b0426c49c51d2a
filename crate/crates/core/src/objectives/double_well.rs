use nalgebra::DMatrix;

use super::{Objective, Payload, Sample};
use crate::error::{Error, Result};
use crate::params::LossBounds;
use crate::rng::SeededRng;

/// Separable double well `f(x; z) = sum_i (x_i^2 - 1)^2 / 4 + <z, x>` with
/// `z` uniform on `[-a, a]^d`.
///
/// The origin is a critical point with Hessian `-I`; the corners `x_i = +-1`
/// are the minima.
#[derive(Debug, Clone)]
pub struct DoubleWell {
    dim: usize,
    radius: f64,
    noise: f64,
}

impl DoubleWell {
    pub fn new(dim: usize, radius: f64, noise: f64) -> Result<Self> {
        if !(radius >= 1.0 && radius.is_finite()) {
            return Err(Error::invalid(format!("double-well box radius must be >= 1, got {radius}")));
        }
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::invalid(format!("noise amplitude must be >= 0, got {noise}")));
        }
        Ok(DoubleWell { dim, radius, noise })
    }
}

impl Objective for DoubleWell {
    fn name(&self) -> &str {
        "double-well"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn box_radius(&self) -> f64 {
        self.radius
    }

    fn bounds(&self) -> LossBounds {
        let b = self.radius;
        let d = self.dim as f64;
        // max |x^3 - x| on [-b, b]: interior extremum 2/(3 sqrt 3) or the endpoint
        let coord_grad = (2.0 / (3.0 * 3f64.sqrt())).max(b * b * b - b);
        LossBounds {
            grad_bound: d.sqrt() * (coord_grad + self.noise),
            smoothness: (3.0 * b * b - 1.0).max(1.0),
            // |3x^2 - 3y^2| <= 6B |x - y| per coordinate
            hessian_lipschitz: 6.0 * b,
            value_range: d * ((b * b - 1.0).powi(2)).max(1.0) / 4.0,
            min_value: Some(0.0),
        }
    }

    fn noise_bound(&self) -> f64 {
        self.noise * (self.dim as f64).sqrt()
    }

    fn value(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| (v * v - 1.0).powi(2) / 4.0).sum()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v * v * v - v).collect()
    }

    fn hessian_vector(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        x.iter().zip(v).map(|(xi, vi)| (3.0 * xi * xi - 1.0) * vi).collect()
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            self.dim,
            x.iter().map(|xi| 3.0 * xi * xi - 1.0),
        ))
    }

    fn draw(&self, rng: &mut SeededRng) -> Payload {
        Payload::Noise((0..self.dim).map(|_| rng.uniform(-self.noise, self.noise)).collect())
    }

    fn sample_value(&self, x: &[f64], z: &Payload) -> f64 {
        let Payload::Noise(z) = z else {
            unreachable!("double-well samples carry additive noise")
        };
        self.value(x) + x.iter().zip(z).map(|(v, zi)| v * zi).sum::<f64>()
    }

    fn sample_gradient(&self, x: &[f64], z: &Payload) -> Vec<f64> {
        let Payload::Noise(z) = z else {
            unreachable!("double-well samples carry additive noise")
        };
        x.iter().zip(z).map(|(v, zi)| v * v * v - v + zi).collect()
    }

    fn sample_hessian(&self, x: &[f64], _z: &Payload) -> DMatrix<f64> {
        self.hessian(x)
    }

    // the noise is linear in x, so every per-sample Hessian is the population one
    fn empirical_hessian(&self, x: &[f64], _samples: &[Sample]) -> DMatrix<f64> {
        self.hessian(x)
    }
}
