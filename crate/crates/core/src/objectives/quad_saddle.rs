use nalgebra::{DMatrix, DVector};

use super::{Objective, Payload, Sample};
use crate::error::{Error, Result};
use crate::params::LossBounds;
use crate::rng::SeededRng;
use crate::vector::Vector;

/// `f(x; z) = x^T A x / 2 + <z, x> + lambda sum_i x_i^4`, where `A` has a
/// single negative eigenvalue `-gamma` and the rest spread over `[1, 2]`.
///
/// Without rotation `A` is diagonal with the negative direction on the first
/// axis, and the minima sit at `+-sqrt(gamma / (4 lambda)) e_1`.
#[derive(Debug, Clone)]
pub struct QuadSaddle {
    dim: usize,
    a: DMatrix<f64>,
    eigs: Vec<f64>,
    quartic: f64,
    radius: f64,
    noise: f64,
    rotated: bool,
}

impl QuadSaddle {
    pub fn new(
        dim: usize,
        negative_curvature: f64,
        quartic: f64,
        radius: f64,
        noise: f64,
        rotation_seed: Option<u64>,
    ) -> Result<Self> {
        if !(negative_curvature > 0.0 && quartic > 0.0 && radius > 0.0 && noise >= 0.0) {
            return Err(Error::invalid(
                "quad-saddle needs positive curvature, quartic weight and radius, non-negative noise",
            ));
        }
        let mut eigs = vec![-negative_curvature];
        for i in 1..dim {
            let t = if dim > 2 { (i - 1) as f64 / (dim - 2) as f64 } else { 0.0 };
            eigs.push(1.0 + t);
        }
        let diag = DMatrix::from_diagonal(&DVector::from_vec(eigs.clone()));
        let a = match rotation_seed {
            None => diag,
            Some(seed) => {
                let mut rng = SeededRng::new(seed, 0x71);
                let g = DMatrix::from_fn(dim, dim, |_, _| rng.standard_normal());
                let q = g.qr().q();
                &q * diag * q.transpose()
            }
        };
        Ok(QuadSaddle {
            dim,
            a,
            eigs,
            quartic,
            radius,
            noise,
            rotated: rotation_seed.is_some(),
        })
    }

    /// Minima inside the box; only known in closed form without rotation.
    pub fn known_minima(&self) -> Vec<Vector> {
        if self.rotated {
            return Vec::new();
        }
        let t = (-self.eigs[0] / (4.0 * self.quartic)).sqrt();
        if t > self.radius {
            return Vec::new();
        }
        [t, -t]
            .iter()
            .map(|&s| {
                let mut v = Vector::zeros(self.dim);
                v.as_mut_slice()[0] = s;
                v
            })
            .collect()
    }

    fn a_norm(&self) -> f64 {
        self.eigs.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl Objective for QuadSaddle {
    fn name(&self) -> &str {
        "quad-saddle"
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
        let lam = self.quartic;
        let gamma = -self.eigs[0];
        let top = self.eigs.iter().copied().fold(f64::MIN, f64::max).max(0.0);
        let min_value = if self.rotated {
            None
        } else {
            Some(-gamma * gamma / (16.0 * lam))
        };
        LossBounds {
            grad_bound: d.sqrt() * (self.a_norm() * b + 4.0 * lam * b.powi(3) + self.noise),
            smoothness: self.a_norm() + 12.0 * lam * b * b,
            hessian_lipschitz: 24.0 * lam * b,
            // max <= top d B^2 / 2 + lam d B^4, min >= -gamma d B^2 / 2
            value_range: 0.5 * top * d * b * b + lam * d * b.powi(4) + 0.5 * gamma * d * b * b,
            min_value,
        }
    }

    fn noise_bound(&self) -> f64 {
        self.noise * (self.dim as f64).sqrt()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        0.5 * xv.dot(&(&self.a * &xv)) + self.quartic * x.iter().map(|v| v.powi(4)).sum::<f64>()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let xv = DVector::from_column_slice(x);
        let ax = &self.a * &xv;
        ax.iter().zip(x).map(|(a, v)| a + 4.0 * self.quartic * v.powi(3)).collect()
    }

    fn hessian_vector(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let av = &self.a * DVector::from_column_slice(v);
        av.iter()
            .zip(x.iter().zip(v))
            .map(|(a, (xi, vi))| a + 12.0 * self.quartic * xi * xi * vi)
            .collect()
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut h = self.a.clone();
        for (i, xi) in x.iter().enumerate() {
            h[(i, i)] += 12.0 * self.quartic * xi * xi;
        }
        h
    }

    fn draw(&self, rng: &mut SeededRng) -> Payload {
        Payload::Noise((0..self.dim).map(|_| rng.uniform(-self.noise, self.noise)).collect())
    }

    fn sample_value(&self, x: &[f64], z: &Payload) -> f64 {
        let Payload::Noise(z) = z else {
            unreachable!("quad-saddle samples carry additive noise")
        };
        self.value(x) + x.iter().zip(z).map(|(v, zi)| v * zi).sum::<f64>()
    }

    fn sample_gradient(&self, x: &[f64], z: &Payload) -> Vec<f64> {
        let Payload::Noise(z) = z else {
            unreachable!("quad-saddle samples carry additive noise")
        };
        let mut g = self.gradient(x);
        g.iter_mut().zip(z).for_each(|(gi, zi)| *gi += zi);
        g
    }

    fn sample_hessian(&self, x: &[f64], _z: &Payload) -> DMatrix<f64> {
        self.hessian(x)
    }

    fn empirical_hessian(&self, x: &[f64], _samples: &[Sample]) -> DMatrix<f64> {
        self.hessian(x)
    }
}
