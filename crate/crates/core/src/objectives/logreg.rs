use nalgebra::{DMatrix, DVector};

use super::{Objective, Payload, Sample};
use crate::error::{Error, Result};
use crate::params::LossBounds;
use crate::rng::SeededRng;

const LABEL_FLIP: f64 = 0.1;

/// Logistic regression with the non-convex regularizer
/// `lambda sum_i x_i^2 / (1 + x_i^2)` over a fixed finite population.
///
/// Samples are uniform draws from the population, so the population risk is
/// the exact average over all points.
#[derive(Debug, Clone)]
pub struct LogRegNcvx {
    dim: usize,
    features: Vec<Vec<f64>>,
    labels: Vec<f64>,
    reg: f64,
    radius: f64,
    max_feature_norm: f64,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-t))` without overflow.
fn logistic_loss(t: f64) -> f64 {
    if t > 0.0 {
        (-t).exp().ln_1p()
    } else {
        -t + t.exp().ln_1p()
    }
}

fn reg_d1(x: f64) -> f64 {
    2.0 * x / (1.0 + x * x).powi(2)
}

fn reg_d2(x: f64) -> f64 {
    (2.0 - 6.0 * x * x) / (1.0 + x * x).powi(3)
}

fn reg_d3(x: f64) -> f64 {
    24.0 * x * (x * x - 1.0) / (1.0 + x * x).powi(4)
}

impl LogRegNcvx {
    pub fn new(dim: usize, population: usize, reg: f64, radius: f64, seed: u64) -> Result<Self> {
        if population == 0 {
            return Err(Error::invalid("logreg-ncvx population must be non-empty"));
        }
        if !(reg >= 0.0 && radius > 0.0) {
            return Err(Error::invalid("logreg-ncvx needs reg >= 0 and a positive box radius"));
        }
        let mut rng = SeededRng::new(seed, 0x10);
        let truth = rng.gaussian_vector(dim, 1.0 / (dim as f64).sqrt());
        let mut features = Vec::with_capacity(population);
        let mut labels = Vec::with_capacity(population);
        for _ in 0..population {
            let a: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
            let margin: f64 = a.iter().zip(truth.as_slice()).map(|(p, q)| p * q).sum();
            let mut y = if margin >= 0.0 { 1.0 } else { -1.0 };
            if rng.uniform(0.0, 1.0) < LABEL_FLIP {
                y = -y;
            }
            features.push(a);
            labels.push(y);
        }
        let max_feature_norm = features
            .iter()
            .map(|a| a.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        Ok(LogRegNcvx {
            dim,
            features,
            labels,
            reg,
            radius,
            max_feature_norm,
        })
    }

    pub fn population(&self) -> usize {
        self.features.len()
    }

    fn margin(&self, k: usize, x: &[f64]) -> f64 {
        self.labels[k] * self.features[k].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    fn data_gradient(&self, k: usize, x: &[f64], out: &mut [f64]) {
        // d/dx log(1 + exp(-y a.x)) = -y a sigma(-y a.x)
        let w = -self.labels[k] * sigmoid(-self.margin(k, x));
        for (o, a) in out.iter_mut().zip(&self.features[k]) {
            *o += w * a;
        }
    }

    fn data_hessian(&self, k: usize, x: &[f64], out: &mut DMatrix<f64>) {
        let s = sigmoid(self.margin(k, x));
        let a = DVector::from_column_slice(&self.features[k]);
        out.ger(s * (1.0 - s), &a, &a, 1.0);
    }

    fn add_reg_gradient(&self, x: &[f64], out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(x) {
            *o += self.reg * reg_d1(*xi);
        }
    }

    fn add_reg_hessian(&self, x: &[f64], out: &mut DMatrix<f64>) {
        for (i, xi) in x.iter().enumerate() {
            out[(i, i)] += self.reg * reg_d2(*xi);
        }
    }

    fn index(z: &Payload) -> usize {
        match z {
            Payload::Index(k) => *k,
            Payload::Noise(_) => unreachable!("logreg samples are population indices"),
        }
    }
}

impl Objective for LogRegNcvx {
    fn name(&self) -> &str {
        "logreg-ncvx"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn box_radius(&self) -> f64 {
        self.radius
    }

    fn bounds(&self) -> LossBounds {
        let d = self.dim as f64;
        let a = self.max_feature_norm;
        let reg_d1_max = reg_d1(1.0 / 3f64.sqrt());
        let reg_d3_max = (0..=4000)
            .map(|i| reg_d3(i as f64 * 2.0 / 4000.0).abs())
            .fold(0.0, f64::max)
            * 1.01;
        // sup |phi'''| for phi(t) = log(1 + exp(-t)) is 1 / (6 sqrt 3)
        let logistic_d3 = 1.0 / (6.0 * 3f64.sqrt());
        LossBounds {
            grad_bound: a + self.reg * reg_d1_max * d.sqrt(),
            smoothness: a * a / 4.0 + 2.0 * self.reg,
            hessian_lipschitz: logistic_d3 * a.powi(3) + self.reg * reg_d3_max,
            value_range: logistic_loss(-a * self.radius * d.sqrt()) + self.reg * d,
            min_value: None,
        }
    }

    fn noise_bound(&self) -> f64 {
        2.0 * self.max_feature_norm
    }

    fn value(&self, x: &[f64]) -> f64 {
        let n = self.population() as f64;
        let data: f64 = (0..self.population()).map(|k| logistic_loss(self.margin(k, x))).sum::<f64>() / n;
        data + self.reg * x.iter().map(|v| v * v / (1.0 + v * v)).sum::<f64>()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for k in 0..self.population() {
            self.data_gradient(k, x, &mut g);
        }
        let n = self.population() as f64;
        g.iter_mut().for_each(|v| *v /= n);
        self.add_reg_gradient(x, &mut g);
        g
    }

    fn hessian_vector(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for k in 0..self.population() {
            let s = sigmoid(self.margin(k, x));
            let av: f64 = self.features[k].iter().zip(v).map(|(a, b)| a * b).sum();
            let w = s * (1.0 - s) * av;
            for (o, a) in out.iter_mut().zip(&self.features[k]) {
                *o += w * a;
            }
        }
        let n = self.population() as f64;
        for ((o, xi), vi) in out.iter_mut().zip(x).zip(v) {
            *o = *o / n + self.reg * reg_d2(*xi) * vi;
        }
        out
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for k in 0..self.population() {
            self.data_hessian(k, x, &mut h);
        }
        h /= self.population() as f64;
        self.add_reg_hessian(x, &mut h);
        h
    }

    fn draw(&self, rng: &mut SeededRng) -> Payload {
        Payload::Index(rng.index(self.population()))
    }

    fn sample_value(&self, x: &[f64], z: &Payload) -> f64 {
        logistic_loss(self.margin(Self::index(z), x)) + self.reg * x.iter().map(|v| v * v / (1.0 + v * v)).sum::<f64>()
    }

    fn sample_gradient(&self, x: &[f64], z: &Payload) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        self.data_gradient(Self::index(z), x, &mut g);
        self.add_reg_gradient(x, &mut g);
        g
    }

    fn sample_hessian(&self, x: &[f64], z: &Payload) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        self.data_hessian(Self::index(z), x, &mut h);
        self.add_reg_hessian(x, &mut h);
        h
    }

    fn empirical_hessian(&self, x: &[f64], samples: &[Sample]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for s in samples {
            self.data_hessian(Self::index(&s.payload), x, &mut h);
        }
        h /= samples.len().max(1) as f64;
        self.add_reg_hessian(x, &mut h);
        h
    }
}
