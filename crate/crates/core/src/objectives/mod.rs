//! Synthetic stochastic objectives with exactly computable population risk,
//! gradients and Hessians.
//!
//! Each objective declares its regularity constants over an explicit box
//! `||x||_inf <= B`. Drivers check iterates against that box and flag runs
//! that leave it.

mod double_well;
mod logreg;
mod quad_saddle;

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, PowerIterationOptions};
use crate::params::LossBounds;
use crate::rng::SeededRng;
use crate::vector::Vector;

pub use double_well::DoubleWell;
pub use logreg::LogRegNcvx;
pub use quad_saddle::QuadSaddle;

/// Realization of one data point.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Additive linear noise `z`, entering the loss as `<z, x>`.
    Noise(Vec<f64>),
    /// Index into a finite population.
    Index(usize),
}

pub type SampleId = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: SampleId,
    pub payload: Payload,
}

/// Analytic description of a stochastic loss `f(x; z)` and its population
/// risk `F(x) = E_z f(x; z)`.
pub trait Objective: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Half-width `B` of the box on which [`Objective::bounds`] holds.
    fn box_radius(&self) -> f64;
    fn bounds(&self) -> LossBounds;
    /// Bound on `||grad f(x; z) - grad F(x)||` over the box.
    fn noise_bound(&self) -> f64;

    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn hessian_vector(&self, x: &[f64], v: &[f64]) -> Vec<f64>;
    fn hessian(&self, x: &[f64]) -> DMatrix<f64>;

    fn draw(&self, rng: &mut SeededRng) -> Payload;
    /// Per-sample loss `f(x; z)`.
    fn sample_value(&self, x: &[f64], z: &Payload) -> f64;
    fn sample_gradient(&self, x: &[f64], z: &Payload) -> Vec<f64>;
    fn sample_hessian(&self, x: &[f64], z: &Payload) -> DMatrix<f64>;

    /// Mean of per-sample Hessians over `samples`.
    fn empirical_hessian(&self, x: &[f64], samples: &[Sample]) -> DMatrix<f64> {
        let d = self.dim();
        let mut acc = DMatrix::zeros(d, d);
        for s in samples {
            acc += self.sample_hessian(x, &s.payload);
        }
        acc / samples.len().max(1) as f64
    }
}

/// Finite per-dataset sample budget. Each logical dataset (one per client
/// and phase) owns one; samples are never handed out twice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetBudget {
    pub dataset_id: u32,
    pub total: usize,
    pub consumed: usize,
}

impl DatasetBudget {
    pub fn new(dataset_id: u32, total: usize) -> Self {
        DatasetBudget {
            dataset_id,
            total,
            consumed: 0,
        }
    }

    pub fn remaining(&self) -> usize {
        self.total - self.consumed
    }

    fn sample_id(&self, index: usize) -> SampleId {
        ((self.dataset_id as u64) << 40) | index as u64
    }
}

/// An objective together with its planted critical points.
#[derive(Debug, Clone)]
pub struct ObjectiveSpec {
    inner: Arc<dyn Objective>,
    saddle_points: Vec<Vector>,
    minima: Vec<Vector>,
}

/// Iteration cap used by [`ObjectiveSpec::smallest_eig`].
pub const EIG_MAX_ITERATIONS: usize = 200_000;

impl ObjectiveSpec {
    /// Wraps an objective, checking that every planted saddle has gradient
    /// norm at most `1e-10` and a negative smallest Hessian eigenvalue.
    pub fn new(inner: Arc<dyn Objective>, saddle_points: Vec<Vector>, minima: Vec<Vector>) -> Result<Self> {
        inner.bounds().validate()?;
        let spec = ObjectiveSpec {
            inner,
            saddle_points,
            minima,
        };
        for (i, s) in spec.saddle_points.iter().enumerate() {
            let g = spec.gradient(s)?;
            let eig = linalg::dense_smallest_eigenpair(&spec.inner.hessian(s.as_slice()))?;
            if g.norm() > 1e-10 || eig.value >= 0.0 {
                return Err(Error::invalid(format!(
                    "planted saddle {i} of {} is not a strict saddle (|grad|={:.3e}, lambda_min={:.3e})",
                    spec.name(),
                    g.norm(),
                    eig.value
                )));
            }
        }
        Ok(spec)
    }

    pub fn name(&self) -> &str {
        self.inner.name()
    }

    pub fn dim(&self) -> usize {
        self.inner.dim()
    }

    pub fn bounds(&self) -> LossBounds {
        self.inner.bounds()
    }

    pub fn box_radius(&self) -> f64 {
        self.inner.box_radius()
    }

    pub fn noise_bound(&self) -> f64 {
        self.inner.noise_bound()
    }

    pub fn saddle_points(&self) -> &[Vector] {
        &self.saddle_points
    }

    pub fn minima(&self) -> &[Vector] {
        &self.minima
    }

    pub fn objective(&self) -> &dyn Objective {
        self.inner.as_ref()
    }

    pub fn in_box(&self, x: &Vector) -> bool {
        x.max_abs() <= self.box_radius()
    }

    pub fn value(&self, x: &Vector) -> Result<f64> {
        x.check_dim(self.dim(), "population_value")?;
        Ok(self.inner.value(x.as_slice()))
    }

    /// Exact gradient of the population risk.
    pub fn gradient(&self, x: &Vector) -> Result<Vector> {
        x.check_dim(self.dim(), "population_gradient")?;
        Ok(Vector::from_raw(self.inner.gradient(x.as_slice())))
    }

    pub fn hessian_vector(&self, x: &Vector, v: &Vector) -> Result<Vector> {
        x.check_dim(self.dim(), "hessian_vector")?;
        v.check_dim(self.dim(), "hessian_vector")?;
        Ok(Vector::from_raw(self.inner.hessian_vector(x.as_slice(), v.as_slice())))
    }

    pub fn hessian(&self, x: &Vector) -> Result<DMatrix<f64>> {
        x.check_dim(self.dim(), "hessian")?;
        Ok(self.inner.hessian(x.as_slice()))
    }

    /// Smallest eigenvalue of the population Hessian and a unit
    /// eigenvector, by block power iteration below the spectral bound `M + 1` with Hessian-vector
    /// products.
    pub fn smallest_eig(&self, x: &Vector, tol: f64) -> Result<(f64, Vector)> {
        self.smallest_eig_seeded(x, tol, 0)
    }

    pub fn smallest_eig_seeded(&self, x: &Vector, tol: f64, seed: u64) -> Result<(f64, Vector)> {
        x.check_dim(self.dim(), "population_hessian_smallest_eig")?;
        let opts = PowerIterationOptions {
            shift: self.bounds().smoothness + 1.0,
            tol,
            max_iterations: EIG_MAX_ITERATIONS,
            seed,
        };
        let xs = x.as_slice();
        let pair = linalg::smallest_eigenpair(self.dim(), |v| self.inner.hessian_vector(xs, v), &opts)?;
        Ok((pair.value, pair.vector))
    }

    /// Draws `b` fresh samples, charging them to `budget`.
    pub fn sample_batch(&self, budget: &mut DatasetBudget, b: usize, rng: &mut SeededRng) -> Result<Vec<Sample>> {
        if budget.consumed + b > budget.total {
            return Err(Error::BudgetExhausted {
                client: None,
                requested: b,
                remaining: budget.remaining(),
            });
        }
        let start = budget.consumed;
        let batch = (0..b)
            .map(|i| Sample {
                id: budget.sample_id(start + i),
                payload: self.inner.draw(rng),
            })
            .collect();
        budget.consumed += b;
        Ok(batch)
    }

    /// Per-sample gradient, rescaled to norm `clip` if it exceeds it.
    /// Per-sample loss `f(x; z)`.
    pub fn sample_value(&self, x: &Vector, z: &Sample) -> Result<f64> {
        x.check_dim(self.dim(), "sample_value")?;
        Ok(self.inner.sample_value(x.as_slice(), &z.payload))
    }

    pub fn sample_gradient(&self, x: &Vector, z: &Sample, clip: Option<f64>) -> Result<Vector> {
        x.check_dim(self.dim(), "per_sample_gradient")?;
        let g = Vector::from_raw(self.inner.sample_gradient(x.as_slice(), &z.payload));
        match clip {
            None => Ok(g),
            Some(c) if c > 0.0 => Ok(g.clipped(c)),
            Some(c) => Err(Error::invalid(format!("clip threshold must be positive, got {c}"))),
        }
    }

    /// Mean of (optionally clipped) per-sample gradients.
    pub fn batch_gradient(&self, x: &Vector, batch: &[Sample], clip: Option<f64>) -> Result<Vector> {
        if batch.is_empty() {
            return Err(Error::invalid("batch gradient of an empty batch"));
        }
        let mut acc = Vector::zeros(self.dim());
        for z in batch {
            acc.add_assign(&self.sample_gradient(x, z, clip)?);
        }
        Ok(acc.scale(1.0 / batch.len() as f64))
    }

    pub fn empirical_hessian(&self, x: &Vector, samples: &[Sample]) -> Result<DMatrix<f64>> {
        x.check_dim(self.dim(), "empirical_hessian")?;
        Ok(self.inner.empirical_hessian(x.as_slice(), samples))
    }
}

/// Objective-specific knobs; unset fields take per-objective defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveOptions {
    pub box_radius: Option<f64>,
    /// Amplitude of the additive sample noise.
    pub noise: Option<f64>,
    /// Quartic coefficient (`quad-saddle`) or regularizer weight (`logreg-ncvx`).
    pub quartic: Option<f64>,
    /// Magnitude of the negative Hessian eigenvalue at the `quad-saddle` origin.
    pub negative_curvature: Option<f64>,
    /// Seed of a random rotation of the `quad-saddle` quadratic form.
    pub rotation_seed: Option<u64>,
    /// Population size for `logreg-ncvx`.
    pub population: Option<usize>,
    pub data_seed: Option<u64>,
}

pub const OBJECTIVE_NAMES: [&str; 3] = ["double-well", "quad-saddle", "logreg-ncvx"];

/// Builds a named objective of dimension `dim`.
pub fn build(name: &str, dim: usize, opts: &ObjectiveOptions) -> Result<ObjectiveSpec> {
    if dim == 0 {
        return Err(Error::invalid("objective dimension must be positive"));
    }
    match name {
        "double-well" | "double-well-d" => {
            let obj = DoubleWell::new(dim, opts.box_radius.unwrap_or(1.5), opts.noise.unwrap_or(0.5))?;
            let saddles = vec![Vector::zeros(dim)];
            let minima = vec![Vector::filled(dim, 1.0), Vector::filled(dim, -1.0)];
            ObjectiveSpec::new(Arc::new(obj), saddles, minima)
        }
        "quad-saddle" => {
            let obj = QuadSaddle::new(
                dim,
                opts.negative_curvature.unwrap_or(1.0),
                opts.quartic.unwrap_or(0.25),
                opts.box_radius.unwrap_or(1.5),
                opts.noise.unwrap_or(0.5),
                opts.rotation_seed,
            )?;
            let minima = obj.known_minima();
            ObjectiveSpec::new(Arc::new(obj), vec![Vector::zeros(dim)], minima)
        }
        "logreg-ncvx" => {
            let obj = LogRegNcvx::new(
                dim,
                opts.population.unwrap_or(1000),
                opts.quartic.unwrap_or(0.1),
                opts.box_radius.unwrap_or(3.0),
                opts.data_seed.unwrap_or(17),
            )?;
            ObjectiveSpec::new(Arc::new(obj), Vec::new(), Vec::new())
        }
        other => Err(Error::invalid(format!(
            "unknown objective `{other}` (expected one of {})",
            OBJECTIVE_NAMES.join(", ")
        ))),
    }
}
