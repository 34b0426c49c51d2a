//! Fixtures shared by the benchmarks.

use sospkit::harness::{ExperimentConfig, Start};
use sospkit::oracles::{ClientPool, DriftRewindMode, ScheduleParams, SpiderConfig, SpiderOracle};
use sospkit::privacy::PrivacyBudget;
use sospkit::{build_objective, ObjectiveOptions, ObjectiveSpec, SeededRng, Vector};

pub fn objective(name: &str, dim: usize) -> ObjectiveSpec {
    build_objective(name, dim, &ObjectiveOptions::default()).expect("known objective")
}

/// A point drawn uniformly from half the objective's box.
pub fn interior_point(obj: &ObjectiveSpec, seed: u64) -> Vector {
    let mut rng = SeededRng::new(seed, 0);
    let b = 0.5 * obj.box_radius();
    Vector::new((0..obj.dim()).map(|_| rng.uniform(-b, b)).collect()).expect("finite point")
}

/// Variance-reduced oracle over `m` clients with fixed batch sizes and an
/// effectively unlimited sample budget.
pub fn spider_oracle(obj: &ObjectiveSpec, m: usize, b1: usize, b2: usize, kappa: f64) -> SpiderOracle {
    let schedule = ScheduleParams::fixed(kappa, b1, b2).expect("valid schedule");
    let privacy = PrivacyBudget::new(1.0, 1e-5).expect("valid budget");
    SpiderOracle::new(
        obj.clone(),
        ClientPool::new(1, m, usize::MAX / (2 * m.max(1))).expect("clients"),
        &schedule,
        SpiderConfig::new(&obj.bounds(), Some(privacy)),
        DriftRewindMode::ActualQueries,
    )
    .with_error_tracking(false)
}

/// The noise-dominated double-well configuration used by the scaling sweeps.
pub fn sweep_config(dim: usize, n: usize, m: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        objective: "double-well-d".into(),
        dim,
        n,
        m,
        s: 1.0,
        c: 0.01,
        start: Start::Random,
        start_radius: 1.0,
        ..ExperimentConfig::default()
    };
    cfg.overrides.log_factor = Some(1.0);
    cfg
}
