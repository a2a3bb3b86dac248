//! Epoch-by-epoch comparison of the OT solvers on one seeded instance.
//!
//! Every solver is scored with the same function: the semi-dual objective at
//! its current target potential. Timing covers solver updates only.

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::measures::{squared_euclidean_cost, CostMatrix};
use crate::nnet::{Mlp, OutputActivation};
use crate::semidual::{semidual_objective, NetworkSolver, SemidualConfig, StepSchedule, VectorSag, VectorSgd};
use crate::sinkhorn::{sinkhorn_solve, SinkhornIterator};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchSolver {
    Sinkhorn,
    Sgd,
    Sag,
    Network,
}

impl BenchSolver {
    pub const ALL: [BenchSolver; 4] = [Self::Sinkhorn, Self::Sgd, Self::Sag, Self::Network];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sinkhorn => "sinkhorn",
            Self::Sgd => "sgd",
            Self::Sag => "sag",
            Self::Network => "network",
        }
    }
}

impl std::str::FromStr for BenchSolver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown solver '{s}' (sinkhorn, sgd, sag, network)")))
    }
}

impl std::fmt::Display for BenchSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub dim: usize,
    /// Offset of the target Gaussian's mean along every axis.
    pub shift: f64,
    pub epsilon: f64,
    pub epochs: usize,
    /// Source atoms per stochastic step; one epoch is `⌈n_source / batch⌉` steps.
    pub batch: usize,
    pub vector_learning_rate: f64,
    pub network_learning_rate: f64,
    pub network_hidden: usize,
    pub solvers: Vec<BenchSolver>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_source: 32,
            n_target: 32,
            dim: 2,
            shift: 1.0,
            epsilon: 1.0,
            epochs: 200,
            batch: 8,
            vector_learning_rate: 1.0,
            network_learning_rate: 1e-2,
            network_hidden: 64,
            solvers: BenchSolver::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_source == 0 || self.n_target == 0 || self.dim == 0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::InvalidInput("sizes, batch and epochs must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidInput(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.vector_learning_rate > 0.0 && self.network_learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning rates must be > 0".into()));
        }
        if self.solvers.is_empty() {
            return Err(Error::InvalidInput("no solvers selected".into()));
        }
        Ok(())
    }

    fn steps_per_epoch(&self) -> usize {
        self.n_source.div_ceil(self.batch.min(self.n_source))
    }
}

/// Uniform point clouds: source from N(0, I), target from N(shift·1, I).
pub struct BenchInstance {
    pub source_points: Array2<f64>,
    pub target_points: Array2<f64>,
    pub mu: Array1<f64>,
    pub nu: Array1<f64>,
    pub cost: CostMatrix,
}

impl BenchInstance {
    pub fn sample(config: &BenchConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut draw = |n: usize, offset: f64| {
            Array2::from_shape_fn((n, config.dim), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z + offset
            })
        };
        let source_points = draw(config.n_source, 0.0);
        let target_points = draw(config.n_target, config.shift);
        Self::from_points(source_points, target_points)
    }

    pub fn from_points(source_points: Array2<f64>, target_points: Array2<f64>) -> Result<Self> {
        let cost = squared_euclidean_cost(source_points.view(), target_points.view())?;
        let mu = Array1::from_elem(source_points.nrows(), 1.0 / source_points.nrows() as f64);
        let nu = Array1::from_elem(target_points.nrows(), 1.0 / target_points.nrows() as f64);
        Ok(Self {
            source_points,
            target_points,
            mu,
            nu,
            cost,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub solver: BenchSolver,
    pub epoch: usize,
    pub objective: f64,
    /// Cumulative solver time up to and including this epoch.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverSummary {
    pub solver: BenchSolver,
    pub final_objective: f64,
    pub mean_epoch_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSummary {
    /// Converged Sinkhorn value of the instance.
    pub reference_value: f64,
    pub epochs: usize,
    pub solvers: Vec<SolverSummary>,
    /// Widest relative spread between curves over the final quarter of epochs.
    pub final_quarter_spread: f64,
}

pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub summary: BenchSummary,
}

pub const BENCH_HEADER: &str = "solver,epoch,objective,seconds";

/// Runs every configured solver for `config.epochs` epochs on `instance`.
pub fn run_bench(instance: &BenchInstance, config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let BenchInstance {
        target_points,
        mu,
        nu,
        cost,
        ..
    } = instance;
    let eps = config.epsilon;
    let reference = sinkhorn_solve(mu.view(), nu.view(), cost, eps, 100_000, 1e-10)?.regularized_value;
    let steps = config.steps_per_epoch();
    let vector_config = SemidualConfig {
        epsilon: eps,
        learning_rate: config.vector_learning_rate,
        schedule: StepSchedule::Constant,
        batch_source: config.batch,
        batch_target: cost.ncols(),
        ..Default::default()
    };
    let score = |v: ndarray::ArrayView1<'_, f64>| semidual_objective(v, mu.view(), nu.view(), cost, eps);

    let mut rows = Vec::with_capacity(config.solvers.len() * config.epochs);
    let mut summaries = Vec::new();
    for &solver in &config.solvers {
        let mut elapsed = Duration::ZERO;
        let mut curve = Vec::with_capacity(config.epochs);
        let mut timed = |f: &mut dyn FnMut() -> Result<()>| -> Result<f64> {
            let start = Instant::now();
            f()?;
            elapsed += start.elapsed();
            Ok(elapsed.as_secs_f64())
        };
        match solver {
            BenchSolver::Sinkhorn => {
                let mut it = SinkhornIterator::new(mu.view(), nu.view(), cost.entries(), eps);
                for _ in 0..config.epochs {
                    let secs = timed(&mut || {
                        it.step();
                        Ok(())
                    })?;
                    curve.push((score(it.potentials().1)?, secs));
                }
            }
            BenchSolver::Sgd => {
                let mut s = VectorSgd::new(mu.view(), nu.view(), cost, &vector_config, config.seed)?;
                for _ in 0..config.epochs {
                    let secs = timed(&mut || {
                        (0..steps).for_each(|_| s.step());
                        Ok(())
                    })?;
                    curve.push((score(s.potential())?, secs));
                }
            }
            BenchSolver::Sag => {
                let mut s = VectorSag::new(mu.view(), nu.view(), cost, &vector_config, config.seed)?;
                for _ in 0..config.epochs {
                    let secs = timed(&mut || {
                        (0..steps).for_each(|_| s.step());
                        Ok(())
                    })?;
                    curve.push((score(s.potential())?, secs));
                }
            }
            BenchSolver::Network => {
                let mut net = Mlp::new(
                    &[config.dim, config.network_hidden, 1],
                    OutputActivation::Identity,
                    config.seed,
                )?;
                net.zero_final_layer();
                let net_config = SemidualConfig {
                    learning_rate: config.network_learning_rate,
                    ..vector_config.clone()
                };
                let mut s = NetworkSolver::new(
                    mu.view(),
                    target_points.view(),
                    nu.view(),
                    cost,
                    net,
                    &net_config,
                    config.seed,
                )?;
                for _ in 0..config.epochs {
                    let secs = timed(&mut || (0..steps).try_for_each(|_| s.step()))?;
                    curve.push((score(s.potential()?.view())?, secs));
                }
            }
        }
        if curve.iter().any(|(v, _)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{solver} objective diverged")));
        }
        summaries.push(SolverSummary {
            solver,
            final_objective: curve.last().map_or(f64::NAN, |c| c.0),
            mean_epoch_seconds: elapsed.as_secs_f64() / config.epochs as f64,
        });
        rows.extend(curve.into_iter().enumerate().map(|(e, (objective, seconds))| BenchRow {
            solver,
            epoch: e + 1,
            objective,
            seconds,
        }));
    }
    let final_quarter_spread = final_quarter_spread(&rows, config.epochs, reference);
    Ok(BenchReport {
        rows,
        summary: BenchSummary {
            reference_value: reference,
            epochs: config.epochs,
            solvers: summaries,
            final_quarter_spread,
        },
    })
}

/// Largest `(max − min) / max(|reference|, 1e-12)` across solvers, taken over
/// each epoch of the last quarter of the run.
pub fn final_quarter_spread(rows: &[BenchRow], epochs: usize, reference: f64) -> f64 {
    let first = epochs - epochs / 4;
    let scale = reference.abs().max(1e-12);
    (first.max(1)..=epochs)
        .map(|e| {
            let vals = rows.iter().filter(|r| r.epoch == e).map(|r| r.objective);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            (hi - lo) / scale
        })
        .fold(0.0, f64::max)
}

pub fn write_bench_csv(path: impl AsRef<std::path::Path>, rows: &[BenchRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.solver, r.epoch, r.objective, r.seconds));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
