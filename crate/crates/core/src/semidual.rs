//! Semi-dual entropic optimal transport.
//!
//! For a potential `v` on the target atoms the objective is
//!
//! ```text
//! H_ε(v) = Σ_i μ_i v^{c,ε}(x_i) + Σ_j ν_j v_j − ε
//! v^{c,ε}(x_i) = −ε log Σ_j ν_j exp((v_j − C_ij)/ε)      (ε > 0)
//!              = min_j C_ij − v_j                          (ε = 0)
//! ```
//!
//! which is concave, invariant to constant shifts of `v`, and at its maximum
//! equals the entropic OT value computed by Sinkhorn (including the `−ε`).
//! The potential is either a plain vector (SGD / SAG solvers) or the output
//! of an [`Mlp`] evaluated at the target features.
//!
//! Mini-batches reweigh their source atoms to total mass one, so a batch
//! estimate of the source term uses the per-atom weights `m_i` rescaled to
//! mean one over the batch.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{check_probability, CostMatrix};
use crate::nnet::{adam_step, AdamState, Direction, Mlp};
use crate::numerics::log_sum_exp;

/// SAG keeps one gradient row per source atom; beyond this it is refused.
pub const SAG_MAX_SOURCE_ATOMS: usize = 100_000;

/// Kantorovich potential on the target atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialVector(pub Array1<f64>);

impl PotentialVector {
    pub fn zeros(n: usize) -> Self {
        Self(Array1::zeros(n))
    }

    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Sgd,
    Sag,
    Network,
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "sag" => Ok(Self::Sag),
            "network" => Ok(Self::Network),
            other => Err(Error::InvalidInput(format!("unknown solver {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepSchedule {
    Constant,
    /// `lr / √t` at step `t ≥ 1`.
    InvSqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemidualConfig {
    /// Entropic regularization; `0` selects the hard-minimum c-transform,
    /// which only objective evaluation supports.
    pub epsilon: f64,
    /// Plain gradient step for the vector solvers, Adam step for the network.
    pub learning_rate: f64,
    pub schedule: StepSchedule,
    /// Ascent steps per solve.
    pub inner_steps: usize,
    pub solver_kind: SolverKind,
    pub batch_source: usize,
    pub batch_target: usize,
    /// Record the full-support objective every this many steps (0: never).
    pub trace_every: usize,
}

impl Default for SemidualConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            learning_rate: 1.0,
            schedule: StepSchedule::Constant,
            inner_steps: 1,
            solver_kind: SolverKind::Sgd,
            batch_source: 32,
            batch_target: 32,
            trace_every: 0,
        }
    }
}

impl SemidualConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "stochastic solvers need epsilon > 0, got {}",
                self.epsilon
            )));
        }
        if self.inner_steps == 0 || self.batch_source == 0 || self.batch_target == 0 {
            return Err(Error::InvalidInput(
                "inner_steps and batch sizes must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn step_size(&self, t: usize) -> f64 {
        match self.schedule {
            StepSchedule::Constant => self.learning_rate,
            StepSchedule::InvSqrt => self.learning_rate / (t as f64).sqrt(),
        }
    }
}

/// One point of a convergence trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub objective: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemidualSolution {
    pub potential: PotentialVector,
    /// Full-support objective at the returned potential.
    pub objective: f64,
    pub trace: Vec<TracePoint>,
}

#[derive(Debug, Clone)]
pub struct NetworkSolution {
    pub net: Mlp,
    pub objective: f64,
    pub trace: Vec<TracePoint>,
}

/// Smoothed c-transform of `v` at one source atom whose costs to the
/// targets are `cost_row`.
pub fn smoothed_ctransform(
    cost_row: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    nu_weights: ArrayView1<'_, f64>,
    epsilon: f64,
) -> Result<f64> {
    if cost_row.is_empty() {
        return Err(Error::InvalidInput("empty target support".into()));
    }
    if cost_row.len() != v.len() || v.len() != nu_weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "cost row {}, potential {}, target weights {}",
            cost_row.len(),
            v.len(),
            nu_weights.len()
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be >= 0, got {epsilon}")));
    }
    Ok(ctransform(cost_row, v, nu_weights, epsilon))
}

fn ctransform(
    cost_row: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    epsilon: f64,
) -> f64 {
    if epsilon == 0.0 {
        return cost_row
            .iter()
            .zip(v)
            .map(|(c, v)| c - v)
            .fold(f64::INFINITY, f64::min);
    }
    -epsilon
        * log_sum_exp(
            cost_row
                .iter()
                .zip(v.iter().zip(nu))
                .filter(|(_, (_, &w))| w > 0.0)
                .map(|(&c, (&v, &w))| w.ln() + (v - c) / epsilon),
        )
}

/// c-transform plus the Gibbs weights `χ_j ∝ ν_j exp((v_j − c_j)/ε)` that
/// form its gradient with respect to `v`.
fn ctransform_with_weights(
    cost_row: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    epsilon: f64,
    chi: &mut [f64],
) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (j, ((&c, &vj), &w)) in cost_row.iter().zip(v).zip(nu).enumerate() {
        let z = if w > 0.0 { w.ln() + (vj - c) / epsilon } else { f64::NEG_INFINITY };
        chi[j] = z;
        max = max.max(z);
    }
    let mut total = 0.0;
    for x in chi.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in chi.iter_mut() {
        *x /= total;
    }
    -epsilon * (max + total.ln())
}

fn check_shapes(
    v: ArrayView1<'_, f64>,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    cost: &CostMatrix,
) -> Result<()> {
    let (ns, nt) = cost.dim();
    if mu.len() != ns || nu.len() != nt || v.len() != nt {
        return Err(Error::DimensionMismatch(format!(
            "source weights {}, target weights {}, potential {} for a {ns}x{nt} cost",
            mu.len(),
            nu.len(),
            v.len()
        )));
    }
    if nt == 0 {
        return Err(Error::InvalidInput("empty target support".into()));
    }
    Ok(())
}

/// `H_ε(v)` over the full support. Passing a reweighed source measure as
/// `mu` gives the importance-weighted objective.
pub fn semidual_objective(
    v: ArrayView1<'_, f64>,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    cost: &CostMatrix,
    epsilon: f64,
) -> Result<f64> {
    check_shapes(v, mu, nu, cost)?;
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be >= 0, got {epsilon}")));
    }
    Ok(objective_unchecked(v, mu, nu, cost.entries(), epsilon))
}

fn objective_unchecked(
    v: ArrayView1<'_, f64>,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    cost: ArrayView2<'_, f64>,
    epsilon: f64,
) -> f64 {
    let source: f64 = cost
        .rows()
        .into_iter()
        .zip(mu)
        .filter(|(_, &m)| m > 0.0)
        .map(|(row, &m)| m * ctransform(row, v, nu, epsilon))
        .sum();
    source + nu.dot(&v) - epsilon
}

/// Exact gradient `∂H_ε/∂v_j = ν_j − Σ_i μ_i χ_ij` for `ε > 0`.
pub fn semidual_gradient(
    v: ArrayView1<'_, f64>,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    cost: &CostMatrix,
    epsilon: f64,
) -> Result<Array1<f64>> {
    check_shapes(v, mu, nu, cost)?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput("gradient needs epsilon > 0".into()));
    }
    let mut grad = nu.to_owned();
    let mut chi = vec![0.0; nu.len()];
    for (row, &m) in cost.entries().rows().into_iter().zip(mu) {
        if m > 0.0 {
            ctransform_with_weights(row, v, nu, epsilon, &mut chi);
            for (g, x) in grad.iter_mut().zip(&chi) {
                *g -= m * x;
            }
        }
    }
    Ok(grad)
}

/// Primal plan from a potential via first-order optimality:
/// `π_ij = μ_i ν_j exp((u_i + v_j − C_ij)/ε)` with `u = v^{c,ε}`. Rows sum to
/// `μ` by construction; columns match `ν` only at the optimum.
pub fn recover_plan(
    v: ArrayView1<'_, f64>,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    cost: &CostMatrix,
    epsilon: f64,
) -> Result<Array2<f64>> {
    check_shapes(v, mu, nu, cost)?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput("plan recovery needs epsilon > 0".into()));
    }
    let (ns, nt) = cost.dim();
    let mut plan = Array2::zeros((ns, nt));
    let mut chi = vec![0.0; nt];
    for (i, row) in cost.entries().rows().into_iter().enumerate() {
        ctransform_with_weights(row, v, nu, epsilon, &mut chi);
        // π_i· = μ_i χ_i· is the same expression, normalized exactly
        for (j, x) in chi.iter().enumerate() {
            plan[[i, j]] = mu[i] * x;
        }
    }
    Ok(plan)
}

/// Cycles through shuffled permutations of `0..n` in chunks of `batch`.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, batch: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
            rng,
        }
    }

    fn full(&self) -> bool {
        self.batch == self.order.len()
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        if self.full() {
            return self.order.clone();
        }
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Batch weights `μ_i / Σ_{B} μ`; `None` when the batch carries no mass.
pub(crate) fn batch_weights(mu: ArrayView1<'_, f64>, batch: &[usize]) -> Option<Vec<f64>> {
    let total: f64 = batch.iter().map(|&i| mu[i]).sum();
    (total > 0.0).then(|| batch.iter().map(|&i| mu[i] / total).collect())
}

fn validate_problem(
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    cost: &CostMatrix,
    config: &SemidualConfig,
) -> Result<()> {
    config.validate()?;
    let (ns, nt) = cost.dim();
    if mu.len() != ns || nu.len() != nt {
        return Err(Error::DimensionMismatch(format!(
            "marginals of length {}/{} for a {ns}x{nt} cost",
            mu.len(),
            nu.len()
        )));
    }
    check_probability(mu, "source marginal")?;
    check_probability(nu, "target marginal")
}

struct Tracer {
    every: usize,
    start: Instant,
    points: Vec<TracePoint>,
}

impl Tracer {
    fn new(every: usize) -> Self {
        Self {
            every,
            start: Instant::now(),
            points: Vec::new(),
        }
    }

    fn due(&self, step: usize) -> bool {
        self.every > 0 && step.is_multiple_of(self.every)
    }

    fn record(&mut self, step: usize, objective: f64) {
        self.points.push(TracePoint {
            step,
            objective,
            seconds: self.start.elapsed().as_secs_f64(),
        });
    }
}

/// Stochastic gradient ascent on `H_ε` over a potential vector, starting at
/// `v = 0`. Each step samples `batch_source` source atoms (shuffled passes,
/// no replacement within a pass) and uses the full target support.
pub fn solve_vector_sgd(
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    cost: &CostMatrix,
    config: &SemidualConfig,
    seed: u64,
) -> Result<SemidualSolution> {
    let mut solver = VectorSgd::new(mu, nu, cost, config, seed)?;
    let mut tracer = Tracer::new(config.trace_every);
    for step in 0..config.inner_steps {
        if tracer.due(step) {
            tracer.record(step, solver.objective());
        }
        solver.step();
    }
    finish_vector(solver.v, mu, nu, cost, config, tracer)
}

fn finish_vector(
    v: Array1<f64>,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    cost: &CostMatrix,
    config: &SemidualConfig,
    mut tracer: Tracer,
) -> Result<SemidualSolution> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("potential diverged; lower the learning rate".into()));
    }
    let objective = objective_unchecked(v.view(), mu, nu, cost.entries(), config.epsilon);
    if tracer.every > 0 {
        tracer.record(config.inner_steps, objective);
    }
    Ok(SemidualSolution {
        potential: PotentialVector(v),
        objective,
        trace: tracer.points,
    })
}

/// Stepwise SGD state; the benchmark drives it epoch by epoch.
pub struct VectorSgd<'a> {
    mu: ArrayView1<'a, f64>,
    nu: ArrayView1<'a, f64>,
    cost: &'a CostMatrix,
    config: SemidualConfig,
    sampler: BatchSampler,
    v: Array1<f64>,
    chi: Vec<f64>,
    t: usize,
}

impl<'a> VectorSgd<'a> {
    pub fn new(
        mu: ArrayView1<'a, f64>,
        nu: ArrayView1<'a, f64>,
        cost: &'a CostMatrix,
        config: &SemidualConfig,
        seed: u64,
    ) -> Result<Self> {
        validate_problem(mu, nu, cost, config)?;
        let (ns, nt) = cost.dim();
        Ok(Self {
            mu,
            nu,
            cost,
            config: config.clone(),
            sampler: BatchSampler::new(ns, config.batch_source, ChaCha8Rng::seed_from_u64(seed)),
            v: Array1::zeros(nt),
            chi: vec![0.0; nt],
            t: 0,
        })
    }

    pub fn step(&mut self) {
        self.t += 1;
        let batch = self.sampler.next_batch();
        let Some(w) = batch_weights(self.mu, &batch) else {
            return;
        };
        let mut grad = self.nu.to_owned();
        for (&i, &wi) in batch.iter().zip(&w) {
            if wi > 0.0 {
                ctransform_with_weights(self.cost.row(i), self.v.view(), self.nu, self.config.epsilon, &mut self.chi);
                for (g, x) in grad.iter_mut().zip(&self.chi) {
                    *g -= wi * x;
                }
            }
        }
        let lr = self.config.step_size(self.t);
        self.v.scaled_add(lr, &grad);
    }

    pub fn objective(&self) -> f64 {
        objective_unchecked(self.v.view(), self.mu, self.nu, self.cost.entries(), self.config.epsilon)
    }

    pub fn potential(&self) -> ArrayView1<'_, f64> {
        self.v.view()
    }
}

/// Stochastic averaged gradient ascent: one stored Gibbs row per source
/// atom, refreshed when the atom is sampled; the step uses the average of
/// all stored rows seen so far.
pub fn solve_vector_sag(
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    cost: &CostMatrix,
    config: &SemidualConfig,
    seed: u64,
) -> Result<SemidualSolution> {
    let mut solver = VectorSag::new(mu, nu, cost, config, seed)?;
    let mut tracer = Tracer::new(config.trace_every);
    for step in 0..config.inner_steps {
        if tracer.due(step) {
            tracer.record(step, solver.objective());
        }
        solver.step();
    }
    finish_vector(solver.v, mu, nu, cost, config, tracer)
}

pub struct VectorSag<'a> {
    mu: ArrayView1<'a, f64>,
    nu: ArrayView1<'a, f64>,
    cost: &'a CostMatrix,
    config: SemidualConfig,
    sampler: BatchSampler,
    v: Array1<f64>,
    /// Last Gibbs row computed for each source atom.
    memory: Array2<f64>,
    seen: Vec<bool>,
    /// `Σ_{seen} μ_i χ_i`
    running: Array1<f64>,
    seen_mass: f64,
    chi: Vec<f64>,
    t: usize,
}

impl<'a> VectorSag<'a> {
    pub fn new(
        mu: ArrayView1<'a, f64>,
        nu: ArrayView1<'a, f64>,
        cost: &'a CostMatrix,
        config: &SemidualConfig,
        seed: u64,
    ) -> Result<Self> {
        validate_problem(mu, nu, cost, config)?;
        let (ns, nt) = cost.dim();
        if ns > SAG_MAX_SOURCE_ATOMS {
            return Err(Error::TooLarge(format!(
                "SAG stores one row per source atom; {ns} > {SAG_MAX_SOURCE_ATOMS}, use SGD"
            )));
        }
        Ok(Self {
            mu,
            nu,
            cost,
            config: config.clone(),
            sampler: BatchSampler::new(ns, config.batch_source, ChaCha8Rng::seed_from_u64(seed)),
            v: Array1::zeros(nt),
            memory: Array2::zeros((ns, nt)),
            seen: vec![false; ns],
            running: Array1::zeros(nt),
            seen_mass: 0.0,
            chi: vec![0.0; nt],
            t: 0,
        })
    }

    pub fn step(&mut self) {
        self.t += 1;
        for i in self.sampler.next_batch() {
            let m = self.mu[i];
            if m == 0.0 {
                continue;
            }
            ctransform_with_weights(self.cost.row(i), self.v.view(), self.nu, self.config.epsilon, &mut self.chi);
            let mut stored = self.memory.row_mut(i);
            for ((r, s), &x) in self.running.iter_mut().zip(stored.iter_mut()).zip(&self.chi) {
                *r += m * (x - *s);
                *s = x;
            }
            if !self.seen[i] {
                self.seen[i] = true;
                self.seen_mass += m;
            }
        }
        if self.seen_mass > 0.0 {
            let lr = self.config.step_size(self.t);
            let grad = &self.nu - &(&self.running / self.seen_mass);
            self.v.scaled_add(lr, &grad);
        }
    }

    pub fn objective(&self) -> f64 {
        objective_unchecked(self.v.view(), self.mu, self.nu, self.cost.entries(), self.config.epsilon)
    }

    pub fn potential(&self) -> ArrayView1<'_, f64> {
        self.v.view()
    }
}

/// Gradient of the batch semi-dual estimate with respect to the potential
/// values at the batch targets, and the estimate itself.
///
/// `weights_s` / `weights_t` are the batch weights (each summing to one) and
/// `cost` is the `b_s × b_t` batch cost. Shared by the network solver and the
/// adaptation loop.
pub(crate) fn batch_semidual(
    g_values: ArrayView1<'_, f64>,
    weights_s: &[f64],
    weights_t: ArrayView1<'_, f64>,
    cost: ArrayView2<'_, f64>,
    epsilon: f64,
) -> BatchSemidual {
    let nt = g_values.len();
    let mut chi = Array2::zeros(cost.raw_dim());
    let mut grad_g = weights_t.to_owned();
    let mut value = 0.0;
    let mut row_buf = vec![0.0; nt];
    for (i, row) in cost.rows().into_iter().enumerate() {
        let w = weights_s[i];
        let ct = ctransform_with_weights(row, g_values, weights_t, epsilon, &mut row_buf);
        value += w * ct;
        for (j, &x) in row_buf.iter().enumerate() {
            chi[[i, j]] = x;
            grad_g[j] -= w * x;
        }
    }
    value += weights_t.dot(&g_values) - epsilon;
    BatchSemidual { value, grad_g, chi }
}

pub(crate) struct BatchSemidual {
    pub value: f64,
    /// `∂H/∂g(t_j)`
    pub grad_g: Array1<f64>,
    /// Gibbs weights; `∂H/∂C_ij = w_i χ_ij`.
    pub chi: Array2<f64>,
}

/// Ascends `H_ε` over the parameters of a scalar potential network `g`
/// evaluated at the target features, with Adam. Only `g` is trained; the
/// cost and the features are constants here.
pub fn solve_network(
    mu: ArrayView1<'_, f64>,
    target_points: ArrayView2<'_, f64>,
    nu: ArrayView1<'_, f64>,
    cost: &CostMatrix,
    potential_net: Mlp,
    config: &SemidualConfig,
    seed: u64,
) -> Result<NetworkSolution> {
    let mut solver = NetworkSolver::new(mu, target_points, nu, cost, potential_net, config, seed)?;
    let mut tracer = Tracer::new(config.trace_every);
    for step in 0..config.inner_steps {
        if tracer.due(step) {
            tracer.record(step, solver.objective()?);
        }
        solver.step()?;
    }
    let objective = solver.objective()?;
    if !objective.is_finite() {
        return Err(Error::NonFinite("network potential diverged".into()));
    }
    if tracer.every > 0 {
        tracer.record(config.inner_steps, objective);
    }
    Ok(NetworkSolution {
        net: solver.net,
        objective,
        trace: tracer.points,
    })
}

pub struct NetworkSolver<'a> {
    mu: ArrayView1<'a, f64>,
    target_points: ArrayView2<'a, f64>,
    nu: ArrayView1<'a, f64>,
    cost: &'a CostMatrix,
    net: Mlp,
    adam: AdamState,
    config: SemidualConfig,
    source_sampler: BatchSampler,
    target_sampler: BatchSampler,
    t: usize,
}

impl<'a> NetworkSolver<'a> {
    pub fn new(
        mu: ArrayView1<'a, f64>,
        target_points: ArrayView2<'a, f64>,
        nu: ArrayView1<'a, f64>,
        cost: &'a CostMatrix,
        net: Mlp,
        config: &SemidualConfig,
        seed: u64,
    ) -> Result<Self> {
        validate_problem(mu, nu, cost, config)?;
        if net.output_dim() != 1 {
            return Err(Error::InvalidInput(format!(
                "potential network must output a scalar, got {} outputs",
                net.output_dim()
            )));
        }
        if target_points.nrows() != cost.ncols() || target_points.ncols() != net.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} target points for {} cost columns and network input {}",
                target_points.nrows(),
                target_points.ncols(),
                cost.ncols(),
                net.input_dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source_rng = ChaCha8Rng::from_rng(&mut rng);
        let target_rng = ChaCha8Rng::from_rng(&mut rng);
        let adam = AdamState::new(&net, config.learning_rate);
        Ok(Self {
            mu,
            target_points,
            nu,
            cost,
            net,
            adam,
            config: config.clone(),
            source_sampler: BatchSampler::new(cost.nrows(), config.batch_source, source_rng),
            target_sampler: BatchSampler::new(cost.ncols(), config.batch_target, target_rng),
            t: 0,
        })
    }

    pub fn step(&mut self) -> Result<()> {
        self.t += 1;
        self.adam.learning_rate = self.config.step_size(self.t);
        let sb = self.source_sampler.next_batch();
        let tb = self.target_sampler.next_batch();
        let (Some(ws), Some(wt)) = (batch_weights(self.mu, &sb), batch_weights(self.nu, &tb)) else {
            return Ok(());
        };
        let pts = self.target_points.select(Axis(0), &tb);
        let (out, cache) = self.net.forward(pts.view())?;
        let g_values = out.column(0);
        let sub_cost = self.cost.entries().select(Axis(0), &sb).select(Axis(1), &tb);
        let est = batch_semidual(g_values, &ws, Array1::from(wt).view(), sub_cost.view(), self.config.epsilon);
        let upstream = est.grad_g.insert_axis(Axis(1));
        let grads = self.net.backward(&cache, upstream.view())?;
        adam_step(&mut self.net, &grads, &mut self.adam, Direction::Maximize)?;
        Ok(())
    }

    /// Potential values at every target atom.
    pub fn potential(&self) -> Result<Array1<f64>> {
        Ok(self.net.predict(self.target_points)?.column(0).to_owned())
    }

    pub fn objective(&self) -> Result<f64> {
        let v = self.potential()?;
        Ok(objective_unchecked(v.view(), self.mu, self.nu, self.cost.entries(), self.config.epsilon))
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }
}
