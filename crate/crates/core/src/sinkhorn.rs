//! Log-domain Sinkhorn iterations for entropy-regularized optimal transport.
//!
//! The plan is kept in Gibbs form
//! `π_ij = μ_i ν_j exp((u_i + v_j − C_ij)/ε)` and the potentials are updated
//! by alternate smoothed c-transforms, so `ε` can go as low as a few
//! thousandths without under- or overflow. The entropy term is
//! `R(π) = Σ π_ij (ln(π_ij / (μ_i ν_j)) − 1)`, which makes the value of the
//! independent coupling under a zero cost equal to `−ε`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::measures::{check_probability, CostMatrix};
use crate::numerics::log_sum_exp;

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornResult {
    pub plan: Array2<f64>,
    pub dual_u: Array1<f64>,
    pub dual_v: Array1<f64>,
    /// `⟨π, C⟩`
    pub transport_cost: f64,
    /// `⟨π, C⟩ + ε R(π)`
    pub regularized_value: f64,
    pub iterations: usize,
    pub marginal_error: f64,
    pub converged: bool,
    /// Marginal error after each iteration.
    pub error_trace: Vec<f64>,
}

/// Max-norm deviation of the plan's row and column sums from the marginals.
pub fn plan_marginal_error(
    plan: ArrayView2<'_, f64>,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
) -> f64 {
    let rows = plan
        .rows()
        .into_iter()
        .zip(mu)
        .map(|(r, m)| (r.sum() - m).abs());
    let cols = plan
        .columns()
        .into_iter()
        .zip(nu)
        .map(|(c, n)| (c.sum() - n).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// Dual objective `Σ μ_i u_i + Σ ν_j v_j − ε Σ μ_i ν_j exp((u_i + v_j − C_ij)/ε)`.
pub fn dual_objective(
    u: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    cost: &CostMatrix,
    epsilon: f64,
) -> f64 {
    let linear = mu.dot(&u) + nu.dot(&v);
    let mut mass = 0.0;
    for (i, row) in cost.entries().rows().into_iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            mass += mu[i] * nu[j] * ((u[i] + v[j] - c) / epsilon).exp();
        }
    }
    linear - epsilon * mass
}

/// Stateful iteration over the support of both marginals. Exposed so that
/// callers (the solver benchmark) can observe every iteration.
#[derive(Debug, Clone)]
pub struct SinkhornIterator {
    log_mu: Array1<f64>,
    log_nu: Array1<f64>,
    cost: Array2<f64>,
    epsilon: f64,
    u: Array1<f64>,
    v: Array1<f64>,
    iterations: usize,
}

impl SinkhornIterator {
    /// Both marginals must be strictly positive here; see [`sinkhorn_solve`]
    /// for the handling of empty atoms.
    pub fn new(
        mu: ArrayView1<'_, f64>,
        nu: ArrayView1<'_, f64>,
        cost: ArrayView2<'_, f64>,
        epsilon: f64,
    ) -> Self {
        Self {
            log_mu: mu.mapv(f64::ln),
            log_nu: nu.mapv(f64::ln),
            cost: cost.to_owned(),
            epsilon,
            u: Array1::zeros(mu.len()),
            v: Array1::zeros(nu.len()),
            iterations: 0,
        }
    }

    /// One full sweep: `u` then `v`. Afterwards columns match exactly.
    pub fn step(&mut self) {
        let eps = self.epsilon;
        for (i, row) in self.cost.rows().into_iter().enumerate() {
            let lse = log_sum_exp(
                row.iter()
                    .zip(self.v.iter().zip(&self.log_nu))
                    .map(|(&c, (&v, &ln))| ln + (v - c) / eps),
            );
            self.u[i] = -eps * lse;
        }
        for (j, col) in self.cost.columns().into_iter().enumerate() {
            let lse = log_sum_exp(
                col.iter()
                    .zip(self.u.iter().zip(&self.log_mu))
                    .map(|(&c, (&u, &lm))| lm + (u - c) / eps),
            );
            self.v[j] = -eps * lse;
        }
        self.iterations += 1;
    }

    pub fn plan(&self) -> Array2<f64> {
        let eps = self.epsilon;
        Array2::from_shape_fn(self.cost.dim(), |(i, j)| {
            (self.log_mu[i] + self.log_nu[j] + (self.u[i] + self.v[j] - self.cost[[i, j]]) / eps)
                .exp()
        })
    }

    pub fn marginal_error(&self) -> f64 {
        let mu = self.log_mu.mapv(f64::exp);
        let nu = self.log_nu.mapv(f64::exp);
        plan_marginal_error(self.plan().view(), mu.view(), nu.view())
    }

    /// Current dual objective, which increases towards the regularized value.
    pub fn dual_value(&self) -> f64 {
        let eps = self.epsilon;
        let mu = self.log_mu.mapv(f64::exp);
        let nu = self.log_nu.mapv(f64::exp);
        let mass = self.plan().sum();
        mu.dot(&self.u) + nu.dot(&self.v) - eps * mass
    }

    pub fn potentials(&self) -> (ArrayView1<'_, f64>, ArrayView1<'_, f64>) {
        (self.u.view(), self.v.view())
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }
}

/// Solves the entropic problem `min ⟨π,C⟩ + ε R(π)` by log-domain Sinkhorn.
///
/// Stops once the marginal max-norm error is at most `tol`, or after
/// `max_iter` sweeps; `converged` tells the two apart. Atoms with zero mass
/// are removed before iterating and get zero rows/columns in the plan; their
/// potentials are filled by the c-transform so the Gibbs form still holds.
pub fn sinkhorn_solve(
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    cost: &CostMatrix,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SinkhornResult> {
    let (ns, nt) = cost.dim();
    if mu.len() != ns || nu.len() != nt {
        return Err(Error::DimensionMismatch(format!(
            "marginals of length {}/{} for a {ns}x{nt} cost",
            mu.len(),
            nu.len()
        )));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    check_probability(mu, "source marginal")?;
    check_probability(nu, "target marginal")?;

    let rows: Vec<usize> = (0..ns).filter(|&i| mu[i] > 0.0).collect();
    let cols: Vec<usize> = (0..nt).filter(|&j| nu[j] > 0.0).collect();
    let sub_mu: Array1<f64> = rows.iter().map(|&i| mu[i]).collect();
    let sub_nu: Array1<f64> = cols.iter().map(|&j| nu[j]).collect();
    let sub_cost = Array2::from_shape_fn((rows.len(), cols.len()), |(a, b)| cost[(rows[a], cols[b])]);

    let mut it = SinkhornIterator::new(sub_mu.view(), sub_nu.view(), sub_cost.view(), epsilon);
    let mut error_trace = Vec::new();
    let mut err = f64::INFINITY;
    while it.iterations() < max_iter {
        it.step();
        err = it.marginal_error();
        error_trace.push(err);
        if !err.is_finite() {
            return Err(Error::NonFinite("Sinkhorn marginal error".into()));
        }
        if err <= tol {
            break;
        }
    }

    let (su, sv) = it.potentials();
    let mut v = Array1::zeros(nt);
    for (b, &j) in cols.iter().enumerate() {
        v[j] = sv[b];
    }
    let mut u = Array1::zeros(ns);
    for (a, &i) in rows.iter().enumerate() {
        u[i] = su[a];
    }
    // empty atoms: c-transforms against the opposite potential
    for i in (0..ns).filter(|&i| mu[i] == 0.0) {
        u[i] = -epsilon
            * log_sum_exp(cols.iter().map(|&j| nu[j].ln() + (v[j] - cost[(i, j)]) / epsilon));
    }
    for j in (0..nt).filter(|&j| nu[j] == 0.0) {
        v[j] = -epsilon
            * log_sum_exp(rows.iter().map(|&i| mu[i].ln() + (u[i] - cost[(i, j)]) / epsilon));
    }

    let sub_plan = it.plan();
    let mut plan = Array2::zeros((ns, nt));
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            plan[[i, j]] = sub_plan[[a, b]];
        }
    }

    let mut transport_cost = 0.0;
    let mut regularized_value = 0.0;
    for ((i, j), &p) in plan.indexed_iter() {
        if p > 0.0 {
            let c = cost[(i, j)];
            // ε ln(π_ij / (μ_i ν_j)) = u_i + v_j − C_ij in Gibbs form
            transport_cost += p * c;
            regularized_value += p * (u[i] + v[j] - epsilon);
        }
    }

    Ok(SinkhornResult {
        plan,
        dual_u: u,
        dual_v: v,
        transport_cost,
        regularized_value,
        iterations: it.iterations(),
        marginal_error: err,
        converged: err <= tol,
        error_trace,
    })
}
