//! Brute-force exact optimal transport for tiny instances.
//!
//! These exist to check the iterative solvers. Two independent routes are
//! provided so that each one can validate the other: exhaustive permutation
//! enumeration for uniform square problems, and a transportation simplex
//! (north-west corner start, potential-based pricing, cycle pivots) for
//! arbitrary marginals.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::measures::{check_probability, CostMatrix};

pub const MAX_PERMUTATION_SIZE: usize = 8;
pub const MAX_SIMPLEX_CELLS: usize = 64;

/// An optimal coupling and its total cost.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactSolution {
    pub value: f64,
    pub plan: Array2<f64>,
}

/// Rearranges `perm` into the next permutation in lexicographic order.
fn next_permutation(perm: &mut [usize]) -> bool {
    let n = perm.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && perm[i - 1] >= perm[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while perm[j] <= perm[i - 1] {
        j -= 1;
    }
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

/// Exact OT between two uniform measures of equal size `n ≤ 8`.
///
/// The optimum of the assignment polytope sits at a permutation, so every
/// permutation is enumerated. Ties go to the lexicographically first one.
pub fn exact_ot_uniform_square(cost: &CostMatrix) -> Result<ExactSolution> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(Error::DimensionMismatch(format!("{n}x{m} cost is not square")));
    }
    if n == 0 {
        return Err(Error::InvalidInput("empty cost matrix".into()));
    }
    if n > MAX_PERMUTATION_SIZE {
        return Err(Error::TooLarge(format!(
            "permutation oracle limited to n <= {MAX_PERMUTATION_SIZE}, got {n}"
        )));
    }

    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_sum = f64::INFINITY;
    loop {
        let s: f64 = perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
        if s < best_sum {
            best_sum = s;
            best.copy_from_slice(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }

    let mass = 1.0 / n as f64;
    let mut plan = Array2::zeros((n, n));
    for (i, &j) in best.iter().enumerate() {
        plan[[i, j]] = mass;
    }
    Ok(ExactSolution {
        value: best_sum * mass,
        plan,
    })
}

const SIMPLEX_EPS: f64 = 1e-12;

/// Exact OT for arbitrary marginals on instances with `n_s · n_t ≤ 64`.
pub fn exact_ot_general(
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    cost: &CostMatrix,
) -> Result<ExactSolution> {
    let (ns, nt) = cost.dim();
    if mu.len() != ns || nu.len() != nt {
        return Err(Error::DimensionMismatch(format!(
            "marginals of length {}/{} for a {ns}x{nt} cost",
            mu.len(),
            nu.len()
        )));
    }
    if ns * nt > MAX_SIMPLEX_CELLS {
        return Err(Error::TooLarge(format!(
            "transportation oracle limited to {MAX_SIMPLEX_CELLS} cells, got {ns}x{nt}"
        )));
    }
    check_probability(mu, "source marginal")?;
    check_probability(nu, "target marginal")?;

    let mut simplex = Transportation::north_west(mu, nu, cost);
    simplex.optimize()?;

    let plan = simplex.flow;
    let value = plan.iter().zip(cost.entries()).map(|(p, c)| p * c).sum();
    Ok(ExactSolution { value, plan })
}

struct Transportation<'a> {
    cost: &'a CostMatrix,
    flow: Array2<f64>,
    basic: Array2<bool>,
}

impl<'a> Transportation<'a> {
    /// North-west corner start. Moving down whenever the row is exhausted
    /// (and right otherwise) walks a staircase of exactly `m + n − 1` cells,
    /// so the basis is a spanning tree even when some allocations are zero.
    fn north_west(mu: ArrayView1<'_, f64>, nu: ArrayView1<'_, f64>, cost: &'a CostMatrix) -> Self {
        let (m, n) = cost.dim();
        let mut supply = mu.to_vec();
        let mut demand = nu.to_vec();
        let mut flow = Array2::zeros((m, n));
        let mut basic = Array2::from_elem((m, n), false);
        let (mut i, mut j) = (0, 0);
        loop {
            let x = supply[i].min(demand[j]);
            flow[[i, j]] = x;
            basic[[i, j]] = true;
            supply[i] -= x;
            demand[j] -= x;
            if i == m - 1 && j == n - 1 {
                break;
            }
            let row_done = supply[i] <= demand[j];
            if j == n - 1 || (row_done && i < m - 1) {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self { cost, flow, basic }
    }

    #[allow(clippy::needless_range_loop)]
    fn potentials(&self) -> (Vec<f64>, Vec<f64>) {
        let (m, n) = self.flow.dim();
        let mut u = vec![f64::NAN; m];
        let mut v = vec![f64::NAN; n];
        u[0] = 0.0;
        // nodes 0..m are rows, m..m+n columns
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            if node < m {
                let i = node;
                for j in 0..n {
                    if self.basic[[i, j]] && v[j].is_nan() {
                        v[j] = self.cost[(i, j)] - u[i];
                        queue.push_back(m + j);
                    }
                }
            } else {
                let j = node - m;
                for i in 0..m {
                    if self.basic[[i, j]] && u[i].is_nan() {
                        u[i] = self.cost[(i, j)] - v[j];
                        queue.push_back(i);
                    }
                }
            }
        }
        (u, v)
    }

    /// Path of basic cells from row node `from_row` to column node `to_col`
    /// in the basis tree, as an alternating list of cells.
    fn tree_path(&self, from_row: usize, to_col: usize) -> Vec<(usize, usize)> {
        let (m, n) = self.flow.dim();
        let mut parent = vec![usize::MAX; m + n];
        parent[from_row] = from_row;
        let mut queue = VecDeque::from([from_row]);
        while let Some(node) = queue.pop_front() {
            if node == m + to_col {
                break;
            }
            let neighbours: Vec<usize> = if node < m {
                (0..n).filter(|&j| self.basic[[node, j]]).map(|j| m + j).collect()
            } else {
                (0..m).filter(|&i| self.basic[[i, node - m]]).collect()
            };
            for nb in neighbours {
                if parent[nb] == usize::MAX {
                    parent[nb] = node;
                    queue.push_back(nb);
                }
            }
        }
        let mut cells = Vec::new();
        let mut node = m + to_col;
        while node != from_row {
            let p = parent[node];
            let cell = if node < m { (node, p - m) } else { (p, node - m) };
            cells.push(cell);
            node = p;
        }
        cells.reverse();
        cells
    }

    fn optimize(&mut self) -> Result<()> {
        let (m, n) = self.flow.dim();
        let max_pivots = 50 * (m + n) * m * n;
        for _ in 0..max_pivots {
            let (u, v) = self.potentials();
            // Bland's rule: first nonbasic cell with negative reduced cost
            let entering = (0..m)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .find(|&(i, j)| {
                    !self.basic[[i, j]] && self.cost[(i, j)] - u[i] - v[j] < -SIMPLEX_EPS
                });
            let Some((ei, ej)) = entering else {
                return Ok(());
            };

            // cycle: entering cell (+), then the tree path from row ei to
            // column ej, alternating −, +, −, ...
            let path = self.tree_path(ei, ej);
            let minus: Vec<(usize, usize)> = path.iter().copied().step_by(2).collect();
            let plus: Vec<(usize, usize)> = path.iter().copied().skip(1).step_by(2).collect();
            let (leave, theta) = minus
                .iter()
                .map(|&c| (c, self.flow[c]))
                .fold(None, |best: Option<((usize, usize), f64)>, (c, x)| match best {
                    Some((_, bx)) if bx <= x => best,
                    _ => Some((c, x)),
                })
                .expect("cycle has at least one decreasing cell");

            self.flow[[ei, ej]] += theta;
            for &c in &plus {
                self.flow[c] += theta;
            }
            for &c in &minus {
                self.flow[c] = (self.flow[c] - theta).max(0.0);
            }
            self.flow[leave] = 0.0;
            self.basic[[ei, ej]] = true;
            self.basic[leave] = false;
        }
        Err(Error::InvalidInput(
            "transportation simplex did not terminate".into(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cost(entries: Array2<f64>) -> CostMatrix {
        CostMatrix::new(entries).unwrap()
    }

    fn random_cost(rng: &mut ChaCha8Rng, m: usize, n: usize) -> CostMatrix {
        cost(Array2::from_shape_fn((m, n), |_| rng.random_range(0.0..5.0)))
    }

    fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
        let w: Array1<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        &w / w.sum()
    }

    fn uniform(n: usize) -> Array1<f64> {
        Array1::from_elem(n, 1.0 / n as f64)
    }

    /// Independent enumeration: n! sums written out with plain recursion.
    fn brute_min_assignment(c: &CostMatrix) -> f64 {
        fn rec(c: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let n = used.len();
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(c, row + 1, used, acc + c[(row, j)], best);
                    used[j] = false;
                }
            }
        }
        let n = c.nrows();
        let mut best = f64::INFINITY;
        rec(c, 0, &mut vec![false; n], 0.0, &mut best);
        best / n as f64
    }

    fn check_feasible(sol: &ExactSolution, mu: &Array1<f64>, nu: &Array1<f64>, c: &CostMatrix) {
        assert!(sol.plan.iter().all(|&p| p >= 0.0));
        for (i, row) in sol.plan.rows().into_iter().enumerate() {
            assert!((row.sum() - mu[i]).abs() < 1e-9);
        }
        for (j, col) in sol.plan.columns().into_iter().enumerate() {
            assert!((col.sum() - nu[j]).abs() < 1e-9);
        }
        let v: f64 = sol.plan.iter().zip(c.entries()).map(|(p, c)| p * c).sum();
        assert!((v - sol.value).abs() < 1e-9);
    }

    #[test]
    fn permutation_zero_diagonal() {
        let sol = exact_ot_uniform_square(&cost(array![[0.0, 1.0], [1.0, 0.0]])).unwrap();
        assert_eq!(sol.value, 0.0);
        assert_eq!(sol.plan, array![[0.5, 0.0], [0.0, 0.5]]);
    }

    #[test]
    fn permutation_constant_cost_breaks_ties_lexicographically() {
        let sol = exact_ot_uniform_square(&cost(Array2::ones((3, 3)))).unwrap();
        assert!((sol.value - 1.0).abs() < 1e-15);
        let third = 1.0 / 3.0;
        assert_eq!(sol.plan, Array2::from_diag(&Array1::from_elem(3, third)));
    }

    #[test]
    fn permutation_matches_brute_force_5x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let c = random_cost(&mut rng, 5, 5);
        let sol = exact_ot_uniform_square(&c).unwrap();
        assert!((sol.value - brute_min_assignment(&c)).abs() < 1e-12);
        check_feasible(&sol, &uniform(5), &uniform(5), &c);
    }

    #[test]
    fn permutation_size_limit() {
        let c = cost(Array2::zeros((9, 9)));
        assert!(matches!(exact_ot_uniform_square(&c), Err(Error::TooLarge(_))));
    }

    #[test]
    fn general_single_atoms() {
        let c = cost(array![[2.5]]);
        let sol = exact_ot_general(array![1.0].view(), array![1.0].view(), &c).unwrap();
        assert_eq!(sol.plan, array![[1.0]]);
        assert_eq!(sol.value, 2.5);
    }

    #[test]
    fn general_only_feasible_plan() {
        let c = cost(array![[2.0], [4.0]]);
        let sol = exact_ot_general(array![0.5, 0.5].view(), array![1.0].view(), &c).unwrap();
        assert_eq!(sol.plan, array![[0.5], [0.5]]);
        assert!((sol.value - 3.0).abs() < 1e-15);
    }

    #[test]
    fn general_size_limit() {
        let c = cost(Array2::zeros((5, 13)));
        let err = exact_ot_general(uniform(5).view(), uniform(13).view(), &c);
        assert!(matches!(err, Err(Error::TooLarge(_))));
    }

    #[test]
    fn general_random_nonuniform_is_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let c = random_cost(&mut rng, 4, 6);
            let mu = random_simplex(&mut rng, 4);
            let nu = random_simplex(&mut rng, 6);
            let sol = exact_ot_general(mu.view(), nu.view(), &c).unwrap();
            check_feasible(&sol, &mu, &nu, &c);
            // complementary slackness: there exist potentials with
            // u_i + v_j <= C_ij everywhere and equality on the support
            let mut simplex = Transportation::north_west(mu.view(), nu.view(), &c);
            simplex.optimize().unwrap();
            let (u, v) = simplex.potentials();
            for i in 0..4 {
                for j in 0..6 {
                    assert!(c[(i, j)] - u[i] - v[j] >= -1e-9);
                }
            }
            let dual: f64 = mu.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
                + nu.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            assert!((dual - sol.value).abs() < 1e-9);
        }
    }

    #[test]
    fn oracles_agree_on_uniform_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 1..=6 {
            for _ in 0..5 {
                let c = random_cost(&mut rng, n, n);
                let a = exact_ot_uniform_square(&c).unwrap();
                let b = exact_ot_general(uniform(n).view(), uniform(n).view(), &c).unwrap();
                assert!((a.value - b.value).abs() < 1e-9, "n={n}: {} vs {}", a.value, b.value);
            }
        }
    }

    #[test]
    fn next_permutation_enumerates_all_in_order() {
        let mut p = vec![0, 1, 2, 3];
        let mut seen = vec![p.clone()];
        while next_permutation(&mut p) {
            assert!(p > *seen.last().unwrap());
            seen.push(p.clone());
        }
        assert_eq!(seen.len(), 24);
    }
}
