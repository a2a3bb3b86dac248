//! Discrete probability measures over feature points, pairwise cost matrices
//! and class-conditional reweighting of labeled measures.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Absolute tolerance on the weight sum of a valid measure.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Weight sums off by less than this are silently renormalized; larger
/// deviations are rejected.
pub const RENORMALIZE_TOL: f64 = 1e-6;

/// Above this many entries the cost uses the expanded norm form.
const EXPANDED_COST_THRESHOLD: usize = 10_000;

/// A weighted point cloud: `n` atoms in `d` dimensions with probability masses.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    points: Array2<f64>,
    weights: Array1<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        let (n, d) = points.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidInput(format!(
                "measure needs at least one atom and one feature, got {n}x{d}"
            )));
        }
        if weights.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {n} atoms",
                weights.len()
            )));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("measure points".into()));
        }
        let weights = normalized_probability(weights, "measure weights")?;
        Ok(Self { points, weights })
    }

    /// Uniform weights `1/n` on the given points.
    pub fn uniform(points: Array2<f64>) -> Result<Self> {
        let n = points.nrows();
        if n == 0 {
            return Err(Error::InvalidInput("empty point set".into()));
        }
        Self::new(points, Array1::from_elem(n, 1.0 / n as f64))
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Same points, new weights.
    pub fn with_weights(&self, weights: Array1<f64>) -> Result<Self> {
        Self::new(self.points.clone(), weights)
    }
}

/// Shorthand for [`DiscreteMeasure::uniform`].
pub fn uniform_measure(points: Array2<f64>) -> Result<DiscreteMeasure> {
    DiscreteMeasure::uniform(points)
}

/// Checks that `weights` is a probability vector, renormalizing small drift.
pub fn normalized_probability(mut weights: Array1<f64>, what: &str) -> Result<Array1<f64>> {
    if weights.is_empty() {
        return Err(Error::InvalidInput(format!("{what}: empty")));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("{what}: {w}")));
    }
    if let Some(w) = weights.iter().find(|w| **w < 0.0) {
        return Err(Error::InvalidInput(format!("{what}: negative weight {w}")));
    }
    let total = weights.sum();
    let dev = (total - 1.0).abs();
    if dev > RENORMALIZE_TOL {
        return Err(Error::InvalidInput(format!(
            "{what}: weights sum to {total}, not 1"
        )));
    }
    if dev > 0.0 {
        weights /= total;
    }
    Ok(weights)
}

/// Validates a probability vector without copying.
pub(crate) fn check_probability(weights: ArrayView1<'_, f64>, what: &str) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::InvalidInput(format!("{what}: empty")));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    if weights.iter().any(|w| *w < 0.0) {
        return Err(Error::InvalidInput(format!("{what}: negative weight")));
    }
    let total = weights.sum();
    if (total - 1.0).abs() > RENORMALIZE_TOL {
        return Err(Error::InvalidInput(format!(
            "{what}: weights sum to {total}, not 1"
        )));
    }
    Ok(())
}

/// A measure whose atoms carry class labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMeasure {
    measure: DiscreteMeasure,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledMeasure {
    pub fn new(measure: DiscreteMeasure, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != measure.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} atoms",
                labels.len(),
                measure.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidInput(format!(
                "label {y} outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            measure,
            labels,
            num_classes,
        })
    }

    pub fn measure(&self) -> &DiscreteMeasure {
        &self.measure
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Non-negative, finite transport costs between `n_s` source and `n_t` target atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("cost matrix".into()));
        }
        if let Some(c) = entries.iter().find(|c| **c < 0.0) {
            return Err(Error::InvalidInput(format!("negative cost {c}")));
        }
        Ok(Self(entries))
    }

    pub fn entries(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }
}

impl std::ops::Index<(usize, usize)> for CostMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.0[[i, j]]
    }
}

/// Pairwise squared Euclidean distances `‖x_i − z_j‖²`.
pub fn squared_euclidean_cost(
    source: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
) -> Result<CostMatrix> {
    if source.ncols() != target.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "source points have dimension {}, target points {}",
            source.ncols(),
            target.ncols()
        )));
    }
    if source.iter().chain(target.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("point coordinates".into()));
    }
    Ok(CostMatrix(pairwise_sq_dists(source, target)))
}

/// Unchecked kernel behind [`squared_euclidean_cost`].
pub(crate) fn pairwise_sq_dists(source: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Array2<f64> {
    let (ns, nt) = (source.nrows(), target.nrows());
    if ns * nt > EXPANDED_COST_THRESHOLD {
        let sn = source.map_axis(Axis(1), |r| r.dot(&r));
        let tn = target.map_axis(Axis(1), |r| r.dot(&r));
        let mut c = source.dot(&target.t());
        for ((i, j), v) in c.indexed_iter_mut() {
            // cancellation can push coincident points slightly negative
            *v = (sn[i] + tn[j] - 2.0 * *v).max(0.0);
        }
        c
    } else {
        Array2::from_shape_fn((ns, nt), |(i, j)| {
            source
                .row(i)
                .iter()
                .zip(target.row(j))
                .map(|(x, z)| (x - z) * (x - z))
                .sum()
        })
    }
}

/// Reweighs a labeled measure by per-class importance: the new mass of atom
/// `i` is proportional to `importance[y_i] * weight_i`, renormalized to one.
pub fn reweigh_by_class(
    src: &LabeledMeasure,
    importance: ArrayView1<'_, f64>,
) -> Result<DiscreteMeasure> {
    if importance.len() != src.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "{} importance weights for {} classes",
            importance.len(),
            src.num_classes()
        )));
    }
    if importance.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(Error::InvalidInput(
            "importance weights must be finite and non-negative".into(),
        ));
    }
    let raw: Array1<f64> = src
        .labels()
        .iter()
        .zip(src.measure().weights())
        .map(|(&y, &w)| importance[y] * w)
        .collect();
    let total = raw.sum();
    if total <= 0.0 {
        return Err(Error::DegenerateReweighting);
    }
    src.measure().with_weights(raw / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn cost_identical_points_is_zero() {
        let p = array![[0.3, -1.0, 2.5]];
        let c = squared_euclidean_cost(p.view(), p.view()).unwrap();
        assert_eq!(c.entries(), array![[0.0]]);
    }

    #[test]
    fn cost_one_dimensional() {
        let c = squared_euclidean_cost(array![[0.0]].view(), array![[2.0]].view()).unwrap();
        assert_eq!(c[(0, 0)], 4.0);
    }

    #[test]
    fn cost_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_points(&mut rng, 3, 2);
        let z = random_points(&mut rng, 3, 2);
        let c = squared_euclidean_cost(x.view(), z.view()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let dx = x[[i, 0]] - z[[j, 0]];
                let dy = x[[i, 1]] - z[[j, 1]];
                assert_eq!(c[(i, j)], dx * dx + dy * dy);
            }
        }
        let ct = squared_euclidean_cost(z.view(), x.view()).unwrap();
        assert_eq!(ct.entries(), c.entries().t());
    }

    #[test]
    fn expanded_form_agrees_with_direct_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_points(&mut rng, 120, 4);
        let z = random_points(&mut rng, 100, 4);
        let big = pairwise_sq_dists(x.view(), z.view());
        for i in (0..120).step_by(7) {
            for j in (0..100).step_by(9) {
                let direct: f64 = (&x.row(i) - &z.row(j)).mapv(|v| v * v).sum();
                assert!((big[[i, j]] - direct).abs() < 1e-12);
            }
        }
        let same = pairwise_sq_dists(x.view(), x.view());
        assert!(same.diag().iter().all(|&v| (0.0..1e-12).contains(&v)));
    }

    #[test]
    fn cost_rejects_dimension_mismatch() {
        let err = squared_euclidean_cost(array![[0.0, 1.0]].view(), array![[2.0]].view());
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn uniform_weights() {
        let m = uniform_measure(Array2::zeros((4, 2))).unwrap();
        assert_eq!(m.weights(), array![0.25, 0.25, 0.25, 0.25]);
        let m = uniform_measure(Array2::zeros((1, 3))).unwrap();
        assert_eq!(m.weights(), array![1.0]);
        let m = uniform_measure(Array2::zeros((7, 1))).unwrap();
        assert!((m.weights().sum() - 1.0).abs() < 1e-12);
        assert!(uniform_measure(Array2::zeros((0, 2))).is_err());
    }

    #[test]
    fn constructor_renormalizes_small_drift_only() {
        let pts = Array2::zeros((2, 1));
        let m = DiscreteMeasure::new(pts.clone(), array![0.5 + 4e-7, 0.5]).unwrap();
        assert!((m.weights().sum() - 1.0).abs() <= WEIGHT_SUM_TOL);
        assert!(DiscreteMeasure::new(pts.clone(), array![0.6, 0.5]).is_err());
        assert!(DiscreteMeasure::new(pts, array![1.5, -0.5]).is_err());
    }

    fn labeled(labels: Vec<usize>, k: usize) -> LabeledMeasure {
        let n = labels.len();
        let m = uniform_measure(Array2::from_shape_fn((n, 1), |(i, _)| i as f64)).unwrap();
        LabeledMeasure::new(m, labels, k).unwrap()
    }

    #[test]
    fn reweigh_identity_and_forced_ratio() {
        let src = labeled(vec![0, 1, 1, 2], 3);
        let out = reweigh_by_class(&src, array![1.0, 1.0, 1.0].view()).unwrap();
        assert_eq!(out.weights(), src.measure().weights());

        let src = labeled(vec![0, 1], 2);
        let out = reweigh_by_class(&src, array![2.0, 0.0].view()).unwrap();
        assert_eq!(out.weights(), array![1.0, 0.0]);
    }

    #[test]
    fn reweigh_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels = vec![0, 1, 2, 2, 1, 0];
        let raw: Array1<f64> = (0..6).map(|_| rng.random_range(0.1..1.0)).collect();
        let m = DiscreteMeasure::new(Array2::zeros((6, 2)), &raw / raw.sum()).unwrap();
        let src = LabeledMeasure::new(m, labels.clone(), 3).unwrap();
        let imp: Array1<f64> = (0..3).map(|_| rng.random_range(0.0..3.0)).collect();
        let out = reweigh_by_class(&src, imp.view()).unwrap();
        let direct: Vec<f64> = (0..6)
            .map(|i| imp[labels[i]] * src.measure().weights()[i])
            .collect();
        let total: f64 = direct.iter().sum();
        for (w, d) in out.weights().iter().zip(&direct) {
            assert!((w - d / total).abs() < 1e-15);
        }
    }

    #[test]
    fn reweigh_degenerate() {
        let src = labeled(vec![0, 0], 2);
        assert!(matches!(
            reweigh_by_class(&src, array![0.0, 3.0].view()),
            Err(Error::DegenerateReweighting)
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cost_nonnegative_and_zero_iff_coincident(
                xs in prop::collection::vec(-5.0f64..5.0, 6),
                zs in prop::collection::vec(-5.0f64..5.0, 4),
            ) {
                let x = Array2::from_shape_vec((3, 2), xs).unwrap();
                let mut z = Array2::from_shape_vec((2, 2), zs).unwrap();
                z.row_mut(1).assign(&x.row(0));
                let c = squared_euclidean_cost(x.view(), z.view()).unwrap();
                for ((i, j), &v) in c.entries().indexed_iter() {
                    prop_assert!(v >= 0.0);
                    prop_assert_eq!(v == 0.0, x.row(i) == z.row(j));
                }
            }

            #[test]
            fn reweigh_preserves_support_and_scale(
                labels in prop::collection::vec(0usize..4, 1..12),
                imp in prop::collection::vec(prop_oneof![Just(0.0), 0.1f64..5.0], 4),
                scale in 0.1f64..10.0,
            ) {
                let src = labeled(labels.clone(), 4);
                let imp = Array1::from(imp);
                match reweigh_by_class(&src, imp.view()) {
                    Ok(out) => {
                        for (i, &y) in labels.iter().enumerate() {
                            prop_assert_eq!(out.weights()[i] == 0.0, imp[y] == 0.0);
                        }
                    }
                    Err(e) => prop_assert!(matches!(e, Error::DegenerateReweighting)),
                }
                let flat = reweigh_by_class(&src, Array1::from_elem(4, scale).view()).unwrap();
                for (a, b) in flat.weights().iter().zip(src.measure().weights()) {
                    prop_assert!((a - b).abs() < 1e-15);
                }
            }
        }
    }
}
