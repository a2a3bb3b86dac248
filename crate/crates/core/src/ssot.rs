//! Soft-masked, importance-weighted semi-dual OT for partial domain
//! adaptation.
//!
//! A feature extractor `f`, a softmax classifier `η` and a scalar potential
//! network `g` are trained in alternation. Each iteration samples a source
//! and a target batch, builds the soft mask `S = softmax_rows(1 − P_s P_tᵀ)`
//! from the current predictions, masks the squared feature distances with
//! it, refreshes the target label prior and the class importance weights,
//! ascends the semi-dual over `g` with `f, η` frozen, and then descends
//!
//! ```text
//! L = CE_m + λ_OT · W_ε + λ_Ent · Ent
//! ```
//!
//! over `f, η` with `g` frozen. The mask and the importance weights are
//! constants inside an iteration (no gradient flows through them).

use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{CostMatrix, LabeledMeasure, RENORMALIZE_TOL};
use crate::nnet::{adam_step, AdamState, Direction, Gradients, Mlp, OutputActivation, StepOutcome};
use crate::numerics::softmax_rows;
use crate::semidual::{batch_semidual, BatchSampler};

/// Guard for source priors in the importance ratio.
pub const IMPORTANCE_FLOOR: f64 = 1e-8;
/// Probability floor inside the cross-entropy logarithm.
pub const CE_LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPrior {
    probs: Vec<f64>,
}

impl LabelPrior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("label prior: no classes".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput("label prior: entries must be finite and >= 0".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("label prior sums to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn l1_distance(&self, other: &LabelPrior) -> Result<f64> {
        if self.probs.len() != other.probs.len() {
            return Err(Error::DimensionMismatch(format!(
                "priors over {} and {} classes",
                self.probs.len(),
                other.probs.len()
            )));
        }
        Ok(self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum())
    }
}

/// Per-class ratios `m_k = p^t_k / p^s_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    weights: Vec<f64>,
    /// Classes with target mass but (numerically) no source mass: the
    /// partial-label assumption fails for them.
    pub unsupported_classes: Vec<usize>,
}

impl ImportanceWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput("importance weights must be finite and >= 0".into()));
        }
        Ok(Self {
            weights,
            unsupported_classes: Vec::new(),
        })
    }

    pub fn ones(k: usize) -> Self {
        Self {
            weights: vec![1.0; k],
            unsupported_classes: Vec::new(),
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }
}

/// Row-stochastic mask over a source × target batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask(Array2<f64>);

impl SoftMask {
    pub fn entries(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

pub fn estimate_source_prior(labels: &[usize], num_classes: usize) -> Result<LabelPrior> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("no source labels".into()));
    }
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        *counts
            .get_mut(y)
            .ok_or_else(|| Error::InvalidInput(format!("label {y} outside 0..{num_classes}")))? += 1;
    }
    let n = labels.len() as f64;
    LabelPrior::new(counts.into_iter().map(|c| c as f64 / n).collect())
}

fn check_prediction_rows(pred: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if pred.nrows() == 0 || pred.ncols() == 0 {
        return Err(Error::InvalidInput(format!("{what}: empty prediction matrix")));
    }
    for (i, row) in pred.rows().into_iter().enumerate() {
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (row.sum() - 1.0).abs() > RENORMALIZE_TOL {
            return Err(Error::InvalidInput(format!("{what}: row {i} is not a probability vector")));
        }
    }
    Ok(())
}

/// Column mean of the target predictions.
pub fn estimate_target_prior(predictions: ArrayView2<'_, f64>) -> Result<LabelPrior> {
    check_prediction_rows(predictions, "target predictions")?;
    let mean = predictions.mean_axis(Axis(0)).expect("non-empty");
    let total = mean.sum();
    LabelPrior::new(mean.iter().map(|p| p / total).collect())
}

/// `m_k = p^t_k / max(p^s_k, floor)`; classes with both priors below the
/// floor get 0.
pub fn importance_weights(target: &LabelPrior, source: &LabelPrior, floor: f64) -> Result<ImportanceWeights> {
    if target.num_classes() != source.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "target prior over {} classes, source over {}",
            target.num_classes(),
            source.num_classes()
        )));
    }
    let mut unsupported = Vec::new();
    let weights = target
        .probs()
        .iter()
        .zip(source.probs())
        .enumerate()
        .map(|(k, (&t, &s))| {
            if s < floor {
                if t < floor {
                    return 0.0;
                }
                unsupported.push(k);
            }
            t / s.max(floor)
        })
        .collect();
    Ok(ImportanceWeights {
        weights,
        unsupported_classes: unsupported,
    })
}

/// Rescales `weights` so that `mean_i m_{y_i} = 1` over the source atoms.
pub fn normalize_importance(weights: &ImportanceWeights, source_labels: &[usize]) -> Result<ImportanceWeights> {
    if source_labels.is_empty() {
        return Err(Error::InvalidInput("no source labels".into()));
    }
    let w = weights.weights();
    let mut total = 0.0;
    for &y in source_labels {
        total += *w
            .get(y)
            .ok_or_else(|| Error::InvalidInput(format!("label {y} outside 0..{}", w.len())))?;
    }
    let mean = total / source_labels.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::DegenerateReweighting);
    }
    Ok(ImportanceWeights {
        weights: w.iter().map(|m| m / mean).collect(),
        unsupported_classes: weights.unsupported_classes.clone(),
    })
}

/// `S_ij = exp(1 − ⟨p_i, q_j⟩) / Σ_l exp(1 − ⟨p_i, q_l⟩)`.
pub fn soft_mask(pred_s: ArrayView2<'_, f64>, pred_t: ArrayView2<'_, f64>) -> Result<SoftMask> {
    if pred_s.ncols() != pred_t.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "source predictions over {} classes, target over {}",
            pred_s.ncols(),
            pred_t.ncols()
        )));
    }
    if pred_s.nrows() == 0 || pred_t.nrows() == 0 {
        return Err(Error::InvalidInput("empty prediction batch".into()));
    }
    let logits = pred_s.dot(&pred_t.t()).mapv(|s| 1.0 - s);
    Ok(SoftMask(softmax_rows(logits.view())))
}

pub fn masked_cost(mask: &SoftMask, cost: &CostMatrix) -> Result<CostMatrix> {
    if mask.0.dim() != cost.dim() {
        return Err(Error::DimensionMismatch(format!(
            "mask {:?} vs cost {:?}",
            mask.0.dim(),
            cost.dim()
        )));
    }
    CostMatrix::new(&mask.0 * &cost.entries())
}

fn check_labels(pred: ArrayView2<'_, f64>, labels: &[usize], k: usize) -> Result<()> {
    if labels.len() != pred.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} predictions",
            labels.len(),
            pred.nrows()
        )));
    }
    if pred.ncols() != k {
        return Err(Error::DimensionMismatch(format!(
            "predictions over {} classes, {k} importance weights",
            pred.ncols()
        )));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidInput(format!("label {y} outside 0..{k}")));
    }
    Ok(())
}

/// `−(1/b) Σ_i m_{y_i} log max(p_i[y_i], 1e-12)`.
pub fn weighted_ce_loss(pred_s: ArrayView2<'_, f64>, labels: &[usize], importance: &ImportanceWeights) -> Result<f64> {
    check_labels(pred_s, labels, importance.num_classes())?;
    Ok(ce_unchecked(pred_s, labels, importance.weights()))
}

fn ce_unchecked(pred: ArrayView2<'_, f64>, labels: &[usize], m: &[f64]) -> f64 {
    let b = labels.len() as f64;
    labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| m[y] != 0.0)
        .map(|(i, &y)| -m[y] * pred[[i, y]].max(CE_LOG_FLOOR).ln())
        .sum::<f64>()
        / b
}

/// Gradient of [`weighted_ce_loss`] with respect to the probabilities.
fn ce_grad(pred: ArrayView2<'_, f64>, labels: &[usize], m: &[f64], scale: f64) -> Array2<f64> {
    let b = labels.len() as f64;
    let mut g = Array2::zeros(pred.raw_dim());
    for (i, &y) in labels.iter().enumerate() {
        let p = pred[[i, y]];
        if p > CE_LOG_FLOOR {
            g[[i, y]] = -scale * m[y] / (b * p);
        }
    }
    g
}

/// Mean Shannon entropy of the prediction rows, `0 · log 0 = 0`.
pub fn entropy_loss(pred_t: ArrayView2<'_, f64>) -> f64 {
    let b = pred_t.nrows() as f64;
    -pred_t.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>() / b
}

fn entropy_grad(pred: ArrayView2<'_, f64>, scale: f64) -> Array2<f64> {
    let b = pred.nrows() as f64;
    // the +1 of d(p log p)/dp is annihilated by the softmax Jacobian
    pred.mapv(|p| -scale * p.max(f64::MIN_POSITIVE).ln() / b)
}

/// Value of the batch transport loss and its gradients with respect to the
/// source and target features. The potential network is an input only.
#[derive(Debug, Clone)]
pub struct OtLoss {
    pub value: f64,
    pub grad_source: Array2<f64>,
    pub grad_target: Array2<f64>,
}

/// Finite-dimensional `W_ε` between a source and a target feature batch:
///
/// ```text
/// Σ_i w_i g^{c̃,ε}(f^s_i) + (1/b_t) Σ_j g(f^t_j) − ε,   w_i ∝ m_{y_i}
/// ```
///
/// with `c̃ = S ⊙ ‖f^s − f^t‖²` (plain squared distance when `mask` is
/// `None`). Gradients include the path through `g`'s input.
pub fn ot_loss(
    features_s: ArrayView2<'_, f64>,
    labels_s: &[usize],
    features_t: ArrayView2<'_, f64>,
    importance: &ImportanceWeights,
    mask: Option<&SoftMask>,
    potential_net: &Mlp,
    epsilon: f64,
) -> Result<OtLoss> {
    let (bs, bt) = (features_s.nrows(), features_t.nrows());
    if labels_s.len() != bs {
        return Err(Error::DimensionMismatch(format!("{} labels for {bs} source features", labels_s.len())));
    }
    if features_s.ncols() != features_t.ncols() {
        return Err(Error::DimensionMismatch("source and target feature widths differ".into()));
    }
    if let Some(m) = mask {
        if m.0.dim() != (bs, bt) {
            return Err(Error::DimensionMismatch(format!("mask {:?} for a {bs}x{bt} batch", m.0.dim())));
        }
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput("transport loss needs epsilon > 0".into()));
    }
    if bs == 0 || bt == 0 {
        return Err(Error::InvalidInput("empty feature batch".into()));
    }
    let m = importance.weights();
    if let Some(y) = labels_s.iter().find(|&&y| y >= m.len()) {
        return Err(Error::InvalidInput(format!("label {y} outside 0..{}", m.len())));
    }
    let raw: Vec<f64> = labels_s.iter().map(|&y| m[y]).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateReweighting);
    }
    let ws: Vec<f64> = raw.iter().map(|r| r / total).collect();

    let sq = crate::measures::pairwise_sq_dists(features_s, features_t);
    let cost = match mask {
        Some(s) => &s.0 * &sq,
        None => sq,
    };
    let (g_out, g_cache) = potential_net.forward(features_t)?;
    let wt = Array1::from_elem(bt, 1.0 / bt as f64);
    let est = batch_semidual(g_out.column(0), &ws, wt.view(), cost.view(), epsilon);

    // ∂W/∂C_ij = w_i χ_ij, times the mask entry for ∂/∂‖·‖²
    let mut a = est.chi;
    for (i, mut row) in a.axis_iter_mut(Axis(0)).enumerate() {
        row *= ws[i];
    }
    if let Some(s) = mask {
        a *= &s.0;
    }
    let row_mass = a.sum_axis(Axis(1)).insert_axis(Axis(1));
    let col_mass = a.sum_axis(Axis(0)).insert_axis(Axis(1));
    let grad_source = (&features_s * &row_mass - a.dot(&features_t)) * 2.0;
    let mut grad_target = (&features_t * &col_mass - a.t().dot(&features_s)) * 2.0;
    let through_g = potential_net.backward(&g_cache, est.grad_g.insert_axis(Axis(1)).view())?;
    grad_target += &through_g.input.expect("first layer yields an input gradient");

    Ok(OtLoss {
        value: est.value,
        grad_source,
        grad_target,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoMask,
    NoWeights,
    NoEnt,
    SourceOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoMask,
        Ablation::NoWeights,
        Ablation::NoEnt,
        Ablation::SourceOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoMask => "no-mask",
            Ablation::NoWeights => "no-weights",
            Ablation::NoEnt => "no-ent",
            Ablation::SourceOnly => "source-only",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown ablation {s:?}")))
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorRefresh {
    EveryIteration,
    EveryEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsotConfig {
    /// Transport loss weight. Values between 1 and 10 work well.
    pub lambda_ot: f64,
    /// Target entropy weight, same useful range as `lambda_ot`.
    pub lambda_ent: f64,
    pub epsilon: f64,
    pub batch_source: usize,
    pub batch_target: usize,
    pub epochs: usize,
    /// Iterations per epoch; 0 means one pass over the source, `⌈n_s/b_s⌉`.
    pub iterations_per_epoch: usize,
    /// Potential ascent steps per iteration.
    pub potential_steps: usize,
    pub pretrain_steps: usize,
    /// Adam step for `f` and `η`.
    pub lr_model: f64,
    /// Adam step for `g`.
    pub lr_potential: f64,
    pub prior_refresh: PriorRefresh,
    /// Epochs during which the class weights stay at one while the target
    /// prior is still tracked. A source-only classifier can misjudge the
    /// target prior badly under shift, and weights built from it reinforce
    /// the error.
    pub weight_warmup_epochs: usize,
    pub feature_hidden: usize,
    pub feature_dim: usize,
    pub potential_hidden: usize,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for SsotConfig {
    fn default() -> Self {
        Self {
            lambda_ot: 1.0,
            lambda_ent: 1.0,
            epsilon: 1.0,
            batch_source: 32,
            batch_target: 32,
            epochs: 30,
            iterations_per_epoch: 0,
            potential_steps: 1,
            pretrain_steps: 200,
            lr_model: 1e-3,
            lr_potential: 5e-2,
            prior_refresh: PriorRefresh::EveryIteration,
            weight_warmup_epochs: 5,
            feature_hidden: 64,
            feature_dim: 32,
            potential_hidden: 32,
            ablation: Ablation::Full,
            seed: 0,
        }
    }
}

impl SsotConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |x: f64| x >= 0.0 && x.is_finite();
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !nonneg(self.lambda_ot) || !nonneg(self.lambda_ent) {
            return Err(Error::InvalidInput("loss weights must be finite and >= 0".into()));
        }
        if !pos(self.epsilon) || !pos(self.lr_model) || !pos(self.lr_potential) {
            return Err(Error::InvalidInput("epsilon and learning rates must be > 0".into()));
        }
        if self.batch_source == 0 || self.batch_target == 0 || self.potential_steps == 0 {
            return Err(Error::InvalidInput("batch sizes and potential steps must be >= 1".into()));
        }
        if self.feature_hidden == 0 || self.feature_dim == 0 || self.potential_hidden == 0 {
            return Err(Error::InvalidInput("layer widths must be >= 1".into()));
        }
        Ok(())
    }

    fn uses_transport(&self) -> bool {
        self.ablation != Ablation::SourceOnly
    }

    fn uses_weights(&self) -> bool {
        !matches!(self.ablation, Ablation::NoWeights | Ablation::SourceOnly)
    }

    fn uses_mask(&self) -> bool {
        self.ablation != Ablation::NoMask
    }

    /// Effective weights after the ablation switches.
    pub fn effective_lambdas(&self) -> (f64, f64) {
        match self.ablation {
            Ablation::SourceOnly => (0.0, 0.0),
            Ablation::NoEnt => (self.lambda_ot, 0.0),
            _ => (self.lambda_ot, self.lambda_ent),
        }
    }
}

pub fn total_loss(ce: f64, ot: f64, ent: f64, config: &SsotConfig) -> f64 {
    ce + config.lambda_ot * ot + config.lambda_ent * ent
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_ce: f64,
    pub loss_ot: f64,
    pub loss_ent: f64,
    pub loss_total: f64,
    pub target_acc: Option<f64>,
    pub prior_l1_error: Option<f64>,
    pub seconds: f64,
}

pub const METRICS_HEADER: [&str; 8] = [
    "epoch",
    "loss_ce",
    "loss_ot",
    "loss_ent",
    "loss_total",
    "target_acc",
    "prior_l1_error",
    "seconds",
];

/// Writes the per-epoch metrics as CSV (empty cells where no evaluation
/// data was supplied).
pub fn write_metrics_csv(path: impl AsRef<std::path::Path>, metrics: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(err)?;
    w.write_record(METRICS_HEADER).map_err(err)?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            m.loss_ce.to_string(),
            m.loss_ot.to_string(),
            m.loss_ent.to_string(),
            m.loss_total.to_string(),
            opt(m.target_acc),
            opt(m.prior_l1_error),
            m.seconds.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Held-out data used only to report metrics.
#[derive(Debug, Clone, Copy)]
pub struct Evaluation<'a> {
    pub target_labels: &'a [usize],
    pub true_target_prior: &'a LabelPrior,
}

#[derive(Debug, Clone)]
pub struct SsotState {
    pub config: SsotConfig,
    pub feature_net: Mlp,
    pub classifier: Mlp,
    pub potential_net: Mlp,
    pub feature_adam: AdamState,
    pub classifier_adam: AdamState,
    pub potential_adam: AdamState,
    pub source_prior: LabelPrior,
    pub target_prior: LabelPrior,
    /// Normalized class weights currently in use.
    pub importance: ImportanceWeights,
    pub metrics: Vec<EpochMetrics>,
    pub epoch: usize,
    pub iteration: usize,
}

impl SsotState {
    /// Class probabilities `η(f(x))`.
    pub fn predict(&self, points: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let feats = self.feature_net.predict(points)?;
        self.classifier.predict(feats.view())
    }

    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.feature_net.save(dir.join("feature"))?;
        self.classifier.save(dir.join("classifier"))?;
        self.potential_net.save(dir.join("potential"))?;
        let summary = serde_json::json!({
            "epoch": self.epoch,
            "iteration": self.iteration,
            "source_prior": self.source_prior,
            "target_prior": self.target_prior,
            "importance": self.importance,
        });
        let path = dir.join("state.json");
        std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("serializable"))
            .map_err(|e| Error::io(&path, e))
    }
}

/// Training failure; numerical aborts carry the state at the time.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct TrainFailure {
    pub error: Error,
    pub snapshot: Option<Box<SsotState>>,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self { error, snapshot: None }
    }
}

pub fn accuracy(pred: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    let hits = pred
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(*row) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (k, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = k;
        }
    }
    best
}

/// Everything one iteration computes before the two update phases.
pub struct IterationBatch {
    source_idx: Vec<usize>,
    labels: Vec<usize>,
    xs: Array2<f64>,
    xt: Array2<f64>,
    fs: Array2<f64>,
    ft: Array2<f64>,
    mask: Option<SoftMask>,
}

impl IterationBatch {
    pub fn source_indices(&self) -> &[usize] {
        &self.source_idx
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn source_points(&self) -> ArrayView2<'_, f64> {
        self.xs.view()
    }

    pub fn target_points(&self) -> ArrayView2<'_, f64> {
        self.xt.view()
    }

    pub fn source_features(&self) -> ArrayView2<'_, f64> {
        self.fs.view()
    }

    pub fn target_features(&self) -> ArrayView2<'_, f64> {
        self.ft.view()
    }

    pub fn mask(&self) -> Option<&SoftMask> {
        self.mask.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLosses {
    pub ce: f64,
    pub ot: f64,
    pub ent: f64,
    pub total: f64,
}

/// Batch loss terms and the gradients of their weighted sum with respect to
/// the feature network and the classifier.
#[derive(Debug, Clone)]
pub struct ModelGradients {
    pub losses: IterationLosses,
    pub feature: Gradients,
    pub classifier: Gradients,
}

/// Transport weights of a source batch, `None` when every sampled class
/// carries zero weight.
fn batch_source_weights(importance: &ImportanceWeights, labels: &[usize]) -> Option<Vec<f64>> {
    let m = importance.weights();
    let total: f64 = labels.iter().map(|&y| m[y]).sum();
    (total > 0.0).then(|| labels.iter().map(|&y| m[y] / total).collect())
}

/// `CE + λ_OT·W_ε + λ_Ent·Ent` on a batch at the current parameters of
/// `state`, and its gradients for `f` and `η`. The mask is a constant here,
/// as is the potential network.
pub fn model_gradients(
    state: &SsotState,
    xs: ArrayView2<'_, f64>,
    labels: &[usize],
    xt: ArrayView2<'_, f64>,
    mask: Option<&SoftMask>,
) -> Result<ModelGradients> {
    let cfg = &state.config;
    let (lambda_ot, lambda_ent) = cfg.effective_lambdas();
    let m = state.importance.weights();
    let (fs, f_cache_s) = state.feature_net.forward(xs)?;
    let (ft, f_cache_t) = state.feature_net.forward(xt)?;
    let (ps, eta_cache_s) = state.classifier.forward(fs.view())?;
    let (pt, eta_cache_t) = state.classifier.forward(ft.view())?;

    let ce = ce_unchecked(ps.view(), labels, m);
    let ent = if lambda_ent > 0.0 { entropy_loss(pt.view()) } else { 0.0 };
    let mut d_fs = Array2::zeros(fs.raw_dim());
    let mut d_ft = Array2::zeros(ft.raw_dim());
    let mut ot = 0.0;
    if cfg.uses_transport() && lambda_ot > 0.0 && batch_source_weights(&state.importance, labels).is_some() {
        let loss = ot_loss(fs.view(), labels, ft.view(), &state.importance, mask, &state.potential_net, cfg.epsilon)?;
        ot = loss.value;
        d_fs.scaled_add(lambda_ot, &loss.grad_source);
        d_ft.scaled_add(lambda_ot, &loss.grad_target);
    }
    let total = ce + lambda_ot * ot + lambda_ent * ent;

    let up_s = ce_grad(ps.view(), labels, m, 1.0);
    let mut g_eta = state.classifier.backward(&eta_cache_s, up_s.view())?;
    d_fs += g_eta.input.as_ref().expect("input gradient");
    if lambda_ent > 0.0 {
        let up_t = entropy_grad(pt.view(), lambda_ent);
        let g_eta_t = state.classifier.backward(&eta_cache_t, up_t.view())?;
        g_eta.accumulate(&g_eta_t);
        d_ft += g_eta_t.input.as_ref().expect("input gradient");
    }
    let mut g_f = state.feature_net.backward(&f_cache_s, d_fs.view())?;
    g_f.accumulate(&state.feature_net.backward(&f_cache_t, d_ft.view())?);
    Ok(ModelGradients {
        losses: IterationLosses { ce, ot, ent, total },
        feature: g_f,
        classifier: g_eta,
    })
}

/// Batch semi-dual at the current potential network and its gradient with
/// respect to the network's parameters. Features and mask are constants.
/// `None` when the batch carries no transport mass.
pub fn potential_gradient(
    state: &SsotState,
    features_s: ArrayView2<'_, f64>,
    labels: &[usize],
    features_t: ArrayView2<'_, f64>,
    mask: Option<&SoftMask>,
) -> Result<Option<(f64, Gradients)>> {
    let Some(ws) = batch_source_weights(&state.importance, labels) else {
        return Ok(None);
    };
    let sq = crate::measures::pairwise_sq_dists(features_s, features_t);
    let cost = match mask {
        Some(s) => &s.0 * &sq,
        None => sq,
    };
    let bt = features_t.nrows();
    let wt = Array1::from_elem(bt, 1.0 / bt as f64);
    let (g_out, cache) = state.potential_net.forward(features_t)?;
    let est = batch_semidual(g_out.column(0), &ws, wt.view(), cost.view(), state.config.epsilon);
    let grads = state.potential_net.backward(&cache, est.grad_g.insert_axis(Axis(1)).view())?;
    Ok(Some((est.value, grads)))
}

/// Stepwise driver of the alternating loop.
pub struct Trainer<'a> {
    source: &'a LabeledMeasure,
    target: ArrayView2<'a, f64>,
    eval: Option<Evaluation<'a>>,
    state: SsotState,
    source_sampler: BatchSampler,
    target_sampler: BatchSampler,
    start: Instant,
}

impl<'a> Trainer<'a> {
    /// Builds the networks from `config.seed`; does not pre-train.
    pub fn new(
        source: &'a LabeledMeasure,
        target: ArrayView2<'a, f64>,
        config: &SsotConfig,
        eval: Option<Evaluation<'a>>,
    ) -> Result<Self> {
        config.validate()?;
        let d = source.measure().dim();
        if target.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "source points have {d} features, target {}",
                target.ncols()
            )));
        }
        if target.nrows() == 0 {
            return Err(Error::InvalidInput("empty target set".into()));
        }
        if target.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("target points".into()));
        }
        let k = source.num_classes();
        if let Some(ev) = eval {
            if ev.target_labels.len() != target.nrows() || ev.true_target_prior.num_classes() != k {
                return Err(Error::DimensionMismatch("evaluation data does not match the task".into()));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let feature_net = Mlp::new(
            &[d, config.feature_hidden, config.feature_dim],
            OutputActivation::Identity,
            rng.random(),
        )?;
        let classifier = Mlp::new(&[config.feature_dim, k], OutputActivation::Softmax, rng.random())?;
        let mut potential_net = Mlp::new(
            &[config.feature_dim, config.potential_hidden, 1],
            OutputActivation::Identity,
            rng.random(),
        )?;
        potential_net.zero_final_layer();
        let source_sampler = BatchSampler::new(
            source.measure().len(),
            config.batch_source,
            ChaCha8Rng::seed_from_u64(rng.random()),
        );
        let target_sampler = BatchSampler::new(
            target.nrows(),
            config.batch_target,
            ChaCha8Rng::seed_from_u64(rng.random()),
        );
        let source_prior = estimate_source_prior(source.labels(), k)?;
        let state = SsotState {
            config: config.clone(),
            feature_adam: AdamState::new(&feature_net, config.lr_model),
            classifier_adam: AdamState::new(&classifier, config.lr_model),
            potential_adam: AdamState::new(&potential_net, config.lr_potential),
            feature_net,
            classifier,
            potential_net,
            target_prior: source_prior.clone(),
            source_prior,
            importance: ImportanceWeights::ones(k),
            metrics: Vec::new(),
            epoch: 0,
            iteration: 0,
        };
        Ok(Self {
            source,
            target,
            eval,
            state,
            source_sampler,
            target_sampler,
            start: Instant::now(),
        })
    }

    pub fn state(&self) -> &SsotState {
        &self.state
    }

    pub fn into_state(self) -> SsotState {
        self.state
    }

    fn diverged(&self, reason: impl Into<String>) -> TrainFailure {
        TrainFailure {
            error: Error::Diverged {
                epoch: self.state.epoch,
                iteration: self.state.iteration,
                reason: reason.into(),
            },
            snapshot: Some(Box::new(self.state.clone())),
        }
    }

    fn iterations_per_epoch(&self) -> usize {
        match self.state.config.iterations_per_epoch {
            0 => self.source.measure().len().div_ceil(self.state.config.batch_source),
            n => n,
        }
    }

    /// Unweighted source cross-entropy steps on `f` and `η`.
    pub fn pretrain(&mut self) -> std::result::Result<(), TrainFailure> {
        let ones = vec![1.0; self.source.num_classes()];
        for _ in 0..self.state.config.pretrain_steps {
            let idx = self.source_sampler.next_batch();
            let xs = self.source.measure().points().select(Axis(0), &idx);
            let labels: Vec<usize> = idx.iter().map(|&i| self.source.labels()[i]).collect();
            let (fs, f_cache) = self.state.feature_net.forward(xs.view())?;
            let (ps, eta_cache) = self.state.classifier.forward(fs.view())?;
            let ce = ce_unchecked(ps.view(), &labels, &ones);
            if !ce.is_finite() {
                return Err(self.diverged("non-finite pre-training loss"));
            }
            let up = ce_grad(ps.view(), &labels, &ones, 1.0);
            let g_eta = self.state.classifier.backward(&eta_cache, up.view())?;
            let g_f = self
                .state
                .feature_net
                .backward(&f_cache, g_eta.input.as_ref().expect("input gradient").view())?;
            self.apply_model_step(&g_f, &g_eta)?;
        }
        Ok(())
    }

    fn apply_model_step(
        &mut self,
        g_f: &Gradients,
        g_eta: &Gradients,
    ) -> std::result::Result<(), TrainFailure> {
        let a = adam_step(&mut self.state.feature_net, g_f, &mut self.state.feature_adam, Direction::Minimize)?;
        let b = adam_step(&mut self.state.classifier, g_eta, &mut self.state.classifier_adam, Direction::Minimize)?;
        if a == StepOutcome::SkippedNonFinite || b == StepOutcome::SkippedNonFinite {
            return Err(self.diverged("non-finite model gradient"));
        }
        Ok(())
    }

    /// Full no-gradient target pass: refreshes `p̂^t` and the normalized
    /// importance weights (left at one when the ablation drops them).
    pub fn refresh_priors(&mut self) -> Result<()> {
        let pred = self.state.predict(self.target)?;
        let prior = estimate_target_prior(pred.view())?;
        if self.state.config.uses_weights() && self.state.epoch >= self.state.config.weight_warmup_epochs {
            let raw = importance_weights(&prior, &self.state.source_prior, IMPORTANCE_FLOOR)?;
            self.state.importance = normalize_importance(&raw, self.source.labels())?;
        }
        self.state.target_prior = prior;
        Ok(())
    }

    /// Samples batches and runs the frozen-parameter forward pass.
    pub fn prepare_batch(&mut self) -> Result<IterationBatch> {
        let source_idx = self.source_sampler.next_batch();
        let target_idx = self.target_sampler.next_batch();
        let xs = self.source.measure().points().select(Axis(0), &source_idx);
        let xt = self.target.select(Axis(0), &target_idx);
        let labels = source_idx.iter().map(|&i| self.source.labels()[i]).collect();
        let fs = self.state.feature_net.predict(xs.view())?;
        let ft = self.state.feature_net.predict(xt.view())?;
        let mask = if self.state.config.uses_mask() {
            let ps = self.state.classifier.predict(fs.view())?;
            let pt = self.state.classifier.predict(ft.view())?;
            Some(soft_mask(ps.view(), pt.view())?)
        } else {
            None
        };
        Ok(IterationBatch {
            source_idx,
            labels,
            xs,
            xt,
            fs,
            ft,
            mask,
        })
    }

    /// Ascends the batch semi-dual over `g`; `f` and `η` are untouched.
    pub fn potential_phase(&mut self, batch: &IterationBatch) -> std::result::Result<(), TrainFailure> {
        if !self.state.config.uses_transport() {
            return Ok(());
        }
        for _ in 0..self.state.config.potential_steps {
            let Some((_, grads)) =
                potential_gradient(&self.state, batch.fs.view(), &batch.labels, batch.ft.view(), batch.mask.as_ref())?
            else {
                return Ok(());
            };
            let outcome = adam_step(
                &mut self.state.potential_net,
                &grads,
                &mut self.state.potential_adam,
                Direction::Maximize,
            )?;
            if outcome == StepOutcome::SkippedNonFinite {
                return Err(self.diverged("non-finite potential gradient"));
            }
        }
        Ok(())
    }

    /// Descends the combined loss over `f` and `η`; `g` is untouched.
    pub fn model_phase(&mut self, batch: &IterationBatch) -> std::result::Result<IterationLosses, TrainFailure> {
        let g = model_gradients(&self.state, batch.xs.view(), &batch.labels, batch.xt.view(), batch.mask.as_ref())?;
        let l = g.losses;
        if !l.total.is_finite() {
            return Err(self.diverged(format!("non-finite loss (ce {}, ot {}, ent {})", l.ce, l.ot, l.ent)));
        }
        self.apply_model_step(&g.feature, &g.classifier)?;
        Ok(l)
    }

    /// One full iteration of the alternation.
    pub fn iterate(&mut self) -> std::result::Result<IterationLosses, TrainFailure> {
        let every = self.state.config.prior_refresh == PriorRefresh::EveryIteration;
        if self.state.config.uses_transport() && every {
            self.refresh_priors()?;
        }
        let batch = self.prepare_batch()?;
        self.potential_phase(&batch)?;
        let losses = self.model_phase(&batch)?;
        self.state.iteration += 1;
        Ok(losses)
    }

    pub fn run_epoch(&mut self) -> std::result::Result<EpochMetrics, TrainFailure> {
        if self.state.config.uses_transport() && self.state.config.prior_refresh == PriorRefresh::EveryEpoch {
            self.refresh_priors()?;
        }
        let iters = self.iterations_per_epoch();
        let mut sums = [0.0; 4];
        for _ in 0..iters {
            let l = self.iterate()?;
            for (s, v) in sums.iter_mut().zip([l.ce, l.ot, l.ent, l.total]) {
                *s += v;
            }
        }
        let n = iters.max(1) as f64;
        let (target_acc, prior_l1_error) = self.evaluate()?;
        let metrics = EpochMetrics {
            epoch: self.state.epoch,
            loss_ce: sums[0] / n,
            loss_ot: sums[1] / n,
            loss_ent: sums[2] / n,
            loss_total: sums[3] / n,
            target_acc,
            prior_l1_error,
            seconds: self.start.elapsed().as_secs_f64(),
        };
        self.state.metrics.push(metrics.clone());
        self.state.epoch += 1;
        Ok(metrics)
    }

    fn evaluate(&self) -> Result<(Option<f64>, Option<f64>)> {
        let Some(ev) = self.eval else {
            return Ok((None, None));
        };
        let pred = self.state.predict(self.target)?;
        let prior = estimate_target_prior(pred.view())?;
        Ok((
            Some(accuracy(pred.view(), ev.target_labels)),
            Some(prior.l1_distance(ev.true_target_prior)?),
        ))
    }
}

/// Pre-trains, runs `config.epochs` epochs and ends with a prior refresh so
/// the returned weights describe the final model.
pub fn train_ssot(
    source: &LabeledMeasure,
    target: ArrayView2<'_, f64>,
    config: &SsotConfig,
    eval: Option<Evaluation<'_>>,
) -> std::result::Result<SsotState, TrainFailure> {
    let mut trainer = Trainer::new(source, target, config, eval)?;
    trainer.pretrain()?;
    for _ in 0..config.epochs {
        trainer.run_epoch()?;
    }
    trainer.refresh_priors()?;
    Ok(trainer.into_state())
}
