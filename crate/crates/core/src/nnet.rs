//! A small multilayer perceptron with hand-written reverse mode and Adam.
//!
//! Hidden layers use ReLU; the head is either the identity or a softmax.
//! The same type serves as feature extractor, classifier and Kantorovich
//! potential network.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_matrices, save_matrices};
use crate::numerics::softmax_rows;

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Softmax,
}

/// Affine layer `x ↦ x W + b` with `W` of shape `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
    output: OutputActivation,
    seed: Option<u64>,
    /// Changes whenever parameters change; forward caches record it.
    generation: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.output == other.output
    }
}

/// Activations recorded by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// Input of every layer; `inputs[0]` is the batch.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of every layer.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

/// Parameter gradients shaped like the owning network, plus the gradient
/// with respect to the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub input: Option<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
            input: None,
        }
    }

    /// Adds the parameter part of `other`; input gradients are not summed.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetManifest {
    layer_dims: Vec<usize>,
    hidden_activation: String,
    output_activation: OutputActivation,
    seed: Option<u64>,
}

impl Mlp {
    /// Seeded network with uniform fan-in scaled weights and zero biases.
    /// ReLU layers draw from `U(±√(6/fan_in))`, the head from `U(±√(3/fan_in))`.
    pub fn new(layer_dims: &[usize], output: OutputActivation, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "need at least input and output dims, all positive; got {layer_dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = layer_dims.len() - 1;
        let layers = layer_dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let gain = if l + 1 < n_layers { 6.0 } else { 3.0 };
                let bound = (gain / fan_in as f64).sqrt();
                Dense {
                    weight: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound)),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            layers,
            output,
            seed: Some(seed),
            generation: fresh_generation(),
        })
    }

    pub fn from_layers(layers: Vec<Dense>, output: OutputActivation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("network without layers".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.ncols() {
                return Err(Error::DimensionMismatch(format!("layer {l}: bias/weight mismatch")));
            }
            if let Some(next) = layers.get(l + 1) {
                if next.weight.nrows() != layer.weight.ncols() {
                    return Err(Error::DimensionMismatch(format!(
                        "layer {l} outputs {} but layer {} expects {}",
                        layer.weight.ncols(),
                        l + 1,
                        next.weight.nrows()
                    )));
                }
            }
        }
        Ok(Self {
            layers,
            output,
            seed: None,
            generation: fresh_generation(),
        })
    }

    /// Zeroes the last layer, so the network starts as the constant zero map.
    pub fn zero_final_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        self.generation = fresh_generation();
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weight.nrows()];
        dims.extend(self.layers.iter().map(|l| l.weight.ncols()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.ncols()
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.generation = fresh_generation();
        &mut self.layers
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, batch: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(batch)?;
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut a = batch.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weight) + &layer.bias;
            inputs.push(a);
            a = if l + 1 < n_layers {
                z.mapv(|x| x.max(0.0))
            } else {
                match self.output {
                    OutputActivation::Identity => z.clone(),
                    OutputActivation::Softmax => softmax_rows(z.view()),
                }
            };
            pre.push(z);
        }
        let cache = ForwardCache {
            generation: self.generation,
            inputs,
            pre,
            output: a.clone(),
        };
        Ok((a, cache))
    }

    /// Forward pass without keeping activations.
    pub fn predict(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(batch)?;
        let n_layers = self.layers.len();
        let mut a = batch.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weight) + &layer.bias;
            a = if l + 1 < n_layers {
                z.mapv(|x| x.max(0.0))
            } else {
                match self.output {
                    OutputActivation::Identity => z,
                    OutputActivation::Softmax => softmax_rows(z.view()),
                }
            };
        }
        Ok(a)
    }

    fn check_input(&self, batch: ArrayView2<'_, f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "network expects {} input features, got {}",
                self.input_dim(),
                batch.ncols()
            )));
        }
        Ok(())
    }

    /// Reverse pass: given `∂L/∂output`, returns `∂L/∂parameters` and `∂L/∂input`.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<'_, f64>) -> Result<Gradients> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache);
        }
        if upstream.dim() != cache.output.dim() {
            return Err(Error::DimensionMismatch(format!(
                "upstream gradient {:?} for output {:?}",
                upstream.dim(),
                cache.output.dim()
            )));
        }

        let mut dz = match self.output {
            OutputActivation::Identity => upstream.to_owned(),
            OutputActivation::Softmax => {
                // J^T g = p ⊙ (g − ⟨g, p⟩)
                let p = &cache.output;
                let inner = (&upstream * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                p * &(&upstream - &inner)
            }
        };

        let n_layers = self.layers.len();
        let mut weights = vec![Array2::zeros((0, 0)); n_layers];
        let mut biases = vec![Array1::zeros(0); n_layers];
        let mut input_grad = None;
        for l in (0..n_layers).rev() {
            weights[l] = cache.inputs[l].t().dot(&dz);
            biases[l] = dz.sum_axis(Axis(0));
            let da = dz.dot(&self.layers[l].weight.t());
            if l == 0 {
                input_grad = Some(da);
            } else {
                let mut next = da;
                Zip::from(&mut next)
                    .and(&cache.pre[l - 1])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
                dz = next;
            }
        }
        Ok(Gradients {
            weights,
            biases,
            input: input_grad,
        })
    }

    /// Writes `<stem>.bin` (SSOTMAT1 records: W₀, b₀, W₁, b₁, …; biases as
    /// `1 × out` rows) and `<stem>.json` (architecture manifest).
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let bias_rows: Vec<Array2<f64>> = self
            .layers
            .iter()
            .map(|l| l.bias.clone().insert_axis(Axis(0)))
            .collect();
        let mut mats = Vec::with_capacity(2 * self.layers.len());
        for (l, b) in self.layers.iter().zip(&bias_rows) {
            mats.push(l.weight.view());
            mats.push(b.view());
        }
        save_matrices(stem.with_extension("bin"), &mats)?;

        let manifest = NetManifest {
            layer_dims: self.layer_dims(),
            hidden_activation: "relu".into(),
            output_activation: self.output,
            seed: self.seed,
        };
        let path = stem.with_extension("json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let path = stem.with_extension("json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: NetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let bin = stem.with_extension("bin");
        let mats = load_matrices(&bin)?;
        let dims = &manifest.layer_dims;
        if mats.len() != 2 * (dims.len().saturating_sub(1)) {
            return Err(Error::format(&bin, "record count does not match layer_dims"));
        }
        let layers = mats
            .chunks(2)
            .map(|pair| Dense {
                weight: pair[0].clone(),
                bias: pair[1].row(0).to_owned(),
            })
            .collect();
        let mut net = Self::from_layers(layers, manifest.output_activation)?;
        if net.layer_dims() != *dims {
            return Err(Error::format(&bin, "matrix shapes do not match layer_dims"));
        }
        net.seed = manifest.seed;
        Ok(net)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradients contained NaN/Inf; parameters and moments were left alone.
    SkippedNonFinite,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        let zeros = Gradients::zeros_like(net);
        Self {
            m_w: zeros.weights.clone(),
            v_w: zeros.weights,
            m_b: zeros.biases.clone(),
            v_b: zeros.biases,
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn congruent(&self, net: &Mlp) -> bool {
        self.m_w.len() == net.layers.len()
            && self
                .m_w
                .iter()
                .zip(&net.layers)
                .all(|(m, l)| m.dim() == l.weight.dim())
    }
}

/// One Adam update. `Maximize` ascends by negating the gradient.
pub fn adam_step(
    net: &mut Mlp,
    grads: &Gradients,
    state: &mut AdamState,
    direction: Direction,
) -> Result<StepOutcome> {
    if !state.congruent(net) || grads.weights.len() != net.layers.len() {
        return Err(Error::DimensionMismatch("optimizer state does not match network".into()));
    }
    if !grads.is_finite() {
        return Ok(StepOutcome::SkippedNonFinite);
    }
    state.step += 1;
    let sign = match direction {
        Direction::Minimize => 1.0,
        Direction::Maximize => -1.0,
    };
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let lr_t = state.learning_rate * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
    let eps_hat = state.eps * (1.0 - b2.powi(t)).sqrt();

    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        let g = sign * g;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr_t * *m / (v.sqrt() + eps_hat);
    };
    for (l, layer) in net.layers.iter_mut().enumerate() {
        Zip::from(&mut layer.weight)
            .and(&grads.weights[l])
            .and(&mut state.m_w[l])
            .and(&mut state.v_w[l])
            .for_each(|p, &g, m, v| update(p, g, m, v));
        Zip::from(&mut layer.bias)
            .and(&grads.biases[l])
            .and(&mut state.m_b[l])
            .and(&mut state.v_b[l])
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
    net.generation = fresh_generation();
    Ok(StepOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};

    fn random_batch(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5))
    }

    fn zeroed(dims: &[usize], out: OutputActivation) -> Mlp {
        let mut net = Mlp::new(dims, out, 0).unwrap();
        for l in net.layers_mut() {
            l.weight.fill(0.0);
        }
        net
    }

    #[test]
    fn zero_network_outputs() {
        let x = random_batch(1, 5, 3);
        let net = zeroed(&[3, 4, 2], OutputActivation::Identity);
        assert_eq!(net.predict(x.view()).unwrap(), Array2::<f64>::zeros((5, 2)));
        let net = zeroed(&[3, 4], OutputActivation::Softmax);
        let p = net.predict(x.view()).unwrap();
        assert!(p.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn forward_matches_straight_line_recomputation() {
        let net = Mlp::new(&[3, 5, 4, 2], OutputActivation::Identity, 17).unwrap();
        let x = random_batch(2, 4, 3);
        let (y, _) = net.forward(x.view()).unwrap();
        for r in 0..4 {
            let mut a: Vec<f64> = x.row(r).to_vec();
            for (l, layer) in net.layers().iter().enumerate() {
                let mut z = vec![0.0; layer.weight.ncols()];
                for (o, zo) in z.iter_mut().enumerate() {
                    *zo = layer.bias[o];
                    for (i, ai) in a.iter().enumerate() {
                        *zo += ai * layer.weight[[i, o]];
                    }
                }
                if l + 1 < net.layers().len() {
                    z.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                a = z;
            }
            for (o, v) in a.iter().enumerate() {
                assert!((y[[r, o]] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Mlp::new(&[3, 2], OutputActivation::Identity, 0).unwrap();
        assert!(matches!(net.forward(Array2::zeros((1, 4)).view()), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn single_linear_layer_gradient() {
        let net = Mlp::new(&[3, 2], OutputActivation::Identity, 5).unwrap();
        let x = array![[0.5, -1.0, 2.0]];
        let (_, cache) = net.forward(x.view()).unwrap();
        let g = net.backward(&cache, array![[0.0, 1.0]].view()).unwrap();
        assert_eq!(g.weights[0], array![[0.0, 0.5], [0.0, -1.0], [0.0, 2.0]]);
        assert_eq!(g.biases[0], array![0.0, 1.0]);
        assert_eq!(g.input.unwrap().row(0), net.layers()[0].weight.column(1));
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let mut net = Mlp::new(&[2, 3, 1], OutputActivation::Identity, 3).unwrap();
        net.layers_mut()[0].bias[1] = -100.0;
        let x = array![[0.3, 0.2]];
        let (_, cache) = net.forward(x.view()).unwrap();
        let g = net.backward(&cache, array![[1.0]].view()).unwrap();
        assert_eq!(g.weights[0].column(1), array![0.0, 0.0]);
        assert_eq!(g.biases[0][1], 0.0);
        assert_eq!(g.weights[1][[1, 0]], 0.0);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut net = Mlp::new(&[2, 2], OutputActivation::Identity, 3).unwrap();
        let (_, cache) = net.forward(array![[1.0, 2.0]].view()).unwrap();
        let g = net.backward(&cache, array![[1.0, 1.0]].view()).unwrap();
        let mut state = AdamState::new(&net, 0.1);
        adam_step(&mut net, &g, &mut state, Direction::Minimize).unwrap();
        assert!(matches!(
            net.backward(&cache, array![[1.0, 1.0]].view()),
            Err(Error::StaleCache)
        ));
        let other = Mlp::new(&[2, 2], OutputActivation::Identity, 3).unwrap();
        assert!(matches!(
            other.backward(&cache, array![[1.0, 1.0]].view()),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut net = Mlp::new(&[2, 3, 1], OutputActivation::Identity, 8).unwrap();
        let before = net.clone();
        let mut state = AdamState::new(&net, 0.01);
        let g = Gradients::zeros_like(&net);
        adam_step(&mut net, &g, &mut state, Direction::Minimize).unwrap();
        assert_eq!(net, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let net0 = Mlp::from_layers(
            vec![Dense {
                weight: array![[0.7]],
                bias: array![0.0],
            }],
            OutputActivation::Identity,
        )
        .unwrap();
        for (dir, sign) in [(Direction::Minimize, -1.0), (Direction::Maximize, 1.0)] {
            let mut net = net0.clone();
            let mut state = AdamState::new(&net, 0.05);
            let mut g = Gradients::zeros_like(&net);
            g.weights[0][[0, 0]] = 3.0;
            adam_step(&mut net, &g, &mut state, dir).unwrap();
            let delta = net.layers()[0].weight[[0, 0]] - 0.7;
            assert!((delta - sign * 0.05).abs() < 1e-9);
            assert!(delta.abs() < 0.05);
        }
    }

    #[test]
    fn adam_skips_non_finite() {
        let mut net = Mlp::new(&[2, 1], OutputActivation::Identity, 8).unwrap();
        let before = net.clone();
        let mut state = AdamState::new(&net, 0.01);
        let mut g = Gradients::zeros_like(&net);
        g.biases[0][0] = f64::NAN;
        let out = adam_step(&mut net, &g, &mut state, Direction::Minimize).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(net, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn adam_regression_loss_mostly_decreases() {
        let x = random_batch(10, 64, 2);
        let y = x.map_axis(Axis(1), |r| (r[0] * 2.0).sin() + r[1] * r[1]).insert_axis(Axis(1));
        let mut net = Mlp::new(&[2, 16, 1], OutputActivation::Identity, 4).unwrap();
        let mut state = AdamState::new(&net, 1e-3);
        let mut losses = Vec::new();
        for _ in 0..500 {
            let (out, cache) = net.forward(x.view()).unwrap();
            let resid = &out - &y;
            losses.push(resid.mapv(|r| r * r).mean().unwrap());
            let g = net.backward(&cache, (resid * (2.0 / 64.0)).view()).unwrap();
            adam_step(&mut net, &g, &mut state, Direction::Minimize).unwrap();
        }
        let decreasing = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(decreasing as f64 >= 0.9 * 499.0, "{decreasing}/499");
        assert!(losses[499] < 0.5 * losses[0]);
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let run = || {
            let x = random_batch(3, 8, 2);
            let mut net = Mlp::new(&[2, 8, 3], OutputActivation::Softmax, 21).unwrap();
            let mut state = AdamState::new(&net, 1e-2);
            for _ in 0..20 {
                let (p, cache) = net.forward(x.view()).unwrap();
                let g = net.backward(&cache, p.mapv(|v| -v.ln()).view()).unwrap();
                adam_step(&mut net, &g, &mut state, Direction::Minimize).unwrap();
            }
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = Mlp::new(&[3, 5, 2], OutputActivation::Softmax, 99).unwrap();
        let stem = dir.path().join("eta");
        net.save(&stem).unwrap();
        let back = Mlp::load(&stem).unwrap();
        assert_eq!(back, net);
        let json = std::fs::read_to_string(stem.with_extension("json")).unwrap();
        assert!(json.contains("\"softmax\"") && json.contains("99"));
    }
}
