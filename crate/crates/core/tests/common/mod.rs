//! Finite-difference checks shared by the gradient suite and the
//! acceptance run. Each returns the worst relative error it saw, with
//! `|fd − analytic| / max(|fd|, |analytic|, 1e-6)` per entry.

#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssot_core::datagen::{generate, SynthConfig};
use ssot_core::measures::CostMatrix;
use ssot_core::nnet::{Gradients, Mlp, OutputActivation};
use ssot_core::semidual::{semidual_gradient, semidual_objective};
use ssot_core::ssot::{model_gradients, potential_gradient, SsotConfig, SsotState, Trainer};

pub const STEP: f64 = 1e-6;

pub fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

pub fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    let w = Array1::from_shape_fn(n, |_| rng.random_range(0.1..1.0));
    let s = w.sum();
    w / s
}

/// Semi-dual gradient with respect to the potential vector.
pub fn semidual_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ns, nt) = (rng.random_range(2..10), rng.random_range(2..10));
    let eps = rng.random_range(0.2..2.0);
    let cost = CostMatrix::new(Array2::from_shape_fn((ns, nt), |_| rng.random_range(0.0..4.0))).unwrap();
    let mu = random_simplex(&mut rng, ns);
    let nu = random_simplex(&mut rng, nt);
    let v = Array1::from_shape_fn(nt, |_| rng.random_range(-1.0..1.0));
    let an = semidual_gradient(v.view(), mu.view(), nu.view(), &cost, eps).unwrap();
    let h = |v: &Array1<f64>| semidual_objective(v.view(), mu.view(), nu.view(), &cost, eps).unwrap();
    (0..nt)
        .map(|j| {
            let (mut hi, mut lo) = (v.clone(), v.clone());
            hi[j] += STEP;
            lo[j] -= STEP;
            rel_err((h(&hi) - h(&lo)) / (2.0 * STEP), an[j])
        })
        .fold(0.0, f64::max)
}

/// Central differences over every parameter of `net`, against `grads`.
/// `loss` is evaluated with the perturbed network in place.
pub fn network_error(net: &mut Mlp, grads: &Gradients, mut loss: impl FnMut(&Mlp) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for l in 0..net.layers().len() {
        let (rows, cols) = net.layers()[l].weight.dim();
        for idx in (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))) {
            let orig = net.layers()[l].weight[idx];
            net.layers_mut()[l].weight[idx] = orig + STEP;
            let up = loss(net);
            net.layers_mut()[l].weight[idx] = orig - STEP;
            let down = loss(net);
            net.layers_mut()[l].weight[idx] = orig;
            worst = worst.max(rel_err((up - down) / (2.0 * STEP), grads.weights[l][idx]));
        }
        for k in 0..net.layers()[l].bias.len() {
            let orig = net.layers()[l].bias[k];
            net.layers_mut()[l].bias[k] = orig + STEP;
            let up = loss(net);
            net.layers_mut()[l].bias[k] = orig - STEP;
            let down = loss(net);
            net.layers_mut()[l].bias[k] = orig;
            worst = worst.max(rel_err((up - down) / (2.0 * STEP), grads.biases[l][k]));
        }
    }
    worst
}

/// A trainer a few epochs into adaptation, so that the weights, the mask and
/// the potential are all non-trivial.
pub fn warmed_up_state(seed: u64) -> (SsotState, ssot_core::ssot::IterationBatch) {
    let task = generate(&SynthConfig { samples_per_class: 30, seed, ..Default::default() }).unwrap();
    let config = SsotConfig {
        epochs: 2,
        pretrain_steps: 50,
        weight_warmup_epochs: 0,
        batch_source: 16,
        batch_target: 12,
        feature_hidden: 16,
        feature_dim: 8,
        potential_hidden: 8,
        seed,
        ..Default::default()
    };
    let mut tr = Trainer::new(&task.source, task.target_points.view(), &config, None).unwrap();
    tr.pretrain().unwrap();
    for _ in 0..2 {
        tr.run_epoch().unwrap();
    }
    tr.refresh_priors().unwrap();
    let batch = tr.prepare_batch().unwrap();
    (tr.into_state(), batch)
}

/// Worst relative errors for the feature network, the classifier and the
/// potential network on one warmed-up batch.
pub fn model_gradient_errors(seed: u64) -> [f64; 3] {
    let (mut state, b) = warmed_up_state(seed);
    let total = |s: &SsotState| {
        model_gradients(s, b.source_points(), b.labels(), b.target_points(), b.mask())
            .unwrap()
            .losses
            .total
    };
    let an = model_gradients(&state, b.source_points(), b.labels(), b.target_points(), b.mask()).unwrap();

    let mut f = state.feature_net.clone();
    let f_err = network_error(&mut f, &an.feature, |net| {
        state.feature_net = net.clone();
        total(&state)
    });
    state.feature_net = f;

    let mut eta = state.classifier.clone();
    let eta_err = network_error(&mut eta, &an.classifier, |net| {
        state.classifier = net.clone();
        total(&state)
    });
    state.classifier = eta;

    let semi = |s: &SsotState| {
        potential_gradient(s, b.source_features(), b.labels(), b.target_features(), b.mask())
            .unwrap()
            .expect("batch carries mass")
    };
    let (_, g_an) = semi(&state);
    let mut g = state.potential_net.clone();
    let g_err = network_error(&mut g, &g_an, |net| {
        state.potential_net = net.clone();
        semi(&state).0
    });
    [f_err, eta_err, g_err]
}

/// The softmax head's backward pass applied to the cross-entropy upstream
/// gradient must equal `(p − onehot(y)) / b` at the logits, which shows up
/// directly in the head's bias gradient.
pub fn softmax_ce_identity_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, d, k) = (rng.random_range(1..9), rng.random_range(1..6), rng.random_range(2..7));
    let net = Mlp::new(&[d, k], OutputActivation::Softmax, seed).unwrap();
    let x = Array2::from_shape_fn((b, d), |_| rng.random_range(-2.0..2.0));
    let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    let (p, cache) = net.forward(x.view()).unwrap();
    let mut up = Array2::zeros((b, k));
    for (i, &yi) in y.iter().enumerate() {
        up[[i, yi]] = -1.0 / (b as f64 * p[[i, yi]]);
    }
    let grads = net.backward(&cache, up.view()).unwrap();
    let mut expect = p.sum_axis(ndarray::Axis(0)) / b as f64;
    for &yi in &y {
        expect[yi] -= 1.0 / b as f64;
    }
    grads.biases[0]
        .iter()
        .zip(&expect)
        .map(|(&a, &e)| rel_err(e, a))
        .fold(0.0, f64::max)
}
