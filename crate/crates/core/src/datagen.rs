//! Seeded synthetic partial domain adaptation tasks.
//!
//! Class `k` of `K_source` is an isotropic Gaussian centered at angle
//! `2πk/K_source` on a circle in the first two coordinates (other
//! coordinates centered at 0). The target draws only from the first
//! `K_target` classes and is then rotated clockwise by the configured angle
//! about the origin and translated.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_points_csv, write_points_csv};
use crate::measures::{DiscreteMeasure, LabeledMeasure};
use crate::ssot::LabelPrior;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub k_source: usize,
    pub k_target: usize,
    pub samples_per_class: usize,
    /// Per-class target counts overriding `samples_per_class` for the
    /// target (label-shift scenario); length `k_target`.
    pub target_class_counts: Option<Vec<usize>>,
    pub dim: usize,
    pub radius: f64,
    pub std: f64,
    pub translation: Vec<f64>,
    /// Clockwise, in degrees.
    pub rotation_deg: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            k_source: 6,
            k_target: 3,
            samples_per_class: 100,
            target_class_counts: None,
            dim: 2,
            radius: 6.0,
            std: 0.8,
            translation: vec![1.5, 0.5],
            rotation_deg: 15.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_target == 0 || self.k_target >= self.k_source {
            return Err(Error::InvalidInput(format!(
                "need 1 <= k_target < k_source, got k_target={} k_source={}",
                self.k_target, self.k_source
            )));
        }
        if self.dim < 2 {
            return Err(Error::InvalidInput("dim must be at least 2".into()));
        }
        if !(self.std > 0.0 && self.std.is_finite()) || !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidInput("std must be > 0 and radius >= 0".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidInput("samples_per_class must be >= 1".into()));
        }
        if self.translation.len() != self.dim || self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "translation must have {} finite entries",
                self.dim
            )));
        }
        if !self.rotation_deg.is_finite() {
            return Err(Error::InvalidInput("rotation must be finite".into()));
        }
        if let Some(c) = &self.target_class_counts {
            if c.len() != self.k_target || c.iter().sum::<usize>() == 0 {
                return Err(Error::InvalidInput(format!(
                    "target_class_counts needs {} entries with a positive total",
                    self.k_target
                )));
            }
        }
        Ok(())
    }

    fn target_counts(&self) -> Vec<usize> {
        self.target_class_counts
            .clone()
            .unwrap_or_else(|| vec![self.samples_per_class; self.k_target])
    }
}

/// A generated task. Training code should take `source` and
/// `target_points` only; the held-out labels exist for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PdaTask {
    pub source: LabeledMeasure,
    pub target_points: Array2<f64>,
    target_labels_heldout: Vec<usize>,
    pub true_target_prior: LabelPrior,
}

impl PdaTask {
    pub fn target_labels_heldout(&self) -> &[usize] {
        &self.target_labels_heldout
    }

    pub fn num_classes(&self) -> usize {
        self.source.num_classes()
    }
}

fn center(k: usize, classes: usize, radius: f64, dim: usize) -> Array1<f64> {
    let angle = 2.0 * PI * k as f64 / classes as f64;
    let mut c = Array1::zeros(dim);
    c[0] = radius * angle.cos();
    c[1] = radius * angle.sin();
    c
}

pub fn generate(config: &SynthConfig) -> Result<PdaTask> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim;
    let mut sample = |k: usize, n: usize, out: &mut Vec<f64>, labels: &mut Vec<usize>| {
        let c = center(k, config.k_source, config.radius, d);
        for _ in 0..n {
            for &ck in c.iter() {
                let z: f64 = StandardNormal.sample(&mut rng);
                out.push(ck + config.std * z);
            }
            labels.push(k);
        }
    };

    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for k in 0..config.k_source {
        sample(k, config.samples_per_class, &mut xs, &mut ys);
    }
    let (mut xt, mut yt) = (Vec::new(), Vec::new());
    let counts = config.target_counts();
    for (k, &n) in counts.iter().enumerate() {
        sample(k, n, &mut xt, &mut yt);
    }

    let source_points = Array2::from_shape_vec((ys.len(), d), xs).expect("consistent shape");
    let mut target_points = Array2::from_shape_vec((yt.len(), d), xt).expect("consistent shape");
    let theta = -config.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    for mut row in target_points.rows_mut() {
        let (a, b) = (row[0], row[1]);
        row[0] = cos * a - sin * b;
        row[1] = sin * a + cos * b;
        for (x, t) in row.iter_mut().zip(&config.translation) {
            *x += t;
        }
    }

    let total: usize = counts.iter().sum();
    let mut prior = vec![0.0; config.k_source];
    for (p, &n) in prior.iter_mut().zip(&counts) {
        *p = n as f64 / total as f64;
    }
    Ok(PdaTask {
        source: LabeledMeasure::new(DiscreteMeasure::uniform(source_points)?, ys, config.k_source)?,
        target_points,
        target_labels_heldout: yt,
        true_target_prior: LabelPrior::new(prior)?,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskManifest {
    config: SynthConfig,
    num_classes: usize,
    true_target_prior: LabelPrior,
    target_labels_heldout: Vec<usize>,
}

/// Writes `source.csv` (with labels), `target.csv` (points only) and
/// `task.json` (generator config, true prior, held-out labels).
pub fn save_task(task: &PdaTask, config: &SynthConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_points_csv(dir.join("source.csv"), task.source.measure().points(), Some(task.source.labels()))?;
    write_points_csv(dir.join("target.csv"), task.target_points.view(), None)?;
    let manifest = TaskManifest {
        config: config.clone(),
        num_classes: task.num_classes(),
        true_target_prior: task.true_target_prior.clone(),
        target_labels_heldout: task.target_labels_heldout.clone(),
    };
    let path = dir.join("task.json");
    let json = serde_json::to_string_pretty(&manifest).expect("serializable");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// Inverse of [`save_task`]; also returns the stored generator config.
pub fn load_task(dir: impl AsRef<Path>) -> Result<(PdaTask, SynthConfig)> {
    let dir = dir.as_ref();
    let path = dir.join("task.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: TaskManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;

    let src_path = dir.join("source.csv");
    let src = read_points_csv(&src_path)?;
    let labels = src
        .labels
        .ok_or_else(|| Error::format(&src_path, "missing label column"))?;
    let tgt = read_points_csv(dir.join("target.csv"))?;
    if tgt.points.nrows() != manifest.target_labels_heldout.len() || tgt.points.ncols() != src.points.ncols() {
        return Err(Error::format(&path, "target.csv does not match task.json"));
    }
    let task = PdaTask {
        source: LabeledMeasure::new(DiscreteMeasure::uniform(src.points)?, labels, manifest.num_classes)?,
        target_points: tgt.points,
        target_labels_heldout: manifest.target_labels_heldout,
        true_target_prior: manifest.true_target_prior,
    };
    Ok((task, manifest.config))
}
