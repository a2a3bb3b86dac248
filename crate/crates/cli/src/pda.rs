//! `ssot pda synth` and `ssot pda run`.

use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use serde::Serialize;

use ssot_core::datagen::{generate, load_task, save_task, PdaTask, SynthConfig};
use ssot_core::ssot::{train_ssot, write_metrics_csv, Ablation, Evaluation, SsotConfig};

use crate::config_file::{apply_overrides, parse_key_values};
use crate::output::{resolve_out_dir, RunManifest};
use crate::{create_dir, write_json, CliError, CliResult};

#[derive(Debug, Subcommand)]
pub enum PdaCommand {
    /// Generate a synthetic partial-domain task (source.csv, target.csv, task.json).
    Synth(SynthArgs),
    /// Train the adaptation model on a task directory.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 6)]
    k_source: usize,
    #[arg(long, default_value_t = 3)]
    k_target: usize,
    #[arg(long, default_value_t = 100)]
    samples_per_class: usize,
    /// Per-class target counts (comma separated), for label-shifted targets.
    #[arg(long, value_delimiter = ',')]
    target_class_counts: Option<Vec<usize>>,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 6.0)]
    radius: f64,
    #[arg(long, default_value_t = 0.8)]
    std: f64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "1.5,0.5")]
    translation: Vec<f64>,
    /// Clockwise rotation of the target, in degrees.
    #[arg(long, default_value_t = 15.0, allow_hyphen_values = true)]
    rotation_deg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; defaults to `$SSOT_OUT_DIR/synth`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Directory written by `pda synth`.
    #[arg(long)]
    task: PathBuf,
    /// key = value file; keys are the training config field names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Disable one component: no-mask, no-weights, no-ent, source-only.
    #[arg(long)]
    ablate: Option<Ablation>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma separated seeds, one worker thread and output directory each.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda_ot: Option<f64>,
    #[arg(long)]
    lambda_ent: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    batch_source: Option<usize>,
    #[arg(long)]
    batch_target: Option<usize>,
    #[arg(long)]
    lr_model: Option<f64>,
    #[arg(long)]
    lr_potential: Option<f64>,
    /// Output directory; defaults to `$SSOT_OUT_DIR/pda-<ablation>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(cmd: PdaCommand, argv: &[String]) -> CliResult<()> {
    match cmd {
        PdaCommand::Synth(a) => synth(a, argv),
        PdaCommand::Run(a) => train(a, argv),
    }
}

fn synth(a: SynthArgs, argv: &[String]) -> CliResult<()> {
    let config = SynthConfig {
        k_source: a.k_source,
        k_target: a.k_target,
        samples_per_class: a.samples_per_class,
        target_class_counts: a.target_class_counts,
        dim: a.dim,
        radius: a.radius,
        std: a.std,
        translation: a.translation,
        rotation_deg: a.rotation_deg,
        seed: a.seed,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = create_dir(&resolve_out_dir(a.out.as_deref(), "synth"))?;
    let manifest = RunManifest::start(argv, &config, config.seed);
    let task = generate(&config)?;
    save_task(&task, &config, &dir)?;
    let outputs = ["source.csv", "target.csv", "task.json"].map(|f| dir.join(f)).to_vec();
    manifest.finish(&dir, "ok", outputs)?;
    println!(
        "{} source and {} target rows written to {}",
        task.source.measure().len(),
        task.target_points.nrows(),
        dir.display()
    );
    Ok(())
}

fn build_config(a: &RunArgs) -> CliResult<SsotConfig> {
    let mut pairs = Vec::new();
    if let Some(p) = &a.config {
        let text = std::fs::read_to_string(p)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        pairs = parse_key_values(&text)?;
    }
    for s in &a.set {
        pairs.extend(parse_key_values(s)?);
    }
    let mut c = apply_overrides(&SsotConfig::default(), &pairs)?;
    macro_rules! flag {
        ($field:ident, $value:expr) => {
            if let Some(v) = $value {
                c.$field = v;
            }
        };
    }
    flag!(ablation, a.ablate);
    flag!(seed, a.seed);
    flag!(epochs, a.epochs);
    flag!(lambda_ot, a.lambda_ot);
    flag!(lambda_ent, a.lambda_ent);
    flag!(epsilon, a.eps);
    flag!(batch_source, a.batch_source);
    flag!(batch_target, a.batch_target);
    flag!(lr_model, a.lr_model);
    flag!(lr_potential, a.lr_potential);
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

#[derive(Debug, Serialize)]
struct RunResult {
    seed: u64,
    ablation: Ablation,
    target_acc: Option<f64>,
    prior_l1_error: Option<f64>,
    target_prior: Vec<f64>,
    class_weights: Vec<f64>,
}

fn train(a: RunArgs, argv: &[String]) -> CliResult<()> {
    let config = build_config(&a)?;
    if !a.task.join("task.json").exists() {
        return Err(CliError::Usage(format!("{}: no task.json (run `ssot pda synth` first)", a.task.display())));
    }
    let (task, _) = load_task(&a.task)?;
    let root = resolve_out_dir(a.out.as_deref(), &format!("pda-{}", config.ablation));

    let Some(seeds) = a.seeds else {
        let dir = create_dir(&root)?;
        return run_one(&task, config, &dir, argv);
    };
    let results: Vec<CliResult<()>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let cfg = SsotConfig { seed, ..config.clone() };
                let dir = root.join(format!("seed-{seed}"));
                let task = &task;
                scope.spawn(move || run_one(task, cfg, &create_dir(&dir)?, argv))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut worst: Option<CliError> = None;
    for r in results {
        if let Err(e) = r {
            eprintln!("error: {e}");
            if worst.as_ref().is_none_or(|w| e.exit_code() > w.exit_code()) {
                worst = Some(e);
            }
        }
    }
    worst.map_or(Ok(()), Err)
}

fn run_one(task: &PdaTask, config: SsotConfig, dir: &Path, argv: &[String]) -> CliResult<()> {
    let manifest = RunManifest::start(argv, &config, config.seed);
    let eval = Evaluation {
        target_labels: task.target_labels_heldout(),
        true_target_prior: &task.true_target_prior,
    };
    let metrics_path = dir.join("metrics.csv");
    let state = match train_ssot(&task.source, task.target_points.view(), &config, Some(eval)) {
        Ok(s) => s,
        Err(failure) => {
            let mut outputs = Vec::new();
            let mut message = failure.error.to_string();
            if let Some(snap) = &failure.snapshot {
                let path = dir.join("snapshot");
                snap.save(&path)?;
                write_metrics_csv(&metrics_path, &snap.metrics)?;
                message = format!("{message}; snapshot saved to {}", path.display());
                outputs = vec![path, metrics_path];
            }
            let numerical = failure.error.is_numerical();
            manifest.finish(dir, if numerical { "diverged" } else { "failed" }, outputs)?;
            return Err(if numerical {
                CliError::Numerical(message)
            } else {
                CliError::Core(failure.error)
            });
        }
    };
    let model = dir.join("model");
    state.save(&model)?;
    write_metrics_csv(&metrics_path, &state.metrics)?;
    let last = state.metrics.last();
    let result = RunResult {
        seed: config.seed,
        ablation: config.ablation,
        target_acc: last.and_then(|m| m.target_acc),
        prior_l1_error: state.target_prior.l1_distance(&task.true_target_prior).ok(),
        target_prior: state.target_prior.probs().to_vec(),
        class_weights: state.importance.weights().to_vec(),
    };
    let result_path = dir.join("result.json");
    write_json(&result_path, &result)?;
    manifest.finish(dir, "ok", vec![metrics_path, model, result_path])?;
    println!(
        "seed {} ({}): target accuracy {}, written to {}",
        config.seed,
        config.ablation,
        result.target_acc.map_or("n/a".into(), |x| format!("{x:.4}")),
        dir.display()
    );
    Ok(())
}
