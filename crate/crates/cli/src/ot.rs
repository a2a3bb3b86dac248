//! `ssot ot solve` and `ssot ot bench`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Subcommand, ValueEnum};
use ndarray::Array1;
use serde::Serialize;

use ssot_core::bench::{run_bench, write_bench_csv, BenchConfig, BenchInstance, BenchSolver};
use ssot_core::io::read_points_csv;
use ssot_core::measures::{squared_euclidean_cost, CostMatrix};
use ssot_core::nnet::{Mlp, OutputActivation};
use ssot_core::semidual::{
    recover_plan, solve_network, solve_vector_sag, solve_vector_sgd, SemidualConfig, SAG_MAX_SOURCE_ATOMS,
};
use ssot_core::sinkhorn::{plan_marginal_error, sinkhorn_solve};

use crate::output::{resolve_out_dir, RunManifest};
use crate::{create_dir, write_json, CliError, CliResult};

#[derive(Debug, Subcommand)]
pub enum OtCommand {
    /// Solve one entropic OT instance between two point CSVs (uniform weights).
    Solve(SolveArgs),
    /// Compare solver convergence epoch by epoch on a seeded Gaussian instance.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverChoice {
    Sinkhorn,
    Sgd,
    Sag,
    Network,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long, value_enum)]
    solver: SolverChoice,
    #[arg(long, default_value_t = 1.0)]
    eps: f64,
    /// Source point CSV.
    #[arg(long)]
    src: PathBuf,
    /// Target point CSV.
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ascent steps for the semi-dual solvers.
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    /// Step size; defaults to 2ε for sgd/sag and 1e-2 (Adam) for network.
    #[arg(long)]
    lr: Option<f64>,
    /// Source atoms per step, 0 for the full source.
    #[arg(long, default_value_t = 0)]
    batch: usize,
    /// Hidden width of the network potential.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 100_000)]
    max_iter: usize,
    /// Sinkhorn marginal tolerance.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Also write the result JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct SolveResult {
    solver: &'static str,
    epsilon: f64,
    value: f64,
    transport_cost: f64,
    iterations: usize,
    seconds: f64,
    marginal_error: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Source atoms (and target atoms unless --n-target is given).
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long)]
    n_target: Option<usize>,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    eps: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, value_delimiter = ',', default_value = "sinkhorn,sgd,sag,network")]
    solvers: Vec<String>,
    /// Step size of the vector solvers.
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    /// Adam step size of the network solver.
    #[arg(long, default_value_t = 1e-2)]
    network_lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory; defaults to `$SSOT_OUT_DIR/bench`.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(cmd: OtCommand, argv: &[String]) -> CliResult<()> {
    match cmd {
        OtCommand::Solve(a) => solve(a),
        OtCommand::Bench(a) => bench(a, argv),
    }
}

fn read_points(path: &Path) -> CliResult<ndarray::Array2<f64>> {
    if !path.exists() {
        return Err(CliError::Usage(format!("{}: no such file", path.display())));
    }
    Ok(read_points_csv(path)?.points)
}

fn solve(a: SolveArgs) -> CliResult<()> {
    if !(a.eps > 0.0) {
        return Err(CliError::Usage(format!("--eps must be > 0, got {}", a.eps)));
    }
    let src = read_points(&a.src)?;
    let tgt = read_points(&a.tgt)?;
    let cost = squared_euclidean_cost(src.view(), tgt.view())?;
    let (ns, nt) = cost.dim();
    let mu = Array1::from_elem(ns, 1.0 / ns as f64);
    let nu = Array1::from_elem(nt, 1.0 / nt as f64);

    let mut solver = a.solver;
    if solver == SolverChoice::Sag && ns > SAG_MAX_SOURCE_ATOMS {
        eprintln!("warning: {ns} source atoms exceed the SAG memory limit ({SAG_MAX_SOURCE_ATOMS}); using sgd");
        solver = SolverChoice::Sgd;
    }
    let start = Instant::now();
    let result = if solver == SolverChoice::Sinkhorn {
        let r = sinkhorn_solve(mu.view(), nu.view(), &cost, a.eps, a.max_iter, a.tol)?;
        if !r.converged {
            eprintln!("warning: sinkhorn stopped after {} iterations (marginal error {:.3e})", r.iterations, r.marginal_error);
        }
        SolveResult {
            solver: "sinkhorn",
            epsilon: a.eps,
            value: r.regularized_value,
            transport_cost: r.transport_cost,
            iterations: r.iterations,
            seconds: start.elapsed().as_secs_f64(),
            marginal_error: r.marginal_error,
        }
    } else {
        let network = solver == SolverChoice::Network;
        let config = SemidualConfig {
            epsilon: a.eps,
            learning_rate: a.lr.unwrap_or(if network { 1e-2 } else { 2.0 * a.eps }),
            inner_steps: a.steps,
            batch_source: if a.batch == 0 { ns } else { a.batch },
            batch_target: nt,
            ..Default::default()
        };
        let (v, name) = match solver {
            SolverChoice::Sgd => (solve_vector_sgd(mu.view(), nu.view(), &cost, &config, a.seed)?.potential.0, "sgd"),
            SolverChoice::Sag => (solve_vector_sag(mu.view(), nu.view(), &cost, &config, a.seed)?.potential.0, "sag"),
            _ => {
                let mut net = Mlp::new(&[tgt.ncols(), a.hidden, 1], OutputActivation::Identity, a.seed)?;
                net.zero_final_layer();
                let sol = solve_network(mu.view(), tgt.view(), nu.view(), &cost, net, &config, a.seed)?;
                (sol.net.predict(tgt.view())?.column(0).to_owned(), "network")
            }
        };
        let seconds = start.elapsed().as_secs_f64();
        semidual_result(name, &v, &mu, &nu, &cost, a.eps, a.steps, seconds)?
    };
    let json = serde_json::to_string_pretty(&result).expect("serializable");
    println!("{json}");
    if let Some(p) = &a.out {
        write_json(p, &result)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn semidual_result(
    solver: &'static str,
    v: &Array1<f64>,
    mu: &Array1<f64>,
    nu: &Array1<f64>,
    cost: &CostMatrix,
    eps: f64,
    steps: usize,
    seconds: f64,
) -> CliResult<SolveResult> {
    let value = ssot_core::semidual::semidual_objective(v.view(), mu.view(), nu.view(), cost, eps)?;
    let plan = recover_plan(v.view(), mu.view(), nu.view(), cost, eps)?;
    Ok(SolveResult {
        solver,
        epsilon: eps,
        value,
        transport_cost: (&plan * &cost.entries()).sum(),
        iterations: steps,
        seconds,
        marginal_error: plan_marginal_error(plan.view(), mu.view(), nu.view()),
    })
}

fn bench(a: BenchArgs, argv: &[String]) -> CliResult<()> {
    let solvers = a
        .solvers
        .iter()
        .map(|s| s.trim().parse::<BenchSolver>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let config = BenchConfig {
        n_source: a.n,
        n_target: a.n_target.unwrap_or(a.n),
        dim: a.dim,
        epsilon: a.eps,
        epochs: a.epochs,
        batch: a.batch,
        vector_learning_rate: a.lr,
        network_learning_rate: a.network_lr,
        solvers,
        seed: a.seed,
        ..Default::default()
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = create_dir(&resolve_out_dir(a.out.as_deref(), "bench"))?;
    let manifest = RunManifest::start(argv, &config, config.seed);
    let instance = BenchInstance::sample(&config)?;
    let report = match run_bench(&instance, &config) {
        Ok(r) => r,
        Err(e) => {
            manifest.finish(&dir, "failed", Vec::new())?;
            return Err(e.into());
        }
    };
    let csv = dir.join("bench.csv");
    let summary = dir.join("summary.json");
    write_bench_csv(&csv, &report.rows)?;
    write_json(&summary, &report.summary)?;
    manifest.finish(&dir, "ok", vec![csv, summary])?;
    for s in &report.summary.solvers {
        println!(
            "{:<8} final {:.6}  {:.3e} s/epoch",
            s.solver, s.final_objective, s.mean_epoch_seconds
        );
    }
    println!(
        "reference {:.6}; final-quarter spread {:.3e}; written to {}",
        report.summary.reference_value,
        report.summary.final_quarter_spread,
        dir.display()
    );
    Ok(())
}
