//! `neuron-ot`: transport solvers, regularized training experiments and
//! trace diagnostics from the command line.
//!
//! Exit codes: 0 success, 2 input or config error, 3 numerical failure or
//! non-convergence, 4 file system error.

mod config;
mod error;
mod matrix;
mod output;
mod selftest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neuron_ot::analysis::{self, bin_series, depth_trace_profile, TracePoint, TraceRow, DEFAULT_EVAL_SIZE};
use neuron_ot::harness::{
    generate_task, train_teacher, ExperimentConfig, Lab, RegimeKind, RunResult, BATCH_SIZE_SWEEP,
};
use neuron_ot::nn::{self, mlp_specs, ModelState};
use neuron_ot::{solve, CostMatrix, DiscreteMeasure, Method};
use serde::{Deserialize, Serialize};

use crate::config::SolveConfig;
use crate::error::CliError;
use crate::output::{sha256_hex, OutputDir};

#[derive(Parser)]
#[command(name = "neuron-ot", version, about = "Optimal-transport regularization of neuron representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Transport solver.
    #[arg(long, global = true)]
    method: Option<Method>,
    /// Regularization weight; skips hyperparameter selection.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Distillation temperature; skips temperature selection.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Mini-batch size.
    #[arg(long = "batch-size", global = true)]
    batch_size: Option<usize>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one transport problem from a dense cost matrix.
    Solve {
        /// Cost matrix CSV (no header).
        #[arg(long)]
        cost: PathBuf,
        /// Source weights (one row or column); uniform when omitted.
        #[arg(long)]
        mu: Option<PathBuf>,
        /// Target weights (one row or column); uniform when omitted.
        #[arg(long)]
        nu: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and save one teacher checkpoint per seed.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a source teacher on the target task.
    Finetune {
        /// Teacher checkpoint shared by all seeds.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a narrower student on the teacher's task.
    Compress {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a smaller student on the target against a source teacher.
    TransferCompress {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Trace-ratio diagnostics.
    Analyze {
        /// Checkpoint before training (depth profile mode).
        #[arg(long, requires = "after")]
        before: Option<PathBuf>,
        /// Checkpoint after training (depth profile mode).
        #[arg(long, requires = "before")]
        after: Option<PathBuf>,
        /// Trace CSV written by a training run (plot-data mode).
        #[arg(long, conflicts_with_all = ["before", "after"])]
        traces: Option<PathBuf>,
        /// Emit the series binned for plotting.
        #[arg(long)]
        plot_data: bool,
        /// Bin width in layers or iterations.
        #[arg(long, default_value_t = 50)]
        bin_width: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy per batch size in {16, 32, 64, 96, 128}.
    Sweep {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in oracle and invariant checks.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Solve { cost, mu, nu, common } => cmd_solve(&cost, mu.as_deref(), nu.as_deref(), &common),
        Command::TrainTeacher { common } => cmd_train_teacher(&common),
        Command::Finetune { teacher, common } => cmd_experiment(RegimeKind::Finetune, teacher.as_deref(), &common),
        Command::Compress { teacher, common } => cmd_experiment(RegimeKind::Compress, teacher.as_deref(), &common),
        Command::TransferCompress { teacher, common } => {
            cmd_experiment(RegimeKind::TransferCompress, teacher.as_deref(), &common)
        }
        Command::Analyze {
            before,
            after,
            traces,
            plot_data,
            bin_width,
            common,
        } => cmd_analyze(before.as_deref(), after.as_deref(), traces.as_deref(), plot_data, bin_width, &common),
        Command::Sweep { teacher, common } => cmd_sweep(teacher.as_deref(), &common),
        Command::Selftest { common } => {
            let failures = selftest::run(common.quiet);
            if failures == 0 {
                Ok(())
            } else {
                Err(CliError::Numerical(format!("{failures} self-test check(s) failed")))
            }
        }
    }
}

fn say(common: &Common, msg: impl AsRef<str>) {
    if !common.quiet {
        println!("{}", msg.as_ref());
    }
}

fn cmd_solve(cost: &Path, mu: Option<&Path>, nu: Option<&Path>, common: &Common) -> Result<(), CliError> {
    let mut cfg = match &common.config {
        Some(p) => {
            let c: SolveConfig = config::load(p)?;
            config::check_version(c.schema_version, &p.display().to_string())?;
            c
        }
        None => SolveConfig::default(),
    };
    if let Some(m) = common.method {
        cfg.solver.method = m;
    }
    let m = CostMatrix::new(matrix::read_matrix(cost)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", cost.display())))?;
    let (d, dp) = m.shape();
    let measure = |path: Option<&Path>, k: usize| -> Result<DiscreteMeasure, CliError> {
        match path {
            None => Ok(DiscreteMeasure::uniform(k)),
            Some(p) => DiscreteMeasure::normalized(matrix::read_vector(p)?.into())
                .map_err(|e| CliError::Input(format!("{}: {e}", p.display()))),
        }
    };
    let (mu, nu) = (measure(mu, d)?, measure(nu, dp)?);
    let report = solve(&m, &mu, &nu, &cfg.solver)?;
    let mut out = OutputDir::create(&common.out, common.quiet)?;
    out.write("plan.csv", matrix::format_matrix(&report.plan.clone().into_inner()).as_bytes())?;
    let summary = format!(
        "method={}\ncost={}\niterations={}\nmarginal_violation={}\nconverged={}\n",
        cfg.solver.method, report.cost, report.iterations_used, report.final_marginal_violation, report.converged
    );
    out.write("report.txt", summary.as_bytes())?;
    let hash = sha256_hex(&serde_json::to_vec(&cfg).expect("serializable"));
    out.finish("solve", &hash, &[])?;
    say(
        common,
        format!(
            "cost {:?}\niterations {}\nmarginal violation {:e}",
            report.cost, report.iterations_used, report.final_marginal_violation
        ),
    );
    if !report.converged {
        return Err(CliError::Numerical(format!(
            "{} did not converge within {} iterations (marginal violation {:e}); partial plan written",
            cfg.solver.method, report.iterations_used, report.final_marginal_violation
        )));
    }
    Ok(())
}

/// Loads the experiment config and applies command-line overrides.
fn experiment_config(common: &Common, regime: Option<RegimeKind>) -> Result<(ExperimentConfig, String), CliError> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| CliError::Input("--config is required".into()))?;
    let mut cfg: ExperimentConfig = config::load(path)?;
    let source = path.display().to_string();
    config::check_version(cfg.schema_version, &source)?;
    if let Some(r) = regime {
        if cfg.regime != r {
            return Err(CliError::Input(format!(
                "{source}: field `regime`: `{}` does not match the {} subcommand",
                cfg.regime.name(),
                r.name()
            )));
        }
    }
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(m) = common.method {
        cfg.train.solver.method = m;
    }
    if let Some(a) = common.alpha {
        cfg.fixed_alpha = Some(a);
    }
    if let Some(t) = common.tau {
        cfg.fixed_tau = Some(t);
    }
    if let Some(b) = common.batch_size {
        cfg.train.batch_size = b;
    }
    cfg.validate().map_err(|e| CliError::Input(format!("{source}: {e}")))?;
    let hash = sha256_hex(&serde_json::to_vec(&cfg).expect("serializable"));
    Ok((cfg, hash))
}

fn lab_with_teacher(cfg: ExperimentConfig, teacher: Option<&Path>) -> Result<Lab, CliError> {
    let mut lab = Lab::new(cfg)?;
    if let Some(p) = teacher {
        lab.set_teacher(nn::load_checkpoint(p).map_err(|e| match e {
            nn::ModelError::Io(io) => CliError::io(p, io),
            other => CliError::Input(format!("{}: {other}", p.display())),
        })?)?;
    }
    Ok(lab)
}

fn cmd_train_teacher(common: &Common) -> Result<(), CliError> {
    let (cfg, hash) = experiment_config(common, None)?;
    let task = match (&cfg.source, cfg.regime) {
        (Some(src), RegimeKind::Finetune | RegimeKind::TransferCompress) => src.clone(),
        _ => cfg.target.clone(),
    };
    let data = generate_task(&task)?;
    let specs = mlp_specs(task.input_dim, &cfg.teacher.hidden, data.train.classes);
    let mut out = OutputDir::create(&common.out, common.quiet)?;
    for &seed in &cfg.seeds {
        let model = train_teacher(specs.clone(), &data.train, &cfg.teacher_train, seed)?;
        let acc = neuron_ot::harness::evaluate(&model, &data.test)?;
        say(common, format!("teacher seed {seed}: test accuracy {acc:.4}"));
        out.write(&format!("teacher-seed{seed}.json"), nn::checkpoint_to_string(&model).as_bytes())?;
    }
    out.finish("train-teacher", &hash, &cfg.seeds)
}

#[derive(Serialize)]
struct ResultRow<'a> {
    regime: &'a str,
    arm: &'a str,
    seed: u64,
    alpha: f64,
    tau: Option<f64>,
    val_accuracy: f64,
    test_accuracy: f64,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    arm: &'a str,
    mean: f64,
    std: f64,
    selected_alpha: f64,
    selected_tau: Option<f64>,
    runs: usize,
}

#[derive(Serialize)]
struct SelectionRow<'a> {
    arm: &'a str,
    alpha: f64,
    tau: Option<f64>,
    val_accuracy: f64,
}

fn trace_rows(results: &[RunResult], task: &str) -> Vec<TraceRow> {
    results
        .iter()
        .flat_map(|r| {
            r.traces.iter().map(move |t| TraceRow {
                run_id: format!("{}/seed{}/layer{}", r.arm, t.seed, t.layer),
                task: task.to_string(),
                layer_or_iteration: t.iteration,
                trace_ratio: t.trace_ratio,
                batch_size: t.batch_size,
            })
        })
        .collect()
}

fn cmd_experiment(regime: RegimeKind, teacher: Option<&Path>, common: &Common) -> Result<(), CliError> {
    let (cfg, hash) = experiment_config(common, Some(regime))?;
    let seeds = cfg.seeds.clone();
    let mut lab = lab_with_teacher(cfg, teacher)?;
    let mut results = Vec::new();
    for arm in lab.config().arms.clone() {
        let r = lab.run_arm(arm)?;
        say(
            common,
            format!(
                "{:<9} alpha {:<8} mean {:.4} std {:.4} ({:.2} ms/iteration)",
                arm.name(),
                r.selected.alpha,
                r.mean,
                r.std,
                r.seconds_per_iteration * 1e3
            ),
        );
        results.push(r);
    }
    let name = regime.name();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut selection = Vec::new();
    for r in &results {
        for ((seed, val), test) in r.seeds.iter().zip(&r.val_accuracies).zip(&r.test_accuracies) {
            rows.push(ResultRow {
                regime: name,
                arm: r.arm.name(),
                seed: *seed,
                alpha: r.selected.alpha,
                tau: r.selected.tau,
                val_accuracy: *val,
                test_accuracy: *test,
            });
        }
        summary.push(SummaryRow {
            arm: r.arm.name(),
            mean: r.mean,
            std: r.std,
            selected_alpha: r.selected.alpha,
            selected_tau: r.selected.tau,
            runs: r.seeds.len(),
        });
        for (c, v) in &r.selection_scores {
            selection.push(SelectionRow {
                arm: r.arm.name(),
                alpha: c.alpha,
                tau: c.tau,
                val_accuracy: *v,
            });
        }
    }
    let mut out = OutputDir::create(&common.out, common.quiet)?;
    out.write_csv("results.csv", &rows)?;
    out.write_csv("summary.csv", &summary)?;
    out.write_csv("selection.csv", &selection)?;
    out.write_csv("traces.csv", &trace_rows(&results, name))?;
    out.finish(name, &hash, &seeds)
}

fn cmd_sweep(teacher: Option<&Path>, common: &Common) -> Result<(), CliError> {
    let (cfg, hash) = experiment_config(common, None)?;
    let seeds = cfg.seeds.clone();
    let mut lab = lab_with_teacher(cfg, teacher)?;
    let rows = lab.batch_size_sweep(&BATCH_SIZE_SWEEP)?;
    #[derive(Serialize)]
    struct Row<'a> {
        batch_size: usize,
        arm: &'a str,
        alpha: f64,
        mean: f64,
        std: f64,
        runs: usize,
    }
    let table: Vec<Row> = rows
        .iter()
        .map(|r| Row {
            batch_size: r.batch_size,
            arm: r.arm.name(),
            alpha: r.alpha,
            mean: r.mean,
            std: r.std,
            runs: r.accuracies.len(),
        })
        .collect();
    for r in &table {
        say(common, format!("batch {:>3} {:<9} mean {:.4} std {:.4}", r.batch_size, r.arm, r.mean, r.std));
    }
    let mut out = OutputDir::create(&common.out, common.quiet)?;
    out.write_csv("sweep.csv", &table)?;
    out.finish("sweep", &hash, &seeds)
}

#[derive(Deserialize)]
struct TraceInput {
    run_id: String,
    task: String,
    layer_or_iteration: usize,
    trace_ratio: f64,
    batch_size: usize,
}

fn read_trace_csv(path: &Path) -> Result<Vec<TraceInput>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| {
            r.map_err(|e: csv::Error| {
                let at = e
                    .position()
                    .map(|p| format!(":{}", p.line()))
                    .unwrap_or_default();
                CliError::Input(format!("{}{at}: {e}", path.display()))
            })
        })
        .collect()
}

#[derive(Serialize)]
struct PlotRow<'a> {
    run_id: &'a str,
    task: &'a str,
    start: usize,
    end: usize,
    mean: f64,
    min: f64,
    max: f64,
    count: usize,
}

fn plot_rows<'a>(run_id: &'a str, task: &'a str, points: &[TracePoint], width: usize) -> Vec<PlotRow<'a>> {
    bin_series(points, width)
        .into_iter()
        .map(|b| PlotRow {
            run_id,
            task,
            start: b.start,
            end: b.end,
            mean: b.mean,
            min: b.min,
            max: b.max,
            count: b.count,
        })
        .collect()
}

fn cmd_analyze(
    before: Option<&Path>,
    after: Option<&Path>,
    traces: Option<&Path>,
    plot_data: bool,
    bin_width: usize,
    common: &Common,
) -> Result<(), CliError> {
    let load = |p: &Path| -> Result<ModelState, CliError> {
        nn::load_checkpoint(p).map_err(|e| match e {
            nn::ModelError::Io(io) => CliError::io(p, io),
            other => CliError::Input(format!("{}: {other}", p.display())),
        })
    };
    if let Some(path) = traces {
        let input = read_trace_csv(path)?;
        let mut rows = Vec::new();
        let mut keys: Vec<(String, String)> = input.iter().map(|r| (r.run_id.clone(), r.task.clone())).collect();
        keys.dedup();
        for (run_id, task) in &keys {
            let mut points: Vec<TracePoint> = input
                .iter()
                .filter(|r| &r.run_id == run_id && &r.task == task)
                .map(|r| TracePoint {
                    index: r.layer_or_iteration,
                    trace_ratio: r.trace_ratio,
                    batch_size: r.batch_size,
                })
                .collect();
            points.sort_by_key(|p| p.index);
            rows.extend(plot_rows(run_id, task, &points, if plot_data { bin_width } else { 1 }));
        }
        let mut out = OutputDir::create(&common.out, common.quiet)?;
        out.write_csv("plot_data.csv", &rows)?;
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        return out.finish("analyze", &sha256_hex(&bytes), &[]);
    }
    let (Some(before), Some(after)) = (before, after) else {
        return Err(CliError::Input(
            "analyze needs --before and --after checkpoints, or --traces".into(),
        ));
    };
    let (cfg, hash) = experiment_config(common, None)?;
    let data = generate_task(&cfg.target)?;
    let eval = data.test.prefix(DEFAULT_EVAL_SIZE);
    let profile = depth_trace_profile(&load(before)?, &load(after)?, eval.inputs.view())?;
    for p in &profile {
        say(common, format!("layer {} trace ratio {:.4}", p.index, p.trace_ratio));
    }
    if !analysis::is_nonincreasing(&profile, 0.02) {
        say(common, "note: trace ratio rises with depth somewhere in this profile");
    }
    let mut out = OutputDir::create(&common.out, common.quiet)?;
    let task = cfg.regime.name();
    if plot_data {
        out.write_csv("plot_data.csv", &plot_rows("depth", task, &profile, bin_width))?;
    } else {
        out.write_csv("depth_profile.csv", &analysis::rows("depth", task, &profile))?;
    }
    out.finish("analyze", &hash, &cfg.seeds)
}
