//! Command-line interface.
//!
//! Four subcommands: `run` trains prompts per a run configuration,
//! `evaluate` scores a saved prompt checkpoint on one dataset split,
//! `simulate` measures noise accumulation in feedback chains, and
//! `validate` checks a configuration without executing anything.
//!
//! Exit contract: 0 on success, 1 when inputs failed validation (bad flags,
//! broken config, invalid graph, missing files, out-of-range parameters),
//! 2 when a valid request failed at runtime. The last stderr line is always
//! `RESULT: ok|validation_failed|runtime_error`, so wrappers can classify an
//! invocation without parsing human-oriented messages.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{build_backend, load_config, BackendSpec};
use crate::dataset::load_dataset;
use crate::forward::ToolRegistry;
use crate::graph::{load_graph, save_graph, validate_graph};
use crate::metrics::{export_metrics, read_best_prompts, write_best_prompts};
use crate::runlog::RunLog;
use crate::sim::noise::{
    routed_variance_limit, simulate_noise_chain, write_sim_csv, DeltaDistribution, NoiseParams,
};
use crate::training::{evaluate, run_training, TrainEnv, TrainError};

#[derive(Parser)]
#[command(
    name = "resgrad",
    version,
    about = "Prompt optimization for multi-component LLM pipelines",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train prompts according to a run configuration.
    Run {
        /// Path to the run configuration JSON.
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a saved prompt checkpoint on one dataset split.
    Evaluate {
        /// Path to the run configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint file produced by `run` (best_prompts.json).
        #[arg(long)]
        prompts: PathBuf,
        /// Dataset split to score.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Forward repeats per example (default: the config's repeat count).
        #[arg(long)]
        repeats: Option<u32>,
    },
    /// Measure noise accumulation in standard vs routed feedback chains.
    Simulate {
        /// Per-stage noise variance.
        #[arg(long, default_value_t = 1.0)]
        sigma2: f64,
        /// Per-stage stop probability of the routed chain.
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        /// Chain depth.
        #[arg(long, default_value_t = 50)]
        depth: usize,
        /// Monte-Carlo trials.
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-stage noise law.
        #[arg(long, value_enum, default_value = "normal")]
        delta: DeltaArg,
    },
    /// Check a configuration, its graph, and its datasets without running.
    Validate {
        /// Path to the run configuration JSON.
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Dev => "dev",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DeltaArg {
    Normal,
    Rademacher,
}

impl From<DeltaArg> for DeltaDistribution {
    fn from(arg: DeltaArg) -> Self {
        match arg {
            DeltaArg::Normal => DeltaDistribution::Normal,
            DeltaArg::Rademacher => DeltaDistribution::Rademacher,
        }
    }
}

/// A command failure, classified for the exit contract.
struct Failure {
    validation: bool,
    message: String,
}

fn invalid(err: impl fmt::Display) -> Failure {
    Failure { validation: true, message: err.to_string() }
}

fn runtime(err: impl fmt::Display) -> Failure {
    Failure { validation: false, message: err.to_string() }
}

fn train_failure(err: TrainError) -> Failure {
    let validation = matches!(
        err,
        TrainError::InvalidGraph { .. }
            | TrainError::EmptyDataset { .. }
            | TrainError::ZeroUpdateFreq
            | TrainError::ZeroBatch
            | TrainError::ZeroConcurrency
            | TrainError::Scheduler(_)
    );
    Failure { validation, message: err.to_string() }
}

/// Parses `args` (the full argv, program name first), runs the requested
/// command, and returns the process exit code per the module contract.
pub fn run_cli(args: impl IntoIterator<Item = String>) -> i32 {
    let outcome = match Cli::try_parse_from(args) {
        Ok(cli) => dispatch(cli.command),
        Err(err) if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{err}");
            Ok(())
        }
        Err(err) => {
            eprint!("{err}");
            Err(Failure { validation: true, message: String::new() })
        }
    };
    match outcome {
        Ok(()) => {
            eprintln!("RESULT: ok");
            0
        }
        Err(failure) => {
            if !failure.message.is_empty() {
                eprintln!("error: {}", failure.message);
            }
            if failure.validation {
                eprintln!("RESULT: validation_failed");
                1
            } else {
                eprintln!("RESULT: runtime_error");
                2
            }
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config } => cmd_run(&config),
        Command::Evaluate { config, prompts, split, repeats } => {
            cmd_evaluate(&config, &prompts, split, repeats)
        }
        Command::Simulate { sigma2, p, depth, trials, seed, out, delta } => {
            let params =
                NoiseParams { sigma2, p, depth, trials, seed, delta: delta.into() };
            cmd_simulate(&params, out.as_deref())
        }
        Command::Validate { config } => cmd_validate(&config),
    }
}

fn cmd_run(config_path: &Path) -> Result<(), Failure> {
    let cfg = load_config(config_path).map_err(invalid)?;
    let graph = load_graph(&cfg.graph).map_err(invalid)?;
    let train = load_dataset(&cfg.datasets.train).map_err(invalid)?;
    let dev = load_dataset(&cfg.datasets.dev).map_err(invalid)?;
    let forward = build_backend(&cfg.backends.forward, "forward").map_err(invalid)?;
    let projector = build_backend(&cfg.backends.projector, "projector").map_err(invalid)?;
    let optimizer = build_backend(&cfg.backends.optimizer, "optimizer").map_err(invalid)?;
    let tools = ToolRegistry::identity_for_tools(&graph);

    fs::create_dir_all(&cfg.output_dir).map_err(runtime)?;
    let mut log = RunLog::to_file(cfg.output_dir.join("run_log.jsonl")).map_err(runtime)?;

    let env = TrainEnv {
        forward: forward.as_ref(),
        projector: projector.as_ref(),
        optimizer: optimizer.as_ref(),
        tools: &tools,
        policy: &cfg.truncation,
    };
    let outcome = run_training(&graph, &train, &dev, &cfg.train, cfg.scheduler.clone(), &env, &mut log)
        .map_err(train_failure)?;

    export_metrics(&outcome.history, &cfg.output_dir).map_err(runtime)?;
    write_best_prompts(&outcome.history.best, cfg.output_dir.join("best_prompts.json"))
        .map_err(runtime)?;
    save_graph(&outcome.final_graph, cfg.output_dir.join("final_graph.json")).map_err(runtime)?;

    println!("run complete: {} training steps", cfg.train.steps);
    println!("best dev score: {:.4}", outcome.history.best.dev_score);
    println!("artifacts in `{}`", cfg.output_dir.display());
    Ok(())
}

fn cmd_evaluate(
    config_path: &Path,
    prompts_path: &Path,
    split: SplitArg,
    repeats: Option<u32>,
) -> Result<(), Failure> {
    let cfg = load_config(config_path).map_err(invalid)?;
    let mut graph = load_graph(&cfg.graph).map_err(invalid)?;
    let checkpoint = read_best_prompts(prompts_path)
        .map_err(|e| invalid(format!("cannot read prompts `{}`: {e}", prompts_path.display())))?;
    for (id, text) in &checkpoint.prompts {
        match graph.get_mut(id) {
            None => {
                return Err(invalid(format!("checkpoint names unknown component `{id}`")));
            }
            Some(component) if component.is_tool => {
                return Err(invalid(format!(
                    "checkpoint names tool component `{id}`, which has no prompt"
                )));
            }
            Some(component) => component.prompt_text = text.clone(),
        }
    }
    let report = validate_graph(&graph);
    if !report.is_valid() {
        let lines: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
        return Err(invalid(format!("graph is invalid with checkpoint applied:\n{}", lines.join("\n"))));
    }

    let dataset_path = match split {
        SplitArg::Train => cfg.datasets.train.clone(),
        SplitArg::Dev => cfg.datasets.dev.clone(),
        SplitArg::Test => cfg
            .datasets
            .test
            .clone()
            .ok_or_else(|| invalid("config names no test dataset"))?,
    };
    let dataset = load_dataset(&dataset_path).map_err(invalid)?;
    if dataset.is_empty() {
        return Err(invalid(format!("dataset `{}` has no examples", dataset_path.display())));
    }

    let backend = build_backend(&cfg.backends.forward, "forward").map_err(invalid)?;
    let tools = ToolRegistry::identity_for_tools(&graph);
    let repeats = repeats
        .unwrap_or(match split {
            SplitArg::Test => cfg.train.test_repeats,
            _ => cfg.train.eval_repeats,
        })
        .max(1);

    let result = evaluate(
        &graph,
        &dataset,
        repeats,
        backend.as_ref(),
        &tools,
        &cfg.truncation,
        cfg.train.max_concurrency,
    );
    println!(
        "{} score: {:.4} ({} examples, {} repeats)",
        split.name(),
        result.mean,
        dataset.len(),
        repeats
    );
    let failures: u32 = result.per_example.iter().map(|e| e.failures).sum();
    if failures > 0 {
        println!("forward failures: {failures}");
    }
    Ok(())
}

fn cmd_simulate(params: &NoiseParams, out: Option<&Path>) -> Result<(), Failure> {
    let result = simulate_noise_chain(params).map_err(invalid)?;
    match out {
        Some(path) => {
            let mut file = fs::File::create(path)
                .map_err(|e| runtime(format!("cannot write `{}`: {e}", path.display())))?;
            write_sim_csv(&result, &mut file).map_err(runtime)?;
            let standard = result.standard.last().expect("depth is at least 1");
            let routed = result.routed.last().expect("depth is at least 1");
            println!("simulation written to `{}`", path.display());
            println!(
                "variance at depth {}: standard {:.4}, routed {:.4}",
                params.depth, standard.empirical_var, routed.empirical_var
            );
            if params.p > 0.0 {
                println!(
                    "routed ceiling: {:.4}",
                    routed_variance_limit(params.sigma2, params.p)
                );
            }
        }
        // Bare CSV on stdout so the output pipes straight into other tools.
        None => write_sim_csv(&result, &mut std::io::stdout().lock()).map_err(runtime)?,
    }
    Ok(())
}

fn kind_name(spec: &BackendSpec) -> &'static str {
    match spec {
        BackendSpec::Scripted { .. } => "scripted",
        BackendSpec::Http(_) => "http",
    }
}

fn cmd_validate(config_path: &Path) -> Result<(), Failure> {
    let cfg = load_config(config_path).map_err(invalid)?;
    let graph = load_graph(&cfg.graph).map_err(invalid)?;
    let report = validate_graph(&graph);
    if !report.is_valid() {
        let lines: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
        return Err(invalid(format!(
            "graph `{}` is invalid:\n{}",
            cfg.graph.display(),
            lines.join("\n")
        )));
    }
    let train = load_dataset(&cfg.datasets.train).map_err(invalid)?;
    let dev = load_dataset(&cfg.datasets.dev).map_err(invalid)?;
    if train.is_empty() {
        return Err(invalid("train dataset has no examples"));
    }
    if dev.is_empty() {
        return Err(invalid("dev dataset has no examples"));
    }
    let test = match &cfg.datasets.test {
        Some(path) => Some(load_dataset(path).map_err(invalid)?),
        None => None,
    };
    for (spec, role) in [
        (&cfg.backends.forward, "forward"),
        (&cfg.backends.projector, "projector"),
        (&cfg.backends.optimizer, "optimizer"),
    ] {
        build_backend(spec, role).map_err(invalid)?;
    }

    println!("configuration ok");
    println!(
        "  graph `{}`: {} components ({} optimizable)",
        cfg.graph.display(),
        graph.components.len(),
        graph.optimizable_ids().len()
    );
    println!("  train: {} examples", train.len());
    println!("  dev: {} examples", dev.len());
    if let Some(test) = &test {
        println!("  test: {} examples", test.len());
    }
    println!(
        "  backends: forward={}, projector={}, optimizer={}",
        kind_name(&cfg.backends.forward),
        kind_name(&cfg.backends.projector),
        kind_name(&cfg.backends.optimizer)
    );
    Ok(())
}
