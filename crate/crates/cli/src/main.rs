//! `topoflow`: data generation, training, sampling, evaluation and
//! reporting for the topologically masked flow policy.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 tolerance
//! breach in `check-fusion`.

mod commands;
mod config;
mod output;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "topoflow", version = output::VERSION, about = "Topologically masked flow-matching policies on BlockWorld")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Settings shared by every configurable command.
#[derive(Args, Clone, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Global seed (falls back to $OPAL_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate scripted demonstrations as JSONL plus a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Comma-separated task names.
        #[arg(long, alias = "tasks")]
        task: Option<String>,
        /// Number of episodes.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        jitter: Option<f64>,
    },
    /// Train a policy; writes a checkpoint, a report and a loss curve.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset JSONL from `gen-data`.
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// full, nt (all-ones mask) or nh (single primitive).
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        mask_project_every: Option<usize>,
        /// Restore the large-scale batch size.
        #[arg(long)]
        paper_scale: bool,
    },
    /// Sample action sequences from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// JSONL of observations or episodes; default: fresh start states.
        #[arg(long, value_name = "FILE")]
        observations: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<String>,
        /// Sequences per task when sampling fresh start states.
        #[arg(long)]
        n_episodes: Option<usize>,
        /// rk4 or euler.
        #[arg(long)]
        integrator: Option<String>,
    },
    /// Evaluate a checkpoint against the oracle; writes metrics.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long)]
        tasks: Option<String>,
        #[arg(long)]
        n_episodes: Option<usize>,
        /// rk4 or euler.
        #[arg(long)]
        integrator: Option<String>,
        /// Variant name for the model_variant column.
        #[arg(long)]
        label: Option<String>,
    },
    /// Train and evaluate the full, NT, NR and NH variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        tasks: Option<String>,
        #[arg(long)]
        n_episodes: Option<usize>,
    },
    /// Euler vs RK4 accuracy and timing.
    BenchIntegrators {
        #[command(flatten)]
        common: Common,
        /// Benchmark on the decay field dx/dt = -x.
        #[arg(long)]
        analytic: bool,
        /// Also benchmark on a trained model.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        n_episodes: Option<usize>,
    },
    /// Print a mask as CSV (the BlockWorld mask unless a checkpoint is given).
    DumpMask {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Residual report for a fusion-system file; exit 3 on breach.
    CheckFusion {
        file: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Render a metrics or loss-curve CSV as a text table.
    Render {
        file: PathBuf,
        /// Directory for SVG plots.
        #[arg(long, value_name = "DIR")]
        plot: Option<PathBuf>,
    },
}

pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
    Breach(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Read { .. } => Failure::Runtime(e.into()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<topoflow::Error> for Failure {
    fn from(e: topoflow::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Defaults, then file, then `--set`, then typed flags.
fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::from_env()?;
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    Ok(cfg)
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::GenData { common, task, n, jitter } => {
            let cfg = resolve(&common, &[("tasks", task), ("n", s(&n)), ("jitter", s(&jitter))])?;
            commands::gen_data(&cfg)
        }
        Cmd::Train { common, data, variant, epochs, lr, batch_size, mask_project_every, paper_scale } => {
            let cfg = resolve(
                &common,
                &[
                    ("epochs", s(&epochs)),
                    ("lr", s(&lr)),
                    ("mask_project_every", s(&mask_project_every)),
                    ("paper_scale", paper_scale.then(|| "true".to_string())),
                    ("batch_size", s(&batch_size)),
                ],
            )?;
            let variant = commands::parse_variant(&variant)?;
            commands::train(&cfg, &data, variant)
        }
        Cmd::Sample { common, checkpoint, observations, tasks, n_episodes, integrator } => {
            let cfg = resolve(&common, &[("tasks", tasks), ("n_episodes", s(&n_episodes)), ("integrator", integrator)])?;
            commands::sample(&cfg, &checkpoint, observations.as_deref())
        }
        Cmd::Eval { common, checkpoint, tasks, n_episodes, integrator, label } => {
            let cfg = resolve(&common, &[("tasks", tasks), ("n_episodes", s(&n_episodes)), ("integrator", integrator)])?;
            commands::eval(&cfg, &checkpoint, label)
        }
        Cmd::Ablate { common, data, epochs, tasks, n_episodes } => {
            let cfg = resolve(&common, &[("epochs", s(&epochs)), ("tasks", tasks), ("n_episodes", s(&n_episodes))])?;
            commands::ablate(&cfg, &data)
        }
        Cmd::BenchIntegrators { common, analytic, checkpoint, n_episodes } => {
            let cfg = resolve(&common, &[("n_episodes", s(&n_episodes))])?;
            commands::bench_integrators(&cfg, analytic || checkpoint.is_none(), checkpoint.as_deref())
        }
        Cmd::DumpMask { common, checkpoint } => {
            let cfg = resolve(&common, &[])?;
            commands::dump_mask(&cfg, checkpoint.as_deref())
        }
        Cmd::CheckFusion { file, tol } => commands::check_fusion(&file, tol),
        Cmd::Render { file, plot } => commands::render(&file, plot.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Breach(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(3)
        }
    }
}
