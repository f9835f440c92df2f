//! The `les` command-line front end: dataset generation, VAE training,
//! score/AUROC evaluation, LSO experiments, a timing benchmark, and
//! latent-plane grid export.
//!
//! Exit codes: 0 success, 2 usage error, 3 data/model error, 4 numerical
//! error.

mod commands;
mod config;

pub use config::{ConfigError, RunConfig};

use clap::{Parser, Subcommand};
use commands::GridAnchor;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "les",
    version,
    about = "Latent exploration scoring and constrained latent-space optimization \
             for arithmetic expressions"
)]
struct Cli {
    /// Key=value config file with [data]/[vae]/[scores]/[lso]/[paths] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides [data] seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file for single-file commands.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output directory for multi-file commands; overrides [paths] out_dir.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset of valid expressions (one per line).
    GenData {
        /// Number of expressions to sample.
        #[arg(long)]
        n: Option<usize>,
        /// Token budget per expression.
        #[arg(long)]
        max_tokens: Option<usize>,
    },
    /// Train the beta-VAE and write model.ckpt plus loss.csv.
    TrainVae {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        latent_dim: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
    },
    /// Score train/prior/OOD samples and report AUROC per score.
    EvalAuroc {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        n_per_group: Option<usize>,
        #[arg(long)]
        ood_std: Option<f64>,
    },
    /// Run seeded LSO experiments and aggregate the results.
    RunLso {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// les | ga | prior | likelihood | lbfgs | turbo
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
        /// Number of seeded runs (seeds 1..=N).
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        init_n: Option<usize>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Time the scores on a batch of 20 latent vectors.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also time LES on d=25 vs d=50 stub decoders.
        #[arg(long)]
        stub_scaling: bool,
    },
    /// Evaluate LES and validity on a 2-D latent plane grid.
    Grid {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// First anchor as comma-separated latent coordinates.
        #[arg(long)]
        z_a: Option<String>,
        /// Second anchor as comma-separated latent coordinates.
        #[arg(long)]
        z_b: Option<String>,
        /// First anchor as a token expression, e.g. "sin ( x ) + x".
        #[arg(long)]
        expr_a: Option<String>,
        /// Second anchor as a token expression.
        #[arg(long)]
        expr_b: Option<String>,
        /// Grid resolution per axis.
        #[arg(long, default_value_t = 50)]
        grid_size: usize,
    },
}

fn parse_latent(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad latent coordinate {v:?}")))
        })
        .collect()
}

fn anchor_from_flags(
    z: Option<&String>,
    expr: Option<&String>,
    which: &str,
) -> Result<GridAnchor, CliError> {
    match (z, expr) {
        (Some(z), None) => Ok(GridAnchor::Latent(parse_latent(z)?)),
        (None, Some(e)) => Ok(GridAnchor::Expression(e.clone())),
        (Some(_), Some(_)) => Err(CliError::Usage(format!(
            "give anchor {which} either as --z-{which} or --expr-{which}, not both"
        ))),
        (None, None) => Err(CliError::Usage(format!(
            "anchor {which} missing: pass --z-{which} or --expr-{which}"
        ))),
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| CliError::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.data_seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.path_out_dir = dir.clone();
    }
    let quiet = cli.quiet;

    match cli.command {
        Command::GenData { n, max_tokens } => {
            if let Some(n) = n {
                cfg.data_n = n;
            }
            if let Some(m) = max_tokens {
                cfg.data_max_tokens = m;
            }
            let out = cli.out.unwrap_or_else(|| cfg.path_dataset.clone());
            commands::cmd_gen_data(&cfg, &out, quiet)
        }
        Command::TrainVae {
            dataset,
            beta,
            epochs,
            lr,
            batch,
            latent_dim,
            hidden,
        } => {
            if let Some(d) = dataset {
                cfg.path_dataset = d;
            }
            if let Some(v) = beta {
                cfg.vae_beta = v;
            }
            if let Some(v) = epochs {
                cfg.vae_epochs = v;
            }
            if let Some(v) = lr {
                cfg.vae_lr = v;
            }
            if let Some(v) = batch {
                cfg.vae_batch = v;
            }
            if let Some(v) = latent_dim {
                cfg.vae_latent_dim = v;
            }
            if let Some(v) = hidden {
                cfg.vae_hidden = v;
            }
            let out_dir = cfg.path_out_dir.clone();
            commands::cmd_train_vae(&cfg, &out_dir, quiet)
        }
        Command::EvalAuroc {
            checkpoint,
            dataset,
            n_per_group,
            ood_std,
        } => {
            if let Some(c) = checkpoint {
                cfg.path_checkpoint = c;
            }
            if let Some(d) = dataset {
                cfg.path_dataset = d;
            }
            if let Some(v) = n_per_group {
                cfg.scores_n_per_group = v;
            }
            if let Some(v) = ood_std {
                cfg.scores_ood_std = v;
            }
            let out_dir = cfg.path_out_dir.clone();
            commands::cmd_eval_auroc(&cfg, &out_dir, quiet)
        }
        Command::RunLso {
            checkpoint,
            method,
            lambda,
            eta,
            seeds,
            init_n,
            budget,
            batch,
        } => {
            if let Some(c) = checkpoint {
                cfg.path_checkpoint = c;
            }
            if let Some(m) = method {
                cfg.lso_method = m;
            }
            if let Some(v) = lambda {
                cfg.lso_lambda = v;
            }
            if let Some(v) = eta {
                cfg.lso_eta = v;
            }
            if let Some(v) = seeds {
                cfg.lso_seeds = v;
            }
            if let Some(v) = init_n {
                cfg.lso_init_n = v;
            }
            if let Some(v) = budget {
                cfg.lso_budget = v;
            }
            if let Some(v) = batch {
                cfg.lso_batch = v;
            }
            let out_dir = cfg.path_out_dir.clone();
            commands::cmd_run_lso(&cfg, &out_dir, quiet)
        }
        Command::Bench {
            checkpoint,
            stub_scaling,
        } => {
            if let Some(c) = checkpoint {
                cfg.path_checkpoint = c;
            }
            commands::cmd_bench(&cfg, cli.out.as_deref(), stub_scaling, quiet)
        }
        Command::Grid {
            checkpoint,
            z_a,
            z_b,
            expr_a,
            expr_b,
            grid_size,
        } => {
            if let Some(c) = checkpoint {
                cfg.path_checkpoint = c;
            }
            let anchor_a = anchor_from_flags(z_a.as_ref(), expr_a.as_ref(), "a")?;
            let anchor_b = anchor_from_flags(z_b.as_ref(), expr_b.as_ref(), "b")?;
            let out = match cli.out {
                Some(p) => p,
                None => {
                    std::fs::create_dir_all(&cfg.path_out_dir).map_err(|e| {
                        CliError::Data(format!(
                            "cannot create {}: {e}",
                            cfg.path_out_dir.display()
                        ))
                    })?;
                    cfg.path_out_dir.join("grid.csv")
                }
            };
            commands::cmd_grid(&cfg, &anchor_a, &anchor_b, grid_size, &out, quiet)
        }
    }
}

/// Parses arguments from the process environment and runs the selected
/// command, returning the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
