//! `diffaudit` - privacy auditing for desk-scale diffusion models.
//!
//! Pipeline: `gen-data` -> `train` -> `attack-loss` / `attack-likelihood`
//! -> `report`. One TOML config document drives a run; flags override
//! config fields; the `DIFFAUDIT_OUT` environment variable supplies the
//! default output root.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use diffaudit_core::error::AuditError;

use config::Overrides;

#[derive(Parser)]
#[command(name = "diffaudit", version, about = "Membership-inference auditing for toy diffusion models")]
struct Cli {
    /// Run configuration file (TOML). Flags override config fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides config and DIFFAUDIT_OUT).
    #[arg(long, global = true)]
    out: Option<String>,

    /// Cap worker threads for parallel scoring.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct CommonModelArgs {
    /// Target model kind: ddpm, smld, vpsde, vesde.
    #[arg(long)]
    model_kind: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded toy dataset with member/nonmember splits.
    GenData {
        #[command(flatten)]
        model: CommonModelArgs,
        /// Generator: ring8, moons, spiral, gauss_grid.
        #[arg(long)]
        generator: Option<String>,
        #[arg(long)]
        n_members: Option<usize>,
        #[arg(long)]
        n_nonmembers: Option<usize>,
        /// Dataset seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the target model on the member split.
    Train {
        #[command(flatten)]
        model: CommonModelArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Enable DP-SGD with default parameters.
        #[arg(long)]
        dp: bool,
        #[arg(long)]
        dp_clip_bound: Option<f64>,
        #[arg(long)]
        dp_noise_multiplier: Option<f64>,
    },
    /// Per-step loss attack against the trained model.
    AttackLoss {
        #[command(flatten)]
        model: CommonModelArgs,
        #[arg(long)]
        k_draws: Option<usize>,
        /// Attack seed (noise draws).
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluate every k-th step (1 = all steps).
        #[arg(long)]
        step_stride: Option<usize>,
    },
    /// Probability-flow likelihood attack against the trained model.
    AttackLikelihood {
        #[command(flatten)]
        model: CommonModelArgs,
        #[arg(long)]
        n_probes: Option<usize>,
        /// Probe seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render ROC CSVs and summary tables from score files.
    Report {
        #[command(flatten)]
        model: CommonModelArgs,
        /// Score CSVs to report on (default: the run directory's files).
        #[arg(long)]
        scores: Vec<PathBuf>,
        /// Samples generated for the quality line.
        #[arg(long)]
        n_samples: Option<usize>,
    },
}

fn exit_code_for(err: &AuditError) -> u8 {
    match err {
        AuditError::Config(_) | AuditError::Contract(_) => 2,
        AuditError::Io { .. } => 3,
        AuditError::Schema { .. } | AuditError::Version { .. } => 4,
        AuditError::Divergence { .. } | AuditError::Convergence(_) => 5,
        AuditError::Shape { .. }
        | AuditError::Range { .. }
        | AuditError::Kind(_)
        | AuditError::Singularity(_) => 6,
    }
}

fn run(cli: Cli) -> diffaudit_core::Result<()> {
    if let Some(threads) = cli.threads {
        // a second init in the same process is fine to ignore
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }

    let raw = config::load_raw(cli.config.as_deref())?;
    let mut flags = Overrides { out_dir: cli.out.clone(), ..Default::default() };

    match cli.command {
        Command::GenData { model, generator, n_members, n_nonmembers, seed } => {
            flags.model_kind = model.model_kind;
            flags.generator = generator;
            flags.n_members = n_members;
            flags.n_nonmembers = n_nonmembers;
            flags.data_seed = seed;
            let cfg = config::resolve(raw, &flags)?;
            commands::cmd_gen_data(&cfg)
        }
        Command::Train {
            model,
            steps,
            batch_size,
            learning_rate,
            seed,
            dp,
            dp_clip_bound,
            dp_noise_multiplier,
        } => {
            flags.model_kind = model.model_kind;
            flags.steps = steps;
            flags.batch_size = batch_size;
            flags.learning_rate = learning_rate;
            flags.train_seed = seed;
            flags.dp = dp;
            flags.dp_clip_bound = dp_clip_bound;
            flags.dp_noise_multiplier = dp_noise_multiplier;
            let cfg = config::resolve(raw, &flags)?;
            commands::cmd_train(&cfg)
        }
        Command::AttackLoss { model, k_draws, seed, step_stride } => {
            flags.model_kind = model.model_kind;
            flags.k_draws = k_draws;
            flags.attack_seed = seed;
            flags.step_stride = step_stride;
            let cfg = config::resolve(raw, &flags)?;
            commands::cmd_attack_loss(&cfg)
        }
        Command::AttackLikelihood { model, n_probes, seed } => {
            flags.model_kind = model.model_kind;
            flags.n_probes = n_probes;
            flags.ode_seed = seed;
            let cfg = config::resolve(raw, &flags)?;
            commands::cmd_attack_likelihood(&cfg)
        }
        Command::Report { model, scores, n_samples } => {
            flags.model_kind = model.model_kind;
            flags.n_samples = n_samples;
            let cfg = config::resolve(raw, &flags)?;
            commands::cmd_report(&cfg, &scores)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err}", err.class());
            ExitCode::from(exit_code_for(&err))
        }
    }
}
