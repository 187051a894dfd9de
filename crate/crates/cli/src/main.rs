//! `ear`: run guided generation, refinement, batch benchmarks and gradient
//! checks against the blob-world backend.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Failures, by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("verifier: {0}")]
    Verifier(String),
}

impl CliError {
    pub(crate) fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Verifier(_) => 4,
        }
    }
}

/// Exit codes besides errors.
pub const EXIT_GRADCHECK_FAILED: u8 = 1;
pub const EXIT_BENCH_FAILURES: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "ear", version, about = "Entity-attribute-relation guided generation on a synthetic backend")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config with optional `backend` and `pipeline` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "EAR_OUT_DIR", default_value = "ear-out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Guided generation (single stage).
    Generate {
        /// Constraint file.
        #[arg(long)]
        constraints: PathBuf,
        /// Overrides `pipeline.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Force an entity's amplitude in the initial noise, `entity=amplitude`.
        #[arg(long, value_name = "ENTITY=AMP")]
        fault: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Generation, verification and initial-noise refinement.
    Refine {
        #[arg(long)]
        constraints: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "ENTITY=AMP")]
        fault: Vec<String>,
        /// `oracle`, `exec:<command>` or `http:<url>`.
        #[arg(long, default_value = "oracle")]
        verifier: String,
        /// Use the oracle when the external verifier fails.
        #[arg(long)]
        fallback_oracle: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Runs a scenario suite for the full config and each ablation.
    Bench {
        /// Suite file, or `builtin:<spatial|mixed|fault>:<n>[:<base seed>[:<amplitude>]]`.
        #[arg(long)]
        suite: String,
        /// Loss terms to ablate, one row each.
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
        #[arg(long, value_enum, default_value_t = ModeArg::Generate)]
        mode: ModeArg,
        /// Worker threads; defaults to the number of logical cores.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, value_enum, default_value_t = ExecArg::Parallel)]
        execution: ExecArg,
        #[arg(long, default_value = "oracle")]
        verifier: String,
        #[arg(long)]
        fallback_oracle: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every loss over seeded latents.
    Gradcheck {
        /// Constraint file; defaults to a three-entity scene.
        #[arg(long)]
        constraints: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        seeds: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-4)]
        h: f64,
        #[arg(long, value_enum, default_value_t = LatentArg::StandardNormal)]
        latents: LatentArg,
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Lints a constraint file.
    Validate {
        file: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Generate,
    Refine,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExecArg {
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LatentArg {
    StandardNormal,
    InitialNoise,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate {
            constraints,
            seed,
            fault,
            common,
        } => commands::generate(&common.out, common.config.as_deref(), &constraints, seed, &fault),
        Command::Refine {
            constraints,
            seed,
            fault,
            verifier,
            fallback_oracle,
            common,
        } => commands::refine(
            &common.out,
            common.config.as_deref(),
            &constraints,
            seed,
            &fault,
            &verifier,
            fallback_oracle,
        ),
        Command::Bench {
            suite,
            ablate,
            mode,
            jobs,
            execution,
            verifier,
            fallback_oracle,
            common,
        } => commands::bench(commands::BenchArgs {
            out: &common.out,
            config: common.config.as_deref(),
            suite: &suite,
            ablate: &ablate,
            mode: match mode {
                ModeArg::Generate => ear_core::pipeline::RunMode::Generate,
                ModeArg::Refine => ear_core::pipeline::RunMode::Refine,
            },
            jobs,
            execution: match execution {
                ExecArg::Parallel => ear_core::par::Execution::Parallel,
                ExecArg::Sequential => ear_core::par::Execution::Sequential,
            },
            verifier: &verifier,
            fallback_oracle,
        }),
        Command::Gradcheck {
            constraints,
            seeds,
            tol,
            h,
            latents,
            jobs,
            common,
        } => commands::gradcheck(commands::GradcheckArgs {
            out: &common.out,
            config: common.config.as_deref(),
            constraints: constraints.as_deref(),
            seeds,
            tol,
            h,
            latents: match latents {
                LatentArg::StandardNormal => ear_core::grad::LatentSource::StandardNormal,
                LatentArg::InitialNoise => ear_core::grad::LatentSource::InitialNoise,
            },
            jobs,
        }),
        Command::Validate { file } => commands::validate(&file),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
