use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use neuralpi::commands::{
    cmd_equilibrium, cmd_export_monotone, cmd_simulate, cmd_train, cmd_verify, CommonArgs,
    ExportArgs, EXIT_NUMERICAL, EXIT_USAGE,
};
use neuralpi::config::{ConfigError, ExperimentConfig, Family, Preset};
use neuralpi_core::dynamics::Scheme;
use neuralpi_core::Error as CoreError;

/// Simulation, training, and verification of structured neural-PI
/// controllers for networked dynamical systems.
#[derive(Parser)]
#[command(name = "neuralpi", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// Experiment config (TOML or JSON), overlaid on the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Baseline defaults to overlay the config on.
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetArg,
    /// System family used when no config file sets one.
    #[arg(long, value_enum, default_value = "vehicle")]
    family: FamilyArg,
    /// Controller or checkpoint JSON; defaults to the config's initialization.
    #[arg(long)]
    controller: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Integration scheme override.
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    /// Start `simulate` at the closed-form equilibrium.
    #[arg(long, default_value_t = false)]
    from_equilibrium: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FamilyArg {
    Vehicle,
    Power,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SchemeArg {
    Euler,
    Rk4,
}

#[derive(Subcommand)]
enum Command {
    /// One rollout: trajectory CSV plus a summary JSON.
    Simulate(Shared),
    /// Train per the config; emits checkpoints and a loss-history CSV.
    Train(Shared),
    /// Run the verification suite and write a report JSON.
    Verify(Shared),
    /// Print and save the closed-form equilibrium with its residuals.
    Equilibrium(Shared),
    /// Dump (z, g(z)) tables for the monotone functions in a controller file.
    ExportMonotone {
        /// Controller or checkpoint JSON.
        #[arg(long)]
        controller: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = -3.0)]
        z_min: f64,
        #[arg(long, default_value_t = 3.0)]
        z_max: f64,
        #[arg(long, default_value_t = 200)]
        points: usize,
    },
}

fn load_config(shared: &Shared) -> Result<ExperimentConfig, ConfigError> {
    let preset = match shared.preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    };
    let family = match shared.family {
        FamilyArg::Vehicle => Family::Vehicle,
        FamilyArg::Power => Family::Power,
    };
    let mut config = match &shared.config {
        Some(path) => ExperimentConfig::load(path, preset)?,
        None => ExperimentConfig::preset(preset, family),
    };
    if let Some(seed) = shared.seed {
        config.scenario.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn common(shared: Shared) -> Result<CommonArgs, ConfigError> {
    let config = load_config(&shared)?;
    Ok(CommonArgs {
        config,
        controller_path: shared.controller,
        out_dir: shared.out,
        scheme: shared.scheme.map(|s| match s {
            SchemeArg::Euler => Scheme::Euler,
            SchemeArg::Rk4 => Scheme::Rk4,
        }),
        from_equilibrium: shared.from_equilibrium,
    })
}

fn run() -> i32 {
    // NEURALPI_THREADS caps internal parallelism; single-threaded runs are
    // still deterministic because batch results reduce in index order.
    if let Ok(threads) = std::env::var("NEURALPI_THREADS") {
        if let Ok(threads) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.max(1))
                .build_global();
        }
    }
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(shared) => common(shared).map(|args| cmd_simulate(&args)),
        Command::Train(shared) => common(shared).map(|args| cmd_train(&args)),
        Command::Verify(shared) => common(shared).map(|args| cmd_verify(&args)),
        Command::Equilibrium(shared) => common(shared).map(|args| cmd_equilibrium(&args)),
        Command::ExportMonotone {
            controller,
            out,
            z_min,
            z_max,
            points,
        } => Ok(cmd_export_monotone(&ExportArgs {
            controller_path: controller,
            out_dir: out,
            z_min,
            z_max,
            points,
        })),
    };
    match outcome {
        Err(config_err) => {
            eprintln!("{config_err}");
            EXIT_USAGE
        }
        Ok(Ok(code)) => code,
        Ok(Err(err)) => {
            // Core numerical failures map to exit 3, everything else to 2.
            let numerical = err.downcast_ref::<CoreError>().map(|e| {
                matches!(
                    e,
                    CoreError::IntegrationBlowup { .. }
                        | CoreError::NonFiniteGradient { .. }
                        | CoreError::NonFiniteLoss { .. }
                        | CoreError::InfeasibleEquilibrium(_)
                        | CoreError::SolverDiverged(_)
                )
            });
            eprintln!("error: {err:#}");
            if numerical == Some(true) {
                EXIT_NUMERICAL
            } else {
                EXIT_USAGE
            }
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(u8::try_from(run()).unwrap_or(1))
}
