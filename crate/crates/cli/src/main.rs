use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use highway_irl::commands::{
    cmd_evaluate, cmd_record, cmd_train, EnvKind, EvaluateArgs, RlKind, TrainArgs, TrainConfig,
};
use highway_irl::irl::StopReason;
use highway_irl::server::{serve_ui, ServerOptions};
use highway_irl::Error;

/// Exit code for bad flags or arguments.
const EXIT_USAGE: u8 = 2;
/// Exit code when training stopped on a degenerate projection.
const EXIT_DEGENERATE: u8 = 3;

#[derive(Parser)]
#[command(name = "highway-irl", version, about = "Apprenticeship learning on a simulated highway")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted-expert demonstrations.
    Record {
        #[arg(long, default_value_t = 90)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "demos")]
        out: PathBuf,
        /// TOML config; only its `[world]` table is used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the IRL loop and write per-iteration artifacts.
    Train {
        /// Directory of `.traj` demonstrations (highway only).
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// `dqn` or `exact`.
        #[arg(long, default_value = "dqn")]
        rl: String,
        /// `highway` or `toy:<name>`.
        #[arg(long, default_value = "highway")]
        env: String,
        #[arg(long)]
        max_iterations: Option<usize>,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint's greedy policy against the scripted expert.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        /// Take expert feature expectations from these demos instead.
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve the interactive recording and playback protocol.
    Serve {
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value_t = 50)]
        tick_ms: u64,
        #[arg(long, default_value = "demos")]
        save_dir: PathBuf,
        #[arg(long, default_value = ".")]
        checkpoint_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn train_exit_code(stop: StopReason) -> ExitCode {
    match stop {
        StopReason::DegenerateProjection => ExitCode::from(EXIT_DEGENERATE),
        _ => ExitCode::SUCCESS,
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<TrainConfig, Error> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Record { n, seed, out, config } => {
            let cfg = load_config(config.as_ref())?;
            let summary = cmd_record(n, seed, &out, &cfg.world)?;
            println!("{}", summary.to_text());
        }
        Command::Train { demos, config, out, rl, env, max_iterations, seed } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(m) = max_iterations {
                cfg.irl.max_iterations = m;
            }
            if let Some(s) = seed {
                cfg.irl.master_seed = s;
            }
            let args = TrainArgs {
                demo_dir: demos,
                config: cfg,
                out_dir: out,
                rl: RlKind::parse(&rl)?,
                env: EnvKind::parse(&env)?,
            };
            let outcome = cmd_train(&args)?;
            println!(
                "{} after {} iterations, t = {:?}; manifest {}",
                outcome.stop.as_str(),
                outcome.iterations,
                outcome.t_history.last().copied().unwrap_or(f64::NAN),
                outcome.manifest.display()
            );
            return Ok(train_exit_code(outcome.stop));
        }
        Command::Evaluate { checkpoint, weights, n, seed, out, demos, config } => {
            let cfg = load_config(config.as_ref())?;
            let args = EvaluateArgs {
                checkpoint,
                weights,
                n,
                seed,
                out_dir: out,
                demo_dir: demos,
                world: cfg.world,
                gamma: cfg.irl.gamma,
            };
            let report = cmd_evaluate(&args)?;
            print!("{}", report.to_text());
        }
        Command::Serve { port, tick_ms, save_dir, checkpoint_dir, config } => {
            if tick_ms == 0 {
                return Err(Error::InvalidArgument("--tick-ms must be positive".into()));
            }
            let cfg = load_config(config.as_ref())?;
            let opts =
                ServerOptions { tick: Duration::from_millis(tick_ms), world: cfg.world, save_dir, checkpoint_dir };
            serve_ui(port, &opts)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidArgument(_) | Error::NoDemonstrations => ExitCode::from(EXIT_USAGE),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_degenerate_stops_get_a_distinct_exit_code() {
        assert_eq!(train_exit_code(StopReason::DegenerateProjection), ExitCode::from(EXIT_DEGENERATE));
        for stop in [StopReason::Converged, StopReason::MaxIterations, StopReason::AlreadyMatched] {
            assert_eq!(train_exit_code(stop), ExitCode::SUCCESS);
        }
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
