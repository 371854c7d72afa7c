use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nodecbf::io::{
    benchmark_json, load_dataset, load_scenario, load_suite, load_trajectory, metrics_json, run_report_json,
    save_model, save_trajectory,
};
use nodecbf::knode::{offline_train, TrainerConfig};
use nodecbf::sim::{benchmark_with, run_report, run_scenario_with, standard_suite, ConcurrentOptions};
use nodecbf::{compute_metrics, Obstacle, RunMode, SimError, Vec3};

/// Safety-filtered quadrotor-style simulations with a learned residual model.
#[derive(Parser, Debug)]
#[command(name = "nodecbf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write its trajectory CSV and metrics JSON.
    Run {
        /// Scenario TOML file.
        scenario: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value_t = Mode::Interleaved)]
        mode: Mode,
        /// Simulated seconds per wall-clock second in concurrent mode; 0 runs unthrottled.
        #[arg(long, default_value_t = 1.0)]
        realtime_factor: f64,
    },
    /// Fit the residual network to a logged dataset and save the model.
    TrainOffline {
        /// CSV with columns t, r_x..v_z, u_x..u_z (a trajectory CSV works too).
        dataset: PathBuf,
        out_model: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        hidden: Option<usize>,
        /// Training rounds over the full dataset.
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Run every scenario of a suite for several seeds and write the averaged table.
    Benchmark {
        /// Suite TOML with `[[scenario]]` tables, or `standard` for the built-in comparison.
        suite: String,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[command(flatten)]
        common: CommonArgs,
        /// Only interleaved mode is deterministic, so it is the only one accepted here.
        #[arg(long, value_enum, default_value_t = Mode::Interleaved)]
        mode: Mode,
    },
    /// Compute metrics from a trajectory CSV.
    Metrics {
        trajectory: PathBuf,
        /// Obstacle as `x,y,z,radius`; repeatable, in the order of the h_i columns.
        #[arg(long = "obstacle", value_parser = parse_obstacle)]
        obstacles: Vec<Obstacle>,
        /// Seconds excluded from the settled-distance metrics.
        #[arg(long, default_value_t = 20.0)]
        settle: f64,
        /// Restrict the metrics to the azimuth sectors [0, π/4] and [π, 5π/4].
        #[arg(long)]
        wedge: bool,
    },
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Overrides the scenario seed (base seed for benchmarks).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Interleaved,
    Concurrent,
}

impl From<Mode> for RunMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Interleaved => RunMode::Interleaved,
            Mode::Concurrent => RunMode::Concurrent,
        }
    }
}

fn parse_obstacle(s: &str) -> Result<Obstacle, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [x, y, z, r] if r > 0.0 => Ok(Obstacle::new(Vec3::new(x, y, z), r)),
        [_, _, _, _] => Err("radius must be positive".into()),
        _ => Err("expected x,y,z,radius".into()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// 2 for invalid configuration, 3 for integrator blow-up, 1 otherwise.
fn exit_code(e: &anyhow::Error) -> ExitCode {
    match e.downcast_ref::<SimError>() {
        Some(SimError::Config(_)) => ExitCode::from(2),
        Some(SimError::BlowUp { .. }) => ExitCode::from(3),
        Some(SimError::Format(_)) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run {
            scenario,
            common,
            mode,
            realtime_factor,
        } => run(&scenario, &common, mode, realtime_factor),
        Command::TrainOffline {
            dataset,
            out_model,
            seed,
            hidden,
            rounds,
            epochs,
            learning_rate,
            lambda,
            horizon,
        } => {
            let defaults = TrainerConfig::default();
            let cfg = TrainerConfig {
                seed: seed.unwrap_or(defaults.seed),
                hidden: hidden.unwrap_or(defaults.hidden),
                offline_rounds: rounds.unwrap_or(defaults.offline_rounds),
                epochs: epochs.unwrap_or(defaults.epochs),
                learning_rate: learning_rate.unwrap_or(defaults.learning_rate),
                lambda: lambda.unwrap_or(defaults.lambda),
                horizon: horizon.unwrap_or(defaults.horizon),
                ..defaults
            };
            let data = load_dataset(&dataset).map_err(SimError::from).with_context(|| format!("reading {}", dataset.display()))?;
            let snap = offline_train(&data, &cfg).map_err(SimError::from)?;
            save_model(&snap, &out_model).with_context(|| format!("writing {}", out_model.display()))?;
            println!("trained on {} samples, model written to {}", data.len(), out_model.display());
            Ok(())
        }
        Command::Benchmark {
            suite,
            trials,
            common,
            mode,
        } => {
            if !matches!(mode, Mode::Interleaved) {
                return Err(SimError::Config("benchmarks run in interleaved mode only".into()).into());
            }
            let mut scenarios = if suite == "standard" {
                standard_suite()
            } else {
                load_suite(Path::new(&suite))
                    .map_err(SimError::from)
                    .with_context(|| format!("reading {suite}"))?
            };
            if let Some(seed) = common.seed {
                scenarios = scenarios.iter().map(|s| s.with_seed(seed)).collect();
            }
            let report = benchmark_with(&scenarios, trials, |s, r| {
                log::info!("{} seed {}: {:?}", s.name, s.seed, r.metrics);
            })?;
            let json = benchmark_json(&report)?;
            write_out(&common.out_dir, "benchmark.json", &json)?;
            print!("{json}");
            Ok(())
        }
        Command::Metrics {
            trajectory,
            obstacles,
            settle,
            wedge,
        } => {
            let obstacles = if obstacles.is_empty() {
                vec![Obstacle::new(Vec3::zeros(), 3.0)]
            } else {
                obstacles
            };
            let log = load_trajectory(&trajectory, obstacles)
                .map_err(SimError::from)
                .with_context(|| format!("reading {}", trajectory.display()))?;
            let metrics = compute_metrics(&log, settle, wedge)?;
            println!("{}", metrics_json(&metrics)?);
            Ok(())
        }
    }
}

fn run(path: &Path, common: &CommonArgs, mode: Mode, realtime_factor: f64) -> Result<()> {
    let mut scenario = load_scenario(path)
        .map_err(SimError::from)
        .with_context(|| format!("reading {}", path.display()))?;
    if let Some(seed) = common.seed {
        scenario = scenario.with_seed(seed);
    }
    let opts = ConcurrentOptions {
        realtime_factor: (realtime_factor > 0.0).then_some(realtime_factor),
        ..ConcurrentOptions::default()
    };
    let (log, failure) = match run_scenario_with(&scenario, mode.into(), opts) {
        Ok(log) => (log, None),
        Err(SimError::BlowUp { t, partial }) => (*partial, Some(SimError::BlowUp { t, partial: Box::default() })),
        Err(e) => return Err(e.into()),
    };
    fs::create_dir_all(&common.out_dir).with_context(|| format!("creating {}", common.out_dir.display()))?;
    save_trajectory(&log, &common.out_dir.join("trajectory.csv"))?;
    if !log.rows.is_empty() {
        let report = run_report(&scenario, &log)?;
        let json = run_report_json(&report)?;
        write_out(&common.out_dir, "metrics.json", &json)?;
        println!("{json}");
    }
    match failure {
        Some(e) => Err(e).context("run aborted; partial trajectory written"),
        None => Ok(()),
    }
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
