use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use toa_nav::config::{self, ConfigError, EstimatorChoice, ExperimentConfig};
use toa_nav::experiment::{self, ExperimentError};

#[derive(Parser)]
#[command(name = "toa-nav", version, about = "IMU + 5G ToA fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate ToA measurements for every configured seed.
    Simulate(Common),
    /// Run the estimators on one seed and write trajectories and metrics.
    Run(Common),
    /// Run every (scenario, BS count, estimator, seed) case and aggregate.
    Sweep(Common),
    /// Print the default configuration with inline documentation.
    GenConfig {
        /// Write config.toml into this directory instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic IMU and ground-truth files.
    GenTraj(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the configured seed lists with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    estimator: Option<EstimatorArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Eskf,
    Pgo,
    Both,
}

impl From<EstimatorArg> for EstimatorChoice {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Eskf => Self::Eskf,
            EstimatorArg::Pgo => Self::Pgo,
            EstimatorArg::Both => Self::Both,
        }
    }
}

impl Common {
    fn resolve(&self, config_required: bool) -> Result<(ExperimentConfig, PathBuf), ExperimentError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None if config_required => {
                return Err(ConfigError::Invalid("--config is required for this command".into()).into())
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.run.seeds = vec![seed];
            cfg.sweep.seeds = vec![seed];
        }
        if let Some(w) = self.workers {
            cfg.run.workers = w;
        }
        if let Some(e) = self.estimator {
            cfg.estimator = e.into();
        }
        cfg.validate()?;
        let out = self.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.run.out_dir));
        Ok((cfg, out))
    }
}

fn report(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn gen_config(out: Option<&Path>) -> Result<(), ExperimentError> {
    match out {
        None => print!("{}", config::TEMPLATE),
        Some(dir) => {
            let path = dir.join("config.toml");
            experiment::write_file(&path, config::TEMPLATE)?;
            report(&[path]);
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Simulate(c) => {
            let (cfg, out) = c.resolve(false)?;
            report(&experiment::cmd_simulate(&cfg, &out)?);
        }
        Command::GenTraj(c) => {
            let (cfg, out) = c.resolve(false)?;
            report(&experiment::cmd_gen_traj(&cfg, &out)?);
        }
        Command::Run(c) => {
            let (cfg, out) = c.resolve(true)?;
            let run = experiment::cmd_run(&cfg, &out)?;
            for r in &run.results {
                println!("{}: ATE {:.4} m, RPE_T {:.4} m, step {:.3} ms", r.estimator.name(), r.report.ate, r.report.rpe_t, r.report.time_mean_ms);
            }
            report(&run.files);
        }
        Command::Sweep(c) => {
            let (cfg, out) = c.resolve(true)?;
            let rows = experiment::cmd_sweep(&cfg, &out)?;
            print!("{}", experiment::format_sweep(&rows));
        }
        Command::GenConfig { out } => gen_config(out.as_deref())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
