use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use uavnet_cli::{parse_config, run_experiment, threads_from_env, ConfigError, ExperimentConfig, RunError};

/// Multi-UAV network experiments: channel estimation, placement, routing.
#[derive(Debug, Parser)]
#[command(name = "uavnet", version)]
struct Args {
    /// Configuration file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds to run, comma separated. Overrides `experiment.seeds`.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output directory. Overrides `experiment.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` override, may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dump_config: bool,
}

fn load(args: &Args) -> Result<ExperimentConfig, RunError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                ConfigError::Invalid(format!("cannot read {}: {e}", path.display()))
            })?;
            parse_config(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v)?;
    }
    if !args.seed.is_empty() {
        let seeds: Vec<String> = args.seed.iter().map(u64::to_string).collect();
        cfg.set("experiment.seeds", &seeds.join(","))?;
    }
    if let Some(out) = &args.out {
        cfg.set("experiment.out_dir", &out.to_string_lossy())?;
    }
    cfg.check()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let result = load(&args).and_then(|cfg| {
        if args.dump_config {
            print!("{}", cfg.resolved_dump());
            return Ok(());
        }
        let report = run_experiment(&cfg, &cfg.out_dir(), threads_from_env())?;
        log::info!("wrote {} files to {}", report.files.len(), report.out_dir.display());
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
