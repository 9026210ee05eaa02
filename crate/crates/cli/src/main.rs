use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfsmp::runner::{exit_status, list_pipelines, run_config, write_outputs, ExperimentConfig};
use mfsmp::Error;

/// Worker thread count; results do not depend on it.
const THREADS_ENV: &str = "MFSMP_THREADS";

#[derive(Parser)]
#[command(
    name = "mfsmp",
    version,
    about = "Monte Carlo experiments for mean-field maximum principles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline described by a JSON config.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        paths: Option<usize>,
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the available pipelines.
    List,
}

fn run(
    config: PathBuf,
    seed: Option<u64>,
    paths: Option<usize>,
    out: Option<PathBuf>,
) -> Result<i32, Error> {
    let text = std::fs::read_to_string(&config)
        .map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = paths {
        cfg.n_paths = n;
    }
    if out.is_some() {
        cfg.output = out;
    }
    let dir = cfg
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(cfg.pipeline.name()));
    cfg.output = Some(dir.clone());
    let result = run_config(&cfg)?;
    write_outputs(&dir, &cfg, &result)?;
    for c in &result.checks {
        println!(
            "{} {}: {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    println!("outputs written to {}", dir.display());
    Ok(exit_status(&result))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => {
                eprintln!("error [config]: {THREADS_ENV} must be a positive integer");
                return ExitCode::from(2);
            }
        }
    }
    match cli.command {
        Command::List => {
            for (name, desc) in list_pipelines() {
                println!("{name:<14} {desc}");
            }
            ExitCode::SUCCESS
        }
        Command::Run {
            config,
            seed,
            paths,
            out,
        } => match run(config, seed, paths, out) {
            Ok(code) => ExitCode::from(code as u8),
            Err(e) => {
                eprintln!("error [{}]: {e}", e.module());
                ExitCode::from(e.exit_code() as u8)
            }
        },
    }
}
