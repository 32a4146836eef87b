mod commands;
mod config;
mod pgm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use commands::Layout;
use config::Method;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Command {
    Phantom,
    Simulate,
    Detect,
    Reconstruct,
    Evaluate,
    Report,
    Pipeline,
}

/// Motion-robust T2* mapping on simulated multi-echo GRE data.
#[derive(Parser, Debug)]
#[command(name = "t2moco", version)]
struct Cli {
    command: Command,
    /// JSON run configuration; missing keys take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Seed for the phantom, the motion simulation and ORBA.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: T2MOCO_THREADS, else all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Restrict reconstruct/pipeline to these methods.
    #[arg(short, long, value_delimiter = ',')]
    method: Vec<Method>,
    /// Output directory; overrides work_dir from the config.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// `section.key=value` overrides applied after the config file.
    overrides: Vec<String>,
}

fn thread_count(cli: Option<usize>, configured: Option<usize>) -> anyhow::Result<Option<usize>> {
    if let Some(n) = cli.or(configured) {
        return Ok(Some(n));
    }
    match std::env::var("T2MOCO_THREADS") {
        Ok(v) => Ok(Some(v.trim().parse().map_err(|_| anyhow::anyhow!("T2MOCO_THREADS={v} is not a count"))?)),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };

    let cfg = match config::load(cli.config.as_deref(), &cli.overrides, cli.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match thread_count(cli.threads, cfg.threads) {
        Ok(Some(0)) | Err(_) => {
            eprintln!("error: thread count must be a positive integer");
            return ExitCode::from(2);
        }
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        }
        Ok(None) => {}
    }

    let layout = Layout::new(cli.out.clone().unwrap_or_else(|| cfg.work_dir.clone()));
    let methods = if cli.method.is_empty() { cfg.reconstruct.methods.clone() } else { cli.method.clone() };
    let result = match cli.command {
        Command::Phantom => commands::cmd_phantom(&cfg, &layout),
        Command::Simulate => commands::cmd_simulate(&cfg, &layout),
        Command::Detect => commands::cmd_detect(&cfg, &layout),
        Command::Reconstruct => commands::cmd_reconstruct(&cfg, &layout, &methods),
        Command::Evaluate => commands::cmd_evaluate(&cfg, &layout),
        Command::Report => commands::cmd_report(&cfg, &layout),
        Command::Pipeline => commands::cmd_pipeline(&cfg, &layout, &methods),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
