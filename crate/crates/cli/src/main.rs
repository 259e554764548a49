use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use pilltop_cli::run::EXIT_CONFIG;
use pilltop_cli::{execute, load_config, Mode};

/// Design multi-material pills for a target drug-release profile.
#[derive(Parser)]
#[command(name = "pilltop", version)]
struct Args {
    mode: Mode,
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Network initialization seed; overrides `network.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Repeat for more detail (-v debug, -vv per-step solver and adjoint traces).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { EXIT_CONFIG } else { 0 });
        }
    };
    let level = match args.verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp_secs()
        .init();

    let mut cfg = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            log::error!("invalid configuration:\n{e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(out) = args.out {
        cfg.output_dir = std::path::absolute(&out).unwrap_or(out);
    }
    if let Some(seed) = args.seed {
        cfg.network.seed = seed;
    }
    let (result, out) = execute(&cfg, args.mode);
    match result {
        Ok(summary) => {
            log::info!(
                "{} ({}), artifacts in {}",
                summary.termination,
                summary.exit_code,
                out.display()
            );
            ExitCode::from(summary.exit_code)
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
