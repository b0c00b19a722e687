use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use coxfield::commands::{run, Context, Mode};
use coxfield::config::LoadedConfig;

/// Conditional log Gaussian Cox process models for parent and child point patterns.
#[derive(Parser, Debug)]
#[command(name = "coxfield", version)]
struct Cli {
    #[arg(value_enum)]
    mode: Mode,
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides COXFIELD_OUT and the file's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = LoadedConfig::from_file(&cli.config).and_then(|loaded| {
        let ctx = Context::new(loaded, cli.mode, cli.seed, cli.out.as_deref());
        run(&ctx)
    });
    match result {
        Ok(files) => {
            log::info!("wrote {} files", files.len());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
