//! `hodlr-gp`: fit, validate and benchmark HODLR Gaussian-process samplers.

use std::process::ExitCode;

use clap::Parser;

mod config;
mod run;

use config::{Mode, Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "hodlr-gp", version, about = "HODLR Gaussian-process regression")]
struct Cli {
    #[arg(value_enum)]
    mode: Mode,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = RunConfig::resolve(&cli.overrides).and_then(|cfg| {
        cfg.validate(cli.mode)?;
        match cli.mode {
            Mode::Fit => run::run_fit(&cfg),
            Mode::FitTensor => run::run_fit_tensor(&cfg),
            Mode::Validate => run::run_validate(&cfg),
            Mode::Bench => run::run_bench(&cfg),
        }
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
