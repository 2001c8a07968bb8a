mod cli;
mod commands;
mod config;
mod failure;

use std::process::ExitCode;

use clap::Parser;

use crate::cli::{Cli, Command};
use crate::config::PipelineConfig;
use crate::failure::Failure;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&Failure::contract(e.to_string().trim_end())),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&f),
    }
}

fn fail(f: &Failure) -> ExitCode {
    eprintln!("{}", f.to_json());
    ExitCode::from(f.exit_code() as u8)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = PipelineConfig::resolve(&cli.common)?;
    set_jobs(cfg.jobs)?;
    match &cli.command {
        Command::Phantom(args) => commands::phantom(&cfg, args),
        Command::Fit => commands::fit(&cfg),
        Command::Apply => commands::apply(&cfg),
        Command::Synth => commands::synth(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Report => commands::report(&cfg),
    }
}

#[cfg(feature = "parallel")]
fn set_jobs(jobs: Option<usize>) -> Result<(), Failure> {
    if let Some(n) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::contract(format!("--jobs: {e}")))?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn set_jobs(jobs: Option<usize>) -> Result<(), Failure> {
    if jobs.is_some_and(|n| n > 1) {
        log::warn!("built without the parallel feature; --jobs is ignored");
    }
    Ok(())
}
