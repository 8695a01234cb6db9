//! `itolab` — run the verification experiments from a TOML config.
//!
//! Exit codes: 0 when every asserted check passes, 1 when an asserted check
//! fails, 2 on configuration or guard errors.

mod config;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "itolab",
    about = "Forward/backward parabolic Ito equation laboratory on an exact noise tree",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config file.
    Run {
        /// Path to the config (see the repository README for the schema).
        config: PathBuf,
    },
    /// List the experiment catalogue and coefficient presets.
    List,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::List => {
            print!("{}", runner::list_text());
            ExitCode::SUCCESS
        }
        Command::Run { config } => run(&config),
    }
}

fn run(path: &PathBuf) -> ExitCode {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    let cfg = match RunConfig::parse(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let started = Instant::now();
    let out = match runner::dispatch(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let out_dir = PathBuf::from(cfg.out_dir());
    if let Err(e) = runner::write_outputs(&out_dir, &cfg, &out) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let passed = out.report.passed();
    println!(
        "{}: {} in {:.2}s — reports in {}",
        out.report.name,
        if passed { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64(),
        out_dir.display()
    );
    if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
