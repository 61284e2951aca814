mod args;
mod commands;
mod config;
mod error;

use clap::Parser;

use crate::args::Cli;
use crate::commands::Ctx;
use crate::config::Settings;

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(if cli.verbose {
            tracing::Level::DEBUG
        } else {
            tracing::Level::WARN
        })
        .init();
    let settings = match Settings::load(&cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    if cli.verbose {
        match toml::to_string_pretty(&settings) {
            Ok(text) => eprintln!("effective config:\n{text}"),
            Err(e) => eprintln!("effective config: {settings:?} ({e})"),
        }
    }
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return 1;
        }
    };
    let ctx = Ctx {
        json: cli.json,
        seed: cli.seed,
        settings,
    };
    match runtime.block_on(commands::dispatch(cli.command, ctx)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
