mod cli;
mod commands;
mod config;
mod error;
mod workspace;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use cli::Cli;
use commands::Ctx;
use config::ProjectConfig;
use error::{CliError, CliResult};
use workspace::Workspace;

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("DEVSURV_LOG")
        .format_timestamp(None)
        .init();
}

fn execute(cli: Cli) -> CliResult<String> {
    let env = |k: &str| std::env::var(k).ok();
    let cfg = ProjectConfig::load(cli.config.as_deref(), &env)?;
    let name = cli.command.name();
    let ws = Workspace::open(&cfg.output_dir, &name, &cfg.hash())?;
    let mut ctx = Ctx { cfg, ws };
    let summary = commands::run(cli.command, &mut ctx)?;
    ctx.ws.finish()?;
    Ok(summary)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    init_logging(cli.verbose, cli.quiet);
    match execute(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
