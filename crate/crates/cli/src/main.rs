use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use aiss_cli::config::parse_format;
use aiss_cli::{load_config, output, run, CliError, Command, Format, LOG_ENV};
use clap::error::ErrorKind;
use clap::Parser;

/// Small-gain interval search and almost-ISS checks for feedback interconnections.
#[derive(Debug, Parser)]
#[command(name = "aiss", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; the JSON report goes to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `sim.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["json", "csv", "both"])]
    format: Option<String>,
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Usage(e.to_string().trim().to_string())),
    };
    match execute(&args) {
        Ok(code) => ExitCode::from(code),
        Err(e) => fail(&e),
    }
}

fn execute(args: &Args) -> Result<u8, CliError> {
    let cfg = load_config(&args.config)?;
    let format = args
        .format
        .as_deref()
        .and_then(parse_format)
        .or(cfg.output.format)
        .unwrap_or(Format::Json);
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output.directory.as_ref().map(PathBuf::from));
    if format.csv() && out.is_none() {
        return Err(CliError::Usage("CSV output needs --out or output.directory".into()));
    }
    let seed = args.seed.unwrap_or(cfg.sim.seed);
    let outcome = run(args.command, &cfg, seed, format.csv())?;
    match &out {
        Some(dir) => {
            output::ensure_dir(dir)?;
            if format.json() {
                output::write_report(dir, &outcome.report)?;
            }
            for table in &outcome.tables {
                table.write_to(dir)?;
            }
        }
        None => {
            let text = serde_json::to_string_pretty(&outcome.report).map_err(|e| CliError::Output(e.to_string()))?;
            writeln!(std::io::stdout().lock(), "{text}").map_err(|e| CliError::Output(format!("stdout: {e}")))?;
        }
    }
    log::info!(
        "{} finished with exit code {}",
        args.command.name(),
        outcome.exit_code()
    );
    Ok(outcome.exit_code())
}
