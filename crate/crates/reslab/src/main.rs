use clap::{Parser, ValueEnum};
use reslab::harness::{run_and_emit, Command, ExperimentConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Spectrum,
    Fgr,
    Resonance,
    Evolve,
    Verify,
    Sweep,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Spectrum => Command::Spectrum,
            Cmd::Fgr => Command::Fgr,
            Cmd::Resonance => Command::Resonance,
            Cmd::Evolve => Command::Evolve,
            Cmd::Verify => Command::Verify,
            Cmd::Sweep => Command::Sweep,
        }
    }
}

/// Resonance experiments on the two-channel model.
#[derive(Debug, Parser)]
#[command(name = "reslab", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Directory for the report and series files (default: output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// `section.key=value`, applied after the file is read.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = ExperimentConfig::load(&cli.config, &cli.overrides)
        .and_then(|loaded| run_and_emit(cli.command.into(), &loaded, cli.out.as_deref()));
    match result {
        Ok(report) => {
            print!("{}", report.render());
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("reslab: {e}");
            ExitCode::from(2)
        }
    }
}
