use std::path::PathBuf;
use std::process::ExitCode;

use bdgap_cli::{run, CliError, Mode, Overrides, ScenarioConfig};
use clap::Parser;

/// Run a Becker-Doring scenario described by a JSON config.
#[derive(Parser, Debug)]
#[command(name = "bdgap", version, about)]
struct Args {
    /// Scenario file.
    config: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Monomer density; replaces `mass` from the file.
    #[arg(long)]
    z: Option<f64>,
    /// Total mass; replaces `z` from the file.
    #[arg(long)]
    mass: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    /// Output path prefix.
    #[arg(long)]
    out: Option<String>,
}

fn main_inner(args: Args) -> Result<String, CliError> {
    let mut config = ScenarioConfig::load(&args.config)?;
    config.apply(&Overrides {
        mode: args.mode,
        z: args.z,
        mass: args.mass,
        n: args.n,
        t_end: args.t_end,
        eta: args.eta,
        out: args.out,
    })?;
    let summary = run(&config)?;
    Ok(serde_json::to_string_pretty(&summary).expect("summary serialises"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match main_inner(Args::parse()) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
