use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use graphgame::experiment::{
    load_config, preset, reproduce_paper, run_experiment, Algorithm, Case, ExperimentConfig,
};
use graphgame::Error;

#[derive(Parser)]
#[command(name = "graphgame", version, about = "Graphical-game policy iteration and online learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the configuration's `output_dir`, then `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Built-in configuration used instead of --config.
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    Simulate,
    PiCoop,
    PiNoncoop,
    LearnCoop,
    LearnNoncoop,
    Verify,
    /// Runs the built-in benchmark end to end; `--preset` selects the case too.
    ReproducePaper {
        #[arg(value_enum, default_value = "coop")]
        case: CaseArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CaseArg {
    Coop,
    Noncoop,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut config = match (&cli.config, &cli.preset) {
        (Some(path), None) => load_config(path)?,
        (None, Some(name)) => preset(Case::from_preset_name(name)?),
        (Some(_), Some(_)) => return Err(Error::Validation("give either --config or --preset, not both".into())),
        (None, None) => return Err(Error::Validation("--config or --preset is required".into())),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<serde_json::Value, Error> {
    let algorithm = match &cli.command {
        Command::ReproducePaper { case } => {
            let case = match (&cli.preset, case) {
                (Some(name), _) => Case::from_preset_name(name)?,
                (None, CaseArg::Coop) => Case::Coop,
                (None, CaseArg::Noncoop) => Case::Noncoop,
            };
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let summary = reproduce_paper(case, &out, cli.seed)?;
            return serde_json::to_value(summary).map_err(|e| Error::Io(e.to_string()));
        }
        Command::Simulate => Algorithm::Simulate,
        Command::PiCoop => Algorithm::PiCoop,
        Command::PiNoncoop => Algorithm::PiNoncoop,
        Command::LearnCoop => Algorithm::LearnCoop,
        Command::LearnNoncoop => Algorithm::LearnNoncoop,
        Command::Verify => Algorithm::Verify,
    };
    let mut config = load(cli)?;
    config.algorithm = algorithm;
    config.validate()?;
    let out = cli.out.clone().or(config.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    run_experiment(&config, &out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).unwrap_or_default();
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
