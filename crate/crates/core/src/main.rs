use clap::{Parser, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

use qnd_retro::config::{Mode, RunConfig};
use qnd_retro::pipeline::{exit_code, run};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Theory,
    Simulate,
    Estimate,
    Sweep,
    OracleCheck,
}

impl From<Command> for Mode {
    fn from(c: Command) -> Self {
        match c {
            Command::Theory => Mode::Theory,
            Command::Simulate => Mode::Simulate,
            Command::Estimate => Mode::Estimate,
            Command::Sweep => Mode::Sweep,
            Command::OracleCheck => Mode::OracleCheck,
        }
    }
}

/// Retrodiction of QND measurements on a spin oscillator.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of repetitions (overrides `sequence.repetitions`).
    #[arg(long)]
    reps: Option<usize>,
    /// Number of angles (overrides `theta_grid.count`).
    #[arg(long)]
    theta_count: Option<usize>,
    /// Record files for `estimate` (override `estimate.records`).
    #[arg(long, num_args = 1..)]
    records: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mode = Mode::from(cli.command);
    let result = RunConfig::load(&cli.config).and_then(|mut cfg| {
        if cli.seed.is_some() {
            cfg.seed = cli.seed;
        }
        if let Some(n) = cli.reps {
            cfg.sequence.repetitions = n;
        }
        if let Some(n) = cli.theta_count {
            cfg.theta_grid.count = n;
        }
        let cfg = cfg.prepare(mode)?;
        let out = cli.out.clone().unwrap_or_else(|| cfg.resolve(&cfg.output.dir));
        run(mode, &cfg, &out, &cli.records)
    });
    match result {
        Ok(done) => {
            for f in &done.files {
                println!("wrote {}", f.display());
            }
            println!("{}", done.summary);
            ExitCode::from(done.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
