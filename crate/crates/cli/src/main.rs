use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use nowcast_cli::{CliError, Ctx, ModelName, RunConfig, Stage};

/// Probabilistic precipitation nowcasting pipeline.
#[derive(Debug, Parser)]
#[command(name = "nowcast", version)]
struct Args {
    #[arg(value_enum)]
    stage: Stage,
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory.
    #[arg(long)]
    out: PathBuf,
    /// Predictor for `predict` and `eval`.
    #[arg(long, value_enum, default_value = "micromodel")]
    model: ModelName,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write per-lead series for plotting.
    #[arg(long)]
    plot_data: bool,
    /// Accept artifacts produced by a different config.
    #[arg(long)]
    force: bool,
}

fn run(a: &Args) -> Result<(), CliError> {
    let cfg = RunConfig::load(&a.config, a.seed)?;
    let ctx = Ctx::new(cfg, a.out.clone(), a.force, a.plot_data)?;
    ctx.run(a.stage, a.model)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nowcast: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
