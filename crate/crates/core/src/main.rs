use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use histodiff::pipeline::{ExperimentConfig, Pipeline, StageName, OUT_ENV};

#[derive(Parser)]
#[command(name = "histodiff", version, about = "Latent-diffusion synthetic augmentation pipeline")]
struct Cli {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overwrite artifacts even when they exist or were built from another config.
    #[arg(long, global = true)]
    force: bool,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the procedural benchmark (PNGs and manifests).
    GenBenchmark,
    /// Run one stage: lae, dm, aux_clf, latent_clf, decoder_ft, fid_clf,
    /// generate, select, downstream, evaluate.
    Run { stage: String },
    /// Run every stage for every seed and render the report.
    RunExperiment,
    /// Render the report from finished evaluations.
    Report,
}

fn load_config(cli: &Cli) -> histodiff::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let mut cfg = ExperimentConfig::default();
            if let Some(out) = std::env::var_os(OUT_ENV) {
                cfg.output_dir = out.into();
            }
            cfg
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> histodiff::Result<()> {
    let pipeline = Pipeline::new(load_config(cli)?, cli.force)?;
    match &cli.command {
        Command::GenBenchmark => {
            println!("{}", pipeline.gen_benchmark()?.display());
        }
        Command::Run { stage } => {
            for dir in pipeline.run(stage.parse::<StageName>()?)? {
                println!("{}", dir.display());
            }
        }
        Command::RunExperiment => {
            let report = pipeline.run_experiment()?;
            print!("{}", report.to_markdown());
            println!("{}", pipeline.report_dir().display());
        }
        Command::Report => {
            let report = pipeline.report()?;
            print!("{}", report.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
