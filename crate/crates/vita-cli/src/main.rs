//! Command-line front end for the experiment pipeline. Every subcommand
//! resolves an experiment config (file plus overrides), then runs the stage
//! prefix it needs; finished stages are skipped via the manifest digests.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vita_core::config::{parse_config, ExperimentConfig};
use vita_core::error::Result;
use vita_core::experiment::{run_attack_eval, run_until, RunSummary, Stage, StageOutcome};

#[derive(Parser)]
#[command(name = "vita", version, about = "Vicinal transfer augmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; all fields default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override the config's global seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the dataset and generate the 75-cell corruption suite.
    GenSuite(Common),
    /// Run the pipeline through translator GAN training.
    TrainTranslator(Common),
    /// Run the pipeline through robust classifier training.
    TrainRobust(Common),
    /// Evaluate the robust checkpoint against the adversarial attack menu.
    AttackEval(Common),
    /// Run the pipeline through the corruption-grid evaluation.
    CorruptionEval(Common),
    /// Produce the normalized corruption report (runs the full pipeline).
    Report(Common),
    /// Run every stage end to end.
    Run(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenSuite(c)
            | Command::TrainTranslator(c)
            | Command::TrainRobust(c)
            | Command::AttackEval(c)
            | Command::CorruptionEval(c)
            | Command::Report(c)
            | Command::Run(c) => c,
        }
    }
}

fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(summary: &RunSummary) {
    for (stage, outcome) in &summary.outcomes {
        let word = match outcome {
            StageOutcome::Ran => "ran",
            StageOutcome::Skipped => "skipped (up to date)",
        };
        println!("{:<17} {word}", stage.name());
    }
    println!("artifacts under {}", summary.out_dir.display());
}

fn execute(command: &Command) -> Result<()> {
    let cfg = resolve_config(command.common())?;
    let last = match command {
        Command::GenSuite(_) => Stage::GenSuite,
        Command::TrainTranslator(_) => Stage::TrainTranslator,
        Command::TrainRobust(_) | Command::AttackEval(_) => Stage::TrainRobust,
        Command::CorruptionEval(_) => Stage::Evaluate,
        Command::Report(_) | Command::Run(_) => Stage::Report,
    };
    let summary = run_until(&cfg, last)?;
    print_summary(&summary);
    if let Command::AttackEval(_) = command {
        let report = run_attack_eval(&cfg)?;
        println!("clean error {:.4}", report.clean_error);
        for row in &report.rows {
            println!(
                "{:<9} {:<4} eps={:<6} error {:.4}",
                row.attack, row.norm, row.eps, row.error
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors; anything else is a
            // config problem under the exit-code contract.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
