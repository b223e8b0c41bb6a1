//! Command line front end for the experiment pipeline. Every pipeline stage
//! is a subcommand operating on a run directory, and `run` executes them all
//! in order. Exit codes: 0 success, 1 configuration problem, 2 stage failure.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use tmdc::harness::{run_experiment, run_stage, ExperimentConfig, RunPaths};
use tmdc::report::write_json;

#[derive(Parser)]
#[command(
    name = "tmdc",
    version,
    about = "Train, attack, and evaluate a diffusion-based classifier on synthetic blob data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config JSON. Omit to use the reference configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory where artifacts are read and written.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train/test/val splits.
    GenData(Common),
    /// Train the conditional denoiser on the training split.
    TrainDiffusion(Common),
    /// Train the transfer surrogate on the head of the training split.
    TrainBaseline(Common),
    /// Adversarially train a fresh discriminative baseline.
    AdvTrainBaseline(Common),
    /// Attack every split with PGD against the surrogate.
    GenAttack(Common),
    /// Score the surrogate, hardened baseline, and base diffusion classifier.
    Eval(Common),
    /// Fine-tune low-rank adapters on the adversarial training set.
    TmFinetune(Common),
    /// Sweep TM checkpoints on the adversarial validation set.
    SelectCkpt(Common),
    /// Score the selected checkpoint and assemble the report and manifest.
    Report(Common),
    /// Run every stage in order.
    Run(Common),
    /// Print the resolved configuration as JSON.
    ShowConfig {
        /// Experiment config JSON. Omit to print the reference configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

enum CliError {
    /// A problem with the configuration or invocation.
    Config(String),
    /// A pipeline stage failed.
    Stage(String),
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_json_file(p).map_err(|e| CliError::Config(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn run_one_stage(common: &Common, stage: &str) -> Result<(), CliError> {
    let cfg = load_config(&common.config, common.seed)?;
    let paths = RunPaths::new(&common.out);
    std::fs::create_dir_all(&common.out)
        .map_err(|e| CliError::Stage(format!("{}: {}", common.out.display(), e)))?;
    write_json(&paths.config(), &cfg).map_err(|e| CliError::Stage(e.to_string()))?;
    run_stage(&cfg, &paths, stage).map_err(|e| CliError::Stage(e.to_string()))?;
    println!("{} done -> {}", stage, common.out.display());
    Ok(())
}

fn real_main(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenData(c) => run_one_stage(&c, "gen-data"),
        Cmd::TrainDiffusion(c) => run_one_stage(&c, "train-diffusion"),
        Cmd::TrainBaseline(c) => run_one_stage(&c, "train-baseline"),
        Cmd::AdvTrainBaseline(c) => run_one_stage(&c, "adv-train-baseline"),
        Cmd::GenAttack(c) => run_one_stage(&c, "gen-attack"),
        Cmd::Eval(c) => run_one_stage(&c, "eval"),
        Cmd::TmFinetune(c) => run_one_stage(&c, "tm-finetune"),
        Cmd::SelectCkpt(c) => run_one_stage(&c, "select-ckpt"),
        Cmd::Report(c) => run_one_stage(&c, "report"),
        Cmd::Run(c) => {
            let cfg = load_config(&c.config, c.seed)?;
            let manifest =
                run_experiment(&cfg, &c.out).map_err(|e| CliError::Stage(e.to_string()))?;
            println!("run {} complete -> {}", manifest.run_id, c.out.display());
            for row in &manifest.metrics {
                println!("  {} / {}: {:.4}", row.model, row.attack, row.accuracy);
            }
            println!("  selected TM checkpoint: step {}", manifest.selected_step);
            Ok(())
        }
        Cmd::ShowConfig { config, seed } => {
            let cfg = load_config(&config, seed)?;
            let text = serde_json::to_string_pretty(&cfg)
                .map_err(|e| CliError::Config(e.to_string()))?;
            println!("{}", text);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {}", msg);
            ExitCode::from(1)
        }
        Err(CliError::Stage(msg)) => {
            eprintln!("stage error: {}", msg);
            ExitCode::from(2)
        }
    }
}
