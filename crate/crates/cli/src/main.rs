use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gradeprompt::config::RunConfig;
use gradeprompt::dataset::Split;
use gradeprompt::pipeline::{Pipeline, RunOptions};
use gradeprompt::training::Stage;

#[derive(Parser, Debug)]
#[command(name = "gradeprompt", version, about = "Grade-prompted gland segmentation pipeline")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config run id.
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Fail on any missing, unexpected or mis-shaped tensor in init weights.
    #[arg(long, global = true)]
    strict_weights: bool,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum StageArg {
    Gland,
    Contour,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Gland => Stage::Gland,
            StageArg::Contour => Stage::Contour,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SplitArg {
    #[value(name = "train")]
    Train,
    #[value(name = "testA")]
    TestA,
    #[value(name = "testB")]
    TestB,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::TestA => Split::TestA,
            SplitArg::TestB => Split::TestB,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Generate the synthetic dataset into the data root.
    Synth,
    /// Cut training patches and write the patch manifest.
    Prepare,
    /// Train the grade classifier.
    TrainClassifier,
    /// Compute and cache heat maps for a split.
    Heatmaps {
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Run one segmentation training stage.
    TrainSeg {
        #[arg(long, value_enum)]
        stage: StageArg,
    },
    /// Predict instance masks for a split.
    Predict {
        #[arg(long, value_enum, default_value = "testA")]
        split: SplitArg,
    },
    /// Score predictions against the annotations.
    Evaluate {
        #[arg(long, value_enum, default_value = "testA")]
        split: SplitArg,
    },
    /// Write overlay, heat-map and loss-curve figures.
    Plot {
        #[arg(long, value_enum, default_value = "testA")]
        split: SplitArg,
    },
    /// prepare, train-classifier, heatmaps, train-seg (both stages),
    /// predict and evaluate in order.
    Run {
        #[arg(long, value_enum, default_value = "testA")]
        split: Vec<SplitArg>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    cfg.apply_env();
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(id) = &cli.run_id {
        cfg.run_id = id.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let opts = RunOptions {
        force: cli.force,
        strict_weights: cli.strict_weights,
    };
    let p = Pipeline::new(cfg, opts)?;
    match cli.command {
        Command::Config => unreachable!(),
        Command::Synth => {
            p.synth()?;
        }
        Command::Prepare => {
            p.prepare()?;
        }
        Command::TrainClassifier => {
            p.train_classifier()?;
        }
        Command::Heatmaps { split } => {
            p.heatmaps(split.into())?;
        }
        Command::TrainSeg { stage } => {
            p.train_seg(stage.into())?;
        }
        Command::Predict { split } => {
            p.predict(split.into())?;
        }
        Command::Evaluate { split } => {
            p.evaluate(split.into())?;
        }
        Command::Plot { split } => {
            p.plot(split.into())?;
        }
        Command::Run { split } => {
            let splits: Vec<Split> = split.into_iter().map(Split::from).collect();
            p.run_all(&splits)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
