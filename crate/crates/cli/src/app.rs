//! Command-line surface of the `cfm` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{evaluate, generate, report, sample, study, train};
use crate::config::{parse_checkpoint_ref, parse_config};
use crate::error::{CliError, CliResult};
use crate::experiment::Experiment;

#[derive(Debug, Parser)]
#[command(name = "cfm", version, about = "Conditional flow matching experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the training, test and reference data.
    Generate(Common),
    /// Trains the velocity network and selects checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continues from the latest stored checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Draws posterior ensembles for the configured measurements.
    Sample {
        #[command(flatten)]
        common: Common,
        /// `final`, `ma_minimum`, `ma_saturation` or an iteration number.
        #[arg(long, value_name = "ID")]
        checkpoint: Option<String>,
    },
    /// Scores the ensembles against references and closed forms.
    Evaluate(Common),
    /// Runs the toy overfitting study end to end.
    OverfitStudy(Common),
    /// Verifies the manifest and summarizes the run.
    Report(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Generate(c)
            | Command::Evaluate(c)
            | Command::OverfitStudy(c)
            | Command::Report(c) => c,
            Command::Train { common, .. } | Command::Sample { common, .. } => common,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Train { .. } => "train",
            Command::Sample { .. } => "sample",
            Command::Evaluate(_) => "evaluate",
            Command::OverfitStudy(_) => "overfit-study",
            Command::Report(_) => "report",
        }
    }
}

/// Loads the configuration, applies the overrides and runs one command as a
/// manifest stage. Returns the text to print on success.
pub fn run(command: &Command) -> CliResult<String> {
    let common = command.common();
    let mut cfg = parse_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.clone_from(out);
    }
    cfg.validate()?;
    let which = match command {
        Command::Sample {
            checkpoint: Some(id),
            ..
        } => parse_checkpoint_ref(id)
            .ok_or_else(|| CliError::Usage(format!("unknown checkpoint id `{id}`")))?,
        _ => parse_checkpoint_ref(&cfg.sample.checkpoint).expect("validated checkpoint id"),
    };
    let exp = Experiment::open(cfg)?;
    let json = |v: serde_json::Result<String>| v.expect("serializable value");
    exp.stage(command.name(), |exp| match command {
        Command::Generate(_) => Ok(json(serde_json::to_string_pretty(&generate::generate(
            exp,
        )?))),
        Command::Train { resume, .. } => Ok(json(serde_json::to_string_pretty(&train::train(
            exp, *resume,
        )?))),
        Command::Sample { .. } => Ok(json(serde_json::to_string_pretty(&sample::sample(
            exp, which,
        )?))),
        Command::Evaluate(_) => {
            let records = evaluate::evaluate(exp)?;
            Ok(records
                .iter()
                .map(|r| json(serde_json::to_string(r)))
                .collect::<Vec<_>>()
                .join("\n"))
        }
        Command::OverfitStudy(_) => Ok(json(serde_json::to_string_pretty(&study::overfit_study(
            exp,
        )?))),
        Command::Report(_) => Ok(report::report(exp)?.to_text()),
    })
}
