//! Command-line front end of `speechlm`: runs the synthetic speech/text
//! language-model pipeline one artifact at a time.
//!
//! Every subcommand resolves one [`RunConfig`] from `--config` and `--set`,
//! verifies its inputs against their manifests and writes a manifest next
//! to each output.

mod artifacts;
mod commands;

pub use commands::run;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use speechlm::error::ErrorClass;
use speechlm::synthgen::Factor;

#[derive(Debug, Parser)]
#[command(name = "speechlm", version, about = "Train and evaluate a speech/text language model on a synthetic speech world")]
pub struct Cli {
    /// TOML run config; keys it leaves out take their defaults
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one config key, e.g. `--set train.optimizer.lr=1e-4` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Print reports as JSON instead of text tables
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FactorArg {
    Speaker,
    Background,
    Content,
}

impl From<FactorArg> for Factor {
    fn from(f: FactorArg) -> Self {
        match f {
            FactorArg::Speaker => Factor::Speaker,
            FactorArg::Background => Factor::Background,
            FactorArg::Content => Factor::Content,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeArg {
    /// Planted content class
    Content,
    /// Planted speaker class
    Prosody,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the frozen codec codebook by k-means on calibration features
    FitCodebook {
        /// Output codebook tensor file
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Generate the training corpus as JSON lines with codes and features
    GenData {
        /// Codebook written by fit-codebook
        #[arg(long, value_name = "PATH")]
        codebook: PathBuf,
        /// Output corpus file
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Average the SSL features of every code over the corpus
    FitCentroids {
        /// Corpus written by gen-data
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        /// Output centroid tensor file
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Build the initial checkpoint: projection, coarse buckets and speech embeddings
    InitEmbed {
        /// Centroids written by fit-centroids
        #[arg(long, value_name = "PATH")]
        centroids: PathBuf,
        /// Output checkpoint
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Train from an initial checkpoint up to train.steps
    Train {
        /// Checkpoint written by init-embed
        #[arg(long, value_name = "PATH")]
        init: PathBuf,
        /// Corpus written by gen-data
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        /// Directory for checkpoints and the loss journal
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Continue a training run from any of its checkpoints
    Resume {
        /// Checkpoint to continue from
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Corpus written by gen-data
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        /// Directory for checkpoints and the loss journal
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Length-normalized NLL of every corpus record as speech-only input
    Score {
        /// Model checkpoint
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Corpus-format JSON lines to score
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Write result lines here instead of stdout
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Include the per-token NLL in each result
        #[arg(long)]
        per_token: bool,
    },
    /// Pairwise preference accuracy on natural vs factor-switched utterances
    EvalPref {
        /// Model checkpoint
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Codebook written by fit-codebook
        #[arg(long, value_name = "PATH")]
        codebook: PathBuf,
        /// Factor to evaluate (repeatable; default all)
        #[arg(long, value_enum)]
        factor: Vec<FactorArg>,
        /// Write the JSON report here
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Write per-pair scores as JSON lines for audit
        #[arg(long, value_name = "PATH")]
        dump_pairs: Option<PathBuf>,
    },
    /// Train with and without the auxiliary losses per seed and compare preference accuracy
    Ablate {
        /// Initial checkpoint written by init-embed
        #[arg(long, value_name = "PATH")]
        init: PathBuf,
        /// Corpus written by gen-data
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        /// Codebook written by fit-codebook
        #[arg(long, value_name = "PATH")]
        codebook: PathBuf,
        /// Data-order seeds, comma separated
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Factor to evaluate (repeatable; default all)
        #[arg(long, value_enum)]
        factor: Vec<FactorArg>,
        /// Write the JSON report here
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Linear probes on frozen features of training-stage checkpoints
    Probe {
        /// Stage checkpoint as PERCENT=PATH (repeatable)
        #[arg(long = "checkpoint", value_name = "PERCENT=PATH")]
        checkpoints: Vec<String>,
        /// Stages that must be present, comma separated
        #[arg(long, value_delimiter = ',', default_value = "10,40,100")]
        stages: Vec<u32>,
        /// Codebook written by fit-codebook
        #[arg(long, value_name = "PATH")]
        codebook: PathBuf,
        /// Probe target class
        #[arg(long, value_enum, default_value = "content")]
        task: ProbeArg,
        /// Write the JSON report here
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

/// Process exit status for an error class.
pub fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 2,
        ErrorClass::Io => 3,
        ErrorClass::Provenance => 4,
        ErrorClass::Format => 5,
        ErrorClass::Numeric => 6,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn check(cmd: &mut clap::Command, path: &str) {
        let help = cmd.render_long_help().to_string();
        for arg in cmd.get_arguments() {
            assert!(!arg.is_hide_set(), "{path}: hidden flag {:?}", arg.get_id());
            if let Some(long) = arg.get_long() {
                assert!(help.contains(&format!("--{long}")), "{path} --help is missing --{long}");
                let documented = arg.get_help().is_some() || arg.get_long_help().is_some();
                assert!(documented || long == "help" || long == "version", "{path}: --{long} has no help text");
            }
        }
        for sub in cmd.get_subcommands_mut() {
            let name = format!("{path} {}", sub.get_name());
            assert!(sub.get_about().is_some() || sub.get_name() == "help", "{name} has no description");
            check(sub, &name);
        }
    }

    #[test]
    fn help_lists_every_flag() {
        let mut cmd = Cli::command();
        cmd.build();
        check(&mut cmd, "speechlm");
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
