//! Command-line interface. Every flag maps onto a configuration key, so a
//! run is fully described by the config text stored in its checkpoints.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{self, ModelKind, Target, Workspace};

#[derive(Parser, Debug)]
#[command(name = "llrec", version, about = "Hierarchical text-aware sequential recommendation")]
pub struct Cli {
    /// Configuration file of `key=value` lines (default: $LLREC_CONFIG).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.lr=0.001`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Recompute outputs even if they are already complete.
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Load, filter, index and split a dataset.
    Prepare {
        /// Interaction file.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Item metadata file.
        #[arg(long)]
        metadata: Option<PathBuf>,
        /// movielens-dat | jsonl | tsv
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        kcore: Option<usize>,
    },
    /// Train one model and save its checkpoint.
    Train {
        /// lite | lite+fixRec | lite+fixHead | full_beam | wo_d | wo_d_tid
        #[arg(long, default_value = "lite")]
        model: String,
        /// sampling (one segment per user per epoch) | all (every target)
        #[arg(long)]
        strategy: Option<String>,
        /// desk (small from-scratch models) | paper (pretrained-backbone hyperparameters)
        #[arg(long)]
        profile: Option<String>,
        /// Maximum epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write the item-embedding cache of the trained hierarchical model.
    Precompute,
    /// Full-catalog evaluation on the test split.
    Eval {
        /// Models to evaluate; `popularity` is also accepted.
        #[arg(long, value_delimiter = ',', default_value = "lite")]
        model: Vec<String>,
        /// Cutoffs, e.g. `10,20`.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
    /// Sampled evaluation against random negatives.
    Topn {
        #[arg(long, value_delimiter = ',', default_value = "lite")]
        model: Vec<String>,
        #[arg(long)]
        negatives: Option<usize>,
    },
    /// Time inference components, input lengths and encoder redundancy.
    Bench {
        /// Beam widths, e.g. `1,5,20`.
        #[arg(long, value_delimiter = ',')]
        beam: Vec<usize>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Train and evaluate all six ablation variants.
    Ablate,
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Cli {
    /// `--set` pairs followed by the pairs implied by explicit flags.
    pub fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for s in &self.overrides {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        if let Some(o) = &self.out {
            put("out", o.display().to_string());
        }
        if let Some(s) = self.seed {
            put("seed", s.to_string());
        }
        match &self.command {
            Command::Prepare {
                data,
                metadata,
                format,
                kcore,
            } => {
                if let Some(p) = data {
                    put("data.interactions", p.display().to_string());
                }
                if let Some(p) = metadata {
                    put("data.metadata", p.display().to_string());
                }
                if let Some(f) = format {
                    put("data.format", f.clone());
                }
                if let Some(k) = kcore {
                    put("data.kcore", k.to_string());
                }
            }
            Command::Train {
                strategy,
                profile,
                epochs,
                ..
            } => {
                if let Some(p) = profile {
                    put("train.profile", p.clone());
                }
                if let Some(s) = strategy {
                    put("train.strategy", s.clone());
                }
                if let Some(e) = epochs {
                    put("train.max_epochs", e.to_string());
                }
            }
            Command::Eval { k, .. } if !k.is_empty() => put("eval.ks", join(k)),
            Command::Topn { negatives: Some(n), .. } => put("eval.negatives", n.to_string()),
            Command::Bench { beam, reps } => {
                if !beam.is_empty() {
                    put("bench.beam_widths", join(beam));
                }
                if let Some(r) = reps {
                    put("bench.reps", r.to_string());
                }
            }
            _ => {}
        }
        Ok(out)
    }
}

fn targets(names: &[String]) -> Result<Vec<Target>> {
    names.iter().map(|n| Target::parse(n)).collect()
}

pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            e.print().ok();
            return Ok(());
        }
        Err(e) => {
            return Err(Error::Config(
                e.to_string()
                    .lines()
                    .next()
                    .unwrap_or("")
                    .trim_start_matches("error: ")
                    .to_string(),
            ))
        }
    };
    let config = RunConfig::load(cli.config.as_deref(), &cli.pairs()?)?;
    let ws = Workspace::new(&config.out)?;
    let force = cli.force;
    match &cli.command {
        Command::Prepare { .. } => pipeline::prepare(&config, &ws, force).map(drop),
        Command::Train { model, .. } => pipeline::train(&config, &ws, ModelKind::parse(model)?, force).map(drop),
        Command::Precompute => pipeline::precompute(&ws, force).map(drop),
        Command::Eval { model, .. } => pipeline::eval(&config, &ws, &targets(model)?, force).map(drop),
        Command::Topn { model, .. } => pipeline::topn(&config, &ws, &targets(model)?, force).map(drop),
        Command::Bench { .. } => pipeline::bench(&config, &ws, force).map(drop),
        Command::Ablate => pipeline::ablate(&config, &ws, force).map(drop),
    }
}
