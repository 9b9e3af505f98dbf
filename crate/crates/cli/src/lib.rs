//! Command-line pipeline: index building, retrieval augmentation, prompt
//! curation, two-stage toy training, cascade sampling and evaluation.
//!
//! Every command prints one line of JSON on success. Failures exit with 1
//! for bad input, 2 for I/O errors and 3 for internal errors.

pub mod commands;
pub mod config;
mod error;
pub mod records;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

pub use config::{PromptTask, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "vimi", version, about = "Retrieval-augmented multimodal video diffusion at desk scale")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed. Falls back to the config file, then VIMI_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a BM25 index over an image-text corpus (JSON lines).
    BuildIndex {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        k1: Option<f64>,
        #[arg(long)]
        b: Option<f64>,
    },
    /// Query an index.
    Retrieve {
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        query: String,
        #[arg(long)]
        k: Option<usize>,
        /// Drop the pair with this id from the results.
        #[arg(long)]
        exclude_self: Option<String>,
    },
    /// Attach the top-K retrieved pairs to every dataset caption.
    Augment {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn captions into subject-driven prompts using an entity dictionary.
    Curate {
        #[arg(long, conflicts_with = "dataset")]
        caption: Option<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Dictionary entry; repeatable. Added to the config's entities.
        #[arg(long = "entity")]
        entities: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train stage 1 (pretraining) or stage 2 (instruction tuning).
    Train(TrainArgs),
    /// Generate videos with the two-stage cascade.
    Sample(SampleArgs),
    /// Fréchet distance between generated and reference video features.
    Eval {
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Write a synthetic corpus, dataset and held-out set.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        records: usize,
        #[arg(long, default_value_t = 8)]
        heldout: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Augmented dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Stage 1 writes this checkpoint; stage 2 starts from it.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Stage-2 output checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub freeze_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Records whose captions are used as prompts.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps1: Option<usize>,
    #[arg(long)]
    pub steps2: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    #[arg(long)]
    pub schedule_rho: Option<f64>,
    #[arg(long)]
    pub num_samples: Option<usize>,
    #[arg(long, value_enum)]
    pub task: Option<PromptTask>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: Option<PathBuf>) {
    if value.is_some() {
        *slot = value;
    }
}

/// Loads the config, applies flag overrides and runs the command.
pub fn run(cli: Cli) -> Result<Value, CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    cfg.resolve_seed()?;
    let p = &mut cfg.paths;
    match cli.command {
        Command::BuildIndex { corpus, index, k1, b } => {
            set_path(&mut p.corpus, corpus);
            set_path(&mut p.index, index);
            set(&mut cfg.bm25.k1, k1);
            set(&mut cfg.bm25.b, b);
            commands::build_index(&cfg)
        }
        Command::Retrieve { index, query, k, exclude_self } => {
            set_path(&mut p.index, index);
            set(&mut cfg.top_k, k);
            commands::retrieve(&cfg, &query, exclude_self.as_deref())
        }
        Command::Augment { dataset, index, k, out } => {
            set_path(&mut p.dataset, dataset);
            set_path(&mut p.index, index);
            set_path(&mut p.output, out);
            set(&mut cfg.top_k, k);
            commands::augment(&cfg)
        }
        Command::Curate { caption, dataset, entities, out } => {
            set_path(&mut p.dataset, dataset);
            set_path(&mut p.output, out);
            cfg.entities.extend(entities);
            commands::curate(&cfg, caption.as_deref())
        }
        Command::Train(a) => {
            set_path(&mut p.dataset, a.dataset);
            set_path(&mut p.checkpoint, a.checkpoint);
            set_path(&mut p.output, a.out);
            let t = &mut cfg.train;
            if let Some(steps) = a.steps {
                if a.stage == 1 {
                    t.stage1_steps = steps;
                } else {
                    t.stage2_steps = steps;
                }
            }
            set(&mut t.batch_size, a.batch_size);
            set(&mut t.lr, a.lr);
            if a.freeze_steps.is_some() {
                t.freeze_steps = a.freeze_steps;
            }
            commands::train(&cfg, a.stage)
        }
        Command::Sample(a) => {
            set_path(&mut p.checkpoint, a.checkpoint);
            set_path(&mut p.dataset, a.dataset);
            set_path(&mut p.index, a.index);
            set_path(&mut p.output, a.out);
            set(&mut cfg.cascade.stage1_steps, a.steps1);
            set(&mut cfg.cascade.stage2_steps, a.steps2);
            set(&mut cfg.sample.cfg_scale, a.cfg_scale);
            set(&mut cfg.diffusion.rho, a.schedule_rho);
            set(&mut cfg.sample.num_samples, a.num_samples);
            set(&mut cfg.task, a.task);
            commands::sample(&cfg)
        }
        Command::Eval { generated, reference } => {
            set_path(&mut p.generated, generated);
            set_path(&mut p.reference, reference);
            commands::eval(&cfg)
        }
        Command::Synth { out, records, heldout, classes } => {
            set_path(&mut p.output, out);
            commands::synth(&cfg, records, heldout, classes)
        }
    }
}
