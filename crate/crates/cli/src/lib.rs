//! Flag definitions and dispatch for the `hfan` binary.
//!
//! Five subcommands cover the pipeline: `synth` writes a labelled
//! corpus, `train` fits a model and saves a checkpoint, `cv` sweeps the
//! `(r, beta)` grid with 3-fold cross-validation, and `eval`/`predict`
//! score a split against a saved checkpoint. Flag values are validated
//! by clap, so malformed invocations exit with the usage code before
//! any file is touched.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::run;

fn parse_rate(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie strictly between 0 and 1, got {v}"))
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

fn parse_nonneg(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be non-negative, got {v}"))
    }
}

fn parse_decay(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie in (0, 1], got {v}"))
    }
}

fn parse_at_least(min: usize) -> impl Fn(&str) -> Result<usize, String> + Clone {
    move |s: &str| {
        let v: usize = s.parse().map_err(|_| format!("{s:?} is not a whole number"))?;
        if v >= min {
            Ok(v)
        } else {
            Err(format!("must be at least {min}, got {v}"))
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "hfan",
    version,
    about = "Opinion-spam detection with a hierarchical fusion attention network"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled review corpus split 80/10/10
    Synth(SynthArgs),
    /// Train a model and write a checkpoint
    Train(TrainArgs),
    /// 3-fold cross-validation over the (r, beta) grid
    Cv(CvArgs),
    /// Score a split against a checkpoint and print a metric report
    Eval(EvalArgs),
    /// Print per-review spam scores from a checkpoint
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Where the training split is written
    #[arg(long, value_name = "FILE", default_value = "train.jsonl")]
    pub train: PathBuf,
    /// Where the validation split is written
    #[arg(long, value_name = "FILE", default_value = "valid.jsonl")]
    pub valid: PathBuf,
    /// Where the test split is written
    #[arg(long, value_name = "FILE", default_value = "test.jsonl")]
    pub test: PathBuf,
    #[arg(long, default_value_t = 100, value_parser = parse_at_least(1))]
    pub n_users: usize,
    #[arg(long, default_value_t = 50, value_parser = parse_at_least(1))]
    pub n_products: usize,
    #[arg(long, default_value_t = 1000, value_parser = parse_at_least(10))]
    pub n_reviews: usize,
    /// Fraction of reviews (and users) that are spam, strictly inside (0, 1)
    #[arg(long, default_value_t = 0.2, value_parser = parse_rate)]
    pub spam_rate: f64,
    #[arg(long, default_value_t = 12, value_parser = parse_at_least(1))]
    pub n_templates: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training split (JSONL)
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    /// Validation split for early stopping (JSONL)
    #[arg(long, value_name = "FILE")]
    pub valid: Option<PathBuf>,
    /// Where the checkpoint is written
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Continue from the checkpoint instead of initializing fresh.
    /// Architecture and seed come from the file; pass the original
    /// training corpus and schedule flags.
    #[arg(long)]
    pub resume: bool,
    /// Embedding width
    #[arg(long, default_value_t = 16, value_parser = parse_at_least(2))]
    pub d: usize,
    /// Attention units per side
    #[arg(long, default_value_t = 2, value_parser = parse_at_least(1))]
    pub m: usize,
    /// Window radius for word attention
    #[arg(long, default_value_t = 2, value_parser = parse_at_least(1))]
    pub r: usize,
    /// Weight of the relation ranking loss
    #[arg(long, default_value_t = 1.0, value_parser = parse_nonneg)]
    pub beta: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32, value_parser = parse_at_least(2))]
    pub batch_size: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0, value_parser = parse_positive)]
    pub lr: f64,
    /// Per-epoch multiplicative factor on the step size
    #[arg(long, default_value_t = 0.95, value_parser = parse_decay)]
    pub lr_decay: f64,
    /// Negative triplets sampled per review
    #[arg(long, default_value_t = 2, value_parser = parse_at_least(1))]
    pub n_neg: usize,
    /// Sentence rows per review
    #[arg(long = "L", default_value_t = 10, value_parser = parse_at_least(1))]
    pub l: usize,
    /// Token columns per sentence
    #[arg(long = "T", default_value_t = 50, value_parser = parse_at_least(1))]
    pub t: usize,
    /// Token budget per review across all sentences
    #[arg(long, default_value_t = 500, value_parser = parse_at_least(1))]
    pub max_total_len: usize,
    /// Vocabulary frequency floor
    #[arg(long, default_value_t = 2, value_parser = parse_at_least(1))]
    pub min_count: usize,
    /// Keep word embeddings at their initial values
    #[arg(long)]
    pub freeze_word_emb: bool,
    /// Ablation: zero both entity embedding tables and keep them frozen
    #[arg(long)]
    pub zero_entity_emb: bool,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    /// Corpus to cross-validate on (JSONL)
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    #[arg(long, default_value_t = 16, value_parser = parse_at_least(2))]
    pub d: usize,
    #[arg(long, default_value_t = 2, value_parser = parse_at_least(1))]
    pub m: usize,
    /// Window radii to sweep, comma-separated
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
    pub grid_r: Vec<usize>,
    /// Relation loss weights to sweep, comma-separated
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1,10,100")]
    pub grid_beta: Vec<f64>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32, value_parser = parse_at_least(2))]
    pub batch_size: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0, value_parser = parse_positive)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.95, value_parser = parse_decay)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 2, value_parser = parse_at_least(1))]
    pub n_neg: usize,
    #[arg(long = "L", default_value_t = 10, value_parser = parse_at_least(1))]
    pub l: usize,
    #[arg(long = "T", default_value_t = 50, value_parser = parse_at_least(1))]
    pub t: usize,
    #[arg(long, default_value_t = 500, value_parser = parse_at_least(1))]
    pub max_total_len: usize,
    #[arg(long, default_value_t = 2, value_parser = parse_at_least(1))]
    pub min_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Corpus the checkpoint was trained on; rebuilds the vocabulary
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    /// Split to score (JSONL)
    #[arg(long, value_name = "FILE")]
    pub test: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Spam decision threshold on the spam probability
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Also print the report as a CSV row
    #[arg(long, value_enum, default_value_t = Emit::Json)]
    pub emit: Emit,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Corpus the checkpoint was trained on; rebuilds the vocabulary
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    /// Split to score (JSONL)
    #[arg(long, value_name = "FILE")]
    pub test: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Spam decision threshold on the spam probability
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}
