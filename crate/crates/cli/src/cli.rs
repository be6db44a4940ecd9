//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "densesteer",
    about = "Dense-reasoning steering pipeline: build contrastive pairs, extract residual-stream vectors, steer greedy decoding, and evaluate density/NLL/accuracy",
    version = crate::runctx::version_string(),
    propagate_version = true
)]
pub struct Cli {
    /// Optional TOML config file (lowest-precedence settings layer).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Model backend.
    #[arg(long, global = true)]
    pub backend: Option<String>,

    /// Worker-thread cap for batch stages.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormatArg {
    #[value(name = "gsm8k-jsonl")]
    Gsm8kJsonl,
    #[value(name = "plain-jsonl")]
    PlainJsonl,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewriterArg {
    Rule,
    Random,
    External,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyArg {
    #[value(name = "generated-only")]
    GeneratedOnly,
    #[value(name = "all-positions")]
    AllPositions,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptArg {
    Cot,
    Dense,
}

#[derive(Args, Debug)]
pub struct DatasetArgs {
    /// Dataset file (JSON Lines).
    #[arg(long)]
    pub dataset: PathBuf,

    /// Dataset layout.
    #[arg(long, value_enum, default_value = "gsm8k-jsonl")]
    pub format: FormatArg,

    /// Use only the first N questions.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Initialize a deterministic micro model and write its weight file.
    InitModel {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 256)]
        d_ff: usize,
        #[arg(long, default_value_t = 259)]
        vocab: usize,
        #[arg(long, default_value_t = 2560)]
        max_seq_len: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },

    /// Greedy-generate reasoning traces for a question set.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        dataset: DatasetArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long, default_value_t = 1)]
        samples_per_question: u32,
        #[arg(long, value_enum, default_value = "cot")]
        prompt: PromptArg,
    },

    /// Build dense/sparse contrastive pairs from the model's own outputs.
    BuildPairs {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        dataset: DatasetArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "rule")]
        rewriter: RewriterArg,
        #[arg(long, default_value_t = 50)]
        n_pairs: usize,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        /// Rule rewriter: short-step token threshold.
        #[arg(long, default_value_t = 12)]
        short_step_tokens: usize,
        /// Merge budget per trace (rule and random rewriters).
        #[arg(long, default_value_t = 3)]
        max_merges: usize,
        /// Random-compression base seed.
        #[arg(long, default_value_t = 0)]
        merge_seed: u64,
        /// External rewriter: OpenAI-compatible base URL.
        #[arg(long)]
        endpoint: Option<String>,
        /// External rewriter: model name.
        #[arg(long)]
        model_name: Option<String>,
        /// External rewriter: env var holding the bearer credential.
        #[arg(long)]
        credential_env: Option<String>,
        /// External rewriter: response cache directory.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Replay cached responses only; no network.
        #[arg(long)]
        offline: bool,
        /// Drop questions whose negative answer misses the gold answer.
        #[arg(long)]
        require_gold_match: bool,
    },

    /// Audit a pairs file: similarity, merge ratio, preservation checks.
    AuditPairs {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },

    /// Extract a steering vector from pairs at one layer.
    ExtractVector {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
        /// Encode on the bare question instead of the chain-of-thought prompt.
        #[arg(long)]
        bare_question: bool,
    },

    /// Greedy-generate with a steering vector injected.
    SteerGenerate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vector: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        lambda: f64,
        #[command(flatten)]
        dataset: DatasetArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long, value_enum, default_value = "generated-only")]
        policy: PolicyArg,
        /// Bypass the vector/model fingerprint check.
        #[arg(long)]
        force_fingerprint: bool,
    },

    /// Score traces: per-record mean NLL plus a histogram CSV.
    ScoreNll {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        histogram: Option<PathBuf>,
        #[arg(long, default_value_t = 0.25)]
        bin_width: f64,
    },

    /// Structural metrics per trace: steps, tokens, density.
    Density {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },

    /// Density-alignment score for one (rho, nll) point.
    Das {
        #[arg(long)]
        rho: f64,
        #[arg(long, allow_hyphen_values = true)]
        nll: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Evaluate accuracy/steps/density/tokens/NLL, optionally steered.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        dataset: DatasetArgs,
        #[arg(long)]
        vector: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
        lambda: f64,
        /// Inject at this layer instead of the vector's own layer.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "cot")]
        prompt: PromptArg,
        #[arg(long, value_enum, default_value = "generated-only")]
        policy: PolicyArg,
        #[arg(long)]
        force_fingerprint: bool,
    },

    /// Grid-sweep layers and lambda on a validation set; emit the
    /// sensitivity table and the selected cell.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[command(flatten)]
        dataset: DatasetArgs,
        /// Comma-separated candidate layers, e.g. "0,1,2,3".
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long, allow_hyphen_values = true, default_value_t = -20.0)]
        lambda_min: f64,
        #[arg(long, allow_hyphen_values = true, default_value_t = 20.0)]
        lambda_max: f64,
        #[arg(long, default_value_t = 2.0)]
        lambda_step: f64,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sensitivity_csv: PathBuf,
        /// Take a seeded validation subset of the dataset first.
        #[arg(long)]
        val_fraction: Option<f64>,
        #[arg(long, default_value_t = 17)]
        split_seed: u64,
        #[arg(long, value_enum, default_value = "generated-only")]
        policy: PolicyArg,
        #[arg(long)]
        bare_question: bool,
    },

    /// Sample-weighted average of per-set accuracies.
    Avg {
        /// Comma-separated accuracies (used with --sizes).
        #[arg(long, value_delimiter = ',')]
        accuracies: Vec<f64>,
        /// Comma-separated item counts, aligned with --accuracies.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        /// Alternatively: evaluation report JSON files.
        #[arg(long, num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}
