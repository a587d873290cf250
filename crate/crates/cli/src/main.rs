//! `d2p`: prune, recover and evaluate transformer checkpoints.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "d2p", version, about = "Retraining-free structured pruning of transformer checkpoints")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "D2P_THREADS")]
    pub threads: Option<usize>,

    /// Print JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Show a checkpoint's configuration and prunable modules.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
    /// Build and save a calibration batch.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        calib: CalibArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pairwise Jensen-Shannon distance between attention heads.
    Divergence {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        calib: CalibArgs,
        /// Blocks as `first:last` (half-open) or `all`.
        #[arg(long)]
        blocks: Option<String>,
        #[arg(long, default_value_t = 0.20)]
        tau: f64,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a Graphviz graph of the sub-threshold pairs.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Prune a checkpoint to a target sparsity.
    Prune(PruneArgs),
    /// Perplexity over a token corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Chunk length (defaults to min(max_seq_len, 1024)).
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Write a small random checkpoint (and optionally a token corpus).
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ToyFlavor::Gpt2)]
        flavor: ToyFlavor,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write a random corpus of `--corpus-tokens` ids here.
        #[arg(long)]
        corpus_out: Option<PathBuf>,
        #[arg(long, default_value_t = 8192)]
        corpus_tokens: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ToyFlavor {
    Gpt2,
    Llama,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModuleChoice {
    All,
    Attn,
    Ffn,
}

#[derive(Args, Debug, Clone)]
pub struct CalibArgs {
    /// Directory written by `d2p calibrate`.
    #[arg(long, conflicts_with = "self_generate")]
    pub calib: Option<PathBuf>,
    /// Token corpus to draw windows from. With `--calib`, only recovery
    /// windows are drawn from it.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Sample calibration text from the model itself.
    #[arg(long)]
    pub self_generate: bool,
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    /// Sequence length (defaults to 1024 for gpt2, 128 for llama, capped
    /// at max_seq_len).
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub top_k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f32,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Output checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of prunable weight parameters to remove, in [0, 1).
    #[arg(long)]
    pub sparsity: f64,
    /// second_moment, l1, l2 or random.
    #[arg(long, default_value = "second_moment")]
    pub metric: String,
    #[arg(long, default_value_t = 0.20)]
    pub tau: f64,
    /// Blocks as `first:last` (half-open) or `all`.
    #[arg(long)]
    pub blocks: Option<String>,
    /// Module kinds to prune.
    #[arg(long, value_enum, default_value_t = ModuleChoice::All)]
    pub modules: ModuleChoice,
    /// Slice only; skip the least-squares re-fit.
    #[arg(long)]
    pub no_recovery: bool,
    /// Windows drawn for the re-fit (disjoint from calibration windows).
    #[arg(long, default_value_t = 256)]
    pub recovery_samples: usize,
    /// Ridge as a fraction of the mean Gram diagonal.
    #[arg(long, default_value_t = 1e-2)]
    pub ridge: f64,
    /// Gated FFN: count ‖W_D row‖² once in the score.
    #[arg(long)]
    pub gated_single_norm: bool,
    #[command(flatten)]
    pub calib: CalibArgs,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<d2p_core::Error>() {
        Some(e) if !e.is_user_error() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match std::panic::catch_unwind(|| commands::run(&cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(2),
    }
}
