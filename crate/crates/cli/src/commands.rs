use std::ops::Range;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use d2p_core::calib::{
    load_calibration, sample_corpus, sample_recovery, save_calibration, self_generate,
    CalibrationBatch, CalibrationSpec,
};
use d2p_core::checkpoint::{load_corpus, load_model, save_corpus, save_model, save_plan, write_json, Flavor};
use d2p_core::eval::{inspect, perplexity};
use d2p_core::metrics::{similarity_candidates, MetricOptions};
use d2p_core::pruner::{MetricKind, SparsityTarget};
use d2p_core::recovery::{head_divergence, run_pipeline, Mode, PipelineConfig};
use d2p_core::stats::{to_dot, DivergenceReport};
use d2p_core::toy::{toy_checkpoint, toy_tokens, ToySpec};
use d2p_core::{ModelGraph, ModuleKind, Sampler, SolveOptions, TokenCorpus, SCHEMA};

use crate::{CalibArgs, Cli, Command, ModuleChoice, PruneArgs, ToyFlavor};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Inspect { model } => cmd_inspect(cli, model),
        Command::Calibrate { model, calib, out } => cmd_calibrate(cli, model, calib, out),
        Command::Divergence {
            model,
            calib,
            blocks,
            tau,
            out,
            dot,
        } => cmd_divergence(cli, model, calib, blocks.as_deref(), *tau, out.as_deref(), dot.as_deref()),
        Command::Prune(args) => cmd_prune(cli, args),
        Command::Eval { model, corpus, seq_len } => cmd_eval(cli, model, corpus, *seq_len),
        Command::Toy {
            out,
            flavor,
            seed,
            corpus_out,
            corpus_tokens,
        } => cmd_toy(out, *flavor, *seed, corpus_out.as_deref(), *corpus_tokens),
    }
}

fn load_graph(dir: &Path) -> Result<ModelGraph> {
    let ckpt = load_model(dir).with_context(|| format!("loading model from {}", dir.display()))?;
    Ok(ModelGraph::from_checkpoint(&ckpt)?)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// `first:last` (half-open) or `all`; the default depends on the flavor.
fn parse_blocks(spec: Option<&str>, graph: &ModelGraph) -> Result<Range<usize>> {
    let n = graph.config.n_layers;
    let range = match spec {
        None => match graph.config.flavor {
            Flavor::Llama if n >= 32 => 4..30,
            _ => 0..n,
        },
        Some("all") => 0..n,
        Some(s) => {
            let (a, b) = s
                .split_once(':')
                .with_context(|| format!("--blocks {s:?}: expected first:last or all"))?;
            let a: usize = a.trim().parse().with_context(|| format!("--blocks {s:?}"))?;
            let b: usize = b.trim().parse().with_context(|| format!("--blocks {s:?}"))?;
            a..b
        }
    };
    if range.is_empty() || range.end > n {
        bail!("--blocks {}:{} is not a non-empty range within 0:{n}", range.start, range.end);
    }
    Ok(range)
}

fn default_seq_len(graph: &ModelGraph, requested: Option<usize>) -> usize {
    requested.unwrap_or_else(|| {
        let flavor_default = match graph.config.flavor {
            Flavor::Gpt2 => 1024,
            Flavor::Llama => 128,
        };
        flavor_default.min(graph.config.max_seq_len)
    })
}

fn load_checked_corpus(path: &Path, graph: &ModelGraph) -> Result<TokenCorpus> {
    let corpus = load_corpus(path)?;
    corpus.check_vocab(graph.config.vocab_size)?;
    Ok(corpus)
}

/// Calibration batch from the flags, plus the corpus (if any) for
/// recovery windows.
fn resolve_calibration(graph: &ModelGraph, args: &CalibArgs) -> Result<Option<(CalibrationBatch, Option<TokenCorpus>)>> {
    let corpus = args
        .corpus
        .as_deref()
        .map(|p| load_checked_corpus(p, graph))
        .transpose()?;
    let spec = CalibrationSpec {
        n_samples: args.samples,
        seq_len: default_seq_len(graph, args.seq_len),
        seed: args.seed,
    };
    let batch = if let Some(dir) = &args.calib {
        load_calibration(dir)?
    } else if args.self_generate {
        let sampler = Sampler::TopK {
            k: args.top_k,
            temperature: args.temperature,
            seed: args.seed,
        };
        self_generate(graph, &spec, None, sampler)?
    } else if let Some(c) = &corpus {
        sample_corpus(c, &spec)?
    } else {
        return Ok(None);
    };
    Ok(Some((batch, corpus)))
}

fn require_calibration(graph: &ModelGraph, args: &CalibArgs) -> Result<(CalibrationBatch, Option<TokenCorpus>)> {
    resolve_calibration(graph, args)?
        .context("no calibration source: pass --calib DIR, --corpus FILE or --self-generate")
}

fn cmd_inspect(cli: &Cli, model: &Path) -> Result<()> {
    let graph = load_graph(model)?;
    let report = inspect(&graph);
    if cli.json {
        return print_json(&report);
    }
    let c = &report.config;
    println!(
        "{:?} model: {} blocks, d_model {}, {} heads x {}, d_ff {}, vocab {}",
        c.flavor, c.n_layers, c.d_model, c.n_heads, c.d_head, c.d_ff, c.vocab_size
    );
    println!("parameters: {}", report.parameter_count);
    for m in &report.modules {
        let mark = if m.pruned { " (pruned)" } else { "" };
        println!("  {:<16} {:>6} units {:>10} weights{mark}", m.module.to_string(), m.units, m.weight_params);
    }
    Ok(())
}

fn cmd_calibrate(cli: &Cli, model: &Path, args: &CalibArgs, out: &Path) -> Result<()> {
    let graph = load_graph(model)?;
    let (batch, _) = require_calibration(&graph, args)?;
    save_calibration(out, &batch)?;
    let digest = batch.digest();
    if cli.json {
        return print_json(&serde_json::json!({
            "schema": SCHEMA,
            "out": out,
            "n_samples": batch.batch.n_seqs,
            "seq_len": batch.batch.seq_len,
            "digest": digest,
        }));
    }
    println!(
        "wrote {} sequences of {} tokens to {} (digest {digest})",
        batch.batch.n_seqs,
        batch.batch.seq_len,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct DivergenceOutput {
    schema: &'static str,
    tau: f64,
    calibration_digest: String,
    modules: Vec<DivergenceModule>,
}

#[derive(Serialize)]
struct DivergenceModule {
    #[serde(flatten)]
    report: DivergenceReport,
    candidates: Vec<d2p_core::metrics::Candidate>,
}

fn cmd_divergence(
    cli: &Cli,
    model: &Path,
    args: &CalibArgs,
    blocks: Option<&str>,
    tau: f64,
    out: Option<&Path>,
    dot: Option<&Path>,
) -> Result<()> {
    let graph = load_graph(model)?;
    if graph.applied_plan.is_some() {
        bail!("divergence runs on dense checkpoints; {} is pruned", model.display());
    }
    let range = parse_blocks(blocks, &graph)?;
    let (calib, _) = require_calibration(&graph, args)?;
    let mut modules = Vec::new();
    for (id, dm) in head_divergence(&graph, &calib.batch, range)? {
        let candidates = similarity_candidates(id, &dm, tau).candidates;
        modules.push(DivergenceModule {
            report: dm.report(id.to_string(), tau),
            candidates,
        });
    }
    if let Some(path) = dot {
        let reports: Vec<DivergenceReport> = modules.iter().map(|m| m.report.clone()).collect();
        std::fs::write(path, to_dot(&reports, tau)).with_context(|| format!("writing {}", path.display()))?;
    }
    let output = DivergenceOutput {
        schema: SCHEMA,
        tau,
        calibration_digest: calib.digest(),
        modules,
    };
    match out {
        Some(path) => write_json(path, &output)?,
        None if cli.json => print_json(&output)?,
        None => {}
    }
    if !cli.json {
        for m in &output.modules {
            let heads: Vec<String> = m
                .candidates
                .iter()
                .map(|c| format!("{}~{} ({:.3})", c.head, c.partner, c.divergence))
                .collect();
            println!("{}: {} pairs below {tau}; candidates [{}]", m.report.module, m.report.edges.len(), heads.join(", "));
        }
    }
    Ok(())
}

fn cmd_prune(cli: &Cli, args: &PruneArgs) -> Result<()> {
    let graph = load_graph(&args.model)?;
    let metric: MetricKind = args.metric.parse()?;
    let range = parse_blocks(args.blocks.as_deref(), &graph)?;
    let mode = if args.no_recovery {
        Mode::PruneOnly
    } else {
        Mode::PruneWithRecovery
    };
    let needs_data = metric == MetricKind::SecondMoment || mode == Mode::PruneWithRecovery;
    let resolved = if needs_data {
        Some(require_calibration(&graph, &args.calib)?)
    } else {
        resolve_calibration(&graph, &args.calib)?
    };
    let recovery = match (&resolved, mode) {
        (Some((calib, Some(corpus))), Mode::PruneWithRecovery) => {
            sample_recovery(corpus, calib, args.recovery_samples)?
        }
        _ => None,
    };
    if mode == Mode::PruneWithRecovery && recovery.is_none() {
        log::warn!("no disjoint recovery windows available; re-fitting on the calibration batch");
    }

    let mut config = PipelineConfig::new(SparsityTarget::new(args.sparsity)?, range);
    config.mode = mode;
    config.metric = metric;
    config.tau = args.tau;
    config.seed = args.calib.seed;
    config.solve = SolveOptions::ridge(args.ridge);
    config.metric_options = MetricOptions {
        gated_single_norm: args.gated_single_norm,
        ..MetricOptions::default()
    };
    config.kinds = match args.modules {
        ModuleChoice::All => vec![ModuleKind::Attention, ModuleKind::Ffn],
        ModuleChoice::Attn => vec![ModuleKind::Attention],
        ModuleChoice::Ffn => vec![ModuleKind::Ffn],
    };
    config.calibration_digest = resolved.as_ref().map(|(c, _)| c.digest());

    let out = run_pipeline(
        &graph,
        resolved.as_ref().map(|(c, _)| &c.batch),
        recovery.as_ref().map(|r| &r.batch),
        config,
    )?;
    save_model(&args.out, &out.graph.to_checkpoint())?;
    save_plan(&args.out.join("plan.json"), &out.plan)?;
    write_json(&args.out.join("manifest.json"), &out.manifest)?;

    let m = &out.manifest;
    if cli.json {
        return print_json(&serde_json::json!({
            "schema": SCHEMA,
            "out": args.out,
            "target_sparsity": m.target_sparsity,
            "achieved_sparsity": m.sparsity.sparsity,
            "module_ratio": m.module_ratio,
            "dense_parameters": m.dense_parameters,
            "pruned_parameters": m.pruned_parameters,
        }));
    }
    println!(
        "pruned {} -> {} parameters; sparsity {:.4} (target {:.4}, module ratio {:.4})",
        m.dense_parameters, m.pruned_parameters, m.sparsity.sparsity, m.target_sparsity, m.module_ratio
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_eval(cli: &Cli, model: &Path, corpus: &Path, seq_len: Option<usize>) -> Result<()> {
    let graph = load_graph(model)?;
    let corpus = load_checked_corpus(corpus, &graph)?;
    let seq_len = seq_len.unwrap_or(graph.config.max_seq_len.min(1024));
    let report = perplexity(&graph, &corpus, seq_len)?;
    if cli.json {
        return print_json(&report);
    }
    println!(
        "perplexity {:.4} (mean nll {:.6} nats over {} tokens, {} chunks of {})",
        report.perplexity, report.mean_nll, report.n_tokens, report.n_chunks, report.seq_len
    );
    Ok(())
}

fn cmd_toy(out: &Path, flavor: ToyFlavor, seed: u64, corpus_out: Option<&Path>, corpus_tokens: usize) -> Result<()> {
    let spec = match flavor {
        ToyFlavor::Gpt2 => ToySpec::gpt2(),
        ToyFlavor::Llama => ToySpec::llama(),
    };
    save_model(out, &toy_checkpoint(&spec, seed))?;
    println!("wrote {}", out.display());
    if let Some(path) = corpus_out {
        let corpus = TokenCorpus::new(toy_tokens(spec.vocab_size, corpus_tokens, seed ^ 0x5eed))?;
        save_corpus(path, &corpus)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
