//! Perplexity and model inspection.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{ModelConfig, TokenCorpus};
use crate::error::{Error, Result};
use crate::model::{ModelGraph, TapRequest, TokenBatch};
use crate::plan::{ModuleId, ModuleKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub schema: String,
    pub seq_len: usize,
    pub n_chunks: usize,
    /// Predicted tokens (each chunk of length `L` predicts `L - 1`).
    pub n_tokens: usize,
    /// Mean negative log-likelihood in nats.
    pub mean_nll: f64,
    pub perplexity: f64,
}

/// Summed next-token NLL (nats) over one sequence.
pub fn sequence_nll(graph: &ModelGraph, tokens: &[u32]) -> Result<f64> {
    let batch = TokenBatch::single(tokens.to_vec())?;
    let (logits, _) = graph.forward(&batch, &TapRequest::none())?;
    let mut total = 0.0f64;
    for t in 0..tokens.len() - 1 {
        let row = logits.row(t);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        total += lse - row[tokens[t + 1] as usize] as f64;
    }
    Ok(total)
}

/// Perplexity over non-overlapping chunks of `seq_len` tokens. A trailing
/// partial chunk is scored when it has at least two tokens.
pub fn perplexity(graph: &ModelGraph, corpus: &TokenCorpus, seq_len: usize) -> Result<PerplexityReport> {
    if seq_len < 2 || seq_len > graph.config.max_seq_len {
        return Err(Error::InvalidArgument(format!(
            "evaluation length {seq_len} must be in 2..={}",
            graph.config.max_seq_len
        )));
    }
    corpus.check_vocab(graph.config.vocab_size)?;
    let chunks: Vec<&[u32]> = corpus
        .token_ids
        .chunks(seq_len)
        .filter(|c| c.len() >= 2)
        .collect();
    if chunks.is_empty() {
        return Err(Error::Corpus("corpus has fewer than two tokens".into()));
    }
    let mut total = 0.0f64;
    let mut n_tokens = 0usize;
    for (i, chunk) in chunks.iter().enumerate() {
        total += sequence_nll(graph, chunk)?;
        n_tokens += chunk.len() - 1;
        log::debug!("eval chunk {}/{}", i + 1, chunks.len());
    }
    let mean_nll = total / n_tokens as f64;
    Ok(PerplexityReport {
        schema: crate::SCHEMA.into(),
        seq_len,
        n_chunks: chunks.len(),
        n_tokens,
        mean_nll,
        perplexity: mean_nll.exp(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleSummary {
    pub module: ModuleId,
    /// Heads (attention) or inner channels (FFN).
    pub units: usize,
    pub weight_params: usize,
    pub pruned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub schema: String,
    pub config: ModelConfig,
    pub parameter_count: usize,
    pub modules: Vec<ModuleSummary>,
}

pub fn inspect(graph: &ModelGraph) -> InspectReport {
    let modules = ModuleId::in_blocks(0..graph.blocks.len())
        .into_iter()
        .map(|id| {
            let b = &graph.blocks[id.block];
            let units = match id.kind {
                ModuleKind::Attention => b.attn.n_heads(),
                ModuleKind::Ffn => b.ffn.inner(),
            };
            ModuleSummary {
                module: id,
                units,
                weight_params: graph.module_weight_params(id),
                pruned: graph
                    .applied_plan
                    .as_ref()
                    .and_then(|p| p.module(&id))
                    .is_some_and(|m| !m.is_identity()),
            }
        })
        .collect();
    InspectReport {
        schema: crate::SCHEMA.into(),
        config: graph.config.clone(),
        parameter_count: graph.parameter_count(),
        modules,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{toy_checkpoint, toy_tokens, ToySpec};

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let mut g = ModelGraph::from_checkpoint(&toy_checkpoint(&ToySpec::gpt2(), 1)).unwrap();
        g.final_norm.gain.data_mut().fill(0.0);
        if let Some(b) = g.final_norm.bias.as_mut() {
            b.data_mut().fill(0.0);
        }
        let corpus = TokenCorpus::new(toy_tokens(128, 100, 1)).unwrap();
        let r = perplexity(&g, &corpus, 32).unwrap();
        assert!((r.perplexity - 128.0).abs() < 1e-3, "{}", r.perplexity);
        // 32 + 32 + 32 + 4 tokens
        assert_eq!(r.n_chunks, 4);
        assert_eq!(r.n_tokens, 31 * 3 + 3);
    }

    #[test]
    fn single_token_tail_is_dropped() {
        let g = ModelGraph::from_checkpoint(&toy_checkpoint(&ToySpec::gpt2(), 1)).unwrap();
        let corpus = TokenCorpus::new(toy_tokens(128, 33, 1)).unwrap();
        let r = perplexity(&g, &corpus, 32).unwrap();
        assert_eq!((r.n_chunks, r.n_tokens), (1, 31));
        assert!(r.perplexity.is_finite() && r.perplexity > 1.0);
        assert!(perplexity(&g, &corpus, 65).is_err());
    }

    #[test]
    fn inspect_counts() {
        let g = ModelGraph::from_checkpoint(&toy_checkpoint(&ToySpec::llama(), 1)).unwrap();
        let r = inspect(&g);
        assert_eq!(r.modules.len(), 4);
        assert_eq!(r.modules[1].weight_params, 3 * 64 * 172);
        assert!(r.modules.iter().all(|m| !m.pruned));
    }
}
