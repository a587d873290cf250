//! Calibration batches: aligned windows of a token corpus, or text sampled
//! from the model itself.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_corpus, save_corpus, write_json, TokenCorpus};
use crate::error::{Error, Result};
use crate::model::{ModelGraph, Sampler, TokenBatch};
use crate::seed;

pub const CALIB_TOKENS_FILE: &str = "calib.d2ptok";
pub const CALIB_META_FILE: &str = "calib.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSpec {
    pub n_samples: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl CalibrationSpec {
    fn check(&self) -> Result<()> {
        if self.n_samples == 0 || self.seq_len < 2 {
            return Err(Error::InvalidArgument(format!(
                "calibration needs at least one sample of length >= 2 (got {} x {})",
                self.n_samples, self.seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CalibrationSource {
    Corpus { offsets: Vec<usize> },
    SelfGeneration { prompt: Vec<u32>, sampler: Sampler },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBatch {
    pub batch: TokenBatch,
    pub source: CalibrationSource,
    pub seed: u64,
}

impl CalibrationBatch {
    /// SHA-256 of the token ids (little-endian u32).
    pub fn digest(&self) -> String {
        token_digest(&self.batch.tokens)
    }

    pub fn offsets(&self) -> &[usize] {
        match &self.source {
            CalibrationSource::Corpus { offsets } => offsets,
            CalibrationSource::SelfGeneration { .. } => &[],
        }
    }
}

pub fn token_digest(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    seed::digest_hex(&bytes)
}

/// Start offsets of the corpus windows of length `seq_len`.
fn window_offsets(corpus: &TokenCorpus, seq_len: usize) -> Vec<usize> {
    (0..corpus.len() / seq_len).map(|w| w * seq_len).collect()
}

fn gather(corpus: &TokenCorpus, offsets: &[usize], seq_len: usize) -> Result<TokenBatch> {
    let mut tokens = Vec::with_capacity(offsets.len() * seq_len);
    for &o in offsets {
        tokens.extend_from_slice(&corpus.token_ids[o..o + seq_len]);
    }
    TokenBatch::new(offsets.len(), seq_len, tokens)
}

fn draw(
    corpus: &TokenCorpus,
    seq_len: usize,
    n: usize,
    seed: u64,
    exclude: &[usize],
) -> Vec<usize> {
    let mut pool: Vec<usize> = window_offsets(corpus, seq_len)
        .into_iter()
        .filter(|o| !exclude.contains(o))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.truncate(n);
    pool.sort_unstable();
    pool
}

/// `n_samples` distinct windows at offsets that are multiples of `seq_len`.
pub fn sample_corpus(corpus: &TokenCorpus, spec: &CalibrationSpec) -> Result<CalibrationBatch> {
    spec.check()?;
    let available = corpus.len() / spec.seq_len;
    if available < spec.n_samples {
        return Err(Error::Corpus(format!(
            "corpus of {} tokens has {available} windows of length {}, {} requested",
            corpus.len(),
            spec.seq_len,
            spec.n_samples
        )));
    }
    let offsets = draw(
        corpus,
        spec.seq_len,
        spec.n_samples,
        seed::derive(spec.seed, "calibration"),
        &[],
    );
    Ok(CalibrationBatch {
        batch: gather(corpus, &offsets, spec.seq_len)?,
        source: CalibrationSource::Corpus { offsets },
        seed: spec.seed,
    })
}

/// Up to `n_samples` windows disjoint from the calibration windows.
/// Returns `None` when the corpus has no window left.
pub fn sample_recovery(
    corpus: &TokenCorpus,
    calibration: &CalibrationBatch,
    n_samples: usize,
) -> Result<Option<CalibrationBatch>> {
    let seq_len = calibration.batch.seq_len;
    let offsets = draw(
        corpus,
        seq_len,
        n_samples,
        seed::derive(calibration.seed, "recovery"),
        calibration.offsets(),
    );
    if offsets.is_empty() {
        return Ok(None);
    }
    Ok(Some(CalibrationBatch {
        batch: gather(corpus, &offsets, seq_len)?,
        source: CalibrationSource::Corpus { offsets },
        seed: calibration.seed,
    }))
}

/// Samples `n_samples` sequences from the model, each starting at `prompt`.
/// Sequence `i` uses a sampler seed derived from the run seed and `i`.
pub fn self_generate(
    graph: &ModelGraph,
    spec: &CalibrationSpec,
    prompt: Option<Vec<u32>>,
    sampler: Sampler,
) -> Result<CalibrationBatch> {
    spec.check()?;
    let prompt = match prompt {
        Some(p) if !p.is_empty() => p,
        _ => vec![graph.config.bos_token_id.ok_or_else(|| {
            Error::InvalidArgument("self-generation needs a prompt or a bos_token_id in config.json".into())
        })?],
    };
    if prompt.len() >= spec.seq_len {
        return Err(Error::InvalidArgument(format!(
            "prompt of {} tokens leaves nothing to generate at length {}",
            prompt.len(),
            spec.seq_len
        )));
    }
    let mut tokens = Vec::with_capacity(spec.n_samples * spec.seq_len);
    for i in 0..spec.n_samples {
        let s = match sampler {
            Sampler::TopK { k, temperature, .. } => Sampler::TopK {
                k,
                temperature,
                seed: seed::derive(spec.seed, &format!("generate/{i}")),
            },
            Sampler::Greedy => Sampler::Greedy,
        };
        tokens.extend(graph.generate(&prompt, spec.seq_len - prompt.len(), s)?);
    }
    Ok(CalibrationBatch {
        batch: TokenBatch::new(spec.n_samples, spec.seq_len, tokens)?,
        source: CalibrationSource::SelfGeneration { prompt, sampler },
        seed: spec.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CalibrationMeta {
    schema: String,
    n_samples: usize,
    seq_len: usize,
    seed: u64,
    digest: String,
    source: CalibrationSource,
}

/// Writes `calib.d2ptok` and `calib.json` into `dir`.
pub fn save_calibration(dir: &Path, calib: &CalibrationBatch) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_corpus(
        &dir.join(CALIB_TOKENS_FILE),
        &TokenCorpus::new(calib.batch.tokens.clone())?,
    )?;
    write_json(
        &dir.join(CALIB_META_FILE),
        &CalibrationMeta {
            schema: crate::SCHEMA.into(),
            n_samples: calib.batch.n_seqs,
            seq_len: calib.batch.seq_len,
            seed: calib.seed,
            digest: calib.digest(),
            source: calib.source.clone(),
        },
    )
}

pub fn load_calibration(dir: &Path) -> Result<CalibrationBatch> {
    let meta_path = dir.join(CALIB_META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CalibrationMeta = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: meta_path.clone(),
        source: e,
    })?;
    let corpus = load_corpus(&dir.join(CALIB_TOKENS_FILE))?;
    let calib = CalibrationBatch {
        batch: TokenBatch::new(meta.n_samples, meta.seq_len, corpus.token_ids)?,
        source: meta.source,
        seed: meta.seed,
    };
    if calib.digest() != meta.digest {
        return Err(Error::Corpus(format!(
            "{}: token digest does not match {}",
            dir.join(CALIB_TOKENS_FILE).display(),
            meta_path.display()
        )));
    }
    Ok(calib)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{toy_checkpoint, toy_tokens, ToySpec};

    fn corpus() -> TokenCorpus {
        TokenCorpus::new(toy_tokens(128, 1000, 3)).unwrap()
    }

    #[test]
    fn windows_are_aligned_and_seeded() {
        let spec = CalibrationSpec {
            n_samples: 5,
            seq_len: 32,
            seed: 11,
        };
        let a = sample_corpus(&corpus(), &spec).unwrap();
        let b = sample_corpus(&corpus(), &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.batch.n_seqs, 5);
        assert!(a.offsets().iter().all(|o| o % 32 == 0 && o + 32 <= 1000));
        let c = corpus();
        for (i, &o) in a.offsets().iter().enumerate() {
            assert_eq!(a.batch.sequence(i), &c.token_ids[o..o + 32]);
        }
        let other = sample_corpus(&corpus(), &CalibrationSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a.offsets(), other.offsets());
    }

    #[test]
    fn recovery_windows_are_disjoint() {
        let spec = CalibrationSpec {
            n_samples: 10,
            seq_len: 32,
            seed: 1,
        };
        let cal = sample_corpus(&corpus(), &spec).unwrap();
        let rec = sample_recovery(&corpus(), &cal, 256).unwrap().unwrap();
        assert_eq!(rec.batch.n_seqs, 31 - 10);
        assert!(rec.offsets().iter().all(|o| !cal.offsets().contains(o)));
    }

    #[test]
    fn too_small_corpus_is_an_error() {
        let spec = CalibrationSpec {
            n_samples: 40,
            seq_len: 32,
            seed: 1,
        };
        assert!(matches!(sample_corpus(&corpus(), &spec), Err(Error::Corpus(_))));
    }

    #[test]
    fn self_generation_is_deterministic() {
        let g = ModelGraph::from_checkpoint(&toy_checkpoint(&ToySpec::gpt2(), 2)).unwrap();
        let spec = CalibrationSpec {
            n_samples: 2,
            seq_len: 6,
            seed: 5,
        };
        let a = self_generate(&g, &spec, None, Sampler::default_top_k(0)).unwrap();
        let b = self_generate(&g, &spec, None, Sampler::default_top_k(0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.batch.sequence(0)[0], 0);
        assert_ne!(a.batch.sequence(0), a.batch.sequence(1));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let cal = sample_corpus(
            &corpus(),
            &CalibrationSpec {
                n_samples: 3,
                seq_len: 16,
                seed: 9,
            },
        )
        .unwrap();
        save_calibration(dir.path(), &cal).unwrap();
        assert_eq!(load_calibration(dir.path()).unwrap(), cal);
    }
}
