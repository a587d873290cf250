//! On-disk interchange format.
//!
//! A checkpoint directory holds `config.json`, `tensors.json` (manifest),
//! one monolithic `tensors.bin` of little-endian f32 values, and, for pruned
//! models, `plan.json`. Token corpora are `.d2ptok` files: the 8-byte magic
//! `D2PTOK01` followed by little-endian u32 ids.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::plan::{ModuleId, ModuleKind, PruningPlan};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "tensors.json";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const PLAN_FILE: &str = "plan.json";
pub const CORPUS_MAGIC: &[u8; 8] = b"D2PTOK01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Gpt2,
    Llama,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    Standard,
    Gated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Layernorm,
    Rmsnorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    Learned,
    Rope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub flavor: Flavor,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub ffn_kind: FfnKind,
    pub activation: Activation,
    pub norm_kind: NormKind,
    pub positional: Positional,
    pub tied_embeddings: bool,
    pub norm_eps: f32,
    /// Beginning-of-text token used as the default self-generation prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bos_token_id: Option<u32>,
}

impl ModelConfig {
    /// Shape-only description of the public GPT-2 small checkpoint.
    pub fn gpt2_small() -> Self {
        Self {
            flavor: Flavor::Gpt2,
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_head: 64,
            d_ff: 3072,
            vocab_size: 50257,
            max_seq_len: 1024,
            ffn_kind: FfnKind::Standard,
            activation: Activation::Gelu,
            norm_kind: NormKind::Layernorm,
            positional: Positional::Learned,
            tied_embeddings: true,
            norm_eps: 1e-5,
            bos_token_id: Some(50256),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Checkpoint(format!("invalid config: {msg}")));
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return bad(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        match self.flavor {
            Flavor::Gpt2 => {
                if self.ffn_kind != FfnKind::Standard
                    || self.positional != Positional::Learned
                    || self.norm_kind != NormKind::Layernorm
                {
                    return bad("gpt2 flavor requires standard ffn, learned positions, layernorm".into());
                }
            }
            Flavor::Llama => {
                if self.ffn_kind != FfnKind::Gated
                    || self.positional != Positional::Rope
                    || self.norm_kind != NormKind::Rmsnorm
                {
                    return bad("llama flavor requires gated ffn, rope, rmsnorm".into());
                }
                if !self.d_head.is_multiple_of(2) {
                    return bad("rope needs an even d_head".into());
                }
            }
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be > 0".into());
        }
        if let Some(bos) = self.bos_token_id {
            if bos as usize >= self.vocab_size {
                return bad(format!("bos_token_id {bos} >= vocab_size"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

/// Expected shape of one named tensor, and whether it must be present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub shape: Vec<usize>,
    pub required: bool,
}

/// All tensor names the naming convention allows for `config`, with shapes
/// adjusted for any pruned inner dimensions recorded in `plan`.
pub fn expected_tensors(
    config: &ModelConfig,
    plan: Option<&PruningPlan>,
) -> BTreeMap<String, TensorSpec> {
    let mut out = BTreeMap::new();
    let mut put = |name: String, shape: Vec<usize>, required: bool| {
        out.insert(name, TensorSpec { shape, required });
    };
    let d = config.d_model;
    let layernorm = config.norm_kind == NormKind::Layernorm;

    put("tok_emb".into(), vec![config.vocab_size, d], true);
    if config.positional == Positional::Learned {
        put("pos_emb".into(), vec![config.max_seq_len, d], true);
    }
    for i in 0..config.n_layers {
        let inner = |kind: ModuleKind, full: usize| {
            plan.and_then(|p| p.module(&ModuleId::new(i, kind)))
                .map_or(full, |m| m.kept.len())
        };
        let attn_inner = inner(ModuleKind::Attention, d);
        let ffn_inner = inner(ModuleKind::Ffn, config.d_ff);

        let a = format!("blocks.{i}.attn");
        for w in ["wq", "wk", "wv"] {
            put(format!("{a}.{w}"), vec![d, attn_inner], true);
        }
        put(format!("{a}.wo"), vec![attn_inner, d], true);
        for b in ["bq", "bk", "bv"] {
            put(format!("{a}.{b}"), vec![attn_inner], false);
        }
        put(format!("{a}.bo"), vec![d], false);

        let f = format!("blocks.{i}.ffn");
        put(format!("{f}.wu"), vec![d, ffn_inner], true);
        put(format!("{f}.bu"), vec![ffn_inner], false);
        if config.ffn_kind == FfnKind::Gated {
            put(format!("{f}.wg"), vec![d, ffn_inner], true);
            put(format!("{f}.bg"), vec![ffn_inner], false);
        }
        put(format!("{f}.wd"), vec![ffn_inner, d], true);
        put(format!("{f}.bd"), vec![d], false);

        for n in ["norm1", "norm2"] {
            put(format!("blocks.{i}.{n}.g"), vec![d], true);
            if layernorm {
                put(format!("blocks.{i}.{n}.b"), vec![d], true);
            }
        }
    }
    put("final_norm.g".into(), vec![d], true);
    if layernorm {
        put("final_norm.b".into(), vec![d], true);
    }
    if !config.tied_embeddings {
        put("lm_head".into(), vec![d, config.vocab_size], true);
    }
    out
}

/// Checks a tensor map against the naming convention and config.
pub fn validate_tensors(
    config: &ModelConfig,
    tensors: &BTreeMap<String, Tensor>,
    plan: Option<&PruningPlan>,
) -> Result<()> {
    if tensors.is_empty() {
        return Err(Error::Checkpoint("tensor map is empty".into()));
    }
    let expected = expected_tensors(config, plan);
    for (name, spec) in &expected {
        match tensors.get(name) {
            None if spec.required => {
                return Err(Error::Checkpoint(format!("missing required tensor `{name}`")))
            }
            None => {}
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    spec.shape
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(())
}

/// Config, weights and (for pruned models) the applied plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
    pub plan: Option<PruningPlan>,
}

impl Checkpoint {
    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_plan(path: &Path) -> Result<PruningPlan> {
    read_json(path)
}

pub fn save_plan(path: &Path, plan: &PruningPlan) -> Result<()> {
    write_json(path, plan)
}

pub fn load_model(dir: &Path) -> Result<Checkpoint> {
    let config: ModelConfig = read_json(&dir.join(CONFIG_FILE))?;
    config.validate()?;
    let plan_path = dir.join(PLAN_FILE);
    let plan = if plan_path.exists() {
        Some(load_plan(&plan_path)?)
    } else {
        None
    };
    let manifest: Vec<TensorManifestEntry> = read_json(&dir.join(MANIFEST_FILE))?;
    let bin_path = dir.join(TENSORS_FILE);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;

    let mut tensors = BTreeMap::new();
    let mut cursor = 0u64;
    for entry in &manifest {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has dtype `{}`; only f32 is supported",
                entry.name, entry.dtype
            )));
        }
        if entry.byte_offset % 4 != 0 {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` byte_offset {} is not 4-byte aligned",
                entry.name, entry.byte_offset
            )));
        }
        if entry.byte_offset < cursor {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` overlaps the previous region or is out of order",
                entry.name
            )));
        }
        let count: usize = entry.shape.iter().product();
        let start = entry.byte_offset as usize;
        let end = start + count * 4;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` region [{start}, {end}) is out of bounds for {} bytes in {TENSORS_FILE}",
                entry.name,
                bytes.len()
            )));
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", entry.name)))?;
        if tensors.insert(entry.name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", entry.name)));
        }
        cursor = end as u64;
    }
    validate_tensors(&config, &tensors, plan.as_ref())?;
    Ok(Checkpoint {
        config,
        tensors,
        plan,
    })
}

/// Writes a checkpoint directory (created if needed). Tensors are laid out
/// in name order so identical inputs produce identical bytes.
pub fn save_model(dir: &Path, checkpoint: &Checkpoint) -> Result<()> {
    checkpoint.config.validate()?;
    validate_tensors(
        &checkpoint.config,
        &checkpoint.tensors,
        checkpoint.plan.as_ref(),
    )?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut manifest = Vec::with_capacity(checkpoint.tensors.len());
    let bin_path = dir.join(TENSORS_FILE);
    let file = fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let mut offset = 0u64;
    for (name, t) in &checkpoint.tensors {
        manifest.push(TensorManifestEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            byte_offset: offset,
        });
        for v in t.data() {
            writer
                .write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(&bin_path, e))?;
        }
        offset += t.len() as u64 * 4;
    }
    writer.flush().map_err(|e| Error::io(&bin_path, e))?;

    write_json(&dir.join(CONFIG_FILE), &checkpoint.config)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    let plan_path = dir.join(PLAN_FILE);
    match &checkpoint.plan {
        Some(plan) => save_plan(&plan_path, plan)?,
        None if plan_path.exists() => {
            fs::remove_file(&plan_path).map_err(|e| Error::io(&plan_path, e))?
        }
        None => {}
    }
    Ok(())
}

/// A token stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCorpus {
    pub token_ids: Vec<u32>,
}

impl TokenCorpus {
    pub fn new(token_ids: Vec<u32>) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(Error::Corpus("corpus is empty".into()));
        }
        Ok(Self { token_ids })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        check_token_ids(&self.token_ids, vocab_size)
    }
}

pub(crate) fn check_token_ids(ids: &[u32], vocab_size: usize) -> Result<()> {
    match ids.iter().position(|&id| id as usize >= vocab_size) {
        Some(position) => Err(Error::TokenOutOfRange {
            id: ids[position],
            position,
            vocab_size,
        }),
        None => Ok(()),
    }
}

pub fn save_corpus(path: &Path, corpus: &TokenCorpus) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Corpus("refusing to write an empty corpus".into()));
    }
    let mut bytes = Vec::with_capacity(8 + corpus.len() * 4);
    bytes.extend_from_slice(CORPUS_MAGIC);
    for id in &corpus.token_ids {
        bytes.extend_from_slice(&id.to_le_bytes());
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<TokenCorpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let where_ = || PathBuf::from(path).display().to_string();
    if bytes.len() < 8 || &bytes[..8] != CORPUS_MAGIC {
        return Err(Error::Corpus(format!("{}: bad magic header", where_())));
    }
    let body = &bytes[8..];
    if body.len() % 4 != 0 {
        return Err(Error::Corpus(format!(
            "{}: truncated file ({} trailing bytes)",
            where_(),
            body.len() % 4
        )));
    }
    let ids = body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    TokenCorpus::new(ids).map_err(|_| Error::Corpus(format!("{}: corpus is empty", where_())))
}
