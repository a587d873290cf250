//! Transformer forward pass over a [`ModelGraph`], with activation taps.
//!
//! All activations are matrices whose rows are flattened `(sequence,
//! position)` pairs, so a batch of `N` sequences of length `s` has `N·s`
//! rows. Weights use the "row · W" orientation: a layer maps `x [rows × in]`
//! to `x · W [rows × out]`.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    check_token_ids, Activation, Checkpoint, ModelConfig, NormKind, Positional,
};
use crate::error::{Error, Result};
use crate::linalg::{self, dot_f64, Tensor};
use crate::plan::{ModuleId, ModuleKind, ModulePlan, PruningPlan};

/// `n_seqs` token sequences of equal length, stored back to back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub n_seqs: usize,
    pub seq_len: usize,
    pub tokens: Vec<u32>,
}

impl TokenBatch {
    pub fn new(n_seqs: usize, seq_len: usize, tokens: Vec<u32>) -> Result<Self> {
        if n_seqs == 0 || seq_len == 0 || tokens.len() != n_seqs * seq_len {
            return Err(Error::InvalidArgument(format!(
                "token batch of {} ids cannot be {n_seqs} sequences of length {seq_len}",
                tokens.len()
            )));
        }
        Ok(Self {
            n_seqs,
            seq_len,
            tokens,
        })
    }

    pub fn single(tokens: Vec<u32>) -> Result<Self> {
        Self::new(1, tokens.len(), tokens)
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    /// Batch made of sequences `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> TokenBatch {
        TokenBatch {
            n_seqs: range.len(),
            seq_len: self.seq_len,
            tokens: self.tokens[range.start * self.seq_len..range.end * self.seq_len].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub kind: NormKind,
    pub gain: Tensor,
    pub bias: Option<Tensor>,
    pub eps: f32,
}

impl Norm {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self.kind {
            NormKind::Layernorm => linalg::layer_norm(x, &self.gain, self.bias.as_ref(), self.eps),
            NormKind::Rmsnorm => linalg::rms_norm(x, &self.gain, self.eps),
        }
    }
}

/// Rotary position tables, `[max_seq_len × d_head/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rope {
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl Rope {
    pub fn new(d_head: usize, max_seq_len: usize, base: f64) -> Self {
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(max_seq_len * half);
        let mut sin = Vec::with_capacity(max_seq_len * half);
        for pos in 0..max_seq_len {
            for j in 0..half {
                let freq = base.powf(-2.0 * j as f64 / d_head as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates every head of `x [rows × n_heads·d_head]` in place; row `r`
    /// sits at position `r % seq_len`.
    fn apply(&self, x: &mut Tensor, seq_len: usize) {
        let width = x.cols();
        let d_head = 2 * self.half;
        for (r, row) in x.data_mut().chunks_mut(width).enumerate() {
            let pos = r % seq_len;
            let cos = &self.cos[pos * self.half..(pos + 1) * self.half];
            let sin = &self.sin[pos * self.half..(pos + 1) * self.half];
            for head in row.chunks_mut(d_head) {
                for j in 0..self.half {
                    let (a, b) = (head[j], head[j + self.half]);
                    head[j] = a * cos[j] - b * sin[j];
                    head[j + self.half] = b * cos[j] + a * sin[j];
                }
            }
        }
    }
}

/// Level-1 outputs of an attention module, before rotary embedding.
#[derive(Debug, Clone)]
pub struct QkvOutputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bq: Option<Tensor>,
    pub bk: Option<Tensor>,
    pub bv: Option<Tensor>,
    pub bo: Option<Tensor>,
    /// Original ids of the heads still present, ascending.
    pub heads: Vec<usize>,
    pub d_head: usize,
}

fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut y = linalg::matmul(x, w)?;
    if let Some(b) = b {
        linalg::add_row_vector(&mut y, b)?;
    }
    Ok(y)
}

impl Attention {
    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Width of the level-1 output / level-2 input.
    pub fn inner(&self) -> usize {
        self.heads.len() * self.d_head
    }

    pub fn project(&self, x: &Tensor) -> Result<QkvOutputs> {
        Ok(QkvOutputs {
            q: linear(x, &self.wq, self.bq.as_ref())?,
            k: linear(x, &self.wk, self.bk.as_ref())?,
            v: linear(x, &self.wv, self.bv.as_ref())?,
        })
    }

    /// Causal scaled dot-product attention over each sequence of `seq_len`
    /// rows. Returns the concatenated head contexts `[rows × inner]` and,
    /// when `want_probs`, one `[h, s, s]` probability tensor per sequence
    /// (entries above the diagonal are zero).
    pub fn attend(
        &self,
        qkv: &QkvOutputs,
        seq_len: usize,
        rope: Option<&Rope>,
        want_probs: bool,
    ) -> Result<(Tensor, Option<Vec<Tensor>>)> {
        let rows = qkv.q.rows();
        let inner = self.inner();
        for t in [&qkv.q, &qkv.k, &qkv.v] {
            if t.dims2()? != (rows, inner) {
                return Err(Error::shape(
                    "attend",
                    format!("expected [{rows}x{inner}], got {:?}", t.shape()),
                ));
            }
        }
        if !rows.is_multiple_of(seq_len) {
            return Err(Error::shape("attend", format!("{rows} rows, seq_len {seq_len}")));
        }
        let (mut q, mut k) = (qkv.q.clone(), qkv.k.clone());
        if let Some(rope) = rope {
            rope.apply(&mut q, seq_len);
            rope.apply(&mut k, seq_len);
        }
        let n_seqs = rows / seq_len;
        let h = self.n_heads();
        let dh = self.d_head;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut context = Tensor::zeros(&[rows, inner]);
        let mut all_probs = want_probs.then(|| Vec::with_capacity(n_seqs));
        for n in 0..n_seqs {
            let base = n * seq_len;
            let per_head: Vec<(Vec<f32>, Vec<f32>)> = (0..h)
                .into_par_iter()
                .map(|head| {
                    let cols = head * dh..(head + 1) * dh;
                    let mut probs = vec![0.0f32; seq_len * seq_len];
                    let mut ctx = vec![0.0f32; seq_len * dh];
                    let mut scores = vec![0.0f32; seq_len];
                    for t in 0..seq_len {
                        let qrow = &q.row(base + t)[cols.clone()];
                        for (j, s) in scores[..=t].iter_mut().enumerate() {
                            *s = (dot_f64(qrow, &k.row(base + j)[cols.clone()]) * scale) as f32;
                        }
                        linalg::softmax_in_place(&mut scores[..=t]);
                        probs[t * seq_len..t * seq_len + t + 1].copy_from_slice(&scores[..=t]);
                        let mut acc = vec![0.0f64; dh];
                        for (j, &p) in scores[..=t].iter().enumerate() {
                            let vrow = &qkv.v.row(base + j)[cols.clone()];
                            for (a, &vv) in acc.iter_mut().zip(vrow) {
                                *a += p as f64 * vv as f64;
                            }
                        }
                        for (c, a) in ctx[t * dh..(t + 1) * dh].iter_mut().zip(acc) {
                            *c = a as f32;
                        }
                    }
                    (probs, ctx)
                })
                .collect();
            let mut seq_probs = all_probs
                .as_ref()
                .map(|_| Vec::with_capacity(h * seq_len * seq_len));
            for (head, (probs, ctx)) in per_head.into_iter().enumerate() {
                for t in 0..seq_len {
                    context.row_mut(base + t)[head * dh..(head + 1) * dh]
                        .copy_from_slice(&ctx[t * dh..(t + 1) * dh]);
                }
                if let Some(sp) = seq_probs.as_mut() {
                    sp.extend_from_slice(&probs);
                }
            }
            if let (Some(all), Some(sp)) = (all_probs.as_mut(), seq_probs) {
                all.push(Tensor::new(vec![h, seq_len, seq_len], sp)?);
            }
        }
        Ok((context, all_probs))
    }

    pub fn output(&self, context: &Tensor) -> Result<Tensor> {
        linear(context, &self.wo, self.bo.as_ref())
    }

    pub fn forward(&self, x: &Tensor, seq_len: usize, rope: Option<&Rope>) -> Result<Tensor> {
        let qkv = self.project(x)?;
        let (context, _) = self.attend(&qkv, seq_len, rope, false)?;
        self.output(&context)
    }

    /// Keeps the heads listed by `plan`; the module must still be unpruned.
    pub fn prune(&self, id: ModuleId, plan: &ModulePlan, original_heads: usize) -> Result<Attention> {
        if self.heads.len() != original_heads {
            return Err(Error::Plan(format!("{id} has already been pruned")));
        }
        let kept_heads = plan
            .validate(id, original_heads * self.d_head, self.d_head)?
            .expect("attention plans carry heads");
        let kept = &plan.kept;
        let cols = |t: &Tensor| t.select_columns(kept);
        let vec_cols = |b: &Option<Tensor>| -> Result<Option<Tensor>> {
            b.as_ref()
                .map(|b| {
                    let data = kept.iter().map(|&i| b.data()[i]).collect();
                    Tensor::new(vec![kept.len()], data)
                })
                .transpose()
        };
        Ok(Attention {
            wq: cols(&self.wq)?,
            wk: cols(&self.wk)?,
            wv: cols(&self.wv)?,
            wo: self.wo.select_rows(kept)?,
            bq: vec_cols(&self.bq)?,
            bk: vec_cols(&self.bk)?,
            bv: vec_cols(&self.bv)?,
            bo: self.bo.clone(),
            heads: kept_heads,
            d_head: self.d_head,
        })
    }
}

/// Level-1 outputs of a feed-forward module (pre-activation).
#[derive(Debug, Clone)]
pub struct FfnLevel1 {
    pub up: Tensor,
    pub gate: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub wu: Tensor,
    pub wg: Option<Tensor>,
    pub wd: Tensor,
    pub bu: Option<Tensor>,
    pub bg: Option<Tensor>,
    pub bd: Option<Tensor>,
    pub activation: Activation,
}

pub fn activate(x: &Tensor, activation: Activation) -> Tensor {
    match activation {
        Activation::Relu => linalg::relu(x),
        Activation::Gelu => linalg::gelu(x),
        Activation::Silu => linalg::silu(x),
    }
}

impl FeedForward {
    pub fn inner(&self) -> usize {
        self.wu.cols()
    }

    pub fn is_gated(&self) -> bool {
        self.wg.is_some()
    }

    pub fn level1(&self, x: &Tensor) -> Result<FfnLevel1> {
        Ok(FfnLevel1 {
            up: linear(x, &self.wu, self.bu.as_ref())?,
            gate: self
                .wg
                .as_ref()
                .map(|wg| linear(x, wg, self.bg.as_ref()))
                .transpose()?,
        })
    }

    /// Level-2 input: `σ(up)` or `up ⊙ σ(gate)`.
    pub fn hidden(&self, l1: &FfnLevel1) -> Result<Tensor> {
        match &l1.gate {
            None => Ok(activate(&l1.up, self.activation)),
            Some(gate) => linalg::mul(&l1.up, &activate(gate, self.activation)),
        }
    }

    pub fn output(&self, hidden: &Tensor) -> Result<Tensor> {
        linear(hidden, &self.wd, self.bd.as_ref())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.output(&self.hidden(&self.level1(x)?)?)
    }

    pub fn prune(&self, id: ModuleId, plan: &ModulePlan, original_inner: usize) -> Result<FeedForward> {
        if self.inner() != original_inner {
            return Err(Error::Plan(format!("{id} has already been pruned")));
        }
        plan.validate(id, original_inner, 1)?;
        let kept = &plan.kept;
        let vec_sel = |b: &Option<Tensor>| -> Result<Option<Tensor>> {
            b.as_ref()
                .map(|b| Tensor::new(vec![kept.len()], kept.iter().map(|&i| b.data()[i]).collect()))
                .transpose()
        };
        Ok(FeedForward {
            wu: self.wu.select_columns(kept)?,
            wg: self.wg.as_ref().map(|w| w.select_columns(kept)).transpose()?,
            wd: self.wd.select_rows(kept)?,
            bu: vec_sel(&self.bu)?,
            bg: vec_sel(&self.bg)?,
            bd: self.bd.clone(),
            activation: self.activation,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub ffn: FeedForward,
}

/// What [`ModelGraph::forward`] should record.
#[derive(Debug, Clone, Default)]
pub struct TapRequest {
    /// Blocks to tap; taps for other blocks are never materialized.
    pub blocks: BTreeSet<usize>,
    pub residual: bool,
    pub module_inputs: bool,
    pub attention_probs: bool,
    /// Per-head value inputs `Attn_i · X`.
    pub head_inputs: bool,
    pub level1_outputs: bool,
    pub level2: bool,
}

impl TapRequest {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all(blocks: impl IntoIterator<Item = usize>) -> Self {
        Self {
            blocks: blocks.into_iter().collect(),
            residual: true,
            module_inputs: true,
            attention_probs: true,
            head_inputs: true,
            level1_outputs: true,
            level2: true,
        }
    }
}

/// Activations recorded for one block. Every matrix has `N·s` rows.
#[derive(Debug, Clone, Default)]
pub struct BlockTaps {
    pub residual_in: Option<Tensor>,
    pub attn_input: Option<Tensor>,
    /// One `[h, s, s]` tensor per sequence.
    pub attn_probs: Option<Vec<Tensor>>,
    /// One `[N·s × d_model]` matrix per head.
    pub head_inputs: Option<Vec<Tensor>>,
    pub y_q: Option<Tensor>,
    pub y_k: Option<Tensor>,
    pub y_v: Option<Tensor>,
    pub attn_x2: Option<Tensor>,
    pub attn_out: Option<Tensor>,
    pub ffn_input: Option<Tensor>,
    pub y_u: Option<Tensor>,
    pub y_g: Option<Tensor>,
    pub ffn_x2: Option<Tensor>,
    pub ffn_out: Option<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardTaps {
    pub blocks: BTreeMap<usize, BlockTaps>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampler {
    Greedy,
    TopK { k: usize, temperature: f32, seed: u64 },
}

impl Sampler {
    /// Default diverse sampler for self-generated calibration text.
    pub fn default_top_k(seed: u64) -> Self {
        Sampler::TopK {
            k: 40,
            temperature: 1.0,
            seed,
        }
    }
}

/// A transformer as embeddings, a stack of blocks (each one attention and
/// one feed-forward depth-2 module), a final norm and an output head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Option<Tensor>,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    /// `[d_model × vocab]`; absent when embeddings are tied.
    pub lm_head: Option<Tensor>,
    pub rope: Option<Rope>,
    pub applied_plan: Option<PruningPlan>,
}

pub const ROPE_BASE: f64 = 10000.0;

impl ModelGraph {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = &ckpt.config;
        cfg.validate()?;
        crate::checkpoint::validate_tensors(cfg, &ckpt.tensors, ckpt.plan.as_ref())?;
        let get = |name: &str| -> Tensor { ckpt.tensors[name].clone() };
        let opt = |name: &str| -> Option<Tensor> { ckpt.tensors.get(name).cloned() };
        let norm = |prefix: &str| Norm {
            kind: cfg.norm_kind,
            gain: get(&format!("{prefix}.g")),
            bias: opt(&format!("{prefix}.b")),
            eps: cfg.norm_eps,
        };
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let a = format!("blocks.{i}.attn");
            let f = format!("blocks.{i}.ffn");
            let heads = match ckpt.plan.as_ref().and_then(|p| p.module(&ModuleId::attention(i))) {
                Some(mp) => mp
                    .validate(ModuleId::attention(i), cfg.d_model, cfg.d_head)?
                    .expect("attention plan"),
                None => (0..cfg.n_heads).collect(),
            };
            blocks.push(Block {
                norm1: norm(&format!("blocks.{i}.norm1")),
                attn: Attention {
                    wq: get(&format!("{a}.wq")),
                    wk: get(&format!("{a}.wk")),
                    wv: get(&format!("{a}.wv")),
                    wo: get(&format!("{a}.wo")),
                    bq: opt(&format!("{a}.bq")),
                    bk: opt(&format!("{a}.bk")),
                    bv: opt(&format!("{a}.bv")),
                    bo: opt(&format!("{a}.bo")),
                    heads,
                    d_head: cfg.d_head,
                },
                norm2: norm(&format!("blocks.{i}.norm2")),
                ffn: FeedForward {
                    wu: get(&format!("{f}.wu")),
                    wg: opt(&format!("{f}.wg")),
                    wd: get(&format!("{f}.wd")),
                    bu: opt(&format!("{f}.bu")),
                    bg: opt(&format!("{f}.bg")),
                    bd: opt(&format!("{f}.bd")),
                    activation: cfg.activation,
                },
            });
        }
        if let Some(plan) = &ckpt.plan {
            for (id, mp) in &plan.modules {
                if id.block >= cfg.n_layers {
                    return Err(Error::Plan(format!("{id} is beyond the model's {} blocks", cfg.n_layers)));
                }
                if id.kind == ModuleKind::Ffn {
                    mp.validate(*id, cfg.d_ff, 1)?;
                }
            }
        }
        Ok(Self {
            config: cfg.clone(),
            tok_emb: get("tok_emb"),
            pos_emb: opt("pos_emb"),
            blocks,
            final_norm: norm("final_norm"),
            lm_head: opt("lm_head"),
            rope: (cfg.positional == Positional::Rope)
                .then(|| Rope::new(cfg.d_head, cfg.max_seq_len, ROPE_BASE)),
            applied_plan: ckpt.plan.clone(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut t = BTreeMap::new();
        let mut put = |name: String, v: &Tensor| {
            t.insert(name, v.clone());
        };
        put("tok_emb".into(), &self.tok_emb);
        if let Some(p) = &self.pos_emb {
            put("pos_emb".into(), p);
        }
        let norm = |prefix: String, n: &Norm, put: &mut dyn FnMut(String, &Tensor)| {
            put(format!("{prefix}.g"), &n.gain);
            if let Some(b) = &n.bias {
                put(format!("{prefix}.b"), b);
            }
        };
        for (i, b) in self.blocks.iter().enumerate() {
            let a = format!("blocks.{i}.attn");
            let f = format!("blocks.{i}.ffn");
            put(format!("{a}.wq"), &b.attn.wq);
            put(format!("{a}.wk"), &b.attn.wk);
            put(format!("{a}.wv"), &b.attn.wv);
            put(format!("{a}.wo"), &b.attn.wo);
            for (n, v) in [("bq", &b.attn.bq), ("bk", &b.attn.bk), ("bv", &b.attn.bv), ("bo", &b.attn.bo)] {
                if let Some(v) = v {
                    put(format!("{a}.{n}"), v);
                }
            }
            put(format!("{f}.wu"), &b.ffn.wu);
            put(format!("{f}.wd"), &b.ffn.wd);
            for (n, v) in [("wg", &b.ffn.wg), ("bu", &b.ffn.bu), ("bg", &b.ffn.bg), ("bd", &b.ffn.bd)] {
                if let Some(v) = v {
                    put(format!("{f}.{n}"), v);
                }
            }
            norm(format!("blocks.{i}.norm1"), &b.norm1, &mut put);
            norm(format!("blocks.{i}.norm2"), &b.norm2, &mut put);
        }
        norm("final_norm".into(), &self.final_norm, &mut put);
        if let Some(h) = &self.lm_head {
            put("lm_head".into(), h);
        }
        Checkpoint {
            config: self.config.clone(),
            tensors: t,
            plan: self.applied_plan.clone(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.to_checkpoint().parameter_count()
    }

    /// Weight-matrix parameters of one depth-2 module (biases excluded).
    pub fn module_weight_params(&self, id: ModuleId) -> usize {
        let b = &self.blocks[id.block];
        match id.kind {
            ModuleKind::Attention => [&b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo]
                .iter()
                .map(|t| t.len())
                .sum(),
            ModuleKind::Ffn => {
                b.ffn.wu.len() + b.ffn.wd.len() + b.ffn.wg.as_ref().map_or(0, Tensor::len)
            }
        }
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq_len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: batch.seq_len,
                max: self.config.max_seq_len,
            });
        }
        check_token_ids(&batch.tokens, self.config.vocab_size)
    }

    /// Token (plus learned positional) embeddings, `[N·s × d_model]`.
    pub fn embed(&self, batch: &TokenBatch) -> Result<Tensor> {
        self.check_batch(batch)?;
        let d = self.config.d_model;
        let mut h = Tensor::zeros(&[batch.rows(), d]);
        for (r, &id) in batch.tokens.iter().enumerate() {
            let row = h.row_mut(r);
            row.copy_from_slice(self.tok_emb.row(id as usize));
            if let Some(pos) = &self.pos_emb {
                let p = pos.row(r % batch.seq_len);
                row.iter_mut().zip(p).for_each(|(v, pv)| *v += pv);
            }
        }
        Ok(h)
    }

    /// Runs block `b` on the residual stream `h`.
    pub fn block_forward(&self, b: usize, h: &Tensor, seq_len: usize) -> Result<Tensor> {
        let block = &self.blocks[b];
        let mut h = h.clone();
        let attn = block
            .attn
            .forward(&block.norm1.apply(&h)?, seq_len, self.rope.as_ref())?;
        linalg::add_assign(&mut h, &attn)?;
        let ffn = block.ffn.forward(&block.norm2.apply(&h)?)?;
        linalg::add_assign(&mut h, &ffn)?;
        Ok(h)
    }

    /// Final norm and output projection, `[rows × vocab]`.
    pub fn logits(&self, h: &Tensor) -> Result<Tensor> {
        let normed = self.final_norm.apply(h)?;
        match &self.lm_head {
            Some(head) => linalg::matmul(&normed, head),
            None => linalg::matmul_nt(&normed, &self.tok_emb),
        }
    }

    /// Residual stream after `upto` blocks.
    pub fn hidden_states(&self, batch: &TokenBatch, upto: usize) -> Result<Tensor> {
        let mut h = self.embed(batch)?;
        for b in 0..upto {
            h = self.block_forward(b, &h, batch.seq_len)?;
        }
        Ok(h)
    }

    /// Full forward pass. Logits are `[N·s × vocab]`.
    pub fn forward(&self, batch: &TokenBatch, taps: &TapRequest) -> Result<(Tensor, ForwardTaps)> {
        let mut h = self.embed(batch)?;
        let s = batch.seq_len;
        let mut out = ForwardTaps::default();
        for (b, block) in self.blocks.iter().enumerate() {
            if !taps.blocks.contains(&b) {
                h = self.block_forward(b, &h, s)?;
                continue;
            }
            let mut bt = BlockTaps::default();
            if taps.residual {
                bt.residual_in = Some(h.clone());
            }
            let x = block.norm1.apply(&h)?;
            let qkv = block.attn.project(&x)?;
            let want_probs = taps.attention_probs || taps.head_inputs;
            let (context, probs) = block.attn.attend(&qkv, s, self.rope.as_ref(), want_probs)?;
            let attn_out = block.attn.output(&context)?;
            if taps.head_inputs {
                let probs = probs.as_ref().expect("requested");
                bt.head_inputs = Some(head_inputs(&x, probs, s)?);
            }
            if taps.attention_probs {
                bt.attn_probs = probs;
            }
            if taps.module_inputs {
                bt.attn_input = Some(x);
            }
            if taps.level1_outputs {
                bt.y_q = Some(qkv.q);
                bt.y_k = Some(qkv.k);
                bt.y_v = Some(qkv.v);
            }
            linalg::add_assign(&mut h, &attn_out)?;
            if taps.level2 {
                bt.attn_x2 = Some(context);
                bt.attn_out = Some(attn_out);
            }

            let x = block.norm2.apply(&h)?;
            let l1 = block.ffn.level1(&x)?;
            let hidden = block.ffn.hidden(&l1)?;
            let ffn_out = block.ffn.output(&hidden)?;
            linalg::add_assign(&mut h, &ffn_out)?;
            if taps.module_inputs {
                bt.ffn_input = Some(x);
            }
            if taps.level1_outputs {
                bt.y_u = Some(l1.up);
                bt.y_g = l1.gate;
            }
            if taps.level2 {
                bt.ffn_x2 = Some(hidden);
                bt.ffn_out = Some(ffn_out);
            }
            out.blocks.insert(b, bt);
        }
        Ok((self.logits(&h)?, out))
    }

    /// Logits for the last position of a single sequence.
    pub fn next_token_logits(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        let batch = TokenBatch::single(tokens.to_vec())?;
        let h = self.hidden_states(&batch, self.blocks.len())?;
        let last = h.select_rows(&[h.rows() - 1])?;
        Ok(self.logits(&last)?.into_data())
    }

    /// Autoregressive decoding; the context is truncated to the last
    /// `max_seq_len` tokens when it grows longer.
    pub fn generate(&self, prompt: &[u32], n_new: usize, sampler: Sampler) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("generation prompt is empty".into()));
        }
        check_token_ids(prompt, self.config.vocab_size)?;
        let mut rng = match sampler {
            Sampler::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Sampler::Greedy => None,
        };
        let mut tokens = prompt.to_vec();
        let window = self.config.max_seq_len;
        for _ in 0..n_new {
            let ctx = &tokens[tokens.len().saturating_sub(window)..];
            let logits = self.next_token_logits(ctx)?;
            let next = match (sampler, rng.as_mut()) {
                (Sampler::TopK { k, temperature, .. }, Some(rng)) => {
                    sample_top_k(&logits, k, temperature, rng)?
                }
                _ => argmax(&logits),
            };
            tokens.push(next);
        }
        Ok(tokens)
    }

    /// Applies a plan to an unpruned graph, producing a new graph.
    pub fn apply_plan(&self, plan: &PruningPlan) -> Result<ModelGraph> {
        if self.applied_plan.is_some() {
            return Err(Error::Plan("a pruning plan has already been applied to this model".into()));
        }
        let mut g = self.clone();
        for (id, mp) in &plan.modules {
            g.prune_module(*id, mp)?;
        }
        g.applied_plan = Some(plan.clone());
        Ok(g)
    }

    /// Slices one module in place. The module must not have been pruned yet.
    pub(crate) fn prune_module(&mut self, id: ModuleId, mp: &ModulePlan) -> Result<()> {
        if id.block >= self.blocks.len() {
            return Err(Error::Plan(format!(
                "{id} is beyond the model's {} blocks",
                self.blocks.len()
            )));
        }
        let (h, d_ff) = (self.config.n_heads, self.config.d_ff);
        let block = &mut self.blocks[id.block];
        match id.kind {
            ModuleKind::Attention => block.attn = block.attn.prune(id, mp, h)?,
            ModuleKind::Ffn => block.ffn = block.ffn.prune(id, mp, d_ff)?,
        }
        Ok(())
    }
}

/// `Attn_i · X` for every head `i`, `[N·s × d_model]` each.
pub fn head_inputs(x: &Tensor, probs: &[Tensor], seq_len: usize) -> Result<Vec<Tensor>> {
    let d = x.cols();
    let h = probs.first().map_or(0, |p| p.shape()[0]);
    let mut out = vec![Tensor::zeros(&[x.rows(), d]); h];
    for (n, p) in probs.iter().enumerate() {
        let base = n * seq_len;
        for (head, o) in out.iter_mut().enumerate() {
            for t in 0..seq_len {
                let prow = &p.data()[(head * seq_len + t) * seq_len..][..=t];
                let mut acc = vec![0.0f64; d];
                for (j, &pj) in prow.iter().enumerate() {
                    for (a, &xv) in acc.iter_mut().zip(x.row(base + j)) {
                        *a += pj as f64 * xv as f64;
                    }
                }
                for (v, a) in o.row_mut(base + t).iter_mut().zip(acc) {
                    *v = a as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}

fn sample_top_k(logits: &[f32], k: usize, temperature: f32, rng: &mut ChaCha8Rng) -> Result<u32> {
    if k == 0 || !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "top-k sampler needs k >= 1 and temperature > 0 (got k={k}, temperature={temperature})"
        )));
    }
    let values: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    let order = linalg::argsort_descending(&values);
    let top = &order[..k.min(order.len())];
    let max = values[top[0]];
    let weights: Vec<f64> = top
        .iter()
        .map(|&i| ((values[i] - max) / temperature as f64).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&i, w) in top.iter().zip(&weights) {
        if u < *w {
            return Ok(i as u32);
        }
        u -= w;
    }
    Ok(*top.last().unwrap() as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{toy_checkpoint, ToySpec};

    #[test]
    fn rope_rotation_preserves_norm_and_is_identity_at_zero() {
        let rope = Rope::new(4, 8, ROPE_BASE);
        let mut x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 3.0, 4.0]]);
        rope.apply(&mut x, 2);
        assert_eq!(x.row(0), &[1.0, 2.0, 3.0, 4.0]);
        let n0: f32 = x.row(0).iter().map(|v| v * v).sum();
        let n1: f32 = x.row(1).iter().map(|v| v * v).sum();
        assert!((n0 - n1).abs() < 1e-4);
        assert_ne!(x.row(1), x.row(0));
    }

    #[test]
    fn attention_probs_rows_sum_to_one_and_are_causal() {
        let g = ModelGraph::from_checkpoint(&toy_checkpoint(&ToySpec::gpt2(), 1)).unwrap();
        let batch = TokenBatch::new(2, 8, (0..16).map(|i| i % 7).collect()).unwrap();
        let (_, taps) = g.forward(&batch, &TapRequest::all([0])).unwrap();
        for p in taps.blocks[&0].attn_probs.as_ref().unwrap() {
            let [h, s, _] = p.shape() else { panic!() };
            for head in 0..*h {
                for t in 0..*s {
                    let row = &p.data()[(head * s + t) * s..][..*s];
                    let sum: f32 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-5);
                    assert!(row[t + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn sequence_too_long_and_bad_token() {
        let g = ModelGraph::from_checkpoint(&toy_checkpoint(&ToySpec::gpt2(), 1)).unwrap();
        let max = g.config.max_seq_len;
        let long = TokenBatch::single(vec![0; max + 1]).unwrap();
        assert!(matches!(g.forward(&long, &TapRequest::none()), Err(Error::SequenceTooLong { .. })));
        let bad = TokenBatch::single(vec![g.config.vocab_size as u32]).unwrap();
        assert!(matches!(g.forward(&bad, &TapRequest::none()), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn top_k_one_is_greedy() {
        let g = ModelGraph::from_checkpoint(&toy_checkpoint(&ToySpec::gpt2(), 3)).unwrap();
        let greedy = g.generate(&[1, 2], 5, Sampler::Greedy).unwrap();
        let k1 = g
            .generate(&[1, 2], 5, Sampler::TopK { k: 1, temperature: 1.0, seed: 9 })
            .unwrap();
        assert_eq!(greedy, k1);
        assert_eq!(greedy.len(), 7);
        assert!(g.generate(&[], 1, Sampler::Greedy).is_err());
    }
}
