//! Small randomly initialized checkpoints for tests, fixtures and benches.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{
    expected_tensors, Activation, Checkpoint, FfnKind, Flavor, ModelConfig, NormKind, Positional,
};
use crate::linalg::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub flavor: Flavor,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
    /// Emit the optional linear-layer biases.
    pub biases: bool,
}

impl ToySpec {
    /// 2 blocks, d_model 64, 4 heads, d_ff 256.
    pub fn gpt2() -> Self {
        Self {
            flavor: Flavor::Gpt2,
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 128,
            max_seq_len: 64,
            activation: Activation::Gelu,
            biases: true,
        }
    }

    pub fn llama() -> Self {
        Self {
            flavor: Flavor::Llama,
            activation: Activation::Silu,
            d_ff: 172,
            biases: false,
            ..Self::gpt2()
        }
    }

    pub fn config(&self) -> ModelConfig {
        let gpt2 = self.flavor == Flavor::Gpt2;
        ModelConfig {
            flavor: self.flavor,
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_head: self.d_model / self.n_heads,
            d_ff: self.d_ff,
            vocab_size: self.vocab_size,
            max_seq_len: self.max_seq_len,
            ffn_kind: if gpt2 { FfnKind::Standard } else { FfnKind::Gated },
            activation: self.activation,
            norm_kind: if gpt2 { NormKind::Layernorm } else { NormKind::Rmsnorm },
            positional: if gpt2 { Positional::Learned } else { Positional::Rope },
            tied_embeddings: gpt2,
            norm_eps: 1e-5,
            bos_token_id: Some(0),
        }
    }
}

/// Deterministic random checkpoint for `spec`.
pub fn toy_checkpoint(spec: &ToySpec, seed: u64) -> Checkpoint {
    let config = spec.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, ts) in expected_tensors(&config, None) {
        let is_bias = !ts.required;
        if is_bias && !spec.biases {
            continue;
        }
        let leaf = name.rsplit('.').next().unwrap_or(&name);
        let t = match leaf {
            "g" => Tensor::from_fn(&ts.shape, |_| 1.0 + rng.gen_range(-0.2..0.2)),
            "b" => Tensor::from_fn(&ts.shape, |_| rng.gen_range(-0.2..0.2)),
            _ if is_bias => Tensor::from_fn(&ts.shape, |_| rng.gen_range(-0.05..0.05)),
            _ if name == "tok_emb" || name == "pos_emb" => {
                Tensor::from_fn(&ts.shape, |_| rng.gen_range(-1.0..1.0))
            }
            _ => {
                // uniform with variance 1/fan_in
                let bound = (3.0 / ts.shape[0] as f32).sqrt();
                Tensor::from_fn(&ts.shape, |_| rng.gen_range(-bound..bound))
            }
        };
        tensors.insert(name, t);
    }
    Checkpoint {
        config,
        tensors,
        plan: None,
    }
}

/// Deterministic random token stream.
pub fn toy_tokens(vocab_size: usize, len: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(0..vocab_size as u32)).collect()
}
