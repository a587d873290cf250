//! Importance scores for inner channels and heads.
//!
//! The second-moment score of inner channel `i` in a depth-2 module
//! `f(X) = σ(X·A)·B` is `‖B_i‖² · (A_iᵀ Σ_X A_i)`: the expected squared
//! contribution of that channel to the module output. `A_i` is column `i` of
//! the level-1 weight and `B_i` row `i` of the level-2 weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Activation;
use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::model::{Attention, FeedForward};
use crate::plan::{Granularity, ModuleId, ModuleKind};
use crate::stats::{CovarianceEstimate, DivergenceMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub module: ModuleId,
    pub granularity: Granularity,
    pub scores: Vec<f64>,
}

impl ImportanceScores {
    fn new(module: ModuleId, granularity: Granularity, scores: Vec<f64>) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{module}: importance score {bad} is not finite and nonnegative"
            )));
        }
        Ok(Self {
            module,
            granularity,
            scores,
        })
    }
}

/// Nonlinearity between the two levels, as far as the metric cares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricActivation {
    Linear,
    Relu,
    Gelu,
    Silu,
}

impl From<Activation> for MetricActivation {
    fn from(a: Activation) -> Self {
        match a {
            Activation::Relu => MetricActivation::Relu,
            Activation::Gelu => MetricActivation::Gelu,
            Activation::Silu => MetricActivation::Silu,
        }
    }
}

impl MetricActivation {
    /// ReLU halves the second moment of a zero-mean Gaussian
    /// pre-activation; GELU and SiLU are treated the same way.
    fn coefficient(self, opts: &MetricOptions) -> f64 {
        match self {
            MetricActivation::Linear => 1.0,
            _ if opts.half_coefficient => 0.5,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// Apply the ½ factor for ReLU-like activations.
    pub half_coefficient: bool,
    /// Gated FFN: use `‖D_i‖²` once instead of the literal product of the
    /// two sub-metrics (which squares it).
    pub gated_single_norm: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            half_coefficient: true,
            gated_single_norm: false,
        }
    }
}

/// `wᵢᵀ Σ wᵢ` for every column `wᵢ` of `w [d × n]`.
pub fn quadratic_forms(w: &Tensor, sigma: &[f64]) -> Result<Vec<f64>> {
    let (d, n) = w.dims2()?;
    if sigma.len() != d * d {
        return Err(Error::shape(
            "quadratic_forms",
            format!("Σ has {} entries for input dim {d}", sigma.len()),
        ));
    }
    let wd = w.data();
    // (Σ·W)[a, i] accumulated row by row, then dotted with W[a, i].
    let partial: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map(|a| {
            let mut row = vec![0.0f64; n];
            for b in 0..d {
                let s = sigma[a * d + b];
                if s == 0.0 {
                    continue;
                }
                for (r, &wv) in row.iter_mut().zip(&wd[b * n..(b + 1) * n]) {
                    *r += s * wv as f64;
                }
            }
            row.iter()
                .zip(&wd[a * n..(a + 1) * n])
                .map(|(r, &wv)| r * wv as f64)
                .collect()
        })
        .collect();
    let mut out = vec![0.0f64; n];
    for row in partial {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    // Σ is PSD, so negative values are rounding noise.
    Ok(out.into_iter().map(|v| v.max(0.0)).collect())
}

/// `‖row i‖²` for every row of a matrix.
pub fn row_norms_sq(w: &Tensor) -> Vec<f64> {
    let c = w.cols();
    w.data()
        .chunks(c)
        .map(|r| r.iter().map(|&v| v as f64 * v as f64).sum())
        .collect()
}

/// Second-moment scores for every inner channel of a feed-forward module.
///
/// Standard: `c·‖D_i‖²(uᵢᵀΣuᵢ)` with `c = ½` for ReLU-like activations.
/// Gated: the product of the linear up-path score `‖D_i‖²(uᵢᵀΣuᵢ)` and the
/// activated gate-path score `c·‖D_i‖²(gᵢᵀΣgᵢ)`.
pub fn second_moment_ffn(
    module: ModuleId,
    wu: &Tensor,
    wg: Option<&Tensor>,
    wd: &Tensor,
    sigma: &CovarianceEstimate,
    activation: MetricActivation,
    opts: MetricOptions,
) -> Result<ImportanceScores> {
    let (d, inner) = wu.dims2()?;
    if sigma.dim() != d || wd.dims2()?.0 != inner {
        return Err(Error::shape(
            "second_moment_ffn",
            format!(
                "W_U {:?}, W_D {:?}, Σ dim {}",
                wu.shape(),
                wd.shape(),
                sigma.dim()
            ),
        ));
    }
    let sig = sigma.second_moment()?;
    let down = row_norms_sq(wd);
    let up = quadratic_forms(wu, &sig)?;
    let coef = activation.coefficient(&opts);
    let scores = match wg {
        None => down.iter().zip(&up).map(|(dn, u)| coef * dn * u).collect(),
        Some(wg) => {
            if wg.shape() != wu.shape() {
                return Err(Error::shape("second_moment_ffn", "W_G shape differs from W_U"));
            }
            let gate = quadratic_forms(wg, &sig)?;
            down.iter()
                .zip(up.iter().zip(&gate))
                .map(|(dn, (u, g))| {
                    let m_up = dn * u;
                    if opts.gated_single_norm {
                        m_up * coef * g
                    } else {
                        m_up * (coef * dn * g)
                    }
                })
                .collect()
        }
    };
    ImportanceScores::new(module, Granularity::InnerChannel, scores)
}

/// Convenience wrapper over [`second_moment_ffn`] for a model module.
pub fn second_moment_ffn_module(
    module: ModuleId,
    ffn: &FeedForward,
    sigma: &CovarianceEstimate,
    opts: MetricOptions,
) -> Result<ImportanceScores> {
    second_moment_ffn(
        module,
        &ffn.wu,
        ffn.wg.as_ref(),
        &ffn.wd,
        sigma,
        ffn.activation.into(),
        opts,
    )
}

fn sum_heads(channel_scores: &[f64], d_head: usize) -> Vec<f64> {
    channel_scores
        .chunks(d_head)
        .map(|c| c.iter().sum())
        .collect()
}

/// Per-head second-moment scores from one `Σ_{X̂_i}` per head, where
/// `X̂_i = Attn_i · X` is the value input of head `i`. Channel `c` of head
/// `i` scores `‖W_O row c‖² · (v_cᵀ Σ_{X̂_i} v_c)`; a head scores the sum
/// over its channels. No activation coefficient applies.
pub fn second_moment_attention(
    module: ModuleId,
    attn: &Attention,
    sigma_hat: &[CovarianceEstimate],
) -> Result<ImportanceScores> {
    let h = attn.n_heads();
    if sigma_hat.len() != h {
        return Err(Error::InvalidArgument(format!(
            "{module}: {} per-head covariances for {h} heads",
            sigma_hat.len()
        )));
    }
    let dh = attn.d_head;
    let out_norms = row_norms_sq(&attn.wo);
    let mut channel = Vec::with_capacity(attn.inner());
    for (head, sigma) in sigma_hat.iter().enumerate() {
        let cols: Vec<usize> = (head * dh..(head + 1) * dh).collect();
        let v = attn.wv.select_columns(&cols)?;
        let q = quadratic_forms(&v, &sigma.second_moment()?)?;
        channel.extend(q.iter().zip(&out_norms[head * dh..]).map(|(q, o)| q * o));
    }
    ImportanceScores::new(module, Granularity::Head, sum_heads(&channel, dh))
}

/// Running per-column `Σ x²`; with `x = X̂_i v_c` this is `n · v_cᵀΣ_{X̂_i}v_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEnergy {
    pub sum_sq: Vec<f64>,
    pub n_rows: usize,
}

impl ChannelEnergy {
    pub fn new(width: usize) -> Self {
        Self {
            sum_sq: vec![0.0; width],
            n_rows: 0,
        }
    }

    /// Adds rows of `x`, after subtracting `offset` from every row.
    pub fn accumulate(&mut self, x: &Tensor, offset: Option<&Tensor>) -> Result<()> {
        let c = x.cols();
        if c != self.sum_sq.len() || offset.is_some_and(|o| o.len() != c) {
            return Err(Error::shape("channel_energy", format!("width {c}")));
        }
        for row in x.data().chunks(c) {
            for (j, (&v, s)) in row.iter().zip(self.sum_sq.iter_mut()).enumerate() {
                let v = v as f64 - offset.map_or(0.0, |o| o.data()[j] as f64);
                *s += v * v;
            }
        }
        self.n_rows += x.rows();
        Ok(())
    }

    pub fn merge(&mut self, other: &ChannelEnergy) {
        self.sum_sq.iter_mut().zip(&other.sum_sq).for_each(|(a, b)| *a += b);
        self.n_rows += other.n_rows;
    }
}

/// Same scores as [`second_moment_attention`], computed from the head
/// contexts instead of per-head covariances. Because attention rows sum to
/// one, context column `c` minus the value bias equals `X̂_i v_c`, so its
/// mean square is exactly `v_cᵀ Σ_{X̂_i} v_c` without forming any `d×d`
/// matrix.
pub fn second_moment_attention_from_context(
    module: ModuleId,
    attn: &Attention,
    energy: &ChannelEnergy,
) -> Result<ImportanceScores> {
    if energy.sum_sq.len() != attn.inner() || energy.n_rows == 0 {
        return Err(Error::shape(
            "second_moment_attention",
            format!("{} context channels for inner width {}", energy.sum_sq.len(), attn.inner()),
        ));
    }
    let n = energy.n_rows as f64;
    let channel: Vec<f64> = row_norms_sq(&attn.wo)
        .iter()
        .zip(&energy.sum_sq)
        .map(|(o, e)| o * e / n)
        .collect();
    ImportanceScores::new(module, Granularity::Head, sum_heads(&channel, attn.d_head))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub head: usize,
    pub partner: usize,
    pub divergence: f64,
}

/// Heads that look redundant with another head, in discovery order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCandidates {
    pub module: ModuleId,
    pub tau: f64,
    pub candidates: Vec<Candidate>,
}

impl SimilarityCandidates {
    pub fn heads(&self) -> Vec<usize> {
        self.candidates.iter().map(|c| c.head).collect()
    }
}

/// Scans pairs `(i, j)`, `i < j`, row-major; `i` becomes a candidate when
/// `D[i][j] < tau` and neither head is already a candidate.
pub fn similarity_candidates(module: ModuleId, dm: &DivergenceMatrix, tau: f64) -> SimilarityCandidates {
    let h = dm.heads();
    let mut taken = vec![false; h];
    let mut candidates = Vec::new();
    for i in 0..h {
        for j in (i + 1)..h {
            let d = dm.get(i, j);
            if d < tau && !taken[i] && !taken[j] {
                taken[i] = true;
                candidates.push(Candidate {
                    head: i,
                    partner: j,
                    divergence: d,
                });
            }
        }
    }
    SimilarityCandidates {
        module,
        tau,
        candidates,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Baseline {
    L1,
    L2,
    Random { seed: u64 },
}

/// Data-free baseline scores. Each unit's weights are the concatenation of
/// its level-1 columns and level-2 row; attention units are whole heads.
pub fn baseline_scores(
    module: ModuleId,
    attn: Option<&Attention>,
    ffn: Option<&FeedForward>,
    kind: Baseline,
) -> Result<ImportanceScores> {
    let (granularity, level1, level2, group): (_, Vec<&Tensor>, &Tensor, usize) = match module.kind {
        ModuleKind::Attention => {
            let a = attn.ok_or_else(|| Error::InvalidArgument(format!("{module}: attention weights missing")))?;
            (Granularity::Head, vec![&a.wq, &a.wk, &a.wv], &a.wo, a.d_head)
        }
        ModuleKind::Ffn => {
            let f = ffn.ok_or_else(|| Error::InvalidArgument(format!("{module}: ffn weights missing")))?;
            let mut l1 = vec![&f.wu];
            l1.extend(f.wg.as_ref());
            (Granularity::InnerChannel, l1, &f.wd, 1)
        }
    };
    let inner = level2.rows();
    let units = inner / group;
    let scores = match kind {
        Baseline::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, &module.to_string()));
            (0..units).map(|_| rng.gen::<f64>()).collect()
        }
        Baseline::L1 | Baseline::L2 => {
            let f = |v: f32| -> f64 {
                match kind {
                    Baseline::L1 => (v as f64).abs(),
                    _ => v as f64 * v as f64,
                }
            };
            let mut channel = vec![0.0f64; inner];
            for w in level1 {
                let c = w.cols();
                for row in w.data().chunks(c) {
                    channel.iter_mut().zip(row).for_each(|(s, &v)| *s += f(v));
                }
            }
            let c = level2.cols();
            for (s, row) in channel.iter_mut().zip(level2.data().chunks(c)) {
                *s += row.iter().map(|&v| f(v)).sum::<f64>();
            }
            let per_unit = sum_heads(&channel, group);
            match kind {
                Baseline::L2 => per_unit.into_iter().map(f64::sqrt).collect(),
                _ => per_unit,
            }
        }
    };
    ImportanceScores::new(module, granularity, scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::argsort_ascending;
    use crate::toy::{toy_checkpoint, ToySpec};
    use crate::ModelGraph;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_sigma_degenerates_to_weight_norms() {
        let wu = rand_tensor(&[5, 7], 1);
        let wd = rand_tensor(&[7, 4], 2);
        let s = second_moment_ffn(
            ModuleId::ffn(0),
            &wu,
            None,
            &wd,
            &CovarianceEstimate::identity(5),
            MetricActivation::Linear,
            MetricOptions::default(),
        )
        .unwrap();
        let wu_t = wu.transpose().unwrap();
        for i in 0..7 {
            let u: f64 = wu_t.row(i).iter().map(|&v| v as f64 * v as f64).sum();
            let d: f64 = wd.row(i).iter().map(|&v| v as f64 * v as f64).sum();
            assert!((s.scores[i] - u * d).abs() <= 1e-9 * (u * d).max(1.0));
        }
    }

    #[test]
    fn zero_down_row_scores_zero() {
        let wu = rand_tensor(&[3, 4], 3);
        let mut wd = rand_tensor(&[4, 3], 4);
        wd.row_mut(2).fill(0.0);
        let s = second_moment_ffn(
            ModuleId::ffn(0),
            &wu,
            None,
            &wd,
            &CovarianceEstimate::identity(3),
            MetricActivation::Relu,
            MetricOptions::default(),
        )
        .unwrap();
        assert_eq!(s.scores[2], 0.0);
        assert!(s.scores.iter().enumerate().all(|(i, &v)| i == 2 || v > 0.0));
    }

    #[test]
    fn gated_is_product_of_sub_metrics() {
        let wu = rand_tensor(&[4, 6], 5);
        let wg = rand_tensor(&[4, 6], 6);
        let wd = rand_tensor(&[6, 4], 7);
        let sigma = CovarianceEstimate::identity(4);
        let m = |w: &Tensor, act| {
            second_moment_ffn(ModuleId::ffn(0), w, None, &wd, &sigma, act, MetricOptions::default())
                .unwrap()
                .scores
        };
        let up = m(&wu, MetricActivation::Linear);
        let gate = m(&wg, MetricActivation::Silu);
        let both = second_moment_ffn(
            ModuleId::ffn(0),
            &wu,
            Some(&wg),
            &wd,
            &sigma,
            MetricActivation::Silu,
            MetricOptions::default(),
        )
        .unwrap();
        for i in 0..6 {
            assert!((both.scores[i] - up[i] * gate[i]).abs() <= 1e-12 * both.scores[i].max(1.0));
        }
        let single = second_moment_ffn(
            ModuleId::ffn(0),
            &wu,
            Some(&wg),
            &wd,
            &sigma,
            MetricActivation::Silu,
            MetricOptions {
                gated_single_norm: true,
                ..Default::default()
            },
        )
        .unwrap();
        let dn = row_norms_sq(&wd);
        for i in 0..6 {
            assert!((single.scores[i] * dn[i] - both.scores[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_head_with_zero_output_rows_scores_zero() {
        let g = ModelGraph::from_checkpoint(&toy_checkpoint(&ToySpec::gpt2(), 8)).unwrap();
        let mut attn = g.blocks[0].attn.clone();
        let dh = attn.d_head;
        for r in dh..2 * dh {
            attn.wo.row_mut(r).fill(0.0);
        }
        let sig: Vec<_> = (0..4).map(|_| CovarianceEstimate::identity(64)).collect();
        let s = second_moment_attention(ModuleId::attention(0), &attn, &sig).unwrap();
        assert_eq!(s.scores[1], 0.0);
        assert!(s.scores[0] > 0.0);
        assert!(second_moment_attention(ModuleId::attention(0), &attn, &sig[..3]).is_err());
    }

    #[test]
    fn candidates_follow_scan_order() {
        let tau = 0.2;
        let dm = DivergenceMatrix::from_values(
            3,
            vec![0.0, 0.1, 0.1, 0.1, 0.0, 0.1, 0.1, 0.1, 0.0],
        )
        .unwrap();
        assert_eq!(similarity_candidates(ModuleId::attention(0), &dm, tau).heads(), vec![0, 1]);

        let far = DivergenceMatrix::from_values(2, vec![0.0, 0.5, 0.5, 0.0]).unwrap();
        assert!(similarity_candidates(ModuleId::attention(0), &far, tau).candidates.is_empty());

        // only heads 1 and 3 are duplicates
        let mut v = vec![0.9; 16];
        for i in 0..4 {
            v[i * 4 + i] = 0.0;
        }
        v[4 + 3] = 0.0;
        v[3 * 4 + 1] = 0.0;
        let dup = DivergenceMatrix::from_values(4, v).unwrap();
        let c = similarity_candidates(ModuleId::attention(0), &dup, tau);
        assert_eq!(c.heads(), vec![1]);
        assert_eq!(c.candidates[0].partner, 3);
    }

    #[test]
    fn baselines() {
        let g = ModelGraph::from_checkpoint(&toy_checkpoint(&ToySpec::gpt2(), 9)).unwrap();
        let mut ffn = g.blocks[0].ffn.clone();
        for r in 0..ffn.wu.rows() {
            ffn.wu.row_mut(r)[5] = 0.0;
        }
        ffn.wd.row_mut(5).fill(0.0);
        for kind in [Baseline::L1, Baseline::L2] {
            let s = baseline_scores(ModuleId::ffn(0), None, Some(&ffn), kind).unwrap();
            assert_eq!(s.scores.len(), 256);
            assert_eq!(s.scores[5], 0.0);
        }
        let r1 = baseline_scores(ModuleId::ffn(0), None, Some(&ffn), Baseline::Random { seed: 3 }).unwrap();
        let r2 = baseline_scores(ModuleId::ffn(0), None, Some(&ffn), Baseline::Random { seed: 3 }).unwrap();
        assert_eq!(r1, r2);

        let mut flat = ffn.clone();
        flat.wu.data_mut().fill(0.5);
        flat.wd.data_mut().fill(0.5);
        let s = baseline_scores(ModuleId::ffn(0), None, Some(&flat), Baseline::L2).unwrap();
        assert!(s.scores.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(argsort_ascending(&s.scores)[..3], [0, 1, 2]);

        let a = baseline_scores(ModuleId::attention(0), Some(&g.blocks[0].attn), None, Baseline::L1).unwrap();
        assert_eq!(a.scores.len(), 4);
        assert_eq!(a.granularity, Granularity::Head);
    }
}
