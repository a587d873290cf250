//! Sequential prune / reconstruct pipeline.
//!
//! Modules are processed in network order. Three residual streams run in
//! lockstep over the blocks:
//!
//! - the calibration stream, used for scores and head divergence;
//! - the dense recovery stream, which always runs the original model and
//!   supplies the regression targets;
//! - the drifted recovery stream, which runs the partially pruned model
//!   and supplies the regression inputs.
//!
//! For each module with recovery enabled: level-1 weights are re-fit so the
//! drifted input reproduces the dense level-1 outputs, scores are computed
//! on the calibration stream through the re-fit level-1, the module is
//! sliced, and the level-2 weights are re-fit at the pruned shape against
//! the dense module output. Without recovery only scoring and slicing run
//! and the calibration stream stays dense.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, solve_normal_equations, SolveOptions, Tensor};
use crate::metrics::{
    baseline_scores, second_moment_attention_from_context, second_moment_ffn_module,
    similarity_candidates, Baseline, Candidate, ChannelEnergy, ImportanceScores, MetricOptions,
    SimilarityCandidates,
};
use crate::model::{Attention, ModelGraph, TapRequest, TokenBatch};
use crate::plan::{ModuleId, ModuleKind, PruningPlan};
use crate::pruner::{
    allocate, plan_module, prunable_modules, sparsity_report, Allocation, MetricKind, ModuleUnits,
    PlanSettings, SparsityReport, SparsityTarget,
};
use crate::stats::{CovarianceEstimate, CrossProduct, DivergenceMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    PruneOnly,
    PruneWithRecovery,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub target: SparsityTarget,
    pub blocks: Range<usize>,
    pub mode: Mode,
    pub metric: MetricKind,
    pub tau: f64,
    pub seed: u64,
    pub solve: SolveOptions,
    pub metric_options: MetricOptions,
    pub calibration_digest: Option<String>,
    /// Module kinds eligible for pruning; sparsity is measured over these.
    pub kinds: Vec<ModuleKind>,
}

impl PipelineConfig {
    pub fn new(target: SparsityTarget, blocks: Range<usize>) -> Self {
        Self {
            target,
            blocks,
            mode: Mode::PruneWithRecovery,
            metric: MetricKind::SecondMoment,
            tau: 0.2,
            seed: 0,
            solve: SolveOptions::default(),
            metric_options: MetricOptions::default(),
            calibration_digest: None,
            kinds: vec![ModuleKind::Attention, ModuleKind::Ffn],
        }
    }

    fn settings(&self) -> PlanSettings {
        let second_moment = self.metric == MetricKind::SecondMoment;
        PlanSettings {
            metric: self.metric,
            tau: second_moment.then_some(self.tau),
            seed: (self.metric == MetricKind::Random).then_some(self.seed),
            calibration_digest: if second_moment {
                self.calibration_digest.clone()
            } else {
                None
            },
        }
    }
}

/// One least-squares fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub rows: usize,
    pub lambda: f64,
    pub jitter: f64,
    /// `‖Y‖²` of the targets.
    pub target_energy: f64,
    /// `‖XW − Y‖²` with the weights before the fit.
    pub residual_before: f64,
    pub residual_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleRecord {
    pub module: ModuleId,
    pub units: usize,
    pub removed: Vec<usize>,
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<Candidate>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level1: Option<SolveRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level2: Option<SolveRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub mode: Mode,
    pub metric: MetricKind,
    pub target_sparsity: f64,
    pub module_ratio: f64,
    pub blocks: [usize; 2],
    pub seed: u64,
    pub tau: f64,
    pub ridge_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_digest: Option<String>,
    pub calibration_rows: usize,
    pub recovery_rows: usize,
    pub dense_parameters: usize,
    pub pruned_parameters: usize,
    pub sparsity: SparsityReport,
    pub modules: Vec<ModuleRecord>,
}

pub struct PipelineOutput {
    pub graph: ModelGraph,
    pub plan: PruningPlan,
    pub manifest: RunManifest,
}

/// Per-sequence residual streams of one token batch.
#[derive(Debug, Clone)]
struct Stream {
    seq_len: usize,
    h: Vec<Tensor>,
}

impl Stream {
    fn new(graph: &ModelGraph, batch: &TokenBatch) -> Result<Self> {
        let h = (0..batch.n_seqs)
            .map(|i| graph.embed(&batch.slice(i..i + 1)))
            .collect::<Result<_>>()?;
        Ok(Self {
            seq_len: batch.seq_len,
            h,
        })
    }

    /// Module input (the normed residual) of sequence `i`.
    fn input(&self, graph: &ModelGraph, id: ModuleId, i: usize) -> Result<Tensor> {
        let b = &graph.blocks[id.block];
        match id.kind {
            ModuleKind::Attention => b.norm1.apply(&self.h[i]),
            ModuleKind::Ffn => b.norm2.apply(&self.h[i]),
        }
    }

    fn advance(&mut self, graph: &ModelGraph, id: ModuleId) -> Result<()> {
        for i in 0..self.h.len() {
            let x = self.input(graph, id, i)?;
            let b = &graph.blocks[id.block];
            let delta = match id.kind {
                ModuleKind::Attention => b.attn.forward(&x, self.seq_len, graph.rope.as_ref())?,
                ModuleKind::Ffn => b.ffn.forward(&x)?,
            };
            linalg::add_assign(&mut self.h[i], &delta)?;
        }
        Ok(())
    }
}

fn hcat(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts.first().map_or(0, |p| p.rows());
    let width: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Tensor::zeros(&[rows, width]);
    for r in 0..rows {
        let mut at = 0;
        for p in parts {
            if p.rows() != rows {
                return Err(Error::shape("hcat", "row counts differ"));
            }
            out.row_mut(r)[at..at + p.cols()].copy_from_slice(p.row(r));
            at += p.cols();
        }
    }
    Ok(out)
}

fn with_ones(x: &Tensor, aug: bool) -> Result<Tensor> {
    if !aug {
        return Ok(x.clone());
    }
    hcat(&[x, &Tensor::filled(&[x.rows(), 1], 1.0)])
}

/// Normal equations of `min ‖[X | 1]W − Y‖²`, accumulated row block by row
/// block.
struct LeastSquares {
    aug: bool,
    gram: CovarianceEstimate,
    cross: CrossProduct,
    target_energy: f64,
}

impl LeastSquares {
    fn new(d_in: usize, d_out: usize, aug: bool) -> Self {
        let d = d_in + aug as usize;
        Self {
            aug,
            gram: CovarianceEstimate::new(d),
            cross: CrossProduct::new(d, d_out),
            target_energy: 0.0,
        }
    }

    fn add(&mut self, x: &Tensor, y: &Tensor) -> Result<()> {
        let xa = with_ones(x, self.aug)?;
        self.gram.accumulate(&xa)?;
        self.cross.accumulate(&xa, y)?;
        self.target_energy += y.frobenius_sq();
        Ok(())
    }

    /// `tr(WᵀGW) − 2 tr(WᵀC) + ‖Y‖²`.
    fn residual(&self, w: &[f64]) -> f64 {
        let (d, k) = (self.cross.rows, self.cross.cols);
        let g = self.gram.gram();
        let mut quad = 0.0;
        for a in 0..d {
            let mut gw = vec![0.0f64; k];
            for b in 0..d {
                let gab = g[a * d + b];
                if gab != 0.0 {
                    gw.iter_mut()
                        .zip(&w[b * k..(b + 1) * k])
                        .for_each(|(s, wv)| *s += gab * wv);
                }
            }
            quad += gw.iter().zip(&w[a * k..(a + 1) * k]).map(|(x, y)| x * y).sum::<f64>();
        }
        let lin: f64 = w.iter().zip(&self.cross.sum).map(|(a, b)| a * b).sum();
        (quad - 2.0 * lin + self.target_energy).max(0.0)
    }

    fn solve(&self, before: &[f64], opts: SolveOptions, context: &str) -> Result<(Vec<f64>, SolveRecord)> {
        let (d, k) = (self.cross.rows, self.cross.cols);
        let (w, stats) = solve_normal_equations(self.gram.gram(), &self.cross.sum, d, k, opts, context)?;
        let record = SolveRecord {
            rows: self.gram.n_rows(),
            lambda: stats.lambda,
            jitter: stats.jitter,
            target_energy: self.target_energy,
            residual_before: self.residual(before),
            residual_after: self.residual(&w),
        };
        Ok((w, record))
    }
}

/// Row-major `[W; b]` with the given column blocks side by side.
fn stack(blocks: &[(&Tensor, Option<&Tensor>)], aug: bool) -> Vec<f64> {
    let d = blocks[0].0.rows();
    let k: usize = blocks.iter().map(|(w, _)| w.cols()).sum();
    let mut out = vec![0.0f64; (d + aug as usize) * k];
    let mut at = 0;
    for (w, b) in blocks {
        let c = w.cols();
        for r in 0..d {
            for (j, &v) in w.row(r).iter().enumerate() {
                out[r * k + at + j] = v as f64;
            }
        }
        if aug {
            if let Some(b) = b {
                for (j, &v) in b.data().iter().enumerate() {
                    out[d * k + at + j] = v as f64;
                }
            }
        }
        at += c;
    }
    out
}

/// Splits a solved `[(d + aug) × k]` matrix into column blocks of the
/// given widths, each as `(W, Some(b) if aug)`.
fn unstack(w: &[f64], d: usize, widths: &[usize], aug: bool) -> Result<Vec<(Tensor, Option<Tensor>)>> {
    let k: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(widths.len());
    let mut at = 0;
    for &c in widths {
        let mut wt = Vec::with_capacity(d * c);
        for r in 0..d {
            wt.extend_from_slice(&w[r * k + at..r * k + at + c]);
        }
        let bias = aug
            .then(|| Tensor::from_f64(&[c], &w[d * k + at..d * k + at + c]))
            .transpose()?;
        out.push((Tensor::from_f64(&[d, c], &wt)?, bias));
        at += c;
    }
    Ok(out)
}

/// Drives the pipeline one module at a time. Modules must be requested in
/// network order; modules that are skipped stay dense.
pub struct RecoverySession<'a> {
    dense: &'a ModelGraph,
    graph: ModelGraph,
    config: PipelineConfig,
    next: usize,
    calibration: Stream,
    recovery: Option<(Stream, Stream)>,
    plan: PruningPlan,
    records: Vec<ModuleRecord>,
}

fn position(id: ModuleId) -> usize {
    2 * id.block + (id.kind == ModuleKind::Ffn) as usize
}

fn module_at(pos: usize) -> ModuleId {
    if pos.is_multiple_of(2) {
        ModuleId::attention(pos / 2)
    } else {
        ModuleId::ffn(pos / 2)
    }
}

impl<'a> RecoverySession<'a> {
    /// `recovery` falls back to the calibration batch when absent. The
    /// calibration batch may be omitted only for data-free metrics.
    pub fn new(
        dense: &'a ModelGraph,
        calibration: Option<&TokenBatch>,
        recovery: Option<&TokenBatch>,
        config: PipelineConfig,
    ) -> Result<Self> {
        if dense.applied_plan.is_some() {
            return Err(Error::Plan("the input model has already been pruned".into()));
        }
        if calibration.is_none() && config.metric == MetricKind::SecondMoment {
            return Err(Error::InvalidArgument(
                "the second_moment metric needs a calibration batch".into(),
            ));
        }
        let rec = match config.mode {
            Mode::PruneOnly => None,
            Mode::PruneWithRecovery => {
                let batch = recovery.or(calibration).ok_or_else(|| {
                    Error::InvalidArgument("recovery needs a calibration or recovery batch".into())
                })?;
                let s = Stream::new(dense, batch)?;
                Some((s.clone(), s))
            }
        };
        let calibration = match calibration {
            Some(b) => Stream::new(dense, b)?,
            None => Stream {
                seq_len: 1,
                h: Vec::new(),
            },
        };
        Ok(Self {
            dense,
            graph: dense.clone(),
            calibration,
            recovery: rec,
            config,
            next: 0,
            plan: PruningPlan::default(),
            records: Vec::new(),
        })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    fn advance_streams(&mut self, id: ModuleId) -> Result<()> {
        let cal_graph = match self.config.mode {
            Mode::PruneOnly => self.dense,
            Mode::PruneWithRecovery => &self.graph,
        };
        self.calibration.advance(cal_graph, id)?;
        if let Some((dense, drift)) = &mut self.recovery {
            dense.advance(self.dense, id)?;
            drift.advance(&self.graph, id)?;
        }
        Ok(())
    }

    /// Runs the streams through every module before `id` unchanged.
    fn skip_to(&mut self, id: ModuleId) -> Result<()> {
        let target = position(id);
        if target < self.next {
            return Err(Error::OrderViolation {
                expected: module_at(self.next).to_string(),
                got: id.to_string(),
            });
        }
        if id.block >= self.graph.blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "{id} is beyond the model's {} blocks",
                self.graph.blocks.len()
            )));
        }
        while self.next < target {
            self.advance_streams(module_at(self.next))?;
            self.next += 1;
        }
        Ok(())
    }

    /// Re-fits (if enabled), scores, slices and re-fits again the module
    /// `unit.id`, removing `budget` units.
    pub fn recover_and_prune_module(&mut self, unit: ModuleUnits, budget: usize, ratio: f64) -> Result<&ModuleRecord> {
        let id = unit.id;
        self.skip_to(id)?;
        let record = match id.kind {
            ModuleKind::Attention => self.attention(unit, budget, ratio)?,
            ModuleKind::Ffn => self.ffn(unit, budget, ratio)?,
        };
        self.advance_streams(id)?;
        self.next = position(id) + 1;
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    fn recovering(&self) -> bool {
        self.recovery.is_some()
    }

    fn attention(&mut self, unit: ModuleUnits, budget: usize, ratio: f64) -> Result<ModuleRecord> {
        let id = unit.id;
        let b = id.block;
        let s = self.calibration.seq_len;
        let rope = self.graph.rope.clone();
        let dense_attn = &self.dense.blocks[b].attn;
        let mut attn = self.graph.blocks[b].attn.clone();
        let inner = attn.inner();
        let d = attn.wq.rows();

        let mut level1 = None;
        if let Some((dense_s, drift_s)) = &self.recovery {
            let aug = attn.bq.is_some() || attn.bk.is_some() || attn.bv.is_some();
            let mut ls = LeastSquares::new(d, 3 * inner, aug);
            for i in 0..dense_s.h.len() {
                let xd = dense_s.input(self.dense, id, i)?;
                let xh = drift_s.input(&self.graph, id, i)?;
                let y = dense_attn.project(&xd)?;
                ls.add(&xh, &hcat(&[&y.q, &y.k, &y.v])?)?;
            }
            let before = stack(
                &[
                    (&attn.wq, attn.bq.as_ref()),
                    (&attn.wk, attn.bk.as_ref()),
                    (&attn.wv, attn.bv.as_ref()),
                ],
                aug,
            );
            let (w, rec) = ls.solve(&before, self.config.solve, &format!("{id} level-1"))?;
            let mut parts = unstack(&w, d, &[inner; 3], aug)?.into_iter();
            let mut next = || parts.next().expect("three blocks");
            (attn.wq, attn.bq) = next();
            (attn.wk, attn.bk) = next();
            (attn.wv, attn.bv) = next();
            level1 = Some(rec);
        }

        let cal_graph = if self.recovering() { &self.graph } else { self.dense };
        let (scores, candidates) = match self.config.metric {
            MetricKind::SecondMoment => {
                let mut energy = ChannelEnergy::new(inner);
                let mut div = DivergenceMatrix::new(attn.n_heads());
                for i in 0..self.calibration.h.len() {
                    let x = self.calibration.input(cal_graph, id, i)?;
                    let (ctx, probs) = attn.attend(&attn.project(&x)?, s, rope.as_ref(), true)?;
                    energy.accumulate(&ctx, attn.bv.as_ref())?;
                    for p in probs.expect("requested") {
                        div.accumulate(&p)?;
                    }
                }
                let scores = second_moment_attention_from_context(id, &attn, &energy)?;
                let cands = similarity_candidates(id, &div, self.config.tau);
                (scores, Some(cands))
            }
            other => (baseline_scores(id, Some(&attn), None, self.baseline(other))?, None),
        };

        let mp = plan_module(
            unit,
            attn.d_head,
            &scores,
            candidates.as_ref(),
            budget,
            self.config.settings().provenance(ratio),
        )?;
        let mut pruned = attn.prune(id, &mp, unit.units)?;

        let mut level2 = None;
        if let Some((dense_s, drift_s)) = &self.recovery {
            let aug = pruned.bo.is_some();
            let k = pruned.inner();
            let mut ls = LeastSquares::new(k, d, aug);
            for i in 0..dense_s.h.len() {
                let xd = dense_s.input(self.dense, id, i)?;
                let xh = drift_s.input(&self.graph, id, i)?;
                let y = dense_attn.forward(&xd, s, rope.as_ref())?;
                let (ctx, _) = pruned.attend(&pruned.project(&xh)?, s, rope.as_ref(), false)?;
                ls.add(&ctx, &y)?;
            }
            let before = stack(&[(&pruned.wo, pruned.bo.as_ref())], aug);
            let (w, rec) = ls.solve(&before, self.config.solve, &format!("{id} level-2"))?;
            let (wo, bo) = unstack(&w, k, &[d], aug)?.remove(0);
            pruned.wo = wo;
            pruned.bo = bo;
            level2 = Some(rec);
        }

        self.graph.blocks[b].attn = pruned;
        let record = self.record(unit, &mp.removed, scores, candidates, level1, level2);
        self.plan.insert(id, mp);
        Ok(record)
    }

    fn ffn(&mut self, unit: ModuleUnits, budget: usize, ratio: f64) -> Result<ModuleRecord> {
        let id = unit.id;
        let b = id.block;
        let dense_ffn = &self.dense.blocks[b].ffn;
        let mut ffn = self.graph.blocks[b].ffn.clone();
        let inner = ffn.inner();
        let d = ffn.wu.rows();

        let mut level1 = None;
        if let Some((dense_s, drift_s)) = &self.recovery {
            let aug = ffn.bu.is_some() || ffn.bg.is_some();
            let widths: Vec<usize> = if ffn.is_gated() { vec![inner; 2] } else { vec![inner] };
            let mut ls = LeastSquares::new(d, widths.iter().sum(), aug);
            for i in 0..dense_s.h.len() {
                let xd = dense_s.input(self.dense, id, i)?;
                let xh = drift_s.input(&self.graph, id, i)?;
                let y = dense_ffn.level1(&xd)?;
                let y = match &y.gate {
                    Some(g) => hcat(&[&y.up, g])?,
                    None => y.up,
                };
                ls.add(&xh, &y)?;
            }
            let mut blocks = vec![(&ffn.wu, ffn.bu.as_ref())];
            if let Some(wg) = &ffn.wg {
                blocks.push((wg, ffn.bg.as_ref()));
            }
            let before = stack(&blocks, aug);
            let (w, rec) = ls.solve(&before, self.config.solve, &format!("{id} level-1"))?;
            let mut parts = unstack(&w, d, &widths, aug)?.into_iter();
            (ffn.wu, ffn.bu) = parts.next().expect("up block");
            if let Some((wg, bg)) = parts.next() {
                ffn.wg = Some(wg);
                ffn.bg = bg;
            }
            level1 = Some(rec);
        }

        let scores = match self.config.metric {
            MetricKind::SecondMoment => {
                let cal_graph = if self.recovering() { &self.graph } else { self.dense };
                let mut sigma = CovarianceEstimate::new(d);
                for i in 0..self.calibration.h.len() {
                    sigma.accumulate(&self.calibration.input(cal_graph, id, i)?)?;
                }
                second_moment_ffn_module(id, &ffn, &sigma, self.config.metric_options)?
            }
            other => baseline_scores(id, None, Some(&ffn), self.baseline(other))?,
        };

        let mp = plan_module(unit, 1, &scores, None, budget, self.config.settings().provenance(ratio))?;
        let mut pruned = ffn.prune(id, &mp, unit.units)?;

        let mut level2 = None;
        if let Some((dense_s, drift_s)) = &self.recovery {
            let aug = pruned.bd.is_some();
            let k = pruned.inner();
            let mut ls = LeastSquares::new(k, d, aug);
            for i in 0..dense_s.h.len() {
                let xd = dense_s.input(self.dense, id, i)?;
                let xh = drift_s.input(&self.graph, id, i)?;
                let y = dense_ffn.forward(&xd)?;
                let x2 = pruned.hidden(&pruned.level1(&xh)?)?;
                ls.add(&x2, &y)?;
            }
            let before = stack(&[(&pruned.wd, pruned.bd.as_ref())], aug);
            let (w, rec) = ls.solve(&before, self.config.solve, &format!("{id} level-2"))?;
            let (wd, bd) = unstack(&w, k, &[d], aug)?.remove(0);
            pruned.wd = wd;
            pruned.bd = bd;
            level2 = Some(rec);
        }

        self.graph.blocks[b].ffn = pruned;
        let record = self.record(unit, &mp.removed, scores, None, level1, level2);
        self.plan.insert(id, mp);
        Ok(record)
    }

    fn baseline(&self, metric: MetricKind) -> Baseline {
        match metric {
            MetricKind::L1 => Baseline::L1,
            MetricKind::L2 => Baseline::L2,
            _ => Baseline::Random {
                seed: self.config.seed,
            },
        }
    }

    fn record(
        &self,
        unit: ModuleUnits,
        removed_channels: &[usize],
        scores: ImportanceScores,
        candidates: Option<SimilarityCandidates>,
        level1: Option<SolveRecord>,
        level2: Option<SolveRecord>,
    ) -> ModuleRecord {
        let removed = match unit.id.kind {
            ModuleKind::Attention => {
                let dh = self.dense.config.d_head;
                removed_channels.iter().step_by(dh).map(|c| c / dh).collect()
            }
            ModuleKind::Ffn => removed_channels.to_vec(),
        };
        ModuleRecord {
            module: unit.id,
            units: unit.units,
            removed,
            scores: scores.scores,
            candidates: candidates.map(|c| c.candidates),
            level1,
            level2,
        }
    }

    /// Pruned graph (with the plan attached), the plan and per-module
    /// records.
    pub fn finish(self) -> (ModelGraph, PruningPlan, Vec<ModuleRecord>) {
        let mut graph = self.graph;
        graph.applied_plan = Some(self.plan.clone());
        (graph, self.plan, self.records)
    }
}

/// Prunes `dense` to the configured sparsity, optionally re-fitting every
/// pruned module.
pub fn run_pipeline(
    dense: &ModelGraph,
    calibration: Option<&TokenBatch>,
    recovery: Option<&TokenBatch>,
    config: PipelineConfig,
) -> Result<PipelineOutput> {
    let modules: Vec<ModuleUnits> = prunable_modules(dense, config.blocks.clone())?
        .into_iter()
        .filter(|m| config.kinds.contains(&m.id.kind))
        .collect();
    let allocation: Allocation = allocate(&modules, config.target)?;
    log::info!(
        "target sparsity {:.4}: module ratio {:.4}, achieved {:.4}",
        allocation.target,
        allocation.ratio,
        allocation.achieved
    );
    let recovery_rows = match config.mode {
        Mode::PruneOnly => 0,
        Mode::PruneWithRecovery => recovery.or(calibration).map_or(0, TokenBatch::rows),
    };
    let mut session = RecoverySession::new(dense, calibration, recovery, config.clone())?;
    for m in &modules {
        let budget = allocation.budgets[&m.id];
        let rec = session.recover_and_prune_module(*m, budget, allocation.ratio)?;
        log::info!("{}: removed {}/{} units", m.id, rec.removed.len(), m.units);
    }
    let (graph, plan, records) = session.finish();
    let sparsity = sparsity_report(&modules, &plan, dense.config.d_head);
    let manifest = RunManifest {
        schema: crate::SCHEMA.into(),
        mode: config.mode,
        metric: config.metric,
        target_sparsity: config.target.value(),
        module_ratio: allocation.ratio,
        blocks: [config.blocks.start, config.blocks.end],
        seed: config.seed,
        tau: config.tau,
        ridge_fraction: config.solve.ridge_fraction,
        calibration_digest: config.calibration_digest.clone(),
        calibration_rows: calibration.map_or(0, TokenBatch::rows),
        recovery_rows,
        dense_parameters: dense.parameter_count(),
        pruned_parameters: graph.parameter_count(),
        sparsity,
        modules: records,
    };
    Ok(PipelineOutput {
        graph,
        plan,
        manifest,
    })
}

/// Dense activations around one module: its input, level-1 outputs
/// (concatenated), level-2 input and output. Every matrix has `N·s` rows.
#[derive(Debug, Clone)]
pub struct ModuleTargets {
    pub x: Tensor,
    pub y1: Tensor,
    pub x2: Tensor,
    pub y2: Tensor,
}

pub fn capture_dense_targets(graph: &ModelGraph, batch: &TokenBatch, id: ModuleId) -> Result<ModuleTargets> {
    let mut taps = TapRequest::none();
    taps.blocks.insert(id.block);
    taps.module_inputs = true;
    taps.level1_outputs = true;
    taps.level2 = true;
    let (_, mut out) = graph.forward(batch, &taps)?;
    let t = out
        .blocks
        .remove(&id.block)
        .ok_or_else(|| Error::InvalidArgument(format!("{id} is beyond the model")))?;
    let missing = || Error::shape("capture_dense_targets", "tap not recorded");
    Ok(match id.kind {
        ModuleKind::Attention => {
            let (q, k, v) = (
                t.y_q.ok_or_else(missing)?,
                t.y_k.ok_or_else(missing)?,
                t.y_v.ok_or_else(missing)?,
            );
            ModuleTargets {
                x: t.attn_input.ok_or_else(missing)?,
                y1: hcat(&[&q, &k, &v])?,
                x2: t.attn_x2.ok_or_else(missing)?,
                y2: t.attn_out.ok_or_else(missing)?,
            }
        }
        ModuleKind::Ffn => {
            let up = t.y_u.ok_or_else(missing)?;
            let y1 = match &t.y_g {
                Some(g) => hcat(&[&up, g])?,
                None => up,
            };
            ModuleTargets {
                x: t.ffn_input.ok_or_else(missing)?,
                y1,
                x2: t.ffn_x2.ok_or_else(missing)?,
                y2: t.ffn_out.ok_or_else(missing)?,
            }
        }
    })
}

/// Pairwise head divergence of every attention module in `blocks` on the
/// dense model, streaming one sequence at a time.
pub fn head_divergence(
    graph: &ModelGraph,
    batch: &TokenBatch,
    blocks: Range<usize>,
) -> Result<Vec<(ModuleId, DivergenceMatrix)>> {
    if blocks.is_empty() || blocks.end > graph.blocks.len() {
        return Err(Error::InvalidArgument(format!(
            "block range {}:{} is not within 0:{}",
            blocks.start,
            blocks.end,
            graph.blocks.len()
        )));
    }
    let mut stream = Stream::new(graph, batch)?;
    let mut out = Vec::new();
    for b in 0..blocks.end {
        let id = ModuleId::attention(b);
        if blocks.contains(&b) {
            let attn: &Attention = &graph.blocks[b].attn;
            let mut dm = DivergenceMatrix::new(attn.n_heads());
            for i in 0..stream.h.len() {
                let x = stream.input(graph, id, i)?;
                let (_, probs) = attn.attend(&attn.project(&x)?, stream.seq_len, graph.rope.as_ref(), true)?;
                for p in probs.expect("requested") {
                    dm.accumulate(&p)?;
                }
            }
            out.push((id, dm));
        }
        stream.advance(graph, id)?;
        stream.advance(graph, ModuleId::ffn(b))?;
    }
    Ok(out)
}
