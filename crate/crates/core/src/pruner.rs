//! Sparsity targets, per-module budgets and pruning plans.
//!
//! Sparsity counts weight-matrix parameters only: removed level-1 columns
//! and level-2 rows over all attention and FFN matrices in the selected
//! blocks. Every module gets the same removal ratio; the ratio is searched
//! so that the achieved global sparsity lands closest to the target.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::argsort_ascending;
use crate::metrics::{ImportanceScores, SimilarityCandidates};
use crate::model::ModelGraph;
use crate::plan::{Granularity, ModuleId, ModuleKind, ModulePlan, Provenance, PruningPlan};

/// Allowed gap between requested and achieved sparsity.
pub const SPARSITY_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityTarget(f64);

impl SparsityTarget {
    pub fn new(s: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&s) {
            return Err(Error::InvalidArgument(format!("sparsity {s} must be in [0, 1)")));
        }
        Ok(Self(s))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// How a module's units are scored; recorded in plan provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    SecondMoment,
    L1,
    L2,
    Random,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::SecondMoment => "second_moment",
            MetricKind::L1 => "l1",
            MetricKind::L2 => "l2",
            MetricKind::Random => "random",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "second_moment" | "second-moment" => Ok(MetricKind::SecondMoment),
            "l1" => Ok(MetricKind::L1),
            "l2" => Ok(MetricKind::L2),
            "random" => Ok(MetricKind::Random),
            _ => Err(Error::InvalidArgument(format!(
                "unknown metric {s:?} (expected second_moment, l1, l2 or random)"
            ))),
        }
    }
}

/// Prunable shape of one module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleUnits {
    pub id: ModuleId,
    /// Heads for attention, inner channels for FFN.
    pub units: usize,
    pub params_per_unit: usize,
}

impl ModuleUnits {
    pub fn of(graph: &ModelGraph, id: ModuleId) -> Result<Self> {
        if id.block >= graph.blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "{id} is beyond the model's {} blocks",
                graph.blocks.len()
            )));
        }
        let b = &graph.blocks[id.block];
        let units = match id.kind {
            ModuleKind::Attention => b.attn.n_heads(),
            ModuleKind::Ffn => b.ffn.inner(),
        };
        Ok(Self {
            id,
            units,
            params_per_unit: graph.module_weight_params(id) / units,
        })
    }

    pub fn budget(&self, ratio: f64) -> usize {
        let r = (ratio * self.units as f64).round() as usize;
        r.min(self.units.saturating_sub(1))
    }

    pub fn granularity(&self) -> Granularity {
        match self.id.kind {
            ModuleKind::Attention => Granularity::Head,
            ModuleKind::Ffn => Granularity::InnerChannel,
        }
    }
}

/// Modules of every block in `blocks`, in network order.
pub fn prunable_modules(graph: &ModelGraph, blocks: Range<usize>) -> Result<Vec<ModuleUnits>> {
    if blocks.is_empty() || blocks.end > graph.blocks.len() {
        return Err(Error::InvalidArgument(format!(
            "block range {}:{} is not within 0:{}",
            blocks.start,
            blocks.end,
            graph.blocks.len()
        )));
    }
    ModuleId::in_blocks(blocks)
        .into_iter()
        .map(|id| ModuleUnits::of(graph, id))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub ratio: f64,
    pub budgets: BTreeMap<ModuleId, usize>,
    pub target: f64,
    pub achieved: f64,
}

fn achieved(modules: &[ModuleUnits], ratio: f64) -> f64 {
    let total: usize = modules.iter().map(|m| m.units * m.params_per_unit).sum();
    let removed: usize = modules.iter().map(|m| m.budget(ratio) * m.params_per_unit).sum();
    removed as f64 / total as f64
}

/// Finds the uniform ratio whose achieved sparsity is closest to `target`.
pub fn allocate(modules: &[ModuleUnits], target: SparsityTarget) -> Result<Allocation> {
    if modules.is_empty() {
        return Err(Error::InvalidArgument("no prunable modules".into()));
    }
    let t = target.value();
    // achieved() is a nondecreasing step function of the ratio; bracket
    // the first step at or above the target.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if achieved(modules, mid) >= t {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let ratio = [lo, hi]
        .into_iter()
        .min_by(|a, b| {
            let da = (achieved(modules, *a) - t).abs();
            let db = (achieved(modules, *b) - t).abs();
            da.total_cmp(&db)
        })
        .unwrap_or(hi);
    let ratio = if t == 0.0 { 0.0 } else { ratio };
    let got = achieved(modules, ratio);
    if (got - t).abs() > SPARSITY_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "sparsity {t} is not reachable with a uniform ratio (closest is {got:.4})"
        )));
    }
    Ok(Allocation {
        ratio,
        budgets: modules.iter().map(|m| (m.id, m.budget(ratio))).collect(),
        target: t,
        achieved: got,
    })
}

/// Units to remove: similarity candidates first, by ascending witness
/// divergence, then the lowest-scoring remaining units (ties by index).
pub fn select_removed(
    scores: &[f64],
    candidates: Option<&SimilarityCandidates>,
    budget: usize,
) -> Vec<usize> {
    let mut removed = Vec::with_capacity(budget);
    let mut taken = vec![false; scores.len()];
    if let Some(c) = candidates {
        let mut order: Vec<_> = c.candidates.iter().collect();
        order.sort_by(|a, b| a.divergence.total_cmp(&b.divergence));
        for cand in order {
            if removed.len() == budget {
                break;
            }
            if cand.head < scores.len() && !taken[cand.head] {
                taken[cand.head] = true;
                removed.push(cand.head);
            }
        }
    }
    for i in argsort_ascending(scores) {
        if removed.len() == budget {
            break;
        }
        if !taken[i] {
            taken[i] = true;
            removed.push(i);
        }
    }
    removed
}

/// Plan for one module given its scores and budget.
pub fn plan_module(
    module: ModuleUnits,
    d_head: usize,
    scores: &ImportanceScores,
    candidates: Option<&SimilarityCandidates>,
    budget: usize,
    provenance: Provenance,
) -> Result<ModulePlan> {
    if scores.scores.len() != module.units || scores.module != module.id {
        return Err(Error::InvalidArgument(format!(
            "{}: {} scores for {} units",
            module.id,
            scores.scores.len(),
            module.units
        )));
    }
    if budget >= module.units {
        return Err(Error::Plan(format!("{}: budget {budget} removes every unit", module.id)));
    }
    let removed = select_removed(&scores.scores, candidates, budget);
    let kept: Vec<usize> = (0..module.units).filter(|u| !removed.contains(u)).collect();
    let mut mp = match module.id.kind {
        ModuleKind::Attention => ModulePlan::from_heads(&kept, module.units, d_head)?,
        ModuleKind::Ffn => ModulePlan::from_channels(&kept, module.units)?,
    };
    mp.provenance = provenance;
    Ok(mp)
}

/// Settings shared by every module's provenance record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSettings {
    pub metric: MetricKind,
    pub tau: Option<f64>,
    pub seed: Option<u64>,
    pub calibration_digest: Option<String>,
}

impl PlanSettings {
    pub fn provenance(&self, ratio: f64) -> Provenance {
        Provenance {
            schema: crate::SCHEMA.to_string(),
            metric: self.metric.name().to_string(),
            tau: self.tau,
            seed: self.seed,
            calibration_digest: self.calibration_digest.clone(),
            module_ratio: Some(ratio),
        }
    }
}

/// Whole-model plan. Similarity candidates are honored only for the
/// second-moment metric.
pub fn build_plan(
    graph: &ModelGraph,
    modules: &[ModuleUnits],
    allocation: &Allocation,
    scores: &BTreeMap<ModuleId, ImportanceScores>,
    candidates: &BTreeMap<ModuleId, SimilarityCandidates>,
    settings: &PlanSettings,
) -> Result<PruningPlan> {
    let mut plan = PruningPlan::default();
    for m in modules {
        let s = scores
            .get(&m.id)
            .ok_or_else(|| Error::InvalidArgument(format!("no scores for {}", m.id)))?;
        let cand = match settings.metric {
            MetricKind::SecondMoment => candidates.get(&m.id),
            _ => None,
        };
        let budget = allocation.budgets.get(&m.id).copied().unwrap_or(0);
        let mp = plan_module(
            *m,
            graph.config.d_head,
            s,
            cand,
            budget,
            settings.provenance(allocation.ratio),
        )?;
        plan.insert(m.id, mp);
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleSparsity {
    pub module: ModuleId,
    pub units: usize,
    pub removed_units: usize,
    pub removed_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub prunable_params: usize,
    pub removed_params: usize,
    pub sparsity: f64,
    pub modules: Vec<ModuleSparsity>,
}

/// Achieved sparsity of `plan` over `modules` of the dense model.
pub fn sparsity_report(modules: &[ModuleUnits], plan: &PruningPlan, d_head: usize) -> SparsityReport {
    let mut out = Vec::with_capacity(modules.len());
    for m in modules {
        let removed_units = plan.module(&m.id).map_or(0, |mp| match m.id.kind {
            ModuleKind::Attention => mp.removed.len() / d_head.max(1),
            ModuleKind::Ffn => mp.removed.len(),
        });
        out.push(ModuleSparsity {
            module: m.id,
            units: m.units,
            removed_units,
            removed_params: removed_units * m.params_per_unit,
        });
    }
    let prunable: usize = modules.iter().map(|m| m.units * m.params_per_unit).sum();
    let removed: usize = out.iter().map(|m| m.removed_params).sum();
    SparsityReport {
        prunable_params: prunable,
        removed_params: removed,
        sparsity: removed as f64 / prunable.max(1) as f64,
        modules: out,
    }
}
