//! Pruning plans: which inner channels of each depth-2 module survive.
//!
//! Indices always refer to the module's original (unpruned) inner dimension.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Attention,
    Ffn,
}

/// A depth-2 module: the attention or feed-forward half of one block.
/// Ordering follows network order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModuleId {
    pub block: usize,
    pub kind: ModuleKind,
}

impl ModuleId {
    pub fn new(block: usize, kind: ModuleKind) -> Self {
        Self { block, kind }
    }

    pub fn attention(block: usize) -> Self {
        Self::new(block, ModuleKind::Attention)
    }

    pub fn ffn(block: usize) -> Self {
        Self::new(block, ModuleKind::Ffn)
    }

    /// Modules of `blocks`, in network order.
    pub fn in_blocks(blocks: std::ops::Range<usize>) -> Vec<ModuleId> {
        blocks
            .flat_map(|b| [ModuleId::attention(b), ModuleId::ffn(b)])
            .collect()
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ModuleKind::Attention => "attn",
            ModuleKind::Ffn => "ffn",
        };
        write!(f, "blocks.{}.{kind}", self.block)
    }
}

impl FromStr for ModuleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Plan(format!("malformed module id `{s}`"));
        let rest = s.strip_prefix("blocks.").ok_or_else(bad)?;
        let (block, kind) = rest.split_once('.').ok_or_else(bad)?;
        let block = block.parse().map_err(|_| bad())?;
        let kind = match kind {
            "attn" => ModuleKind::Attention,
            "ffn" => ModuleKind::Ffn,
            _ => return Err(bad()),
        };
        Ok(Self { block, kind })
    }
}

impl Serialize for ModuleId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModuleId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    InnerChannel,
    Head,
}

/// Where a plan came from; recorded per module in plan.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub schema: String,
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub module_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulePlan {
    /// Kept inner-channel indices, sorted and unique.
    pub kept: Vec<usize>,
    /// Removed inner-channel indices, sorted and unique.
    pub removed: Vec<usize>,
    pub granularity: Granularity,
    /// Kept head ids (attention only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept_heads: Option<Vec<usize>>,
    pub provenance: Provenance,
}

impl ModulePlan {
    /// Plan keeping every channel of a module with `units` inner channels.
    pub fn keep_all(units: usize, granularity: Granularity) -> Self {
        Self {
            kept: (0..units).collect(),
            removed: Vec::new(),
            granularity,
            kept_heads: None,
            provenance: Provenance::default(),
        }
    }

    /// Attention plan from kept head ids.
    pub fn from_heads(kept_heads: &[usize], n_heads: usize, d_head: usize) -> Result<Self> {
        let mut heads = kept_heads.to_vec();
        heads.sort_unstable();
        heads.dedup();
        if heads.len() != kept_heads.len() {
            return Err(Error::Plan("duplicate head id".into()));
        }
        if heads.is_empty() {
            return Err(Error::Plan("plan would remove every head".into()));
        }
        if let Some(&h) = heads.iter().find(|&&h| h >= n_heads) {
            return Err(Error::Plan(format!("head {h} out of range for {n_heads} heads")));
        }
        let channels = |hs: &mut dyn Iterator<Item = usize>| -> Vec<usize> {
            hs.flat_map(|h| h * d_head..(h + 1) * d_head).collect()
        };
        let kept = channels(&mut heads.iter().copied());
        let removed = channels(&mut (0..n_heads).filter(|h| heads.binary_search(h).is_err()));
        Ok(Self {
            kept,
            removed,
            granularity: Granularity::Head,
            kept_heads: Some(heads),
            provenance: Provenance::default(),
        })
    }

    /// FFN plan from kept inner-channel indices.
    pub fn from_channels(kept: &[usize], units: usize) -> Result<Self> {
        let mut k = kept.to_vec();
        k.sort_unstable();
        k.dedup();
        if k.len() != kept.len() {
            return Err(Error::Plan("duplicate channel index".into()));
        }
        if k.is_empty() {
            return Err(Error::Plan("plan would remove every inner channel".into()));
        }
        if let Some(&c) = k.iter().find(|&&c| c >= units) {
            return Err(Error::Plan(format!("channel {c} out of range for {units}")));
        }
        let removed = (0..units).filter(|c| k.binary_search(c).is_err()).collect();
        Ok(Self {
            kept: k,
            removed,
            granularity: Granularity::InnerChannel,
            kept_heads: None,
            provenance: Provenance::default(),
        })
    }

    pub fn is_identity(&self) -> bool {
        self.removed.is_empty()
    }

    /// Checks this plan against a module of `units` original inner channels
    /// (and `d_head` for attention), returning kept head ids for attention.
    pub fn validate(&self, id: ModuleId, units: usize, d_head: usize) -> Result<Option<Vec<usize>>> {
        let err = |msg: String| Err(Error::Plan(format!("{id}: {msg}")));
        if self.kept.is_empty() {
            return err("kept set is empty".into());
        }
        for (name, idx) in [("kept", &self.kept), ("removed", &self.removed)] {
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return err(format!("{name} indices must be sorted and unique"));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= units) {
                return err(format!("{name} index {bad} out of range for {units} inner channels"));
            }
        }
        if self.kept.len() + self.removed.len() != units
            || self.kept.iter().any(|i| self.removed.binary_search(i).is_ok())
        {
            return err("kept and removed must partition the inner channels".into());
        }
        match id.kind {
            ModuleKind::Ffn => {
                if self.granularity != Granularity::InnerChannel {
                    return err("ffn plans use inner_channel granularity".into());
                }
                Ok(None)
            }
            ModuleKind::Attention => {
                if self.granularity != Granularity::Head {
                    return err("attention plans use head granularity".into());
                }
                let mut heads = Vec::new();
                for block in self.kept.chunks(d_head) {
                    let h = block[0] / d_head;
                    let whole = block.len() == d_head
                        && block[0] % d_head == 0
                        && block.iter().enumerate().all(|(o, &c)| c == h * d_head + o);
                    if !whole {
                        return err(format!(
                            "kept channels starting at {} are not a whole head of width {d_head}",
                            block[0]
                        ));
                    }
                    heads.push(h);
                }
                if let Some(recorded) = &self.kept_heads {
                    if recorded != &heads {
                        return err(format!(
                            "kept_heads {recorded:?} disagree with kept channels (heads {heads:?})"
                        ));
                    }
                }
                Ok(Some(heads))
            }
        }
    }
}

/// Per-module kept/removed index sets; serialized as
/// `{module_id: {kept, removed, granularity, provenance}}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PruningPlan {
    pub modules: BTreeMap<ModuleId, ModulePlan>,
}

impl PruningPlan {
    pub fn module(&self, id: &ModuleId) -> Option<&ModulePlan> {
        self.modules.get(id)
    }

    pub fn insert(&mut self, id: ModuleId, plan: ModulePlan) {
        self.modules.insert(id, plan);
    }

    pub fn is_identity(&self) -> bool {
        self.modules.values().all(ModulePlan::is_identity)
    }
}
