use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use super::features::Block;
use super::spec::NeighborSpec;
use crate::data::{bit_of, check_cap, ClusterSample, TreatmentPattern};
use crate::error::{Error, Result};

/// A discrete exposure: each unit's outcome depends on the cluster pattern only through a label.
pub trait ExposureMapping: Debug + Send + Sync {
    /// Number of labels available to unit `i`.
    fn classes(&self, c: &ClusterSample, i: usize) -> Result<usize>;

    /// Label of unit `i` under pattern `a`, in `0..classes(c, i)`.
    fn label(&self, c: &ClusterSample, i: usize, a: &TreatmentPattern) -> Result<usize>;

    /// Units whose treatments can change the label; `None` means every unit.
    fn dependencies(&self, _c: &ClusterSample, _i: usize) -> Result<Option<Vec<usize>>> {
        Ok(None)
    }

    /// Label count when it is the same for every unit of every cluster.
    fn fixed_classes(&self) -> Option<usize> {
        None
    }

    /// Lets built-in mappings use closed-form class sums.
    #[doc(hidden)]
    fn as_builtin(&self) -> Option<&BuiltinExposure> {
        None
    }
}

/// Exposure mappings available from specification files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BuiltinExposure {
    OwnTreatment,
    /// Number of treated among the first `k` neighbors.
    NeighborCount {
        k: usize,
        #[serde(default)]
        neighbors: NeighborSpec,
    },
    /// Treatment pattern of the first `k` neighbors.
    NeighborPattern {
        k: usize,
        #[serde(default)]
        neighbors: NeighborSpec,
    },
    Constant,
    /// Every cluster pattern is its own label.
    Identity,
}

impl BuiltinExposure {
    /// The feature block realizing this mapping for unit `i`.
    pub(crate) fn block(&self, c: &ClusterSample, i: usize, cap: usize) -> Result<Block> {
        let m = c.size();
        Ok(match self {
            BuiltinExposure::OwnTreatment => Block::Count {
                deps: vec![i],
                bins: vec![0, 1],
                width: 2,
            },
            BuiltinExposure::NeighborCount { k, neighbors } => {
                let deps = neighbors.first_k(c, i, *k)?;
                Block::Count {
                    bins: (0..=deps.len() as u32).collect(),
                    deps,
                    width: k + 1,
                }
            }
            BuiltinExposure::NeighborPattern { k, neighbors } => pattern_block(neighbors.first_k(c, i, *k)?, *k, cap)?,
            BuiltinExposure::Constant => Block::Count {
                deps: vec![],
                bins: vec![0],
                width: 1,
            },
            BuiltinExposure::Identity => {
                check_cap(m, cap)?;
                Block::Pattern {
                    deps: (0..m).collect(),
                    slots: (0..1u32 << m).collect(),
                    width: 1 << m,
                }
            }
        })
    }
}

/// One-hot over the `2^k` patterns of a neighbor list; absent neighbors read as untreated.
pub(crate) fn pattern_block(deps: Vec<usize>, k: usize, cap: usize) -> Result<Block> {
    check_cap(k, cap)?;
    let shift = k - deps.len();
    Ok(Block::Pattern {
        slots: (0..1u32 << deps.len()).map(|j| j << shift).collect(),
        deps,
        width: 1 << k,
    })
}

impl ExposureMapping for BuiltinExposure {
    fn classes(&self, c: &ClusterSample, _i: usize) -> Result<usize> {
        Ok(match self {
            BuiltinExposure::OwnTreatment => 2,
            BuiltinExposure::NeighborCount { k, .. } => k + 1,
            BuiltinExposure::NeighborPattern { k, .. } => 1 << k,
            BuiltinExposure::Constant => 1,
            BuiltinExposure::Identity => {
                check_cap(c.size(), 62)?;
                1 << c.size()
            }
        })
    }

    fn label(&self, c: &ClusterSample, i: usize, a: &TreatmentPattern) -> Result<usize> {
        a.check_len(c.size())?;
        if i >= c.size() {
            return Err(Error::dim(format!("unit {i} out of range for cluster of size {}", c.size())));
        }
        let bits = a.bits();
        Ok(match self {
            BuiltinExposure::OwnTreatment => bits[i] as usize,
            BuiltinExposure::NeighborCount { k, neighbors } => {
                neighbors.first_k(c, i, *k)?.iter().map(|&u| bits[u] as usize).sum()
            }
            BuiltinExposure::NeighborPattern { k, neighbors } => {
                let deps = neighbors.first_k(c, i, *k)?;
                let j = deps.iter().fold(0usize, |acc, &u| (acc << 1) | bits[u] as usize);
                j << (k - deps.len())
            }
            BuiltinExposure::Constant => 0,
            BuiltinExposure::Identity => a.index() as usize,
        })
    }

    fn dependencies(&self, c: &ClusterSample, i: usize) -> Result<Option<Vec<usize>>> {
        Ok(match self {
            BuiltinExposure::OwnTreatment => Some(vec![i]),
            BuiltinExposure::NeighborCount { k, neighbors } | BuiltinExposure::NeighborPattern { k, neighbors } => {
                Some(neighbors.first_k(c, i, *k)?)
            }
            BuiltinExposure::Constant => Some(vec![]),
            BuiltinExposure::Identity => None,
        })
    }

    fn fixed_classes(&self) -> Option<usize> {
        match self {
            BuiltinExposure::OwnTreatment => Some(2),
            BuiltinExposure::NeighborCount { k, .. } => Some(k + 1),
            BuiltinExposure::NeighborPattern { k, .. } => Some(1 << k),
            BuiltinExposure::Constant => Some(1),
            BuiltinExposure::Identity => None,
        }
    }

    fn as_builtin(&self) -> Option<&BuiltinExposure> {
        Some(self)
    }
}

/// Block of unit `i` under any mapping.
pub(crate) fn mapping_block(map: &dyn ExposureMapping, c: &ClusterSample, i: usize, cap: usize) -> Result<Block> {
    match map.as_builtin() {
        Some(b) => b.block(c, i, cap),
        None => generic_block(map, c, i, cap),
    }
}

/// Builds the one-hot block of an arbitrary mapping by labelling every sub-pattern of its dependencies.
pub(crate) fn generic_block(map: &dyn ExposureMapping, c: &ClusterSample, i: usize, cap: usize) -> Result<Block> {
    let m = c.size();
    let deps = map.dependencies(c, i)?.unwrap_or_else(|| (0..m).collect());
    check_cap(deps.len(), cap)?;
    let width = map.classes(c, i)?;
    let k = deps.len();
    let mut slots = Vec::with_capacity(1 << k);
    let mut bits = vec![0u8; m];
    for j in 0..1u64 << k {
        for (r, &u) in deps.iter().enumerate() {
            bits[u] = bit_of(j, k, r);
        }
        let label = map.label(c, i, &TreatmentPattern::new(bits.clone())?)?;
        if label >= width {
            return Err(Error::InvalidSpec(format!("exposure label {label} exceeds class count {width}")));
        }
        slots.push(label as u32);
    }
    Ok(Block::Pattern { deps, slots, width })
}
