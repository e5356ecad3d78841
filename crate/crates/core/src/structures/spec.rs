use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::exposure::BuiltinExposure;
use super::graph::knn_lists;
use crate::data::ClusterSample;
use crate::error::{Error, Result};

/// Where neighbor lists come from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NeighborSpec {
    /// Nearest units by Euclidean distance over `columns` (all covariates by default).
    #[default]
    Knn,
    KnnColumns { columns: Vec<usize> },
    /// Explicit ordered lists keyed by cluster id.
    Graph { lists: BTreeMap<String, Vec<Vec<usize>>> },
    /// Every other unit of the cluster, in index order.
    Cluster,
}

impl NeighborSpec {
    /// Neighbor lists of every unit, truncated to `k` entries.
    pub fn lists(&self, c: &ClusterSample, k: usize) -> Result<Vec<Vec<usize>>> {
        let m = c.size();
        match self {
            NeighborSpec::Knn => knn_lists(c, k, None),
            NeighborSpec::KnnColumns { columns } => knn_lists(c, k, Some(columns)),
            NeighborSpec::Graph { lists } => {
                let l = lists
                    .get(c.id())
                    .ok_or_else(|| Error::InvalidInput(format!("no neighbor lists for cluster `{}`", c.id())))?;
                if l.len() != m {
                    return Err(Error::dim(format!(
                        "cluster `{}` has {m} units but {} neighbor lists",
                        c.id(),
                        l.len()
                    )));
                }
                l.iter()
                    .enumerate()
                    .map(|(i, row)| {
                        if let Some(&u) = row.iter().find(|&&u| u >= m || u == i) {
                            return Err(Error::InvalidInput(format!(
                                "neighbor {u} of unit {i} in cluster `{}` is invalid",
                                c.id()
                            )));
                        }
                        Ok(row.iter().copied().take(k).collect())
                    })
                    .collect()
            }
            NeighborSpec::Cluster => {
                if m - 1 > k {
                    return Err(Error::InvalidSpec(format!(
                        "cluster `{}` has {} other units, more than the bound {k}",
                        c.id(),
                        m - 1
                    )));
                }
                Ok((0..m).map(|i| (0..m).filter(|&j| j != i).collect()).collect())
            }
        }
    }

    pub fn first_k(&self, c: &ClusterSample, i: usize, k: usize) -> Result<Vec<usize>> {
        if i >= c.size() {
            return Err(Error::dim(format!("unit {i} out of range for cluster of size {}", c.size())));
        }
        Ok(self.lists(c, k)?.swap_remove(i))
    }
}

/// A covariate column, by position or by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

impl ColumnRef {
    pub(crate) fn resolve(&self, names: &[String]) -> Result<usize> {
        match self {
            ColumnRef::Index(j) if *j < names.len() => Ok(*j),
            ColumnRef::Index(j) => Err(Error::InvalidSpec(format!(
                "covariate column {j} out of range for dimension {}",
                names.len()
            ))),
            ColumnRef::Name(n) => names
                .iter()
                .position(|x| x == n)
                .ok_or_else(|| Error::InvalidSpec(format!("unknown covariate `{n}`"))),
        }
    }
}

/// One entry of the per-unit covariate vector used by a tensor structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateTerm {
    Column(ColumnRef),
    ClusterMean(ColumnRef),
    Intercept,
}

/// Serializable description of a low-rank structure or of a linear map between feature spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StructureSpec {
    /// Own-treatment indicators `(1 − a_i, a_i)`.
    NoInterference,
    /// Indicator of the number treated among the first `k` neighbors (plus the unit itself if `include_own`).
    StratifiedCount {
        k: usize,
        #[serde(default)]
        include_own: bool,
        #[serde(default)]
        neighbors: NeighborSpec,
    },
    /// Indicator of the treatment pattern of the first `k` neighbors.
    KnnPattern {
        k: usize,
        #[serde(default)]
        neighbors: NeighborSpec,
    },
    /// Type/status encoding: every unit of type `τ` adds an indicator at `2(τ − 1) + a`.
    /// Types `1..=types` are read from an integer covariate column.
    AdditiveTypes { types: usize, column: ColumnRef },
    /// Own treatment plus low/medium/high bins of the treated count among neighbors
    /// (order 1) and also among neighbors of neighbors (order 2).
    CoarsenedCount {
        order: u8,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<usize>,
        /// One `[t1, t2]` pair per order: count ≤ t1 is low, ≤ t2 medium, otherwise high.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        thresholds: Option<Vec<[f64; 2]>>,
        #[serde(default)]
        neighbors: NeighborSpec,
    },
    FromExposureMapping { mapping: BuiltinExposure },
    /// Rows of `inner` multiplied by the linear map `outer`.
    Compose {
        outer: Box<StructureSpec>,
        inner: Box<StructureSpec>,
    },
    /// `φ(a) ⊗ z_ci` with `z_ci` assembled from covariate terms.
    TensorWithCovariates {
        inner: Box<StructureSpec>,
        columns: Vec<CovariateTerm>,
    },
    /// Map from the `2^k` neighbor-pattern slots to `k` additive `(a_r = 0, a_r = 1)` pairs.
    AdditiveSlots { k: usize },
    /// Map from the `2^k` neighbor-pattern slots to the `k + 1` treated-count slots.
    CountSlots { k: usize },
    /// Explicit linear map, one inner row per input slot.
    Matrix { rows: Vec<Vec<f64>> },
}

impl StructureSpec {
    pub fn tensor(inner: StructureSpec, columns: Vec<CovariateTerm>) -> Self {
        StructureSpec::TensorWithCovariates {
            inner: Box::new(inner),
            columns,
        }
    }

    pub fn compose(outer: StructureSpec, inner: StructureSpec) -> Self {
        StructureSpec::Compose {
            outer: Box::new(outer),
            inner: Box::new(inner),
        }
    }

    /// Short human-readable name.
    pub fn label(&self) -> String {
        match self {
            StructureSpec::NoInterference => "no_interference".into(),
            StructureSpec::StratifiedCount { k, include_own, .. } => {
                format!("stratified_count(k={k}{})", if *include_own { ",own" } else { "" })
            }
            StructureSpec::KnnPattern { k, .. } => format!("knn_pattern(k={k})"),
            StructureSpec::AdditiveTypes { types, .. } => format!("additive_types(s={types})"),
            StructureSpec::CoarsenedCount { order, .. } => format!("coarsened_count(order={order})"),
            StructureSpec::FromExposureMapping { mapping } => format!("exposure({mapping:?})").to_lowercase(),
            StructureSpec::Compose { outer, inner } => format!("{}∘{}", outer.label(), inner.label()),
            StructureSpec::TensorWithCovariates { inner, columns } => {
                format!("{}⊗x[{}]", inner.label(), columns.len())
            }
            StructureSpec::AdditiveSlots { k } => format!("additive_slots(k={k})"),
            StructureSpec::CountSlots { k } => format!("count_slots(k={k})"),
            StructureSpec::Matrix { rows } => format!("matrix({}x{})", rows.len(), rows.first().map_or(0, Vec::len)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shapes() {
        let s = StructureSpec::tensor(
            StructureSpec::KnnPattern {
                k: 2,
                neighbors: NeighborSpec::Knn,
            },
            vec![
                CovariateTerm::Column(ColumnRef::Index(0)),
                CovariateTerm::ClusterMean(ColumnRef::Name("x4".into())),
                CovariateTerm::Intercept,
            ],
        );
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(
            j,
            r#"{"kind":"tensor_with_covariates","inner":{"kind":"knn_pattern","k":2,"neighbors":{"kind":"knn"}},"columns":[{"column":0},{"cluster_mean":"x4"},"intercept"]}"#
        );
        assert_eq!(serde_json::from_str::<StructureSpec>(&j).unwrap(), s);
        let short: StructureSpec = serde_json::from_str(r#"{"kind":"stratified_count","k":3}"#).unwrap();
        assert_eq!(
            short,
            StructureSpec::StratifiedCount {
                k: 3,
                include_own: false,
                neighbors: NeighborSpec::Knn
            }
        );
    }
}
