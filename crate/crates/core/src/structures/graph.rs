use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{ClusterSample, Dataset};
use crate::error::{Error, Result};

/// Ordered within-cluster neighbor lists, keyed by cluster id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborGraph {
    pub k: usize,
    pub lists: BTreeMap<String, Vec<Vec<usize>>>,
}

impl NeighborGraph {
    pub fn neighbors(&self, cluster_id: &str) -> Option<&[Vec<usize>]> {
        self.lists.get(cluster_id).map(Vec::as_slice)
    }
}

/// The `min(k, M_c − 1)` nearest units of every unit by Euclidean distance
/// over `columns` (all columns when `None`); ties go to the lower index.
pub fn knn_lists(c: &ClusterSample, k: usize, columns: Option<&[usize]>) -> Result<Vec<Vec<usize>>> {
    let all: Vec<usize> = (0..c.dim()).collect();
    let cols = columns.unwrap_or(&all);
    if let Some(&j) = cols.iter().find(|&&j| j >= c.dim()) {
        return Err(Error::dim(format!("distance column {j} out of range for dimension {}", c.dim())));
    }
    let m = c.size();
    let mut lists = Vec::with_capacity(m);
    for i in 0..m {
        let mut others: Vec<(f64, usize)> = (0..m)
            .filter(|&j| j != i)
            .map(|j| {
                let d2: f64 = cols.iter().map(|&col| (c.covariate(i, col) - c.covariate(j, col)).powi(2)).sum();
                (d2, j)
            })
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        lists.push(others.into_iter().take(k).map(|(_, j)| j).collect());
    }
    Ok(lists)
}

/// k-nearest-neighbor graph of every cluster in a dataset.
pub fn knn_graph(data: &Dataset, k: usize, columns: Option<&[usize]>) -> Result<NeighborGraph> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let mut lists = BTreeMap::new();
    for c in data.clusters() {
        if lists.insert(c.id().to_string(), knn_lists(c, k, columns)?).is_some() {
            return Err(Error::InvalidInput(format!("cluster id `{}` appears twice", c.id())));
        }
    }
    Ok(NeighborGraph { k, lists })
}

/// Units at distance exactly two: neighbors of neighbors, minus the unit and its neighbors.
pub fn second_order(lists: &[Vec<usize>]) -> Vec<Vec<usize>> {
    lists
        .iter()
        .enumerate()
        .map(|(i, first)| {
            let mut out: Vec<usize> = first
                .iter()
                .flat_map(|&j| lists[j].iter().copied())
                .filter(|&u| u != i && !first.contains(&u))
                .collect();
            out.sort_unstable();
            out.dedup();
            out
        })
        .collect()
}
