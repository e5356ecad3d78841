use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sampled cluster: covariates, treatments and outcomes of its units.
///
/// Covariates are stored row-major, one row of width `p` per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClusterRecord", into = "ClusterRecord")]
pub struct ClusterSample {
    cluster_id: String,
    covariates: Vec<f64>,
    p: usize,
    treatments: Vec<u8>,
    outcomes: Vec<f64>,
}

impl ClusterSample {
    /// Builds a cluster from per-unit covariate rows.
    pub fn new(
        cluster_id: impl Into<String>,
        covariates: Vec<Vec<f64>>,
        treatments: Vec<u8>,
        outcomes: Vec<f64>,
    ) -> Result<Self> {
        let m = treatments.len();
        let p = covariates.first().map_or(0, Vec::len);
        if covariates.len() != m {
            return Err(Error::dim(format!(
                "{} covariate rows for {} treatments",
                covariates.len(),
                m
            )));
        }
        if covariates.iter().any(|row| row.len() != p) {
            return Err(Error::dim("covariate rows have unequal widths"));
        }
        Self::from_flat(cluster_id, covariates.concat(), p, treatments, outcomes)
    }

    pub fn from_flat(
        cluster_id: impl Into<String>,
        covariates: Vec<f64>,
        p: usize,
        treatments: Vec<u8>,
        outcomes: Vec<f64>,
    ) -> Result<Self> {
        let m = treatments.len();
        if m == 0 {
            return Err(Error::InvalidInput("a cluster needs at least one unit".into()));
        }
        if outcomes.len() != m {
            return Err(Error::dim(format!("{} outcomes for {} treatments", outcomes.len(), m)));
        }
        if covariates.len() != m * p {
            return Err(Error::dim(format!(
                "covariate buffer of length {} does not hold {m} rows of width {p}",
                covariates.len()
            )));
        }
        if let Some(bad) = treatments.iter().find(|&&t| t > 1) {
            return Err(Error::InvalidInput(format!("treatment value {bad} is not binary")));
        }
        Ok(Self {
            cluster_id: cluster_id.into(),
            covariates,
            p,
            treatments,
            outcomes,
        })
    }

    pub fn id(&self) -> &str {
        &self.cluster_id
    }

    /// Number of units, `M_c`.
    pub fn size(&self) -> usize {
        self.treatments.len()
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn covariate_row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.p..(i + 1) * self.p]
    }

    pub fn covariate(&self, i: usize, column: usize) -> f64 {
        self.covariates[i * self.p + column]
    }

    /// Cluster mean of one covariate column.
    pub fn column_mean(&self, column: usize) -> f64 {
        (0..self.size()).map(|i| self.covariate(i, column)).sum::<f64>() / self.size() as f64
    }

    pub fn treatments(&self) -> &[u8] {
        &self.treatments
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn with_outcomes(mut self, outcomes: Vec<f64>) -> Result<Self> {
        if outcomes.len() != self.size() {
            return Err(Error::dim("outcome vector length differs from cluster size"));
        }
        self.outcomes = outcomes;
        Ok(self)
    }

    pub fn with_treatments(mut self, treatments: Vec<u8>) -> Result<Self> {
        if treatments.len() != self.size() || treatments.iter().any(|&t| t > 1) {
            return Err(Error::dim("treatments must be a binary vector of the cluster size"));
        }
        self.treatments = treatments;
        Ok(self)
    }
}

/// Serialized form of a cluster.
#[derive(Serialize, Deserialize)]
struct ClusterRecord {
    cluster_id: String,
    covariates: Vec<Vec<f64>>,
    treatments: Vec<u8>,
    outcomes: Vec<f64>,
}

impl TryFrom<ClusterRecord> for ClusterSample {
    type Error = Error;

    fn try_from(r: ClusterRecord) -> Result<Self> {
        ClusterSample::new(r.cluster_id, r.covariates, r.treatments, r.outcomes)
    }
}

impl From<ClusterSample> for ClusterRecord {
    fn from(c: ClusterSample) -> Self {
        let covariates = (0..c.size()).map(|i| c.covariate_row(i).to_vec()).collect();
        ClusterRecord {
            cluster_id: c.cluster_id,
            covariates,
            treatments: c.treatments,
            outcomes: c.outcomes,
        }
    }
}

/// An ordered collection of i.i.d. clusters sharing a covariate dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DatasetRecord", into = "DatasetRecord")]
pub struct Dataset {
    clusters: Vec<ClusterSample>,
    p: usize,
    covariate_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct DatasetRecord {
    #[serde(default)]
    covariate_names: Vec<String>,
    clusters: Vec<ClusterSample>,
}

impl TryFrom<DatasetRecord> for Dataset {
    type Error = Error;

    fn try_from(r: DatasetRecord) -> Result<Self> {
        if r.covariate_names.is_empty() {
            Dataset::new(r.clusters)
        } else {
            Dataset::with_names(r.clusters, r.covariate_names)
        }
    }
}

impl From<Dataset> for DatasetRecord {
    fn from(d: Dataset) -> Self {
        DatasetRecord {
            covariate_names: d.covariate_names,
            clusters: d.clusters,
        }
    }
}

impl Dataset {
    /// Covariates are named `x1..xp`.
    pub fn new(clusters: Vec<ClusterSample>) -> Result<Self> {
        let p = clusters.first().map_or(0, ClusterSample::dim);
        let names = (1..=p).map(|j| format!("x{j}")).collect();
        Self::with_names(clusters, names)
    }

    pub fn with_names(clusters: Vec<ClusterSample>, covariate_names: Vec<String>) -> Result<Self> {
        let Some(first) = clusters.first() else {
            return Err(Error::InvalidInput("a dataset needs at least one cluster".into()));
        };
        let p = first.dim();
        if let Some(c) = clusters.iter().find(|c| c.dim() != p) {
            return Err(Error::dim(format!(
                "cluster `{}` has covariate dimension {} but the dataset uses {p}",
                c.id(),
                c.dim()
            )));
        }
        if covariate_names.len() != p {
            return Err(Error::dim(format!("{} covariate names for dimension {p}", covariate_names.len())));
        }
        Ok(Self {
            clusters,
            p,
            covariate_names,
        })
    }

    pub fn clusters(&self) -> &[ClusterSample] {
        &self.clusters
    }

    /// Number of clusters, `n`.
    pub fn n(&self) -> usize {
        self.clusters.len()
    }

    /// Total number of units, `M`.
    pub fn total_units(&self) -> usize {
        self.clusters.iter().map(ClusterSample::size).sum()
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Offset of each cluster's first unit in the stacked unit order.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.clusters
            .iter()
            .map(|c| {
                let o = acc;
                acc += c.size();
                o
            })
            .collect()
    }

    /// All outcomes stacked cluster by cluster.
    pub fn outcomes(&self) -> Vec<f64> {
        self.clusters.iter().flat_map(|c| c.outcomes().iter().copied()).collect()
    }

    /// Copy of the dataset with replaced outcomes (stacked order).
    pub fn with_outcomes(&self, y: &[f64]) -> Result<Self> {
        if y.len() != self.total_units() {
            return Err(Error::dim("outcome vector length differs from total units"));
        }
        let mut start = 0;
        let clusters = self
            .clusters
            .iter()
            .map(|c| {
                let m = c.size();
                let next = c.clone().with_outcomes(y[start..start + m].to_vec());
                start += m;
                next
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::with_names(clusters, self.covariate_names.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_ragged_clusters() {
        let err = ClusterSample::new("a", vec![vec![1.0], vec![2.0]], vec![1], vec![0.0]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
        assert!(ClusterSample::new("a", vec![], vec![], vec![]).is_err());
        assert!(ClusterSample::new("a", vec![vec![1.0]], vec![2], vec![0.0]).is_err());
    }

    #[test]
    fn dataset_requires_shared_dimension() {
        let a = ClusterSample::new("a", vec![vec![1.0]], vec![1], vec![0.0]).unwrap();
        let b = ClusterSample::new("b", vec![vec![1.0, 2.0]], vec![1], vec![0.0]).unwrap();
        assert!(Dataset::new(vec![a.clone(), b]).is_err());
        assert!(Dataset::new(vec![]).is_err());
        let d = Dataset::new(vec![a.clone(), a]).unwrap();
        assert_eq!((d.n(), d.total_units(), d.dim()), (2, 2, 1));
        assert_eq!(d.offsets(), vec![0, 1]);
    }

    #[test]
    fn json_shape_round_trips() {
        let a = ClusterSample::new("a", vec![vec![1.0, 0.5], vec![2.0, -1.0]], vec![1, 0], vec![3.0, 4.0])
            .unwrap();
        let d = Dataset::new(vec![a]).unwrap();
        let s = serde_json::to_string(&d).unwrap();
        assert!(s.contains("\"covariates\":[[1.0,0.5],[2.0,-1.0]]"));
        let back: Dataset = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
    }
}
