use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::law::{bernoulli_mass, PatternLaw};
use super::pattern::TreatmentPattern;
use super::sample::ClusterSample;
use super::weight::UnitProbability;
use crate::error::{Error, Result};

/// Cluster-level treatment assignment law `e(a_c; X_c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropensityModel {
    IndependentBernoulli { probability: UnitProbability },
    /// Probabilities of every pattern in lexicographic order, keyed by cluster id.
    JointTable { tables: BTreeMap<String, Vec<f64>> },
    Unknown,
}

impl PropensityModel {
    pub fn is_known(&self) -> bool {
        !matches!(self, PropensityModel::Unknown)
    }

    /// Per-unit treatment probabilities when assignment is independent within the cluster.
    pub fn unit_probabilities(&self, c: &ClusterSample) -> Result<Option<Vec<f64>>> {
        match self {
            PropensityModel::IndependentBernoulli { probability } => {
                let p = probability.probabilities(c)?;
                if let Some((i, q)) = p.iter().enumerate().find(|(_, q)| **q <= 0.0 || **q >= 1.0) {
                    return Err(Error::PositivityViolation(format!(
                        "unit {i} of cluster `{}` has treatment probability {q}",
                        c.id()
                    )));
                }
                Ok(Some(p))
            }
            PropensityModel::JointTable { .. } => Ok(None),
            PropensityModel::Unknown => Err(Error::PropensityUnavailable),
        }
    }

    pub(crate) fn law(&self, c: &ClusterSample) -> Result<PatternLaw> {
        if let Some(p) = self.unit_probabilities(c)? {
            return Ok(PatternLaw::Products(vec![(1.0, p)]));
        }
        let PropensityModel::JointTable { tables } = self else {
            unreachable!()
        };
        let table = tables
            .get(c.id())
            .ok_or_else(|| Error::InvalidInput(format!("no propensity table for cluster `{}`", c.id())))?;
        let m = c.size();
        if m >= 63 || table.len() as u64 != 1u64 << m {
            return Err(Error::dim(format!(
                "propensity table for cluster `{}` has {} entries, expected 2^{m}",
                c.id(),
                table.len()
            )));
        }
        if let Some(q) = table.iter().find(|q| **q <= 0.0) {
            return Err(Error::PositivityViolation(format!(
                "cluster `{}` has a pattern with probability {q}",
                c.id()
            )));
        }
        let total: f64 = table.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "propensity table for cluster `{}` sums to {total}",
                c.id()
            )));
        }
        Ok(PatternLaw::Dense(table.clone()))
    }

    /// Probability of pattern `a` in cluster `c`.
    pub fn eval(&self, a: &TreatmentPattern, c: &ClusterSample) -> Result<f64> {
        a.check_len(c.size())?;
        if let Some(p) = self.unit_probabilities(c)? {
            return Ok(bernoulli_mass(&p, a.bits()));
        }
        Ok(self.law(c)?.eval(a.bits()))
    }
}

pub fn eval_propensity(e: &PropensityModel, a: &TreatmentPattern, c: &ClusterSample) -> Result<f64> {
    e.eval(a, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::enumerate_patterns;

    fn cluster(m: usize) -> ClusterSample {
        ClusterSample::new("k", vec![vec![0.0]; m], vec![0; m], vec![0.0; m]).unwrap()
    }

    #[test]
    fn independent_halves() {
        let e = PropensityModel::IndependentBernoulli {
            probability: UnitProbability::Constant { p: 0.5 },
        };
        let c = cluster(2);
        let a = TreatmentPattern::new(vec![1, 0]).unwrap();
        assert_eq!(e.eval(&a, &c).unwrap(), 0.25);
        let total: f64 = enumerate_patterns(2, 20).unwrap().iter().map(|a| e.eval(a, &c).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_is_unavailable() {
        let a = TreatmentPattern::new(vec![1]).unwrap();
        assert_eq!(PropensityModel::Unknown.eval(&a, &cluster(1)), Err(Error::PropensityUnavailable));
    }

    #[test]
    fn joint_table_checks() {
        let mut tables = BTreeMap::new();
        tables.insert("k".to_string(), vec![0.1, 0.2, 0.3, 0.4]);
        let e = PropensityModel::JointTable { tables: tables.clone() };
        let a = TreatmentPattern::new(vec![1, 0]).unwrap();
        assert_eq!(e.eval(&a, &cluster(2)).unwrap(), 0.3);
        tables.insert("k".to_string(), vec![0.1, 0.2, 0.3, 0.5]);
        assert!(PropensityModel::JointTable { tables: tables.clone() }.eval(&a, &cluster(2)).is_err());
        tables.insert("k".to_string(), vec![0.0, 0.2, 0.3, 0.5]);
        assert!(matches!(
            PropensityModel::JointTable { tables }.eval(&a, &cluster(2)),
            Err(Error::PositivityViolation(_))
        ));
    }

    #[test]
    fn boundary_probabilities_violate_positivity() {
        let e = PropensityModel::IndependentBernoulli {
            probability: UnitProbability::Constant { p: 1.0 },
        };
        let a = TreatmentPattern::new(vec![1]).unwrap();
        assert!(matches!(e.eval(&a, &cluster(1)), Err(Error::PositivityViolation(_))));
    }
}
