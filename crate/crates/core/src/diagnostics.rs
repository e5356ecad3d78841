//! Raw, relative and omnibus covariate imbalance of balancing weights.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::law::PatternLaw;
use crate::data::{CounterfactualWeight, Dataset, DEFAULT_PATTERN_CAP};
use crate::estimators::EstimateReport;
use crate::error::{Error, Result};
use crate::structures::LowRankStructure;

/// Which pattern sum defines the per-cluster scale quantity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleWeighting {
    /// Unweighted sum over all `2^{M_c}` patterns.
    #[default]
    AllPatterns,
    /// Sum weighted by the counterfactual weight `f`.
    Policy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImbalanceOptions {
    pub threshold: f64,
    pub scale: ScaleWeighting,
    pub cap: usize,
}

impl Default for ImbalanceOptions {
    fn default() -> Self {
        Self {
            threshold: 0.10,
            scale: ScaleWeighting::AllPatterns,
            cap: DEFAULT_PATTERN_CAP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryState {
    Ok,
    /// Zero scale: the entry cannot be normalized and is left out of the omnibus measure.
    ScaleDegenerate,
}

/// One (covariate, effective treatment) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceEntry {
    pub covariate: String,
    pub effective_treatment: usize,
    pub nu: f64,
    pub sigma: f64,
    pub nu_star: Option<f64>,
    pub state: EntryState,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub covariates: Vec<String>,
    /// Number of effective treatments `ℓ`.
    pub effective_treatments: usize,
    /// `ν`, laid out block by block: entry `j·p + t`.
    pub nu: Vec<f64>,
    /// Covariate-major cells, `p × ℓ`.
    pub entries: Vec<ImbalanceEntry>,
    /// `ν̄_t`; absent when every cell of the covariate is degenerate.
    pub omnibus: Vec<Option<f64>>,
    /// Units whose observed feature block `j` is active.
    pub m_counts: Vec<usize>,
    pub threshold: f64,
}

impl ImbalanceReport {
    pub fn entry(&self, t: usize, j: usize) -> &ImbalanceEntry {
        &self.entries[t * self.effective_treatments + j]
    }

    pub fn flagged(&self) -> impl Iterator<Item = &ImbalanceEntry> {
        self.entries.iter().filter(|e| e.flagged)
    }
}

/// Whether a relative imbalance exceeds the threshold.
pub fn exceeds(nu_star: f64, threshold: f64) -> bool {
    nu_star.abs() > threshold
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Imbalance of a balancing fit under a structure `φ = ψ ⊗ z` with `ℓ` effective treatments and `p` covariate terms.
pub fn imbalance_report(
    data: &Dataset,
    s: &LowRankStructure,
    f: &CounterfactualWeight,
    fit: &EstimateReport,
    opts: &ImbalanceOptions,
) -> Result<ImbalanceReport> {
    let (l, p) = s.tensor_layout().ok_or_else(|| {
        Error::InvalidSpec(format!(
            "`{}` is not a covariate tensor with a fixed number of effective treatments",
            s.label()
        ))
    })?;
    let d = l * p;
    let nu = fit
        .imbalance
        .clone()
        .ok_or_else(|| Error::InvalidInput("the fit carries no imbalance vector".into()))?;
    if nu.len() != d {
        return Err(Error::dim(format!("imbalance of length {} for a structure of width {d}", nu.len())));
    }
    let mut per_cluster = Vec::with_capacity(data.n());
    let mut m_counts = vec![0usize; l];
    for c in data.clusters() {
        let m = c.size();
        let feats = s.prepare(c)?;
        let v: DVector<f64> = match opts.scale {
            ScaleWeighting::AllPatterns => {
                let uniform = PatternLaw::Products(vec![(1.0, vec![0.5; m])]);
                feats.expected_sum(&uniform, d, opts.cap)? * (2f64.powi(m as i32) / m as f64)
            }
            ScaleWeighting::Policy => feats.expected_sum(&f.law(c, opts.cap)?, d, opts.cap)? / m as f64,
        };
        per_cluster.push(v);
        for u in feats.units() {
            let inner = u.eval_inner(c.treatments()).expect("tensor rows end with a Kronecker step");
            for (j, x) in inner.iter().enumerate() {
                if *x != 0.0 {
                    m_counts[j] += 1;
                }
            }
        }
    }
    let labels = s.covariate_labels().map(<[String]>::to_vec).unwrap_or_default();
    let mut entries = Vec::with_capacity(d);
    let mut omnibus = Vec::with_capacity(p);
    for (t, label) in labels.iter().enumerate() {
        let mut num = 0.0;
        let mut den = 0usize;
        for j in 0..l {
            let k = j * p + t;
            let column: Vec<f64> = per_cluster.iter().map(|v| v[k]).collect();
            let sigma = sample_sd(&column);
            let (nu_star, state) = if sigma > 0.0 {
                (Some(nu[k] / sigma), EntryState::Ok)
            } else {
                (None, EntryState::ScaleDegenerate)
            };
            if let Some(r) = nu_star {
                num += r * m_counts[j] as f64;
                den += m_counts[j];
            }
            entries.push(ImbalanceEntry {
                covariate: label.clone(),
                effective_treatment: j,
                nu: nu[k],
                sigma,
                nu_star,
                state,
                flagged: nu_star.is_some_and(|r| exceeds(r, opts.threshold)),
            });
        }
        omnibus.push((den > 0).then(|| num / den as f64));
    }
    Ok(ImbalanceReport {
        covariates: labels,
        effective_treatments: l,
        nu,
        entries,
        omnibus,
        m_counts,
        threshold: opts.threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClusterSample;
    use crate::estimators::balancing_fit;
    use crate::structures::{build_structure, ColumnRef, CovariateTerm, StructureSpec};

    fn cluster(id: &str, x: &[f64], a: &[u8]) -> ClusterSample {
        let m = a.len();
        ClusterSample::new(id, x.iter().map(|v| vec![*v]).collect(), a.to_vec(), vec![1.0; m]).unwrap()
    }

    fn tensor(d: &Dataset) -> LowRankStructure {
        build_structure(
            &StructureSpec::tensor(
                StructureSpec::NoInterference,
                vec![CovariateTerm::Intercept, CovariateTerm::Column(ColumnRef::Index(0))],
            ),
            d,
        )
        .unwrap()
    }

    #[test]
    fn threshold_is_strict() {
        assert!(exceeds(0.11, 0.10));
        assert!(exceeds(-0.11, 0.10));
        assert!(!exceeds(0.10, 0.10));
    }

    #[test]
    fn feasible_fit_has_no_flags() {
        let d = Dataset::new(vec![
            cluster("a", &[0.5, 1.0], &[1, 0]),
            cluster("b", &[-0.5, 2.0, 0.3], &[0, 1, 1]),
            cluster("c", &[1.5], &[1]),
        ])
        .unwrap();
        let s = tensor(&d);
        let f = CounterfactualWeight::Gate;
        let fit = balancing_fit(&d, &s, &f).unwrap();
        assert!(fit.feasible());
        let r = imbalance_report(&d, &s, &f, &fit, &Default::default()).unwrap();
        assert_eq!(r.flagged().count(), 0);
        assert!(r.nu.iter().all(|v| v.abs() < 1e-10));
        assert_eq!(r.m_counts.iter().sum::<usize>(), 6);
        assert_eq!(r.covariates, vec!["intercept".to_string(), "x1".to_string()]);
        // intercept scale per cluster is 2^{M_c - 1}
        let e = r.entry(0, 1);
        let want = sample_sd(&[2.0, 4.0, 1.0]);
        assert!((e.sigma - want).abs() < 1e-12);
    }

    #[test]
    fn infeasible_two_cluster_case() {
        let d = Dataset::new(vec![cluster("a", &[1.0], &[1]), cluster("b", &[2.0], &[1])]).unwrap();
        let s = tensor(&d);
        let f = CounterfactualWeight::Gate;
        let fit = balancing_fit(&d, &s, &f).unwrap();
        assert!(!fit.feasible());
        let r = imbalance_report(&d, &s, &f, &fit, &Default::default()).unwrap();
        // t = Σ_c (−1, −x_c, 1, x_c); Φ rows (0, 0, 1, x_c); the control block cannot be matched
        let t = [-2.0, -3.0, 2.0, 3.0];
        let w = &fit.weights.weights;
        let phi_t_w = [0.0, 0.0, w[0] + w[1], w[0] + 2.0 * w[1]];
        for k in 0..4 {
            assert!((r.nu[k] - (phi_t_w[k] - t[k]) / 2.0).abs() < 1e-12);
        }
        assert_eq!(r.m_counts, vec![0, 2]);
        // every cluster has the same intercept scale, so that entry is degenerate
        assert_eq!(r.entry(0, 0).state, EntryState::ScaleDegenerate);
        assert_eq!(r.entry(1, 0).state, EntryState::Ok);
        assert!(r.entry(1, 0).flagged);
        assert_eq!(r.omnibus[0], None);
    }
}
