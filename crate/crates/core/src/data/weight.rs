use serde::{Deserialize, Serialize};

use super::law::PatternLaw;
use super::pattern::TreatmentPattern;
use super::sample::ClusterSample;
use crate::error::{Error, Result};
use crate::stats::normal_cdf;

/// Per-unit treatment probability as a function of the cluster covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UnitProbability {
    Constant { p: f64 },
    /// Probability read from a covariate column.
    Column { column: usize },
    /// `Φ((1/√d) Σ_j X̄_{c·j} + κ X̄_{ci·})` over the chosen columns (all by default).
    Probit {
        kappa: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        columns: Option<Vec<usize>>,
    },
    Logistic { intercept: f64, coefficients: Vec<f64> },
}

impl UnitProbability {
    pub fn probabilities(&self, c: &ClusterSample) -> Result<Vec<f64>> {
        let m = c.size();
        let probs: Vec<f64> = match self {
            UnitProbability::Constant { p } => vec![*p; m],
            UnitProbability::Column { column } => {
                check_column(c, *column)?;
                (0..m).map(|i| c.covariate(i, *column)).collect()
            }
            UnitProbability::Probit { kappa, columns } => {
                let cols: Vec<usize> = match columns {
                    Some(cols) => cols.clone(),
                    None => (0..c.dim()).collect(),
                };
                if cols.is_empty() {
                    return Err(Error::InvalidInput("probit probability needs at least one column".into()));
                }
                for &j in &cols {
                    check_column(c, j)?;
                }
                let d = cols.len() as f64;
                let cluster_part = cols.iter().map(|&j| c.column_mean(j)).sum::<f64>() / d.sqrt();
                (0..m)
                    .map(|i| {
                        let unit_mean = cols.iter().map(|&j| c.covariate(i, j)).sum::<f64>() / d;
                        normal_cdf(cluster_part + kappa * unit_mean)
                    })
                    .collect()
            }
            UnitProbability::Logistic { intercept, coefficients } => {
                if coefficients.len() != c.dim() {
                    return Err(Error::dim(format!(
                        "{} logistic coefficients for covariate dimension {}",
                        coefficients.len(),
                        c.dim()
                    )));
                }
                (0..m)
                    .map(|i| {
                        let eta = intercept
                            + c.covariate_row(i).iter().zip(coefficients).map(|(x, b)| x * b).sum::<f64>();
                        1.0 / (1.0 + (-eta).exp())
                    })
                    .collect()
            }
        };
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidInput(format!("unit probability {p} outside [0, 1]")));
        }
        Ok(probs)
    }
}

fn check_column(c: &ClusterSample, column: usize) -> Result<()> {
    if column >= c.dim() {
        return Err(Error::dim(format!("covariate column {column} out of range for dimension {}", c.dim())));
    }
    Ok(())
}

/// A pattern with an attached weight, as written in specification files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternEntry {
    pub pattern: TreatmentPattern,
    pub weight: f64,
}

/// A distribution over the patterns of a cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Intervention {
    /// Units treated independently.
    IndependentBernoulli { probability: UnitProbability },
    /// Exactly `count` units treated, chosen uniformly at random.
    UniformSelection { count: usize },
    /// Explicit distribution; applies to clusters whose size matches the patterns.
    Table { entries: Vec<PatternEntry> },
}

impl Intervention {
    /// Every pattern equally likely.
    pub fn uniform() -> Self {
        Intervention::IndependentBernoulli {
            probability: UnitProbability::Constant { p: 0.5 },
        }
    }

    pub(crate) fn law(&self, c: &ClusterSample, cap: usize) -> Result<PatternLaw> {
        let m = c.size();
        match self {
            Intervention::IndependentBernoulli { probability } => {
                Ok(PatternLaw::Products(vec![(1.0, probability.probabilities(c)?)]))
            }
            Intervention::UniformSelection { count } => {
                if *count > m {
                    return Err(Error::InvalidInput(format!(
                        "cannot select {count} units in cluster `{}` of size {m}",
                        c.id()
                    )));
                }
                let total = binomial(m, *count);
                if total > (1u64 << cap.min(62)) as f64 {
                    return Err(Error::CapExceeded { size: m, cap });
                }
                let w = 1.0 / total;
                Ok(PatternLaw::Sparse(
                    combinations(m, *count).into_iter().map(|p| (p, w)).collect(),
                ))
            }
            Intervention::Table { entries } => {
                let law = table_law(entries, c)?;
                let total = law.total();
                if (total - 1.0).abs() > 1e-10 || entries.iter().any(|e| !(0.0..=1.0).contains(&e.weight)) {
                    return Err(Error::InvalidInput(format!(
                        "intervention table for cluster `{}` must hold probabilities summing to 1 (got {total})",
                        c.id()
                    )));
                }
                Ok(law)
            }
        }
    }
}

/// Chooses a fixed set of units to treat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selector {
    Units { units: Vec<usize> },
    /// The `count` units with the largest (or smallest) value of a covariate; ties go to the lower index.
    TopByCovariate {
        column: usize,
        count: usize,
        #[serde(default)]
        lowest: bool,
    },
}

impl Selector {
    pub fn select(&self, c: &ClusterSample) -> Result<TreatmentPattern> {
        let m = c.size();
        let mut bits = vec![0u8; m];
        match self {
            Selector::Units { units } => {
                for &u in units {
                    if u >= m {
                        return Err(Error::dim(format!("unit {u} out of range for cluster of size {m}")));
                    }
                    bits[u] = 1;
                }
            }
            Selector::TopByCovariate { column, count, lowest } => {
                check_column(c, *column)?;
                let mut order: Vec<usize> = (0..m).collect();
                order.sort_by(|&a, &b| {
                    let (xa, xb) = (c.covariate(a, *column), c.covariate(b, *column));
                    let ord = if *lowest { xa.total_cmp(&xb) } else { xb.total_cmp(&xa) };
                    ord.then(a.cmp(&b))
                });
                for &u in order.iter().take(*count) {
                    bits[u] = 1;
                }
            }
        }
        TreatmentPattern::new(bits)
    }
}

/// The function `f(a_c, X_c)` defining the target estimand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CounterfactualWeight {
    /// All-treated minus all-control.
    Gate,
    StochasticIntervention { intervention: Intervention },
    /// Own-treatment contrast averaged against a base intervention.
    DirectEffect { base: Intervention },
    DeterministicTarget { selector: Selector },
    /// Explicit weights; applies to clusters whose size matches the patterns, zero elsewhere.
    SparseTable { entries: Vec<PatternEntry> },
}

impl CounterfactualWeight {
    pub fn bernoulli(probability: UnitProbability) -> Self {
        CounterfactualWeight::StochasticIntervention {
            intervention: Intervention::IndependentBernoulli { probability },
        }
    }

    pub(crate) fn law(&self, c: &ClusterSample, cap: usize) -> Result<PatternLaw> {
        let m = c.size();
        match self {
            CounterfactualWeight::Gate => {
                let mut entries = vec![(TreatmentPattern::ones(m), 1.0)];
                entries.push((TreatmentPattern::zeros(m), -1.0));
                Ok(PatternLaw::Sparse(entries))
            }
            CounterfactualWeight::StochasticIntervention { intervention } => intervention.law(c, cap),
            CounterfactualWeight::DirectEffect { base } => direct_effect_law(base.law(c, cap)?, m, cap),
            CounterfactualWeight::DeterministicTarget { selector } => {
                Ok(PatternLaw::Sparse(vec![(selector.select(c)?, 1.0)]))
            }
            CounterfactualWeight::SparseTable { entries } => table_law(entries, c),
        }
    }

    /// Value of `f` at pattern `a` for cluster `c`.
    pub fn eval(&self, a: &TreatmentPattern, c: &ClusterSample) -> Result<f64> {
        a.check_len(c.size())?;
        Ok(self.law(c, crate::DEFAULT_PATTERN_CAP)?.eval(a.bits()))
    }

    /// Patterns with nonzero weight, enumerating all `2^{M_c}` only when the weight has full support.
    pub fn sparse_support(&self, c: &ClusterSample, cap: usize) -> Result<Vec<(TreatmentPattern, f64)>> {
        self.law(c, cap)?.support(c.size(), cap)
    }
}

/// `f(a, X_c)` for a cluster. See [`CounterfactualWeight::eval`].
pub fn eval_weight(f: &CounterfactualWeight, a: &TreatmentPattern, c: &ClusterSample) -> Result<f64> {
    f.eval(a, c)
}

pub fn sparse_support(
    f: &CounterfactualWeight,
    c: &ClusterSample,
    cap: usize,
) -> Result<Vec<(TreatmentPattern, f64)>> {
    f.sparse_support(c, cap)
}

fn table_law(entries: &[PatternEntry], c: &ClusterSample) -> Result<PatternLaw> {
    let m = c.size();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for e in entries {
        if !seen.insert(e.pattern.clone()) {
            return Err(Error::InvalidInput(format!("pattern {:?} listed twice", e.pattern.bits())));
        }
        if e.pattern.len() == m && e.weight != 0.0 {
            out.push((e.pattern.clone(), e.weight));
        }
    }
    Ok(PatternLaw::Sparse(out))
}

fn direct_effect_law(base: PatternLaw, m: usize, cap: usize) -> Result<PatternLaw> {
    match base {
        PatternLaw::Products(terms) => {
            let [(coef, probs)] = terms.as_slice() else {
                unreachable!("interventions build a single product term")
            };
            let mut out = Vec::with_capacity(2 * m);
            for (j, &p) in probs.iter().enumerate() {
                if p <= 0.0 || p >= 1.0 {
                    return Err(Error::DegenerateIntervention(format!(
                        "unit {j} is treated with probability {p}, so one conditional law is undefined"
                    )));
                }
                let mut up = probs.clone();
                up[j] = 1.0;
                let mut down = probs.clone();
                down[j] = 0.0;
                out.push((*coef, up));
                out.push((-coef, down));
            }
            Ok(PatternLaw::Products(out))
        }
        other => {
            let support = other.support(m, cap)?;
            let mut marg = vec![[0.0f64; 2]; m];
            for (p, w) in &support {
                for (j, &b) in p.bits().iter().enumerate() {
                    marg[j][b as usize] += w;
                }
            }
            for (j, mj) in marg.iter().enumerate() {
                if let Some(v) = mj.iter().position(|&s| s == 0.0) {
                    return Err(Error::DegenerateIntervention(format!(
                        "base intervention never sets unit {j} to {v}"
                    )));
                }
            }
            let entries = support
                .iter()
                .map(|(p, w)| {
                    let f: f64 = p
                        .bits()
                        .iter()
                        .enumerate()
                        .map(|(j, &b)| {
                            let sign = if b == 1 { 1.0 } else { -1.0 };
                            sign * w / marg[j][b as usize]
                        })
                        .sum();
                    (p.clone(), f)
                })
                .collect();
            Ok(PatternLaw::Sparse(entries).compact())
        }
    }
}

fn binomial(m: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (m - i) as f64 / (i + 1) as f64).round()
}

/// All patterns of length `m` with exactly `k` ones, in lexicographic order.
fn combinations(m: usize, k: usize) -> Vec<TreatmentPattern> {
    fn rec(m: usize, k: usize, bits: &mut Vec<u8>, out: &mut Vec<TreatmentPattern>) {
        let placed = bits.iter().filter(|&&b| b == 1).count();
        let left = m - bits.len();
        if bits.len() == m {
            out.push(TreatmentPattern::new(bits.clone()).expect("binary"));
            return;
        }
        if left > k - placed {
            bits.push(0);
            rec(m, k, bits, out);
            bits.pop();
        }
        if placed < k {
            bits.push(1);
            rec(m, k, bits, out);
            bits.pop();
        }
    }
    let mut out = Vec::new();
    rec(m, k, &mut Vec::with_capacity(m), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::enumerate_patterns;
    use crate::DEFAULT_PATTERN_CAP as CAP;

    fn cluster(m: usize) -> ClusterSample {
        let cov = (0..m).map(|i| vec![i as f64, 1.0 - 0.3 * i as f64]).collect();
        ClusterSample::new("c", cov, vec![0; m], vec![0.0; m]).unwrap()
    }

    fn pat(bits: &[u8]) -> TreatmentPattern {
        TreatmentPattern::new(bits.to_vec()).unwrap()
    }

    #[test]
    fn gate_corners() {
        let c = cluster(3);
        assert_eq!(CounterfactualWeight::Gate.eval(&pat(&[1, 1, 1]), &c).unwrap(), 1.0);
        assert_eq!(CounterfactualWeight::Gate.eval(&pat(&[0, 0, 0]), &c).unwrap(), -1.0);
        assert_eq!(CounterfactualWeight::Gate.eval(&pat(&[1, 0, 1]), &c).unwrap(), 0.0);
        assert!(matches!(
            CounterfactualWeight::Gate.eval(&pat(&[1, 0]), &c),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn uniform_intervention_is_flat() {
        let c = cluster(4);
        let f = CounterfactualWeight::StochasticIntervention {
            intervention: Intervention::uniform(),
        };
        for a in enumerate_patterns(4, CAP).unwrap() {
            assert!((f.eval(&a, &c).unwrap() - 1.0 / 16.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_support() {
        let s = CounterfactualWeight::Gate.sparse_support(&cluster(3), CAP).unwrap();
        assert_eq!(s, vec![(pat(&[1, 1, 1]), 1.0), (pat(&[0, 0, 0]), -1.0)]);
    }

    #[test]
    fn deterministic_target_support() {
        let f = CounterfactualWeight::DeterministicTarget {
            selector: Selector::Units { units: vec![2] },
        };
        assert_eq!(f.sparse_support(&cluster(3), CAP).unwrap(), vec![(pat(&[0, 0, 1]), 1.0)]);
        let top = CounterfactualWeight::DeterministicTarget {
            selector: Selector::TopByCovariate {
                column: 0,
                count: 2,
                lowest: false,
            },
        };
        assert_eq!(top.sparse_support(&cluster(3), CAP).unwrap(), vec![(pat(&[0, 1, 1]), 1.0)]);
    }

    #[test]
    fn uniform_selection_support() {
        let f = CounterfactualWeight::StochasticIntervention {
            intervention: Intervention::UniformSelection { count: 1 },
        };
        let s = f.sparse_support(&cluster(3), CAP).unwrap();
        assert_eq!(s.len(), 3);
        for (p, w) in &s {
            assert_eq!(p.treated(), 1);
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn direct_effect_under_product_and_table_bases_agree() {
        let c = cluster(3);
        let p = vec![0.3, 0.6, 0.5];
        let entries: Vec<PatternEntry> = enumerate_patterns(3, CAP)
            .unwrap()
            .into_iter()
            .map(|a| PatternEntry {
                weight: super::super::law::bernoulli_mass(&p, a.bits()),
                pattern: a,
            })
            .collect();
        let table = CounterfactualWeight::DirectEffect {
            base: Intervention::Table { entries },
        };
        let law = direct_effect_law(PatternLaw::Products(vec![(1.0, p.clone())]), 3, CAP).unwrap();
        for a in enumerate_patterns(3, CAP).unwrap() {
            let x = table.eval(&a, &c).unwrap();
            let y = law.eval(a.bits());
            assert!((x - y).abs() < 1e-12, "{a:?}: {x} vs {y}");
        }
    }

    #[test]
    fn direct_effect_rejects_degenerate_base() {
        let f = CounterfactualWeight::DirectEffect {
            base: Intervention::IndependentBernoulli {
                probability: UnitProbability::Constant { p: 1.0 },
            },
        };
        assert!(matches!(
            f.eval(&pat(&[1, 1]), &cluster(2)),
            Err(Error::DegenerateIntervention(_))
        ));
        let none = CounterfactualWeight::DirectEffect {
            base: Intervention::UniformSelection { count: 0 },
        };
        assert!(matches!(
            none.eval(&pat(&[0, 0]), &cluster(2)),
            Err(Error::DegenerateIntervention(_))
        ));
    }

    #[test]
    fn sparse_table_rejects_duplicates() {
        let e = PatternEntry {
            pattern: pat(&[1, 0]),
            weight: 0.5,
        };
        let f = CounterfactualWeight::SparseTable {
            entries: vec![e.clone(), e],
        };
        assert!(f.eval(&pat(&[1, 0]), &cluster(2)).is_err());
    }

    #[test]
    fn json_round_trip() {
        let f = CounterfactualWeight::DirectEffect {
            base: Intervention::IndependentBernoulli {
                probability: UnitProbability::Probit {
                    kappa: 0.2,
                    columns: None,
                },
            },
        };
        let s = serde_json::to_string(&f).unwrap();
        assert_eq!(
            s,
            r#"{"kind":"direct_effect","base":{"kind":"independent_bernoulli","probability":{"kind":"probit","kappa":0.2}}}"#
        );
        assert_eq!(serde_json::from_str::<CounterfactualWeight>(&s).unwrap(), f);
        let g: CounterfactualWeight = serde_json::from_str(r#"{"kind":"gate"}"#).unwrap();
        assert_eq!(g, CounterfactualWeight::Gate);
    }
}
