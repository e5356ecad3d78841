//! Internal representation of a function over the treatment patterns of one cluster.

use std::collections::HashMap;

use super::pattern::{bit_of, check_cap, index_of, TreatmentPattern};
use crate::error::Result;

/// A real function of the cluster pattern in one of three shapes.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum PatternLaw {
    /// Explicit nonzero entries; any other pattern maps to zero.
    Sparse(Vec<(TreatmentPattern, f64)>),
    /// `Σ_k coef_k Π_i p_ki^{a_i} (1 − p_ki)^{1 − a_i}`.
    Products(Vec<(f64, Vec<f64>)>),
    /// One value per pattern in lexicographic order.
    Dense(Vec<f64>),
}

pub(crate) fn bernoulli_mass(probs: &[f64], bits: &[u8]) -> f64 {
    probs
        .iter()
        .zip(bits)
        .map(|(&p, &b)| if b == 1 { p } else { 1.0 - p })
        .product()
}

impl PatternLaw {
    pub fn eval(&self, bits: &[u8]) -> f64 {
        match self {
            PatternLaw::Sparse(entries) => entries
                .iter()
                .find(|(p, _)| p.bits() == bits)
                .map_or(0.0, |(_, w)| *w),
            PatternLaw::Products(terms) => terms.iter().map(|(c, p)| c * bernoulli_mass(p, bits)).sum(),
            PatternLaw::Dense(v) => v[index_of(bits) as usize],
        }
    }

    /// Nonzero entries. Falls back to full enumeration for non-sparse shapes.
    pub fn support(&self, m: usize, cap: usize) -> Result<Vec<(TreatmentPattern, f64)>> {
        match self {
            PatternLaw::Sparse(entries) => Ok(entries.iter().filter(|(_, w)| *w != 0.0).cloned().collect()),
            _ => {
                check_cap(m, cap)?;
                let mut out = Vec::new();
                for j in 0..1u64 << m {
                    let p = TreatmentPattern::from_index(j, m);
                    let w = self.eval(p.bits());
                    if w != 0.0 {
                        out.push((p, w));
                    }
                }
                Ok(out)
            }
        }
    }

    /// Values over all patterns in lexicographic order.
    pub fn dense(&self, m: usize, cap: usize) -> Result<Vec<f64>> {
        check_cap(m, cap)?;
        Ok(match self {
            PatternLaw::Dense(v) => v.clone(),
            PatternLaw::Sparse(entries) => {
                let mut v = vec![0.0; 1 << m];
                for (p, w) in entries {
                    v[p.index() as usize] += w;
                }
                v
            }
            PatternLaw::Products(_) => {
                let mut bits = vec![0u8; m];
                (0..1u64 << m)
                    .map(|j| {
                        for (i, b) in bits.iter_mut().enumerate() {
                            *b = bit_of(j, m, i);
                        }
                        self.eval(&bits)
                    })
                    .collect()
            }
        })
    }

    pub fn total(&self) -> f64 {
        match self {
            PatternLaw::Sparse(e) => e.iter().map(|(_, w)| w).sum(),
            PatternLaw::Products(t) => t.iter().map(|(c, _)| c).sum(),
            PatternLaw::Dense(v) => v.iter().sum(),
        }
    }

    /// Sums the law over all patterns that agree on the units in `deps`.
    ///
    /// Entry `j` of the result corresponds to the sub-pattern whose bits,
    /// read in `deps` order with the first as most significant, spell `j`.
    pub fn marginal(&self, m: usize, deps: &[usize], cap: usize) -> Result<Vec<f64>> {
        let k = deps.len();
        check_cap(k, cap)?;
        let mut out = vec![0.0; 1 << k];
        match self {
            PatternLaw::Sparse(entries) => {
                for (p, w) in entries {
                    let j = deps.iter().fold(0usize, |acc, &u| (acc << 1) | p.bits()[u] as usize);
                    out[j] += w;
                }
            }
            PatternLaw::Products(terms) => {
                for (j, slot) in out.iter_mut().enumerate() {
                    *slot = terms
                        .iter()
                        .map(|(c, p)| {
                            c * deps
                                .iter()
                                .enumerate()
                                .map(|(r, &u)| if bit_of(j as u64, k, r) == 1 { p[u] } else { 1.0 - p[u] })
                                .product::<f64>()
                        })
                        .sum();
                }
            }
            PatternLaw::Dense(v) => {
                for (idx, w) in v.iter().enumerate() {
                    let j = deps
                        .iter()
                        .fold(0usize, |acc, &u| (acc << 1) | bit_of(idx as u64, m, u) as usize);
                    out[j] += w;
                }
            }
        }
        Ok(out)
    }

    /// Mass of each possible number of treated units among `deps`.
    pub fn count_distribution(&self, m: usize, deps: &[usize]) -> Vec<f64> {
        let k = deps.len();
        let mut out = vec![0.0; k + 1];
        let count = |bits: &dyn Fn(usize) -> u8| deps.iter().map(|&u| bits(u) as usize).sum::<usize>();
        match self {
            PatternLaw::Sparse(entries) => {
                for (p, w) in entries {
                    out[count(&|u| p.bits()[u])] += w;
                }
            }
            PatternLaw::Products(terms) => {
                for (coef, probs) in terms {
                    // Poisson-binomial recursion.
                    let mut dist = vec![0.0; k + 1];
                    dist[0] = 1.0;
                    for (r, &u) in deps.iter().enumerate() {
                        let p = probs[u];
                        for t in (0..=r + 1).rev() {
                            let stay = dist[t] * (1.0 - p);
                            let up = if t > 0 { dist[t - 1] * p } else { 0.0 };
                            dist[t] = stay + up;
                        }
                    }
                    for (o, d) in out.iter_mut().zip(&dist) {
                        *o += coef * d;
                    }
                }
            }
            PatternLaw::Dense(v) => {
                for (idx, w) in v.iter().enumerate() {
                    out[count(&|u| bit_of(idx as u64, m, u))] += w;
                }
            }
        }
        out
    }

    /// Merges duplicate sparse entries and drops zeros.
    pub fn compact(self) -> Self {
        match self {
            PatternLaw::Sparse(entries) => {
                let mut order = Vec::new();
                let mut acc: HashMap<TreatmentPattern, f64> = HashMap::new();
                for (p, w) in entries {
                    if !acc.contains_key(&p) {
                        order.push(p.clone());
                    }
                    *acc.entry(p).or_insert(0.0) += w;
                }
                PatternLaw::Sparse(
                    order
                        .into_iter()
                        .filter_map(|p| {
                            let w = acc[&p];
                            (w != 0.0).then_some((p, w))
                        })
                        .collect(),
                )
            }
            other => other,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_marginal_matches_enumeration() {
        let law = PatternLaw::Products(vec![(1.0, vec![0.2, 0.7, 0.4]), (-0.5, vec![0.9, 0.1, 0.3])]);
        let dense = PatternLaw::Dense(law.dense(3, 20).unwrap());
        for deps in [vec![], vec![1], vec![2, 0], vec![0, 1, 2]] {
            let a = law.marginal(3, &deps, 20).unwrap();
            let b = dense.marginal(3, &deps, 20).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn count_distribution_matches_enumeration() {
        let law = PatternLaw::Products(vec![(1.0, vec![0.2, 0.7, 0.4, 0.9]), (2.0, vec![0.5, 0.1, 0.3, 0.6])]);
        let dense = PatternLaw::Dense(law.dense(4, 20).unwrap());
        let deps = [3, 0, 2];
        let a = law.count_distribution(4, &deps);
        let b = dense.count_distribution(4, &deps);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!((a.iter().sum::<f64>() - 3.0).abs() < 1e-14);
    }

    #[test]
    fn compact_merges_duplicates() {
        let p = TreatmentPattern::ones(2);
        let q = TreatmentPattern::zeros(2);
        let law = PatternLaw::Sparse(vec![(p.clone(), 0.5), (q.clone(), 1.0), (p.clone(), -0.5)]).compact();
        assert_eq!(law, PatternLaw::Sparse(vec![(q, 1.0)]));
    }
}
