//! Per-unit feature rows prepared for one cluster.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::data::law::PatternLaw;
use crate::data::bit_of;
use crate::error::{Error, Result};

/// One segment of a unit's raw feature row.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Block {
    /// One-hot at `slots[j]`, where `j` spells the treatments of `deps` (first = most significant).
    Pattern { deps: Vec<usize>, slots: Vec<u32>, width: usize },
    /// One-hot at `bins[r]`, where `r` is the number of treated units among `deps`.
    Count { deps: Vec<usize>, bins: Vec<u32>, width: usize },
    /// `base + Σ_u a_u · delta_u`.
    Affine { base: Vec<f64>, terms: Vec<(usize, Vec<f64>)> },
}

impl Block {
    fn width(&self) -> usize {
        match self {
            Block::Pattern { width, .. } | Block::Count { width, .. } => *width,
            Block::Affine { base, .. } => base.len(),
        }
    }

    fn deps(&self) -> Vec<usize> {
        match self {
            Block::Pattern { deps, .. } | Block::Count { deps, .. } => deps.clone(),
            Block::Affine { terms, .. } => terms.iter().map(|(u, _)| *u).collect(),
        }
    }

    fn write(&self, a: &[u8], out: &mut [f64]) {
        match self {
            Block::Pattern { deps, slots, .. } => {
                let j = deps.iter().fold(0usize, |acc, &u| (acc << 1) | a[u] as usize);
                out[slots[j] as usize] = 1.0;
            }
            Block::Count { deps, bins, .. } => {
                let r: usize = deps.iter().map(|&u| a[u] as usize).sum();
                out[bins[r] as usize] = 1.0;
            }
            Block::Affine { base, terms } => {
                out.copy_from_slice(base);
                for (u, delta) in terms {
                    if a[*u] == 1 {
                        for (o, d) in out.iter_mut().zip(delta) {
                            *o += d;
                        }
                    }
                }
            }
        }
    }

    fn write_expected(&self, law: &PatternLaw, m: usize, cap: usize, out: &mut [f64]) -> Result<()> {
        match self {
            Block::Pattern { deps, slots, .. } => {
                for (j, w) in law.marginal(m, deps, cap)?.into_iter().enumerate() {
                    out[slots[j] as usize] += w;
                }
            }
            Block::Count { deps, bins, .. } => {
                for (r, w) in law.count_distribution(m, deps).into_iter().enumerate() {
                    out[bins[r] as usize] += w;
                }
            }
            Block::Affine { base, terms } => {
                let total = law.total();
                for (o, b) in out.iter_mut().zip(base) {
                    *o += total * b;
                }
                for (u, delta) in terms {
                    let p1 = law.marginal(m, &[*u], cap)?[1];
                    for (o, d) in out.iter_mut().zip(delta) {
                        *o += p1 * d;
                    }
                }
            }
        }
        Ok(())
    }

    fn is_indicator(&self) -> bool {
        !matches!(self, Block::Affine { .. })
    }
}

/// A linear step applied to the raw row.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Post {
    /// Right-multiplication `row · M`.
    Map(Arc<DMatrix<f64>>),
    /// Kronecker product `row ⊗ z`.
    Kron(Vec<f64>),
}

impl Post {
    fn apply(&self, row: Vec<f64>) -> Vec<f64> {
        match self {
            Post::Map(m) => {
                let mut out = vec![0.0; m.ncols()];
                for (r, &x) in row.iter().enumerate() {
                    if x != 0.0 {
                        for (o, &v) in out.iter_mut().zip(m.row(r).iter()) {
                            *o += x * v;
                        }
                    }
                }
                out
            }
            Post::Kron(z) => {
                let mut out = Vec::with_capacity(row.len() * z.len());
                for &x in &row {
                    out.extend(z.iter().map(|v| x * v));
                }
                out
            }
        }
    }

    fn width(&self, input: usize) -> usize {
        match self {
            Post::Map(m) => m.ncols(),
            Post::Kron(z) => input * z.len(),
        }
    }
}

/// Feature map of one unit: concatenated blocks followed by linear steps.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitFeatures {
    pub(crate) blocks: Vec<Block>,
    pub(crate) post: Vec<Post>,
}

impl UnitFeatures {
    pub(crate) fn new(blocks: Vec<Block>) -> Self {
        Self { blocks, post: Vec::new() }
    }

    fn raw_width(&self) -> usize {
        self.blocks.iter().map(Block::width).sum()
    }

    pub fn width(&self) -> usize {
        self.post.iter().fold(self.raw_width(), |w, p| p.width(w))
    }

    /// Sorted units whose treatments can change this row.
    pub fn dependencies(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.blocks.iter().flat_map(Block::deps).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    /// True when every block is an indicator and no linear step follows.
    pub fn is_indicator(&self) -> bool {
        self.post.is_empty() && self.blocks.iter().all(Block::is_indicator)
    }

    /// Rows at each of the `2^k` sub-patterns of `deps` (first = most significant),
    /// with every other unit untreated.
    pub(crate) fn dependency_rows(&self, m: usize, deps: &[usize]) -> Vec<Vec<f64>> {
        let k = deps.len();
        let mut bits = vec![0u8; m];
        (0..1u64 << k)
            .map(|j| {
                for (r, &u) in deps.iter().enumerate() {
                    bits[u] = bit_of(j, k, r);
                }
                self.eval(&bits)
            })
            .collect()
    }

    fn raw(&self, a: &[u8]) -> Vec<f64> {
        let mut row = vec![0.0; self.raw_width()];
        let mut start = 0;
        for b in &self.blocks {
            let w = b.width();
            b.write(a, &mut row[start..start + w]);
            start += w;
        }
        row
    }

    /// Row at the full cluster pattern `a`.
    pub fn eval(&self, a: &[u8]) -> Vec<f64> {
        self.post.iter().fold(self.raw(a), |row, p| p.apply(row))
    }

    /// Row before the final Kronecker step, if the map ends with one.
    pub(crate) fn eval_inner(&self, a: &[u8]) -> Option<Vec<f64>> {
        match self.post.last() {
            Some(Post::Kron(_)) => {
                let n = self.post.len() - 1;
                Some(self.post[..n].iter().fold(self.raw(a), |row, p| p.apply(row)))
            }
            _ => None,
        }
    }

    /// `Σ_a law(a) · row(a)` over all patterns of the cluster.
    pub(crate) fn expected(&self, law: &PatternLaw, m: usize, cap: usize) -> Result<Vec<f64>> {
        let mut row = vec![0.0; self.raw_width()];
        let mut start = 0;
        for b in &self.blocks {
            let w = b.width();
            b.write_expected(law, m, cap, &mut row[start..start + w])?;
            start += w;
        }
        Ok(self.post.iter().fold(row, |row, p| p.apply(row)))
    }
}

/// Feature maps of every unit in one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterFeatures {
    pub(crate) units: Vec<UnitFeatures>,
}

impl ClusterFeatures {
    pub fn units(&self) -> &[UnitFeatures] {
        &self.units
    }

    pub fn size(&self) -> usize {
        self.units.len()
    }

    /// Rows at pattern `a`, one per unit.
    pub fn rows(&self, a: &[u8], width: usize) -> Result<DMatrix<f64>> {
        if a.len() != self.size() {
            return Err(Error::dim(format!("pattern of length {} for {} units", a.len(), self.size())));
        }
        let mut out = DMatrix::zeros(self.size(), width);
        for (i, u) in self.units.iter().enumerate() {
            let r = u.eval(a);
            if r.len() != width {
                return Err(Error::dim(format!("feature row of length {} where {width} is expected", r.len())));
            }
            for (j, v) in r.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }

    /// `Σ_i Σ_a law(a) · φ_i(a)`.
    pub(crate) fn expected_sum(&self, law: &PatternLaw, width: usize, cap: usize) -> Result<DVector<f64>> {
        let m = self.size();
        let mut acc = DVector::zeros(width);
        for u in &self.units {
            let r = u.expected(law, m, cap)?;
            if r.len() != width {
                return Err(Error::dim(format!("feature row of length {} where {width} is expected", r.len())));
            }
            for (a, v) in acc.iter_mut().zip(r) {
                *a += v;
            }
        }
        Ok(acc)
    }

    /// Same sum by visiting every pattern; the reference route for small clusters.
    #[cfg(test)]
    pub(crate) fn expected_sum_enumerated(
        &self,
        law: &PatternLaw,
        width: usize,
        cap: usize,
    ) -> Result<DVector<f64>> {
        let m = self.size();
        crate::data::check_cap(m, cap)?;
        let values = law.dense(m, cap)?;
        let mut acc = DVector::zeros(width);
        let mut bits = vec![0u8; m];
        for (j, w) in values.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            for (i, b) in bits.iter_mut().enumerate() {
                *b = bit_of(j as u64, m, i);
            }
            for u in &self.units {
                for (a, v) in acc.iter_mut().zip(u.eval(&bits)) {
                    *a += w * v;
                }
            }
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_and_steps() {
        let u = UnitFeatures {
            blocks: vec![
                Block::Count {
                    deps: vec![0],
                    bins: vec![0, 1],
                    width: 2,
                },
                Block::Pattern {
                    deps: vec![2, 1],
                    slots: vec![0, 1, 2, 3],
                    width: 4,
                },
            ],
            post: vec![Post::Kron(vec![1.0, 2.0])],
        };
        assert_eq!(u.width(), 12);
        let r = u.eval(&[1, 0, 1]);
        // own block (0,1); neighbor pattern (a2, a1) = (1, 0) -> slot 2
        let inner = [0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let want: Vec<f64> = inner.iter().flat_map(|x| [x * 1.0, x * 2.0]).collect();
        assert_eq!(r, want);
        assert_eq!(u.dependencies(), vec![0, 1, 2]);
        assert_eq!(u.eval_inner(&[1, 0, 1]).unwrap(), inner.to_vec());
    }

    #[test]
    fn expectation_matches_enumeration() {
        let u = UnitFeatures {
            blocks: vec![
                Block::Affine {
                    base: vec![1.0, 0.0, 2.0],
                    terms: vec![(0, vec![-1.0, 1.0, 0.0]), (2, vec![0.0, 0.5, -2.0])],
                },
                Block::Count {
                    deps: vec![1, 2],
                    bins: vec![0, 1, 1],
                    width: 2,
                },
                Block::Pattern {
                    deps: vec![2],
                    slots: vec![1, 0],
                    width: 2,
                },
            ],
            post: vec![Post::Map(Arc::new(DMatrix::from_fn(7, 2, |i, j| (i + 2 * j) as f64 - 1.5)))],
        };
        let c = ClusterFeatures {
            units: vec![u.clone(), u.clone(), u],
        };
        let law = PatternLaw::Products(vec![(0.7, vec![0.2, 0.6, 0.9]), (-1.0, vec![0.5, 0.3, 0.1])]);
        let a = c.expected_sum(&law, 2, 20).unwrap();
        let b = c.expected_sum_enumerated(&law, 2, 20).unwrap();
        assert!((a - b).amax() < 1e-13);
    }
}
