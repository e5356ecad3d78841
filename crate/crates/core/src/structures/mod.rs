//! Low-rank structures: per-unit feature rows `φ_ci(a_c)` with `g = Λh`.

mod exposure;
mod features;
mod graph;
mod spec;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

pub use exposure::{BuiltinExposure, ExposureMapping};
pub(crate) use exposure::mapping_block;
pub use features::{ClusterFeatures, UnitFeatures};
pub use graph::{knn_graph, knn_lists, second_order, NeighborGraph};
pub use spec::{ColumnRef, CovariateTerm, NeighborSpec, StructureSpec};

use crate::data::{ClusterSample, CounterfactualWeight, Dataset, TreatmentPattern, DEFAULT_PATTERN_CAP};
use crate::error::{Error, Result};
use crate::numerics::Factorization;
use features::{Block, Post};

/// Whether the feature dimension is shared by all units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    FixedH(usize),
    PerUnit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Term {
    Column(usize),
    Mean(usize),
    Intercept,
}

#[derive(Debug, Clone)]
enum Node {
    Own,
    Stratified {
        k: usize,
        include_own: bool,
        neighbors: NeighborSpec,
    },
    Knn {
        k: usize,
        neighbors: NeighborSpec,
    },
    Additive {
        types: usize,
        column: usize,
    },
    Coarsened {
        k: usize,
        thresholds: Vec<[f64; 2]>,
        neighbors: NeighborSpec,
    },
    Builtin(BuiltinExposure),
    Custom(Arc<dyn ExposureMapping>),
    Compose {
        inner: Box<Node>,
        map: Arc<DMatrix<f64>>,
    },
    Tensor {
        inner: Box<Node>,
        terms: Vec<Term>,
        labels: Vec<String>,
    },
}

enum Built {
    Structure(Node),
    Map(DMatrix<f64>),
}

/// A feature map `(c, i, a) → φ_ci(a)`.
#[derive(Clone)]
pub struct LowRankStructure {
    label: String,
    node: Node,
    cap: usize,
}

impl fmt::Debug for LowRankStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LowRankStructure")
            .field("label", &self.label)
            .field("regime", &self.regime())
            .finish()
    }
}

impl LowRankStructure {
    /// Structure induced by a user-supplied exposure mapping.
    pub fn from_exposure(map: Arc<dyn ExposureMapping>, label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            node: Node::Custom(map),
            cap: DEFAULT_PATTERN_CAP,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Bound on the dependency-set size for pattern-indicator blocks.
    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap;
        self
    }

    pub fn regime(&self) -> Regime {
        match self.node.width() {
            Some(d) => Regime::FixedH(d),
            None => Regime::PerUnit,
        }
    }

    /// Feature dimension `d_h`, or `InvalidSpec` for per-unit structures.
    pub fn fixed_dim(&self) -> Result<usize> {
        match self.regime() {
            Regime::FixedH(d) => Ok(d),
            Regime::PerUnit => Err(Error::InvalidSpec(format!(
                "structure `{}` has a per-unit dimension; a fixed dimension is required",
                self.label
            ))),
        }
    }

    /// `(ℓ, p)` when the structure is an `ℓ`-slot map tensored with `p` covariates.
    pub fn tensor_layout(&self) -> Option<(usize, usize)> {
        match &self.node {
            Node::Tensor { inner, terms, .. } => inner.width().map(|l| (l, terms.len())),
            _ => None,
        }
    }

    /// Names of the covariate terms of a tensor structure.
    pub fn covariate_labels(&self) -> Option<&[String]> {
        match &self.node {
            Node::Tensor { labels, .. } => Some(labels),
            _ => None,
        }
    }

    /// Feature maps of every unit of `c`.
    pub fn prepare(&self, c: &ClusterSample) -> Result<ClusterFeatures> {
        Ok(ClusterFeatures {
            units: self.node.units(c, self.cap)?,
        })
    }
}

impl Node {
    fn width(&self) -> Option<usize> {
        match self {
            Node::Own => Some(2),
            Node::Stratified { k, include_own, .. } => Some(k + 1 + usize::from(*include_own)),
            Node::Knn { k, .. } => Some(1 << k),
            Node::Additive { types, .. } => Some(2 * types),
            Node::Coarsened { thresholds, .. } => Some(2 + 3 * thresholds.len()),
            Node::Builtin(b) => b.fixed_classes(),
            Node::Custom(m) => m.fixed_classes(),
            Node::Compose { map, .. } => Some(map.ncols()),
            Node::Tensor { inner, terms, .. } => inner.width().map(|w| w * terms.len()),
        }
    }

    fn units(&self, c: &ClusterSample, cap: usize) -> Result<Vec<UnitFeatures>> {
        let m = c.size();
        let one = |b: Block| UnitFeatures::new(vec![b]);
        Ok(match self {
            Node::Own => (0..m)
                .map(|i| {
                    one(Block::Count {
                        deps: vec![i],
                        bins: vec![0, 1],
                        width: 2,
                    })
                })
                .collect(),
            Node::Stratified { k, include_own, neighbors } => {
                let lists = neighbors.lists(c, *k)?;
                lists
                    .into_iter()
                    .enumerate()
                    .map(|(i, mut deps)| {
                        if *include_own {
                            deps.insert(0, i);
                        }
                        let width = k + 1 + usize::from(*include_own);
                        one(Block::Count {
                            bins: (0..=deps.len() as u32).collect(),
                            deps,
                            width,
                        })
                    })
                    .collect()
            }
            Node::Knn { k, neighbors } => neighbors
                .lists(c, *k)?
                .into_iter()
                .map(|deps| exposure::pattern_block(deps, *k, cap).map(one))
                .collect::<Result<_>>()?,
            Node::Additive { types, column } => {
                let block = additive_block(c, *types, *column)?;
                (0..m).map(|_| one(block.clone())).collect()
            }
            Node::Coarsened { k, thresholds, neighbors } => {
                let first = neighbors.lists(c, *k)?;
                let second = (thresholds.len() == 2).then(|| graph::second_order(&first));
                (0..m)
                    .map(|i| {
                        let mut blocks = vec![Block::Count {
                            deps: vec![i],
                            bins: vec![0, 1],
                            width: 2,
                        }];
                        blocks.push(coarse_block(first[i].clone(), thresholds[0]));
                        if let Some(second) = &second {
                            blocks.push(coarse_block(second[i].clone(), thresholds[1]));
                        }
                        UnitFeatures::new(blocks)
                    })
                    .collect()
            }
            Node::Builtin(b) => (0..m).map(|i| b.block(c, i, cap).map(one)).collect::<Result<_>>()?,
            Node::Custom(map) => (0..m)
                .map(|i| exposure::mapping_block(map.as_ref(), c, i, cap).map(one))
                .collect::<Result<_>>()?,
            Node::Compose { inner, map } => {
                let mut units = inner.units(c, cap)?;
                for u in &mut units {
                    if u.width() != map.nrows() {
                        return Err(Error::dim(format!(
                            "composition maps {} slots but the inner row has {}",
                            map.nrows(),
                            u.width()
                        )));
                    }
                    u.post.push(Post::Map(Arc::clone(map)));
                }
                units
            }
            Node::Tensor { inner, terms, .. } => {
                let mut units = inner.units(c, cap)?;
                for (i, u) in units.iter_mut().enumerate() {
                    let z = terms
                        .iter()
                        .map(|t| match *t {
                            Term::Column(j) => c.covariate(i, j),
                            Term::Mean(j) => c.column_mean(j),
                            Term::Intercept => 1.0,
                        })
                        .collect();
                    u.post.push(Post::Kron(z));
                }
                units
            }
        })
    }
}

fn additive_block(c: &ClusterSample, types: usize, column: usize) -> Result<Block> {
    let mut base = vec![0.0; 2 * types];
    let mut terms = Vec::with_capacity(c.size());
    let mut seen = vec![false; types];
    for j in 0..c.size() {
        let v = c.covariate(j, column);
        if v.fract() != 0.0 || v < 1.0 || v > types as f64 {
            return Err(Error::InvalidInput(format!(
                "unit {j} of cluster `{}` has type {v}; types must be integers in 1..={types}",
                c.id()
            )));
        }
        let t = v as usize - 1;
        if std::mem::replace(&mut seen[t], true) {
            return Err(Error::InvalidInput(format!(
                "type {} occurs twice in cluster `{}`",
                t + 1,
                c.id()
            )));
        }
        base[2 * t] += 1.0;
        let mut delta = vec![0.0; 2 * types];
        delta[2 * t] = -1.0;
        delta[2 * t + 1] = 1.0;
        terms.push((j, delta));
    }
    Ok(Block::Affine { base, terms })
}

fn coarse_bin(count: usize, t: [f64; 2]) -> u32 {
    let x = count as f64;
    if x <= t[0] {
        0
    } else if x <= t[1] {
        1
    } else {
        2
    }
}

fn coarse_block(deps: Vec<usize>, t: [f64; 2]) -> Block {
    Block::Count {
        bins: (0..=deps.len()).map(|r| coarse_bin(r, t)).collect(),
        deps,
        width: 3,
    }
}

/// Linear interpolation between order statistics.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn build_node(spec: &StructureSpec, data: &Dataset) -> Result<Built> {
    let names = data.covariate_names();
    Ok(match spec {
        StructureSpec::NoInterference => Built::Structure(Node::Own),
        StructureSpec::StratifiedCount { k, include_own, neighbors } => Built::Structure(Node::Stratified {
            k: *k,
            include_own: *include_own,
            neighbors: neighbors.clone(),
        }),
        StructureSpec::KnnPattern { k, neighbors } => {
            if *k > DEFAULT_PATTERN_CAP {
                return Err(Error::CapExceeded {
                    size: *k,
                    cap: DEFAULT_PATTERN_CAP,
                });
            }
            Built::Structure(Node::Knn {
                k: *k,
                neighbors: neighbors.clone(),
            })
        }
        StructureSpec::AdditiveTypes { types, column } => {
            if *types == 0 {
                return Err(Error::InvalidSpec("additive types need at least one type".into()));
            }
            Built::Structure(Node::Additive {
                types: *types,
                column: column.resolve(names)?,
            })
        }
        StructureSpec::CoarsenedCount {
            order,
            k,
            thresholds,
            neighbors,
        } => {
            let order = *order as usize;
            if !(1..=2).contains(&order) {
                return Err(Error::InvalidSpec(format!("neighborhood order {order} must be 1 or 2")));
            }
            let k = match (k, neighbors) {
                (Some(k), _) => *k,
                (None, NeighborSpec::Knn | NeighborSpec::KnnColumns { .. }) => {
                    return Err(Error::InvalidSpec("coarsened counts over k-NN neighbors need `k`".into()))
                }
                (None, _) => usize::MAX,
            };
            let thresholds = match thresholds {
                Some(t) => {
                    if t.len() != order {
                        return Err(Error::InvalidSpec(format!(
                            "{} threshold pairs given for neighborhood order {order}",
                            t.len()
                        )));
                    }
                    if let Some(p) = t.iter().find(|p| !(p[0] <= p[1]) || !p[0].is_finite() || !p[1].is_finite()) {
                        return Err(Error::InvalidSpec(format!("thresholds {p:?} are not increasing")));
                    }
                    t.clone()
                }
                None => default_thresholds(data, order, k, neighbors)?,
            };
            Built::Structure(Node::Coarsened {
                k,
                thresholds,
                neighbors: neighbors.clone(),
            })
        }
        StructureSpec::FromExposureMapping { mapping } => Built::Structure(Node::Builtin(mapping.clone())),
        StructureSpec::Compose { outer, inner } => {
            let Built::Map(outer) = build_node(outer, data)? else {
                return Err(Error::InvalidSpec(
                    "the outer part of a composition must be a linear map (additive_slots, count_slots, matrix or a composition of maps)".into(),
                ));
            };
            match build_node(inner, data)? {
                Built::Structure(node) => {
                    if let Some(w) = node.width() {
                        if w != outer.nrows() {
                            return Err(Error::InvalidSpec(format!(
                                "composition maps {} slots but the inner structure has {w}",
                                outer.nrows()
                            )));
                        }
                    }
                    Built::Structure(Node::Compose {
                        inner: Box::new(node),
                        map: Arc::new(outer),
                    })
                }
                Built::Map(inner) => {
                    if inner.ncols() != outer.nrows() {
                        return Err(Error::InvalidSpec(format!(
                            "cannot compose a {}-slot map after one producing {}",
                            outer.nrows(),
                            inner.ncols()
                        )));
                    }
                    Built::Map(inner * outer)
                }
            }
        }
        StructureSpec::TensorWithCovariates { inner, columns } => {
            let Built::Structure(inner) = build_node(inner, data)? else {
                return Err(Error::InvalidSpec("a tensor needs a structure, not a bare map".into()));
            };
            if columns.is_empty() {
                return Err(Error::InvalidSpec("a tensor needs at least one covariate term".into()));
            }
            let terms: Vec<Term> = columns
                .iter()
                .map(|t| {
                    Ok(match t {
                        CovariateTerm::Column(r) => Term::Column(r.resolve(names)?),
                        CovariateTerm::ClusterMean(r) => Term::Mean(r.resolve(names)?),
                        CovariateTerm::Intercept => Term::Intercept,
                    })
                })
                .collect::<Result<_>>()?;
            let labels = terms
                .iter()
                .map(|t| match *t {
                    Term::Column(j) => names[j].clone(),
                    Term::Mean(j) => format!("mean({})", names[j]),
                    Term::Intercept => "intercept".to_string(),
                })
                .collect();
            Built::Structure(Node::Tensor {
                inner: Box::new(inner),
                terms,
                labels,
            })
        }
        StructureSpec::AdditiveSlots { k } => {
            check_slots(*k)?;
            Built::Map(DMatrix::from_fn(1 << k, 2 * k, |j, col| {
                let r = col / 2;
                let bit = (j >> (k - 1 - r)) & 1;
                if col % 2 == bit {
                    1.0
                } else {
                    0.0
                }
            }))
        }
        StructureSpec::CountSlots { k } => {
            check_slots(*k)?;
            Built::Map(DMatrix::from_fn(1 << k, k + 1, |j, col| {
                if (j as u32).count_ones() as usize == col {
                    1.0
                } else {
                    0.0
                }
            }))
        }
        StructureSpec::Matrix { rows } => {
            let w = rows.first().map_or(0, Vec::len);
            if rows.is_empty() || w == 0 || rows.iter().any(|r| r.len() != w) {
                return Err(Error::InvalidSpec("matrix map needs non-empty rows of equal length".into()));
            }
            Built::Map(DMatrix::from_fn(rows.len(), w, |i, j| rows[i][j]))
        }
    })
}

fn check_slots(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidSpec("slot maps need k ≥ 1".into()));
    }
    if k > DEFAULT_PATTERN_CAP {
        return Err(Error::CapExceeded {
            size: k,
            cap: DEFAULT_PATTERN_CAP,
        });
    }
    Ok(())
}

/// 33rd and 67th percentiles of the observed treated counts across all units.
fn default_thresholds(data: &Dataset, order: usize, k: usize, neighbors: &NeighborSpec) -> Result<Vec<[f64; 2]>> {
    let mut counts = vec![Vec::new(); order];
    for c in data.clusters() {
        let first = neighbors.lists(c, k)?;
        let a = c.treatments();
        let tally = |l: &[usize]| l.iter().map(|&u| a[u] as f64).sum::<f64>();
        counts[0].extend(first.iter().map(|l| tally(l)));
        if order == 2 {
            counts[1].extend(second_order(&first).iter().map(|l| tally(l)));
        }
    }
    Ok(counts
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            [percentile(&v, 0.33), percentile(&v, 0.67)]
        })
        .collect())
}

/// Builds a structure from its specification. Column names and default
/// coarsening thresholds are resolved against `data`.
pub fn build_structure(spec: &StructureSpec, data: &Dataset) -> Result<LowRankStructure> {
    match build_node(spec, data)? {
        Built::Structure(node) => Ok(LowRankStructure {
            label: spec.label(),
            node,
            cap: DEFAULT_PATTERN_CAP,
        }),
        Built::Map(_) => Err(Error::InvalidSpec(format!(
            "`{}` is a linear map between feature spaces, not a structure; use it as the outer part of a composition",
            spec.label()
        ))),
    }
}

/// `φ_ci(a)`.
pub fn feature_row(s: &LowRankStructure, c: &ClusterSample, i: usize, a: &TreatmentPattern) -> Result<DVector<f64>> {
    if i >= c.size() {
        return Err(Error::dim(format!("unit {i} out of range for cluster of size {}", c.size())));
    }
    a.check_len(c.size())?;
    let f = s.prepare(c)?;
    Ok(DVector::from_vec(f.units[i].eval(a.bits())))
}

/// Observed design `Φ` with rows `φ_ci(A_c)` in stacked unit order.
pub fn design_matrix(s: &LowRankStructure, data: &Dataset) -> Result<DMatrix<f64>> {
    let d = s.fixed_dim()?;
    let mut phi = DMatrix::zeros(data.total_units(), d);
    let mut row = 0;
    for c in data.clusters() {
        let rows = s.prepare(c)?.rows(c.treatments(), d)?;
        phi.rows_mut(row, c.size()).copy_from(&rows);
        row += c.size();
    }
    Ok(phi)
}

/// `t = Σ_c (1/M_c) Σ_a f(a, X_c) Σ_i φ_ci(a)`.
pub fn target_vector(
    s: &LowRankStructure,
    data: &Dataset,
    f: &CounterfactualWeight,
    cap: usize,
) -> Result<DVector<f64>> {
    let d = s.fixed_dim()?;
    let mut t = DVector::zeros(d);
    for c in data.clusters() {
        let law = f.law(c, cap)?;
        t += s.prepare(c)?.expected_sum(&law, d, cap)? / c.size() as f64;
    }
    Ok(t)
}

/// Whether the observed design of `small` lies in the column space of that of `large`.
pub fn nested_rank_check(
    small: &LowRankStructure,
    large: &LowRankStructure,
    data: &Dataset,
    rcond: Option<f64>,
) -> Result<bool> {
    let a = design_matrix(small, data)?;
    let b = design_matrix(large, data)?;
    let joint = DMatrix::from_fn(a.nrows(), a.ncols() + b.ncols(), |i, j| {
        if j < a.ncols() {
            a[(i, j)]
        } else {
            b[(i, j - a.ncols())]
        }
    });
    Ok(Factorization::new(&joint, rcond)?.rank() == Factorization::new(&b, rcond)?.rank())
}

#[cfg(test)]
mod tests;
