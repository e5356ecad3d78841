use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EstimateReport, EstimatorKind, FitOptions};
use crate::data::law::PatternLaw;
use crate::data::{check_cap, ClusterSample, CounterfactualWeight, Dataset, PropensityModel};
use crate::error::{Error, Result};
use crate::numerics::Factorization;
use crate::structures::{LowRankStructure, UnitFeatures};

/// How the per-pattern projections are evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WprojMode {
    /// Over the sub-patterns of the units each feature row depends on. Exact.
    #[default]
    Auto,
    /// Over all `2^{M_c}` cluster patterns, as the definition reads.
    Enumerate,
}

fn matrix(rows: &[Vec<f64>], scale: impl Fn(usize) -> f64) -> DMatrix<f64> {
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), d, |r, j| scale(r) * rows[r][j])
}

/// `φ(A)ᵀ G⁺ Σ_a φ(a) f(a) / M_c` with `G = Σ_a e(a) φ(a) φ(a)ᵀ`, sums over the dependency set.
fn unit_weight_auto(
    u: &UnitFeatures,
    c: &ClusterSample,
    f: &PatternLaw,
    e: &PatternLaw,
    opts: &FitOptions,
) -> Result<f64> {
    let m = c.size();
    let deps = u.dependencies();
    check_cap(deps.len(), opts.cap)?;
    let rows = u.dependency_rows(m, &deps);
    let pe = e.marginal(m, &deps, opts.cap)?;
    let pf = f.marginal(m, &deps, opts.cap)?;
    let b = matrix(&rows, |r| pe[r].max(0.0).sqrt());
    let mut v = DVector::zeros(b.ncols());
    for (row, w) in rows.iter().zip(&pf) {
        for (acc, x) in v.iter_mut().zip(row) {
            *acc += w * x / m as f64;
        }
    }
    let fact = Factorization::new(&b, opts.tol.rcond)?;
    let x = fact.solve(&fact.solve_transposed(&v));
    Ok(DVector::from_vec(u.eval(c.treatments())).dot(&x))
}

/// `D^{-1/2} P_{D^{1/2}Λ} D^{1/2} w̃` read at the observed pattern, built over every pattern.
fn cluster_weights_enumerated(
    units: &[UnitFeatures],
    c: &ClusterSample,
    f: &PatternLaw,
    e: &PatternLaw,
    opts: &FitOptions,
) -> Result<Vec<f64>> {
    let m = c.size();
    check_cap(m, opts.cap)?;
    let ev = e.dense(m, opts.cap)?;
    let fv = f.dense(m, opts.cap)?;
    let observed = crate::data::TreatmentPattern::new(c.treatments().to_vec())?.index() as usize;
    if ev[observed] <= 0.0 {
        return Err(Error::PositivityViolation(format!(
            "observed pattern of cluster `{}` has zero propensity",
            c.id()
        )));
    }
    let mut rhs = DVector::zeros(ev.len());
    for (j, (&p, &w)) in ev.iter().zip(&fv).enumerate() {
        if p > 0.0 {
            rhs[j] = w / (m as f64 * p.sqrt());
        } else if w != 0.0 {
            return Err(Error::PositivityViolation(format!(
                "a pattern of cluster `{}` with nonzero weight has zero propensity",
                c.id()
            )));
        }
    }
    let all: Vec<usize> = (0..m).collect();
    units
        .iter()
        .map(|u| {
            let rows = u.dependency_rows(m, &all);
            let b = matrix(&rows, |r| ev[r].max(0.0).sqrt());
            let p = Factorization::new(&b, opts.tol.rcond)?.project(&rhs);
            Ok(p[observed] / ev[observed].sqrt())
        })
        .collect()
}

pub fn weighted_projection_weights(
    data: &Dataset,
    s: &LowRankStructure,
    f: &CounterfactualWeight,
    e: &PropensityModel,
    mode: WprojMode,
    opts: &FitOptions,
) -> Result<Vec<f64>> {
    if !e.is_known() {
        return Err(Error::PropensityUnavailable);
    }
    let per_cluster = data
        .clusters()
        .par_iter()
        .map(|c| {
            let feats = s.prepare(c)?;
            let fl = f.law(c, opts.cap)?;
            let el = e.law(c)?;
            match mode {
                WprojMode::Auto => feats
                    .units()
                    .iter()
                    .map(|u| unit_weight_auto(u, c, &fl, &el, opts))
                    .collect::<Result<Vec<_>>>(),
                WprojMode::Enumerate => cluster_weights_enumerated(feats.units(), c, &fl, &el, opts),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_cluster.concat())
}

/// Weighted projection estimator; valid for per-unit structures too.
pub fn weighted_projection_fit(
    data: &Dataset,
    s: &LowRankStructure,
    f: &CounterfactualWeight,
    e: &PropensityModel,
    mode: WprojMode,
    opts: &FitOptions,
) -> Result<EstimateReport> {
    let w = weighted_projection_weights(data, s, f, e, mode, opts)?;
    Ok(EstimateReport::plain(EstimatorKind::WeightedProjection, data, w))
}
