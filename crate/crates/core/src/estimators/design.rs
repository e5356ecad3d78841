use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{ipw_weights, EstimateReport, EstimatorKind, FitOptions, WeightSet};
use crate::data::{CounterfactualWeight, Dataset, PropensityModel};
use crate::error::{Error, Result};
use crate::numerics::{Factorization, Tolerances};
use crate::structures::LowRankStructure;

/// Observed design `Φ`, its factorization and the target `t = Σ_c v_c`.
///
/// One factorization serves the balancing solve, the projection, the regression fit `ĥ = Φ⁺y`
/// and the residuals used by the variance and noise estimates.
#[derive(Debug, Clone)]
pub struct DesignSystem {
    phi: DMatrix<f64>,
    fact: Factorization,
    cluster_targets: Vec<DVector<f64>>,
    target: DVector<f64>,
    offsets: Vec<usize>,
    tol: Tolerances,
}

impl DesignSystem {
    pub fn new(data: &Dataset, s: &LowRankStructure, f: &CounterfactualWeight, opts: &FitOptions) -> Result<Self> {
        let d = s.fixed_dim()?;
        let parts = data
            .clusters()
            .par_iter()
            .map(|c| {
                let feats = s.prepare(c)?;
                let rows = feats.rows(c.treatments(), d)?;
                let law = f.law(c, opts.cap)?;
                let v = feats.expected_sum(&law, d, opts.cap)? / c.size() as f64;
                Ok((rows, v))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut phi = DMatrix::zeros(data.total_units(), d);
        let mut offsets = Vec::with_capacity(data.n() + 1);
        let mut row = 0;
        let mut cluster_targets = Vec::with_capacity(data.n());
        for (rows, v) in parts {
            offsets.push(row);
            phi.rows_mut(row, rows.nrows()).copy_from(&rows);
            row += rows.nrows();
            cluster_targets.push(v);
        }
        offsets.push(row);
        Self::from_parts(phi, cluster_targets, offsets, opts.tol)
    }

    /// Assembles a system from a stacked design and per-cluster targets;
    /// `offsets` holds each cluster's first row followed by the total row count.
    pub fn from_parts(
        phi: DMatrix<f64>,
        cluster_targets: Vec<DVector<f64>>,
        offsets: Vec<usize>,
        tol: Tolerances,
    ) -> Result<Self> {
        if offsets.len() != cluster_targets.len() + 1 || offsets.last() != Some(&phi.nrows()) {
            return Err(Error::dim("cluster offsets do not match the design"));
        }
        if cluster_targets.iter().any(|v| v.len() != phi.ncols()) {
            return Err(Error::dim("cluster target length differs from the design width"));
        }
        let mut target = DVector::zeros(phi.ncols());
        for v in &cluster_targets {
            target += v;
        }
        let fact = Factorization::new(&phi, tol.rcond)?;
        Ok(Self {
            phi,
            fact,
            cluster_targets,
            target,
            offsets,
            tol,
        })
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn factorization(&self) -> &Factorization {
        &self.fact
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    /// `v_c = (1/M_c) Σ_a f(a) Σ_i φ_ci(a)`.
    pub fn cluster_targets(&self) -> &[DVector<f64>] {
        &self.cluster_targets
    }

    /// Row range of every cluster.
    pub fn cluster_rows(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.offsets.windows(2).map(|w| w[0]..w[1])
    }

    pub fn n(&self) -> usize {
        self.cluster_targets.len()
    }

    pub fn rank(&self) -> usize {
        self.fact.rank()
    }

    pub fn tolerances(&self) -> Tolerances {
        self.tol
    }

    fn point(&self, w: &DVector<f64>, y: &DVector<f64>) -> f64 {
        w.dot(y) / self.n() as f64
    }

    fn check_y(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.phi.nrows() {
            return Err(Error::dim(format!("{} outcomes for {} design rows", y.len(), self.phi.nrows())));
        }
        Ok(())
    }

    /// Minimum-norm solution of `Φᵀw = t`, reported even when the system is inconsistent.
    pub fn balancing(&self, y: &DVector<f64>) -> Result<EstimateReport> {
        self.check_y(y)?;
        let w = self.fact.solve_transposed(&self.target);
        let residual = self.phi.tr_mul(&w) - &self.target;
        let relative = residual.norm() / self.target.norm().max(1.0);
        let n = self.n() as f64;
        Ok(EstimateReport {
            point: self.point(&w, y),
            weights: WeightSet {
                kind: EstimatorKind::Balancing,
                feasible: relative <= self.tol.feas_tol,
                weights: w.as_slice().to_vec(),
            },
            imbalance: Some((residual / n).as_slice().to_vec()),
            target: Some(self.target.as_slice().to_vec()),
            design_rank: Some(self.rank()),
            relative_residual: Some(relative),
        })
    }

    /// `ĥ = Φ⁺y`.
    pub fn h_hat(&self, y: &DVector<f64>) -> DVector<f64> {
        self.fact.solve(y)
    }

    /// `(1/n) tᵀ Φ⁺ y`.
    pub fn ols_point(&self, y: &DVector<f64>) -> f64 {
        self.target.dot(&self.h_hat(y)) / self.n() as f64
    }

    /// `‖(I − P_Φ) y‖²`.
    pub fn residual_sum_squares(&self, y: &DVector<f64>) -> f64 {
        (y - self.fact.project(y)).norm_squared()
    }

    /// Projection of the IPW weights onto the column space of `Φ`.
    pub fn projection(&self, y: &DVector<f64>, w_ipw: &[f64]) -> Result<EstimateReport> {
        self.check_y(y)?;
        if w_ipw.len() != self.phi.nrows() {
            return Err(Error::dim("IPW weights do not match the design"));
        }
        let w = self.fact.project(&DVector::from_column_slice(w_ipw));
        Ok(EstimateReport {
            point: self.point(&w, y),
            weights: WeightSet {
                kind: EstimatorKind::Projection,
                weights: w.as_slice().to_vec(),
                feasible: true,
            },
            imbalance: None,
            target: Some(self.target.as_slice().to_vec()),
            design_rank: Some(self.rank()),
            relative_residual: None,
        })
    }
}

fn outcomes(data: &Dataset) -> DVector<f64> {
    DVector::from_vec(data.outcomes())
}

pub fn balancing_fit(data: &Dataset, s: &LowRankStructure, f: &CounterfactualWeight) -> Result<EstimateReport> {
    DesignSystem::new(data, s, f, &FitOptions::default())?.balancing(&outcomes(data))
}

pub fn ols_plugin(data: &Dataset, s: &LowRankStructure, f: &CounterfactualWeight) -> Result<f64> {
    Ok(DesignSystem::new(data, s, f, &FitOptions::default())?.ols_point(&outcomes(data)))
}

pub fn projection_fit(
    data: &Dataset,
    s: &LowRankStructure,
    f: &CounterfactualWeight,
    e: &PropensityModel,
) -> Result<EstimateReport> {
    let w = ipw_weights(data, f, e)?;
    DesignSystem::new(data, s, f, &FitOptions::default())?.projection(&outcomes(data), &w)
}
