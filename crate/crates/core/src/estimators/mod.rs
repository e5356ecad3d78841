//! Weighting estimators `T(w) = (1/n) Σ_c Σ_i w_ci y_ci`.

mod design;
mod exposure;
mod wproj;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use design::{balancing_fit, ols_plugin, projection_fit, DesignSystem};
pub use exposure::exposure_collapsed_ipw;
pub use wproj::{weighted_projection_fit, weighted_projection_weights, WprojMode};

use crate::data::{CounterfactualWeight, Dataset, PropensityModel, TreatmentPattern, DEFAULT_PATTERN_CAP};
use crate::error::{Error, Result};
use crate::numerics::Tolerances;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Ipw,
    Balancing,
    Projection,
    WeightedProjection,
    ExposureIpw,
}

impl EstimatorKind {
    /// Short name used on the command line and in tables.
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::Balancing => "balancing",
            EstimatorKind::Projection => "projection",
            EstimatorKind::WeightedProjection => "wproj",
            EstimatorKind::ExposureIpw => "exposure-ipw",
        }
    }

    pub fn needs_propensity(self) -> bool {
        self != EstimatorKind::Balancing
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ipw" => EstimatorKind::Ipw,
            "balancing" | "bal" => EstimatorKind::Balancing,
            "projection" | "proj" => EstimatorKind::Projection,
            "wproj" | "weighted-projection" => EstimatorKind::WeightedProjection,
            "exposure-ipw" => EstimatorKind::ExposureIpw,
            other => return Err(Error::InvalidInput(format!("unknown estimator `{other}`"))),
        })
    }
}

/// Per-unit weights in stacked unit order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub kind: EstimatorKind,
    pub weights: Vec<f64>,
    /// Always true except for an inexact balancing solve.
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub point: f64,
    pub weights: WeightSet,
    /// `(1/n)(Φᵀw − t)`, attached to balancing fits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imbalance: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design_rank: Option<usize>,
    /// `‖Φᵀw − t‖ / max(‖t‖, 1)` for balancing fits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_residual: Option<f64>,
}

impl EstimateReport {
    pub(crate) fn plain(kind: EstimatorKind, data: &Dataset, weights: Vec<f64>) -> Self {
        Self {
            point: weighted_mean(data, &weights),
            weights: WeightSet {
                kind,
                weights,
                feasible: true,
            },
            imbalance: None,
            target: None,
            design_rank: None,
            relative_residual: None,
        }
    }

    pub fn kind(&self) -> EstimatorKind {
        self.weights.kind
    }

    pub fn feasible(&self) -> bool {
        self.weights.feasible
    }
}

/// Pattern cap and solver tolerances shared by the fits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub cap: usize,
    pub tol: Tolerances,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            cap: DEFAULT_PATTERN_CAP,
            tol: Tolerances::default(),
        }
    }
}

/// `(1/n) Σ w y` over all units.
pub fn weighted_mean(data: &Dataset, w: &[f64]) -> f64 {
    let y = data.clusters().iter().flat_map(|c| c.outcomes());
    w.iter().zip(y).map(|(w, y)| w * y).sum::<f64>() / data.n() as f64
}

/// Per-cluster sums `Σ_i w_ci y_ci`.
pub fn cluster_contributions(data: &Dataset, w: &[f64]) -> Vec<f64> {
    let mut start = 0;
    data.clusters()
        .iter()
        .map(|c| {
            let s = c.outcomes().iter().zip(&w[start..]).map(|(y, w)| y * w).sum();
            start += c.size();
            s
        })
        .collect()
}

/// `w_ci = f(A_c) / (M_c e(A_c))`.
pub fn ipw_weights(data: &Dataset, f: &CounterfactualWeight, e: &PropensityModel) -> Result<Vec<f64>> {
    if !e.is_known() {
        return Err(Error::PropensityUnavailable);
    }
    let mut w = Vec::with_capacity(data.total_units());
    for c in data.clusters() {
        let a = TreatmentPattern::new(c.treatments().to_vec())?;
        let ev = e.eval(&a, c)?;
        if ev <= 0.0 {
            return Err(Error::PositivityViolation(format!(
                "observed pattern of cluster `{}` has propensity {ev}",
                c.id()
            )));
        }
        let wc = f.eval(&a, c)? / (c.size() as f64 * ev);
        w.extend(std::iter::repeat_n(wc, c.size()));
    }
    Ok(w)
}

pub fn ipw_fit(data: &Dataset, f: &CounterfactualWeight, e: &PropensityModel) -> Result<EstimateReport> {
    Ok(EstimateReport::plain(EstimatorKind::Ipw, data, ipw_weights(data, f, e)?))
}
