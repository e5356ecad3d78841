//! Sandwich variances, confidence intervals, the noise scale and the structure selection test.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::{CounterfactualWeight, Dataset, PropensityModel};
use crate::estimators::{cluster_contributions, ipw_weights, DesignSystem, EstimateReport, EstimatorKind, FitOptions};
use crate::error::{Error, Result};
use crate::stats::{chi2_1_quantile, chi2_1_sf, z_critical};
use crate::structures::{nested_rank_check, LowRankStructure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub kind: EstimatorKind,
    pub point: f64,
    pub sigma2_hat: f64,
    /// `sqrt(σ̂² / n)`.
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub n: usize,
}

impl VarianceReport {
    pub fn new(kind: EstimatorKind, point: f64, sigma2_hat: f64, n: usize, level: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&level) || level == 0.0 {
            return Err(Error::InvalidInput(format!("confidence level {level} must lie in (0, 1)")));
        }
        if n == 0 {
            return Err(Error::InvalidInput("no clusters".into()));
        }
        let std_error = (sigma2_hat.max(0.0) / n as f64).sqrt();
        let half = z_critical(level) * std_error;
        Ok(Self {
            kind,
            point,
            sigma2_hat,
            std_error,
            ci_low: point - half,
            ci_high: point + half,
            level,
            n,
        })
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }

    pub fn length(&self) -> f64 {
        self.ci_high - self.ci_low
    }
}

/// Variance from the spread of the per-cluster contributions `Σ_i w_ci y_ci`.
///
/// Used for IPW-type weights, which depend on each cluster's own data only.
pub fn cluster_sample_variance(data: &Dataset, fit: &EstimateReport, level: f64) -> Result<VarianceReport> {
    let n = data.n();
    let contrib = cluster_contributions(data, &fit.weights.weights);
    let mean = contrib.iter().sum::<f64>() / n as f64;
    let s2 = if n > 1 {
        contrib.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    VarianceReport::new(fit.kind(), fit.point, s2, n, level)
}

/// Per-cluster estimating-equation values `η_c = (Λ_cᵀŵ_c − v_c, ŵ_cᵀy_c − T)`.
///
/// `v_c` is the cluster target for balancing fits and `Λ_cᵀ w_IPW,c` for projection fits.
pub fn estimating_equations(
    sys: &DesignSystem,
    y: &DVector<f64>,
    fit: &EstimateReport,
    w_ipw: Option<&[f64]>,
) -> Result<Vec<(DVector<f64>, f64)>> {
    let w = &fit.weights.weights;
    if w.len() != y.len() || y.len() != sys.phi().nrows() {
        return Err(Error::dim("weights, outcomes and design disagree in length"));
    }
    let phi = sys.phi();
    sys.cluster_rows()
        .zip(sys.cluster_targets())
        .map(|(rows, target)| {
            let block = phi.rows(rows.start, rows.len());
            let wc = DVector::from_column_slice(&w[rows.clone()]);
            let v = match (fit.kind(), w_ipw) {
                (EstimatorKind::Balancing, _) => target.clone(),
                (EstimatorKind::Projection, Some(ipw)) => block.tr_mul(&DVector::from_column_slice(&ipw[rows.clone()])),
                (EstimatorKind::Projection, None) => return Err(Error::PropensityUnavailable),
                (k, _) => return Err(Error::InvalidInput(format!("no sandwich form for `{k}` fits"))),
            };
            let first = block.tr_mul(&wc) - v;
            let last = wc.dot(&y.rows(rows.start, rows.len())) - fit.point;
            Ok((first, last))
        })
        .collect()
}

/// `σ̂² = (1/n) Σ_c (η_cᵀL)²` with `L = (ĥ, −1)` and `ĥ = Φ⁺y`.
pub fn sandwich_from_system(
    sys: &DesignSystem,
    y: &DVector<f64>,
    fit: &EstimateReport,
    w_ipw: Option<&[f64]>,
    level: f64,
    allow_infeasible: bool,
) -> Result<VarianceReport> {
    if !fit.feasible() && !allow_infeasible {
        return Err(Error::InfeasibleFit(vec![fit.kind().to_string()]));
    }
    let h = sys.h_hat(y);
    let eta = estimating_equations(sys, y, fit, w_ipw)?;
    let n = eta.len();
    let s2 = eta.iter().map(|(first, last)| (first.dot(&h) - last).powi(2)).sum::<f64>() / n as f64;
    VarianceReport::new(fit.kind(), fit.point, s2, n, level)
}

/// Variance and confidence interval for a fit; the form follows the fit's estimator.
///
/// Balancing and projection fits use the sandwich form; the others use the per-cluster sample variance.
/// Infeasible balancing fits are refused.
pub fn sandwich_variance(
    data: &Dataset,
    s: &LowRankStructure,
    f: &CounterfactualWeight,
    fit: &EstimateReport,
    e: Option<&PropensityModel>,
    level: f64,
) -> Result<VarianceReport> {
    match fit.kind() {
        EstimatorKind::Balancing | EstimatorKind::Projection => {
            let sys = DesignSystem::new(data, s, f, &FitOptions::default())?;
            let y = DVector::from_vec(data.outcomes());
            let ipw = match fit.kind() {
                EstimatorKind::Projection => Some(ipw_weights(data, f, e.ok_or(Error::PropensityUnavailable)?)?),
                _ => None,
            };
            sandwich_from_system(&sys, &y, fit, ipw.as_deref(), level, false)
        }
        EstimatorKind::WeightedProjection | EstimatorKind::ExposureIpw => {
            if e.is_none_or(|e| !e.is_known()) {
                return Err(Error::PropensityUnavailable);
            }
            cluster_sample_variance(data, fit, level)
        }
        EstimatorKind::Ipw => cluster_sample_variance(data, fit, level),
    }
}

/// Residual degrees of freedom used by the noise scale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfDenominator {
    /// `M − rank(Φ)`: one residual per unit.
    #[default]
    Units,
    /// `n − rank(Φ)` with `n` the number of clusters.
    Clusters,
}

pub fn sigma_from_system(sys: &DesignSystem, y: &DVector<f64>, denominator: DfDenominator) -> Result<f64> {
    let count = match denominator {
        DfDenominator::Units => sys.phi().nrows(),
        DfDenominator::Clusters => sys.n(),
    };
    let df = count as i64 - sys.rank() as i64;
    if df <= 0 {
        return Err(Error::DegenerateDf { denominator: df });
    }
    Ok((sys.residual_sum_squares(y) / df as f64).sqrt())
}

/// `sqrt(‖(I − P_Φ)y‖² / df)`.
pub fn sigma_noise_hat(data: &Dataset, s: &LowRankStructure, denominator: DfDenominator) -> Result<f64> {
    // The target plays no part in the residuals.
    let sys = DesignSystem::new(data, s, &CounterfactualWeight::SparseTable { entries: vec![] }, &FitOptions::default())?;
    sigma_from_system(&sys, &DVector::from_vec(data.outcomes()), denominator)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureTest {
    pub statistic: f64,
    pub p_value: f64,
}

/// `S = ((ŵ_l − ŵ_L)ᵀy / (σ̂ ‖ŵ_l − ŵ_L‖))²` with its `χ²₁` upper-tail probability.
pub fn contrast_test(w_l: &[f64], w_big: &[f64], y: &[f64], sigma_hat: f64) -> Result<StructureTest> {
    if w_l.len() != w_big.len() || w_l.len() != y.len() {
        return Err(Error::dim("weight vectors and outcomes differ in length"));
    }
    let delta: Vec<f64> = w_l.iter().zip(w_big).map(|(a, b)| a - b).collect();
    let norm = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = w_big.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    if norm <= 1e-10 * scale {
        return Err(Error::DegenerateContrast);
    }
    if !(sigma_hat > 0.0) {
        return Err(Error::InvalidInput(format!("noise scale {sigma_hat} must be positive")));
    }
    let z = delta.iter().zip(y).map(|(d, y)| d * y).sum::<f64>() / (sigma_hat * norm);
    let statistic = z * z;
    Ok(StructureTest {
        statistic,
        p_value: chi2_1_sf(statistic),
    })
}

/// Tests `S_l` against the more flexible `S_L` through their balancing weights.
pub fn structure_test(
    data: &Dataset,
    f: &CounterfactualWeight,
    s_l: &LowRankStructure,
    s_big: &LowRankStructure,
    sigma_hat: f64,
) -> Result<StructureTest> {
    let y = DVector::from_vec(data.outcomes());
    let opts = FitOptions::default();
    let a = DesignSystem::new(data, s_l, f, &opts)?.balancing(&y)?;
    let b = DesignSystem::new(data, s_big, f, &opts)?.balancing(&y)?;
    let bad: Vec<String> = [(&a, s_l), (&b, s_big)]
        .iter()
        .filter(|(fit, _)| !fit.feasible())
        .map(|(_, s)| s.label().to_string())
        .collect();
    if !bad.is_empty() {
        return Err(Error::InfeasibleFit(bad));
    }
    contrast_test(&a.weights.weights, &b.weights.weights, y.as_slice(), sigma_hat)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub candidate: String,
    pub statistic: f64,
    pub p_value: f64,
    pub passed: bool,
    /// The candidate's weights coincide with the reference's.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub candidates: Vec<String>,
    /// One row per candidate except the last, which is the reference.
    pub tests: Vec<SelectionRow>,
    /// Zero-based index of the selected candidate.
    pub chosen: usize,
    pub alpha: f64,
    pub threshold: f64,
    pub sigma_hat: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SelectionReport {
    pub fn chosen_label(&self) -> &str {
        &self.candidates[self.chosen]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectOptions {
    pub denominator: DfDenominator,
    pub fit: FitOptions,
    /// Warn when a candidate's design is not nested in the reference's.
    pub check_nesting: bool,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            denominator: DfDenominator::Units,
            fit: FitOptions::default(),
            check_nesting: true,
        }
    }
}

/// Picks the first candidate, ordered from most to least restrictive, whose statistic
/// against the last candidate stays below the `χ²₁` critical value.
pub fn select_structure(
    data: &Dataset,
    f: &CounterfactualWeight,
    candidates: &[LowRankStructure],
    alpha: f64,
    opts: &SelectOptions,
) -> Result<SelectionReport> {
    let Some(reference) = candidates.last() else {
        return Err(Error::InvalidInput("no candidate structures".into()));
    };
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha {alpha} must lie in (0, 1)")));
    }
    let y = DVector::from_vec(data.outcomes());
    let mut fits = Vec::with_capacity(candidates.len());
    let mut sigma_hat = f64::NAN;
    for (k, s) in candidates.iter().enumerate() {
        let sys = DesignSystem::new(data, s, f, &opts.fit)?;
        fits.push(sys.balancing(&y)?);
        if k + 1 == candidates.len() {
            sigma_hat = sigma_from_system(&sys, &y, opts.denominator)?;
        }
    }
    let bad: Vec<String> = fits
        .iter()
        .zip(candidates)
        .filter(|(fit, _)| !fit.feasible())
        .map(|(_, s)| s.label().to_string())
        .collect();
    if !bad.is_empty() {
        return Err(Error::InfeasibleFit(bad));
    }
    let threshold = chi2_1_quantile(alpha);
    let mut warnings = Vec::new();
    let mut tests = Vec::new();
    let big = &fits[fits.len() - 1].weights.weights;
    for (fit, s) in fits.iter().zip(candidates).take(candidates.len() - 1) {
        if opts.check_nesting && !nested_rank_check(s, reference, data, opts.fit.tol.rcond)? {
            warnings.push(format!("`{}` is not nested in `{}` on the observed design", s.label(), reference.label()));
        }
        let row = match contrast_test(&fit.weights.weights, big, y.as_slice(), sigma_hat) {
            Ok(t) => SelectionRow {
                candidate: s.label().to_string(),
                statistic: t.statistic,
                p_value: t.p_value,
                passed: t.statistic < threshold,
                identical: false,
            },
            Err(Error::DegenerateContrast) => SelectionRow {
                candidate: s.label().to_string(),
                statistic: 0.0,
                p_value: 1.0,
                passed: true,
                identical: true,
            },
            Err(e) => return Err(e),
        };
        tests.push(row);
    }
    let chosen = tests.iter().position(|r| r.passed).unwrap_or(candidates.len() - 1);
    Ok(SelectionReport {
        candidates: candidates.iter().map(|s| s.label().to_string()).collect(),
        tests,
        chosen,
        alpha,
        threshold,
        sigma_hat,
        warnings,
    })
}
