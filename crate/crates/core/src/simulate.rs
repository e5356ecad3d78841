//! Simulated clustered studies and a Monte-Carlo harness for the weighting estimators.
//!
//! Covariates are Gaussian with Toeplitz correlation, treatments follow a probit law in the
//! cluster and unit covariate means, and outcomes are linear in a known low-rank structure.
//! Every replicate draws from its own ChaCha stream, so results do not depend on scheduling.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClusterSample, CounterfactualWeight, Dataset, PropensityModel, UnitProbability, DEFAULT_PATTERN_CAP};
use crate::estimators::{
    ipw_weights, weighted_projection_fit, DesignSystem, EstimateReport, EstimatorKind, FitOptions, WprojMode,
};
use crate::error::{Error, Result};
use crate::inference::{cluster_sample_variance, sandwich_from_system, VarianceReport};
use crate::structures::{
    build_structure, design_matrix, ColumnRef, CovariateTerm, LowRankStructure, NeighborSpec, StructureSpec,
};

/// Seed of the clusters used for SNR calibration.
pub const CALIBRATION_SEED: u64 = 0x5eed_ca11;
/// Seed of the clusters used for the population estimand.
pub const TRUTH_SEED: u64 = 0x5eed_7207;
pub const CALIBRATION_CLUSTERS: usize = 2000;
const CHUNK: usize = 2000;

/// True interference structure of the outcome model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Interference {
    /// Treatment pattern of the `k` nearest neighbors, `2^k` levels.
    Knn(usize),
    /// Number treated among the `k` nearest neighbors, `k + 1` levels.
    Stratified(usize),
    /// Each unit has its own type; treated units of type `τ` shift outcomes by `τ`.
    Additive,
}

impl Interference {
    /// Neighbor rows of the structure: pattern slots, count levels or type/status pairs.
    pub fn levels(self, max_size: usize) -> usize {
        match self {
            Interference::Knn(k) => 1 << k,
            Interference::Stratified(k) => k + 1,
            Interference::Additive => 2 * max_size,
        }
    }

    /// Coefficients of one covariate term across levels, before scaling by `γ`.
    fn level_coefficients(self, max_size: usize) -> Vec<f64> {
        match self {
            Interference::Knn(_) | Interference::Stratified(_) => {
                (1..=self.levels(max_size)).map(|v| v as f64).collect()
            }
            Interference::Additive => (0..2 * max_size)
                .map(|j| if j % 2 == 1 { (j / 2 + 1) as f64 } else { 0.0 })
                .collect(),
        }
    }

    /// The structure `ψ ⊗ z` with `z = (x_1, …, x_{p−1}, x̄_p)`.
    pub fn structure_spec(self, p: usize, max_size: usize) -> StructureSpec {
        let neighbors = NeighborSpec::KnnColumns { columns: (0..p).collect() };
        let inner = match self {
            Interference::Knn(k) => StructureSpec::KnnPattern { k, neighbors },
            Interference::Stratified(k) => StructureSpec::StratifiedCount {
                k,
                include_own: false,
                neighbors,
            },
            Interference::Additive => StructureSpec::AdditiveTypes {
                types: max_size,
                column: ColumnRef::Index(p),
            },
        };
        StructureSpec::tensor(inner, covariate_terms(p))
    }
}

fn covariate_terms(p: usize) -> Vec<CovariateTerm> {
    let mut terms: Vec<CovariateTerm> = (0..p - 1).map(|j| CovariateTerm::Column(ColumnRef::Index(j))).collect();
    terms.push(CovariateTerm::ClusterMean(ColumnRef::Index(p - 1)));
    terms
}

impl fmt::Display for Interference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Interference::Knn(k) => write!(f, "knn{k}"),
            Interference::Stratified(k) => write!(f, "stratified{k}"),
            Interference::Additive => f.write_str("additive"),
        }
    }
}

impl FromStr for Interference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSpec(format!("unknown interference `{s}`; expected knnK, stratifiedK or additive"));
        if s == "additive" {
            return Ok(Interference::Additive);
        }
        if let Some(k) = s.strip_prefix("knn") {
            let k: usize = k.parse().map_err(|_| bad())?;
            if k == 0 || k > 20 {
                return Err(bad());
            }
            return Ok(Interference::Knn(k));
        }
        if let Some(k) = s.strip_prefix("stratified") {
            return Ok(Interference::Stratified(k.parse().map_err(|_| bad())?));
        }
        Err(bad())
    }
}

impl TryFrom<String> for Interference {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Interference> for String {
    fn from(i: Interference) -> Self {
        i.to_string()
    }
}

fn default_sizes() -> BTreeMap<usize, f64> {
    BTreeMap::from([(10, 0.5), (15, 0.5)])
}

fn default_truth_clusters() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DGPConfig {
    pub n: usize,
    /// Cluster size distribution.
    #[serde(default = "default_sizes")]
    pub cluster_sizes: BTreeMap<usize, f64>,
    pub p: usize,
    pub rho: f64,
    /// Counterfactual deviation of the intervention from the assignment law.
    pub kappa: f64,
    pub snr_target: f64,
    pub sigma2: f64,
    pub interference: Interference,
    pub seed: u64,
    /// Signal scale; calibrated to `snr_target` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Clusters drawn for the population estimand.
    #[serde(default = "default_truth_clusters")]
    pub truth_clusters: usize,
}

impl Default for DGPConfig {
    fn default() -> Self {
        Self {
            n: 300,
            cluster_sizes: default_sizes(),
            p: 4,
            rho: 0.5,
            kappa: 0.2,
            snr_target: 0.2,
            sigma2: 1.0,
            interference: Interference::Knn(5),
            seed: 1,
            gamma: None,
            truth_clusters: default_truth_clusters(),
        }
    }
}

impl DGPConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.p == 0 {
            return bad("p must be positive".into());
        }
        if self.cluster_sizes.is_empty() || self.cluster_sizes.keys().any(|&m| m == 0) {
            return bad("cluster sizes must be positive".into());
        }
        if self.cluster_sizes.values().any(|&q| !(q >= 0.0)) {
            return bad("cluster size probabilities must be nonnegative".into());
        }
        let total: f64 = self.cluster_sizes.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("cluster size probabilities sum to {total}"));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return bad(format!("rho = {} outside (-1, 1)", self.rho));
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return bad(format!("sigma2 = {} must be positive", self.sigma2));
        }
        if !(self.snr_target > 0.0) || !self.snr_target.is_finite() {
            return bad(format!("snr_target = {} must be positive", self.snr_target));
        }
        if !self.kappa.is_finite() {
            return bad("kappa must be finite".into());
        }
        if self.gamma.is_some_and(|g| !g.is_finite()) {
            return bad("gamma must be finite".into());
        }
        if self.truth_clusters == 0 {
            return bad("truth_clusters must be positive".into());
        }
        Ok(())
    }

    pub fn max_size(&self) -> usize {
        self.cluster_sizes.keys().copied().max().unwrap_or(0)
    }

    /// Covariate columns of the generated data; additive studies carry a trailing type column.
    pub fn covariate_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.p).map(|j| format!("x{j}")).collect();
        if self.interference == Interference::Additive {
            names.push("type".into());
        }
        names
    }

    pub fn structure_spec(&self) -> StructureSpec {
        self.interference.structure_spec(self.p, self.max_size())
    }

    /// `h = γ · c ⊗ 1_p` with `c` the level coefficients of the interference kind.
    pub fn h(&self, gamma: f64) -> DVector<f64> {
        let c = self.interference.level_coefficients(self.max_size());
        DVector::from_iterator(c.len() * self.p, c.iter().flat_map(|v| std::iter::repeat_n(gamma * v, self.p)))
    }

    pub fn propensity(&self) -> PropensityModel {
        PropensityModel::IndependentBernoulli { probability: self.probit(0.0) }
    }

    pub fn policy(&self) -> CounterfactualWeight {
        CounterfactualWeight::bernoulli(self.probit(self.kappa))
    }

    fn probit(&self, kappa: f64) -> UnitProbability {
        UnitProbability::Probit {
            kappa,
            columns: Some((0..self.p).collect()),
        }
    }

    /// The configured `γ`, or the calibrated one.
    pub fn resolve_gamma(&self) -> Result<f64> {
        match self.gamma {
            Some(g) => Ok(g),
            None => Ok(calibrate_snr(self)?.gamma),
        }
    }
}

/// Lower Cholesky factor of the Toeplitz matrix `ρ^{|j−k|}`.
fn toeplitz_factor(p: usize, rho: f64) -> Result<DMatrix<f64>> {
    let sigma = DMatrix::from_fn(p, p, |j, k| rho.powi((j as i32 - k as i32).abs()));
    sigma
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::InvalidSpec(format!("Toeplitz matrix with rho = {rho} is not positive definite")))
}

/// Draws clusters with covariates and treatments; outcomes are zero.
struct ClusterDraw<'a> {
    cfg: &'a DGPConfig,
    sizes: Vec<usize>,
    size_law: WeightedIndex<f64>,
    chol: DMatrix<f64>,
    propensity: UnitProbability,
}

impl<'a> ClusterDraw<'a> {
    fn new(cfg: &'a DGPConfig) -> Result<Self> {
        cfg.validate()?;
        let size_law = WeightedIndex::new(cfg.cluster_sizes.values().copied())
            .map_err(|e| Error::InvalidSpec(format!("cluster size distribution: {e}")))?;
        Ok(Self {
            cfg,
            sizes: cfg.cluster_sizes.keys().copied().collect(),
            size_law,
            chol: toeplitz_factor(cfg.p, cfg.rho)?,
            propensity: cfg.probit(0.0),
        })
    }

    fn draw(&self, rng: &mut ChaCha8Rng, id: String) -> Result<ClusterSample> {
        let p = self.cfg.p;
        let additive = self.cfg.interference == Interference::Additive;
        let width = p + additive as usize;
        let m = self.sizes[self.size_law.sample(rng)];
        let mut flat = Vec::with_capacity(m * width);
        for i in 0..m {
            let z = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
            flat.extend((&self.chol * z).iter());
            if additive {
                flat.push((i + 1) as f64);
            }
        }
        let c = ClusterSample::from_flat(id, flat, width, vec![0; m], vec![0.0; m])?;
        let probs = self.propensity.probabilities(&c)?;
        let a = probs.iter().map(|&q| u8::from(rng.random::<f64>() < q)).collect();
        c.with_treatments(a)
    }

    fn dataset(&self, rng: &mut ChaCha8Rng, n: usize, prefix: &str) -> Result<Dataset> {
        let clusters = (0..n)
            .map(|c| self.draw(rng, format!("{prefix}{c}")))
            .collect::<Result<Vec<_>>>()?;
        Dataset::with_names(clusters, self.cfg.covariate_names())
    }
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Noise-free outcomes `g_ci(A_c) = φ_ci(A_c)ᵀh`.
fn signal(s: &LowRankStructure, data: &Dataset, h: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(design_matrix(s, data)? * h)
}

/// Per-cluster `v_cᵀh` with `v_c = (1/M_c) Σ_a f(a) Σ_i φ_ci(a)`.
fn cluster_estimands(
    s: &LowRankStructure,
    data: &Dataset,
    f: &CounterfactualWeight,
    h: &DVector<f64>,
) -> Result<Vec<f64>> {
    let d = h.len();
    data.clusters()
        .iter()
        .map(|c| {
            let law = f.law(c, DEFAULT_PATTERN_CAP)?;
            let v = s.prepare(c)?.expected_sum(&law, d, DEFAULT_PATTERN_CAP)?;
            Ok(v.dot(h) / c.size() as f64)
        })
        .collect()
}

/// One simulated study.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub data: Dataset,
    /// `(1/n) Σ_c v_cᵀh`: the estimand conditional on the drawn covariates.
    pub mu_f: f64,
    pub propensity: PropensityModel,
    pub policy: CounterfactualWeight,
    pub structure: LowRankStructure,
    pub gamma: f64,
}

/// Draws replicate `replicate` of the study. Identical inputs give identical data.
pub fn gen_dataset(cfg: &DGPConfig, replicate: u64) -> Result<SimulatedData> {
    let gamma = cfg.resolve_gamma()?;
    let draw = ClusterDraw::new(cfg)?;
    let mut rng = stream(cfg.seed, replicate);
    let data = draw.dataset(&mut rng, cfg.n, "c")?;
    let s = build_structure(&cfg.structure_spec(), &data)?;
    let h = cfg.h(gamma);
    let g = signal(&s, &data, &h)?;
    let sd = cfg.sigma2.sqrt();
    let y: Vec<f64> = g.iter().map(|v| v + sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let data = data.with_outcomes(&y)?;
    let policy = cfg.policy();
    let mu_f = cluster_estimands(&s, &data, &policy, &h)?.iter().sum::<f64>() / cfg.n as f64;
    Ok(SimulatedData {
        data,
        mu_f,
        propensity: cfg.propensity(),
        policy,
        structure: s,
        gamma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub gamma: f64,
    /// Delta-method standard error of `gamma`.
    pub std_error: f64,
    /// SNR at `γ = 1`.
    pub unit_snr: f64,
    pub clusters: usize,
}

/// `γ` such that `Var[g_cᵀw_IPW,c] / (σ² E‖w_IPW,c‖²)` equals the target, on
/// [`CALIBRATION_CLUSTERS`] clusters from a fixed seed.
pub fn calibrate_snr(cfg: &DGPConfig) -> Result<Calibration> {
    calibrate_snr_with(cfg, CALIBRATION_CLUSTERS)
}

pub fn calibrate_snr_with(cfg: &DGPConfig, clusters: usize) -> Result<Calibration> {
    if clusters < 2 {
        return Err(Error::InvalidSpec("calibration needs at least two clusters".into()));
    }
    let draw = ClusterDraw::new(cfg)?;
    let data = draw.dataset(&mut stream(CALIBRATION_SEED, 0), clusters, "cal")?;
    let s = build_structure(&cfg.structure_spec(), &data)?;
    let g = signal(&s, &data, &cfg.h(1.0))?;
    let w = ipw_weights(&data, &cfg.policy(), &cfg.propensity())?;
    let mut offsets = data.offsets();
    offsets.push(data.total_units());
    let (u, q): (Vec<f64>, Vec<f64>) = offsets
        .windows(2)
        .map(|r| {
            let rows = r[0]..r[1];
            let u = rows.clone().map(|i| g[i] * w[i]).sum::<f64>();
            let q = rows.map(|i| w[i] * w[i]).sum::<f64>();
            (u, q)
        })
        .unzip();
    let n = clusters as f64;
    let u_bar = u.iter().sum::<f64>() / n;
    let q_bar = q.iter().sum::<f64>() / n;
    let var_u = u.iter().map(|v| (v - u_bar).powi(2)).sum::<f64>() / n;
    if !(var_u > 0.0) || !(q_bar > 0.0) {
        return Err(Error::CalibrationFailed(format!(
            "signal variance {var_u} and weight norm {q_bar} at unit scale"
        )));
    }
    let unit_snr = var_u / (cfg.sigma2 * q_bar);
    let gamma = (cfg.snr_target / unit_snr).sqrt();
    // influence of log γ = ½ (log E q − log Var u)
    let infl: Vec<f64> = u
        .iter()
        .zip(&q)
        .map(|(ui, qi)| 0.5 * ((qi - q_bar) / q_bar - ((ui - u_bar).powi(2) - var_u) / var_u))
        .collect();
    let se_log = (infl.iter().map(|v| v * v).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
    Ok(Calibration {
        gamma,
        std_error: gamma * se_log,
        unit_snr,
        clusters,
    })
}

/// Population estimand `E[v_cᵀh]` and its Monte-Carlo standard error, over
/// `cfg.truth_clusters` clusters drawn from a fixed seed.
pub fn population_mu_f(cfg: &DGPConfig, gamma: f64) -> Result<(f64, f64)> {
    let draw = ClusterDraw::new(cfg)?;
    let h = cfg.h(gamma);
    let spec = cfg.structure_spec();
    let policy = cfg.policy();
    let chunks = cfg.truth_clusters.div_ceil(CHUNK);
    let values = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let size = CHUNK.min(cfg.truth_clusters - k * CHUNK);
            let data = draw.dataset(&mut stream(TRUTH_SEED, k as u64), size, "pop")?;
            let s = build_structure(&spec, &data)?;
            cluster_estimands(&s, &data, &policy, &h)
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Result of one estimator on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub point: Option<f64>,
    pub feasible: bool,
    pub sigma2_hat: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl FitRecord {
    fn failed(e: &Error) -> Self {
        Self {
            point: None,
            feasible: false,
            sigma2_hat: None,
            ci_low: None,
            ci_high: None,
            error: Some(e.to_string()),
        }
    }

    fn from_fit(fit: &EstimateReport, v: Option<Result<VarianceReport>>) -> Self {
        let mut r = Self {
            point: Some(fit.point),
            feasible: fit.feasible(),
            sigma2_hat: None,
            ci_low: None,
            ci_high: None,
            error: None,
        };
        match v {
            Some(Ok(v)) => {
                r.sigma2_hat = Some(v.sigma2_hat);
                r.ci_low = Some(v.ci_low);
                r.ci_high = Some(v.ci_high);
            }
            Some(Err(e)) => r.error = Some(e.to_string()),
            None => {}
        }
        r
    }

    /// Counted in the summaries: finished without error and, for balancing, feasible.
    fn usable(&self) -> bool {
        self.error.is_none() && self.point.is_some() && self.feasible
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: u64,
    /// Estimand conditional on the replicate's covariates.
    pub sample_mu_f: f64,
    /// One record per requested estimator, in request order.
    pub fits: Vec<FitRecord>,
}

/// Summary of one estimator over all replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCRow {
    pub estimator: EstimatorKind,
    /// Replicates entering the summaries.
    pub used: usize,
    pub failures: usize,
    pub bias: Option<f64>,
    /// Absent with fewer than two usable replicates.
    pub sd: Option<f64>,
    pub coverage: Option<f64>,
    pub ci_length: Option<f64>,
    pub mean_sigma2_hat: Option<f64>,
    pub feasibility_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCResult {
    pub config: DGPConfig,
    pub gamma: f64,
    /// Population estimand the bias and coverage refer to.
    pub mu_f: f64,
    pub mu_f_std_error: f64,
    pub reps: usize,
    pub level: f64,
    pub rows: Vec<MCRow>,
    pub replicates: Vec<ReplicateRecord>,
}

impl MCResult {
    pub fn row(&self, kind: EstimatorKind) -> Option<&MCRow> {
        self.rows.iter().find(|r| r.estimator == kind)
    }
}

fn replicate(
    cfg: &DGPConfig,
    index: u64,
    estimators: &[EstimatorKind],
    level: f64,
) -> Result<ReplicateRecord> {
    let sim = gen_dataset(cfg, index)?;
    let data = &sim.data;
    let y = DVector::from_vec(data.outcomes());
    let opts = FitOptions::default();
    let needs_system = estimators
        .iter()
        .any(|k| matches!(k, EstimatorKind::Balancing | EstimatorKind::Projection));
    let sys = needs_system.then(|| DesignSystem::new(data, &sim.structure, &sim.policy, &opts));
    let needs_ipw = estimators
        .iter()
        .any(|k| matches!(k, EstimatorKind::Ipw | EstimatorKind::Projection));
    let w_ipw = needs_ipw.then(|| ipw_weights(data, &sim.policy, &sim.propensity));
    let fits = estimators
        .iter()
        .map(|kind| {
            let run = || -> Result<FitRecord> {
                match kind {
                    EstimatorKind::Ipw => {
                        let w = w_ipw.as_ref().expect("requested").as_ref().map_err(Clone::clone)?;
                        let fit = EstimateReport::plain(EstimatorKind::Ipw, data, w.clone());
                        Ok(FitRecord::from_fit(&fit, Some(cluster_sample_variance(data, &fit, level))))
                    }
                    EstimatorKind::Balancing => {
                        let sys = sys.as_ref().expect("requested").as_ref().map_err(Clone::clone)?;
                        let fit = sys.balancing(&y)?;
                        let v = fit
                            .feasible()
                            .then(|| sandwich_from_system(sys, &y, &fit, None, level, false));
                        Ok(FitRecord::from_fit(&fit, v))
                    }
                    EstimatorKind::Projection => {
                        let sys = sys.as_ref().expect("requested").as_ref().map_err(Clone::clone)?;
                        let w = w_ipw.as_ref().expect("requested").as_ref().map_err(Clone::clone)?;
                        let fit = sys.projection(&y, w)?;
                        let v = sandwich_from_system(sys, &y, &fit, Some(w), level, false);
                        Ok(FitRecord::from_fit(&fit, Some(v)))
                    }
                    EstimatorKind::WeightedProjection => {
                        let fit = weighted_projection_fit(
                            data,
                            &sim.structure,
                            &sim.policy,
                            &sim.propensity,
                            WprojMode::Auto,
                            &opts,
                        )?;
                        Ok(FitRecord::from_fit(&fit, Some(cluster_sample_variance(data, &fit, level))))
                    }
                    EstimatorKind::ExposureIpw => Err(Error::InvalidInput(
                        "the exposure-collapsed estimator needs an exposure mapping and is not simulated".into(),
                    )),
                }
            };
            run().unwrap_or_else(|e| FitRecord::failed(&e))
        })
        .collect();
    Ok(ReplicateRecord {
        replicate: index,
        sample_mu_f: sim.mu_f,
        fits,
    })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(kind: EstimatorKind, k: usize, records: &[ReplicateRecord], mu: f64) -> MCRow {
    let fits: Vec<&FitRecord> = records.iter().map(|r| &r.fits[k]).collect();
    let used: Vec<&FitRecord> = fits.iter().copied().filter(|f| f.usable()).collect();
    let points: Vec<f64> = used.iter().filter_map(|f| f.point).collect();
    let point_mean = mean(&points);
    let sd = (points.len() >= 2).then(|| {
        let m = point_mean.unwrap_or(0.0);
        (points.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (points.len() - 1) as f64).sqrt()
    });
    let intervals: Vec<(f64, f64)> = used.iter().filter_map(|f| Some((f.ci_low?, f.ci_high?))).collect();
    let covered: Vec<f64> = intervals.iter().map(|&(lo, hi)| f64::from(u8::from(lo <= mu && mu <= hi))).collect();
    let lengths: Vec<f64> = intervals.iter().map(|&(lo, hi)| hi - lo).collect();
    let s2: Vec<f64> = used.iter().filter_map(|f| f.sigma2_hat).collect();
    MCRow {
        estimator: kind,
        used: used.len(),
        failures: fits.iter().filter(|f| f.error.is_some()).count(),
        bias: point_mean.map(|m| m - mu),
        sd,
        coverage: mean(&covered),
        ci_length: mean(&lengths),
        mean_sigma2_hat: mean(&s2),
        feasibility_rate: fits.iter().filter(|f| f.error.is_none() && f.feasible).count() as f64
            / fits.len().max(1) as f64,
    }
}

/// Runs `reps` replicates of each estimator against the population estimand.
/// Parallel and serial runs give identical results.
pub fn monte_carlo(
    cfg: &DGPConfig,
    reps: usize,
    estimators: &[EstimatorKind],
    level: f64,
    parallel: bool,
) -> Result<MCResult> {
    if reps == 0 {
        return Err(Error::InvalidInput("at least one replicate is required".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level {level} outside (0, 1)")));
    }
    cfg.validate()?;
    let gamma = cfg.resolve_gamma()?;
    let cfg = DGPConfig {
        gamma: Some(gamma),
        ..cfg.clone()
    };
    let (mu, mu_se) = population_mu_f(&cfg, gamma)?;
    let run = |i: usize| replicate(&cfg, i as u64, estimators, level);
    let records = if parallel {
        (0..reps).into_par_iter().map(run).collect::<Result<Vec<_>>>()?
    } else {
        (0..reps).map(run).collect::<Result<Vec<_>>>()?
    };
    let rows = estimators
        .iter()
        .enumerate()
        .map(|(k, &kind)| summarize(kind, k, &records, mu))
        .collect();
    Ok(MCResult {
        config: cfg,
        gamma,
        mu_f: mu,
        mu_f_std_error: mu_se,
        reps,
        level,
        rows,
        replicates: records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    N,
    Kappa,
    Snr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl Sweep {
    /// Settings along the axis; `γ` is recalibrated whenever the SNR or `κ` change.
    pub fn configs(&self, base: &DGPConfig) -> Result<Vec<DGPConfig>> {
        self.values
            .iter()
            .map(|&v| {
                let mut c = base.clone();
                match self.axis {
                    SweepAxis::N => {
                        if v < 1.0 || v.fract() != 0.0 {
                            return Err(Error::InvalidSpec(format!("cluster count {v} is not a positive integer")));
                        }
                        c.n = v as usize;
                    }
                    SweepAxis::Kappa => {
                        c.kappa = v;
                        c.gamma = None;
                    }
                    SweepAxis::Snr => {
                        c.snr_target = v;
                        c.gamma = None;
                    }
                }
                Ok(c)
            })
            .collect()
    }
}

/// Named study settings mirroring the published simulation panels at desk scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Cluster count varies; `κ = 0.2`, SNR 0.2.
    Fig1Left,
    /// SNR varies at 300 clusters.
    Fig1Mid,
    /// `κ` varies at 300 clusters.
    Fig1Right,
    Stratified,
    Additive,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Fig1Left,
        Preset::Fig1Mid,
        Preset::Fig1Right,
        Preset::Stratified,
        Preset::Additive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig1Left => "fig1-left",
            Preset::Fig1Mid => "fig1-mid",
            Preset::Fig1Right => "fig1-right",
            Preset::Stratified => "stratified",
            Preset::Additive => "additive",
        }
    }

    pub fn config(self) -> DGPConfig {
        let interference = match self {
            Preset::Stratified => Interference::Stratified(5),
            Preset::Additive => Interference::Additive,
            _ => Interference::Knn(5),
        };
        DGPConfig {
            interference,
            ..DGPConfig::default()
        }
    }

    pub fn sweep(self) -> Sweep {
        let (axis, values) = match self {
            Preset::Fig1Mid => (SweepAxis::Snr, vec![0.1, 0.2, 0.5, 1.0, 2.0]),
            Preset::Fig1Right => (SweepAxis::Kappa, vec![0.0, 0.2, 1.0, 2.0, 4.0, 6.0]),
            _ => (SweepAxis::N, vec![100.0, 300.0, 500.0, 700.0]),
        };
        Sweep { axis, values }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
            Error::InvalidSpec(format!("unknown preset `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

/// Runs `monte_carlo` at every setting of a sweep.
pub fn run_sweep(
    base: &DGPConfig,
    sweep: &Sweep,
    reps: usize,
    estimators: &[EstimatorKind],
    level: f64,
    parallel: bool,
) -> Result<Vec<MCResult>> {
    sweep
        .configs(base)?
        .iter()
        .map(|c| monte_carlo(c, reps, estimators, level, parallel))
        .collect()
}

const CSV_HEADER: [&str; 16] = [
    "interference",
    "n",
    "kappa",
    "snr",
    "sigma2",
    "gamma",
    "mu_f",
    "estimator",
    "reps",
    "used",
    "bias",
    "sd",
    "coverage",
    "ci_length",
    "feasibility_rate",
    "mean_sigma2_hat",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per setting and estimator.
pub fn write_results_csv<W: Write>(results: &[MCResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in results {
        for row in &r.rows {
            w.write_record([
                r.config.interference.to_string(),
                r.config.n.to_string(),
                r.config.kappa.to_string(),
                r.config.snr_target.to_string(),
                r.config.sigma2.to_string(),
                r.gamma.to_string(),
                r.mu_f.to_string(),
                row.estimator.to_string(),
                r.reps.to_string(),
                row.used.to_string(),
                opt(row.bias),
                opt(row.sd),
                opt(row.coverage),
                opt(row.ci_length),
                row.feasibility_rate.to_string(),
                opt(row.mean_sigma2_hat),
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn results_csv(results: &[MCResult]) -> Result<String> {
    let mut buf = Vec::new();
    write_results_csv(results, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))
}

#[cfg(test)]
mod tests;
