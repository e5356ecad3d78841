use std::path::Path;

use clusterbal::data::{CounterfactualWeight, Dataset, PropensityModel};
use clusterbal::diagnostics::{imbalance_report, EntryState, ImbalanceOptions, ImbalanceReport, ScaleWeighting};
use clusterbal::estimators::{
    exposure_collapsed_ipw, ipw_fit, ipw_weights, weighted_projection_fit, DesignSystem, EstimateReport,
    EstimatorKind, FitOptions, WprojMode,
};
use clusterbal::inference::{cluster_sample_variance, sandwich_from_system, select_structure, SelectOptions, VarianceReport};
use clusterbal::io::{load_dataset, DataFormat};
use clusterbal::simulate::{
    calibrate_snr, monte_carlo, results_csv, run_sweep, DGPConfig, Preset, Sweep, SweepAxis,
};
use clusterbal::structures::{build_structure, BuiltinExposure, LowRankStructure, StructureSpec};
use clusterbal::DEFAULT_PATTERN_CAP;
use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::output::{csv_text, opt, Outputs};
use crate::{BalanceArgs, CalibrateArgs, CliError, DataArgs, DesignArgs, EstimateArgs, FormatArg, SelectArgs, SimulateArgs};

const EXIT_USAGE: u8 = 64;

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

/// Inline JSON when the text starts like a document, otherwise a path to one.
fn json_arg<T: DeserializeOwned>(text: &str, what: &str, out: &mut Outputs) -> Result<T, CliError> {
    let trimmed = text.trim_start();
    let body = if trimmed.starts_with(['{', '[', '"']) {
        text.to_string()
    } else {
        let path = Path::new(text);
        out.record_input(path)?;
        std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?
    };
    serde_json::from_str(&body).map_err(|e| CliError::failure(format!("{what}: {e}")))
}

fn load(args: &DataArgs, out: &mut Outputs) -> Result<(Dataset, CounterfactualWeight), CliError> {
    out.record_input(&args.dataset)?;
    let format = args.format.map(|f| match f {
        FormatArg::Csv => DataFormat::Csv,
        FormatArg::Json => DataFormat::Json,
    });
    let data = load_dataset(&args.dataset, format)?;
    let policy = json_arg(&args.policy, "policy", out)?;
    Ok((data, policy))
}

fn structure(text: &str, data: &Dataset, out: &mut Outputs) -> Result<LowRankStructure, CliError> {
    let spec: StructureSpec = json_arg(text, "structure", out)?;
    Ok(build_structure(&spec, data)?)
}

fn check_level(level: f64) -> Result<(), CliError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(usage(format!("level {level} must lie in (0, 1)")))
    }
}

#[derive(Serialize)]
struct EstimateEntry {
    estimator: EstimatorKind,
    fit: EstimateReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    variance: Option<VarianceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

#[derive(Serialize)]
struct EstimateOutput {
    clusters: usize,
    units: usize,
    results: Vec<EstimateEntry>,
}

fn imbalance_csv(r: &ImbalanceReport) -> Result<Vec<u8>, CliError> {
    let mut rows: Vec<Vec<String>> = r
        .entries
        .iter()
        .map(|e| {
            vec![
                e.covariate.clone(),
                e.effective_treatment.to_string(),
                e.nu.to_string(),
                e.sigma.to_string(),
                opt(e.nu_star),
                match e.state {
                    EntryState::Ok => "ok".into(),
                    EntryState::ScaleDegenerate => "scale_degenerate".into(),
                },
                e.flagged.to_string(),
            ]
        })
        .collect();
    for (label, v) in r.covariates.iter().zip(&r.omnibus) {
        rows.push(vec![label.clone(), "omnibus".into(), String::new(), String::new(), opt(*v), String::new(), String::new()]);
    }
    csv_text(&["covariate", "effective_treatment", "nu", "sigma", "nu_star", "state", "flagged"], rows)
}

pub fn estimate(args: &EstimateArgs) -> Result<(), CliError> {
    check_level(args.level)?;
    let kinds = args
        .estimator
        .iter()
        .map(|s| s.parse::<EstimatorKind>().map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Outputs::new(&args.data.out_dir, "estimate")?;
    let (data, f) = load(&args.data, &mut out)?;
    let e: PropensityModel = if args.propensity.trim() == "unknown" {
        PropensityModel::Unknown
    } else {
        json_arg(&args.propensity, "propensity", &mut out)?
    };
    let s = match &args.structure {
        Some(text) => Some(structure(text, &data, &mut out)?),
        None => None,
    };
    let need_s = || {
        s.as_ref()
            .ok_or_else(|| usage("--structure is required for balancing, projection and wproj"))
    };
    let y = DVector::from_vec(data.outcomes());
    let opts = FitOptions::default();
    let mut system: Option<DesignSystem> = None;
    let mut results = Vec::new();
    let mut infeasible: Option<ImbalanceReport> = None;
    let mut blocked = false;
    for &kind in &kinds {
        if kind.needs_propensity() && !e.is_known() {
            return Err(CliError::failure(format!(
                "{kind} needs a propensity model; pass --propensity or use balancing"
            )));
        }
        let mut note = None;
        let (fit, variance) = match kind {
            EstimatorKind::Ipw => {
                let fit = ipw_fit(&data, &f, &e)?;
                let v = cluster_sample_variance(&data, &fit, args.level)?;
                (fit, Some(v))
            }
            EstimatorKind::Balancing | EstimatorKind::Projection => {
                let s = need_s()?;
                if system.is_none() {
                    system = Some(DesignSystem::new(&data, s, &f, &opts)?);
                }
                let sys = system.as_ref().expect("built above");
                if kind == EstimatorKind::Balancing {
                    let fit = sys.balancing(&y)?;
                    if fit.feasible() {
                        let v = sandwich_from_system(sys, &y, &fit, None, args.level, false)?;
                        (fit, Some(v))
                    } else {
                        if s.tensor_layout().is_some() {
                            infeasible = Some(imbalance_report(&data, s, &f, &fit, &ImbalanceOptions::default())?);
                        }
                        if args.allow_infeasible {
                            note = Some("balancing equation infeasible; point and interval include imbalance bias".into());
                            let v = sandwich_from_system(sys, &y, &fit, None, args.level, true)?;
                            (fit, Some(v))
                        } else {
                            blocked = true;
                            note = Some("balancing equation infeasible; no interval reported".into());
                            (fit, None)
                        }
                    }
                } else {
                    let w = ipw_weights(&data, &f, &e)?;
                    let fit = sys.projection(&y, &w)?;
                    let v = sandwich_from_system(sys, &y, &fit, Some(&w), args.level, false)?;
                    (fit, Some(v))
                }
            }
            EstimatorKind::WeightedProjection => {
                let fit = weighted_projection_fit(&data, need_s()?, &f, &e, WprojMode::Auto, &opts)?;
                let v = cluster_sample_variance(&data, &fit, args.level)?;
                (fit, Some(v))
            }
            EstimatorKind::ExposureIpw => {
                let text = args
                    .exposure
                    .as_ref()
                    .ok_or_else(|| usage("--exposure is required for exposure-ipw"))?;
                let map: BuiltinExposure = json_arg(text, "exposure", &mut out)?;
                let fit = exposure_collapsed_ipw(&data, &map, &f, &e, DEFAULT_PATTERN_CAP)?;
                let v = cluster_sample_variance(&data, &fit, args.level)?;
                (fit, Some(v))
            }
        };
        results.push(EstimateEntry {
            estimator: kind,
            fit,
            variance,
            note,
        });
    }
    let rows = results.iter().map(|r| {
        let v = r.variance.as_ref();
        vec![
            r.estimator.to_string(),
            r.fit.point.to_string(),
            opt(v.map(|v| v.std_error)),
            opt(v.map(|v| v.ci_low)),
            opt(v.map(|v| v.ci_high)),
            opt(v.map(|v| v.level)),
            r.fit.feasible().to_string(),
        ]
    });
    let csv = csv_text(&["estimator", "point", "std_error", "ci_low", "ci_high", "level", "feasible"], rows.collect::<Vec<_>>())?;
    for r in &results {
        match &r.variance {
            Some(v) => println!(
                "{:<14} {:>12.6}  [{:.6}, {:.6}]",
                r.estimator.name(),
                r.fit.point,
                v.ci_low,
                v.ci_high
            ),
            None => println!("{:<14} {:>12.6}  infeasible", r.estimator.name(), r.fit.point),
        }
    }
    out.write("estimate.csv", &csv)?;
    out.write_json(
        "estimate.json",
        &EstimateOutput {
            clusters: data.n(),
            units: data.total_units(),
            results,
        },
    )?;
    if let Some(r) = &infeasible {
        out.write_json("imbalance.json", r)?;
        out.write("imbalance.csv", &imbalance_csv(r)?)?;
    }
    out.finish()?;
    if blocked {
        return Err(CliError::infeasible(
            "balancing equation infeasible; see imbalance.json, or pass --allow-infeasible",
        ));
    }
    Ok(())
}

pub fn balance_report(args: &BalanceArgs) -> Result<(), CliError> {
    let mut out = Outputs::new(&args.data.out_dir, "balance-report")?;
    let (data, f) = load(&args.data, &mut out)?;
    let s = structure(&args.structure, &data, &mut out)?;
    let fit = DesignSystem::new(&data, &s, &f, &FitOptions::default())?.balancing(&DVector::from_vec(data.outcomes()))?;
    let opts = ImbalanceOptions {
        threshold: args.threshold,
        scale: if args.policy_scale {
            ScaleWeighting::Policy
        } else {
            ScaleWeighting::AllPatterns
        },
        ..ImbalanceOptions::default()
    };
    let report = imbalance_report(&data, &s, &f, &fit, &opts)?;
    let flagged = report.flagged().count();
    println!(
        "feasible: {}; {} of {} cells flagged above {}",
        fit.feasible(),
        flagged,
        report.entries.len(),
        args.threshold
    );
    out.write_json("balance_report.json", &report)?;
    out.write("balance_report.csv", &imbalance_csv(&report)?)?;
    out.finish()?;
    if !fit.feasible() && !args.allow_infeasible {
        return Err(CliError::infeasible("balancing equation infeasible"));
    }
    Ok(())
}

pub fn select(args: &SelectArgs) -> Result<(), CliError> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(usage(format!("alpha {} must lie in (0, 1)", args.alpha)));
    }
    let mut out = Outputs::new(&args.data.out_dir, "select")?;
    let (data, f) = load(&args.data, &mut out)?;
    let specs: Vec<StructureSpec> = json_arg(&args.candidates, "candidates", &mut out)?;
    let candidates = specs
        .iter()
        .map(|spec| build_structure(spec, &data))
        .collect::<Result<Vec<_>, _>>()?;
    let report = select_structure(&data, &f, &candidates, args.alpha, &SelectOptions::default())?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("selected {} ({})", report.chosen + 1, report.chosen_label());
    let rows = report.tests.iter().map(|t| {
        vec![
            t.candidate.clone(),
            t.statistic.to_string(),
            t.p_value.to_string(),
            t.passed.to_string(),
            t.identical.to_string(),
        ]
    });
    out.write(
        "select.csv",
        &csv_text(&["candidate", "statistic", "p_value", "passed", "identical"], rows.collect::<Vec<_>>())?,
    )?;
    out.write_json("select.json", &report)?;
    out.finish()
}

/// Base design, its sweep, and the seed actually used.
fn design(args: &DesignArgs, out: &mut Outputs) -> Result<(DGPConfig, Option<Sweep>), CliError> {
    let (mut cfg, sweep, explicit_seed) = match (&args.preset, &args.config) {
        (Some(name), _) => {
            let p: Preset = name.parse().map_err(|e: clusterbal::Error| usage(e.to_string()))?;
            (p.config(), Some(p.sweep()), false)
        }
        (None, Some(text)) => (json_arg::<DGPConfig>(text, "config", out)?, None, true),
        (None, None) => return Err(usage("either --preset or --config is required")),
    };
    match args.seed {
        Some(seed) => {
            cfg.seed = seed;
            out.set_seed(seed, false);
        }
        None if explicit_seed => out.set_seed(cfg.seed, false),
        None => {
            cfg.seed = rand::random();
            out.set_seed(cfg.seed, true);
        }
    }
    cfg.validate()?;
    Ok((cfg, sweep))
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    check_level(args.level)?;
    if args.reps == 0 {
        return Err(usage("--reps must be positive"));
    }
    let kinds = args
        .estimator
        .iter()
        .map(|s| s.parse::<EstimatorKind>().map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Outputs::new(&args.design.out_dir, "simulate")?;
    let (cfg, preset_sweep) = design(&args.design, &mut out)?;
    let sweep = match (&args.axis, &args.values) {
        (Some(axis), Some(values)) => {
            let axis = match axis.as_str() {
                "n" => SweepAxis::N,
                "kappa" => SweepAxis::Kappa,
                "snr" => SweepAxis::Snr,
                other => return Err(usage(format!("unknown sweep axis `{other}`; expected n, kappa or snr"))),
            };
            Some(Sweep {
                axis,
                values: values.clone(),
            })
        }
        _ => preset_sweep,
    };
    let parallel = !args.serial;
    let results = match &sweep {
        Some(sw) => run_sweep(&cfg, sw, args.reps, &kinds, args.level, parallel)?,
        None => vec![monte_carlo(&cfg, args.reps, &kinds, args.level, parallel)?],
    };
    let csv = results_csv(&results)?;
    print!("{csv}");
    out.write("simulate.csv", csv.as_bytes())?;
    out.write_json("simulate.json", &results)?;
    out.finish()
}

#[derive(Serialize)]
struct CalibrateOutput {
    config: DGPConfig,
    calibration: clusterbal::simulate::Calibration,
}

pub fn calibrate(args: &CalibrateArgs) -> Result<(), CliError> {
    let mut out = Outputs::new(&args.design.out_dir, "calibrate")?;
    let (mut cfg, _) = design(&args.design, &mut out)?;
    if let Some(snr) = args.snr {
        cfg.snr_target = snr;
        cfg.validate()?;
    }
    let calibration = calibrate_snr(&cfg)?;
    println!(
        "gamma = {} (se {}) for snr {}",
        calibration.gamma, calibration.std_error, cfg.snr_target
    );
    out.write_json("calibrate.json", &CalibrateOutput { config: cfg, calibration })?;
    out.finish()
}
