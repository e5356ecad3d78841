use super::*;
use crate::data::enumerate_patterns;
use crate::structures::feature_row;

fn small(interference: Interference) -> DGPConfig {
    DGPConfig {
        n: 12,
        interference,
        truth_clusters: 400,
        seed: 7,
        ..DGPConfig::default()
    }
}

#[test]
fn shapes() {
    let cfg = DGPConfig {
        n: 10,
        gamma: Some(1.0),
        ..DGPConfig::default()
    };
    let sim = gen_dataset(&cfg, 0).unwrap();
    assert_eq!(sim.data.n(), 10);
    assert_eq!(sim.data.dim(), 4);
    assert!(sim.data.clusters().iter().all(|c| c.size() == 10 || c.size() == 15));
    assert_eq!(cfg.h(1.0).len(), 128);
}

#[test]
fn coefficient_vectors() {
    let mut cfg = small(Interference::Stratified(5));
    assert_eq!(cfg.h(1.0).len(), 24);
    assert_eq!(cfg.h(2.0).as_slice()[20..], [12.0; 4]);
    cfg.interference = Interference::Additive;
    let h = cfg.h(1.0);
    assert_eq!(h.len(), 120);
    assert_eq!(&h.as_slice()[..12], &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(h[119], 15.0);
}

#[test]
fn replicates_are_reproducible() {
    let cfg = DGPConfig {
        gamma: Some(0.3),
        ..small(Interference::Knn(5))
    };
    let a = gen_dataset(&cfg, 3).unwrap();
    let b = gen_dataset(&cfg, 3).unwrap();
    assert_eq!(a.data, b.data);
    assert_eq!(a.mu_f.to_bits(), b.mu_f.to_bits());
    assert_ne!(gen_dataset(&cfg, 4).unwrap().data, a.data);
}

#[test]
fn zero_deviation_gives_flat_ipw_weights() {
    let cfg = DGPConfig {
        kappa: 0.0,
        gamma: Some(1.0),
        ..small(Interference::Knn(2))
    };
    let sim = gen_dataset(&cfg, 0).unwrap();
    let w = ipw_weights(&sim.data, &sim.policy, &sim.propensity).unwrap();
    let mut k = 0;
    for c in sim.data.clusters() {
        for _ in 0..c.size() {
            assert!((w[k] - 1.0 / c.size() as f64).abs() < 1e-12);
            k += 1;
        }
    }
}

#[test]
fn sample_estimand_matches_enumeration() {
    for interference in [Interference::Knn(2), Interference::Stratified(3), Interference::Additive] {
        let cfg = DGPConfig {
            n: 3,
            cluster_sizes: BTreeMap::from([(4, 0.5), (5, 0.5)]),
            gamma: Some(0.7),
            interference,
            ..DGPConfig::default()
        };
        let sim = gen_dataset(&cfg, 1).unwrap();
        let h = cfg.h(0.7);
        let mut total = 0.0;
        for c in sim.data.clusters() {
            let m = c.size();
            for a in enumerate_patterns(m, 20).unwrap() {
                let f = sim.policy.eval(&a, c).unwrap();
                for i in 0..m {
                    total += f * feature_row(&sim.structure, c, i, &a).unwrap().dot(&h) / m as f64;
                }
            }
        }
        let want = total / 3.0;
        assert!((sim.mu_f - want).abs() < 1e-10, "{interference}: {} vs {want}", sim.mu_f);
    }
}

#[test]
fn calibration_scaling() {
    let cfg = small(Interference::Knn(5));
    let base = calibrate_snr(&cfg).unwrap();
    assert!(base.gamma.is_finite() && base.gamma > 0.0);
    assert!(base.std_error > 0.0 && base.std_error < base.gamma);
    let doubled = calibrate_snr(&DGPConfig {
        snr_target: 0.4,
        ..cfg.clone()
    })
    .unwrap();
    assert!((doubled.gamma / base.gamma / 2f64.sqrt() - 1.0).abs() < 0.02);
    let noisier = calibrate_snr(&DGPConfig {
        sigma2: 4.0,
        ..cfg.clone()
    })
    .unwrap();
    assert!((noisier.gamma / base.gamma / 2.0 - 1.0).abs() < 0.02);
}

#[test]
fn invalid_configs() {
    let ok = small(Interference::Knn(5));
    let cases = [
        DGPConfig { rho: 1.0, ..ok.clone() },
        DGPConfig { sigma2: 0.0, ..ok.clone() },
        DGPConfig { snr_target: -1.0, ..ok.clone() },
        DGPConfig {
            cluster_sizes: BTreeMap::from([(10, 0.5), (15, 0.4)]),
            ..ok.clone()
        },
        DGPConfig { n: 0, ..ok.clone() },
    ];
    for c in cases {
        assert!(matches!(gen_dataset(&c, 0), Err(Error::InvalidSpec(_))), "{c:?}");
    }
    assert!(monte_carlo(&ok, 0, &[EstimatorKind::Ipw], 0.95, false).is_err());
}

#[test]
fn names_round_trip() {
    for i in [Interference::Knn(3), Interference::Stratified(5), Interference::Additive] {
        assert_eq!(i.to_string().parse::<Interference>().unwrap(), i);
    }
    assert!("knn0".parse::<Interference>().is_err());
    assert!("ring".parse::<Interference>().is_err());
    let cfg = DGPConfig::default();
    let json = serde_json::to_string(&cfg).unwrap();
    assert!(json.contains("\"interference\":\"knn5\""));
    assert_eq!(serde_json::from_str::<DGPConfig>(&json).unwrap(), cfg);
    let sparse: DGPConfig = serde_json::from_str(
        r#"{"n":5,"p":4,"rho":0.5,"kappa":0.2,"snr_target":0.2,"sigma2":1,"interference":"additive","seed":3}"#,
    )
    .unwrap();
    assert_eq!(sparse.cluster_sizes, default_sizes());
    for p in Preset::ALL {
        assert_eq!(p.name().parse::<Preset>().unwrap(), p);
    }
}

#[test]
fn sweep_settings() {
    let base = DGPConfig {
        gamma: Some(1.0),
        ..DGPConfig::default()
    };
    let n = Preset::Fig1Left.sweep().configs(&base).unwrap();
    assert_eq!(n.iter().map(|c| c.n).collect::<Vec<_>>(), vec![100, 300, 500, 700]);
    assert!(n.iter().all(|c| c.gamma == Some(1.0)));
    let k = Preset::Fig1Right.sweep().configs(&base).unwrap();
    assert!(k.iter().all(|c| c.gamma.is_none()));
    let bad = Sweep {
        axis: SweepAxis::N,
        values: vec![2.5],
    };
    assert!(bad.configs(&base).is_err());
}

#[test]
fn single_replicate_has_no_sd() {
    let cfg = small(Interference::Knn(1));
    let r = monte_carlo(&cfg, 1, &[EstimatorKind::Ipw, EstimatorKind::Balancing], 0.95, false).unwrap();
    for row in &r.rows {
        assert_eq!(row.sd, None);
        if let Some(c) = row.coverage {
            assert!(c == 0.0 || c == 1.0);
        }
    }
}

#[test]
fn serial_equals_parallel() {
    let cfg = small(Interference::Knn(2));
    let kinds = [
        EstimatorKind::Ipw,
        EstimatorKind::Balancing,
        EstimatorKind::Projection,
        EstimatorKind::WeightedProjection,
    ];
    let a = monte_carlo(&cfg, 4, &kinds, 0.95, false).unwrap();
    let b = monte_carlo(&cfg, 4, &kinds, 0.95, true).unwrap();
    assert_eq!(a, b);
    let csv = results_csv(&[a]).unwrap();
    assert_eq!(csv, results_csv(&[b]).unwrap());
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("interference,n,kappa,snr"));
}

#[test]
fn unsupported_estimator_is_recorded() {
    let cfg = small(Interference::Knn(1));
    let r = monte_carlo(&cfg, 2, &[EstimatorKind::ExposureIpw], 0.95, false).unwrap();
    assert_eq!(r.rows[0].failures, 2);
    assert_eq!(r.rows[0].used, 0);
}
