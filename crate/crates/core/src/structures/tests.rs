use proptest::prelude::*;

use super::*;
use crate::data::{enumerate_patterns, Intervention, UnitProbability};

fn cluster(id: &str, x: Vec<Vec<f64>>, a: Vec<u8>) -> ClusterSample {
    let m = a.len();
    ClusterSample::new(id, x, a, vec![0.0; m]).unwrap()
}

fn line(id: &str, a: Vec<u8>) -> ClusterSample {
    let x = (0..a.len()).map(|i| vec![(i * i) as f64]).collect();
    cluster(id, x, a)
}

fn build(spec: &StructureSpec, data: &Dataset) -> LowRankStructure {
    build_structure(spec, data).unwrap()
}

fn pat(bits: &[u8]) -> TreatmentPattern {
    TreatmentPattern::new(bits.to_vec()).unwrap()
}

#[test]
fn own_treatment_rows() {
    let c = line("a", vec![0, 1]);
    let d = Dataset::new(vec![c.clone()]).unwrap();
    let s = build(&StructureSpec::NoInterference, &d);
    assert_eq!(s.regime(), Regime::FixedH(2));
    assert_eq!(feature_row(&s, &c, 0, &pat(&[0, 1])).unwrap().as_slice(), &[1.0, 0.0]);
    assert_eq!(feature_row(&s, &c, 1, &pat(&[0, 1])).unwrap().as_slice(), &[0.0, 1.0]);
    assert!(matches!(feature_row(&s, &c, 2, &pat(&[0, 1])), Err(Error::DimensionMismatch(_))));
    assert!(matches!(feature_row(&s, &c, 0, &pat(&[0])), Err(Error::DimensionMismatch(_))));
}

#[test]
fn stratified_count_one_treated_neighbor() {
    let c = line("a", vec![0, 1, 0]);
    let d = Dataset::new(vec![c.clone()]).unwrap();
    let s = build(
        &StructureSpec::StratifiedCount {
            k: 2,
            include_own: false,
            neighbors: NeighborSpec::Knn,
        },
        &d,
    );
    assert_eq!(feature_row(&s, &c, 0, &pat(&[0, 1, 0])).unwrap().as_slice(), &[0.0, 1.0, 0.0]);
    let own = build(
        &StructureSpec::StratifiedCount {
            k: 2,
            include_own: true,
            neighbors: NeighborSpec::Knn,
        },
        &d,
    );
    assert_eq!(own.regime(), Regime::FixedH(4));
    assert_eq!(feature_row(&own, &c, 1, &pat(&[0, 1, 0])).unwrap().as_slice(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn tensor_with_own_covariates() {
    let c = cluster("a", vec![vec![1.0, 2.0]], vec![1]);
    let d = Dataset::new(vec![c.clone()]).unwrap();
    let s = build(
        &StructureSpec::tensor(
            StructureSpec::NoInterference,
            vec![
                CovariateTerm::Column(ColumnRef::Index(0)),
                CovariateTerm::Column(ColumnRef::Name("x2".into())),
            ],
        ),
        &d,
    );
    assert_eq!(feature_row(&s, &c, 0, &pat(&[1])).unwrap().as_slice(), &[0.0, 0.0, 1.0, 2.0]);
    assert_eq!(s.tensor_layout(), Some((2, 2)));
}

#[test]
fn knn_pattern_slot() {
    let c = line("a", vec![0, 1]);
    let d = Dataset::new(vec![c.clone()]).unwrap();
    let s = build(
        &StructureSpec::KnnPattern {
            k: 1,
            neighbors: NeighborSpec::Knn,
        },
        &d,
    );
    assert_eq!(feature_row(&s, &c, 0, &pat(&[0, 1])).unwrap().as_slice(), &[0.0, 1.0]);
    let big = StructureSpec::KnnPattern {
        k: 21,
        neighbors: NeighborSpec::Knn,
    };
    assert!(matches!(build_structure(&big, &d), Err(Error::CapExceeded { .. })));
}

#[test]
fn design_of_singletons() {
    let d = Dataset::new(vec![line("a", vec![1]), line("b", vec![0])]).unwrap();
    let phi = design_matrix(&build(&StructureSpec::NoInterference, &d), &d).unwrap();
    assert_eq!(phi, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
}

#[test]
fn design_shape_and_rows() {
    let d = Dataset::new(vec![line("a", vec![1, 0]), line("b", vec![0, 0]), line("c", vec![1, 1])]).unwrap();
    let s = build(
        &StructureSpec::tensor(
            StructureSpec::NoInterference,
            vec![CovariateTerm::Column(ColumnRef::Index(0)), CovariateTerm::Intercept],
        ),
        &d,
    );
    let phi = design_matrix(&s, &d).unwrap();
    assert_eq!(phi.shape(), (6, 4));
    let mut r = 0;
    for c in d.clusters() {
        let a = pat(c.treatments());
        for i in 0..c.size() {
            assert_eq!(phi.row(r).transpose(), feature_row(&s, c, i, &a).unwrap());
            r += 1;
        }
    }
}

#[test]
fn gate_targets() {
    let gate = CounterfactualWeight::Gate;
    for c in [line("a", vec![0]), line("a", vec![0, 1])] {
        let d = Dataset::new(vec![c]).unwrap();
        let s = build(&StructureSpec::NoInterference, &d);
        let t = target_vector(&s, &d, &gate, 20).unwrap();
        assert!((t - DVector::from_vec(vec![-1.0, 1.0])).amax() < 1e-15);
    }
    let d = Dataset::new(vec![line("a", vec![0, 1, 1])]).unwrap();
    let s = build(&StructureSpec::NoInterference, &d);
    let zero = CounterfactualWeight::SparseTable { entries: vec![] };
    assert_eq!(target_vector(&s, &d, &zero, 20).unwrap(), DVector::zeros(2));
}

#[test]
fn nested_rank_examples() {
    let d = Dataset::new(
        (0..6)
            .map(|c| {
                let x = (0..4).map(|i| vec![((c * 7 + i * 3) % 5) as f64 + 0.1 * i as f64]).collect();
                cluster(&format!("c{c}"), x, (0..4).map(|i| ((c + i) % 2) as u8).collect())
            })
            .collect(),
    )
    .unwrap();
    let z = vec![CovariateTerm::Column(ColumnRef::Index(0)), CovariateTerm::Intercept];
    let small = build(&StructureSpec::tensor(StructureSpec::NoInterference, z.clone()), &d);
    let strat = StructureSpec::CoarsenedCount {
        order: 1,
        k: Some(2),
        thresholds: None,
        neighbors: NeighborSpec::Knn,
    };
    let large = build(&StructureSpec::tensor(strat, z), &d);
    assert!(nested_rank_check(&small, &small, &d, None).unwrap());
    assert!(nested_rank_check(&small, &large, &d, None).unwrap());

    let one = |v: f64| {
        StructureSpec::compose(
            StructureSpec::Matrix {
                rows: vec![vec![v], vec![1.0 - v]],
            },
            StructureSpec::NoInterference,
        )
    };
    let a = build(&one(1.0), &d);
    let b = build(&one(0.0), &d);
    assert!(!nested_rank_check(&a, &b, &d, None).unwrap());
}

#[test]
fn maps_are_not_structures() {
    let d = Dataset::new(vec![line("a", vec![0])]).unwrap();
    assert!(matches!(
        build_structure(&StructureSpec::AdditiveSlots { k: 2 }, &d),
        Err(Error::InvalidSpec(_))
    ));
    let bad = StructureSpec::compose(StructureSpec::NoInterference, StructureSpec::NoInterference);
    assert!(matches!(build_structure(&bad, &d), Err(Error::InvalidSpec(_))));
    let wrong = StructureSpec::compose(StructureSpec::AdditiveSlots { k: 2 }, StructureSpec::NoInterference);
    assert!(matches!(build_structure(&wrong, &d), Err(Error::InvalidSpec(_))));
}

/// `Λ₁`: 2^k pattern slots to k additive pairs, written out by hand.
fn additive_matrix(k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(1 << k, 2 * k);
    for j in 0..1usize << k {
        for r in 0..k {
            let bit = (j >> (k - 1 - r)) & 1;
            m[(j, 2 * r + bit)] = 1.0;
        }
    }
    m
}

#[test]
fn composed_rows_equal_matrix_product() {
    let c = cluster(
        "a",
        vec![vec![0.0], vec![1.0], vec![3.0], vec![7.0]],
        vec![0, 0, 0, 0],
    );
    let d = Dataset::new(vec![c.clone()]).unwrap();
    let knn = StructureSpec::KnnPattern {
        k: 2,
        neighbors: NeighborSpec::Knn,
    };
    let inner = build(&knn, &d);
    let composed = build(&StructureSpec::compose(StructureSpec::AdditiveSlots { k: 2 }, knn), &d);
    assert_eq!(composed.regime(), Regime::FixedH(4));
    let lambda = additive_matrix(2);
    for a in enumerate_patterns(4, 20).unwrap() {
        for i in 0..4 {
            let raw = feature_row(&inner, &c, i, &a).unwrap();
            let want = raw.transpose() * &lambda;
            let got = feature_row(&composed, &c, i, &a).unwrap();
            assert_eq!(got.transpose(), want);
        }
    }
}

#[test]
fn additive_types_encoding() {
    // types 2, 1, 3 for units 0, 1, 2 with s = 4
    let c = cluster("a", vec![vec![2.0], vec![1.0], vec![3.0]], vec![1, 0, 1]);
    let d = Dataset::new(vec![c.clone()]).unwrap();
    let s = build(
        &StructureSpec::AdditiveTypes {
            types: 4,
            column: ColumnRef::Index(0),
        },
        &d,
    );
    assert_eq!(s.regime(), Regime::FixedH(8));
    let row = feature_row(&s, &c, 0, &pat(&[1, 0, 1])).unwrap();
    assert_eq!(row.as_slice(), &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    let dup = cluster("b", vec![vec![1.0], vec![1.0]], vec![0, 1]);
    let dd = Dataset::new(vec![dup]).unwrap();
    let s = build(
        &StructureSpec::AdditiveTypes {
            types: 2,
            column: ColumnRef::Index(0),
        },
        &dd,
    );
    assert!(matches!(design_matrix(&s, &dd), Err(Error::InvalidInput(_))));
}

#[test]
fn coarsened_counts() {
    let c = line("a", vec![1, 1, 0, 1, 0]);
    let d = Dataset::new(vec![c.clone()]).unwrap();
    let spec = StructureSpec::CoarsenedCount {
        order: 1,
        k: Some(2),
        thresholds: Some(vec![[0.0, 1.0]]),
        neighbors: NeighborSpec::Knn,
    };
    let s = build(&spec, &d);
    assert_eq!(s.regime(), Regime::FixedH(5));
    // unit 0 at x=0: neighbors 1 (x=1), 2 (x=4); one treated -> medium
    let r = feature_row(&s, &c, 0, &pat(&[1, 1, 0, 1, 0])).unwrap();
    assert_eq!(r.as_slice(), &[0.0, 1.0, 0.0, 1.0, 0.0]);

    let bad = StructureSpec::CoarsenedCount {
        order: 1,
        k: Some(2),
        thresholds: Some(vec![[2.0, 1.0]]),
        neighbors: NeighborSpec::Knn,
    };
    assert!(matches!(build_structure(&bad, &d), Err(Error::InvalidSpec(_))));

    let second = StructureSpec::CoarsenedCount {
        order: 2,
        k: Some(1),
        thresholds: None,
        neighbors: NeighborSpec::Knn,
    };
    let s = build(&second, &d);
    assert_eq!(s.regime(), Regime::FixedH(8));
    assert_eq!(design_matrix(&s, &d).unwrap().shape(), (5, 8));
}

#[test]
fn default_thresholds_use_percentiles() {
    let v = [0.0, 1.0, 1.0, 2.0, 5.0];
    assert!((percentile(&v, 0.33) - 1.0).abs() < 1e-12);
    assert!((percentile(&v, 0.67) - 1.68).abs() < 1e-12);
}

#[test]
fn identity_exposure_is_per_unit() {
    let d = Dataset::new(vec![line("a", vec![1, 0]), line("b", vec![1])]).unwrap();
    let s = build(
        &StructureSpec::FromExposureMapping {
            mapping: BuiltinExposure::Identity,
        },
        &d,
    );
    assert_eq!(s.regime(), Regime::PerUnit);
    assert!(design_matrix(&s, &d).is_err());
    let f = s.prepare(&d.clusters()[0]).unwrap();
    assert_eq!(f.units()[0].eval(&[1, 0]), vec![0.0, 0.0, 1.0, 0.0]);
}

#[derive(Debug)]
struct Parity;

impl ExposureMapping for Parity {
    fn classes(&self, _c: &ClusterSample, _i: usize) -> Result<usize> {
        Ok(2)
    }

    fn label(&self, _c: &ClusterSample, _i: usize, a: &TreatmentPattern) -> Result<usize> {
        Ok(a.treated() % 2)
    }

    fn fixed_classes(&self) -> Option<usize> {
        Some(2)
    }
}

#[test]
fn custom_exposure() {
    let c = line("a", vec![1, 1, 1]);
    let s = LowRankStructure::from_exposure(std::sync::Arc::new(Parity), "parity");
    assert_eq!(s.label(), "parity");
    assert_eq!(feature_row(&s, &c, 2, &pat(&[1, 1, 1])).unwrap().as_slice(), &[0.0, 1.0]);
    assert_eq!(feature_row(&s, &c, 2, &pat(&[1, 1, 0])).unwrap().as_slice(), &[1.0, 0.0]);
}

#[test]
fn target_matches_enumeration_for_bernoulli_policy() {
    let c = cluster(
        "a",
        (0..5).map(|i| vec![i as f64 * 0.3, (i % 2) as f64]).collect(),
        vec![0, 1, 0, 1, 1],
    );
    let d = Dataset::new(vec![c.clone()]).unwrap();
    let f = CounterfactualWeight::StochasticIntervention {
        intervention: Intervention::IndependentBernoulli {
            probability: UnitProbability::Probit {
                kappa: 0.4,
                columns: None,
            },
        },
    };
    let spec = StructureSpec::tensor(
        StructureSpec::KnnPattern {
            k: 2,
            neighbors: NeighborSpec::Knn,
        },
        vec![CovariateTerm::Column(ColumnRef::Index(0)), CovariateTerm::ClusterMean(ColumnRef::Index(1))],
    );
    let s = build(&spec, &d);
    let t = target_vector(&s, &d, &f, 20).unwrap();
    let mut want = DVector::zeros(8);
    for a in enumerate_patterns(5, 20).unwrap() {
        let w = f.eval(&a, &c).unwrap();
        for i in 0..5 {
            want += feature_row(&s, &c, i, &a).unwrap() * (w / 5.0);
        }
    }
    assert!((t - want).amax() < 1e-13);
}

fn arb_cluster(max: usize) -> impl Strategy<Value = ClusterSample> {
    (1..=max).prop_flat_map(|m| {
        (
            prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 2), m),
            prop::collection::vec(0u8..=1, m),
        )
            .prop_map(|(x, a)| cluster("p", x, a))
    })
}

fn one_hot_blocks(row: &[f64], widths: &[usize]) -> bool {
    let mut start = 0;
    widths.iter().all(|&w| {
        let b = &row[start..start + w];
        start += w;
        b.iter().all(|&v| v == 0.0 || v == 1.0) && b.iter().sum::<f64>() == 1.0
    }) && start == row.len()
}

proptest! {
    #[test]
    fn indicator_rows_are_one_hot(c in arb_cluster(6), k in 1usize..4) {
        let d = Dataset::new(vec![c.clone()]).unwrap();
        let cases: Vec<(StructureSpec, Vec<usize>)> = vec![
            (StructureSpec::NoInterference, vec![2]),
            (StructureSpec::StratifiedCount { k, include_own: false, neighbors: NeighborSpec::Knn }, vec![k + 1]),
            (StructureSpec::KnnPattern { k, neighbors: NeighborSpec::Knn }, vec![1 << k]),
            (StructureSpec::CoarsenedCount { order: 2, k: Some(k), thresholds: None, neighbors: NeighborSpec::Knn }, vec![2, 3, 3]),
        ];
        for (spec, widths) in cases {
            let phi = design_matrix(&build(&spec, &d), &d).unwrap();
            for r in 0..phi.nrows() {
                let row: Vec<f64> = phi.row(r).iter().copied().collect();
                prop_assert!(one_hot_blocks(&row, &widths), "{spec:?} row {row:?}");
            }
        }
    }

    #[test]
    fn knn_slot_is_binary_code(c in arb_cluster(6), k in 1usize..4) {
        let d = Dataset::new(vec![c.clone()]).unwrap();
        let s = build(&StructureSpec::KnnPattern { k, neighbors: NeighborSpec::Knn }, &d);
        let lists = knn_lists(&c, k, None).unwrap();
        let phi = design_matrix(&s, &d).unwrap();
        prop_assert_eq!(phi.ncols(), 1 << k);
        for (i, l) in lists.iter().enumerate() {
            let mut code = 0usize;
            for r in 0..k {
                let bit = l.get(r).map_or(0, |&u| c.treatments()[u] as usize);
                code = (code << 1) | bit;
            }
            prop_assert_eq!(phi[(i, code)], 1.0);
        }
    }

    #[test]
    fn compose_is_associative(c in arb_cluster(4), m1 in prop::collection::vec(-1.0..1.0f64, 12), m2 in prop::collection::vec(-1.0..1.0f64, 6)) {
        let d = Dataset::new(vec![c]).unwrap();
        let rows = |v: &[f64], w: usize| v.chunks(w).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let a = StructureSpec::Matrix { rows: rows(&m2, 2) };
        let b = StructureSpec::Matrix { rows: rows(&m1, 3) };
        let inner = StructureSpec::StratifiedCount { k: 2, include_own: true, neighbors: NeighborSpec::Knn };
        let left = StructureSpec::compose(a.clone(), StructureSpec::compose(b.clone(), inner.clone()));
        let right = StructureSpec::compose(StructureSpec::compose(a, b), inner);
        let x = design_matrix(&build(&left, &d), &d).unwrap();
        let y = design_matrix(&build(&right, &d), &d).unwrap();
        prop_assert!((x - y).amax() <= 1e-12);
    }

    #[test]
    fn rows_are_pure(c in arb_cluster(5), other in arb_cluster(5)) {
        let spec = StructureSpec::KnnPattern { k: 2, neighbors: NeighborSpec::Knn };
        let d1 = Dataset::new(vec![c.clone()]).unwrap();
        let mut o = other;
        o = ClusterSample::from_flat("q", (0..o.size() * 2).map(|v| v as f64).collect(), 2, o.treatments().to_vec(), o.outcomes().to_vec()).unwrap();
        let d2 = Dataset::new(vec![o, c.clone()]).unwrap();
        let s1 = build(&spec, &d1);
        let s2 = build(&spec, &d2);
        let a = pat(c.treatments());
        for i in 0..c.size() {
            prop_assert_eq!(feature_row(&s1, &c, i, &a).unwrap(), feature_row(&s2, &c, i, &a).unwrap());
            prop_assert_eq!(feature_row(&s1, &c, i, &a).unwrap(), feature_row(&s1, &c, i, &a).unwrap());
        }
    }
}
