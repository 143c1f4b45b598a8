use collabpred::classification::{decide_from_data, sample_separable, ClassData, ClassSpec, StepSchedule};
use collabpred::cluster::{greedy_cluster, Partition};
use collabpred::data::{ingest_csv, sample_synthetic, write_csv, Dataset, GaussianSpec};
use collabpred::moments::moments_from_spec;
use collabpred::oracle::{exact_ose_combined, exact_ose_single, gap_quantities, Which};
use collabpred::tuner::{decide_pair, TunerConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn small_cfg(seed: u64) -> TunerConfig {
    TunerConfig { max_iterations: 10, boot_reps_m: 5, oos_count: 100, moment_reps: 30, ..TunerConfig::desk() }.with_seed(seed)
}

#[test]
fn csv_round_trip_gives_the_same_decision() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GaussianSpec::standard(DVector::from_element(3, 1.0), 1.0).unwrap();
    let d1 = sample_synthetic(&spec, 80, 1);
    let d2 = sample_synthetic(&spec, 80, 2);
    let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_csv(&d1, &p1, "y").unwrap();
    write_csv(&d2, &p2, "y").unwrap();
    let r1 = ingest_csv(&p1, "y").unwrap();
    let r2 = ingest_csv(&p2, "y").unwrap();
    assert!((&r1.features - &d1.features).abs().max() < 1e-12);
    let cfg = small_cfg(3);
    let a = decide_pair(&d1, &d2, &cfg).unwrap();
    let b = decide_pair(&r1, &r2, &cfg).unwrap();
    assert_eq!(a.merge, b.merge);
    assert!((a.proxy_acc - b.proxy_acc).abs() < 1e-9);
}

#[test]
fn exact_difference_equals_gap_quantities() {
    let p = 4;
    let s1 = GaussianSpec::standard(DVector::from_element(p, 1.0), 1.5).unwrap();
    let s2 = GaussianSpec::new(DVector::from_element(p, 0.5), DMatrix::identity(p, p) * 2.0, DVector::from_element(p, 1.2), 1.5).unwrap();
    let m = moments_from_spec(&s1, &s2, 30, 40, 2000, 7).unwrap();
    let q = gap_quantities(&m).unwrap();
    let sep = exact_ose_single(&s1, &m, Which::First) + exact_ose_single(&s2, &m, Which::Second);
    let comb = exact_ose_combined(&s1, &s2, &m, Which::First).unwrap() + exact_ose_combined(&s1, &s2, &m, Which::Second).unwrap();
    let lhs = sep - comb;
    let rhs = q.h(1.5) - q.g(&s1.beta, &s2.beta);
    assert!((lhs - rhs).abs() <= 1e-8 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
}

#[test]
fn plug_in_classification_decision_is_consistent() {
    let betas = vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![-0.5, 0.8]), DVector::from_vec(vec![-0.5, -0.8])];
    let spec = ClassSpec::new(betas, 0.05, 1.0).unwrap();
    let a = sample_separable(&spec, 150, 1).unwrap();
    let b = sample_separable(&spec, 150, 2).unwrap();
    let (dec, norms, setting) = decide_from_data(&a, &b, 0.1, 0.05, StepSchedule::harmonic(200)).unwrap();
    assert!(dec.plug_in);
    assert_eq!(dec.merge, dec.lhs <= dec.rhs);
    assert!(norms.diff <= norms.first + norms.second + 1e-9);
    assert!(setting.feature_bound <= 1.0 + 1e-12);
    let as_dataset = Dataset::new(a.features.clone(), DVector::from_iterator(a.n(), a.labels.iter().map(|&l| l as f64)), "a").unwrap();
    let back = ClassData::from_dataset(&as_dataset, Some(3)).unwrap();
    assert_eq!(back.labels, a.labels);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]
    #[test]
    fn greedy_partition_is_always_valid(k in 1usize..5, seed in 0u64..1000) {
        let ds: Vec<Dataset> = (0..k)
            .map(|i| {
                let spec = GaussianSpec::standard(DVector::from_element(2, 1.0 + i as f64 * 0.5), 1.0).unwrap();
                let mut d = sample_synthetic(&spec, 60, seed * 10 + i as u64);
                d.id = format!("d{i}");
                d
            })
            .collect();
        let part = greedy_cluster(&ds, &small_cfg(seed)).unwrap();
        prop_assert!(part.is_valid());
        prop_assert_eq!(part.assignments.len(), k);
        let singles = Partition::singletons(k);
        prop_assert!(part.clusters.len() <= singles.clusters.len());
    }
}
