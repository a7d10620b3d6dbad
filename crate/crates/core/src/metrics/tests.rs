use super::*;
use crate::rng::substream;
use rand::Rng as _;

fn map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

#[test]
fn dice_examples() {
    let p = [true, true, false, false, true];
    assert_eq!(dice(&p, &p).unwrap(), 1.0);
    assert_eq!(dice(&[true, false], &[false, true]).unwrap(), 0.0);
    let pred = [true, true, false, false, false];
    let gt = [true, true, true, true, false];
    assert!((dice(&pred, &gt).unwrap() - 4.0 / 6.0).abs() < 1e-15);
    assert_eq!(dice(&[false; 4], &[false; 4]).unwrap(), 1.0);
    assert_eq!(dice(&[true], &[true, false]), Err(MetricsError::Shape(1, 2)));
}

#[test]
fn dice_is_symmetric_and_bounded() {
    let mut rng = substream(1, "dice");
    for _ in 0..50 {
        let a: Vec<bool> = (0..40).map(|_| rng.random_bool(0.3)).collect();
        let b: Vec<bool> = (0..40).map(|_| rng.random_bool(0.5)).collect();
        let d = dice(&a, &b).unwrap();
        assert_eq!(d, dice(&b, &a).unwrap());
        assert!((0.0..=1.0).contains(&d));
    }
}

#[test]
fn dice_report_counts_absent_structures() {
    let names: Vec<String> = ["bg", "x", "y", "z"].iter().map(|s| s.to_string()).collect();
    let gt = [0, 1, 1, 2, 0, 0];
    let pred = [0, 1, 2, 2, 0, 0];
    let r = dice_report("v", &pred, &gt, &names).unwrap();
    assert!((r.per_structure["x"] - 2.0 / 3.0).abs() < 1e-15);
    assert!((r.per_structure["y"] - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(r.per_structure["z"], 1.0);
    assert_eq!(r.undefined, 1);
    assert!((r.mean - (2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-15);
    let csv = dice_reports_csv(&[r]);
    assert!(csv.starts_with("id,x,y,z,mean,undefined\nv,"));
}

#[test]
fn performance_gap_examples() {
    assert_eq!(performance_gap(0.8, 0.8).unwrap(), 0.0);
    assert_eq!(performance_gap(0.72, 0.80).unwrap(), -10.0);
    let g = performance_gap(0.82, 0.87).unwrap();
    assert_eq!((g * 100.0).round() / 100.0, -5.75);
    assert!(g < 0.0 && performance_gap(0.9, 0.8).unwrap() > 0.0);
    assert_eq!(performance_gap(0.5, 0.0), Err(MetricsError::Reference(0.0)));
}

#[test]
fn gap_report_picks_the_best_model() {
    let acc = map(&[("rand", 0.82), ("smit", 0.87), ("dino", 0.85)]);
    let r = gap_report("5", &acc).unwrap();
    assert_eq!(r.reference, "smit");
    assert_eq!(r.gaps["smit"], 0.0);
    assert_eq!(r.gaps["rand"], performance_gap(0.82, 0.87).unwrap());
    assert!(r.gaps.values().all(|g| *g <= 0.0));
}

#[test]
fn modality_gap_examples() {
    let a = map(&[("liver", 0.9), ("kidney", 0.8), ("spleen", 0.7)]);
    assert!(modality_gap(&a, &a).unwrap().values().all(|v| *v == 0.0));
    let shifted: BTreeMap<String, f64> = a.iter().map(|(k, v)| (k.clone(), v + 0.05)).collect();
    for v in modality_gap(&a, &shifted).unwrap().values() {
        assert!((v - 0.05).abs() < 1e-15);
    }
    let b = map(&[("liver", 0.85), ("kidney", 0.82), ("spleen", 0.5)]);
    let g = modality_gap(&a, &b).unwrap();
    assert!((g["liver"] + 0.05).abs() < 1e-15);
    assert!((g["kidney"] - 0.02).abs() < 1e-15);
    assert!((g["spleen"] + 0.2).abs() < 1e-15);
    let c = map(&[("liver", 0.85), ("pancreas", 0.5)]);
    assert_eq!(modality_gap(&a, &c), Err(MetricsError::Keys(vec!["kidney".into(), "pancreas".into(), "spleen".into()])));
}

#[test]
fn wilcoxon_examples() {
    let a = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
    let r = wilcoxon_signed_rank(&a, &a).unwrap();
    assert!(r.degenerate && r.p == 1.0);
    let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x - 0.01 * (i + 1) as f64).collect();
    let r = wilcoxon_signed_rank(&a, &b).unwrap();
    assert!(r.exact && !r.degenerate);
    assert_eq!(r.p, 2.0 / 64.0);
    assert_eq!(r.statistic, 21.0);
    assert_eq!(wilcoxon_signed_rank(&a[..3], &b[..3]), Err(MetricsError::TooFewPairs(3)));
    assert_eq!(wilcoxon_signed_rank(&a, &b[..5]), Err(MetricsError::Unpaired(6, 5)));
}

#[test]
fn wilcoxon_ties_use_average_ranks() {
    assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    let d = [1.0, 1.0, -2.0, 3.0, 3.0, 3.0];
    let zeros = [0.0; 6];
    let r = wilcoxon_signed_rank(&d, &zeros).unwrap();
    assert_eq!(r.statistic, 1.5 + 1.5 + 5.0 * 3.0);
}

#[test]
fn wilcoxon_large_sample_uses_normal_approximation() {
    let mut rng = substream(2, "w");
    let a: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
    let b: Vec<f64> = a.iter().map(|x| x + 0.3 + 0.1 * rng.random::<f64>()).collect();
    let r = wilcoxon_signed_rank(&a, &b).unwrap();
    assert!(!r.exact);
    assert_eq!(r.statistic, 0.0);
    let n = 40.0f64;
    let z = -(n * (n + 1.0) / 4.0) / (n * (n + 1.0) * (2.0 * n + 1.0) / 24.0).sqrt();
    let expected = 2.0 * Normal::standard().cdf(z);
    assert!((r.p - expected).abs() < 1e-15);
}

#[test]
fn stars_thresholds() {
    assert_eq!(stars(0.0005), "***");
    assert_eq!(stars(0.005), "**");
    assert_eq!(stars(0.03), "*");
    assert_eq!(stars(0.05), "");
}

#[test]
fn grouping_examples() {
    let r = map(&[("a", 0.2), ("b", 0.4), ("c", 0.9)]);
    let singles: BTreeMap<String, Vec<String>> = r.keys().map(|k| (k.clone(), vec![k.clone()])).collect();
    assert_eq!(group_structures(&r, &singles).unwrap(), r);
    let all = BTreeMap::from([("all".to_string(), vec!["a".into(), "b".into(), "c".into()])]);
    assert!((group_structures(&r, &all).unwrap()["all"] - 0.5).abs() < 1e-15);
    let two = BTreeMap::from([("small".to_string(), vec!["a".into(), "b".into()]), ("large".to_string(), vec!["c".into()])]);
    let g = group_structures(&r, &two).unwrap();
    assert!((g["small"] - 0.3).abs() < 1e-15);
    assert_eq!(g["large"], 0.9);
    let partial = BTreeMap::from([("x".to_string(), vec!["a".into()])]);
    assert_eq!(group_structures(&r, &partial), Err(MetricsError::Uncovered(vec!["b".into(), "c".into()])));
}
