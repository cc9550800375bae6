use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tafnet::stats::*;
use tafnet::TafError;

/// Area under the ROC polyline by the trapezoid rule.
fn trapezoid(pts: &[(f64, f64)]) -> f64 {
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Probability that a random positive outscores a random negative, ties count half.
fn pairwise_auc(s: &[Scored]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for p in s.iter().filter(|x| x.1 == 1) {
        for n in s.iter().filter(|x| x.1 == 0) {
            den += 1.0;
            num += if p.0 > n.0 { 1.0 } else if p.0 == n.0 { 0.5 } else { 0.0 };
        }
    }
    num / den
}

/// Exact one-sided p-value by enumerating all 2^n sign assignments.
fn brute_wilcoxon(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().copied().filter(|x| *x != 0.0).collect();
    let ranks = mid_ranks(&d.iter().map(|x| x.abs()).collect::<Vec<_>>());
    let obs: f64 = ranks.iter().zip(&d).filter(|(_, x)| **x > 0.0).map(|(r, _)| r).sum();
    let n = d.len();
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w >= obs - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

fn scored(seed: u64, n: usize, grid: u32) -> Vec<Scored> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<Scored> = (0..n).map(|_| (r.random_range(0..grid) as f64 / grid as f64, r.random_range(0..2u8))).collect();
    v[0].1 = 0;
    v[1].1 = 1;
    v
}

#[test]
fn auc_examples() {
    assert_eq!(auc(&[(0.1, 0), (0.2, 0), (0.8, 1), (0.9, 1)]).unwrap(), 1.0);
    assert_eq!(auc(&[(0.9, 0), (0.8, 0), (0.2, 1), (0.1, 1)]).unwrap(), 0.0);
    assert_eq!(auc(&[(0.5, 0), (0.5, 1)]).unwrap(), 0.5);
    assert_eq!(auc(&[(0.1, 0), (0.4, 1), (0.5, 0), (0.8, 1)]).unwrap(), 0.75);
    assert!(matches!(auc(&[(0.1, 1), (0.2, 1)]), Err(TafError::MetricUndefined(_))));
    assert!(auc(&[(0.1, 2), (0.2, 0)]).is_err());
    assert!(auc(&[(f64::NAN, 1), (0.2, 0)]).is_err());
}

#[test]
fn sensitivity_and_f1_examples() {
    let s = [(0.9, 1), (0.6, 1), (0.4, 1), (0.7, 0), (0.2, 0)];
    let (sens, f1) = sensitivity_f1(&s, 0.5).unwrap();
    assert!((sens - 2.0 / 3.0).abs() < 1e-12);
    // tp 2, fp 1, fn 1
    assert!((f1 - 4.0 / 6.0).abs() < 1e-12);
    assert_eq!(sensitivity_f1(&s, 0.95).unwrap(), (0.0, 0.0));
    assert!(sensitivity_f1(&[(0.3, 0)], 0.5).is_err());
}

#[test]
fn fold_aucs_summary_values() {
    let tafnet = [0.973, 0.849, 0.937, 0.883, 0.940];
    let initial = [0.944, 0.840, 0.944, 0.817, 0.943];
    let siamese = [0.904, 0.798, 0.781, 0.736, 0.796];
    let (m, s) = aggregate(&tafnet).unwrap();
    assert_eq!(format_mean_std(m, s), "0.916 ± 0.044");
    assert_eq!(win_tie_loss(&tafnet, &siamese), (5, 0, 0));
    assert_eq!(win_tie_loss(&tafnet, &initial), (3, 0, 2));
    let w = wilcoxon_signed_rank(&tafnet, &siamese).unwrap();
    assert!(w.exact);
    assert_eq!(w.w_plus, 15.0);
    assert_eq!(w.p_value, 0.03125);
    assert!(aggregate(&[]).is_err());
}

#[test]
fn wilcoxon_degenerate_and_large_sample() {
    assert!(matches!(wilcoxon_signed_rank(&[1.0, 2.0], &[1.0, 2.0]), Err(TafError::TestUndefined(_))));
    assert!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]).is_err());
    let a: Vec<f64> = (0..40).map(|i| i as f64 + 0.5).collect();
    let b: Vec<f64> = (0..40).map(|i| i as f64).collect();
    let w = wilcoxon_signed_rank(&a, &b).unwrap();
    assert!(!w.exact && w.p_value < 1e-6);
}

#[test]
fn friedman_without_ties_matches_textbook_formula() {
    // Ranks per row: [1,2,3], [1,3,2], [2,1,3], [1,2,3]
    let m = vec![vec![3.0, 2.0, 1.0], vec![3.0, 1.0, 2.0], vec![2.0, 3.0, 1.0], vec![0.9, 0.5, 0.1]];
    let r = friedman(&m).unwrap();
    let sums = [5.0, 8.0, 11.0];
    let chi2 = 12.0 / (4.0 * 3.0 * 4.0) * sums.iter().map(|x: &f64| x * x).sum::<f64>() - 3.0 * 4.0 * 4.0;
    assert!((r.chi2 - chi2).abs() < 1e-12);
    assert_eq!(r.chi2, r.chi2_tie_corrected);
    assert_eq!(r.mean_ranks, vec![1.25, 2.0, 2.75]);
    assert!(friedman(&[vec![1.0, 2.0]]).is_err());
    assert!(friedman(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap().degenerate);
}

#[test]
fn stratified_folds_of_235_subjects() {
    let subjects: Vec<(String, u8)> = (0..235).map(|i| (format!("s{i:03}"), u8::from(i < 84))).collect();
    let folds = make_folds_for_subjects(&subjects, 5, 3).unwrap();
    assert_eq!(folds.len(), 5);
    assert_no_leakage(&folds).unwrap();
    let mut seen = BTreeSet::new();
    for f in &folds {
        let pos = f.val_subjects.iter().filter(|s| s[1..].parse::<usize>().unwrap() < 84).count();
        assert!(pos == 16 || pos == 17, "fold {} has {pos} positives", f.fold_id);
        assert!(f.val_subjects.len() == 47);
        assert_eq!(f.train_subjects.len() + f.val_subjects.len(), 235);
        seen.extend(f.val_subjects.iter().cloned());
    }
    assert_eq!(seen.len(), 235);
    assert_eq!(make_folds_for_subjects(&subjects, 5, 3).unwrap(), folds);
    assert!(make_folds_for_subjects(&subjects, 1, 3).is_err());
}

#[test]
fn pooled_auc_concatenates_folds() {
    let a = scored(1, 20, 7);
    let b = scored(2, 30, 7);
    let all: Vec<Scored> = a.iter().chain(&b).copied().collect();
    assert_eq!(pooled_auc(&[a, b]).unwrap(), auc(&all).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn auc_agrees_with_pairwise_and_trapezoid(seed in any::<u64>(), n in 2usize..60, grid in 2u32..20) {
        let s = scored(seed, n, grid);
        let a = auc(&s).unwrap();
        prop_assert!((a - pairwise_auc(&s)).abs() < 1e-12);
        let pts = roc_points(&s).unwrap();
        prop_assert_eq!(*pts.last().unwrap(), (1.0, 1.0));
        prop_assert!((a - trapezoid(&pts)).abs() < 1e-12);
    }

    #[test]
    fn auc_is_invariant_to_monotone_maps(seed in any::<u64>(), n in 2usize..40) {
        let s = scored(seed, n, 1000);
        let t: Vec<Scored> = s.iter().map(|(x, y)| ((3.0 * x).exp() - 7.0, *y)).collect();
        prop_assert!((auc(&s).unwrap() - auc(&t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn exact_wilcoxon_matches_enumeration(seed in any::<u64>(), n in 1usize..=12, grid in 2i32..8) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..n).map(|_| r.random_range(-grid..=grid) as f64 / 10.0).collect();
        let b = vec![0.0; n];
        match wilcoxon_signed_rank(&a, &b) {
            Ok(w) => prop_assert!((w.p_value - brute_wilcoxon(&a)).abs() < 1e-12),
            Err(TafError::TestUndefined(_)) => prop_assert!(a.iter().all(|x| *x == 0.0)),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        }
    }

    #[test]
    fn friedman_mean_ranks_sum_to_constant(seed in any::<u64>(), n in 2usize..10, k in 2usize..6) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let m: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| r.random_range(0..4) as f64).collect()).collect();
        let f = friedman(&m).unwrap();
        prop_assert!((f.mean_ranks.iter().sum::<f64>() - (k * (k + 1)) as f64 / 2.0).abs() < 1e-9);
        prop_assert!(f.chi2 >= 0.0);
        if !f.degenerate {
            prop_assert!(f.chi2_tie_corrected >= f.chi2 - 1e-12);
        }
    }

    #[test]
    fn subsample_keeps_both_classes_and_is_subset(seed in any::<u64>(), frac in 0.1f64..=1.0) {
        let subjects: Vec<(String, u8)> = (0..50).map(|i| (format!("s{i}"), u8::from(i % 3 == 0))).collect();
        let sub = subsample_subjects(&subjects, frac, seed).unwrap();
        prop_assert!(sub.iter().all(|s| subjects.contains(s)));
        prop_assert!(sub.iter().any(|s| s.1 == 1) && sub.iter().any(|s| s.1 == 0));
    }
}
