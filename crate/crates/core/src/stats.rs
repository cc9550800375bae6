//! Cross-validation splits, classification metrics and the non-parametric
//! tests used to compare methods across folds.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::cohort::Cohort;
use crate::error::{Result, TafError};
use crate::rng::SeededRng;

/// A prediction score with its binary ground truth.
pub type Scored = (f64, u8);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
}

/// Stratified subject-level k-fold split. Each class is shuffled and dealt
/// round-robin, the second class continuing where the first stopped, so
/// per-fold class counts differ by at most one.
pub fn make_folds_for_subjects(subjects: &[(String, u8)], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(TafError::Param("need at least 2 folds".into()));
    }
    let mut by_class: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for (s, l) in subjects {
        if *l > 1 {
            return Err(TafError::Data(format!("label {l} for subject {s}")));
        }
        by_class[*l as usize].push(s);
    }
    for (label, members) in by_class.iter().enumerate() {
        if members.len() < k {
            return Err(TafError::Data(format!("class {label} has {} subjects, fewer than {k} folds", members.len())));
        }
    }
    let mut rng = SeededRng::new(seed);
    let mut val: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut slot = 0;
    for members in by_class.iter_mut().rev() {
        members.sort_unstable();
        members.shuffle(&mut rng);
        for s in members.iter() {
            val[slot % k].push(s.to_string());
            slot += 1;
        }
    }
    let all: Vec<&str> = {
        let mut a: Vec<&str> = subjects.iter().map(|(s, _)| s.as_str()).collect();
        a.sort_unstable();
        a
    };
    Ok(val
        .into_iter()
        .enumerate()
        .map(|(fold_id, mut v)| {
            v.sort_unstable();
            let train = all.iter().filter(|s| v.binary_search_by(|x| x.as_str().cmp(s)).is_err()).map(|s| s.to_string()).collect();
            FoldSplit { fold_id, train_subjects: train, val_subjects: v }
        })
        .collect())
}

pub fn make_folds(cohort: &Cohort, k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    let subjects: Vec<(String, u8)> =
        cohort.subjects().into_iter().map(|s| (s.to_string(), cohort.subject_label(s).unwrap())).collect();
    make_folds_for_subjects(&subjects, k, seed)
}

/// Panics-free leakage check: `Err` names the first subject found on both sides.
pub fn assert_no_leakage(folds: &[FoldSplit]) -> Result<()> {
    for f in folds {
        let train: std::collections::HashSet<&str> = f.train_subjects.iter().map(String::as_str).collect();
        if let Some(s) = f.val_subjects.iter().find(|s| train.contains(s.as_str())) {
            return Err(TafError::Data(format!("subject {s} is in both train and val of fold {}", f.fold_id)));
        }
    }
    Ok(())
}

/// Stratified, seeded subsample of `fraction` of the subjects of each class
/// (at least one per non-empty class).
pub fn subsample_subjects(subjects: &[(String, u8)], fraction: f64, seed: u64) -> Result<Vec<(String, u8)>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TafError::Param(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::new();
    for label in [0u8, 1] {
        let mut members: Vec<&(String, u8)> = subjects.iter().filter(|(_, l)| *l == label).collect();
        if members.is_empty() {
            continue;
        }
        members.sort();
        members.shuffle(&mut rng);
        let keep = ((members.len() as f64 * fraction).round() as usize).clamp(1, members.len());
        out.extend(members.into_iter().take(keep).cloned());
    }
    out.sort();
    Ok(out)
}

fn class_sizes(scores: &[Scored]) -> Result<(usize, usize)> {
    let pos = scores.iter().filter(|s| s.1 == 1).count();
    let neg = scores.iter().filter(|s| s.1 == 0).count();
    if pos + neg != scores.len() {
        return Err(TafError::Data("labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| s.0.is_nan()) {
        return Err(TafError::Data("NaN score".into()));
    }
    Ok((pos, neg))
}

/// Mid-ranks (1-based) of `values`, ties sharing their average rank.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney AUC: the probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn auc(scores: &[Scored]) -> Result<f64> {
    let (pos, neg) = class_sizes(scores)?;
    if pos == 0 || neg == 0 {
        return Err(TafError::MetricUndefined(format!("AUC needs both classes ({pos} positive, {neg} negative)")));
    }
    let values: Vec<f64> = scores.iter().map(|s| s.0).collect();
    let ranks = mid_ranks(&values);
    let r_pos: f64 = ranks.iter().zip(scores).filter(|(_, s)| s.1 == 1).map(|(r, _)| r).sum();
    let u = r_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// ROC vertices `(fpr, tpr)` from `(0,0)` to `(1,1)`, one per distinct score.
pub fn roc_points(scores: &[Scored]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = class_sizes(scores)?;
    if pos == 0 || neg == 0 {
        return Err(TafError::MetricUndefined("ROC needs both classes".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

/// Sensitivity and F1 with `score ≥ threshold` predicted positive. F1 is 0
/// when nothing is predicted positive.
pub fn sensitivity_f1(scores: &[Scored], threshold: f64) -> Result<(f64, f64)> {
    let (pos, _) = class_sizes(scores)?;
    if pos == 0 {
        return Err(TafError::MetricUndefined("sensitivity needs at least one positive".into()));
    }
    let tp = scores.iter().filter(|s| s.1 == 1 && s.0 >= threshold).count() as f64;
    let fp = scores.iter().filter(|s| s.1 == 0 && s.0 >= threshold).count() as f64;
    let fn_ = pos as f64 - tp;
    let sens = tp / pos as f64;
    let f1 = if tp + fp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    Ok((sens, f1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub auc: f64,
    pub sensitivity: f64,
    pub f1: f64,
    pub scores: Vec<Scored>,
}

impl FoldResult {
    pub fn from_scores(fold: usize, scores: Vec<Scored>, threshold: f64) -> Result<Self> {
        let auc = auc(&scores)?;
        let (sensitivity, f1) = sensitivity_f1(&scores, threshold)?;
        Ok(Self { fold, auc, sensitivity, f1, scores })
    }
}

/// Mean and population (n-divisor) standard deviation.
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(TafError::Param("aggregate of no values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// `"0.916 ± 0.044"` style formatting.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

/// Wins, ties and losses of `a` against `b`.
pub fn win_tie_loss(a: &[f64], b: &[f64]) -> (usize, usize, usize) {
    let mut wtl = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        if x > y {
            wtl.0 += 1;
        } else if x == y {
            wtl.1 += 1;
        } else {
            wtl.2 += 1;
        }
    }
    wtl
}

#[derive(Clone, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    /// Non-zero differences used.
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
}

/// Largest `n` handled with the exact null distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// One-sided signed-rank test of `a > b`. Zero differences are dropped;
/// tied magnitudes share mid-ranks. Exact for `n ≤ 25`, otherwise a
/// tie-corrected normal approximation with continuity correction.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(TafError::Param("samples differ in length".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.is_empty() {
        return Err(TafError::TestUndefined("all differences are zero".into()));
    }
    let n = d.len();
    let ranks = mid_ranks(&d.iter().map(|x| x.abs()).collect::<Vec<_>>());
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, x)| **x > 0.0).map(|(r, _)| r).sum();
    if n <= WILCOXON_EXACT_MAX {
        // Doubled ranks are integers, so the null distribution is a subset-sum count.
        let twice: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = twice.iter().sum();
        let mut counts = vec![0f64; total + 1];
        counts[0] = 1.0;
        for &r in &twice {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let observed = (2.0 * w_plus).round() as usize;
        let tail: f64 = counts[observed..].iter().sum();
        let p = tail / 2f64.powi(n as i32);
        return Ok(WilcoxonResult { w_plus, n, p_value: p.min(1.0), exact: true });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        var -= (t * t * t - t) / 48.0;
        i += j;
    }
    let z = (w_plus - mean - 0.5) / var.sqrt();
    let p = 1.0 - Normal::standard().cdf(z);
    Ok(WilcoxonResult { w_plus, n, p_value: p, exact: false })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FriedmanResult {
    pub chi2: f64,
    pub chi2_tie_corrected: f64,
    pub p_value: f64,
    pub p_value_tie_corrected: f64,
    /// Mean rank per method; rank 1 is the best (largest) value in a row.
    pub mean_ranks: Vec<f64>,
    /// Every row fully tied; statistics reported as 0.
    pub degenerate: bool,
}

/// Friedman test on a `blocks × methods` matrix (folds as blocks).
pub fn friedman(matrix: &[Vec<f64>]) -> Result<FriedmanResult> {
    let n = matrix.len();
    let k = matrix.first().map_or(0, Vec::len);
    if n < 2 || k < 2 || matrix.iter().any(|r| r.len() != k) {
        return Err(TafError::Param(format!("Friedman needs a rectangular matrix with ≥2 rows and columns, got {n}×{k}")));
    }
    let mut rank_sums = vec![0.0; k];
    let mut tie_term = 0.0;
    for row in matrix {
        let neg: Vec<f64> = row.iter().map(|v| -v).collect();
        let ranks = mid_ranks(&neg);
        for (s, r) in rank_sums.iter_mut().zip(&ranks) {
            *s += r;
        }
        let mut groups: BTreeMap<u64, usize> = BTreeMap::new();
        for v in row {
            *groups.entry(v.to_bits()).or_default() += 1;
        }
        tie_term += groups.values().map(|&t| (t * t * t - t) as f64).sum::<f64>();
    }
    let (nf, kf) = (n as f64, k as f64);
    let sum_sq: f64 = rank_sums.iter().map(|r| r * r).sum();
    let chi2 = 12.0 / (nf * kf * (kf + 1.0)) * sum_sq - 3.0 * nf * (kf + 1.0);
    let denom = 1.0 - tie_term / (nf * (kf * kf * kf - kf));
    let degenerate = denom <= 1e-12;
    let chi2_tc = if degenerate { 0.0 } else { chi2 / denom };
    let chi2 = if degenerate { 0.0 } else { chi2.max(0.0) };
    let dist = ChiSquared::new(kf - 1.0).map_err(|e| TafError::Param(e.to_string()))?;
    Ok(FriedmanResult {
        chi2,
        chi2_tie_corrected: chi2_tc,
        p_value: 1.0 - dist.cdf(chi2),
        p_value_tie_corrected: 1.0 - dist.cdf(chi2_tc),
        mean_ranks: rank_sums.iter().map(|r| r / nf).collect(),
        degenerate,
    })
}

/// AUC of the concatenation of all folds' predictions.
pub fn pooled_auc(folds: &[Vec<Scored>]) -> Result<f64> {
    let all: Vec<Scored> = folds.iter().flatten().copied().collect();
    auc(&all)
}
