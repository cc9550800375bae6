//! Cross-validation and learning-curve harness over cached pair features.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rayon::prelude::*;
use tafnet_nn::ParamStore;

use crate::baselines::{ModelConfig, ModelKind};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Result, TafError};
use crate::preprocess::{run_pipeline, IdentityRegistration, PreprocessConfig, PreprocessOutcome, ThresholdExtractor};
use crate::rng::SeededRng;
use crate::stats::{self, FoldResult, FoldSplit, Scored};
use crate::synth::{generate_pretrain_set, PhantomSpec};
use crate::trainer::{finetune, predict, pretrain, FeaturePair, PretrainOutcome, TrainConfig};
use crate::volume::Volume;

/// Decision threshold for sensitivity and F1.
pub const THRESHOLD: f64 = 0.5;

pub const LEARNING_FRACTIONS: [f64; 3] = [0.2, 0.6, 1.0];

/// Offset between the cohort seed and the pretraining-set seed, so the two
/// never share subject streams.
pub const PRETRAIN_SEED_OFFSET: u64 = 1 << 32;

/// Stream that initialises encoder weights.
pub const ENCODER_INIT_STREAM: u64 = 3;

pub fn pretrain_rng(seed: u64) -> SeededRng {
    SeededRng::new(seed.wrapping_add(PRETRAIN_SEED_OFFSET))
}

/// Preprocessing with the threshold extractor and identity registration.
pub fn preprocess_volume(raw: &Volume, cfg: &PreprocessConfig) -> Result<PreprocessOutcome> {
    run_pipeline(raw, &ThresholdExtractor, &IdentityRegistration, raw, cfg)
}

/// Preprocesses many volumes in parallel, preserving order.
pub fn preprocess_all(raw: &[&Volume], cfg: &PreprocessConfig) -> Result<Vec<PreprocessOutcome>> {
    raw.par_iter().map(|v| preprocess_volume(v, cfg)).collect()
}

pub struct PretrainedEncoder {
    pub encoder: Encoder,
    pub params: ParamStore,
    pub outcome: PretrainOutcome,
}

/// Generates `n` pretraining phantoms, preprocesses them like cohort scans,
/// and runs phase 1. Data come from [`pretrain_rng`], weights from
/// stream [`ENCODER_INIT_STREAM`] of `seed`.
pub fn pretrain_encoder(
    spec: &PhantomSpec,
    n: usize,
    enc_cfg: &EncoderConfig,
    prep: &PreprocessConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PretrainedEncoder> {
    let items = generate_pretrain_set(spec, n, &mut pretrain_rng(seed))?;
    let raw: Vec<&Volume> = items.iter().map(|i| &i.volume).collect();
    let vols: Vec<Volume> = preprocess_all(&raw, prep)?.into_iter().map(|o| o.volume).collect();
    let labelled: Vec<(&Volume, u8)> = vols.iter().zip(&items).map(|(v, i)| (v, i.label)).collect();
    let mut params = ParamStore::new();
    let encoder = Encoder::new(&mut params, enc_cfg, &mut SeededRng::new(seed).stream(ENCODER_INIT_STREAM))?;
    let outcome = pretrain(&encoder, &mut params, &labelled, cfg)?;
    Ok(PretrainedEncoder { encoder, params, outcome })
}

#[derive(Clone, Debug, Default)]
pub struct CvResults {
    pub per_model: BTreeMap<ModelKind, Vec<FoldResult>>,
}

impl CvResults {
    pub fn aucs(&self, kind: ModelKind) -> Vec<f64> {
        self.per_model.get(&kind).map(|f| f.iter().map(|r| r.auc).collect()).unwrap_or_default()
    }

    pub fn mean_auc(&self, kind: ModelKind) -> Option<f64> {
        stats::aggregate(&self.aucs(kind)).ok().map(|(m, _)| m)
    }

    /// `methods × folds` AUC matrix transposed to `folds × methods`, in the order of `kinds`.
    pub fn auc_matrix(&self, kinds: &[ModelKind]) -> Vec<Vec<f64>> {
        let cols: Vec<Vec<f64>> = kinds.iter().map(|k| self.aucs(*k)).collect();
        let n = cols.iter().map(Vec::len).min().unwrap_or(0);
        (0..n).map(|f| cols.iter().map(|c| c[f]).collect()).collect()
    }
}

fn subject_set(subjects: &[String]) -> HashSet<&str> {
    subjects.iter().map(String::as_str).collect()
}

/// Splits cached pairs by a fold. Augmented copies only enter training.
pub fn split_features<'a>(data: &'a [FeaturePair], fold: &FoldSplit) -> Result<(Vec<FeaturePair>, Vec<&'a FeaturePair>)> {
    let train_s = subject_set(&fold.train_subjects);
    let val_s = subject_set(&fold.val_subjects);
    if let Some(s) = train_s.intersection(&val_s).next() {
        return Err(TafError::Data(format!("subject {s} on both sides of fold {}", fold.fold_id)));
    }
    let train = data.iter().filter(|p| train_s.contains(p.subject_id.as_str())).cloned().collect();
    let val = data.iter().filter(|p| p.copy == 0 && val_s.contains(p.subject_id.as_str())).collect();
    Ok((train, val))
}

fn score_fold(kind: ModelKind, model_cfg: &ModelConfig, train: &[FeaturePair], val: &[FeaturePair], cfg: &TrainConfig) -> Result<Vec<Scored>> {
    let trained = finetune(kind, model_cfg, train, cfg)?.trained;
    let probs = predict(&trained, val, cfg.batch_size)?;
    Ok(probs.into_iter().zip(val.iter().map(|p| p.label)).collect())
}

/// Trains and scores every model on every fold.
pub fn cross_validate(
    data: &[FeaturePair],
    folds: &[FoldSplit],
    kinds: &[ModelKind],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<CvResults> {
    stats::assert_no_leakage(folds)?;
    let mut out = CvResults::default();
    for fold in folds {
        let (train, val) = split_features(data, fold)?;
        let val: Vec<FeaturePair> = val.into_iter().cloned().collect();
        for &kind in kinds {
            let fold_cfg = TrainConfig { seed: cfg.seed.wrapping_add(fold.fold_id as u64), ..cfg.clone() };
            let scores = score_fold(kind, model_cfg, &train, &val, &fold_cfg)?;
            let r = FoldResult::from_scores(fold.fold_id, scores, THRESHOLD)?;
            out.per_model.entry(kind).or_default().push(r);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearningCurveCell {
    pub fraction: f64,
    pub interval_months: u32,
    pub model: ModelKind,
    /// `(mean, std)` AUC over the folds that could be scored; `None` when
    /// the cell is empty.
    pub auc: Option<(f64, f64)>,
    pub folds_scored: usize,
}

/// Per-interval, per-fraction cross-validation. Training subjects of each
/// fold are subsampled (stratified, seeded); validation folds are kept whole.
/// Cells without data on either side are recorded as absent.
#[allow(clippy::too_many_arguments)]
pub fn learning_curve(
    data: &[FeaturePair],
    folds: &[FoldSplit],
    fractions: &[f64],
    intervals: &[u32],
    kinds: &[ModelKind],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<LearningCurveCell>> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(TafError::Param(format!("fraction {f} outside (0, 1]")));
    }
    stats::assert_no_leakage(folds)?;
    let labels: BTreeMap<&str, u8> = data.iter().map(|p| (p.subject_id.as_str(), p.label)).collect();
    let mut cells = Vec::new();
    for &interval in intervals {
        let subset: Vec<FeaturePair> = data.iter().filter(|p| p.interval_months == interval).cloned().collect();
        for &fraction in fractions {
            let mut per_model: BTreeMap<ModelKind, Vec<f64>> = BTreeMap::new();
            for fold in folds {
                let train_subjects: Vec<(String, u8)> = fold
                    .train_subjects
                    .iter()
                    .filter_map(|s| labels.get(s.as_str()).map(|&l| (s.clone(), l)))
                    .collect();
                if train_subjects.is_empty() {
                    continue;
                }
                let seed = cfg.seed.wrapping_add(1000 * fold.fold_id as u64);
                let kept = stats::subsample_subjects(&train_subjects, fraction, seed)?;
                let sub = FoldSplit {
                    fold_id: fold.fold_id,
                    train_subjects: kept.into_iter().map(|(s, _)| s).collect(),
                    val_subjects: fold.val_subjects.clone(),
                };
                stats::assert_no_leakage(std::slice::from_ref(&sub))?;
                let (train, val) = split_features(&subset, &sub)?;
                let val: Vec<FeaturePair> = val.into_iter().cloned().collect();
                let classes = |v: &[FeaturePair]| v.iter().map(|p| p.label).collect::<BTreeSet<_>>().len();
                if classes(&train) < 2 || classes(&val) < 2 {
                    continue;
                }
                for &kind in kinds {
                    let fold_cfg = TrainConfig { seed: cfg.seed.wrapping_add(fold.fold_id as u64), ..cfg.clone() };
                    let scores = score_fold(kind, model_cfg, &train, &val, &fold_cfg)?;
                    per_model.entry(kind).or_default().push(stats::auc(&scores)?);
                }
            }
            for &kind in kinds {
                let aucs = per_model.remove(&kind).unwrap_or_default();
                cells.push(LearningCurveCell {
                    fraction,
                    interval_months: interval,
                    model: kind,
                    auc: stats::aggregate(&aucs).ok(),
                    folds_scored: aucs.len(),
                });
            }
        }
    }
    Ok(cells)
}
