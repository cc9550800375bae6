//! Two-phase training. Phase 1 trains the encoder with a temporary
//! single-volume head. Phase 2 freezes the encoder, caches its bottleneck
//! features per volume and trains a pair model on them.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use tafnet_nn::{apply_buffer_updates, AdamW, Graph, Linear, ParamStore, Tensor};

use crate::baselines::{ModelConfig, ModelKind, PairModel};
use crate::encoder::{stack, volumes_to_tensor, Encoder, EncoderConfig, PREFIX as ENCODER_PREFIX};
use crate::error::{Result, TafError};
use crate::preprocess::AugmentParams;
use crate::rng::SeededRng;
use crate::stats;
use crate::volume::Volume;

pub const PRETRAIN_HEAD_PREFIX: &str = "pretrain_head.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub class_weighting: bool,
    pub seed: u64,
    pub phase: Phase,
    /// Stop after this many epochs without improvement (validation AUC in
    /// phase 1, training loss in phase 2). `None` runs every epoch.
    pub patience: Option<usize>,
    /// Phase 1 only: held-out fraction for validation AUC.
    pub val_fraction: f64,
    /// Phase 1 only: stop once validation AUC reaches this value.
    pub stop_at_val_auc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            batch_size: 8,
            epochs: 20,
            class_weighting: true,
            seed: 0,
            phase: Phase::Finetune,
            patience: None,
            val_fraction: 0.2,
            stop_at_val_auc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TafError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(TafError::Config("weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(TafError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TafError::Config("batch_size must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(TafError::Config(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

/// Per-sample BCE weights: positives get `N_neg / N_pos` when weighting is on.
pub fn class_weights(labels: &[u8], enabled: bool) -> Result<(f64, f64)> {
    if !enabled {
        return Ok((1.0, 1.0));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(TafError::Data(format!("class weighting needs both classes ({pos} positive, {neg} negative)")));
    }
    Ok((1.0, neg as f64 / pos as f64))
}

fn sample_weights(labels: &[u8], w: (f64, f64)) -> Vec<f64> {
    labels.iter().map(|&l| if l == 1 { w.1 } else { w.0 }).collect()
}

fn batch_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 32) ^ step as u64
}

/// Stratified train/validation index split.
pub fn stratified_split(labels: &[u8], val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let ids: Vec<(String, u8)> = labels.iter().enumerate().map(|(i, &l)| (format!("{i:08}"), l)).collect();
    let val: Vec<usize> = stats::subsample_subjects(&ids, val_fraction, seed)?.iter().map(|(s, _)| s.parse().unwrap()).collect();
    let train = (0..labels.len()).filter(|i| val.binary_search(i).is_err()).collect();
    Ok((train, val))
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub epoch_losses: Vec<f64>,
    pub val_aucs: Vec<f64>,
    /// Validation AUC after the last epoch run.
    pub val_auc: f64,
    pub epochs_run: usize,
}

/// Temporary single-volume head `GAP → Linear(C → 1)`.
pub fn pretrain_head(ps: &mut ParamStore, channels: usize, rng: &mut impl Rng) -> Linear {
    let name = format!("{PRETRAIN_HEAD_PREFIX}fc");
    match (ps.find(&format!("{name}.weight")), ps.find(&format!("{name}.bias"))) {
        (Some(weight), bias) => Linear { weight, bias, input: channels, output: 1 },
        _ => Linear::new(ps, &name, channels, 1, rng),
    }
}

/// Phase 1: trains the encoder plus a temporary head on labelled single
/// volumes, reporting AUC on a stratified held-out split. Batch-norm running
/// statistics are recalibrated over the training volumes after every epoch.
pub fn pretrain(encoder: &Encoder, ps: &mut ParamStore, items: &[(&Volume, u8)], cfg: &TrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(TafError::Data("pretraining set is empty".into()));
    }
    let labels: Vec<u8> = items.iter().map(|i| i.1).collect();
    let (train, val) = stratified_split(&labels, cfg.val_fraction, cfg.seed)?;
    if train.is_empty() {
        return Err(TafError::Data("no training items left after the validation split".into()));
    }
    let mut rng = SeededRng::new(cfg.seed).stream(1);
    let head = pretrain_head(ps, encoder.config().out_channels(), &mut rng);
    ps.set_frozen(ENCODER_PREFIX, false);
    ps.set_frozen(PRETRAIN_HEAD_PREFIX, false);
    let train_labels: Vec<u8> = train.iter().map(|&i| labels[i]).collect();
    let cw = class_weights(&train_labels, cfg.class_weighting)?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let grid = encoder.config().input_grid;

    let score = |ps: &ParamStore, idx: &[usize]| -> Result<f64> {
        let mut scored = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(cfg.batch_size) {
            let vols: Vec<&Volume> = chunk.iter().map(|&i| items[i].0).collect();
            let mut g = Graph::new(false);
            let x = g.input(volumes_to_tensor(&vols, grid)?);
            let f = encoder.forward(&mut g, ps, x)?.bottleneck;
            let pooled = g.gap(f)?;
            let z = head.forward(&mut g, ps, pooled)?;
            scored.extend(g.value(z).data().iter().zip(chunk).map(|(&z, &i)| (z, labels[i])));
        }
        stats::auc(&scored)
    };

    let mut out = PretrainOutcome { epoch_losses: Vec::new(), val_aucs: Vec::new(), val_auc: f64::NAN, epochs_run: 0 };
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0;
    let train_vols: Vec<&Volume> = train.iter().map(|&i| items[i].0).collect();
    let mut order = train.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let vols: Vec<&Volume> = chunk.iter().map(|&i| items[i].0).collect();
            let y: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::with_seed(true, batch_seed(cfg.seed, epoch, step));
            let x = g.input(volumes_to_tensor(&vols, grid)?);
            let f = encoder.forward(&mut g, ps, x)?.bottleneck;
            let pooled = g.gap(f)?;
            let z = head.forward(&mut g, ps, pooled)?;
            let targets: Vec<f64> = y.iter().map(|&l| l as f64).collect();
            let loss = g.bce_with_logits(z, &targets, &sample_weights(&y, cw))?;
            total += g.value(loss).data()[0] * chunk.len() as f64;
            let grads = g.backward(loss)?;
            ps.zero_grad();
            g.accumulate_param_grads(&grads, ps);
            opt.step(ps);
            apply_buffer_updates(ps, g.take_buffer_updates())?;
        }
        out.epoch_losses.push(total / order.len() as f64);
        out.epochs_run = epoch + 1;
        recalibrate_batch_norm(encoder, ps, &train_vols, cfg.batch_size)?;
        let auc = if val.is_empty() { f64::NAN } else { score(ps, &val)? };
        out.val_aucs.push(auc);
        out.val_auc = auc;
        if cfg.stop_at_val_auc.is_some_and(|t| auc >= t) {
            break;
        }
        if auc > best {
            best = auc;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    Ok(out)
}

/// Replaces every encoder batch-norm running statistic by its cumulative
/// average over training-mode passes on `volumes`, in order.
pub fn recalibrate_batch_norm(encoder: &Encoder, ps: &mut ParamStore, volumes: &[&Volume], batch: usize) -> Result<()> {
    let grid = encoder.config().input_grid;
    for (k, chunk) in volumes.chunks(batch.max(1)).enumerate() {
        let mut g = Graph::new(true);
        g.set_bn_momentum(Some(1.0 / (k as f64 + 1.0)));
        let x = g.input(volumes_to_tensor(chunk, grid)?);
        encoder.forward(&mut g, ps, x)?;
        apply_buffer_updates(ps, g.take_buffer_updates())?;
    }
    Ok(())
}

/// Cached bottleneck features of one baseline/follow-up pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair {
    pub subject_id: String,
    pub interval_months: u32,
    pub label: u8,
    pub f_bl: Tensor,
    pub f_fu: Tensor,
    /// 0 for the original pair, `k ≥ 1` for the k-th augmented copy.
    pub copy: usize,
}

/// A pair of preprocessed volumes ready for encoding.
pub struct VolumePair<'a> {
    pub subject_id: &'a str,
    pub interval_months: u32,
    pub label: u8,
    pub baseline: &'a Volume,
    pub followup: &'a Volume,
}

/// Encodes every pair with the frozen encoder in eval mode. With
/// `augment_copies > 0`, each pair additionally yields that many copies
/// under jointly sampled augmentations (seeded from `seed`).
pub fn encode_pairs(encoder: &Encoder, ps: &ParamStore, pairs: &[VolumePair<'_>], augment_copies: usize, seed: u64, batch: usize) -> Result<Vec<FeaturePair>> {
    let mut rng = SeededRng::new(seed).stream(7);
    let mut owned: Vec<(usize, usize, Volume, Volume)> = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        for c in 1..=augment_copies {
            let a = AugmentParams::sample(&mut rng);
            owned.push((i, c, a.apply(p.baseline)?, a.apply(p.followup)?));
        }
    }
    let mut vols: Vec<&Volume> = Vec::with_capacity(2 * (pairs.len() + owned.len()));
    for p in pairs {
        vols.push(p.baseline);
        vols.push(p.followup);
    }
    for (_, _, b, f) in &owned {
        vols.push(b);
        vols.push(f);
    }
    let feats = encoder.encode_volumes(ps, &vols, batch)?;
    let mut it = feats.into_iter();
    let mut out = Vec::with_capacity(pairs.len() + owned.len());
    let keys = pairs.iter().enumerate().map(|(i, _)| (i, 0)).chain(owned.iter().map(|(i, c, _, _)| (*i, *c)));
    for (i, copy) in keys.collect::<Vec<_>>() {
        let p = &pairs[i];
        let (f_bl, f_fu) = (it.next().unwrap(), it.next().unwrap());
        out.push(FeaturePair { subject_id: p.subject_id.to_string(), interval_months: p.interval_months, label: p.label, f_bl, f_fu, copy });
    }
    Ok(out)
}

/// Writes cached features to one checkpoint file. Pair metadata is carried
/// in the entry names.
pub fn save_features(path: &Path, data: &[FeaturePair]) -> Result<()> {
    let mut ps = ParamStore::new();
    for (i, p) in data.iter().enumerate() {
        if p.subject_id.contains('|') {
            return Err(TafError::Data(format!("subject id {:?} contains '|'", p.subject_id)));
        }
        let key = format!("{i:07}|{}|{}|{}|{}", p.subject_id, p.interval_months, p.label, p.copy);
        ps.add_buffer(&format!("{key}|bl"), p.f_bl.clone());
        ps.add_buffer(&format!("{key}|fu"), p.f_fu.clone());
    }
    ps.save(path).map_err(|e| nn_io(e, path))
}

pub fn load_features(path: &Path) -> Result<Vec<FeaturePair>> {
    let ps = ParamStore::load(path).map_err(|e| nn_io(e, path))?;
    let ids: Vec<_> = ps.ids().collect();
    let bad = || TafError::Format(format!("{} is not a feature cache", path.display()));
    let mut out = Vec::with_capacity(ids.len() / 2);
    for pair in ids.chunks(2) {
        let [bl, fu] = pair else { return Err(bad()) };
        let parts: Vec<&str> = ps.name(*bl).split('|').collect();
        if parts.len() != 6 || parts[5] != "bl" || ps.name(*fu) != format!("{}|fu", parts[..5].join("|")) {
            return Err(bad());
        }
        out.push(FeaturePair {
            subject_id: parts[1].to_string(),
            interval_months: parts[2].parse().map_err(|_| bad())?,
            label: parts[3].parse().map_err(|_| bad())?,
            copy: parts[4].parse().map_err(|_| bad())?,
            f_bl: ps.get(*bl).clone(),
            f_fu: ps.get(*fu).clone(),
        });
    }
    Ok(out)
}

/// A trained pair model and its parameters (encoder excluded).
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: PairModel,
    pub params: ParamStore,
    pub config: ModelConfig,
    pub epochs_trained: usize,
}

const META_EPOCHS: &str = "meta.epochs_trained";
const META_KIND: &str = "meta.kind";

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    /// Writes the model parameters plus kind and epoch count.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ps = self.params.clone();
        let kind = ModelKind::ALL.iter().position(|k| *k == self.kind()).unwrap();
        ps.add_buffer(META_EPOCHS, Tensor::scalar(self.epochs_trained as f64));
        ps.add_buffer(META_KIND, Tensor::scalar(kind as f64));
        ps.save(path).map_err(|e| nn_io(e, path))
    }

    /// Rebuilds a model saved by [`TrainedModel::save`]; `config` must match
    /// the one it was trained with.
    pub fn load(path: &Path, config: &ModelConfig) -> Result<Self> {
        let loaded = ParamStore::load(path).map_err(|e| nn_io(e, path))?;
        let meta = |name: &str| -> Result<f64> {
            loaded
                .find(name)
                .map(|id| loaded.get(id).data()[0])
                .ok_or_else(|| TafError::Format(format!("{} lacks {name}", path.display())))
        };
        let kind = ModelKind::ALL
            .get(meta(META_KIND)? as usize)
            .copied()
            .ok_or_else(|| TafError::Format("unknown model kind code".into()))?;
        let epochs_trained = meta(META_EPOCHS)? as usize;
        let mut params = ParamStore::new();
        let model = PairModel::new(kind, &mut params, config, &mut SeededRng::new(0))?;
        let mut copied = 0;
        for section in model.sections() {
            copied += params.copy_section_from(&loaded, section)?;
        }
        if copied != params.len() {
            return Err(TafError::Format(format!("{} holds {copied} of {} model entries", path.display(), params.len())));
        }
        Ok(Self { model, params, config: config.clone(), epochs_trained })
    }
}

fn nn_io(e: tafnet_nn::NnError, path: &Path) -> TafError {
    match e {
        tafnet_nn::NnError::Io(source) => TafError::Io { path: path.to_path_buf(), source },
        other => TafError::Nn(other),
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub trained: TrainedModel,
    pub epoch_losses: Vec<f64>,
}

fn batch_tensors(data: &[FeaturePair], idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let bl: Vec<&Tensor> = idx.iter().map(|&i| &data[i].f_bl).collect();
    let fu: Vec<&Tensor> = idx.iter().map(|&i| &data[i].f_fu).collect();
    Ok((stack(&bl)?, stack(&fu)?))
}

/// Phase 2 on cached features. Only the pair model's parameters exist in
/// the returned store, so the encoder cannot change.
pub fn finetune(kind: ModelKind, model_cfg: &ModelConfig, data: &[FeaturePair], cfg: &TrainConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TafError::Data("no training pairs".into()));
    }
    let mut rng = SeededRng::new(cfg.seed).stream(2);
    let mut ps = ParamStore::new();
    let model = PairModel::new(kind, &mut ps, model_cfg, &mut rng)?;
    let labels: Vec<u8> = data.iter().map(|p| p.label).collect();
    let cw = class_weights(&labels, cfg.class_weighting)?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (bl, fu) = batch_tensors(data, chunk)?;
            let y: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let targets: Vec<f64> = y.iter().map(|&l| l as f64).collect();
            let mut g = Graph::with_seed(true, batch_seed(cfg.seed, epoch, step));
            let (bl, fu) = (g.input(bl), g.input(fu));
            let z = model.logits(&mut g, &ps, bl, fu)?;
            let loss = g.bce_with_logits(z, &targets, &sample_weights(&y, cw))?;
            total += g.value(loss).data()[0] * chunk.len() as f64;
            let grads = g.backward(loss)?;
            ps.zero_grad();
            g.accumulate_param_grads(&grads, &mut ps);
            opt.step(&mut ps);
        }
        let mean = total / data.len() as f64;
        losses.push(mean);
        if mean < best - 1e-12 {
            best = mean;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    let epochs_trained = losses.len();
    Ok(FinetuneOutcome { trained: TrainedModel { model, params: ps, config: model_cfg.clone(), epochs_trained }, epoch_losses: losses })
}

/// Conversion probabilities in eval mode, in input order.
pub fn predict(trained: &TrainedModel, data: &[FeaturePair], batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (bl, fu) = batch_tensors(data, chunk)?;
        let mut g = Graph::new(false);
        let (bl, fu) = (g.input(bl), g.input(fu));
        let z = trained.model.logits(&mut g, &trained.params, bl, fu)?;
        out.extend(g.value(z).data().iter().map(|&z| tafnet_nn::sigmoid(z)));
    }
    Ok(out)
}

/// Builds an encoder and loads its weights from a checkpoint. The encoder
/// section is frozen in the returned store.
pub fn load_encoder(path: &Path, cfg: &EncoderConfig) -> Result<(Encoder, ParamStore)> {
    if !path.exists() {
        return Err(TafError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "encoder checkpoint not found"),
        });
    }
    let loaded = ParamStore::load(path).map_err(|e| nn_io(e, path))?;
    let mut ps = ParamStore::new();
    let encoder = Encoder::new(&mut ps, cfg, &mut SeededRng::new(0))?;
    let copied = ps.copy_section_from(&loaded, ENCODER_PREFIX)?;
    if copied == 0 {
        return Err(TafError::Format(format!("{} holds no encoder weights", path.display())));
    }
    ps.set_frozen(ENCODER_PREFIX, true);
    Ok((encoder, ps))
}

#[derive(Clone, Debug)]
pub struct CheckpointFinetune {
    pub outcome: FinetuneOutcome,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
}

/// Loads the frozen encoder from `ckpt`, encodes `pairs`, trains `kind` and
/// reports the encoder section hash before and after.
pub fn finetune_from_checkpoint(
    ckpt: &Path,
    enc_cfg: &EncoderConfig,
    kind: ModelKind,
    model_cfg: &ModelConfig,
    pairs: &[VolumePair<'_>],
    augment_copies: usize,
    cfg: &TrainConfig,
) -> Result<CheckpointFinetune> {
    let (encoder, ps) = load_encoder(ckpt, enc_cfg)?;
    let before = ps.section_hash(ENCODER_PREFIX);
    let feats = encode_pairs(&encoder, &ps, pairs, augment_copies, cfg.seed, cfg.batch_size)?;
    let outcome = finetune(kind, model_cfg, &feats, cfg)?;
    let after = ps.section_hash(ENCODER_PREFIX);
    Ok(CheckpointFinetune { outcome, encoder_hash_before: before, encoder_hash_after: after })
}

/// `epoch,loss` CSV text.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l:.10}", i + 1);
    }
    s
}

/// At most `max_upticks` epoch-to-epoch increases in the first `window` epochs,
/// and the last of them below the first.
pub fn loss_trend_ok(losses: &[f64], window: usize, max_upticks: usize) -> bool {
    let w = &losses[..losses.len().min(window)];
    if w.len() < 2 {
        return true;
    }
    let upticks = w.windows(2).filter(|p| p[1] > p[0]).count();
    upticks <= max_upticks && w[w.len() - 1] < w[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_zero_epochs() {
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(TafError::Config(_))));
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn class_weight_ratio() {
        assert_eq!(class_weights(&[1, 0, 0, 0], true).unwrap(), (1.0, 3.0));
        assert_eq!(class_weights(&[1, 0], true).unwrap(), (1.0, 1.0));
        assert_eq!(class_weights(&[1, 1], false).unwrap(), (1.0, 1.0));
        assert!(class_weights(&[1, 1], true).is_err());
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels: Vec<u8> = (0..20).map(|i| u8::from(i % 4 == 0)).collect();
        let (tr, va) = stratified_split(&labels, 0.2, 3).unwrap();
        assert_eq!(tr.len() + va.len(), 20);
        assert!(va.iter().all(|i| !tr.contains(i)));
        assert_eq!(va.iter().filter(|&&i| labels[i] == 1).count(), 1);
    }

    #[test]
    fn trend_allows_two_upticks() {
        assert!(loss_trend_ok(&[1.0, 0.9, 0.95, 0.8, 0.85, 0.7], 10, 2));
        assert!(!loss_trend_ok(&[1.0, 1.1, 1.0, 1.2, 1.1, 1.3], 10, 2));
    }
}
