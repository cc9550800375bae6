use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tafnet::baselines::{ModelConfig, ModelKind};
use tafnet::encoder::{Encoder, EncoderConfig};
use tafnet::fusion::{FusionConfig, GateCoefficients, Head, HeadConfig};
use tafnet::interpret::*;
use tafnet::stats::auc;
use tafnet::synth::*;
use tafnet::trainer::*;
use tafnet::{SeededRng, TafError, Volume};
use tafnet_nn::{Graph, ParamStore, Tensor};

fn spec24() -> PhantomSpec {
    PhantomSpec { grid: 24, ..PhantomSpec::default() }
}

fn feature_pairs(n: usize, d: usize, seed: u64) -> Vec<FeaturePair> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = u8::from(i % 3 == 0);
            let mut t = || Tensor::from_vec(&[d, 1, 1, 1], (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
            let f_bl = t();
            let mut f_fu = t();
            if label == 1 {
                f_fu.data_mut()[0] += 2.0;
            }
            FeaturePair { subject_id: format!("s{i:03}"), interval_months: 12, label, f_bl, f_fu, copy: 0 }
        })
        .collect()
}

fn model_cfg(d: usize) -> ModelConfig {
    ModelConfig { fusion: FusionConfig { d_model: d, heads: 2 }, head: HeadConfig { hidden: 8, dropout: 0.0 }, lstm_hidden: 4 }
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { lr: 1e-2, epochs, batch_size: 4, seed: 3, ..TrainConfig::default() }
}

#[test]
fn cohort_is_deterministic_and_background_is_zero() {
    let a = synthesize_cohort(&spec24(), 6, 0.5, &[12, 24], &mut SeededRng::new(4)).unwrap();
    let b = synthesize_cohort(&spec24(), 6, 0.5, &[24, 12], &mut SeededRng::new(4)).unwrap();
    assert_eq!(a.n_pairs(), 12);
    for (x, y) in a.subjects.iter().zip(&b.subjects) {
        assert_eq!((x.label, &x.baseline), (y.label, &y.baseline));
        assert_eq!(x.followups[1].1, y.followups[1].1);
    }
    let v = a.subjects[0].baseline.data();
    assert_eq!(v[[0, 0, 0]], 0.0);
    assert!(v[[12, 12, 12]] > 0.0);
    let c = synthesize_cohort(&spec24(), 6, 0.5, &[12], &mut SeededRng::new(5)).unwrap();
    assert_ne!(c.subjects[0].baseline, a.subjects[0].baseline);
}

#[test]
fn invalid_generation_parameters() {
    assert!(synthesize_cohort(&spec24(), 3, 0.5, &[12], &mut SeededRng::new(0)).is_err());
    assert!(synthesize_cohort(&spec24(), 8, 1.0, &[12], &mut SeededRng::new(0)).is_err());
    assert!(synthesize_cohort(&spec24(), 8, 0.5, &[18], &mut SeededRng::new(0)).is_err());
    assert!(matches!(PhantomSpec { grid: 16, ..PhantomSpec::default() }.validate(), Err(TafError::Param(_))));
}

#[test]
fn matched_baselines_carry_no_label_signal() {
    let c = synthesize_cohort(&spec24(), 300, 0.4, &[6], &mut SeededRng::new(21)).unwrap();
    let scored: Vec<(f64, u8)> = c.subjects.iter().map(|s| (s.baseline_geometry.ventricle_volume(), s.label)).collect();
    let a = auc(&scored).unwrap();
    assert!((a - 0.5).abs() < 0.07, "baseline ventricle AUC {a}");
    let (pos, _) = (c.subjects.iter().filter(|s| s.label == 1).count(), 0);
    assert_eq!(pos, 120);
}

#[test]
fn converter_followups_grow_ventricles_and_stable_ones_do_not() {
    let c = synthesize_cohort(&spec24(), 8, 0.5, &[24], &mut SeededRng::new(8)).unwrap();
    for s in &c.subjects {
        let ratio = s.followups[0].2.ventricle_volume() / s.baseline_geometry.ventricle_volume();
        if s.label == 1 {
            assert!((ratio - 1.24f64.powi(3)).abs() < 1e-9);
            assert!(s.followups[0].2.hippocampus_radius < s.baseline_geometry.hippocampus_radius);
        } else {
            assert_eq!(ratio, 1.0);
        }
    }
}

#[test]
fn pretrain_classes_differ_by_the_configured_ventricle_ratio() {
    let items = generate_pretrain_set(&spec24(), 10, &mut SeededRng::new(3)).unwrap();
    assert_eq!(items.len(), 10);
    for pair in items.chunks(2) {
        assert_eq!((pair[0].label, pair[1].label), (0, 1));
        let r = pair[1].geometry.ventricle_volume() / pair[0].geometry.ventricle_volume();
        assert!((r - 2.0).abs() < 0.05 * 2.0);
    }
}

#[test]
fn written_cohort_has_manifest_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let (cohort, synth) = generate_cohort(&spec24(), 4, 0.5, &[6, 12], &mut SeededRng::new(1), dir.path()).unwrap();
    assert_eq!(cohort.len(), 8);
    let loaded = tafnet::manifest_load(dir.path().join("manifest.csv")).unwrap();
    assert_eq!(loaded, cohort);
    let truth = std::fs::read_to_string(dir.path().join("truth.csv")).unwrap();
    assert_eq!(truth.lines().count(), 1 + 4 * 3);
    assert_eq!(Volume::read(&cohort.pairs()[0].baseline).unwrap().data(), synth.subjects[0].baseline.data());
}

#[test]
fn training_config_and_weights() {
    let zero = TrainConfig { epochs: 0, ..TrainConfig::default() };
    assert!(matches!(finetune(ModelKind::TafNet, &model_cfg(4), &feature_pairs(6, 4, 1), &zero), Err(TafError::Config(_))));
    assert_eq!(class_weights(&[0, 0, 0, 1], true).unwrap(), (1.0, 3.0));
    assert_eq!(class_weights(&[0, 0, 0, 1], false).unwrap(), (1.0, 1.0));
    assert!(class_weights(&[1, 1], true).is_err());
}

#[test]
fn zeroed_head_gives_ln2_loss() {
    let mut ps = ParamStore::new();
    let head = Head::new(&mut ps, "h.", 4, &HeadConfig { hidden: 3, dropout: 0.0 }, &mut SeededRng::new(0));
    head.zero(&mut ps);
    let mut g = Graph::new(false);
    let x = g.input(Tensor::from_vec(&[2, 4, 1, 1, 1], vec![0.3, -1.0, 2.0, 0.1, 5.0, 4.0, -3.0, 1.0]).unwrap());
    let z = head.logits(&mut g, &ps, x).unwrap();
    let loss = g.bce_with_logits(z, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
    assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn finetune_is_deterministic_and_learns() {
    let data = feature_pairs(24, 4, 2);
    for kind in ModelKind::ALL {
        let a = finetune(kind, &model_cfg(4), &data, &train_cfg(15)).unwrap();
        let b = finetune(kind, &model_cfg(4), &data, &train_cfg(15)).unwrap();
        assert_eq!(a.epoch_losses, b.epoch_losses, "{kind}");
        assert_eq!(a.trained.epochs_trained, 15);
        if kind != ModelKind::InitialOnly {
            assert!(a.epoch_losses[14] < a.epoch_losses[0], "{kind}: {:?}", a.epoch_losses);
        }
    }
}

#[test]
fn trained_model_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = feature_pairs(12, 4, 5);
    let out = finetune(ModelKind::TafNet, &model_cfg(4), &data, &train_cfg(2)).unwrap();
    let path = dir.path().join("m.ckpt");
    out.trained.save(&path).unwrap();
    let back = TrainedModel::load(&path, &model_cfg(4)).unwrap();
    assert_eq!(back.epochs_trained, 2);
    assert_eq!(predict(&back, &data, 5).unwrap(), predict(&out.trained, &data, 3).unwrap());
    assert!(matches!(TrainedModel::load(&dir.path().join("none.ckpt"), &model_cfg(4)), Err(TafError::Io { .. })));
}

#[test]
fn feature_cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = feature_pairs(5, 3, 6);
    data[2].copy = 2;
    let path = dir.path().join("f.ckpt");
    save_features(&path, &data).unwrap();
    assert_eq!(load_features(&path).unwrap(), data);
    data[0].subject_id = "a|b".into();
    assert!(save_features(&path, &data).is_err());
}

#[test]
fn missing_encoder_checkpoint_is_io_error() {
    let r = load_encoder(std::path::Path::new("/nonexistent/encoder.ckpt"), &EncoderConfig::default());
    assert!(matches!(r, Err(TafError::Io { .. })));
}

#[test]
fn stratified_split_partitions_indices() {
    let labels: Vec<u8> = (0..40).map(|i| u8::from(i % 4 == 0)).collect();
    let (train, val) = stratified_split(&labels, 0.25, 9).unwrap();
    let all: BTreeSet<usize> = train.iter().chain(&val).copied().collect();
    assert_eq!(all.len(), 40);
    assert_eq!(train.len() + val.len(), 40);
    assert!(val.iter().any(|&i| labels[i] == 1));
}

#[test]
fn loss_trend_examples() {
    assert!(loss_trend_ok(&[1.0, 0.9, 0.95, 0.8], 10, 1));
    assert!(!loss_trend_ok(&[1.0, 0.9, 0.95, 0.8], 10, 0));
    assert!(!loss_trend_ok(&[1.0, 1.1], 10, 5));
    assert!(loss_trend_ok(&[1.0], 10, 0));
    assert_eq!(loss_csv(&[0.5]), "epoch,loss\n1,0.5000000000\n");
}

#[test]
fn pretraining_separates_noiseless_classes() {
    let spec = PhantomSpec { grid: 32, noise_sigma: 0.0, ..PhantomSpec::default() };
    let items = generate_pretrain_set(&spec, 24, &mut SeededRng::new(2)).unwrap();
    let scaled: Vec<Volume> = items.iter().map(|it| it.volume.with_data(it.volume.data().mapv(|x| x.min(1.0)), tafnet::IntensityTag::Unit).unwrap()).collect();
    let pairs: Vec<(&Volume, u8)> = scaled.iter().zip(&items).map(|(v, it)| (v, it.label)).collect();
    let cfg = EncoderConfig { channels: [4, 4, 8, 8, 8], input_grid: 32, dcca_enabled: true };
    let mut ps = ParamStore::new();
    let enc = Encoder::new(&mut ps, &cfg, &mut SeededRng::new(1)).unwrap();
    let tc = TrainConfig { lr: 3e-3, epochs: 15, batch_size: 6, seed: 1, phase: Phase::Pretrain, stop_at_val_auc: Some(1.0), val_fraction: 0.25, ..TrainConfig::default() };
    let out = pretrain(&enc, &mut ps, &pairs, &tc).unwrap();
    assert_eq!(out.val_auc, 1.0, "{:?}", out.val_aucs);
}

#[test]
fn reduced_attention_mass_equals_query_count() {
    let (h, nq, nk) = (2, 8, 8);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut w = Vec::new();
    for _ in 0..h * nq {
        let row: Vec<f64> = (0..nk).map(|_| r.random_range(0.0..1.0)).collect();
        let s: f64 = row.iter().sum();
        w.extend(row.iter().map(|x| x / s));
    }
    let red = reduce_attention(&w, h, nq, nk).unwrap();
    assert!((red.iter().sum::<f64>() - nq as f64).abs() < 1e-12);
    assert!(reduce_attention(&w[1..], h, nq, nk).is_err());
}

#[test]
fn dominant_key_becomes_the_map_peak() {
    let side = 2;
    let mut received = vec![0.5; 8];
    received[5] = 4.5;
    let m = attention_map_from_received(received, side, 16).unwrap();
    assert!((m.mass() - 8.0).abs() < 1e-12);
    // token 5 = (z 1, y 0, x 1) sits at voxel (8, 0, 8)
    assert_eq!(m.grid[[8, 0, 8]], 1.0);
    assert!(!m.degenerate);
    let flat = attention_map_from_received(vec![1.0; 8], side, 16).unwrap();
    assert!(flat.degenerate && flat.grid.iter().all(|&v| v == 0.0));
}

#[test]
fn pearson_matches_covariance_formula() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..30).map(|_| r.random_range(0.0..1.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| 0.5 * v + r.random_range(0.0..0.3)).collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n - mx * my;
    let sx = (x.iter().map(|a| a * a).sum::<f64>() / n - mx * mx).sqrt();
    let sy = (y.iter().map(|a| a * a).sum::<f64>() / n - my * my).sqrt();
    let (rr, p) = pearson(&x, &y).unwrap();
    assert!((rr - cov / (sx * sy)).abs() < 1e-10);
    assert!(p < 0.01);
    let (r1, p1) = pearson(&x, &x.iter().map(|v| 2.0 * v + 1.0).collect::<Vec<_>>()).unwrap();
    assert!((r1 - 1.0).abs() < 1e-12 && p1 == 0.0);
    assert!(matches!(pearson(&x[..2], &y[..2]), Err(TafError::CorrelationUndefined(_))));
    assert!(matches!(pearson(&x, &vec![1.0; 30]), Err(TafError::CorrelationUndefined(_))));
}

#[test]
fn gate_profiles_skip_augmented_copies() {
    let mut data = feature_pairs(33, 4, 7);
    let copies: Vec<FeaturePair> = data.iter().take(10).map(|p| FeaturePair { copy: 1, ..p.clone() }).collect();
    data.extend(copies);
    let out = finetune(ModelKind::TafNet, &model_cfg(4), &data, &train_cfg(1)).unwrap();
    let profiles = extract_gates(&out.trained, &data, 7).unwrap();
    assert_eq!(profiles.len(), 33);
    for p in &profiles {
        assert!((p.gates.as_array().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let s = summarize_gates(&profiles).unwrap();
    assert_eq!(s.dominance.iter().sum::<usize>(), 33);
    gate_correlation(&profiles).unwrap();

    let untrained = TrainedModel { epochs_trained: 0, ..out.trained.clone() };
    assert!(matches!(extract_gates(&untrained, &data, 4), Err(TafError::State(_))));
    let siamese = finetune(ModelKind::SiameseSubtract, &model_cfg(4), &data, &train_cfg(1)).unwrap();
    assert!(matches!(extract_gates(&siamese.trained, &data, 4), Err(TafError::State(_))));
}

#[test]
fn dominance_ties_resolve_to_earlier_coefficient() {
    assert_eq!(GateCoefficients { alpha: 0.4, beta: 0.4, gamma: 0.2 }.dominant(), 0);
    assert_eq!(GateCoefficients { alpha: 0.2, beta: 0.4, gamma: 0.4 }.dominant(), 1);
    assert_eq!(GateCoefficients { alpha: 0.1, beta: 0.2, gamma: 0.7 }.dominant(), 2);
}
