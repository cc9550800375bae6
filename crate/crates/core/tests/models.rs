use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tafnet::baselines::{ModelConfig, ModelKind, PairModel};
use tafnet::encoder::{volumes_to_tensor, Encoder, EncoderConfig};
use tafnet::fusion::{FusionConfig, GateMode, Head, HeadConfig, TafNet, Tfm, HEAD_PREFIX};
use tafnet::{SeededRng, Volume};
use tafnet_nn::{Graph, ParamStore, Tensor};

fn features(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small_encoder(ps: &mut ParamStore, grid: usize) -> Encoder {
    let cfg = EncoderConfig { channels: [2, 3, 4, 4, 6], input_grid: grid, dcca_enabled: true };
    Encoder::new(ps, &cfg, &mut SeededRng::new(5)).unwrap()
}

fn volume(seed: u64, grid: usize) -> Volume {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Volume::raw(ndarray::Array3::from_shape_fn((grid, grid, grid), |_| r.random_range(0.0f32..1.0))).unwrap()
}

#[test]
fn encoder_bottleneck_shapes() {
    for grid in [16, 32] {
        let mut ps = ParamStore::new();
        let enc = small_encoder(&mut ps, grid);
        let vols = [volume(1, grid), volume(2, grid)];
        let refs: Vec<&Volume> = vols.iter().collect();
        let mut g = Graph::new(false);
        let x = g.input(volumes_to_tensor(&refs, grid).unwrap());
        let out = enc.forward(&mut g, &ps, x).unwrap();
        let s = grid / 16;
        assert_eq!(g.value(out.bottleneck).shape(), &[2, 6, s, s, s]);
        assert_eq!(out.skips.len(), 5);
        assert_eq!(g.value(out.skips[0]).shape(), &[2, 2, grid, grid, grid]);
    }
    let mut ps = ParamStore::new();
    let enc = small_encoder(&mut ps, 16);
    let mut g = Graph::new(false);
    let x = g.input(Tensor::zeros(&[1, 1, 16, 16, 8]));
    assert!(enc.forward(&mut g, &ps, x).is_err());
    assert!(EncoderConfig { input_grid: 24, ..EncoderConfig::default() }.validate().is_err());
}

#[test]
fn dcca_weights_lie_strictly_inside_unit_interval() {
    let mut ps = ParamStore::new();
    let enc = small_encoder(&mut ps, 16);
    let mut g = Graph::new(false);
    let h = g.input(features(3, &[2, 3, 4, 4, 4]));
    let w = enc.dcca(1).unwrap().weights(&mut g, &ps, h).unwrap();
    assert_eq!(g.value(w).shape(), &[2, 3]);
    assert!(g.value(w).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn eval_mode_encoding_is_independent_of_batch_composition() {
    let mut ps = ParamStore::new();
    let enc = small_encoder(&mut ps, 16);
    let vols = [volume(1, 16), volume(2, 16), volume(3, 16)];
    let refs: Vec<&Volume> = vols.iter().collect();
    let together = enc.encode_volumes(&ps, &refs, 3).unwrap();
    let alone = enc.encode_volumes(&ps, &refs[1..2], 1).unwrap();
    assert!(together[1].max_abs_diff(&alone[0]) < 1e-12);
}

#[test]
fn fusion_parameter_counts() {
    let mut ps = ParamStore::new();
    let tfm = Tfm::new(&mut ps, &FusionConfig { d_model: 128, heads: 4 }, &mut SeededRng::new(0)).unwrap();
    let d = 128;
    assert_eq!(tfm.gate_param_count(), 2 * d * 64 + 64 + 64 * 3 + 3);
    assert_eq!(tfm.gate_param_count(), 16_643);
    assert_eq!(tfm.param_count(), 4 * (d * d + d) + 2 * d * d + d + 16_643);
    assert_eq!(tfm.param_count(), 115_587);
    assert_eq!(ps.count("tfm."), 115_587);
    let head = Head::new(&mut ps, HEAD_PREFIX, d, &HeadConfig::default(), &mut SeededRng::new(0));
    assert_eq!(head.param_count(), 8_321);
    assert_eq!(ps.count(HEAD_PREFIX), 8_321);
}

#[test]
fn concat_branch_matches_per_voxel_matmul() {
    let (d, b, s) = (4, 2, 2);
    let mut ps = ParamStore::new();
    let tfm = Tfm::new(&mut ps, &FusionConfig { d_model: d, heads: 2 }, &mut SeededRng::new(9)).unwrap();
    let (fa, fb) = (features(1, &[b, d, s, s, s]), features(2, &[b, d, s, s, s]));
    let mut g = Graph::new(false);
    let (va, vb) = (g.input(fa.clone()), g.input(fb.clone()));
    let out = tfm.branch_concat(&mut g, &ps, va, vb).unwrap();
    let w = ps.get(tfm.concat_proj.weight).data();
    let bias = ps.get(tfm.concat_proj.bias).data();
    let n = s * s * s;
    for bi in 0..b {
        for o in 0..d {
            for v in 0..n {
                let mut acc = bias[o];
                for c in 0..d {
                    acc += w[o * 2 * d + c] * fa.data()[(bi * d + c) * n + v];
                    acc += w[o * 2 * d + d + c] * fb.data()[(bi * d + c) * n + v];
                }
                let got = g.value(out).data()[(bi * d + o) * n + v];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fused_output_recomposes_from_branches() {
    let (d, b, s) = (8, 3, 2);
    let mut ps = ParamStore::new();
    let tfm = Tfm::new(&mut ps, &FusionConfig { d_model: d, heads: 2 }, &mut SeededRng::new(4)).unwrap();
    let (fa, fb) = (features(5, &[b, d, s, s, s]), features(6, &[b, d, s, s, s]));
    let mut g = Graph::new(false);
    let (va, vb) = (g.input(fa.clone()), g.input(fb));
    let v = tfm.forward(&mut g, &ps, va, vb, GateMode::Learned).unwrap();
    let gates = g.value(v.gates).data().to_vec();
    let per = d * s * s * s;
    for bi in 0..b {
        let w = &gates[3 * bi..3 * bi + 3];
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in bi * per..(bi + 1) * per {
            let expect = fa.data()[i] + w[0] * g.value(v.delta).data()[i] + w[1] * g.value(v.attended).data()[i] + w[2] * g.value(v.concat).data()[i];
            assert!((g.value(v.fused).data()[i] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn baselines_produce_one_logit_per_pair() {
    let cfg = ModelConfig { fusion: FusionConfig { d_model: 8, heads: 2 }, head: HeadConfig { hidden: 4, dropout: 0.3 }, lstm_hidden: 5 };
    for kind in ModelKind::ALL {
        let mut ps = ParamStore::new();
        let m = PairModel::new(kind, &mut ps, &cfg, &mut SeededRng::new(1)).unwrap();
        let mut g = Graph::new(false);
        let (a, b) = (g.input(features(1, &[3, 8, 2, 2, 2])), g.input(features(2, &[3, 8, 2, 2, 2])));
        let z = m.logits(&mut g, &ps, a, b).unwrap();
        assert_eq!(g.value(z).shape(), &[3, 1], "{kind}");
        assert_eq!(m.trainable_count(&ps), ps.count(""), "{kind}");
        assert_eq!(kind.name().parse::<ModelKind>().unwrap(), kind);
    }
}

fn logits(kind: ModelKind, a: &Tensor, b: &Tensor) -> Vec<f64> {
    let cfg = ModelConfig { fusion: FusionConfig { d_model: 4, heads: 2 }, head: HeadConfig { hidden: 4, dropout: 0.0 }, lstm_hidden: 3 };
    let mut ps = ParamStore::new();
    let m = PairModel::new(kind, &mut ps, &cfg, &mut SeededRng::new(2)).unwrap();
    let mut g = Graph::new(false);
    let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
    let z = m.logits(&mut g, &ps, va, vb).unwrap();
    g.value(z).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn initial_only_ignores_followup(s1 in any::<u64>(), s2 in any::<u64>(), s3 in any::<u64>()) {
        let a = features(s1, &[2, 4, 2, 2, 2]);
        prop_assert_eq!(logits(ModelKind::InitialOnly, &a, &features(s2, &[2, 4, 2, 2, 2])), logits(ModelKind::InitialOnly, &a, &features(s3, &[2, 4, 2, 2, 2])));
    }

    #[test]
    fn siamese_is_invariant_to_a_shared_shift(s1 in any::<u64>(), s2 in any::<u64>(), shift in -3.0f64..3.0) {
        let a = features(s1, &[2, 4, 2, 2, 2]);
        let b = features(s2, &[2, 4, 2, 2, 2]);
        let base = logits(ModelKind::SiameseSubtract, &a, &b);
        let moved = logits(ModelKind::SiameseSubtract, &a.map(|x| x + shift), &b.map(|x| x + shift));
        for (x, y) in base.iter().zip(&moved) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn equal_inputs_zero_the_difference_branch(s in any::<u64>()) {
        let mut ps = ParamStore::new();
        let net = TafNet::new(&mut ps, &FusionConfig { d_model: 4, heads: 2 }, &HeadConfig { hidden: 4, dropout: 0.0 }, &mut SeededRng::new(3)).unwrap();
        let a = features(s, &[1, 4, 2, 2, 2]);
        let mut g = Graph::new(false);
        let (va, vb) = (g.input(a.clone()), g.input(a));
        let out = net.forward(&mut g, &ps, va, vb, GateMode::Forced([1.0, 0.0, 0.0])).unwrap();
        prop_assert!(g.value(out.tfm.delta).data().iter().all(|&x| x == 0.0));
    }
}
