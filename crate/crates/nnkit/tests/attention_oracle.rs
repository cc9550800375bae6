//! Multi-head attention against a straight-line dense evaluation of
//! `softmax(QKᵀ/√d_k)V` per head followed by the output projection.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tafnet_nn::{Graph, MultiHeadAttention, ParamStore, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn project(x: &[f64], w: &[f64], b: &[f64], n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..d).map(|o| b[o] + (0..d).map(|j| w[o * d + j] * x[i * d + j]).sum::<f64>()).collect())
        .collect()
}

#[test]
fn eight_tokens_four_heads_d128() {
    let (n, d, heads) = (8, 128, 4);
    let dk = d / heads;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut ps = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut ps, "att", d, heads, &mut rng).unwrap();
    let xq = random(&[n, d], &mut rng);
    let xkv = random(&[n, d], &mut rng);

    let mut g = Graph::new(false);
    let q = g.input(xq.clone());
    let kv = g.input(xkv.clone());
    let out = mha.forward(&mut g, &ps, q, kv, 1).unwrap();

    let p = |l: &tafnet_nn::Linear| (ps.get(l.weight).data().to_vec(), ps.get(l.bias.unwrap()).data().to_vec());
    let (wq, bq) = p(&mha.q);
    let (wk, bk) = p(&mha.k);
    let (wv, bv) = p(&mha.v);
    let (wo, bo) = p(&mha.o);
    let qm = project(xq.data(), &wq, &bq, n, d);
    let km = project(xkv.data(), &wk, &bk, n, d);
    let vm = project(xkv.data(), &wv, &bv, n, d);
    let mut concat = vec![vec![0.0; d]; n];
    for h in 0..heads {
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..dk).map(|c| qm[i][h * dk + c] * km[j][h * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..dk {
                concat[i][h * dk + c] = (0..n).map(|j| e[j] / s * vm[j][h * dk + c]).sum();
            }
            for j in 0..n {
                let w = out.weights[(h * n + i) * n + j];
                assert!((w - e[j] / s).abs() < 1e-12);
            }
        }
    }
    let flat: Vec<f64> = concat.concat();
    let expected = project(&flat, &wo, &bo, n, d).concat();
    let got = g.value(out.out).data();
    let diff = got.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-6, "max abs diff {diff}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new(false);
        let x = g.input(Tensor::from_vec(&[3, 4], values).unwrap());
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..1000, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new(false);
        let q = g.input(random(&[2 * n, 8], &mut rng));
        let k = g.input(random(&[2 * n, 8], &mut rng));
        let v = g.input(random(&[2 * n, 8], &mut rng));
        let a = g.attention(q, k, v, 2, 4).unwrap();
        for row in g.attention_weights(a).unwrap().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn max_pool_halves_each_dim(d in 1usize..4, h in 1usize..4, w in 1usize..4) {
        let mut g = Graph::new(false);
        let x = g.input(Tensor::full(&[1, 2, 2 * d, 2 * h, 2 * w], 1.0));
        let y = g.max_pool2(x).unwrap();
        prop_assert_eq!(g.value(y).shape(), &[1, 2, d, h, w]);
    }
}

#[test]
fn max_pool_rejects_odd_dims() {
    let mut g = Graph::new(false);
    let x = g.input(Tensor::zeros(&[1, 1, 3, 2, 2]));
    assert!(g.max_pool2(x).is_err());
}
