//! Parameterised layers. Each layer only stores [`ParamId`]s; values live in
//! a [`ParamStore`] so that one store can be checkpointed as a whole.

use rand::Rng;

use crate::{Graph, NnError, ParamId, ParamStore, Result, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Fan-in scaled uniform initialisation, `U(-1/√fan_in, 1/√fan_in)`.
fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).unwrap()
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = cin * k * k * k;
        let weight = ps.add(&format!("{name}.weight"), uniform(&[cout, cin, k, k, k], fan_in, rng));
        let bias = ps.add(&format!("{name}.bias"), uniform(&[cout], fan_in, rng));
        Self { weight, bias, stride: 1, pad }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.conv3d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: ps.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: ps.add(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: ps.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: ps.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Training mode normalises with batch statistics and records a
    /// running-statistics update on the graph; eval mode uses the stored ones.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        if g.is_training() {
            let (y, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps)?;
            let xs = g.value(x).shape();
            let n = (xs[0] * xs[2..].iter().product::<usize>()) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = g.bn_momentum().unwrap_or(self.momentum);
            let rm = ps.get(self.running_mean).data();
            let rv = ps.get(self.running_var).data();
            let new_mean: Vec<f64> = rm.iter().zip(&mean).map(|(r, b)| (1.0 - m) * r + m * b).collect();
            let new_var: Vec<f64> = rv.iter().zip(&var).map(|(r, b)| (1.0 - m) * r + m * b * unbiased).collect();
            let c = new_mean.len();
            g.push_update(self.running_mean, Tensor::from_vec(&[c], new_mean)?);
            g.push_update(self.running_var, Tensor::from_vec(&[c], new_var)?);
            Ok(y)
        } else {
            let mean = ps.get(self.running_mean).data().to_vec();
            let var = ps.get(self.running_var).data().to_vec();
            g.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let weight = ps.add(&format!("{name}.weight"), uniform(&[output, input], input, rng));
        let bias = Some(ps.add(&format!("{name}.bias"), uniform(&[output], input, rng)));
        Self { weight, bias, input, output }
    }

    pub fn without_bias(ps: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let weight = ps.add(&format!("{name}.weight"), uniform(&[output, input], input, rng));
        Self { weight, bias: None, input, output }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.input * self.output + if self.bias.is_some() { self.output } else { 0 }
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, ps: &mut ParamStore) {
        ps.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            ps.get_mut(b).data_mut().fill(0.0);
        }
    }
}

/// Multi-head attention with biased Q/K/V/O projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_model: usize,
}

/// Output tokens plus the per-head attention weights `[B, H, nq, nk]`.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<f64>,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(NnError::Param(format!("d_model {d_model} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), d_model, d_model, rng),
            k: Linear::new(ps, &format!("{name}.k"), d_model, d_model, rng),
            v: Linear::new(ps, &format!("{name}.v"), d_model, d_model, rng),
            o: Linear::new(ps, &format!("{name}.o"), d_model, d_model, rng),
            heads,
            d_model,
        })
    }

    /// `queries` is `[B·nq, d]`, `keys_values` is `[B·nk, d]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, queries: Var, keys_values: Var, batch: usize) -> Result<AttentionOutput> {
        let q = self.q.forward(g, ps, queries)?;
        let k = self.k.forward(g, ps, keys_values)?;
        let v = self.v.forward(g, ps, keys_values)?;
        let att = g.attention(q, k, v, batch, self.heads)?;
        let weights = g.attention_weights(att).expect("attention node").to_vec();
        let out = self.o.forward(g, ps, att)?;
        Ok(AttentionOutput { out, weights })
    }

    pub fn num_params(&self) -> usize {
        self.q.num_params() + self.k.num_params() + self.v.num_params() + self.o.num_params()
    }
}

/// Single-direction LSTM cell with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_proj: Linear,
    pub hidden_proj: Linear,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            input_proj: Linear::new(ps, &format!("{name}.ih"), input, 4 * hidden, rng),
            hidden_proj: Linear::without_bias(ps, &format!("{name}.hh"), hidden, 4 * hidden, rng),
            hidden,
        }
    }

    /// One step; returns `(h, c)`.
    pub fn step(&self, g: &mut Graph, ps: &ParamStore, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let a = self.input_proj.forward(g, ps, x)?;
        let b = self.hidden_proj.forward(g, ps, h)?;
        let z = g.add(a, b)?;
        let n = self.hidden;
        let i = g.slice_cols(z, 0, n)?;
        let f = g.slice_cols(z, n, n)?;
        let gg = g.slice_cols(z, 2 * n, n)?;
        let o = g.slice_cols(z, 3 * n, n)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let gg = g.tanh(gg);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c)?;
        let ig = g.mul(i, gg)?;
        let c_new = g.add(fc, ig)?;
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    /// Runs the cell over `seq` (each `[B, input]`) from zero state and
    /// returns the final hidden state.
    pub fn run(&self, g: &mut Graph, ps: &ParamStore, seq: &[Var]) -> Result<Var> {
        let batch = g.value(seq[0]).shape()[0];
        let mut h = g.input(Tensor::zeros(&[batch, self.hidden]));
        let mut c = g.input(Tensor::zeros(&[batch, self.hidden]));
        for &x in seq {
            (h, c) = self.step(g, ps, x, h, c)?;
        }
        Ok(h)
    }

    pub fn num_params(&self) -> usize {
        self.input_proj.num_params() + self.hidden_proj.num_params()
    }
}

/// Bidirectional LSTM returning `[h_forward_last ; h_backward_last]`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            forward: LstmCell::new(ps, &format!("{name}.fwd"), input, hidden, rng),
            backward: LstmCell::new(ps, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    pub fn run(&self, g: &mut Graph, ps: &ParamStore, seq: &[Var]) -> Result<Var> {
        let hf = self.forward.run(g, ps, seq)?;
        let rev: Vec<Var> = seq.iter().rev().copied().collect();
        let hb = self.backward.run(g, ps, &rev)?;
        g.concat1(&[hf, hb])
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    pub fn num_params(&self) -> usize {
        self.forward.num_params() + self.backward.num_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn batchnorm_training_output_is_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::new();
        let bn = BatchNorm::new(&mut ps, "bn", 3);
        let mut g = Graph::new(true);
        let mut x = random(&[4, 3, 2, 2, 2], &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v = 5.0 + 3.0 * *v);
        let xv = g.input(x);
        let y = bn.forward(&mut g, &ps, xv).unwrap();
        let yt = g.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| yt.data()[(b * 3 + c) * 8..(b * 3 + c + 1) * 8].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert_eq!(g.take_buffer_updates().len(), 2);
    }

    #[test]
    fn momentum_override_replaces_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::new();
        let bn = BatchNorm::new(&mut ps, "bn", 2);
        let x = random(&[3, 2, 2, 2, 2], &mut rng);
        let mut g = Graph::new(true);
        g.set_bn_momentum(Some(1.0));
        let xv = g.input(x.clone());
        bn.forward(&mut g, &ps, xv).unwrap();
        crate::apply_buffer_updates(&mut ps, g.take_buffer_updates()).unwrap();
        let vals: Vec<f64> = (0..3).flat_map(|b| x.data()[b * 16..b * 16 + 8].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / 24.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 23.0;
        assert!((ps.get(bn.running_mean).data()[0] - mean).abs() < 1e-12);
        assert!((ps.get(bn.running_var).data()[0] - var).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_zero_variance_channel_gives_zero() {
        let mut ps = ParamStore::new();
        let bn = BatchNorm::new(&mut ps, "bn", 1);
        let mut g = Graph::new(true);
        let xv = g.input(Tensor::full(&[2, 1, 2, 2, 2], 7.0));
        let y = bn.forward(&mut g, &ps, xv).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut ps = ParamStore::new();
        let bn = BatchNorm::new(&mut ps, "bn", 2);
        ps.set(bn.running_mean, Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        ps.set(bn.running_var, Tensor::from_vec(&[2], vec![4.0, 0.25]).unwrap()).unwrap();
        ps.set(bn.gamma, Tensor::from_vec(&[2], vec![2.0, 0.5]).unwrap()).unwrap();
        ps.set(bn.beta, Tensor::from_vec(&[2], vec![0.1, -0.1]).unwrap()).unwrap();
        let mut g = Graph::new(false);
        let x = Tensor::from_vec(&[1, 2, 1, 1, 2], vec![3.0, 0.0, -1.0, -2.5]).unwrap();
        let xv = g.input(x.clone());
        let y = bn.forward(&mut g, &ps, xv).unwrap();
        let expect = |v: f64, m: f64, var: f64, ga: f64, be: f64| ga * (v - m) / (var + BN_EPS).sqrt() + be;
        let want = [
            expect(3.0, 1.0, 4.0, 2.0, 0.1),
            expect(0.0, 1.0, 4.0, 2.0, 0.1),
            expect(-1.0, -2.0, 0.25, 0.5, -0.1),
            expect(-2.5, -2.0, 0.25, 0.5, -0.1),
        ];
        for (a, b) in g.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(g.take_buffer_updates().is_empty());
    }

    #[test]
    fn attention_single_token_passes_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut ps, "att", 8, 2, &mut rng).unwrap();
        let mut g = Graph::new(false);
        let q = g.input(random(&[1, 8], &mut rng));
        let kv_t = random(&[1, 8], &mut rng);
        let kv = g.input(kv_t.clone());
        let out = mha.forward(&mut g, &ps, q, kv, 1).unwrap();
        assert!(out.weights.iter().all(|&w| w == 1.0));
        let mut g2 = Graph::new(false);
        let kv2 = g2.input(kv_t);
        let v = mha.v.forward(&mut g2, &ps, kv2).unwrap();
        let o = mha.o.forward(&mut g2, &ps, v).unwrap();
        assert!(g.value(out.out).max_abs_diff(g2.value(o)) < 1e-12);
    }

    #[test]
    fn attention_uniform_when_logits_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut ps, "att", 4, 1, &mut rng).unwrap();
        // zero query projection makes every logit 0
        mha.q.zero(&mut ps);
        let mut g = Graph::new(false);
        let q = g.input(random(&[3, 4], &mut rng));
        let kv = g.input(random(&[3, 4], &mut rng));
        let out = mha.forward(&mut g, &ps, q, kv, 1).unwrap();
        assert!(out.weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-12));
        let rows = g.value(out.out).data().chunks(4).collect::<Vec<_>>();
        for r in &rows[1..] {
            for (a, b) in r.iter().zip(rows[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new();
        assert!(matches!(MultiHeadAttention::new(&mut ps, "a", 10, 4, &mut rng), Err(NnError::Param(_))));
    }

    #[test]
    fn lstm_matches_hand_unrolled_two_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut ps = ParamStore::new();
        let cell = LstmCell::new(&mut ps, "lstm", 3, 2, &mut rng);
        let x1 = random(&[1, 3], &mut rng);
        let x2 = random(&[1, 3], &mut rng);
        let mut g = Graph::new(false);
        let v1 = g.input(x1.clone());
        let v2 = g.input(x2.clone());
        let h = cell.run(&mut g, &ps, &[v1, v2]).unwrap();

        let wi = ps.get(cell.input_proj.weight).data().to_vec();
        let bi = ps.get(cell.input_proj.bias.unwrap()).data().to_vec();
        let wh = ps.get(cell.hidden_proj.weight).data().to_vec();
        let step = |x: &[f64], h: &[f64], c: &[f64]| {
            let z: Vec<f64> = (0..8)
                .map(|r| bi[r] + (0..3).map(|j| wi[r * 3 + j] * x[j]).sum::<f64>() + (0..2).map(|j| wh[r * 2 + j] * h[j]).sum::<f64>())
                .collect();
            let mut hn = vec![0.0; 2];
            let mut cn = vec![0.0; 2];
            for u in 0..2 {
                let i = sigmoid(z[u]);
                let f = sigmoid(z[2 + u]);
                let gg = z[4 + u].tanh();
                let o = sigmoid(z[6 + u]);
                cn[u] = f * c[u] + i * gg;
                hn[u] = o * cn[u].tanh();
            }
            (hn, cn)
        };
        let (h1, c1) = step(x1.data(), &[0.0, 0.0], &[0.0, 0.0]);
        let (h2, _) = step(x2.data(), &h1, &c1);
        for (a, b) in g.value(h).data().iter().zip(&h2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[4, 16], &mut rng);
        let mut g = Graph::new(false);
        let xv = g.input(x.clone());
        let y = g.dropout(xv, 0.3).unwrap();
        assert_eq!(g.value(y), &x);
        let run = |seed| {
            let mut g = Graph::with_seed(true, seed);
            let xv = g.input(x.clone());
            let y = g.dropout(xv, 0.3).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), x);
    }
}
