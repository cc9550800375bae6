//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] records every operation of one forward pass. Values are kept
//! on the tape so that [`Graph::backward`] can walk it in reverse. Parameter
//! leaves remember their [`ParamId`] so gradients can be folded back into a
//! [`ParamStore`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv3d_backward, conv3d_forward, matmul};
use crate::{NnError, ParamId, ParamStore, Result, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Conv3d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, inv_std: Vec<f64>, xhat: Vec<f64> },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    Tanh { x: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Gap { x: Var },
    ChannelScale { x: Var, s: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    RowScale { x: Var, s: Var },
    SliceCols { x: Var, start: usize },
    Concat1 { parts: Vec<Var> },
    SoftmaxRows { x: Var },
    ToTokens { x: Var },
    FromTokens { x: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, batch: usize, weights: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64>, weights: Vec<f64> },
    WeightedSum { x: Var, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Pending running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BufferUpdate {
    pub id: ParamId,
    pub value: Tensor,
}

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
    updates: Vec<BufferUpdate>,
    bn_momentum: Option<f64>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NnError::Shape(msg.into()))
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Self::with_seed(training, 0)
    }

    /// `seed` drives dropout masks; equal seeds give equal masks.
    pub fn with_seed(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            updates: Vec::new(),
            bn_momentum: None,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Overrides every batch-norm layer's running-statistics momentum for
    /// passes on this graph. `Some(1.0)` replaces the running statistics.
    pub fn set_bn_momentum(&mut self, momentum: Option<f64>) {
        self.bn_momentum = momentum;
    }

    pub fn bn_momentum(&self) -> Option<f64> {
        self.bn_momentum
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Buffer updates (batch-norm running statistics) recorded so far.
    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate> {
        std::mem::take(&mut self.updates)
    }

    pub(crate) fn push_update(&mut self, id: ParamId, value: Tensor) {
        self.updates.push(BufferUpdate { id, value });
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, ps: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: ps.get(id).clone(),
            op: Op::Param(id),
            requires_grad: ps.is_trainable(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = conv3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(y, Op::Conv3d { x, w, b, stride, pad }, &parents))
    }

    /// Batch-statistics normalization over every axis except 1.
    /// Returns the output plus the batch mean and biased variance per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xt = self.value(x);
        let (b, c) = (xt.shape()[0], xt.shape()[1]);
        let s: usize = xt.shape()[2..].iter().product();
        let n = (b * s) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                mean[ci] += xt.data()[off..off + s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                var[ci] += xt.data()[off..off + s].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std)?;
        let op = Op::BatchNormTrain { x, gamma, beta, xhat, inv_std };
        Ok((self.push(y, op, &[x, gamma, beta]), mean, var))
    }

    /// Normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = self.bn_apply(x, gamma, beta, mean, &inv_std)?;
        let op = Op::BatchNormEval { x, gamma, beta, inv_std, xhat };
        Ok(self.push(y, op, &[x, gamma, beta]))
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64]) -> Result<(Tensor, Vec<f64>)> {
        let xt = self.value(x);
        if xt.ndim() < 2 {
            return shape_err("batch norm needs a channel axis");
        }
        let (b, c) = (xt.shape()[0], xt.shape()[1]);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c || mean.len() != c {
            return shape_err(format!("batch norm affine params do not match {c} channels"));
        }
        let s: usize = xt.shape()[2..].iter().product();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; xt.numel()];
        let mut y = vec![0.0; xt.numel()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                for i in off..off + s {
                    let h = (xt.data()[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    y[i] = g[ci] * h + be[ci];
                }
            }
        }
        Ok((Tensor::from_vec(xt.shape(), y)?, xhat))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let y = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(y, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::tanh);
        self.push(y, Op::Tanh { x }, &[x])
    }

    /// 2×2×2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.ndim() != 5 {
            return shape_err("max_pool2 expects [B, C, D, H, W]");
        }
        let sh = xt.shape();
        let (d, h, w) = (sh[2], sh[3], sh[4]);
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("max_pool2 needs even spatial dims, got {:?}", &sh[2..]));
        }
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let planes = sh[0] * sh[1];
        let mut y = Vec::with_capacity(planes * od * oh * ow);
        let mut argmax = Vec::with_capacity(planes * od * oh * ow);
        let xd = xt.data();
        for p in 0..planes {
            let base = p * d * h * w;
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = base + ((2 * z + dz) * h + 2 * yy + dy) * w + 2 * xx + dx;
                                    if xd[i] > best {
                                        best = xd[i];
                                        bi = i;
                                    }
                                }
                            }
                        }
                        y.push(best);
                        argmax.push(bi);
                    }
                }
            }
        }
        let y = Tensor::from_vec(&[sh[0], sh[1], od, oh, ow], y)?;
        Ok(self.push(y, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Global average pooling: `[B, C, ...] -> [B, C]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.ndim() < 3 {
            return shape_err("gap expects [B, C, spatial...]");
        }
        let (b, c) = (xt.shape()[0], xt.shape()[1]);
        let s: usize = xt.shape()[2..].iter().product();
        let y: Vec<f64> = xt.data().chunks(s).map(|ch| ch.iter().sum::<f64>() / s as f64).collect();
        let y = Tensor::from_vec(&[b, c], y)?;
        Ok(self.push(y, Op::Gap { x }, &[x]))
    }

    /// `x[B, C, ...] * s[B, C]` broadcast over the trailing axes.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let xt = self.value(x);
        let st = self.value(s);
        if st.shape() != &xt.shape()[..2] {
            return shape_err(format!("channel_scale: {:?} vs {:?}", st.shape(), xt.shape()));
        }
        let n: usize = xt.shape()[2..].iter().product();
        let mut y = xt.clone();
        for (chunk, &sv) in y.data_mut().chunks_mut(n).zip(st.data()) {
            chunk.iter_mut().for_each(|v| *v *= sv);
        }
        Ok(self.push(y, Op::ChannelScale { x, s }, &[x, s]))
    }

    /// `x[N, in] · w[out, in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xt = self.value(x);
        let wt = self.value(w);
        if xt.ndim() != 2 || wt.ndim() != 2 || xt.shape()[1] != wt.shape()[1] {
            return shape_err(format!("linear: input {:?} vs weight {:?}", xt.shape(), wt.shape()));
        }
        let (n, k, m) = (xt.shape()[0], xt.shape()[1], wt.shape()[0]);
        let mut y = matmul(xt.data(), wt.data(), n, k, m, false, true);
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.numel() != m {
                return shape_err(format!("linear bias has {} entries, expected {m}", bt.numel()));
            }
            for row in y.chunks_mut(m) {
                row.iter_mut().zip(bt.data()).for_each(|(v, bv)| *v += bv);
            }
        }
        let y = Tensor::from_vec(&[n, m], y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(y, Op::Linear { x, w, b }, &parents))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let y = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(y, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let y = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(y, Op::Mul { a, b }, &[a, b]))
    }

    /// Scales batch item `i` of `x` by `s[i]`; `s` has one entry per item.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let xt = self.value(x);
        let st = self.value(s);
        if st.numel() != xt.batch() {
            return shape_err(format!("row_scale: {} scales for batch {}", st.numel(), xt.batch()));
        }
        let n = xt.item_len();
        let mut y = xt.clone();
        for (chunk, &sv) in y.data_mut().chunks_mut(n).zip(st.data()) {
            chunk.iter_mut().for_each(|v| *v *= sv);
        }
        Ok(self.push(y, Op::RowScale { x, s }, &[x, s]))
    }

    /// Columns `[start, start + len)` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.ndim() != 2 || start + len > xt.shape()[1] {
            return shape_err(format!("slice_cols {start}+{len} out of range for {:?}", xt.shape()));
        }
        let m = xt.shape()[1];
        let data: Vec<f64> = xt.data().chunks(m).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let y = Tensor::from_vec(&[xt.shape()[0], len], data)?;
        Ok(self.push(y, Op::SliceCols { x, start }, &[x]))
    }

    /// Concatenation along axis 1 of tensors `[B, c_i, rest...]`.
    pub fn concat1(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let b = first.shape()[0];
        let rest = first.shape()[2..].to_vec();
        let inner: usize = rest.iter().product();
        let mut total_c = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape()[0] != b || t.shape()[2..] != rest[..] {
                return shape_err(format!("concat1: {:?} vs {:?}", t.shape(), first.shape()));
            }
            total_c += t.shape()[1];
        }
        let mut data = Vec::with_capacity(b * total_c * inner);
        for bi in 0..b {
            for &p in parts {
                data.extend_from_slice(self.value(p).item(bi));
            }
        }
        let mut shape = vec![b, total_c];
        shape.extend(rest);
        let y = Tensor::from_vec(&shape, data)?;
        Ok(self.push(y, Op::Concat1 { parts: parts.to_vec() }, parts))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.ndim() != 2 {
            return shape_err("softmax_rows expects a 2-d tensor");
        }
        let m = xt.shape()[1];
        let mut data = xt.data().to_vec();
        data.chunks_mut(m).for_each(softmax_in_place);
        let y = Tensor::from_vec(xt.shape(), data)?;
        Ok(self.push(y, Op::SoftmaxRows { x }, &[x]))
    }

    /// `[B, C, spatial...] -> [B·S, C]`, one token per spatial position.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.ndim() < 3 {
            return shape_err("to_tokens expects [B, C, spatial...]");
        }
        let (b, c) = (xt.shape()[0], xt.shape()[1]);
        let s: usize = xt.shape()[2..].iter().product();
        let mut data = vec![0.0; xt.numel()];
        for bi in 0..b {
            for ci in 0..c {
                for si in 0..s {
                    data[(bi * s + si) * c + ci] = xt.data()[(bi * c + ci) * s + si];
                }
            }
        }
        let y = Tensor::from_vec(&[b * s, c], data)?;
        Ok(self.push(y, Op::ToTokens { x }, &[x]))
    }

    /// Inverse of [`Self::to_tokens`]; `shape` is the target `[B, C, spatial...]`.
    pub fn from_tokens(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if xt.shape() != [b * s, c] {
            return shape_err(format!("from_tokens: {:?} cannot become {:?}", xt.shape(), shape));
        }
        let mut data = vec![0.0; xt.numel()];
        for bi in 0..b {
            for ci in 0..c {
                for si in 0..s {
                    data[(bi * c + ci) * s + si] = xt.data()[(bi * s + si) * c + ci];
                }
            }
        }
        let y = Tensor::from_vec(shape, data)?;
        Ok(self.push(y, Op::FromTokens { x }, &[x]))
    }

    /// Multi-head scaled dot-product attention on token matrices.
    ///
    /// `q` is `[B·nq, d]`, `k` and `v` are `[B·nk, d]`. Each head attends on
    /// its own `d / heads` slice. Weights are kept as `[B, H, nq, nk]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        if qt.ndim() != 2 || kt.shape() != vt.shape() || qt.shape()[1] != kt.shape()[1] {
            return shape_err(format!("attention: q {:?} k {:?} v {:?}", qt.shape(), kt.shape(), vt.shape()));
        }
        let d = qt.shape()[1];
        if heads == 0 || d % heads != 0 {
            return Err(NnError::Param(format!("model dim {d} not divisible by {heads} heads")));
        }
        if qt.shape()[0] % batch != 0 || kt.shape()[0] % batch != 0 {
            return shape_err("attention token count not divisible by batch");
        }
        let nq = qt.shape()[0] / batch;
        let nk = kt.shape()[0] / batch;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut weights = vec![0.0; batch * heads * nq * nk];
        let mut out = vec![0.0; batch * nq * d];
        for b in 0..batch {
            for h in 0..heads {
                let wa = &mut weights[((b * heads + h) * nq) * nk..((b * heads + h + 1) * nq) * nk];
                for i in 0..nq {
                    let qi = &qt.data()[(b * nq + i) * d + h * dk..][..dk];
                    let row = &mut wa[i * nk..(i + 1) * nk];
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &kt.data()[(b * nk + j) * d + h * dk..][..dk];
                        *r = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                    }
                    softmax_in_place(row);
                    let o = &mut out[(b * nq + i) * d + h * dk..][..dk];
                    for (j, &a) in row.iter().enumerate() {
                        let vj = &vt.data()[(b * nk + j) * d + h * dk..][..dk];
                        o.iter_mut().zip(vj).for_each(|(ov, vv)| *ov += a * vv);
                    }
                }
            }
        }
        let y = Tensor::from_vec(&[batch * nq, d], out)?;
        Ok(self.push(y, Op::Attention { q, k, v, heads, batch, weights }, &[q, k, v]))
    }

    /// Attention weights `[B, H, nq, nk]` recorded by an [`Self::attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::Param(format!("dropout rate {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n).map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let y = Tensor::from_vec(self.value(x).shape(), data)?;
        Ok(self.push(y, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean weighted binary cross-entropy on logits. `weights[i]` scales sample `i`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.numel() != targets.len() || targets.len() != weights.len() {
            return shape_err(format!("bce: {} logits, {} targets, {} weights", z.numel(), targets.len(), weights.len()));
        }
        let n = targets.len() as f64;
        let loss = z
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&z, &y), &w)| w * (softplus(z) - y * z))
            .sum::<f64>()
            / n;
        let op = Op::BceWithLogits { logits, targets: targets.to_vec(), weights: weights.to_vec() };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// `Σ x ⊙ weights`, a scalar probe loss.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        same_shape(self.value(x), weights, "weighted_sum")?;
        let s = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let op = Op::WeightedSum { x, weights: weights.data().to_vec() };
        Ok(self.push(Tensor::scalar(s), op, &[x]))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return shape_err("backward needs a scalar loss");
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(node, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv3d { x, w, b, stride, pad } => {
                let cg = conv3d_backward(self.value(*x), self.value(*w), gy, *stride, *pad, self.needs(*x))?;
                if let Some(dx) = cg.dx {
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *w, cg.dw);
                if let Some(b) = b {
                    self.acc(grads, *b, cg.db);
                }
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let sh = y.shape();
                let (b, c) = (sh[0], sh[1]);
                let s: usize = sh[2..].iter().product();
                let n = (b * s) as f64;
                let g = self.value(*gamma).data();
                let (sum_dy, sum_dy_xhat) = channel_sums(gy.data(), xhat, b, c, s);
                let mut dx = vec![0.0; y.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * s;
                        let k = g[ci] * inv_std[ci] / n;
                        for i in off..off + s {
                            dx[i] = k * (n * gy.data()[i] - sum_dy[ci] - xhat[i] * sum_dy_xhat[ci]);
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(sh, dx)?);
                self.acc(grads, *gamma, Tensor::from_vec(&[c], sum_dy_xhat)?);
                self.acc(grads, *beta, Tensor::from_vec(&[c], sum_dy)?);
            }
            Op::BatchNormEval { x, gamma, beta, inv_std, xhat } => {
                let sh = y.shape();
                let (b, c) = (sh[0], sh[1]);
                let s: usize = sh[2..].iter().product();
                let g = self.value(*gamma).data();
                let (sum_dy, sum_dy_xhat) = channel_sums(gy.data(), xhat, b, c, s);
                let mut dx = gy.clone();
                for (i, v) in dx.data_mut().iter_mut().enumerate() {
                    let ci = (i / s) % c;
                    *v *= g[ci] * inv_std[ci];
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, Tensor::from_vec(&[c], sum_dy_xhat)?);
                self.acc(grads, *beta, Tensor::from_vec(&[c], sum_dy)?);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let data = gy.data().iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { slope * g }).collect();
                self.acc(grads, *x, Tensor::from_vec(y.shape(), data)?);
            }
            Op::Sigmoid { x } => {
                let data = gy.data().iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.acc(grads, *x, Tensor::from_vec(y.shape(), data)?);
            }
            Op::Tanh { x } => {
                let data = gy.data().iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.acc(grads, *x, Tensor::from_vec(y.shape(), data)?);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (g, &i) in gy.data().iter().zip(argmax) {
                    dx.data_mut()[i] += g;
                }
                self.acc(grads, *x, dx);
            }
            Op::Gap { x } => {
                let xs = self.value(*x).shape();
                let s: usize = xs[2..].iter().product();
                let data = gy.data().iter().flat_map(|&g| std::iter::repeat_n(g / s as f64, s)).collect();
                self.acc(grads, *x, Tensor::from_vec(xs, data)?);
            }
            Op::ChannelScale { x, s } => {
                let xt = self.value(*x);
                let st = self.value(*s);
                let n: usize = xt.shape()[2..].iter().product();
                if self.needs(*x) {
                    let mut dx = gy.clone();
                    for (chunk, &sv) in dx.data_mut().chunks_mut(n).zip(st.data()) {
                        chunk.iter_mut().for_each(|v| *v *= sv);
                    }
                    self.acc(grads, *x, dx);
                }
                if self.needs(*s) {
                    let ds = gy.data().chunks(n).zip(xt.data().chunks(n)).map(|(g, xv)| g.iter().zip(xv).map(|(a, b)| a * b).sum()).collect();
                    self.acc(grads, *s, Tensor::from_vec(st.shape(), ds)?);
                }
            }
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (n, k, m) = (xt.shape()[0], xt.shape()[1], wt.shape()[0]);
                if self.needs(*x) {
                    let dx = matmul(gy.data(), wt.data(), n, m, k, false, false);
                    self.acc(grads, *x, Tensor::from_vec(&[n, k], dx)?);
                }
                if self.needs(*w) {
                    let dw = matmul(gy.data(), xt.data(), m, n, k, true, false);
                    self.acc(grads, *w, Tensor::from_vec(&[m, k], dw)?);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; m];
                    for row in gy.data().chunks(m) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    self.acc(grads, *b, Tensor::from_vec(&[m], db)?);
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.clone());
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let da = gy.data().iter().zip(bt.data()).map(|(g, v)| g * v).collect();
                let db = gy.data().iter().zip(at.data()).map(|(g, v)| g * v).collect();
                self.acc(grads, *a, Tensor::from_vec(y.shape(), da)?);
                self.acc(grads, *b, Tensor::from_vec(y.shape(), db)?);
            }
            Op::RowScale { x, s } => {
                let xt = self.value(*x);
                let st = self.value(*s);
                let n = xt.item_len();
                if self.needs(*x) {
                    let mut dx = gy.clone();
                    for (chunk, &sv) in dx.data_mut().chunks_mut(n).zip(st.data()) {
                        chunk.iter_mut().for_each(|v| *v *= sv);
                    }
                    self.acc(grads, *x, dx);
                }
                if self.needs(*s) {
                    let ds = gy.data().chunks(n).zip(xt.data().chunks(n)).map(|(g, xv)| g.iter().zip(xv).map(|(a, b)| a * b).sum()).collect();
                    self.acc(grads, *s, Tensor::from_vec(st.shape(), ds)?);
                }
            }
            Op::SliceCols { x, start } => {
                let xs = self.value(*x).shape();
                let (m, len) = (xs[1], y.shape()[1]);
                let mut dx = Tensor::zeros(xs);
                for (drow, grow) in dx.data_mut().chunks_mut(m).zip(gy.data().chunks(len)) {
                    drow[*start..start + len].copy_from_slice(grow);
                }
                self.acc(grads, *x, dx);
            }
            Op::Concat1 { parts } => {
                let b = y.shape()[0];
                let item = y.item_len();
                let mut off = 0;
                for &p in parts {
                    let pt = self.value(p);
                    let len = pt.item_len();
                    let mut data = Vec::with_capacity(pt.numel());
                    for bi in 0..b {
                        data.extend_from_slice(&gy.data()[bi * item + off..bi * item + off + len]);
                    }
                    self.acc(grads, p, Tensor::from_vec(pt.shape(), data)?);
                    off += len;
                }
            }
            Op::SoftmaxRows { x } => {
                let m = y.shape()[1];
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(m).zip(gy.data().chunks(m)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(s, g)| s * (g - dot)));
                }
                self.acc(grads, *x, Tensor::from_vec(y.shape(), dx)?);
            }
            Op::ToTokens { x } => {
                let xs = self.value(*x).shape().to_vec();
                let (b, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                let mut dx = vec![0.0; y.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        for si in 0..s {
                            dx[(bi * c + ci) * s + si] = gy.data()[(bi * s + si) * c + ci];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&xs, dx)?);
            }
            Op::FromTokens { x } => {
                let sh = y.shape();
                let (b, c) = (sh[0], sh[1]);
                let s: usize = sh[2..].iter().product();
                let mut dx = vec![0.0; y.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        for si in 0..s {
                            dx[(bi * s + si) * c + ci] = gy.data()[(bi * c + ci) * s + si];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx)?);
            }
            Op::Attention { q, k, v, heads, batch, weights } => {
                let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qt.shape()[1];
                let dk = d / heads;
                let batch = *batch;
                let nq = qt.shape()[0] / batch;
                let nk = kt.shape()[0] / batch;
                let scale = 1.0 / (dk as f64).sqrt();
                let mut dq = vec![0.0; qt.numel()];
                let mut dkm = vec![0.0; kt.numel()];
                let mut dv = vec![0.0; vt.numel()];
                let mut da = vec![0.0; nk];
                for b in 0..batch {
                    for h in 0..*heads {
                        let wa = &weights[((b * heads + h) * nq) * nk..][..nq * nk];
                        for i in 0..nq {
                            let go = &gy.data()[(b * nq + i) * d + h * dk..][..dk];
                            let arow = &wa[i * nk..(i + 1) * nk];
                            for j in 0..nk {
                                let vj = &vt.data()[(b * nk + j) * d + h * dk..][..dk];
                                da[j] = go.iter().zip(vj).map(|(a, c)| a * c).sum();
                                let dvj = &mut dv[(b * nk + j) * d + h * dk..][..dk];
                                dvj.iter_mut().zip(go).for_each(|(o, g)| *o += arow[j] * g);
                            }
                            let dot: f64 = arow.iter().zip(&da).map(|(a, c)| a * c).sum();
                            let qi = &qt.data()[(b * nq + i) * d + h * dk..][..dk];
                            for j in 0..nk {
                                let ds = arow[j] * (da[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kt.data()[(b * nk + j) * d + h * dk..][..dk];
                                let dqi = &mut dq[(b * nq + i) * d + h * dk..][..dk];
                                dqi.iter_mut().zip(kj).for_each(|(o, kv)| *o += ds * kv);
                                let dkj = &mut dkm[(b * nk + j) * d + h * dk..][..dk];
                                dkj.iter_mut().zip(qi).for_each(|(o, qv)| *o += ds * qv);
                            }
                        }
                    }
                }
                self.acc(grads, *q, Tensor::from_vec(qt.shape(), dq)?);
                self.acc(grads, *k, Tensor::from_vec(kt.shape(), dkm)?);
                self.acc(grads, *v, Tensor::from_vec(vt.shape(), dv)?);
            }
            Op::Dropout { x, mask } => {
                let data = gy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                self.acc(grads, *x, Tensor::from_vec(y.shape(), data)?);
            }
            Op::BceWithLogits { logits, targets, weights } => {
                let z = self.value(*logits);
                let n = targets.len() as f64;
                let g0 = gy.data()[0];
                let data = z
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&z, &t), &w)| g0 * w * (sigmoid(z) - t) / n)
                    .collect();
                self.acc(grads, *logits, Tensor::from_vec(z.shape(), data)?);
            }
            Op::WeightedSum { x, weights } => {
                let g0 = gy.data()[0];
                let data = weights.iter().map(|w| w * g0).collect();
                self.acc(grads, *x, Tensor::from_vec(self.value(*x).shape(), data)?);
            }
        }
        Ok(())
    }

    /// Adds gradients of every trainable parameter leaf into `ps`.
    pub fn accumulate_param_grads(&self, grads: &Grads, ps: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                ps.accumulate_grad(*id, g);
            }
        }
    }

    /// Parameter ids that received a gradient in `grads`.
    pub fn params_with_grad(&self, grads: &Grads) -> Vec<ParamId> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match (&n.op, &grads.grads[i]) {
                (Op::Param(id), Some(_)) => Some(*id),
                _ => None,
            })
            .collect()
    }
}

fn channel_sums(gy: &[f64], xhat: &[f64], b: usize, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * s;
            for i in off..off + s {
                sum_dy[ci] += gy[i];
                sum_dy_xhat[ci] += gy[i] * xhat[i];
            }
        }
    }
    (sum_dy, sum_dy_xhat)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
