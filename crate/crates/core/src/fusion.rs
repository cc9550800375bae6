//! Temporal fusion of baseline and follow-up feature maps: difference,
//! cross-attention and concatenation branches mixed by a softmax gate, plus
//! the classification head.

use rand::Rng;
use tafnet_nn::{Conv3d, Graph, Linear, MultiHeadAttention, ParamStore, Tensor, Var};

use crate::error::{Result, TafError};

pub const TFM_PREFIX: &str = "tfm.";
pub const HEAD_PREFIX: &str = "head.";
pub const GATE_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub d_model: usize,
    pub heads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { d_model: 128, heads: 4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 64, dropout: 0.3 }
    }
}

/// Per-sample branch weights on the probability simplex.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl GateCoefficients {
    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    /// Index of the largest coefficient; ties resolve as α, then β, then γ.
    pub fn dominant(&self) -> usize {
        let a = self.as_array();
        let mut best = 0;
        for i in 1..3 {
            if a[i] > a[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateMode {
    Learned,
    /// Fixed `(α, β, γ)` for every sample; the gate network is bypassed.
    Forced([f64; 3]),
}

pub struct TfmVars {
    pub fused: Var,
    pub delta: Var,
    pub attended: Var,
    pub concat: Var,
    /// `[B, 3]` gate coefficients.
    pub gates: Var,
    /// `[B, H, n, n]` attention weights, queries from the baseline.
    pub attention: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Tfm {
    pub cfg: FusionConfig,
    pub attn: MultiHeadAttention,
    pub concat_proj: Conv3d,
    pub gate_fc1: Linear,
    pub gate_fc2: Linear,
}

fn check_pair(g: &Graph, a: Var, b: Var, d_model: usize) -> Result<()> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(TafError::Shape(format!("feature maps differ: {sa:?} vs {sb:?}")));
    }
    if sa.len() < 3 || sa[1] != d_model {
        return Err(TafError::Shape(format!("expected [B, {d_model}, spatial...], got {sa:?}")));
    }
    Ok(())
}

impl Tfm {
    pub fn new(ps: &mut ParamStore, cfg: &FusionConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            cfg: cfg.clone(),
            attn: MultiHeadAttention::new(ps, "tfm.attn", d, cfg.heads, rng)?,
            concat_proj: Conv3d::new(ps, "tfm.concat", 2 * d, d, 1, 0, rng),
            gate_fc1: Linear::new(ps, "tfm.gate.fc1", 2 * d, GATE_HIDDEN, rng),
            gate_fc2: Linear::new(ps, "tfm.gate.fc2", GATE_HIDDEN, 3, rng),
        })
    }

    /// `f_m12 − f_bl`.
    pub fn branch_diff(&self, g: &mut Graph, f_bl: Var, f_m12: Var) -> Result<Var> {
        check_pair(g, f_bl, f_m12, self.cfg.d_model)?;
        Ok(g.sub(f_m12, f_bl)?)
    }

    /// Cross-attention with baseline tokens as queries and follow-up tokens
    /// as keys and values, reshaped back to a feature map.
    pub fn branch_attention(&self, g: &mut Graph, ps: &ParamStore, f_bl: Var, f_m12: Var) -> Result<(Var, Vec<f64>)> {
        check_pair(g, f_bl, f_m12, self.cfg.d_model)?;
        let shape = g.value(f_bl).shape().to_vec();
        let q = g.to_tokens(f_bl)?;
        let kv = g.to_tokens(f_m12)?;
        let out = self.attn.forward(g, ps, q, kv, shape[0])?;
        Ok((g.from_tokens(out.out, &shape)?, out.weights))
    }

    /// Channel concatenation followed by a 1³ convolution back to `d_model`.
    pub fn branch_concat(&self, g: &mut Graph, ps: &ParamStore, f_bl: Var, f_m12: Var) -> Result<Var> {
        check_pair(g, f_bl, f_m12, self.cfg.d_model)?;
        let cat = g.concat1(&[f_bl, f_m12])?;
        Ok(self.concat_proj.forward(g, ps, cat)?)
    }

    /// Gate logits → softmax, `[B, 3]`.
    pub fn atg(&self, g: &mut Graph, ps: &ParamStore, f_bl: Var, f_m12: Var) -> Result<Var> {
        check_pair(g, f_bl, f_m12, self.cfg.d_model)?;
        let a = g.gap(f_bl)?;
        let b = g.gap(f_m12)?;
        let cat = g.concat1(&[a, b])?;
        let h = self.gate_fc1.forward(g, ps, cat)?;
        let h = g.relu(h);
        let logits = self.gate_fc2.forward(g, ps, h)?;
        Ok(g.softmax_rows(logits)?)
    }

    /// `α·Δf + β·Att + γ·f_cat + f_bl`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, f_bl: Var, f_m12: Var, mode: GateMode) -> Result<TfmVars> {
        let delta = self.branch_diff(g, f_bl, f_m12)?;
        let (attended, attention) = self.branch_attention(g, ps, f_bl, f_m12)?;
        let concat = self.branch_concat(g, ps, f_bl, f_m12)?;
        let gates = match mode {
            GateMode::Learned => self.atg(g, ps, f_bl, f_m12)?,
            GateMode::Forced(w) => {
                let b = g.value(f_bl).shape()[0];
                let data = (0..b).flat_map(|_| w).collect();
                g.input(Tensor::from_vec(&[b, 3], data)?)
            }
        };
        let mut fused = f_bl;
        for (i, branch) in [delta, attended, concat].into_iter().enumerate() {
            let w = g.slice_cols(gates, i, 1)?;
            let term = g.row_scale(branch, w)?;
            fused = g.add(fused, term)?;
        }
        Ok(TfmVars { fused, delta, attended, concat, gates, attention })
    }

    pub fn gate_param_count(&self) -> usize {
        self.gate_fc1.num_params() + self.gate_fc2.num_params()
    }

    pub fn param_count(&self) -> usize {
        let d = self.cfg.d_model;
        self.attn.num_params() + 2 * d * d + d + self.gate_param_count()
    }
}

/// `GAP → dropout → affine → ReLU → dropout → affine`, returning logits `[B, 1]`.
#[derive(Clone, Debug)]
pub struct Head {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl Head {
    pub fn new(ps: &mut ParamStore, prefix: &str, input: usize, cfg: &HeadConfig, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{prefix}fc1"), input, cfg.hidden, rng),
            fc2: Linear::new(ps, &format!("{prefix}fc2"), cfg.hidden, 1, rng),
            dropout: cfg.dropout,
        }
    }

    pub fn logits(&self, g: &mut Graph, ps: &ParamStore, f: Var) -> Result<Var> {
        let pooled = g.gap(f)?;
        let x = g.dropout(pooled, self.dropout)?;
        let x = self.fc1.forward(g, ps, x)?;
        let x = g.relu(x);
        let x = g.dropout(x, self.dropout)?;
        Ok(self.fc2.forward(g, ps, x)?)
    }

    pub fn zero(&self, ps: &mut ParamStore) {
        self.fc1.zero(ps);
        self.fc2.zero(ps);
    }

    pub fn param_count(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }
}

/// Fusion module plus head.
#[derive(Clone, Debug)]
pub struct TafNet {
    pub tfm: Tfm,
    pub head: Head,
}

pub struct TafNetOutput {
    pub logits: Var,
    pub tfm: TfmVars,
}

impl TafNet {
    pub fn new(ps: &mut ParamStore, fusion: &FusionConfig, head: &HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        let tfm = Tfm::new(ps, fusion, rng)?;
        let head = Head::new(ps, HEAD_PREFIX, fusion.d_model, head, rng);
        Ok(Self { tfm, head })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, f_bl: Var, f_m12: Var, mode: GateMode) -> Result<TafNetOutput> {
        let tfm = self.tfm.forward(g, ps, f_bl, f_m12, mode)?;
        let logits = self.head.logits(g, ps, tfm.fused)?;
        Ok(TafNetOutput { logits, tfm })
    }
}

/// Gate rows of a `[B, 3]` tensor.
pub fn gates_from_tensor(t: &Tensor) -> Vec<GateCoefficients> {
    t.data()
        .chunks(3)
        .map(|r| GateCoefficients { alpha: r[0], beta: r[1], gamma: r[2] })
        .collect()
}

pub fn probabilities(logits: &Tensor) -> Vec<f64> {
    logits.data().iter().map(|&z| tafnet_nn::sigmoid(z)).collect()
}
