//! Comparison models on top of the same frozen encoder, and a common
//! interface over them and the full fusion network.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use tafnet_nn::{BiLstm, Graph, Linear, ParamStore, Var};

use crate::error::{Result, TafError};
use crate::fusion::{FusionConfig, GateMode, Head, HeadConfig, TafNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    TafNet,
    SiameseSubtract,
    CnnLstm,
    InitialOnly,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::SiameseSubtract, ModelKind::CnnLstm, ModelKind::InitialOnly, ModelKind::TafNet];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::TafNet => "tafnet",
            ModelKind::SiameseSubtract => "siamese_sub",
            ModelKind::CnnLstm => "cnn_lstm",
            ModelKind::InitialOnly => "initial_only",
        }
    }

    /// Parameter-name prefix of the trainable part.
    pub fn prefix(&self) -> &'static str {
        match self {
            ModelKind::TafNet => "",
            ModelKind::SiameseSubtract => "siamese.",
            ModelKind::CnnLstm => "cnn_lstm.",
            ModelKind::InitialOnly => "initial.",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = TafError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tafnet" => Ok(ModelKind::TafNet),
            "siamese_sub" => Ok(ModelKind::SiameseSubtract),
            "cnn_lstm" => Ok(ModelKind::CnnLstm),
            "initial_only" => Ok(ModelKind::InitialOnly),
            other => Err(TafError::Config(format!("unknown model {other:?}"))),
        }
    }
}

/// Classification head applied to `f_m12 − f_bl`.
#[derive(Clone, Debug)]
pub struct SiameseSubtract {
    pub head: Head,
}

impl SiameseSubtract {
    pub fn new(ps: &mut ParamStore, d_model: usize, cfg: &HeadConfig, rng: &mut impl Rng) -> Self {
        Self { head: Head::new(ps, "siamese.head.", d_model, cfg, rng) }
    }

    pub fn logits(&self, g: &mut Graph, ps: &ParamStore, f_bl: Var, f_m12: Var) -> Result<Var> {
        if g.value(f_bl).shape() != g.value(f_m12).shape() {
            return Err(TafError::Shape("siamese_subtract: feature maps differ".into()));
        }
        let delta = g.sub(f_m12, f_bl)?;
        self.head.logits(g, ps, delta)
    }
}

/// Bidirectional LSTM over the pooled two-step sequence `[GAP(f_bl), GAP(f_m12)]`.
#[derive(Clone, Debug)]
pub struct CnnLstm {
    pub lstm: BiLstm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl CnnLstm {
    pub fn new(ps: &mut ParamStore, d_model: usize, hidden: usize, head_hidden: usize, rng: &mut impl Rng) -> Self {
        let lstm = BiLstm::new(ps, "cnn_lstm.lstm", d_model, hidden, rng);
        let fc1 = Linear::new(ps, "cnn_lstm.fc1", lstm.output_dim(), head_hidden, rng);
        let fc2 = Linear::new(ps, "cnn_lstm.fc2", head_hidden, 1, rng);
        Self { lstm, fc1, fc2 }
    }

    pub fn logits(&self, g: &mut Graph, ps: &ParamStore, f_bl: Var, f_m12: Var) -> Result<Var> {
        let a = g.gap(f_bl)?;
        let b = g.gap(f_m12)?;
        let h = self.lstm.run(g, ps, &[a, b])?;
        let h = self.fc1.forward(g, ps, h)?;
        let h = g.relu(h);
        Ok(self.fc2.forward(g, ps, h)?)
    }

    pub fn zero(&self, ps: &mut ParamStore) {
        for l in [&self.lstm.forward.input_proj, &self.lstm.forward.hidden_proj, &self.lstm.backward.input_proj, &self.lstm.backward.hidden_proj, &self.fc1, &self.fc2] {
            l.zero(ps);
        }
    }
}

/// Classification head on baseline features only.
#[derive(Clone, Debug)]
pub struct InitialOnly {
    pub head: Head,
}

impl InitialOnly {
    pub fn new(ps: &mut ParamStore, d_model: usize, cfg: &HeadConfig, rng: &mut impl Rng) -> Self {
        Self { head: Head::new(ps, "initial.head.", d_model, cfg, rng) }
    }

    pub fn logits(&self, g: &mut Graph, ps: &ParamStore, f_bl: Var) -> Result<Var> {
        self.head.logits(g, ps, f_bl)
    }
}

#[derive(Clone, Debug)]
pub enum PairModel {
    TafNet(TafNet),
    SiameseSubtract(SiameseSubtract),
    CnnLstm(CnnLstm),
    InitialOnly(InitialOnly),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    pub lstm_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { fusion: FusionConfig::default(), head: HeadConfig::default(), lstm_hidden: 64 }
    }
}

impl PairModel {
    pub fn new(kind: ModelKind, ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.fusion.d_model;
        Ok(match kind {
            ModelKind::TafNet => PairModel::TafNet(TafNet::new(ps, &cfg.fusion, &cfg.head, rng)?),
            ModelKind::SiameseSubtract => PairModel::SiameseSubtract(SiameseSubtract::new(ps, d, &cfg.head, rng)),
            ModelKind::CnnLstm => PairModel::CnnLstm(CnnLstm::new(ps, d, cfg.lstm_hidden, cfg.head.hidden, rng)),
            ModelKind::InitialOnly => PairModel::InitialOnly(InitialOnly::new(ps, d, &cfg.head, rng)),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            PairModel::TafNet(_) => ModelKind::TafNet,
            PairModel::SiameseSubtract(_) => ModelKind::SiameseSubtract,
            PairModel::CnnLstm(_) => ModelKind::CnnLstm,
            PairModel::InitialOnly(_) => ModelKind::InitialOnly,
        }
    }

    /// Logits `[B, 1]` for batched feature maps.
    pub fn logits(&self, g: &mut Graph, ps: &ParamStore, f_bl: Var, f_m12: Var) -> Result<Var> {
        match self {
            PairModel::TafNet(m) => Ok(m.forward(g, ps, f_bl, f_m12, GateMode::Learned)?.logits),
            PairModel::SiameseSubtract(m) => m.logits(g, ps, f_bl, f_m12),
            PairModel::CnnLstm(m) => m.logits(g, ps, f_bl, f_m12),
            PairModel::InitialOnly(m) => m.logits(g, ps, f_bl),
        }
    }

    /// Names of the parameter sections this model trains.
    pub fn sections(&self) -> Vec<&'static str> {
        match self {
            PairModel::TafNet(_) => vec!["tfm.", "head."],
            PairModel::SiameseSubtract(_) => vec!["siamese."],
            PairModel::CnnLstm(_) => vec!["cnn_lstm."],
            PairModel::InitialOnly(_) => vec!["initial."],
        }
    }

    pub fn trainable_count(&self, ps: &ParamStore) -> usize {
        self.sections().iter().map(|s| ps.count(s)).sum()
    }
}
