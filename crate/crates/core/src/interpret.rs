//! Post-hoc analysis of trained fusion models: spatial attention maps,
//! per-sample gate coefficients and their correlation with predictions.
//!
//! Attention maps sum the head-averaged attention matrix over the query
//! axis, giving the attention each follow-up position receives. Summing over
//! keys instead would yield a constant (every softmax row sums to one).

use std::collections::BTreeMap;

use ndarray::Array3;
use statrs::distribution::{ContinuousCDF, StudentsT};
use tafnet_nn::Graph;

use crate::baselines::PairModel;
use crate::encoder::stack;
use crate::error::{Result, TafError};
use crate::fusion::{gates_from_tensor, probabilities, GateCoefficients, GateMode, TafNet};
use crate::trainer::{FeaturePair, TrainedModel};
use crate::volume::{IntensityTag, Volume};

pub const COEFFICIENT_NAMES: [&str; 3] = ["alpha", "beta", "gamma"];

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// Normalised to `[0, 1]` on the input grid.
    pub grid: Array3<f64>,
    /// Attention received per key token before normalisation.
    pub received: Vec<f64>,
    /// The pre-normalisation map was constant; `grid` is all zeros.
    pub degenerate: bool,
}

impl AttentionMap {
    /// Total received mass; equals the token count.
    pub fn mass(&self) -> f64 {
        self.received.iter().sum()
    }

    pub fn to_volume(&self) -> Result<Volume> {
        Volume::new(self.grid.mapv(|v| v as f32), [1.0; 3], IntensityTag::Unit)
    }
}

/// Head-averaged attention summed over queries: one value per key.
/// `weights` is `[H, nq, nk]` for a single sample.
pub fn reduce_attention(weights: &[f64], heads: usize, nq: usize, nk: usize) -> Result<Vec<f64>> {
    if weights.len() != heads * nq * nk || heads == 0 {
        return Err(TafError::Shape(format!("{} attention weights for {heads}×{nq}×{nk}", weights.len())));
    }
    let mut out = vec![0.0; nk];
    for h in 0..heads {
        for q in 0..nq {
            let row = &weights[(h * nq + q) * nk..(h * nq + q + 1) * nk];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w;
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= heads as f64);
    Ok(out)
}

/// Trilinear upsampling where source node `j` sits at output voxel
/// `j · out / src` along each axis; positions past the last node take the
/// edge value.
pub fn upsample_trilinear(src: &Array3<f64>, out: [usize; 3]) -> Result<Array3<f64>> {
    let s = src.dim();
    let s = [s.0, s.1, s.2];
    if s.contains(&0) || out.contains(&0) {
        return Err(TafError::Shape(format!("cannot upsample {s:?} to {out:?}")));
    }
    let coord = |axis: usize, i: usize| -> (usize, usize, f64) {
        let x = (i as f64 * s[axis] as f64 / out[axis] as f64).min((s[axis] - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(s[axis] - 1);
        (lo, hi, x - lo as f64)
    };
    let cz: Vec<_> = (0..out[0]).map(|i| coord(0, i)).collect();
    let cy: Vec<_> = (0..out[1]).map(|i| coord(1, i)).collect();
    let cx: Vec<_> = (0..out[2]).map(|i| coord(2, i)).collect();
    Ok(Array3::from_shape_fn((out[0], out[1], out[2]), |(z, y, x)| {
        let (z0, z1, tz) = cz[z];
        let (y0, y1, ty) = cy[y];
        let (x0, x1, tx) = cx[x];
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let plane = |zz: usize| {
            let r0 = lerp(src[[zz, y0, x0]], src[[zz, y0, x1]], tx);
            let r1 = lerp(src[[zz, y1, x0]], src[[zz, y1, x1]], tx);
            lerp(r0, r1, ty)
        };
        lerp(plane(z0), plane(z1), tz)
    }))
}

/// Min-max scaling to `[0,1]`; a constant input maps to zeros and `true`.
pub fn normalize_map(map: &Array3<f64>) -> (Array3<f64>, bool) {
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 1e-12 * max.abs().max(1.0)) {
        return (Array3::zeros(map.dim()), true);
    }
    (map.mapv(|v| ((v - min) / range).clamp(0.0, 1.0)), false)
}

/// Builds the map from a reduced per-key vector on an `s³` token grid.
pub fn attention_map_from_received(received: Vec<f64>, side: usize, input_grid: usize) -> Result<AttentionMap> {
    if received.len() != side * side * side {
        return Err(TafError::Shape(format!("{} tokens do not form a {side}³ grid", received.len())));
    }
    let coarse = Array3::from_shape_vec((side, side, side), received.clone()).map_err(|e| TafError::Shape(e.to_string()))?;
    let fine = upsample_trilinear(&coarse, [input_grid; 3])?;
    let (grid, degenerate) = normalize_map(&fine);
    Ok(AttentionMap { grid, received, degenerate })
}

fn fusion_model(trained: &TrainedModel) -> Result<&TafNet> {
    if trained.epochs_trained == 0 {
        return Err(TafError::State("model has not been trained".into()));
    }
    match &trained.model {
        PairModel::TafNet(m) => Ok(m),
        other => Err(TafError::State(format!("{} has no attention or gates", other.kind()))),
    }
}

/// Attention map of one pair on an `input_grid³` volume.
pub fn extract_attention_map(trained: &TrainedModel, pair: &FeaturePair, input_grid: usize) -> Result<AttentionMap> {
    let net = fusion_model(trained)?;
    let shape = pair.f_bl.shape();
    if shape.len() != 4 || shape[1] != shape[2] || shape[2] != shape[3] {
        return Err(TafError::Shape(format!("expected [C, s, s, s] features, got {shape:?}")));
    }
    let side = shape[1];
    let n = side * side * side;
    let mut g = Graph::new(false);
    let bl = g.input(stack(&[&pair.f_bl])?);
    let fu = g.input(stack(&[&pair.f_fu])?);
    let out = net.tfm.forward(&mut g, &trained.params, bl, fu, GateMode::Learned)?;
    let received = reduce_attention(&out.attention, net.tfm.cfg.heads, n, n)?;
    attention_map_from_received(received, side, input_grid)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateProfile {
    pub subject_id: String,
    pub interval_months: u32,
    pub label: u8,
    pub gates: GateCoefficients,
    pub probability: f64,
    pub covariates: BTreeMap<String, f64>,
}

/// One profile per pair (augmented copies skipped), in input order.
pub fn extract_gates(trained: &TrainedModel, data: &[FeaturePair], batch: usize) -> Result<Vec<GateProfile>> {
    let net = fusion_model(trained)?;
    let originals: Vec<&FeaturePair> = data.iter().filter(|p| p.copy == 0).collect();
    let mut out = Vec::with_capacity(originals.len());
    for chunk in originals.chunks(batch.max(1)) {
        let mut g = Graph::new(false);
        let bl = g.input(stack(&chunk.iter().map(|p| &p.f_bl).collect::<Vec<_>>())?);
        let fu = g.input(stack(&chunk.iter().map(|p| &p.f_fu).collect::<Vec<_>>())?);
        let res = net.forward(&mut g, &trained.params, bl, fu, GateMode::Learned)?;
        let gates = gates_from_tensor(g.value(res.tfm.gates));
        let probs = probabilities(g.value(res.logits));
        for ((p, gate), prob) in chunk.iter().zip(gates).zip(probs) {
            out.push(GateProfile {
                subject_id: p.subject_id.clone(),
                interval_months: p.interval_months,
                label: p.label,
                gates: gate,
                probability: prob,
                covariates: BTreeMap::new(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateSummaryRow {
    pub coefficient: &'static str,
    pub mean: f64,
    /// Sample (n − 1) standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// One-sample t statistic against 1/3.
    pub t: f64,
    /// Two-sided p-value of that test.
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateSummary {
    pub rows: [GateSummaryRow; 3],
    /// Samples whose largest coefficient is α, β, γ (ties to the earlier one).
    pub dominance: [usize; 3],
}

/// Two-sided one-sample t-test of `values` against `mu`.
pub fn one_sample_t(values: &[f64], mu: f64) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(TafError::TestUndefined("t-test needs at least two values".into()));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    if sd == 0.0 {
        return Err(TafError::TestUndefined("t-test on constant values".into()));
    }
    let t = (mean - mu) / (sd / nf.sqrt());
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0).map_err(|e| TafError::Param(e.to_string()))?;
    Ok((t, 2.0 * (1.0 - dist.cdf(t.abs()))))
}

pub fn summarize_gates(profiles: &[GateProfile]) -> Result<GateSummary> {
    if profiles.len() < 2 {
        return Err(TafError::TestUndefined("gate summary needs at least two profiles".into()));
    }
    let mut dominance = [0usize; 3];
    for p in profiles {
        dominance[p.gates.dominant()] += 1;
    }
    let row = |i: usize| -> Result<GateSummaryRow> {
        let v: Vec<f64> = profiles.iter().map(|p| p.gates.as_array()[i]).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let (t, p_value) = one_sample_t(&v, 1.0 / 3.0).unwrap_or((f64::NAN, f64::NAN));
        Ok(GateSummaryRow {
            coefficient: COEFFICIENT_NAMES[i],
            mean,
            std,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            t,
            p_value,
        })
    };
    Ok(GateSummary { rows: [row(0)?, row(1)?, row(2)?], dominance })
}

/// Pearson correlation with its two-sided t-distribution p-value.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let n = x.len();
    if n != y.len() {
        return Err(TafError::Param("vectors differ in length".into()));
    }
    if n < 3 {
        return Err(TafError::CorrelationUndefined(format!("{n} points, need at least 3")));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(TafError::CorrelationUndefined("constant vector".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = nf - 2.0;
    let p = if 1.0 - r.abs() < 1e-15 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| TafError::Param(e.to_string()))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok((r, p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationRow {
    pub coefficient: &'static str,
    pub r: f64,
    pub p_value: f64,
}

/// Correlation of each gate coefficient with the predicted probability.
pub fn gate_correlation(profiles: &[GateProfile]) -> Result<[CorrelationRow; 3]> {
    let prob: Vec<f64> = profiles.iter().map(|p| p.probability).collect();
    let row = |i: usize| -> Result<CorrelationRow> {
        let v: Vec<f64> = profiles.iter().map(|p| p.gates.as_array()[i]).collect();
        let (r, p_value) = pearson(&v, &prob)?;
        Ok(CorrelationRow { coefficient: COEFFICIENT_NAMES[i], r, p_value })
    };
    Ok([row(0)?, row(1)?, row(2)?])
}
