//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, ParamId, ParamStore, Result, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Frozen parameters that nevertheless received an analytic gradient.
    pub frozen_with_grad: Vec<String>,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Denominator floor for the relative error.
pub const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients against `(L(θ+ε) − L(θ−ε)) / 2ε` on
/// `n_params` randomly drawn scalar parameters.
///
/// `loss_fn` must build a fresh graph from the store and return its scalar
/// loss; it must be deterministic (fixed dropout seed).
pub fn grad_check<F>(ps: &mut ParamStore, mut loss_fn: F, n_params: usize, eps: f64, seed: u64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var)>,
{
    let (graph, loss) = loss_fn(ps)?;
    let grads = graph.backward(loss)?;
    let mut analytic = ParamStore::new();
    let mut frozen_with_grad = Vec::new();
    for id in ps.ids() {
        analytic.add_buffer(ps.name(id), crate::Tensor::zeros(ps.get(id).shape()));
    }
    for id in graph.params_with_grad(&grads) {
        if !ps.is_trainable(id) {
            frozen_with_grad.push(ps.name(id).to_string());
        }
    }
    {
        let mut tmp = ps.clone();
        tmp.zero_grad();
        graph.accumulate_param_grads(&grads, &mut tmp);
        for id in ps.ids() {
            analytic.set(id, tmp.grad(id).clone())?;
        }
    }

    let candidates: Vec<ParamId> = ps.ids().filter(|&id| ps.is_trainable(id)).collect();
    let total: usize = candidates.iter().map(|&id| ps.get(id).numel()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        frozen_with_grad,
        worst: None,
    };
    if total == 0 {
        return Ok(report);
    }
    for _ in 0..n_params {
        let mut flat = rng.random_range(0..total);
        let mut pick = None;
        for &id in &candidates {
            let n = ps.get(id).numel();
            if flat < n {
                pick = Some((id, flat));
                break;
            }
            flat -= n;
        }
        let (id, idx) = pick.expect("index within total");
        let orig = ps.get(id).data()[idx];
        ps.get_mut(id).data_mut()[idx] = orig + eps;
        let (g, l) = loss_fn(ps)?;
        let plus = g.value(l).data()[0];
        ps.get_mut(id).data_mut()[idx] = orig - eps;
        let (g, l) = loss_fn(ps)?;
        let minus = g.value(l).data()[0];
        ps.get_mut(id).data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.get(id).data()[idx];
        let rel = relative_error(a, numeric);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((ps.name(id).to_string(), idx, a, numeric));
        }
    }
    Ok(report)
}
