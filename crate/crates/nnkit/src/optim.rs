use crate::{ParamStore, Tensor};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable (non-frozen, non-buffer) entry
    /// using the gradients accumulated in `ps`.
    pub fn step(&mut self, ps: &mut ParamStore) {
        self.step += 1;
        if self.moments.len() < ps.len() {
            self.moments.resize(ps.len(), None);
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = ps.ids().filter(|&id| ps.is_trainable(id)).collect();
        for id in ids {
            let grad = ps.grad(id).clone();
            let slot = &mut self.moments[id.index()];
            let (m, v) = slot.get_or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let p = ps.get_mut(id);
            for (((pv, g), mv), vv) in p.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *pv -= self.lr * self.weight_decay * *pv;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * g;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        ps.accumulate_grad(a, &Tensor::from_vec(&[2], vec![0.5, -3.0]).unwrap());
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut ps);
        let v = ps.get(a).data();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_and_buffers_untouched() {
        let mut ps = ParamStore::new();
        let a = ps.add("enc.a", Tensor::full(&[3], 1.0));
        let b = ps.add_buffer("enc.rm", Tensor::full(&[3], 1.0));
        let c = ps.add("head.c", Tensor::full(&[3], 1.0));
        ps.set_frozen("enc.", true);
        for id in [a, b, c] {
            ps.accumulate_grad(id, &Tensor::full(&[3], 1.0));
        }
        let mut opt = AdamW::new(0.1, 0.01);
        opt.step(&mut ps);
        assert_eq!(ps.get(a).data(), &[1.0; 3]);
        assert_eq!(ps.get(b).data(), &[1.0; 3]);
        assert!(ps.get(c).data()[0] < 1.0);
    }

    #[test]
    fn decay_applies_without_gradient() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", Tensor::full(&[1], 2.0));
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut ps);
        assert!((ps.get(a).data()[0] - 1.9).abs() < 1e-12);
    }
}
