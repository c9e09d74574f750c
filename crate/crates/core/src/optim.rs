//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `lr * (1 - step / total)^power`, floored at zero.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = 1.0 - (step.min(total) as f64 / total as f64);
    base * frac.powf(power)
}

/// Rescale gradients of `ids` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, ids: &[ParamId], max_norm: f64) -> f64 {
    let n = grads.global_norm(ids);
    if n > max_norm && n.is_finite() {
        grads.scale(ids, max_norm / n);
    }
    n
}

/// Momentum SGD with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, ids: &[ParamId], lr: f64) {
        for &id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            if self.velocity.len() <= i {
                self.velocity.resize(i + 1, None);
            }
            let p = store.get_mut(id);
            let v = self.velocity[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let d = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + d;
                *pv -= lr * *vv;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }
}

impl Adam {
    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, ids: &[ParamId], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for &id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            if self.moments.len() <= i {
                self.moments.resize(i + 1, None);
            }
            let (m, v) = self.moments[i].get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.get_mut(id);
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    fn one_param(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamGroup::Encoder, Tensor::new(vec![1], vec![v]));
        (s, id)
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(1.0, 0, 10, 0.9), 1.0);
        assert_eq!(poly_lr(1.0, 10, 10, 0.9), 0.0);
        assert!((poly_lr(2.0, 5, 10, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let (mut s, id) = one_param(1.0);
        let mut g = ParamGrads::new(1);
        g.set(id, Tensor::new(vec![1], vec![0.5]));
        let mut opt = Sgd::new(0.9, 0.1);
        opt.step(&mut s, &g, &[id], 0.1);
        // v = 0.5 + 0.1 * 1.0 = 0.6; w = 1 - 0.06
        assert!((s.get(id).item() - 0.94).abs() < 1e-15);
        opt.step(&mut s, &g, &[id], 0.1);
        let v2 = 0.9 * 0.6 + 0.5 + 0.1 * 0.94;
        assert!((s.get(id).item() - (0.94 - 0.1 * v2)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let (mut s, id) = one_param(0.0);
        let mut g = ParamGrads::new(1);
        g.set(id, Tensor::new(vec![1], vec![-3.0]));
        let mut opt = Adam::default();
        opt.step(&mut s, &g, &[id], 0.01);
        assert!((s.get(id).item() - 0.01).abs() < 1e-9);
    }

    #[test]
    fn clipping_caps_norm() {
        let (_, id) = one_param(0.0);
        let mut g = ParamGrads::new(1);
        g.set(id, Tensor::new(vec![1], vec![30.0]));
        assert_eq!(clip_global_norm(&mut g, &[id], 10.0), 30.0);
        assert!((g.get(id).unwrap().item() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn untouched_ids_do_not_move() {
        let mut s = ParamStore::new();
        let a = s.add("a", ParamGroup::Encoder, Tensor::new(vec![1], vec![1.0]));
        let b = s.add("b", ParamGroup::DiscDay, Tensor::new(vec![1], vec![1.0]));
        let mut g = ParamGrads::new(2);
        g.set(a, Tensor::new(vec![1], vec![1.0]));
        g.set(b, Tensor::new(vec![1], vec![1.0]));
        Adam::default().step(&mut s, &g, &[a], 0.1);
        assert_eq!(s.get(b).item(), 1.0);
        assert_ne!(s.get(a).item(), 1.0);
    }
}
