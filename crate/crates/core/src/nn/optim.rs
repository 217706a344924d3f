use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd<S> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(store: &ParamStore<S>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: vec![None; store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>) {
        let (lr, mu, wd) = (
            S::of(self.lr),
            S::of(self.momentum),
            S::of(self.weight_decay),
        );
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let slot = id.index();
            let p = store.get_mut(id);
            let v = self.velocity[slot].get_or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let d = gv + wd * *pv;
                *vv = mu * *vv + d;
                *pv = *pv - lr * *vv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Option<Tensor<S>>>,
    second: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: vec![None; store.len()],
            second: vec![None; store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let bc1 = S::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = S::of(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (S::of(c.lr), S::of(c.eps));
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let slot = id.index();
            let p = store.get_mut(id);
            let m = self.first[slot].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.second[slot].get_or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
