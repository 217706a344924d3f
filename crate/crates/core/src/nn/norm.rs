use rand::Rng;

use super::params::{Gradients, Init, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct NormTrace<S> {
    xhat: Tensor<S>,
    /// One entry per normalization group (channel for batch norm,
    /// item×channel for instance norm).
    inv_std: Vec<S>,
    /// Whether the statistics came from the batch itself, which couples
    /// the gradient across the group.
    batch_stats: bool,
    batch_mean: Vec<S>,
    batch_var_unbiased: Vec<S>,
}

/// Mean and biased variance per group (channel, or item×channel when
/// `per_item`), plus the element count of each group.
fn group_stats<S: Scalar>(x: &Tensor<S>, per_item: bool) -> (Vec<S>, Vec<S>, usize) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let groups = if per_item { n * c } else { c };
    let mut mean = vec![S::zero(); groups];
    let mut sq = vec![S::zero(); groups];
    for i in 0..n {
        for (ch, chunk) in x.item(i).chunks(plane).enumerate() {
            let gi = if per_item { i * c + ch } else { ch };
            for &v in chunk {
                mean[gi] = mean[gi] + v;
            }
        }
    }
    let count = if per_item { plane } else { n * plane };
    let cnt = S::of(count as f64);
    mean.iter_mut().for_each(|m| *m = *m / cnt);
    for i in 0..n {
        for (ch, chunk) in x.item(i).chunks(plane).enumerate() {
            let gi = if per_item { i * c + ch } else { ch };
            for &v in chunk {
                let d = v - mean[gi];
                sq[gi] = sq[gi] + d * d;
            }
        }
    }
    let var = sq.into_iter().map(|s| s / cnt).collect();
    (mean, var, count)
}

#[allow(clippy::too_many_arguments)]
fn normalize<S: Scalar>(
    x: &Tensor<S>,
    per_item: bool,
    mean: &[S],
    inv_std: &[S],
    gamma: &[S],
    beta: &[S],
) -> (Tensor<S>, Tensor<S>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut xhat = Tensor::zeros(&[n, c, h, w]);
    let mut y = Tensor::zeros(&[n, c, h, w]);
    for i in 0..n {
        let src = x.item(i);
        let xh = xhat.item_mut(i);
        for ch in 0..c {
            let gi = if per_item { i * c + ch } else { ch };
            for (o, &v) in xh[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .zip(&src[ch * plane..(ch + 1) * plane])
            {
                *o = (v - mean[gi]) * inv_std[gi];
            }
        }
        let yi = y.item_mut(i);
        for ch in 0..c {
            for (o, &v) in yi[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .zip(&xh[ch * plane..(ch + 1) * plane])
            {
                *o = gamma[ch] * v + beta[ch];
            }
        }
    }
    (y, xhat)
}

#[allow(clippy::too_many_arguments)]
#[allow(clippy::needless_range_loop)]
fn norm_backward<S: Scalar>(
    trace: &NormTrace<S>,
    dy: &Tensor<S>,
    per_item: bool,
    gamma: &[S],
    gamma_id: ParamId,
    beta_id: ParamId,
    grads: Option<&mut Gradients<S>>,
) -> Tensor<S> {
    let (n, c, h, w) = dy.dims4();
    let plane = h * w;
    let groups = trace.inv_std.len();
    // per-group sums of dxhat and dxhat·xhat
    let mut sum_d = vec![S::zero(); groups];
    let mut sum_dx = vec![S::zero(); groups];
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for i in 0..n {
        let dyi = dy.item(i);
        let xh = trace.xhat.item(i);
        for ch in 0..c {
            let gi = if per_item { i * c + ch } else { ch };
            let range = ch * plane..(ch + 1) * plane;
            for (&d, &xv) in dyi[range.clone()].iter().zip(&xh[range]) {
                dgamma[ch] = dgamma[ch] + d * xv;
                dbeta[ch] = dbeta[ch] + d;
                let dxh = d * gamma[ch];
                sum_d[gi] = sum_d[gi] + dxh;
                sum_dx[gi] = sum_dx[gi] + dxh * xv;
            }
        }
    }
    if let Some(grads) = grads {
        let g = grads.slot(gamma_id, &[c]);
        g.iter_mut().zip(&dgamma).for_each(|(a, &b)| *a = *a + b);
        let b = grads.slot(beta_id, &[c]);
        b.iter_mut().zip(&dbeta).for_each(|(a, &v)| *a = *a + v);
    }
    let count = S::of(if per_item { plane } else { n * plane } as f64);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for i in 0..n {
        let dyi = dy.item(i);
        let xh = trace.xhat.item(i);
        let dxi = dx.item_mut(i);
        for ch in 0..c {
            let gi = if per_item { i * c + ch } else { ch };
            let inv = trace.inv_std[gi];
            let range = ch * plane..(ch + 1) * plane;
            for ((o, &d), &xv) in dxi[range.clone()]
                .iter_mut()
                .zip(&dyi[range.clone()])
                .zip(&xh[range])
            {
                let dxh = d * gamma[ch];
                *o = if trace.batch_stats {
                    inv * (dxh - sum_d[gi] / count - xv * sum_dx[gi] / count)
                } else {
                    inv * dxh
                };
            }
        }
    }
    dx
}

/// Batch normalization with running statistics for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub momentum: f64,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let gamma = store.add(
            format!("{name}.weight"),
            &[channels],
            ParamKind::Trainable,
            Init::Ones,
            rng,
        );
        let beta = store.add(
            format!("{name}.bias"),
            &[channels],
            ParamKind::Trainable,
            Init::Zeros,
            rng,
        );
        let running_mean = store.add(
            format!("{name}.running_mean"),
            &[channels],
            ParamKind::Buffer,
            Init::Zeros,
            rng,
        );
        let running_var = store.add(
            format!("{name}.running_var"),
            &[channels],
            ParamKind::Buffer,
            Init::Ones,
            rng,
        );
        Self {
            channels,
            momentum: 0.1,
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn gamma_id(&self) -> ParamId {
        self.gamma
    }

    /// `train` selects batch statistics; otherwise the running estimates
    /// are used and the output is a per-element affine map.
    pub fn forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &Tensor<S>,
        train: bool,
    ) -> (Tensor<S>, NormTrace<S>) {
        let eps = S::of(EPS);
        let (mean, var, count) = if train {
            group_stats(x, false)
        } else {
            (
                store.get(self.running_mean).data().to_vec(),
                store.get(self.running_var).data().to_vec(),
                0,
            )
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = normalize(
            x,
            false,
            &mean,
            &inv_std,
            store.get(self.gamma).data(),
            store.get(self.beta).data(),
        );
        let batch_var_unbiased = if train && count > 1 {
            let k = S::of(count as f64 / (count - 1) as f64);
            var.iter().map(|&v| v * k).collect()
        } else {
            var
        };
        (
            y,
            NormTrace {
                xhat,
                inv_std,
                batch_stats: train,
                batch_mean: mean,
                batch_var_unbiased,
            },
        )
    }

    /// Folds the batch statistics of a training-mode forward into the
    /// running estimates.
    pub fn update_running_stats<S: Scalar>(&self, store: &mut ParamStore<S>, trace: &NormTrace<S>) {
        if !trace.batch_stats {
            return;
        }
        let m = S::of(self.momentum);
        let keep = S::one() - m;
        for (r, &b) in store
            .get_mut(self.running_mean)
            .data_mut()
            .iter_mut()
            .zip(&trace.batch_mean)
        {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store
            .get_mut(self.running_var)
            .data_mut()
            .iter_mut()
            .zip(&trace.batch_var_unbiased)
        {
            *r = keep * *r + m * b;
        }
    }

    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        trace: &NormTrace<S>,
        dy: &Tensor<S>,
        grads: Option<&mut Gradients<S>>,
    ) -> Tensor<S> {
        norm_backward(
            trace,
            dy,
            false,
            store.get(self.gamma).data(),
            self.gamma,
            self.beta,
            grads,
        )
    }
}

/// Per-item, per-channel normalization with a learned affine map. Always
/// uses the statistics of the item itself, so outputs never depend on other
/// items in the batch.
#[derive(Clone, Debug)]
pub struct InstanceNorm2d {
    pub channels: usize,
    gamma: ParamId,
    beta: ParamId,
}

impl InstanceNorm2d {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let gamma = store.add(
            format!("{name}.weight"),
            &[channels],
            ParamKind::Trainable,
            Init::Ones,
            rng,
        );
        let beta = store.add(
            format!("{name}.bias"),
            &[channels],
            ParamKind::Trainable,
            Init::Zeros,
            rng,
        );
        Self {
            channels,
            gamma,
            beta,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &Tensor<S>,
    ) -> (Tensor<S>, NormTrace<S>) {
        let (mean, var, _) = group_stats(x, true);
        let eps = S::of(EPS);
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = normalize(
            x,
            true,
            &mean,
            &inv_std,
            store.get(self.gamma).data(),
            store.get(self.beta).data(),
        );
        (
            y,
            NormTrace {
                xhat,
                inv_std,
                batch_stats: true,
                batch_mean: Vec::new(),
                batch_var_unbiased: Vec::new(),
            },
        )
    }

    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        trace: &NormTrace<S>,
        dy: &Tensor<S>,
        grads: Option<&mut Gradients<S>>,
    ) -> Tensor<S> {
        norm_backward(
            trace,
            dy,
            true,
            store.get(self.gamma).data(),
            self.gamma,
            self.beta,
            grads,
        )
    }
}
