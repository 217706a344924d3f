use rand::Rng;

use super::params::{Gradients, Init, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `y = x·Wᵀ + b` with `W` laid out `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let init = Init::FanInUniform {
            fan_in: in_features,
        };
        let weight = store.add(
            format!("{name}.weight"),
            &[out_features, in_features],
            ParamKind::Trainable,
            init,
            rng,
        );
        let bias = store.add(
            format!("{name}.bias"),
            &[out_features],
            ParamKind::Trainable,
            init,
            rng,
        );
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &Tensor<S>,
    ) -> (Tensor<S>, Tensor<S>) {
        let (n, f) = x.dims2();
        assert_eq!(f, self.in_features, "linear input features");
        let mut y = Tensor::zeros(&[n, self.out_features]);
        let b = store.get(self.bias).data();
        for r in 0..n {
            y.data_mut()[r * self.out_features..(r + 1) * self.out_features].copy_from_slice(b);
        }
        S::gemm(
            n,
            f,
            self.out_features,
            S::one(),
            x.data(),
            (f as isize, 1),
            store.get(self.weight).data(),
            (1, f as isize),
            S::one(),
            y.data_mut(),
            self.out_features as isize,
        );
        (y, x.clone())
    }

    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        input: &Tensor<S>,
        dy: &Tensor<S>,
        grads: Option<&mut Gradients<S>>,
    ) -> Tensor<S> {
        let (n, f) = input.dims2();
        let o = self.out_features;
        if let Some(grads) = grads {
            let dw = grads.slot(self.weight, &[o, f]);
            S::gemm(
                o,
                n,
                f,
                S::one(),
                dy.data(),
                (1, o as isize),
                input.data(),
                (f as isize, 1),
                S::one(),
                dw,
                f as isize,
            );
            let db = grads.slot(self.bias, &[o]);
            for r in 0..n {
                for (a, &d) in db.iter_mut().zip(dy.row(r)) {
                    *a = *a + d;
                }
            }
        }
        let mut dx = Tensor::zeros(&[n, f]);
        S::gemm(
            n,
            o,
            f,
            S::one(),
            dy.data(),
            (o as isize, 1),
            store.get(self.weight).data(),
            (f as isize, 1),
            S::zero(),
            dx.data_mut(),
            f as isize,
        );
        dx
    }
}

/// Pointwise activations. Each trace is the activation output, which is
/// all the derivative needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    /// `scale · tanh(x)`
    ScaledTanh(f64),
    Identity,
}

impl Activation {
    pub fn forward<S: Scalar>(&self, x: &Tensor<S>) -> Tensor<S> {
        match *self {
            Activation::Relu => x.map(|v| v.max(S::zero())),
            Activation::LeakyRelu(slope) => {
                let slope = S::of(slope);
                x.map(|v| if v > S::zero() { v } else { v * slope })
            }
            Activation::ScaledTanh(scale) => {
                let scale = S::of(scale);
                x.map(|v| scale * v.tanh())
            }
            Activation::Identity => x.clone(),
        }
    }

    /// Gradient with respect to the input, given the forward output `y`.
    pub fn backward<S: Scalar>(&self, y: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
        let out = match *self {
            Activation::Relu => y.zip_map(dy, |o, d| if o > S::zero() { d } else { S::zero() }),
            Activation::LeakyRelu(slope) => {
                let slope = S::of(slope);
                y.zip_map(dy, |o, d| if o > S::zero() { d } else { d * slope })
            }
            Activation::ScaledTanh(scale) => {
                let scale = S::of(scale);
                y.zip_map(dy, |o, d| {
                    let t = o / scale;
                    d * scale * (S::one() - t * t)
                })
            }
            Activation::Identity => Ok(dy.clone()),
        };
        out.expect("activation output and gradient share a shape")
    }
}

/// Spatial mean: `[n, c, h, w] -> [n, c]`.
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let inv = S::one() / S::of(plane as f64);
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<S>() * inv)
        .collect();
    Tensor::from_vec(&[n, c], data).expect("pooled shape")
}

pub fn global_avg_pool_backward<S: Scalar>(dy: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let (n, c) = dy.dims2();
    let plane = h * w;
    let inv = S::one() / S::of(plane as f64);
    let mut data = Vec::with_capacity(n * c * plane);
    for &d in dy.data() {
        data.extend(std::iter::repeat_n(d * inv, plane));
    }
    Tensor::from_vec(&[n, c, h, w], data).expect("unpooled shape")
}
