//! Loss terms of the FRACE objectives and their gradients.
//!
//! Every term is a mean over the batch and, for image-valued terms, over
//! every element. Probabilities are clamped to `[PROB_EPS, 1]` inside logs;
//! where the clamp is active the gradient is zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PROB_EPS: f64 = 1e-8;

pub(crate) fn clamped_ln(p: f64) -> f64 {
    p.max(PROB_EPS).ln()
}

/// Derivative of `clamped_ln` at `p`.
pub(crate) fn clamped_ln_grad(p: f64) -> f64 {
    if p > PROB_EPS {
        1.0 / p
    } else {
        0.0
    }
}

fn finite_inputs<S: Scalar>(what: &str, values: &[S]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step: 0,
            what: format!("{what} input"),
        })
    }
}

fn mean_of(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

/// `mean log d_real + mean log(1 - d_fake)`.
pub fn adversarial_loss<S: Scalar>(d_real: &[S], d_fake: &[S]) -> Result<f64> {
    finite_inputs("adversarial loss", d_real)?;
    finite_inputs("adversarial loss", d_fake)?;
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::Shape("adversarial loss of an empty batch".into()));
    }
    let real = mean_of(d_real.iter().map(|p| clamped_ln(p.as_f64())), d_real.len());
    let fake = mean_of(
        d_fake.iter().map(|p| clamped_ln(1.0 - p.as_f64())),
        d_fake.len(),
    );
    Ok(real + fake)
}

/// Gradients of [`adversarial_loss`] with respect to `d_real` and `d_fake`.
pub fn adversarial_grad<S: Scalar>(d_real: &[S], d_fake: &[S]) -> (Vec<S>, Vec<S>) {
    let nr = d_real.len() as f64;
    let nf = d_fake.len() as f64;
    let gr = d_real
        .iter()
        .map(|p| S::of(clamped_ln_grad(p.as_f64()) / nr))
        .collect();
    let gf = d_fake
        .iter()
        .map(|p| S::of(-clamped_ln_grad(1.0 - p.as_f64()) / nf))
        .collect();
    (gr, gf)
}

/// Critic form of the adversarial term for the Wasserstein alternative:
/// `mean score_real - mean score_fake` over raw (unsquashed) scores.
pub fn wasserstein_loss<S: Scalar>(score_real: &[S], score_fake: &[S]) -> Result<f64> {
    finite_inputs("wasserstein loss", score_real)?;
    finite_inputs("wasserstein loss", score_fake)?;
    if score_real.is_empty() || score_fake.is_empty() {
        return Err(Error::Shape("wasserstein loss of an empty batch".into()));
    }
    Ok(
        mean_of(score_real.iter().map(|v| v.as_f64()), score_real.len())
            - mean_of(score_fake.iter().map(|v| v.as_f64()), score_fake.len()),
    )
}

pub fn wasserstein_grad<S: Scalar>(score_real: &[S], score_fake: &[S]) -> (Vec<S>, Vec<S>) {
    let gr = S::of(1.0 / score_real.len() as f64);
    let gf = S::of(-1.0 / score_fake.len() as f64);
    (vec![gr; score_real.len()], vec![gf; score_fake.len()])
}

fn check_rows<S: Scalar>(probs: &Tensor<S>, labels: &[usize]) -> Result<(usize, usize)> {
    if probs.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "expected [n, C] probabilities, got {:?}",
            probs.shape()
        )));
    }
    let (n, c) = probs.dims2();
    if n != labels.len() || n == 0 {
        return Err(Error::Shape(format!(
            "{n} probability rows for {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label {
            index: bad,
            num_classes: c,
        });
    }
    finite_inputs("classification loss", probs.data())?;
    Ok((n, c))
}

/// `mean -log p(label)` over the rows of `probs`. Serves both the real and
/// fake domain-classification terms.
pub fn domain_cls_loss<S: Scalar>(probs: &Tensor<S>, labels: &[usize]) -> Result<f64> {
    let (n, _) = check_rows(probs, labels)?;
    Ok(-mean_of(
        labels
            .iter()
            .enumerate()
            .map(|(r, &l)| clamped_ln(probs.row(r)[l].as_f64())),
        n,
    ))
}

/// Gradient of [`domain_cls_loss`] with respect to `probs`.
pub fn domain_cls_grad<S: Scalar>(probs: &Tensor<S>, labels: &[usize]) -> Tensor<S> {
    let (n, c) = probs.dims2();
    let mut g = Tensor::zeros(&[n, c]);
    for (r, &l) in labels.iter().enumerate() {
        g.data_mut()[r * c + l] = S::of(-clamped_ln_grad(probs.row(r)[l].as_f64()) / n as f64);
    }
    g
}

/// The explanation term: `mean -log H(y^c | counterfactual)`, with `probs`
/// coming from the frozen classifier.
pub fn explanation_loss<S: Scalar>(h_probs: &Tensor<S>, targets: &[usize]) -> Result<f64> {
    domain_cls_loss(h_probs, targets)
}

pub fn explanation_grad<S: Scalar>(h_probs: &Tensor<S>, targets: &[usize]) -> Tensor<S> {
    domain_cls_grad(h_probs, targets)
}

fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// Cycle term `mean |x - (x + g_forward + g_backward)|`, which reduces to
/// `mean |g_forward + g_backward|`; `x` only fixes the shape.
pub fn reconstruction_loss<S: Scalar>(
    x: &Tensor<S>,
    g_forward: &Tensor<S>,
    g_backward: &Tensor<S>,
) -> Result<f64> {
    x.expect_same_shape(g_forward)?;
    x.expect_same_shape(g_backward)?;
    Ok(mean_of(
        g_forward
            .data()
            .iter()
            .zip(g_backward.data())
            .map(|(&a, &b)| (a.as_f64() + b.as_f64()).abs()),
        x.len(),
    ))
}

/// Gradient of [`reconstruction_loss`]; identical for both perturbations.
pub fn reconstruction_grad<S: Scalar>(g_forward: &Tensor<S>, g_backward: &Tensor<S>) -> Tensor<S> {
    let inv = S::of(1.0 / g_forward.len() as f64);
    g_forward
        .zip_map(g_backward, |a, b| sign(a + b) * inv)
        .expect("reconstruction grad shapes")
}

/// `mean |g_forward| + mean |g_backward|`.
pub fn perturbation_loss<S: Scalar>(g_forward: &Tensor<S>, g_backward: &Tensor<S>) -> Result<f64> {
    g_forward.expect_same_shape(g_backward)?;
    let n = g_forward.len();
    Ok(
        mean_of(g_forward.data().iter().map(|v| v.as_f64().abs()), n)
            + mean_of(g_backward.data().iter().map(|v| v.as_f64().abs()), n),
    )
}

/// Gradient of one of the two [`perturbation_loss`] summands.
pub fn perturbation_grad<S: Scalar>(g: &Tensor<S>) -> Tensor<S> {
    let inv = S::of(1.0 / g.len() as f64);
    g.map(|v| sign(v) * inv)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the adversarial term in the generator objective.
    pub lambda_adv: f64,
    pub lambda_cls: f64,
    pub lambda_rec: f64,
    pub lambda_exp: f64,
    pub lambda_per: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 1.0,
            lambda_cls: 1.0,
            lambda_rec: 1.0,
            lambda_exp: 1.0,
            lambda_per: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_adv,
            self.lambda_cls,
            self.lambda_rec,
            self.lambda_exp,
            self.lambda_per,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Unweighted loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub adv: f64,
    pub cls_real: f64,
    pub cls_fake: f64,
    pub rec: f64,
    pub exp: f64,
    pub per: f64,
}

/// `(L_D, L_G)` where `L_D = -adv + λ_cls·cls_real` and
/// `L_G = λ_adv·adv + λ_cls·cls_fake + λ_rec·rec + λ_exp·exp + λ_per·per`.
pub fn total_losses(t: &LossTerms, w: &LossWeights) -> (f64, f64) {
    let d = -t.adv + w.lambda_cls * t.cls_real;
    let g = w.lambda_adv * t.adv
        + w.lambda_cls * t.cls_fake
        + w.lambda_rec * t.rec
        + w.lambda_exp * t.exp
        + w.lambda_per * t.per;
    (d, g)
}

/// Per-term values of one training step.
///
/// `adv` and `cls_real` are measured in the discriminator update, the rest
/// in the generator update that follows it. `adv_g` is the adversarial term
/// re-evaluated with the updated discriminator, which is what `total_g`
/// uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub adv: f64,
    pub cls_real: f64,
    pub cls_fake: f64,
    pub rec: f64,
    pub exp: f64,
    pub per: f64,
    pub adv_g: f64,
    pub total_d: f64,
    pub total_g: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.adv,
            self.cls_real,
            self.cls_fake,
            self.rec,
            self.exp,
            self.per,
            self.adv_g,
            self.total_d,
            self.total_g,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}
