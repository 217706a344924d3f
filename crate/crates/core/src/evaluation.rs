//! Explanation quality metrics, the images-per-second benchmark and the
//! per-query gradient-descent baseline used for speed comparisons.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cgan::{Discriminator, Generator};
use crate::classifier::{Classifier, ClassifierTrace};
use crate::datasets::{Dataset, DomainLabel, ImageShape};
use crate::explainer::{apply_perturbation, explain_batch_by, Explanation};
use crate::losses::{clamped_ln, clamped_ln_grad};
use crate::tensor::argmax;
use crate::{Error, Result, Scalar, Tensor};

/// Images per explanation batch during [`evaluate`].
pub const EVAL_CHUNK: usize = 100;

/// Classifier verdict on one counterfactual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    /// Argmax of H on the counterfactual image.
    pub prediction: usize,
    /// The requested counter class.
    pub target: usize,
}

/// Additive metric carriers; shards merge by summing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTotals {
    pub n: usize,
    pub valid: usize,
    pub sum_l1: f64,
    pub sum_cycle: f64,
    pub sum_realism: f64,
    pub explain_seconds: f64,
}

impl EvalTotals {
    pub fn merge(&self, other: &Self) -> Self {
        Self {
            n: self.n + other.n,
            valid: self.valid + other.valid,
            sum_l1: self.sum_l1 + other.sum_l1,
            sum_cycle: self.sum_cycle + other.sum_cycle,
            sum_realism: self.sum_realism + other.sum_realism,
            explain_seconds: self.explain_seconds + other.explain_seconds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub validity_rate: f64,
    /// Mean over images and pixels of `|G(x, y^c)|`.
    pub mean_l1_perturbation: f64,
    /// Mean over images and pixels of `|clamp(x^c + G(x^c, y*)) - x|`.
    pub mean_cycle_error: f64,
    /// Mean discriminator real-probability on the counterfactual images.
    pub mean_realism: f64,
    /// Images per second of the explanation passes alone.
    pub ips: f64,
    pub totals: EvalTotals,
    pub outcomes: Vec<Outcome>,
}

impl EvalReport {
    pub fn from_totals(totals: EvalTotals, outcomes: Vec<Outcome>) -> Self {
        let n = totals.n.max(1) as f64;
        Self {
            n: totals.n,
            validity_rate: totals.valid as f64 / n,
            mean_l1_perturbation: totals.sum_l1 / n,
            mean_cycle_error: totals.sum_cycle / n,
            mean_realism: totals.sum_realism / n,
            ips: if totals.explain_seconds > 0.0 {
                totals.n as f64 / totals.explain_seconds
            } else {
                0.0
            },
            totals,
            outcomes,
        }
    }

    /// Combines reports over disjoint shards.
    pub fn merge(&self, other: &Self) -> Self {
        let mut outcomes = self.outcomes.clone();
        outcomes.extend_from_slice(&other.outcomes);
        Self::from_totals(self.totals.merge(&other.totals), outcomes)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A class other than `predicted`, uniform over the remaining `C - 1`.
pub fn sample_counter_class(rng: &mut ChaCha8Rng, predicted: usize, num_classes: usize) -> usize {
    (predicted + rng.gen_range(1..num_classes)) % num_classes
}

/// Explains every test image toward a seed-determined class other than the
/// classifier's prediction and accumulates the quality metrics.
pub fn evaluate<S: Scalar>(
    generator: &Generator<S>,
    discriminator: &Discriminator<S>,
    classifier: &Classifier<S>,
    test_set: &Dataset<S>,
    counter_sampling_seed: u64,
) -> Result<EvalReport> {
    if test_set.is_empty() {
        return Err(Error::Consistency("evaluation set is empty".into()));
    }
    let c = classifier.num_classes();
    if c < 2 {
        return Err(Error::Config(
            "counterfactuals need at least two classes".into(),
        ));
    }
    if discriminator.config().input_shape != generator.input_shape()
        || discriminator.config().num_classes != c
    {
        return Err(Error::Consistency(
            "discriminator does not match the generator's shape or classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(counter_sampling_seed);
    let mut totals = EvalTotals::default();
    let mut outcomes = Vec::with_capacity(test_set.len());
    let idx: Vec<usize> = (0..test_set.len()).collect();
    for part in idx.chunks(EVAL_CHUNK) {
        let (x, _) = test_set.batch(part);
        let explanations = explain_batch_by(generator, classifier, &x, |probs| {
            Ok((0..part.len())
                .map(|i| sample_counter_class(&mut rng, argmax(probs.row(i)), c))
                .collect())
        })?;
        totals.explain_seconds += explanations[0].latency_ms / 1e3;

        let items: Vec<&[S]> = explanations
            .iter()
            .map(|e| e.counterfactual_image.as_slice())
            .collect();
        let xc = Tensor::stack(&items, x.shape()[1..].as_ref())?;
        let back: Vec<usize> = explanations
            .iter()
            .map(|e| e.predicted_class.index())
            .collect();
        let g_back = generator.generate_perturbation(&xc, &back)?;
        let cycled = apply_perturbation(xc.data(), g_back.data());
        let (realism, _) = discriminator.discriminate(&xc)?;

        let per = x.len() / part.len();
        for (i, e) in explanations.iter().enumerate() {
            let prediction = argmax(&e.probs_after);
            let target = e.counter_class.index();
            outcomes.push(Outcome { prediction, target });
            totals.n += 1;
            totals.valid += usize::from(prediction == target);
            totals.sum_l1 += e.mean_abs_perturbation();
            totals.sum_cycle += cycled[i * per..(i + 1) * per]
                .iter()
                .zip(x.item(i))
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .sum::<f64>()
                / per as f64;
            totals.sum_realism += realism[i].as_f64();
        }
    }
    Ok(EvalReport::from_totals(totals, outcomes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub warmup_batches: usize,
    pub timed_batches: usize,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            warmup_batches: 2,
            timed_batches: 10,
            repetitions: 5,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.warmup_batches == 0
            || self.timed_batches == 0
            || self.repetitions == 0
        {
            return Err(Error::Config(format!(
                "every benchmark count must be at least 1: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub mean_ips: f64,
    pub stddev_ips: f64,
    /// IPS of each repetition.
    pub runs: Vec<f64>,
    pub config: BenchConfig,
}

/// A timed region must span this many ticks of the observed clock resolution.
const MIN_RESOLUTION_MULTIPLE: u32 = 1000;

/// Smallest non-zero step of the monotonic clock seen in a short probe.
fn timer_resolution() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..50 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Throughput of `explain_fn` over batches cut cyclically from `images`.
/// The closure receives each batch and the indices of its images. Warmup
/// batches run before every repetition and are not timed.
pub fn bench_ips<S: Scalar>(
    mut explain_fn: impl FnMut(&Tensor<S>, &[usize]) -> Result<()>,
    images: &Tensor<S>,
    config: &BenchConfig,
) -> Result<BenchResult> {
    config.validate()?;
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Consistency(
            "benchmark needs at least one image".into(),
        ));
    }
    let item_shape = &images.shape()[1..];
    let batch = |k: usize| -> Result<(Tensor<S>, Vec<usize>)> {
        let idx: Vec<usize> = (0..config.batch_size)
            .map(|j| (k * config.batch_size + j) % n)
            .collect();
        let items: Vec<&[S]> = idx.iter().map(|&i| images.item(i)).collect();
        Ok((Tensor::stack(&items, item_shape)?, idx))
    };
    let warmup = (0..config.warmup_batches)
        .map(batch)
        .collect::<Result<Vec<_>>>()?;
    let timed = (0..config.timed_batches)
        .map(|k| batch(k + config.warmup_batches))
        .collect::<Result<Vec<_>>>()?;
    let floor = timer_resolution() * MIN_RESOLUTION_MULTIPLE;

    let mut runs = Vec::with_capacity(config.repetitions);
    for _ in 0..config.repetitions {
        for (b, idx) in &warmup {
            explain_fn(b, idx)?;
        }
        let start = Instant::now();
        for (b, idx) in &timed {
            explain_fn(b, idx)?;
        }
        let elapsed = start.elapsed();
        if elapsed < floor {
            return Err(Error::Config(format!(
                "timed region of {elapsed:?} is too short for the clock (need at least {floor:?}); \
                 increase timed_batches or batch_size"
            )));
        }
        let images = (config.timed_batches * config.batch_size) as f64;
        runs.push(images / elapsed.as_secs_f64());
    }
    let mean = runs.iter().sum::<f64>() / runs.len() as f64;
    let stddev = if runs.len() > 1 {
        (runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (runs.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(BenchResult {
        mean_ips: mean,
        stddev_ips: stddev,
        runs,
        config: config.clone(),
    })
}

/// A probability model that can differentiate its outputs with respect to
/// the input, which is all the iterative baseline needs.
pub trait InputDifferentiable<S: Scalar> {
    type Trace;

    fn input_shape(&self) -> ImageShape;
    fn num_classes(&self) -> usize;
    fn probs_traced(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Self::Trace)>;
    /// Gradient with respect to `x` of `sum(dprobs ⊙ probs)`.
    fn input_gradient(&self, trace: &Self::Trace, dprobs: &Tensor<S>) -> Tensor<S>;
}

impl<S: Scalar> InputDifferentiable<S> for Classifier<S> {
    type Trace = ClassifierTrace<S>;

    fn input_shape(&self) -> ImageShape {
        Classifier::input_shape(self)
    }

    fn num_classes(&self) -> usize {
        Classifier::num_classes(self)
    }

    fn probs_traced(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Self::Trace)> {
        self.forward_traced(x)
    }

    fn input_gradient(&self, trace: &Self::Trace, dprobs: &Tensor<S>) -> Tensor<S> {
        Classifier::input_gradient(self, trace, dprobs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub step_size: f64,
    pub max_iters: usize,
    pub l1_weight: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            max_iters: 200,
            l1_weight: 0.1,
        }
    }
}

/// Halvings tried before a query is considered converged.
const MAX_BACKTRACKS: usize = 20;

/// One baseline explanation plus the objective after every accepted step
/// (the first entry is the starting point).
#[derive(Clone, Debug)]
pub struct BaselineRun<S> {
    pub explanation: Explanation<S>,
    pub objective: Vec<f64>,
}

struct Probe<S> {
    probs: Vec<S>,
    objective: f64,
}

fn objective<S: Scalar>(probs: &[S], target: usize, delta: &[S], l1_weight: f64) -> f64 {
    let l1 = delta.iter().map(|d| d.as_f64().abs()).sum::<f64>() / delta.len() as f64;
    clamped_ln(probs[target].as_f64()) - l1_weight * l1
}

/// Per-query gradient ascent on `log H(y^c | clamp(x + δ)) - λ·mean|δ|`,
/// run jointly over a batch. Steps that would lower an item's objective are
/// retried at half the step size, so every item's objective is monotone.
/// An item stops once H assigns it `y^c`, when no improving step is found,
/// or after `max_iters` gradient evaluations.
pub fn iterative_baseline_batch<S: Scalar, M: InputDifferentiable<S>>(
    model: &M,
    x: &Tensor<S>,
    counter_classes: &[usize],
    config: &BaselineConfig,
) -> Result<Vec<BaselineRun<S>>> {
    let shape = model.input_shape();
    let c = model.num_classes();
    if x.shape().len() != 4 || x.shape()[1..] != shape.chw() {
        return Err(Error::Shape(format!(
            "query batch {:?} does not match image shape {shape:?}",
            x.shape()
        )));
    }
    let n = x.shape()[0];
    if counter_classes.len() != n {
        return Err(Error::Shape(format!(
            "{} counter classes for a batch of {n}",
            counter_classes.len()
        )));
    }
    let counters = counter_classes
        .iter()
        .map(|&k| DomainLabel::new(k, c))
        .collect::<Result<Vec<_>>>()?;
    let per = shape.numel();
    let start = Instant::now();

    // d objective / d probs: only the target entry is non-zero.
    let dprobs_for = |probs: &Tensor<S>, rows: &[bool]| {
        let mut d = Tensor::zeros(probs.shape());
        for (i, &t) in counter_classes.iter().enumerate() {
            if rows[i] {
                d.data_mut()[i * c + t] = S::of(clamped_ln_grad(probs.row(i)[t].as_f64()));
            }
        }
        d
    };
    let non_finite = |what: &str| Error::NonFinite {
        step: 0,
        what: format!("baseline {what}"),
    };

    let mut delta = vec![S::zero(); n * per];
    let (probs0, trace) = model.probs_traced(x)?;
    let mut state: Vec<Probe<S>> = (0..n)
        .map(|i| Probe {
            probs: probs0.row(i).to_vec(),
            objective: objective(
                probs0.row(i),
                counter_classes[i],
                &delta[..per],
                config.l1_weight,
            ),
        })
        .collect();
    let mut active: Vec<bool> = (0..n)
        .map(|i| config.max_iters > 0 && argmax(probs0.row(i)) != counter_classes[i])
        .collect();
    let mut grad = if active.iter().any(|&a| a) {
        model.input_gradient(&trace, &dprobs_for(&probs0, &active))
    } else {
        Tensor::zeros(x.shape())
    };
    let mut iterations = vec![0usize; n];
    let mut objectives: Vec<Vec<f64>> = state.iter().map(|p| vec![p.objective]).collect();

    for _ in 0..config.max_iters {
        if !active.iter().any(|&a| a) {
            break;
        }
        if !grad.all_finite() {
            return Err(non_finite("gradient"));
        }
        // Ascent direction per item: masked H gradient minus the L1 subgradient.
        let mut direction = vec![S::zero(); n * per];
        for i in (0..n).filter(|&i| active[i]) {
            iterations[i] += 1;
            for p in i * per..(i + 1) * per {
                let inside = (x.data()[p] + delta[p]).abs() <= S::one();
                let g = if inside { grad.data()[p] } else { S::zero() };
                let sign = if delta[p] > S::zero() {
                    S::one()
                } else if delta[p] < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                };
                direction[p] = g - S::of(config.l1_weight / per as f64) * sign;
            }
        }
        let mut step = vec![config.step_size; n];
        let mut pending = active.clone();
        let mut accepted = vec![false; n];
        for _ in 0..=MAX_BACKTRACKS {
            if !pending.iter().any(|&p| p) {
                break;
            }
            let mut trial = delta.clone();
            for i in (0..n).filter(|&i| pending[i]) {
                for p in i * per..(i + 1) * per {
                    trial[p] = delta[p] + S::of(step[i]) * direction[p];
                }
            }
            let xt = Tensor::from_vec(x.shape(), apply_perturbation(x.data(), &trial))?;
            let (probs, trace) = model.probs_traced(&xt)?;
            if !probs.all_finite() {
                return Err(non_finite("probabilities"));
            }
            let mut newly = vec![false; n];
            for i in 0..n {
                if !pending[i] {
                    continue;
                }
                let d = &trial[i * per..(i + 1) * per];
                let obj = objective(probs.row(i), counter_classes[i], d, config.l1_weight);
                if obj >= state[i].objective {
                    delta[i * per..(i + 1) * per].copy_from_slice(d);
                    state[i] = Probe {
                        probs: probs.row(i).to_vec(),
                        objective: obj,
                    };
                    objectives[i].push(obj);
                    pending[i] = false;
                    newly[i] = true;
                } else {
                    step[i] *= 0.5;
                }
            }
            // Gradients for the items accepted in this round come from this trace.
            if newly.iter().any(|&a| a) {
                let g = model.input_gradient(&trace, &dprobs_for(&probs, &newly));
                for i in (0..n).filter(|&i| newly[i]) {
                    grad.item_mut(i).copy_from_slice(g.item(i));
                    accepted[i] = true;
                }
            }
        }
        for i in 0..n {
            if active[i] {
                active[i] = accepted[i] && argmax(&state[i].probs) != counter_classes[i];
            }
        }
    }

    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((0..n)
        .map(|i| {
            let d = delta[i * per..(i + 1) * per].to_vec();
            BaselineRun {
                explanation: Explanation {
                    query: x.item(i).to_vec(),
                    shape,
                    query_label: None,
                    predicted_class: DomainLabel::new(argmax(probs0.row(i)), c)
                        .expect("argmax is a valid class"),
                    counter_class: counters[i],
                    counterfactual_image: apply_perturbation(x.item(i), &d),
                    perturbation: d,
                    probs_before: probs0.row(i).to_vec(),
                    probs_after: state[i].probs.clone(),
                    latency_ms,
                    iterations: iterations[i],
                },
                objective: std::mem::take(&mut objectives[i]),
            }
        })
        .collect())
}

/// Single-query form of [`iterative_baseline_batch`].
pub fn iterative_baseline_explain<S: Scalar, M: InputDifferentiable<S>>(
    model: &M,
    query: &[S],
    counter_class: usize,
    config: &BaselineConfig,
) -> Result<Explanation<S>> {
    let shape = model.input_shape();
    if query.len() != shape.numel() {
        return Err(Error::Shape(format!(
            "query has {} values, the model expects {shape:?}",
            query.len()
        )));
    }
    let x = Tensor::from_vec(&shape.batch(1), query.to_vec())?;
    let mut runs = iterative_baseline_batch(model, &x, &[counter_class], config)?;
    Ok(runs.remove(0).explanation)
}
