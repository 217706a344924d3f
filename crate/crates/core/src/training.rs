//! Alternating discriminator/generator training against a frozen classifier.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cgan::{
    Discriminator, DiscriminatorConfig, DiscriminatorOutput, Generator, GeneratorConfig,
};
use crate::classifier::Classifier;
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::losses::{self, LossReport, LossTerms, LossWeights};
use crate::nn::{Adam, AdamConfig, Gradients};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which adversarial objective the discriminator's real/fake head is
/// trained with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdversarialMode {
    /// `log D(x) + log(1 - D(fake))` on sigmoid probabilities.
    Minimax,
    /// `D(x) - D(fake)` on raw scores, with discriminator weights clipped to
    /// `[-clip, clip]` after every update.
    Wasserstein { clip: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Free-form dataset identifier recorded with the checkpoints.
    pub dataset: String,
    pub weights: LossWeights,
    pub generator_optimizer: AdamConfig,
    pub discriminator_optimizer: AdamConfig,
    pub adversarial: AdversarialMode,
    /// Discriminator updates per generator update.
    pub d_steps_per_g: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Train on the first `n` examples of the training set only.
    pub train_subset: Option<usize>,
    pub seed: u64,
    /// Write checkpoints every this many generator steps (0 disables).
    pub checkpoint_every: u64,
    pub generator_width: usize,
    pub residual_blocks: usize,
    pub discriminator_width: usize,
    pub zero_init_output: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: "mnist".into(),
            weights: LossWeights::default(),
            generator_optimizer: AdamConfig::default(),
            discriminator_optimizer: AdamConfig::default(),
            adversarial: AdversarialMode::Minimax,
            d_steps_per_g: 1,
            epochs: 20,
            batch_size: 32,
            train_subset: None,
            seed: 0,
            checkpoint_every: 0,
            generator_width: 16,
            residual_blocks: 6,
            discriminator_width: 32,
            zero_init_output: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.d_steps_per_g == 0 {
            return Err(Error::Config(
                "batch_size and d_steps_per_g must be at least 1".into(),
            ));
        }
        if let AdversarialMode::Wasserstein { clip } = self.adversarial {
            if !(clip > 0.0 && clip.is_finite()) {
                return Err(Error::Config(format!(
                    "weight clip must be positive, got {clip}"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn generator_config(
        &self,
        classifier_shape: crate::datasets::ImageShape,
        num_classes: usize,
    ) -> GeneratorConfig {
        let mut g =
            GeneratorConfig::new(classifier_shape, num_classes).with_width(self.generator_width);
        g.residual_blocks = self.residual_blocks;
        g.zero_init_output = self.zero_init_output;
        g
    }

    pub fn discriminator_config(
        &self,
        classifier_shape: crate::datasets::ImageShape,
        num_classes: usize,
    ) -> DiscriminatorConfig {
        DiscriminatorConfig::new(classifier_shape, num_classes).with_width(self.discriminator_width)
    }
}

/// Mutable training state. The classifier is borrowed immutably, so it
/// cannot change while the state exists.
pub struct TrainState<'h, S> {
    pub generator: Generator<S>,
    pub discriminator: Discriminator<S>,
    pub classifier: &'h Classifier<S>,
    pub config: TrainConfig,
    opt_g: Adam<S>,
    opt_d: Adam<S>,
    step: u64,
    rng: ChaCha8Rng,
}

/// Samples a class other than `y` uniformly.
fn other_class(rng: &mut ChaCha8Rng, y: usize, num_classes: usize) -> usize {
    let r = rng.gen_range(0..num_classes - 1);
    if r >= y {
        r + 1
    } else {
        r
    }
}

fn dlogits_from_dprob<S: Scalar>(dprob: &[S], prob: &[S]) -> Vec<S> {
    dprob
        .iter()
        .zip(prob)
        .map(|(&d, &p)| d * p * (S::one() - p))
        .collect()
}

impl<'h, S: Scalar> TrainState<'h, S> {
    pub fn new(config: TrainConfig, classifier: &'h Classifier<S>) -> Result<Self> {
        config.validate()?;
        let shape = classifier.input_shape();
        let c = classifier.num_classes();
        let generator = Generator::new(config.generator_config(shape, c), config.seed)?;
        let discriminator = Discriminator::new(
            config.discriminator_config(shape, c),
            config.seed.wrapping_add(1),
        )?;
        Ok(Self::from_models(
            config,
            classifier,
            generator,
            discriminator,
        ))
    }

    /// Starts from existing models, with fresh optimizer state.
    pub fn from_models(
        config: TrainConfig,
        classifier: &'h Classifier<S>,
        generator: Generator<S>,
        discriminator: Discriminator<S>,
    ) -> Self {
        let opt_g = Adam::new(generator.params(), config.generator_optimizer);
        let opt_d = Adam::new(discriminator.params(), config.discriminator_optimizer);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6a09_e667);
        Self {
            generator,
            discriminator,
            classifier,
            config,
            opt_g,
            opt_d,
            step: 0,
            rng,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Checks model compatibility with the classifier.
    fn check_models(&self) -> Result<()> {
        let (h, g, d) = (self.classifier, &self.generator, &self.discriminator);
        if g.num_classes() != h.num_classes()
            || d.config().num_classes != h.num_classes()
            || g.input_shape() != h.input_shape()
            || d.config().input_shape != h.input_shape()
        {
            return Err(Error::Consistency(
                "generator, discriminator and classifier disagree on classes or input shape".into(),
            ));
        }
        Ok(())
    }

    fn adversarial(
        &self,
        real: &DiscriminatorOutput<S>,
        fake: &DiscriminatorOutput<S>,
    ) -> Result<f64> {
        match self.config.adversarial {
            AdversarialMode::Minimax => losses::adversarial_loss(&real.real_prob, &fake.real_prob),
            AdversarialMode::Wasserstein { .. } => {
                losses::wasserstein_loss(&real.logits, &fake.logits)
            }
        }
    }

    /// Gradients of the adversarial term with respect to the real and fake
    /// logits.
    fn adversarial_dlogits(
        &self,
        real: &DiscriminatorOutput<S>,
        fake: &DiscriminatorOutput<S>,
    ) -> (Vec<S>, Vec<S>) {
        match self.config.adversarial {
            AdversarialMode::Minimax => {
                let (gr, gf) = losses::adversarial_grad(&real.real_prob, &fake.real_prob);
                (
                    dlogits_from_dprob(&gr, &real.real_prob),
                    dlogits_from_dprob(&gf, &fake.real_prob),
                )
            }
            AdversarialMode::Wasserstein { .. } => {
                losses::wasserstein_grad(&real.logits, &fake.logits)
            }
        }
    }

    fn diverged(&self, report: LossReport) -> Error {
        Error::Diverged {
            report: Box::new(report),
        }
    }

    /// One discriminator update (repeated `d_steps_per_g` times) followed by
    /// one generator update on a batch of real images with labels `y`.
    pub fn train_step(&mut self, x: &Tensor<S>, labels: &[usize]) -> Result<LossReport> {
        self.check_models()?;
        let n = labels.len();
        let c = self.classifier.num_classes();
        if x.shape().first() != Some(&n) || n == 0 {
            return Err(Error::Shape(format!(
                "batch of {:?} with {n} labels",
                x.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label {
                index: bad,
                num_classes: c,
            });
        }
        let w = self.config.weights;
        let targets: Vec<usize> = labels
            .iter()
            .map(|&y| other_class(&mut self.rng, y, c))
            .collect();
        let mut report = LossReport {
            step: self.step,
            ..Default::default()
        };

        let (g1, trace_g1) = self.generator.forward_traced(x, &targets)?;
        let raw = x.add(&g1)?;
        let fake = raw.clamp(-S::one(), S::one());

        // Discriminator update(s). The generator is unchanged during them, so
        // its forward pass above is reused.
        for _ in 0..self.config.d_steps_per_g {
            let d = &self.discriminator;
            let (real_out, real_trace) = d.forward_traced(x)?;
            let (fake_out, fake_trace) = d.forward_traced(&fake)?;
            report.adv = self.adversarial(&real_out, &fake_out)?;
            report.cls_real = losses::domain_cls_loss(&real_out.domain_probs, labels)?;
            report.total_d = -report.adv + w.lambda_cls * report.cls_real;
            if !report.total_d.is_finite() {
                return Err(self.diverged(report));
            }
            // L_D = -adv + λ_cls·cls_real
            let (dr, df) = self.adversarial_dlogits(&real_out, &fake_out);
            let neg = |v: Vec<S>| -> Vec<S> { v.into_iter().map(|g| -g).collect() };
            let dcls =
                losses::domain_cls_grad(&real_out.domain_probs, labels).scale(S::of(w.lambda_cls));
            let mut grads = Gradients::for_store(d.params());
            d.backward(&real_trace, &neg(dr), &dcls, Some(&mut grads), false);
            let zero_dom = Tensor::zeros(&[n, c]);
            d.backward(&fake_trace, &neg(df), &zero_dom, Some(&mut grads), false);
            if !grads.all_finite() {
                return Err(self.diverged(report));
            }
            self.opt_d.step(self.discriminator.params_mut(), &grads);
            if let AdversarialMode::Wasserstein { clip } = self.config.adversarial {
                let clip = S::of(clip);
                let params = self.discriminator.params_mut();
                for id in params.trainable_ids().collect::<Vec<_>>() {
                    params
                        .get_mut(id)
                        .data_mut()
                        .iter_mut()
                        .for_each(|v| *v = v.max(-clip).min(clip));
                }
            }
        }

        // Generator update against the updated discriminator.
        let d = &self.discriminator;
        let g = &self.generator;
        let (real_out, _) = d.forward_traced(x)?;
        let (fake_out, fake_trace) = d.forward_traced(&fake)?;
        report.adv_g = self.adversarial(&real_out, &fake_out)?;
        report.cls_fake = losses::domain_cls_loss(&fake_out.domain_probs, &targets)?;
        let (h_probs, h_trace) = self.classifier.forward_traced(&fake)?;
        report.exp = losses::explanation_loss(&h_probs, &targets)?;
        let (g2, trace_g2) = g.forward_traced(&fake, labels)?;
        report.rec = losses::reconstruction_loss(x, &g1, &g2)?;
        report.per = losses::perturbation_loss(&g1, &g2)?;
        let terms = LossTerms {
            adv: report.adv_g,
            cls_real: report.cls_real,
            cls_fake: report.cls_fake,
            rec: report.rec,
            exp: report.exp,
            per: report.per,
        };
        report.total_g = losses::total_losses(&terms, &w).1;
        if !report.is_finite() {
            return Err(self.diverged(report));
        }

        let (_, df) = self.adversarial_dlogits(&real_out, &fake_out);
        let df: Vec<S> = df.into_iter().map(|v| v * S::of(w.lambda_adv)).collect();
        let dcls =
            losses::domain_cls_grad(&fake_out.domain_probs, &targets).scale(S::of(w.lambda_cls));
        let mut dfake = d
            .backward(&fake_trace, &df, &dcls, None, true)
            .expect("input grad");
        let dexp = losses::explanation_grad(&h_probs, &targets).scale(S::of(w.lambda_exp));
        dfake.add_assign(&self.classifier.input_gradient(&h_trace, &dexp))?;

        let drec = losses::reconstruction_grad(&g1, &g2).scale(S::of(w.lambda_rec));
        let dg2 = drec.add(&losses::perturbation_grad(&g2).scale(S::of(w.lambda_per)))?;
        let mut grads = Gradients::for_store(g.params());
        let dcycle = g
            .backward(&trace_g2, &dg2, Some(&mut grads), true)
            .expect("input grad");
        dfake.add_assign(&dcycle)?;

        // Through the clamp: identity inside [-1, 1], zero outside.
        let one = S::one();
        let mut dg1 = dfake.zip_map(
            &raw,
            |d, v| if v >= -one && v <= one { d } else { S::zero() },
        )?;
        dg1.add_assign(&drec)?;
        dg1.add_assign(&losses::perturbation_grad(&g1).scale(S::of(w.lambda_per)))?;
        g.backward(&trace_g1, &dg1, Some(&mut grads), false);
        if !grads.all_finite() {
            return Err(self.diverged(report));
        }
        self.opt_g.step(self.generator.params_mut(), &grads);
        self.step += 1;
        Ok(report)
    }
}

/// Where and how often [`train`] writes its outputs.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Directory for periodic and final checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Newline-delimited JSON log, one [`LossReport`] per line.
    pub log_path: Option<PathBuf>,
}

/// What [`train`] returns.
pub struct TrainResult<S> {
    pub generator: Generator<S>,
    pub discriminator: Discriminator<S>,
    pub log: Vec<LossReport>,
}

/// Settings stored inside the generator checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GanTrainingRecord {
    pub config: TrainConfig,
    pub steps: u64,
    pub final_report: Option<LossReport>,
}

fn write_checkpoints<S: Scalar>(
    dir: &Path,
    tag: &str,
    state: &TrainState<'_, S>,
    last: Option<LossReport>,
) -> Result<()> {
    let mut g = state.generator.clone();
    g.training = Some(serde_json::to_value(GanTrainingRecord {
        config: state.config.clone(),
        steps: state.step,
        final_report: last,
    })?);
    g.save(&dir.join(format!("generator{tag}")))?;
    state
        .discriminator
        .save(&dir.join(format!("discriminator{tag}")))
}

/// Trains a generator/discriminator pair against `classifier`, which is
/// never modified.
pub fn train<S: Scalar>(
    config: &TrainConfig,
    train_set: &Dataset<S>,
    classifier: &Classifier<S>,
    outputs: &TrainOutputs,
) -> Result<TrainResult<S>> {
    let mut state = TrainState::new(config.clone(), classifier)?;
    if train_set.descriptor.num_classes != classifier.num_classes()
        || train_set.descriptor.image_shape != classifier.input_shape()
    {
        return Err(Error::Consistency(format!(
            "dataset {} does not match the classifier's classes or input shape",
            train_set.descriptor.name
        )));
    }
    let mut log_file = outputs
        .log_path
        .as_ref()
        .map(|p| {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            File::create(p)
                .map(BufWriter::new)
                .map_err(|e| Error::io(p, e))
        })
        .transpose()?;
    let n = config
        .train_subset
        .map_or(train_set.len(), |k| k.min(train_set.len()));
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut log = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let started = std::time::Instant::now();
        for batch in order.chunks(config.batch_size) {
            let (x, labels) = train_set.batch(batch);
            let report = state.train_step(&x, &labels)?;
            if let Some(f) = log_file.as_mut() {
                let line = serde_json::to_string(&report)?;
                let path = outputs.log_path.as_deref().unwrap_or(Path::new(""));
                writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
            }
            log.push(report);
            if let Some(dir) = &outputs.checkpoint_dir {
                if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                    write_checkpoints(dir, &format!("-step{}", state.step), &state, Some(report))?;
                }
            }
        }
        if let Some(r) = log.last() {
            log::info!(
                "epoch {}/{} step {} adv {:.3} cls_r {:.3} cls_f {:.3} rec {:.3} exp {:.3} per {:.3} ({:.0}s)",
                epoch + 1,
                config.epochs,
                state.step,
                r.adv,
                r.cls_real,
                r.cls_fake,
                r.rec,
                r.exp,
                r.per,
                started.elapsed().as_secs_f64()
            );
        }
    }
    if let Some(f) = log_file.as_mut() {
        let path = outputs.log_path.as_deref().unwrap_or(Path::new(""));
        f.flush().map_err(|e| Error::io(path, e))?;
    }
    let record = GanTrainingRecord {
        config: config.clone(),
        steps: state.step,
        final_report: log.last().copied(),
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        write_checkpoints(dir, "", &state, record.final_report)?;
    }
    let mut generator = state.generator;
    generator.training = Some(serde_json::to_value(record)?);
    Ok(TrainResult {
        generator,
        discriminator: state.discriminator,
        log,
    })
}
