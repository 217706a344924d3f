//! The explained classifier: a ResNet-18 adapted to small single-channel
//! images (3×3 stem, no stem pooling), trained with step-decayed SGD.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::datasets::{Dataset, DomainLabel, ImageShape};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, Activation, BatchNorm2d, CallCounter, Conv2d,
    ConvGeometry, ConvTrace, Gradients, Init, Linear, NormTrace, ParamStore, Sgd,
};
use crate::scalar::Scalar;
use crate::tensor::{argmax, softmax_rows, softmax_rows_backward, Tensor};

pub const ARCHITECTURE: &str = "resnet18-small-input";

const PROB_EPS: f64 = 1e-8;

fn kaiming(fan_in: usize) -> Init {
    Init::KaimingNormal { fan_in }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub input_shape: ImageShape,
    pub num_classes: usize,
    /// Channels of the first stage; stages use 1×, 2×, 4×, 8× this.
    pub base_width: usize,
}

impl ResNetConfig {
    pub fn new(input_shape: ImageShape, num_classes: usize) -> Self {
        Self {
            input_shape,
            num_classes,
            base_width: 64,
        }
    }

    pub fn with_width(mut self, base_width: usize) -> Self {
        self.base_width = base_width;
        self
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

#[derive(Clone, Debug)]
struct BlockTrace<S> {
    conv1: ConvTrace<S>,
    bn1: NormTrace<S>,
    relu1: Tensor<S>,
    conv2: ConvTrace<S>,
    bn2: NormTrace<S>,
    shortcut: Option<(ConvTrace<S>, NormTrace<S>)>,
    out: Tensor<S>,
}

impl BasicBlock {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv1 = Conv2d::new(
            store,
            &format!("{name}.conv1"),
            cin,
            cout,
            ConvGeometry::new(3, stride, 1),
            false,
            kaiming,
            rng,
        );
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), cout, rng);
        let conv2 = Conv2d::new(
            store,
            &format!("{name}.conv2"),
            cout,
            cout,
            ConvGeometry::new(3, 1, 1),
            false,
            kaiming,
            rng,
        );
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), cout, rng);
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(
                    store,
                    &format!("{name}.shortcut.conv"),
                    cin,
                    cout,
                    ConvGeometry::new(1, stride, 0),
                    false,
                    kaiming,
                    rng,
                ),
                BatchNorm2d::new(store, &format!("{name}.shortcut.bn"), cout, rng),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }

    fn forward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        x: &Tensor<S>,
        train: bool,
    ) -> (Tensor<S>, BlockTrace<S>) {
        let (h, conv1) = self.conv1.forward(p, x);
        let (h, bn1) = self.bn1.forward(p, &h, train);
        let relu1 = Activation::Relu.forward(&h);
        let (h, conv2) = self.conv2.forward(p, &relu1);
        let (mut h, bn2) = self.bn2.forward(p, &h, train);
        let shortcut = match &self.shortcut {
            Some((conv, bn)) => {
                let (s, ct) = conv.forward(p, x);
                let (s, bt) = bn.forward(p, &s, train);
                h.add_assign(&s).expect("shortcut shape");
                Some((ct, bt))
            }
            None => {
                h.add_assign(x).expect("identity shortcut shape");
                None
            }
        };
        let out = Activation::Relu.forward(&h);
        (
            out.clone(),
            BlockTrace {
                conv1,
                bn1,
                relu1,
                conv2,
                bn2,
                shortcut,
                out,
            },
        )
    }

    fn backward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        t: &BlockTrace<S>,
        dy: &Tensor<S>,
        mut grads: Option<&mut Gradients<S>>,
    ) -> Tensor<S> {
        let d = Activation::Relu.backward(&t.out, dy);
        let dh = self.bn2.backward(p, &t.bn2, &d, grads.as_deref_mut());
        let dh = self
            .conv2
            .backward(p, &t.conv2, &dh, grads.as_deref_mut(), true)
            .expect("input grad");
        let dh = Activation::Relu.backward(&t.relu1, &dh);
        let dh = self.bn1.backward(p, &t.bn1, &dh, grads.as_deref_mut());
        let mut dx = self
            .conv1
            .backward(p, &t.conv1, &dh, grads.as_deref_mut(), true)
            .expect("input grad");
        let dsc = match (&self.shortcut, &t.shortcut) {
            (Some((conv, bn)), Some((ct, bt))) => {
                let ds = bn.backward(p, bt, &d, grads.as_deref_mut());
                conv.backward(p, ct, &ds, grads, true).expect("input grad")
            }
            _ => d,
        };
        dx.add_assign(&dsc).expect("shortcut grad shape");
        dx
    }

    fn update_running_stats<S: Scalar>(&self, p: &mut ParamStore<S>, t: &BlockTrace<S>) {
        self.bn1.update_running_stats(p, &t.bn1);
        self.bn2.update_running_stats(p, &t.bn2);
        if let (Some((_, bn)), Some((_, bt))) = (&self.shortcut, &t.shortcut) {
            bn.update_running_stats(p, bt);
        }
    }
}

#[derive(Clone, Debug)]
struct ResNet18 {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<BasicBlock>,
    fc: Linear,
}

/// Everything a classifier backward pass needs from its forward pass.
#[derive(Clone, Debug)]
pub struct ClassifierTrace<S> {
    stem: ConvTrace<S>,
    stem_bn: NormTrace<S>,
    stem_out: Tensor<S>,
    blocks: Vec<BlockTrace<S>>,
    pooled_hw: (usize, usize),
    fc_input: Tensor<S>,
    probs: Tensor<S>,
}

impl ResNet18 {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        config: &ResNetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = config.base_width;
        let ch = config.input_shape.channels;
        let stem = Conv2d::new(
            store,
            "stem.conv",
            ch,
            w,
            ConvGeometry::new(3, 1, 1),
            false,
            kaiming,
            rng,
        );
        let stem_bn = BatchNorm2d::new(store, "stem.bn", w, rng);
        let mut blocks = Vec::with_capacity(8);
        let mut cin = w;
        for (stage, (mult, stride)) in [(1, 1), (2, 2), (4, 2), (8, 2)].into_iter().enumerate() {
            let cout = w * mult;
            blocks.push(BasicBlock::new(
                store,
                &format!("layer{}.0", stage + 1),
                cin,
                cout,
                stride,
                rng,
            ));
            blocks.push(BasicBlock::new(
                store,
                &format!("layer{}.1", stage + 1),
                cout,
                cout,
                1,
                rng,
            ));
            cin = cout;
        }
        let fc = Linear::new(store, "fc", cin, config.num_classes, rng);
        Self {
            stem,
            stem_bn,
            blocks,
            fc,
        }
    }

    fn forward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        x: &Tensor<S>,
        train: bool,
    ) -> (Tensor<S>, ClassifierTrace<S>) {
        let (h, stem) = self.stem.forward(p, x);
        let (h, stem_bn) = self.stem_bn.forward(p, &h, train);
        let stem_out = Activation::Relu.forward(&h);
        let mut h = stem_out.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, t) = b.forward(p, &h, train);
            blocks.push(t);
            h = out;
        }
        let (_, _, ph, pw) = h.dims4();
        let pooled = global_avg_pool(&h);
        let (logits, fc_input) = self.fc.forward(p, &pooled);
        let probs = softmax_rows(&logits);
        (
            logits,
            ClassifierTrace {
                stem,
                stem_bn,
                stem_out,
                blocks,
                pooled_hw: (ph, pw),
                fc_input,
                probs,
            },
        )
    }

    fn backward_logits<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        t: &ClassifierTrace<S>,
        dlogits: &Tensor<S>,
        mut grads: Option<&mut Gradients<S>>,
        input_grad: bool,
    ) -> Option<Tensor<S>> {
        let dpooled = self
            .fc
            .backward(p, &t.fc_input, dlogits, grads.as_deref_mut());
        let mut d = global_avg_pool_backward(&dpooled, t.pooled_hw.0, t.pooled_hw.1);
        for (b, bt) in self.blocks.iter().zip(&t.blocks).rev() {
            d = b.backward(p, bt, &d, grads.as_deref_mut());
        }
        let d = Activation::Relu.backward(&t.stem_out, &d);
        let d = self
            .stem_bn
            .backward(p, &t.stem_bn, &d, grads.as_deref_mut());
        self.stem.backward(p, &t.stem, &d, grads, input_grad)
    }

    fn update_running_stats<S: Scalar>(&self, p: &mut ParamStore<S>, t: &ClassifierTrace<S>) {
        self.stem_bn.update_running_stats(p, &t.stem_bn);
        for (b, bt) in self.blocks.iter().zip(&t.blocks) {
            b.update_running_stats(p, bt);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for TrainSchedule {
    /// 80 epochs from lr 0.1, ×0.1 at epochs 40 and 60, weight decay 1e-4.
    fn default() -> Self {
        Self {
            epochs: 80,
            base_lr: 0.1,
            decay_epochs: vec![40, 60],
            decay_factor: 0.1,
            weight_decay: 1e-4,
            momentum: 0.9,
            batch_size: 128,
        }
    }
}

impl TrainSchedule {
    /// The 10-epoch variant used for desk-scale runs.
    pub fn desk_scale() -> Self {
        Self {
            epochs: 10,
            decay_epochs: vec![6, 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.decay_factor > 0.0) {
            return Err(Error::Config(
                "learning rate and decay factor must be positive".into(),
            ));
        }
        let increasing = self.decay_epochs.windows(2).all(|w| w[0] < w[1]);
        let in_range = self.decay_epochs.iter().all(|&e| e < self.epochs);
        if !increasing || !in_range {
            return Err(Error::Config(format!(
                "decay epochs {:?} must be strictly increasing and below {}",
                self.decay_epochs, self.epochs
            )));
        }
        Ok(())
    }

    /// Learning rate in effect during (zero-based) `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.base_lr * self.decay_factor.powi(decays as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub schedule: TrainSchedule,
    pub seed: u64,
    pub metrics: ClassifierMetrics,
    pub epoch_log: Vec<ClassifierMetrics>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ClassifierExtra {
    config: ResNetConfig,
    training: Option<TrainingRecord>,
}

/// The classifier being explained. Immutable once trained: every inference
/// method takes `&self`.
#[derive(Clone, Debug)]
pub struct Classifier<S> {
    config: ResNetConfig,
    net: ResNet18,
    params: ParamStore<S>,
    calls: CallCounter,
    pub training: Option<TrainingRecord>,
}

impl<S: Scalar> Classifier<S> {
    pub fn new(config: ResNetConfig, seed: u64) -> Result<Self> {
        if config.num_classes < 2 || config.base_width == 0 {
            return Err(Error::Config(format!(
                "invalid classifier config {config:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = ResNet18::new(&mut params, &config, &mut rng);
        Ok(Self {
            config,
            net,
            params,
            calls: CallCounter::default(),
            training: None,
        })
    }

    pub fn config(&self) -> &ResNetConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn input_shape(&self) -> ImageShape {
        self.config.input_shape
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    /// Number of evaluation-mode forward passes run by this instance.
    pub fn forward_calls(&self) -> u64 {
        self.calls.get()
    }

    /// SHA-256 over all weights and running statistics.
    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        let s = self.config.input_shape;
        let shape = x.shape();
        if shape.len() != 4 || shape[1..] != s.chw() {
            return Err(Error::Shape(format!(
                "classifier expects [n, {}, {}, {}], got {shape:?}",
                s.channels, s.height, s.width
            )));
        }
        Ok(())
    }

    /// Logits in evaluation mode.
    pub fn logits(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x)?;
        self.calls.bump();
        Ok(self.net.forward(&self.params, x, false).0)
    }

    /// Softmax probabilities (temperature 1), one row per image.
    pub fn predict_proba(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    /// Argmax of [`predict_proba`](Self::predict_proba) for each image; ties
    /// resolve to the lowest class index.
    pub fn predict(&self, x: &Tensor<S>) -> Result<Vec<DomainLabel>> {
        let p = self.predict_proba(x)?;
        (0..x.shape()[0])
            .map(|r| DomainLabel::new(argmax(p.row(r)), self.config.num_classes))
            .collect()
    }

    /// Evaluation-mode forward that keeps what [`input_gradient`](Self::input_gradient)
    /// needs. Returns probabilities.
    pub fn forward_traced(&self, x: &Tensor<S>) -> Result<(Tensor<S>, ClassifierTrace<S>)> {
        self.check_input(x)?;
        self.calls.bump();
        let (_, trace) = self.net.forward(&self.params, x, false);
        Ok((trace.probs.clone(), trace))
    }

    /// Gradient of a scalar objective with respect to the input images,
    /// given its gradient `dprobs` with respect to the output probabilities.
    /// Parameters are left untouched.
    pub fn input_gradient(&self, trace: &ClassifierTrace<S>, dprobs: &Tensor<S>) -> Tensor<S> {
        let dlogits = softmax_rows_backward(&trace.probs, dprobs);
        self.net
            .backward_logits(&self.params, trace, &dlogits, None, true)
            .expect("input gradient requested")
    }

    /// Probabilities for a whole dataset, evaluated in chunks.
    pub fn predict_dataset(&self, data: &Dataset<S>, chunk: usize) -> Result<Tensor<S>> {
        let c = self.config.num_classes;
        let mut out = Vec::with_capacity(data.len() * c);
        let idx: Vec<usize> = (0..data.len()).collect();
        for part in idx.chunks(chunk.max(1)) {
            let (x, _) = data.batch(part);
            out.extend_from_slice(self.predict_proba(&x)?.data());
        }
        Tensor::from_vec(&[data.len(), c], out)
    }

    pub fn accuracy(&self, data: &Dataset<S>) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Config("accuracy of an empty dataset".into()));
        }
        let p = self.predict_dataset(data, 256)?;
        let correct = p
            .argmax_rows()
            .iter()
            .zip(data.examples())
            .filter(|(pred, e)| **pred == e.label.index())
            .count();
        Ok(correct as f64 / data.len() as f64)
    }

    /// One SGD step on mean cross-entropy. Returns `(loss, correct count)`.
    pub fn train_step(
        &mut self,
        opt: &mut Sgd<S>,
        x: &Tensor<S>,
        labels: &[usize],
        step: u64,
    ) -> Result<(f64, usize)> {
        self.check_input(x)?;
        let (_, trace) = self.net.forward(&self.params, x, true);
        let n = labels.len();
        let probs = &trace.probs;
        let mut loss = 0.0;
        let mut correct = 0;
        let mut dlogits = probs.clone();
        let inv_n = S::of(1.0 / n as f64);
        for (r, &y) in labels.iter().enumerate() {
            let row = probs.row(r);
            loss -= row[y].as_f64().max(PROB_EPS).ln();
            if argmax(row) == y {
                correct += 1;
            }
            let d = &mut dlogits.data_mut()
                [r * self.config.num_classes..(r + 1) * self.config.num_classes];
            d[y] = d[y] - S::one();
            d.iter_mut().for_each(|v| *v = *v * inv_n);
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "classifier cross-entropy".into(),
            });
        }
        let mut grads = Gradients::for_store(&self.params);
        self.net
            .backward_logits(&self.params, &trace, &dlogits, Some(&mut grads), false);
        if !grads.all_finite() {
            return Err(Error::NonFinite {
                step,
                what: "classifier gradients".into(),
            });
        }
        opt.step(&mut self.params, &grads);
        self.net.update_running_stats(&mut self.params, &trace);
        Ok((loss, correct))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let extra = serde_json::to_value(ClassifierExtra {
            config: self.config.clone(),
            training: self.training.clone(),
        })?;
        checkpoint::save(
            stem,
            ARCHITECTURE,
            self.config.input_shape,
            self.config.num_classes,
            &self.params,
            extra,
        )
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (manifest, tensors) = checkpoint::load::<S>(stem, ARCHITECTURE)?;
        let extra: ClassifierExtra = serde_json::from_value(manifest.extra)?;
        let mut model = Self::new(extra.config, 0)?;
        model.params.load_values(tensors)?;
        model.training = extra.training;
        Ok(model)
    }
}

/// Trains a fresh classifier. The test set, when given, is evaluated after
/// every epoch and its final accuracy stored in the training record.
pub fn train_classifier<S: Scalar>(
    train_set: &Dataset<S>,
    test_set: Option<&Dataset<S>>,
    config: ResNetConfig,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<Classifier<S>> {
    schedule.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut model = Classifier::new(config, seed)?;
    let mut opt = Sgd::new(
        &model.params,
        schedule.base_lr,
        schedule.momentum,
        schedule.weight_decay,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0u64;
    let mut epoch_log = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        opt.lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let started = std::time::Instant::now();
        for batch in order.chunks(schedule.batch_size) {
            let (x, labels) = train_set.batch(batch);
            let (loss, c) = model.train_step(&mut opt, &x, &labels, step)?;
            loss_sum += loss * batch.len() as f64;
            correct += c;
            seen += batch.len();
            step += 1;
        }
        let test_accuracy = test_set.map(|t| model.accuracy(t)).transpose()?;
        let metrics = ClassifierMetrics {
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            test_accuracy,
        };
        log::info!(
            "epoch {}/{} lr {:.4} loss {:.4} train acc {:.4} test acc {} ({:.0}s)",
            epoch + 1,
            schedule.epochs,
            opt.lr,
            metrics.train_loss,
            metrics.train_accuracy,
            metrics
                .test_accuracy
                .map_or("-".into(), |a| format!("{a:.4}")),
            started.elapsed().as_secs_f64()
        );
        epoch_log.push(metrics);
    }
    let metrics = epoch_log.last().cloned().unwrap_or(ClassifierMetrics {
        train_loss: f64::NAN,
        train_accuracy: 0.0,
        test_accuracy: None,
    });
    model.training = Some(TrainingRecord {
        schedule: schedule.clone(),
        seed,
        metrics,
        epoch_log,
    });
    Ok(model)
}
