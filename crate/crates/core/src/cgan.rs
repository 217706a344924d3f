//! The conditional GAN pair: a residual generator `G(x, y^c)` that outputs a
//! perturbation, and a two-headed discriminator scoring realism and domain.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::datasets::{DomainLabel, ImageShape};
use crate::error::{Error, Result};
use crate::nn::{
    Activation, CallCounter, ConditionedConv2d, ConditionedTrace, Conv2d, ConvGeometry, ConvTrace,
    ConvTranspose2d, Gradients, Init, InstanceNorm2d, NormTrace, ParamStore,
};
use crate::scalar::Scalar;
use crate::tensor::{sigmoid, softmax_rows, softmax_rows_backward, Tensor};

pub const GENERATOR_ARCHITECTURE: &str = "frace-residual-generator";
pub const DISCRIMINATOR_ARCHITECTURE: &str = "frace-two-head-discriminator";

fn fan_in_uniform(fan_in: usize) -> Init {
    Init::FanInUniform { fan_in }
}

/// Validates raw class indices against `num_classes`.
pub fn domain_labels(indices: &[usize], num_classes: usize) -> Result<Vec<DomainLabel>> {
    indices
        .iter()
        .map(|&i| DomainLabel::new(i, num_classes))
        .collect()
}

/// One-hot labels broadcast to `C` constant planes of `height × width`,
/// shaped `[n, C, height, width]`.
pub fn condition_labels<S: Scalar>(
    labels: &[DomainLabel],
    height: usize,
    width: usize,
) -> Tensor<S> {
    let c = labels.first().map_or(0, |l| l.num_classes());
    let plane = height * width;
    let mut t = Tensor::zeros(&[labels.len(), c, height, width]);
    for (i, l) in labels.iter().enumerate() {
        let idx = l.index();
        t.item_mut(i)[idx * plane..(idx + 1) * plane].fill(S::one());
    }
    t
}

fn check_images<S: Scalar>(what: &str, shape: ImageShape, x: &Tensor<S>) -> Result<()> {
    let got = x.shape();
    if got.len() != 4 || got[1..] != shape.chw() {
        return Err(Error::Shape(format!(
            "{what} expects [n, {}, {}, {}], got {got:?}",
            shape.channels, shape.height, shape.width
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub input_shape: ImageShape,
    pub num_classes: usize,
    /// Channels after the stem; the two downsampling stages double it twice.
    pub base_width: usize,
    pub residual_blocks: usize,
    /// Output head is `output_scale · tanh`, so perturbations lie in
    /// `[-output_scale, output_scale]`.
    pub output_scale: f64,
    /// Start from the identity transform (all-zero perturbation).
    #[serde(default)]
    pub zero_init_output: bool,
}

impl GeneratorConfig {
    pub fn new(input_shape: ImageShape, num_classes: usize) -> Self {
        Self {
            input_shape,
            num_classes,
            base_width: 64,
            residual_blocks: 6,
            output_scale: 2.0,
            zero_init_output: false,
        }
    }

    pub fn with_width(mut self, base_width: usize) -> Self {
        self.base_width = base_width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.input_shape;
        if self.num_classes < 2 || self.base_width == 0 || self.output_scale <= 0.0 {
            return Err(Error::Config(format!("invalid generator config {self:?}")));
        }
        if !s.height.is_multiple_of(4) || !s.width.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "generator needs height and width divisible by 4, got {}x{}",
                s.height, s.width
            )));
        }
        Ok(())
    }
}

/// Conv (or transposed conv) followed by instance norm and ReLU.
#[derive(Clone, Debug)]
enum Stage {
    Conv(Conv2d, InstanceNorm2d),
    Transposed(ConvTranspose2d, InstanceNorm2d),
}

#[derive(Clone, Debug)]
struct StageTrace<S> {
    conv: ConvTrace<S>,
    norm: NormTrace<S>,
    out: Tensor<S>,
}

impl Stage {
    fn forward<S: Scalar>(&self, p: &ParamStore<S>, x: &Tensor<S>) -> (Tensor<S>, StageTrace<S>) {
        let ((h, conv), norm) = match self {
            Stage::Conv(c, n) => (c.forward(p, x), n),
            Stage::Transposed(c, n) => (c.forward(p, x), n),
        };
        let (h, norm_t) = norm.forward(p, &h);
        let out = Activation::Relu.forward(&h);
        (
            out.clone(),
            StageTrace {
                conv,
                norm: norm_t,
                out,
            },
        )
    }

    fn backward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        t: &StageTrace<S>,
        dy: &Tensor<S>,
        mut grads: Option<&mut Gradients<S>>,
        input_grad: bool,
    ) -> Option<Tensor<S>> {
        let d = Activation::Relu.backward(&t.out, dy);
        match self {
            Stage::Conv(c, n) => {
                let d = n.backward(p, &t.norm, &d, grads.as_deref_mut());
                c.backward(p, &t.conv, &d, grads, input_grad)
            }
            Stage::Transposed(c, n) => {
                let d = n.backward(p, &t.norm, &d, grads.as_deref_mut());
                c.backward(p, &t.conv, &d, grads, input_grad)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: Conv2d,
    norm1: InstanceNorm2d,
    conv2: Conv2d,
    norm2: InstanceNorm2d,
}

#[derive(Clone, Debug)]
struct ResidualTrace<S> {
    conv1: ConvTrace<S>,
    norm1: NormTrace<S>,
    relu: Tensor<S>,
    conv2: ConvTrace<S>,
    norm2: NormTrace<S>,
}

impl ResidualBlock {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        ch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let g = ConvGeometry::new(3, 1, 1);
        Self {
            conv1: Conv2d::new(
                store,
                &format!("{name}.conv1"),
                ch,
                ch,
                g,
                false,
                fan_in_uniform,
                rng,
            ),
            norm1: InstanceNorm2d::new(store, &format!("{name}.norm1"), ch, rng),
            conv2: Conv2d::new(
                store,
                &format!("{name}.conv2"),
                ch,
                ch,
                g,
                false,
                fan_in_uniform,
                rng,
            ),
            norm2: InstanceNorm2d::new(store, &format!("{name}.norm2"), ch, rng),
        }
    }

    fn forward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        x: &Tensor<S>,
    ) -> (Tensor<S>, ResidualTrace<S>) {
        let (h, conv1) = self.conv1.forward(p, x);
        let (h, norm1) = self.norm1.forward(p, &h);
        let relu = Activation::Relu.forward(&h);
        let (h, conv2) = self.conv2.forward(p, &relu);
        let (mut h, norm2) = self.norm2.forward(p, &h);
        h.add_assign(x).expect("residual shape");
        (
            h,
            ResidualTrace {
                conv1,
                norm1,
                relu,
                conv2,
                norm2,
            },
        )
    }

    fn backward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        t: &ResidualTrace<S>,
        dy: &Tensor<S>,
        mut grads: Option<&mut Gradients<S>>,
    ) -> Tensor<S> {
        let d = self.norm2.backward(p, &t.norm2, dy, grads.as_deref_mut());
        let d = self
            .conv2
            .backward(p, &t.conv2, &d, grads.as_deref_mut(), true)
            .expect("input grad");
        let d = Activation::Relu.backward(&t.relu, &d);
        let d = self.norm1.backward(p, &t.norm1, &d, grads.as_deref_mut());
        let mut dx = self
            .conv1
            .backward(p, &t.conv1, &d, grads, true)
            .expect("input grad");
        dx.add_assign(dy).expect("residual grad shape");
        dx
    }
}

/// Everything a generator backward pass needs from one application of `G`.
#[derive(Clone, Debug)]
pub struct GeneratorTrace<S> {
    stem: (ConditionedTrace<S>, NormTrace<S>, Tensor<S>),
    down: Vec<StageTrace<S>>,
    blocks: Vec<ResidualTrace<S>>,
    up: Vec<StageTrace<S>>,
    head: ConvTrace<S>,
    out: Tensor<S>,
}

/// The residual generator. `x + G(x, y^c)` is the counterfactual before
/// clamping.
#[derive(Clone, Debug)]
pub struct Generator<S> {
    config: GeneratorConfig,
    /// Convolution over the image and its label planes, then norm and ReLU.
    stem: (ConditionedConv2d, InstanceNorm2d),
    down: Vec<Stage>,
    blocks: Vec<ResidualBlock>,
    up: Vec<Stage>,
    head: Conv2d,
    params: ParamStore<S>,
    calls: CallCounter,
    /// Training settings recorded with the checkpoint.
    pub training: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct GeneratorExtra {
    config: GeneratorConfig,
    training: Option<serde_json::Value>,
}

impl<S: Scalar> Generator<S> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let w = config.base_width;
        let ch = config.input_shape.channels;
        let stem = (
            ConditionedConv2d::new(
                &mut p,
                "stem.conv",
                ch,
                config.num_classes,
                w,
                ConvGeometry::new(7, 1, 3),
                false,
                fan_in_uniform,
                &mut rng,
            ),
            InstanceNorm2d::new(&mut p, "stem.norm", w, &mut rng),
        );
        let sample = ConvGeometry::new(4, 2, 1);
        let down = (0..2)
            .map(|i| {
                let (cin, cout) = (w << i, w << (i + 1));
                Stage::Conv(
                    Conv2d::new(
                        &mut p,
                        &format!("down{i}.conv"),
                        cin,
                        cout,
                        sample,
                        false,
                        fan_in_uniform,
                        &mut rng,
                    ),
                    InstanceNorm2d::new(&mut p, &format!("down{i}.norm"), cout, &mut rng),
                )
            })
            .collect();
        let blocks = (0..config.residual_blocks)
            .map(|i| ResidualBlock::new(&mut p, &format!("res{i}"), 4 * w, &mut rng))
            .collect();
        let up = (0..2)
            .map(|i| {
                let (cin, cout) = (w << (2 - i), w << (1 - i));
                Stage::Transposed(
                    ConvTranspose2d::new(
                        &mut p,
                        &format!("up{i}.conv"),
                        cin,
                        cout,
                        sample,
                        false,
                        &mut rng,
                    ),
                    InstanceNorm2d::new(&mut p, &format!("up{i}.norm"), cout, &mut rng),
                )
            })
            .collect();
        let head = Conv2d::new(
            &mut p,
            "head.conv",
            w,
            ch,
            ConvGeometry::new(7, 1, 3),
            true,
            fan_in_uniform,
            &mut rng,
        );
        let mut g = Self {
            config,
            stem,
            down,
            blocks,
            up,
            head,
            params: p,
            calls: CallCounter::default(),
            training: None,
        };
        if g.config.zero_init_output {
            g.zero_output_layer();
        }
        Ok(g)
    }

    /// Zeroes the output convolution so every perturbation is exactly zero.
    pub fn zero_output_layer(&mut self) {
        let ids = [Some(self.head.weight_id()), self.head.bias_id()];
        for id in ids.into_iter().flatten() {
            self.params.get_mut(id).data_mut().fill(S::zero());
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
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

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Number of forward passes run since this instance was created.
    pub fn forward_calls(&self) -> u64 {
        self.calls.get()
    }

    fn check_inputs(&self, x: &Tensor<S>, targets: &[usize]) -> Result<Vec<DomainLabel>> {
        check_images("generator", self.config.input_shape, x)?;
        if targets.len() != x.shape()[0] {
            return Err(Error::Shape(format!(
                "{} target labels for a batch of {}",
                targets.len(),
                x.shape()[0]
            )));
        }
        domain_labels(targets, self.config.num_classes)
    }

    /// The generator's logical input: image channels followed by the `C`
    /// conditioning planes. The forward pass computes the same convolution
    /// without materializing the planes.
    pub fn build_input(&self, x: &Tensor<S>, targets: &[usize]) -> Result<Tensor<S>> {
        let labels = self.check_inputs(x, targets)?;
        let s = self.config.input_shape;
        x.concat_channels(&condition_labels(&labels, s.height, s.width))
    }

    /// `G(x, y^c)` with the trace needed for [`backward`](Self::backward).
    pub fn forward_traced(
        &self,
        x: &Tensor<S>,
        targets: &[usize],
    ) -> Result<(Tensor<S>, GeneratorTrace<S>)> {
        self.check_inputs(x, targets)?;
        self.calls.bump();
        let p = &self.params;
        let (h, stem_conv) = self.stem.0.forward(p, x, targets);
        let (h, stem_norm) = self.stem.1.forward(p, &h);
        let mut h = Activation::Relu.forward(&h);
        let stem = (stem_conv, stem_norm, h.clone());
        let mut down = Vec::with_capacity(self.down.len());
        for s in &self.down {
            let (o, t) = s.forward(p, &h);
            down.push(t);
            h = o;
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (o, t) = b.forward(p, &h);
            blocks.push(t);
            h = o;
        }
        let mut up = Vec::with_capacity(self.up.len());
        for s in &self.up {
            let (o, t) = s.forward(p, &h);
            up.push(t);
            h = o;
        }
        let (h, head) = self.head.forward(p, &h);
        let out = Activation::ScaledTanh(self.config.output_scale).forward(&h);
        Ok((
            out.clone(),
            GeneratorTrace {
                stem,
                down,
                blocks,
                up,
                head,
                out,
            },
        ))
    }

    /// The perturbation `G(x, y^c)`, same shape as `x`.
    pub fn generate_perturbation(&self, x: &Tensor<S>, targets: &[usize]) -> Result<Tensor<S>> {
        Ok(self.forward_traced(x, targets)?.0)
    }

    /// Backpropagates `dout` (gradient with respect to the perturbation).
    /// Parameter gradients accumulate into `grads` when given; the returned
    /// tensor, when `input_grad` is set, is the gradient with respect to the
    /// image channels only.
    pub fn backward(
        &self,
        trace: &GeneratorTrace<S>,
        dout: &Tensor<S>,
        mut grads: Option<&mut Gradients<S>>,
        input_grad: bool,
    ) -> Option<Tensor<S>> {
        let p = &self.params;
        let d = Activation::ScaledTanh(self.config.output_scale).backward(&trace.out, dout);
        let mut d = self
            .head
            .backward(p, &trace.head, &d, grads.as_deref_mut(), true)
            .expect("input grad");
        for (s, t) in self.up.iter().zip(&trace.up).rev() {
            d = s
                .backward(p, t, &d, grads.as_deref_mut(), true)
                .expect("input grad");
        }
        for (b, t) in self.blocks.iter().zip(&trace.blocks).rev() {
            d = b.backward(p, t, &d, grads.as_deref_mut());
        }
        for (s, t) in self.down.iter().zip(&trace.down).rev() {
            d = s
                .backward(p, t, &d, grads.as_deref_mut(), true)
                .expect("input grad");
        }
        let (conv_t, norm_t, out) = &trace.stem;
        let d = Activation::Relu.backward(out, &d);
        let d = self.stem.1.backward(p, norm_t, &d, grads.as_deref_mut());
        self.stem.0.backward(p, conv_t, &d, grads, input_grad)
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let extra = serde_json::to_value(GeneratorExtra {
            config: self.config.clone(),
            training: self.training.clone(),
        })?;
        checkpoint::save(
            stem,
            GENERATOR_ARCHITECTURE,
            self.config.input_shape,
            self.config.num_classes,
            &self.params,
            extra,
        )
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (manifest, tensors) = checkpoint::load::<S>(stem, GENERATOR_ARCHITECTURE)?;
        let extra: GeneratorExtra = serde_json::from_value(manifest.extra)?;
        let mut model = Self::new(extra.config, 0)?;
        model.params.load_values(tensors)?;
        model.training = extra.training;
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub input_shape: ImageShape,
    pub num_classes: usize,
    pub base_width: usize,
    /// Number of stride-2 convolutions; widths double after the first.
    pub downsamplings: usize,
    pub leaky_slope: f64,
}

impl DiscriminatorConfig {
    pub fn new(input_shape: ImageShape, num_classes: usize) -> Self {
        Self {
            input_shape,
            num_classes,
            base_width: 64,
            downsamplings: 3,
            leaky_slope: 0.01,
        }
    }

    pub fn with_width(mut self, base_width: usize) -> Self {
        self.base_width = base_width;
        self
    }

    /// Spatial size `(h, w)` of the feature map the heads see.
    pub fn feature_size(&self) -> (usize, usize) {
        let g = ConvGeometry::new(4, 2, 1);
        let mut hw = (self.input_shape.height, self.input_shape.width);
        for _ in 0..self.downsamplings {
            hw = (g.output_len(hw.0), g.output_len(hw.1));
        }
        hw
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.base_width == 0 || self.downsamplings == 0 {
            return Err(Error::Config(format!(
                "invalid discriminator config {self:?}"
            )));
        }
        let min = 1usize << self.downsamplings;
        if self.input_shape.height < min || self.input_shape.width < min {
            return Err(Error::Config(format!(
                "{} downsamplings need inputs of at least {min}x{min}",
                self.downsamplings
            )));
        }
        Ok(())
    }
}

/// Both discriminator heads for a batch.
#[derive(Clone, Debug)]
pub struct DiscriminatorOutput<S> {
    /// Real/fake score before squashing, one per image.
    pub logits: Vec<S>,
    /// `sigmoid(logits)`.
    pub real_prob: Vec<S>,
    /// `[n, C]` domain probabilities.
    pub domain_probs: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorTrace<S> {
    convs: Vec<(ConvTrace<S>, Tensor<S>)>,
    src: ConvTrace<S>,
    src_hw: (usize, usize),
    cls: ConvTrace<S>,
    domain_probs: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct Discriminator<S> {
    config: DiscriminatorConfig,
    convs: Vec<Conv2d>,
    src: Conv2d,
    cls: Conv2d,
    params: ParamStore<S>,
    calls: CallCounter,
}

impl<S: Scalar> Discriminator<S> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut cin = config.input_shape.channels;
        let mut convs = Vec::with_capacity(config.downsamplings);
        for i in 0..config.downsamplings {
            let cout = config.base_width << i;
            convs.push(Conv2d::new(
                &mut p,
                &format!("conv{i}"),
                cin,
                cout,
                ConvGeometry::new(4, 2, 1),
                true,
                fan_in_uniform,
                &mut rng,
            ));
            cin = cout;
        }
        let src = Conv2d::new(
            &mut p,
            "src.conv",
            cin,
            1,
            ConvGeometry::new(3, 1, 1),
            false,
            fan_in_uniform,
            &mut rng,
        );
        let (fh, fw) = config.feature_size();
        if fh != fw {
            return Err(Error::Config(format!(
                "discriminator needs square feature maps, got {fh}x{fw}"
            )));
        }
        let cls = Conv2d::new(
            &mut p,
            "cls.conv",
            cin,
            config.num_classes,
            ConvGeometry::new(fh, 1, 0),
            false,
            fan_in_uniform,
            &mut rng,
        );
        Ok(Self {
            config,
            convs,
            src,
            cls,
            params: p,
            calls: CallCounter::default(),
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn forward_calls(&self) -> u64 {
        self.calls.get()
    }

    pub fn forward_traced(
        &self,
        x: &Tensor<S>,
    ) -> Result<(DiscriminatorOutput<S>, DiscriminatorTrace<S>)> {
        check_images("discriminator", self.config.input_shape, x)?;
        self.calls.bump();
        let p = &self.params;
        let act = Activation::LeakyRelu(self.config.leaky_slope);
        let mut h = x.clone();
        let mut convs = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let (o, t) = c.forward(p, &h);
            let o = act.forward(&o);
            convs.push((t, o.clone()));
            h = o;
        }
        let (patches, src) = self.src.forward(p, &h);
        let (n, _, sh, sw) = patches.dims4();
        let logits: Vec<S> = (0..n)
            .map(|i| patches.item(i).iter().copied().sum::<S>() / S::of((sh * sw) as f64))
            .collect();
        let real_prob = logits.iter().map(|&z| sigmoid(z)).collect();
        let (cls_out, cls) = self.cls.forward(p, &h);
        let domain_probs = softmax_rows(&cls_out.reshape(&[n, self.config.num_classes])?);
        Ok((
            DiscriminatorOutput {
                logits,
                real_prob,
                domain_probs: domain_probs.clone(),
            },
            DiscriminatorTrace {
                convs,
                src,
                src_hw: (sh, sw),
                cls,
                domain_probs,
            },
        ))
    }

    /// `(real/fake probabilities, domain probability rows)`.
    pub fn discriminate(&self, x: &Tensor<S>) -> Result<(Vec<S>, Tensor<S>)> {
        let (out, _) = self.forward_traced(x)?;
        Ok((out.real_prob, out.domain_probs))
    }

    /// Backpropagates gradients with respect to the real/fake logits and the
    /// domain probabilities.
    pub fn backward(
        &self,
        trace: &DiscriminatorTrace<S>,
        dlogits: &[S],
        ddomain: &Tensor<S>,
        mut grads: Option<&mut Gradients<S>>,
        input_grad: bool,
    ) -> Option<Tensor<S>> {
        let p = &self.params;
        let n = dlogits.len();
        let (sh, sw) = trace.src_hw;
        let scale = S::of(1.0 / (sh * sw) as f64);
        let mut dpatch = Tensor::zeros(&[n, 1, sh, sw]);
        for (i, &d) in dlogits.iter().enumerate() {
            dpatch.item_mut(i).fill(d * scale);
        }
        let mut d = self
            .src
            .backward(p, &trace.src, &dpatch, grads.as_deref_mut(), true)
            .expect("input grad");
        let dcls = softmax_rows_backward(&trace.domain_probs, ddomain)
            .reshape(&[n, self.config.num_classes, 1, 1])
            .expect("class head shape");
        let dc = self
            .cls
            .backward(p, &trace.cls, &dcls, grads.as_deref_mut(), true)
            .expect("input grad");
        d.add_assign(&dc).expect("head grad shape");
        let act = Activation::LeakyRelu(self.config.leaky_slope);
        for (i, (c, (t, out))) in self.convs.iter().zip(&trace.convs).enumerate().rev() {
            let dpre = act.backward(out, &d);
            d = c.backward(p, t, &dpre, grads.as_deref_mut(), i > 0 || input_grad)?;
        }
        Some(d)
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let extra = serde_json::to_value(&self.config)?;
        checkpoint::save(
            stem,
            DISCRIMINATOR_ARCHITECTURE,
            self.config.input_shape,
            self.config.num_classes,
            &self.params,
            extra,
        )
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (manifest, tensors) = checkpoint::load::<S>(stem, DISCRIMINATOR_ARCHITECTURE)?;
        let config: DiscriminatorConfig = serde_json::from_value(manifest.extra)?;
        let mut model = Self::new(config, 0)?;
        model.params.load_values(tensors)?;
        Ok(model)
    }
}
