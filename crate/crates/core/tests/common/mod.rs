#![allow(dead_code)]

use frace_core::cgan::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use frace_core::classifier::{Classifier, ResNetConfig};
use frace_core::datasets::{
    Dataset, DatasetDescriptor, DomainLabel, ImageShape, LabeledImage, SplitFractions,
};
use frace_core::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SHAPE: ImageShape = ImageShape::new(8, 8, 1);

pub fn descriptor(num_classes: usize) -> DatasetDescriptor {
    DatasetDescriptor {
        name: format!("toy{num_classes}"),
        image_shape: SHAPE,
        num_classes,
        split_fractions: SplitFractions {
            train: 0.8,
            test: 0.2,
        },
        class_names: (0..num_classes).map(|c| format!("c{c}")).collect(),
    }
}

/// Class `k` lights up row `k mod 8` on a noisy dark background.
pub fn toy_dataset<S: Scalar>(num_classes: usize, n: usize, seed: u64) -> Dataset<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|i| {
            let k = i % num_classes;
            let pixels = (0..SHAPE.numel())
                .map(|p| {
                    let base = if p / SHAPE.width == k % SHAPE.height {
                        0.8
                    } else {
                        -0.8
                    };
                    S::of(base + rng.gen_range(-0.15..0.15))
                })
                .collect();
            LabeledImage::new(pixels, SHAPE, DomainLabel::new(k, num_classes).unwrap()).unwrap()
        })
        .collect();
    Dataset::new(descriptor(num_classes), examples).unwrap()
}

pub fn random_images<S: Scalar>(rng: &mut ChaCha8Rng, n: usize, shape: ImageShape) -> Tensor<S> {
    let data = (0..n * shape.numel())
        .map(|_| S::of(rng.gen_range(-1.0..1.0)))
        .collect();
    Tensor::from_vec(&shape.batch(n), data).unwrap()
}

pub fn tiny_generator<S: Scalar>(num_classes: usize, seed: u64) -> Generator<S> {
    let mut cfg = GeneratorConfig::new(SHAPE, num_classes).with_width(2);
    cfg.residual_blocks = 1;
    Generator::new(cfg, seed).unwrap()
}

pub fn tiny_discriminator<S: Scalar>(num_classes: usize, seed: u64) -> Discriminator<S> {
    Discriminator::new(
        DiscriminatorConfig::new(SHAPE, num_classes).with_width(2),
        seed,
    )
    .unwrap()
}

pub fn tiny_classifier<S: Scalar>(num_classes: usize, seed: u64) -> Classifier<S> {
    Classifier::new(ResNetConfig::new(SHAPE, num_classes).with_width(2), seed).unwrap()
}
