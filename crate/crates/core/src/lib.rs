//! Fast counterfactual explanations for image classifiers.
//!
//! A residual conditional GAN learns, per target class, a perturbation that
//! moves a query image into that class as judged by a frozen classifier.
//! Explaining a query is then one generator pass.

pub mod bundle;
pub mod cgan;
pub mod checkpoint;
pub mod classifier;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod explainer;
pub mod losses;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type ClassifierF32 = classifier::Classifier<f32>;
pub type ClassifierF64 = classifier::Classifier<f64>;
pub type GeneratorF32 = cgan::Generator<f32>;
pub type GeneratorF64 = cgan::Generator<f64>;
pub type DiscriminatorF32 = cgan::Discriminator<f32>;
pub type DiscriminatorF64 = cgan::Discriminator<f64>;
pub type DatasetF32 = datasets::Dataset<f32>;
pub type DatasetF64 = datasets::Dataset<f64>;
pub type ExplanationF32 = explainer::Explanation<f32>;
pub type ExplanationF64 = explainer::Explanation<f64>;
pub type ModelBundleF32 = bundle::ModelBundle<f32>;
pub type ModelBundleF64 = bundle::ModelBundle<f64>;
