//! A model bundle: one directory holding the classifier, generator and
//! (optionally) discriminator checkpoints under a shared manifest, so that
//! class count and input shape are checked once at load time.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cgan::{Discriminator, Generator};
use crate::classifier::Classifier;
use crate::datasets::DatasetDescriptor;
use crate::{Error, Result, Scalar};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
pub const BUNDLE_MANIFEST: &str = "bundle.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub dataset: DatasetDescriptor,
    /// Checkpoint stems relative to the bundle directory.
    pub classifier: String,
    pub generator: String,
    #[serde(default)]
    pub discriminator: Option<String>,
}

#[derive(Debug)]
pub struct ModelBundle<S> {
    pub root: PathBuf,
    pub manifest: BundleManifest,
    pub classifier: Classifier<S>,
    pub generator: Generator<S>,
    pub discriminator: Option<Discriminator<S>>,
}

impl<S: Scalar> ModelBundle<S> {
    pub fn new(
        dataset: DatasetDescriptor,
        classifier: Classifier<S>,
        generator: Generator<S>,
        discriminator: Option<Discriminator<S>>,
    ) -> Result<Self> {
        let manifest = BundleManifest {
            format_version: BUNDLE_FORMAT_VERSION,
            dataset,
            classifier: "classifier".into(),
            generator: "generator".into(),
            discriminator: discriminator.as_ref().map(|_| "discriminator".into()),
        };
        let bundle = Self {
            root: PathBuf::new(),
            manifest,
            classifier,
            generator,
            discriminator,
        };
        bundle.check()?;
        Ok(bundle)
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.dataset.num_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.manifest.dataset.class_names
    }

    /// Every model must agree with the dataset on class count and shape.
    pub fn check(&self) -> Result<()> {
        self.manifest.dataset.validate()?;
        let want = (
            self.manifest.dataset.image_shape,
            self.manifest.dataset.num_classes,
        );
        let mut seen = vec![
            (
                "classifier",
                (self.classifier.input_shape(), self.classifier.num_classes()),
            ),
            (
                "generator",
                (self.generator.input_shape(), self.generator.num_classes()),
            ),
        ];
        if let Some(d) = &self.discriminator {
            seen.push((
                "discriminator",
                (d.config().input_shape, d.config().num_classes),
            ));
        }
        let bad: Vec<String> = seen
            .iter()
            .filter(|(_, got)| *got != want)
            .map(|(name, (shape, c))| format!("{name} has {shape:?} with {c} classes"))
            .collect();
        if !bad.is_empty() {
            return Err(Error::Consistency(format!(
                "bundle dataset '{}' is {:?} with {} classes, but {}",
                self.manifest.dataset.name,
                want.0,
                want.1,
                bad.join("; ")
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.check()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.classifier.save(&dir.join(&self.manifest.classifier))?;
        self.generator.save(&dir.join(&self.manifest.generator))?;
        if let (Some(d), Some(stem)) = (&self.discriminator, &self.manifest.discriminator) {
            d.save(&dir.join(stem))?;
        }
        let path = dir.join(BUNDLE_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&self.manifest)?)
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(BUNDLE_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: BundleManifest = serde_json::from_str(&text)?;
        if manifest.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "bundle format version {} (supported: {BUNDLE_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let bundle = Self {
            root: dir.to_path_buf(),
            classifier: Classifier::load(&dir.join(&manifest.classifier))?,
            generator: Generator::load(&dir.join(&manifest.generator))?,
            discriminator: manifest
                .discriminator
                .as_ref()
                .map(|stem| Discriminator::load(&dir.join(stem)))
                .transpose()?,
            manifest,
        };
        bundle.check()?;
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgan::{DiscriminatorConfig, GeneratorConfig};
    use crate::classifier::ResNetConfig;
    use crate::datasets::ImageShape;

    fn descriptor(c: usize) -> DatasetDescriptor {
        DatasetDescriptor {
            name: "probe".into(),
            image_shape: ImageShape::new(8, 8, 1),
            num_classes: c,
            split_fractions: crate::datasets::SplitFractions {
                train: 0.5,
                test: 0.5,
            },
            class_names: (0..c).map(|k| format!("c{k}")).collect(),
        }
    }

    fn models(c_gen: usize) -> (Classifier<f32>, Generator<f32>, Discriminator<f32>) {
        let s = ImageShape::new(8, 8, 1);
        (
            Classifier::new(ResNetConfig::new(s, 3).with_width(2), 1).unwrap(),
            Generator::new(GeneratorConfig::new(s, c_gen).with_width(2), 2).unwrap(),
            Discriminator::new(DiscriminatorConfig::new(s, 3).with_width(2), 3).unwrap(),
        )
    }

    #[test]
    fn round_trip_preserves_models() {
        let dir = tempfile::tempdir().unwrap();
        let (h, g, d) = models(3);
        let bundle = ModelBundle::new(descriptor(3), h, g, Some(d)).unwrap();
        bundle.save(dir.path()).unwrap();
        let back = ModelBundle::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.classifier.checksum(), bundle.classifier.checksum());
        assert_eq!(back.generator.checksum(), bundle.generator.checksum());
        assert_eq!(back.class_names(), ["c0", "c1", "c2"]);
        assert_eq!(
            back.discriminator.unwrap().checksum(),
            bundle.discriminator.unwrap().checksum()
        );
    }

    #[test]
    fn mismatched_class_count_is_refused_with_diagnostic() {
        let (h, g, _) = models(4);
        let err = ModelBundle::new(descriptor(3), h, g, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("generator has"), "{msg}");
        assert!(!msg.contains("classifier has"), "{msg}");
    }

    #[test]
    fn tampered_manifest_is_refused_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let (h, g, _) = models(3);
        ModelBundle::new(descriptor(3), h, g, None)
            .unwrap()
            .save(dir.path())
            .unwrap();
        let path = dir.path().join(BUNDLE_MANIFEST);
        let mut m: BundleManifest =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        m.dataset = descriptor(5);
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(
            ModelBundle::<f32>::load(dir.path()),
            Err(Error::Consistency(_))
        ));
    }
}
