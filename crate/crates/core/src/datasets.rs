//! Labeled image datasets: IDX (MNIST/EMNIST) files, class-per-directory
//! image folders, deterministic train/test splits and batching.
//!
//! Pixels are stored channel-major (`channels × height × width`) and
//! normalized to `[-1, 1]` by `v / 127.5 - 1`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainLabel {
    index: usize,
    num_classes: usize,
}

impl DomainLabel {
    pub fn new(index: usize, num_classes: usize) -> Result<Self> {
        if index >= num_classes {
            return Err(Error::Label { index, num_classes });
        }
        Ok(Self { index, num_classes })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn one_hot<S: Scalar>(&self) -> Vec<S> {
        let mut v = vec![S::zero(); self.num_classes];
        v[self.index] = S::one();
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// `[channels, height, width]`, the per-item tensor shape.
    pub fn chw(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn batch(&self, n: usize) -> [usize; 4] {
        [n, self.channels, self.height, self.width]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub image_shape: ImageShape,
    pub num_classes: usize,
    pub split_fractions: SplitFractions,
    pub class_names: Vec<String>,
}

impl DatasetDescriptor {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_shape;
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "dataset {} needs at least 2 classes, has {}",
                self.name, self.num_classes
            )));
        }
        if s.height == 0 || s.width == 0 || s.channels == 0 {
            return Err(Error::Config(format!("degenerate image shape {s:?}")));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        let f = &self.split_fractions;
        if !(f.train >= 0.0 && f.test >= 0.0 && (f.train + f.test - 1.0).abs() < 1e-9) {
            return Err(Error::Config(format!(
                "split fractions {f:?} must sum to 1"
            )));
        }
        Ok(())
    }

    pub fn mnist() -> Self {
        Self {
            name: "mnist".into(),
            image_shape: ImageShape::new(28, 28, 1),
            num_classes: 10,
            split_fractions: SplitFractions {
                train: 60_000.0 / 70_000.0,
                test: 10_000.0 / 70_000.0,
            },
            class_names: (0..10).map(|d| d.to_string()).collect(),
        }
    }

    /// The 26 case-merged classes of EMNIST Letters.
    pub fn letters() -> Self {
        Self {
            name: "letter".into(),
            image_shape: ImageShape::new(28, 28, 1),
            num_classes: 26,
            split_fractions: SplitFractions {
                train: 0.9,
                test: 0.1,
            },
            class_names: (b'A'..=b'Z').map(|c| (c as char).to_string()).collect(),
        }
    }

    pub fn label(&self, index: usize) -> Result<DomainLabel> {
        DomainLabel::new(index, self.num_classes)
    }

    pub fn save_manifest(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load_manifest(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let d: Self = serde_json::from_str(&text)?;
        d.validate()?;
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage<S> {
    /// Channel-major pixels in `[-1, 1]`.
    pub pixels: Vec<S>,
    pub shape: ImageShape,
    pub label: DomainLabel,
}

impl<S: Scalar> LabeledImage<S> {
    pub fn new(pixels: Vec<S>, shape: ImageShape, label: DomainLabel) -> Result<Self> {
        if pixels.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "{} pixels for image shape {shape:?}",
                pixels.len()
            )));
        }
        if let Some(v) = pixels
            .iter()
            .find(|v| !(**v >= -S::one() && **v <= S::one()))
        {
            return Err(Error::Consistency(format!(
                "pixel value {v} outside [-1, 1]"
            )));
        }
        Ok(Self {
            pixels,
            shape,
            label,
        })
    }

    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::from_vec(&self.shape.batch(1), self.pixels.clone()).expect("image shape")
    }
}

pub fn normalize_byte<S: Scalar>(b: u8) -> S {
    S::of(b as f64 / 127.5 - 1.0)
}

pub fn denormalize<S: Scalar>(v: S) -> u8 {
    ((v.as_f64() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// An immutable collection of examples sharing one descriptor.
#[derive(Clone, Debug)]
pub struct Dataset<S> {
    pub descriptor: DatasetDescriptor,
    examples: Vec<LabeledImage<S>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(descriptor: DatasetDescriptor, examples: Vec<LabeledImage<S>>) -> Result<Self> {
        descriptor.validate()?;
        for e in &examples {
            if e.shape != descriptor.image_shape || e.label.num_classes() != descriptor.num_classes
            {
                return Err(Error::Consistency(format!(
                    "example of shape {:?} / {} classes does not match descriptor {:?} / {}",
                    e.shape,
                    e.label.num_classes(),
                    descriptor.image_shape,
                    descriptor.num_classes
                )));
            }
        }
        Ok(Self {
            descriptor,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[LabeledImage<S>] {
        &self.examples
    }

    pub fn get(&self, i: usize) -> Option<&LabeledImage<S>> {
        self.examples.get(i)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            descriptor: self.descriptor.clone(),
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }

    /// The first `n` examples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        Self {
            descriptor: self.descriptor.clone(),
            examples: self.examples.iter().take(n).cloned().collect(),
        }
    }

    /// Stacks the given examples into an NCHW tensor plus their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<S>, Vec<usize>) {
        let items: Vec<&[S]> = indices
            .iter()
            .map(|&i| self.examples[i].pixels.as_slice())
            .collect();
        let x = Tensor::stack(&items, &self.descriptor.image_shape.chw())
            .expect("uniform image shapes");
        let labels = indices
            .iter()
            .map(|&i| self.examples[i].label.index())
            .collect();
        (x, labels)
    }

    /// Indices of the first `n` examples whose label is `class`.
    pub fn indices_of_class(&self, class: usize, n: usize) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label.index() == class)
            .map(|(i, _)| i)
            .take(n)
            .collect()
    }

    /// Deterministic random partition; see [`split_indices`].
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let (train, test) = split_indices(self.len(), test_fraction, seed)?;
        Ok((self.subset(&train), self.subset(&test)))
    }
}

/// Shuffles `0..n` with a seeded generator and cuts off
/// `round(n · test_fraction)` indices for the test side. Both returned
/// lists are sorted.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie strictly between 0 and 1, got {test_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

fn read_u32_be(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{} is truncated in its header", path.display())))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX3 image file into `(count, rows, cols, raw bytes)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32_be(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = read_u32_be(bytes, 4, path)? as usize;
    let rows = read_u32_be(bytes, 8, path)? as usize;
    let cols = read_u32_be(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Format(format!(
            "{}: header declares {n}×{rows}×{cols} bytes, body has {}",
            path.display(),
            body.len()
        )));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = read_u32_be(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "{}: header declares {n} labels, body has {}",
            path.display(),
            body.len()
        )));
    }
    Ok(body.to_vec())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IdxOptions {
    /// Subtracted from every raw label (EMNIST Letters labels start at 1).
    pub label_offset: u8,
    /// Swap rows and columns (EMNIST stores images transposed).
    pub transpose: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxSplit {
    Train,
    Test,
}

impl IdxSplit {
    pub fn file_names(&self) -> (&'static str, &'static str) {
        match self {
            IdxSplit::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            IdxSplit::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

/// Loads one split of an MNIST-layout directory.
pub fn load_idx_dataset<S: Scalar>(
    dir: &Path,
    split: IdxSplit,
    descriptor: &DatasetDescriptor,
) -> Result<Dataset<S>> {
    let (images, labels) = split.file_names();
    load_idx_files(
        &dir.join(images),
        &dir.join(labels),
        descriptor,
        IdxOptions::default(),
    )
}

pub fn load_idx_files<S: Scalar>(
    images_path: &Path,
    labels_path: &Path,
    descriptor: &DatasetDescriptor,
    options: IdxOptions,
) -> Result<Dataset<S>> {
    descriptor.validate()?;
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            n,
            labels.len()
        )));
    }
    let shape = descriptor.image_shape;
    if (rows, cols, 1) != (shape.height, shape.width, shape.channels) {
        return Err(Error::Consistency(format!(
            "IDX images are {rows}×{cols}×1, descriptor expects {shape:?}"
        )));
    }
    let plane = rows * cols;
    let mut examples = Vec::with_capacity(n);
    for (i, &raw) in labels.iter().enumerate() {
        let label = raw.checked_sub(options.label_offset).ok_or_else(|| {
            Error::Consistency(format!("label {raw} below offset {}", options.label_offset))
        })?;
        let label = descriptor.label(label as usize)?;
        let src = &pixels[i * plane..(i + 1) * plane];
        let px: Vec<S> = if options.transpose {
            (0..plane)
                .map(|p| normalize_byte(src[(p % cols) * rows + p / cols]))
                .collect()
        } else {
            src.iter().map(|&b| normalize_byte(b)).collect()
        };
        examples.push(LabeledImage {
            pixels: px,
            shape,
            label,
        });
    }
    Dataset::new(descriptor.clone(), examples)
}

/// EMNIST Letters split as 26 case-merged classes.
pub fn load_emnist_letters<S: Scalar>(dir: &Path, split: IdxSplit) -> Result<Dataset<S>> {
    let prefix = match split {
        IdxSplit::Train => "emnist-letters-train",
        IdxSplit::Test => "emnist-letters-test",
    };
    load_idx_files(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        &DatasetDescriptor::letters(),
        IdxOptions {
            label_offset: 1,
            transpose: true,
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ColorMode {
    #[default]
    Grayscale,
    Rgb,
}

#[derive(Debug)]
pub struct FolderDataset<S> {
    pub dataset: Dataset<S>,
    /// Files that could not be decoded and were left out.
    pub skipped: Vec<PathBuf>,
}

fn is_hidden(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with('.'))
}

/// Loads `root/<class_name>/<file>`; classes are indexed in lexicographic
/// order of their directory names and every image is resized to `height×width`.
pub fn load_image_folder<S: Scalar>(
    root: &Path,
    height: usize,
    width: usize,
    color: ColorMode,
) -> Result<FolderDataset<S>> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && !is_hidden(p))
        .collect();
    class_dirs.sort();
    let class_names: Vec<String> = class_dirs
        .iter()
        .map(|p| {
            p.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned()
        })
        .collect();
    let channels = match color {
        ColorMode::Grayscale => 1,
        ColorMode::Rgb => 3,
    };
    let descriptor = DatasetDescriptor {
        name: root
            .file_name()
            .map_or_else(|| "folder".into(), |n| n.to_string_lossy().into_owned()),
        image_shape: ImageShape::new(height, width, channels),
        num_classes: class_dirs.len(),
        split_fractions: SplitFractions {
            train: 0.9,
            test: 0.1,
        },
        class_names,
    };
    descriptor.validate()?;

    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && !is_hidden(p))
            .collect();
        if files.is_empty() {
            return Err(Error::Consistency(format!(
                "class directory {} contains no images",
                dir.display()
            )));
        }
        files.sort();
        let label = descriptor.label(class)?;
        for file in files {
            let img = match image::open(&file) {
                Ok(img) => img,
                Err(e) => {
                    log::warn!("skipping unreadable image {}: {e}", file.display());
                    skipped.push(file);
                    continue;
                }
            };
            let img = img.resize_exact(
                width as u32,
                height as u32,
                image::imageops::FilterType::Triangle,
            );
            let pixels = match color {
                ColorMode::Grayscale => img
                    .to_luma8()
                    .into_raw()
                    .into_iter()
                    .map(normalize_byte)
                    .collect(),
                ColorMode::Rgb => {
                    let rgb = img.to_rgb8();
                    let plane = height * width;
                    let mut out = vec![S::zero(); 3 * plane];
                    for (p, px) in rgb.pixels().enumerate() {
                        for c in 0..3 {
                            out[c * plane + p] = normalize_byte(px[c]);
                        }
                    }
                    out
                }
            };
            examples.push(LabeledImage {
                pixels,
                shape: descriptor.image_shape,
                label,
            });
        }
    }
    if !skipped.is_empty() {
        log::warn!(
            "{} of {} files skipped under {}",
            skipped.len(),
            skipped.len() + examples.len(),
            root.display()
        );
    }
    Ok(FolderDataset {
        dataset: Dataset::new(descriptor, examples)?,
        skipped,
    })
}
