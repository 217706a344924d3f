//! Single-pass counterfactual explanations and their rendering.
//!
//! An explanation is one generator forward pass toward the requested class
//! plus two classifier evaluations (query and counterfactual). Overlays mark
//! pixels the perturbation brightens in blue ("add") and pixels it darkens in
//! red ("erase").

use std::time::Instant;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::cgan::Generator;
use crate::classifier::Classifier;
use crate::datasets::{denormalize, DomainLabel, ImageShape, LabeledImage};
use crate::tensor::argmax;
use crate::{Error, Result, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Explanation<S> {
    /// The query pixels, with the dataset label when one is known.
    pub query: Vec<S>,
    pub shape: ImageShape,
    pub query_label: Option<DomainLabel>,
    /// `y*`, the classifier's prediction on the query.
    pub predicted_class: DomainLabel,
    /// `y^c`, the class the explanation moves toward.
    pub counter_class: DomainLabel,
    pub perturbation: Vec<S>,
    /// `clamp(query + perturbation, -1, 1)`.
    pub counterfactual_image: Vec<S>,
    pub probs_before: Vec<S>,
    pub probs_after: Vec<S>,
    pub latency_ms: f64,
    /// Optimization steps taken; zero for the single-pass explainer.
    pub iterations: usize,
}

impl<S: Scalar> Explanation<S> {
    /// True when the classifier assigns the counterfactual to `y^c`.
    pub fn is_valid(&self) -> bool {
        argmax(&self.probs_after) == self.counter_class.index()
    }

    pub fn prob_counter_before(&self) -> S {
        self.probs_before[self.counter_class.index()]
    }

    pub fn prob_counter_after(&self) -> S {
        self.probs_after[self.counter_class.index()]
    }

    pub fn mean_abs_perturbation(&self) -> f64 {
        self.perturbation
            .iter()
            .map(|v| v.as_f64().abs())
            .sum::<f64>()
            / self.perturbation.len().max(1) as f64
    }
}

/// `clamp(x + g, -1, 1)` element-wise.
pub fn apply_perturbation<S: Scalar>(x: &[S], g: &[S]) -> Vec<S> {
    x.iter()
        .zip(g)
        .map(|(&a, &b)| (a + b).max(-S::one()).min(S::one()))
        .collect()
}

fn check_compatible<S: Scalar>(generator: &Generator<S>, classifier: &Classifier<S>) -> Result<()> {
    if generator.input_shape() != classifier.input_shape()
        || generator.num_classes() != classifier.num_classes()
    {
        return Err(Error::Consistency(format!(
            "generator expects {:?} with {} classes, classifier {:?} with {}",
            generator.input_shape(),
            generator.num_classes(),
            classifier.input_shape(),
            classifier.num_classes()
        )));
    }
    Ok(())
}

/// Explains every item of an NCHW batch toward its entry in `counter_classes`
/// using one generator call and two classifier calls for the whole batch.
/// Each explanation records the batch wall time as its latency.
pub fn explain_batch<S: Scalar>(
    generator: &Generator<S>,
    classifier: &Classifier<S>,
    x: &Tensor<S>,
    counter_classes: &[usize],
) -> Result<Vec<Explanation<S>>> {
    for &k in counter_classes {
        DomainLabel::new(k, generator.num_classes())?;
    }
    explain_batch_by(generator, classifier, x, |_| Ok(counter_classes.to_vec()))
}

/// [`explain_batch`] with counter classes chosen from the classifier's
/// probabilities on the queries.
pub(crate) fn explain_batch_by<S: Scalar>(
    generator: &Generator<S>,
    classifier: &Classifier<S>,
    x: &Tensor<S>,
    choose: impl FnOnce(&Tensor<S>) -> Result<Vec<usize>>,
) -> Result<Vec<Explanation<S>>> {
    check_compatible(generator, classifier)?;
    let shape = generator.input_shape();
    let c = generator.num_classes();
    if x.shape().len() != 4 || x.shape()[1..] != shape.chw() {
        return Err(Error::Shape(format!(
            "query batch {:?} does not match image shape {shape:?}",
            x.shape()
        )));
    }
    let n = x.shape()[0];

    let start = Instant::now();
    let before = classifier.predict_proba(x)?;
    let counter_classes = choose(&before)?;
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
    let g = generator.generate_perturbation(x, &counter_classes)?;
    let xc = Tensor::from_vec(x.shape(), apply_perturbation(x.data(), g.data()))?;
    let after = classifier.predict_proba(&xc)?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;

    Ok((0..n)
        .map(|i| Explanation {
            query: x.item(i).to_vec(),
            shape,
            query_label: None,
            predicted_class: DomainLabel::new(argmax(before.row(i)), c)
                .expect("argmax is a valid class"),
            counter_class: counters[i],
            perturbation: g.item(i).to_vec(),
            counterfactual_image: xc.item(i).to_vec(),
            probs_before: before.row(i).to_vec(),
            probs_after: after.row(i).to_vec(),
            latency_ms,
            iterations: 0,
        })
        .collect())
}

/// Counterfactual explanation of one labeled query toward `counter_class`.
pub fn explain<S: Scalar>(
    generator: &Generator<S>,
    classifier: &Classifier<S>,
    query: &LabeledImage<S>,
    counter_class: usize,
) -> Result<Explanation<S>> {
    let mut e = explain_pixels(generator, classifier, &query.pixels, counter_class)?;
    e.query_label = Some(query.label);
    Ok(e)
}

/// Like [`explain`] for an unlabeled image in the model's input layout.
pub fn explain_pixels<S: Scalar>(
    generator: &Generator<S>,
    classifier: &Classifier<S>,
    pixels: &[S],
    counter_class: usize,
) -> Result<Explanation<S>> {
    let shape = generator.input_shape();
    if pixels.len() != shape.numel() {
        return Err(Error::Shape(format!(
            "query has {} values, the model expects {shape:?}",
            pixels.len()
        )));
    }
    let x = Tensor::from_vec(&shape.batch(1), pixels.to_vec())?;
    let mut out = explain_batch(generator, classifier, &x, &[counter_class])?;
    Ok(out.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlaySpec {
    /// Minimum `|perturbation|` for a pixel to be marked.
    pub threshold: f64,
    /// Tint for pixels the perturbation adds to.
    pub positive_color: [u8; 3],
    /// Tint for pixels the perturbation erases.
    pub negative_color: [u8; 3],
    pub alpha: f64,
}

impl Default for OverlaySpec {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            positive_color: [0, 0, 255],
            negative_color: [255, 0, 0],
            alpha: 0.6,
        }
    }
}

impl OverlaySpec {
    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..2.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "overlay threshold {} outside [0, 2)",
                self.threshold
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "overlay alpha {} outside (0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mark {
    Add,
    Erase,
    None,
}

/// Classification of one signed perturbation value under `threshold`.
pub fn mark(value: f64, threshold: f64) -> Mark {
    if value > threshold {
        Mark::Add
    } else if value < -threshold {
        Mark::Erase
    } else {
        Mark::None
    }
}

/// Per-pixel marks; with several channels the channel mean decides.
pub fn pixel_marks<S: Scalar>(perturbation: &[S], shape: ImageShape, threshold: f64) -> Vec<Mark> {
    let plane = shape.height * shape.width;
    (0..plane)
        .map(|p| {
            let v = (0..shape.channels)
                .map(|c| perturbation[c * plane + p].as_f64())
                .sum::<f64>()
                / shape.channels as f64;
            mark(v, threshold)
        })
        .collect()
}

/// Renders channel-major pixels in `[-1, 1]` as an RGB image; single-channel
/// images become gray.
pub fn to_rgb<S: Scalar>(pixels: &[S], shape: ImageShape) -> RgbImage {
    let plane = shape.height * shape.width;
    let channel = |c: usize, p: usize| denormalize(pixels[c.min(shape.channels - 1) * plane + p]);
    RgbImage::from_fn(shape.width as u32, shape.height as u32, |x, y| {
        let p = y as usize * shape.width + x as usize;
        if shape.channels >= 3 {
            Rgb([channel(0, p), channel(1, p), channel(2, p)])
        } else {
            let v = channel(0, p);
            Rgb([v, v, v])
        }
    })
}

fn blend(base: Rgb<u8>, tint: [u8; 3], alpha: f64) -> Rgb<u8> {
    let mix = |b: u8, t: u8| ((1.0 - alpha) * b as f64 + alpha * t as f64).round() as u8;
    Rgb([
        mix(base[0], tint[0]),
        mix(base[1], tint[1]),
        mix(base[2], tint[2]),
    ])
}

/// The query with marked pixels alpha-blended toward the add/erase tints.
pub fn render_overlay<S: Scalar>(explanation: &Explanation<S>, spec: &OverlaySpec) -> RgbImage {
    let shape = explanation.shape;
    let mut img = to_rgb(&explanation.query, shape);
    let marks = pixel_marks(&explanation.perturbation, shape, spec.threshold);
    for (p, m) in marks.into_iter().enumerate() {
        let tint = match m {
            Mark::Add => spec.positive_color,
            Mark::Erase => spec.negative_color,
            Mark::None => continue,
        };
        let (x, y) = ((p % shape.width) as u32, (p / shape.width) as u32);
        let base = *img.get_pixel(x, y);
        img.put_pixel(x, y, blend(base, tint, spec.alpha));
    }
    img
}

/// Encodes an image as PNG bytes.
pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// One cell of an explanation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    /// Class of the query shown in this row.
    pub row: usize,
    /// Counter class this column explains toward.
    pub col: usize,
    pub predicted_class: usize,
    pub valid: bool,
}

#[derive(Clone, Debug)]
pub struct ExplanationGrid {
    pub image: RgbImage,
    pub num_classes: usize,
    /// Row-major, `num_classes²` entries.
    pub cells: Vec<GridCell>,
    /// Pixel size of one cell (query and overlay side by side) without padding.
    pub cell_width: u32,
    pub cell_height: u32,
}

const GRID_PAD: u32 = 2;

impl ExplanationGrid {
    /// Top-left pixel of cell `(row, col)`.
    pub fn cell_origin(&self, row: usize, col: usize) -> (u32, u32) {
        (
            GRID_PAD + col as u32 * (self.cell_width + GRID_PAD),
            GRID_PAD + row as u32 * (self.cell_height + GRID_PAD),
        )
    }
}

/// Picks the first example of every class, failing with the list of classes
/// that have none.
pub fn class_representatives<S: Scalar>(
    samples: &[LabeledImage<S>],
    num_classes: usize,
) -> Result<Vec<&LabeledImage<S>>> {
    let mut reps: Vec<Option<&LabeledImage<S>>> = vec![None; num_classes];
    for s in samples {
        let k = s.label.index();
        if k < num_classes && reps[k].is_none() {
            reps[k] = Some(s);
        }
    }
    let missing: Vec<usize> = (0..num_classes).filter(|&k| reps[k].is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::Consistency(format!(
            "no representative image for classes {missing:?}"
        )));
    }
    Ok(reps.into_iter().flatten().collect())
}

/// The `C×C` grid: row `i` holds the class-`i` query, column `j` its
/// explanation toward class `j`. Each cell shows the query next to its
/// overlay. Diagonal cells are generated like any other.
pub fn explanation_grid<S: Scalar>(
    generator: &Generator<S>,
    classifier: &Classifier<S>,
    samples: &[LabeledImage<S>],
    spec: &OverlaySpec,
) -> Result<ExplanationGrid> {
    spec.validate()?;
    let c = generator.num_classes();
    let reps = class_representatives(samples, c)?;
    let shape = generator.input_shape();
    let (w, h) = (shape.width as u32, shape.height as u32);
    let (cell_width, cell_height) = (2 * w + 1, h);
    let side = |cells: u32, size: u32| GRID_PAD + cells * (size + GRID_PAD);
    let mut grid = ExplanationGrid {
        image: RgbImage::from_pixel(
            side(c as u32, cell_width),
            side(c as u32, cell_height),
            Rgb([255, 255, 255]),
        ),
        num_classes: c,
        cells: Vec::with_capacity(c * c),
        cell_width,
        cell_height,
    };
    let counters: Vec<usize> = (0..c).collect();
    for (row, query) in reps.iter().enumerate() {
        let items = vec![query.pixels.as_slice(); c];
        let x = Tensor::stack(&items, &shape.chw())?;
        let explanations = explain_batch(generator, classifier, &x, &counters)?;
        for (col, e) in explanations.iter().enumerate() {
            let (ox, oy) = grid.cell_origin(row, col);
            let q = to_rgb(&e.query, shape);
            image::imageops::replace(&mut grid.image, &q, ox as i64, oy as i64);
            let o = render_overlay(e, spec);
            image::imageops::replace(&mut grid.image, &o, (ox + w + 1) as i64, oy as i64);
            grid.cells.push(GridCell {
                row,
                col,
                predicted_class: e.predicted_class.index(),
                valid: e.is_valid(),
            });
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgan::GeneratorConfig;
    use crate::classifier::ResNetConfig;

    fn models(zero: bool) -> (Generator<f64>, Classifier<f64>) {
        let shape = ImageShape::new(8, 8, 1);
        let mut g = Generator::new(GeneratorConfig::new(shape, 3).with_width(4), 1).unwrap();
        if zero {
            g.zero_output_layer();
        }
        let h = Classifier::new(ResNetConfig::new(shape, 3).with_width(2), 2).unwrap();
        (g, h)
    }

    fn query(label: usize, seed: f64) -> LabeledImage<f64> {
        let px = (0..64).map(|i| ((i as f64 + seed) * 0.37).sin()).collect();
        LabeledImage::new(
            px,
            ImageShape::new(8, 8, 1),
            DomainLabel::new(label, 3).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn counterfactual_is_clamped_sum_and_probabilities_are_valid() {
        let (g, h) = models(false);
        let e = explain(&g, &h, &query(0, 0.0), 2).unwrap();
        assert_eq!(
            e.counterfactual_image,
            apply_perturbation(&e.query, &e.perturbation)
        );
        for probs in [&e.probs_before, &e.probs_after] {
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        assert_eq!(e.counter_class.index(), 2);
        assert_eq!(e.query_label.map(|l| l.index()), Some(0));
    }

    #[test]
    fn batch_rows_match_single_explanations() {
        let (g, h) = models(false);
        let (a, b) = (query(0, 0.0), query(1, 5.0));
        let x = Tensor::stack(&[&a.pixels, &b.pixels], &[1, 8, 8]).unwrap();
        let batch = explain_batch(&g, &h, &x, &[1, 2]).unwrap();
        for (e, (q, k)) in batch.iter().zip([(&a, 1), (&b, 2)]) {
            let single = explain(&g, &h, q, k).unwrap();
            for (u, v) in e.perturbation.iter().zip(&single.perturbation) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_counter_class_and_shape_are_rejected() {
        let (g, h) = models(false);
        assert!(matches!(
            explain(&g, &h, &query(0, 0.0), 3),
            Err(Error::Label { .. })
        ));
        assert!(matches!(
            explain_pixels(&g, &h, &[0.0; 10], 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mark_partitions_by_sign_and_threshold() {
        assert_eq!(mark(0.5, 0.1), Mark::Add);
        assert_eq!(mark(-0.5, 0.1), Mark::Erase);
        assert_eq!(mark(0.1, 0.1), Mark::None);
        assert_eq!(mark(0.0, 0.0), Mark::None);
    }

    #[test]
    fn overlay_spec_bounds() {
        assert!(OverlaySpec::default().validate().is_ok());
        assert!(OverlaySpec::default()
            .with_threshold(2.0)
            .validate()
            .is_err());
        assert!(OverlaySpec::default()
            .with_threshold(-0.1)
            .validate()
            .is_err());
        let spec = OverlaySpec {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn missing_classes_are_listed() {
        let (g, h) = models(false);
        let samples = vec![query(1, 0.0)];
        let err = explanation_grid(&g, &h, &samples, &OverlaySpec::default()).unwrap_err();
        assert!(err.to_string().contains("[0, 2]"), "{err}");
    }
}
