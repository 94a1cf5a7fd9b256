//! Controlled "Clever Hans" classification tasks.
//!
//! Images live on the 8-bit `[0, 255]` scale; [`ConceptDataset::model_inputs`]
//! rescales them to `[0, 1]` for the network.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

const PIXEL_MAX: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArtifactTransform {
    /// `v -> min(255, (1 - alpha) v + alpha 255)`
    Brightness { alpha: f64 },
    /// Overwrites the lowest `bits` bits of every quantized value.
    LowBitWatermark { bits: u8, pattern: u8 },
    /// Overwrites a rectangle (all channels) with a constant value.
    Patch {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
        value: f64,
    },
}

impl ArtifactTransform {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ArtifactTransform::Brightness { .. } => "brightness",
            ArtifactTransform::LowBitWatermark { .. } => "low_bit_watermark",
            ArtifactTransform::Patch { .. } => "patch",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ArtifactTransform::Brightness { alpha } => {
                if !(alpha > 0.0 && alpha < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "brightness alpha must lie in (0, 1), got {alpha}"
                    )));
                }
            }
            ArtifactTransform::LowBitWatermark { bits, .. } => {
                if !(1..=3).contains(&bits) {
                    return Err(Error::InvalidParameter(format!(
                        "watermark bit count must be 1..=3, got {bits}"
                    )));
                }
            }
            ArtifactTransform::Patch {
                height,
                width,
                value,
                ..
            } => {
                if height == 0 || width == 0 || !value.is_finite() {
                    return Err(Error::InvalidParameter(
                        "patch needs a non-empty extent and a finite value".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Whether the artifact occupies a known region of the input.
    pub fn is_localized(&self) -> bool {
        matches!(self, ArtifactTransform::Patch { .. })
    }

    fn check_patch_bounds(&self, sample_shape: &[usize]) -> Result<()> {
        if let ArtifactTransform::Patch {
            row,
            col,
            height,
            width,
            ..
        } = *self
        {
            let (h, w) = spatial(sample_shape)?;
            if row + height > h || col + width > w {
                return Err(Error::InvalidParameter(format!(
                    "patch at ({row}, {col}) of size {height}x{width} exceeds {h}x{w} image"
                )));
            }
        }
        Ok(())
    }

    /// Applies the transform to one sample of the given per-sample shape
    /// (`[channels, height, width]`, or any shape for non-patch kinds).
    pub fn apply(&self, sample: &[f64], sample_shape: &[usize]) -> Result<Vec<f64>> {
        self.validate()?;
        match *self {
            ArtifactTransform::Brightness { alpha } => sample
                .iter()
                .map(|&v| {
                    check_pixel(v, "brightness")?;
                    Ok(((1.0 - alpha) * v + alpha * PIXEL_MAX).min(PIXEL_MAX))
                })
                .collect(),
            ArtifactTransform::LowBitWatermark { bits, pattern } => {
                let mask: u8 = (1u8 << bits) - 1;
                sample
                    .iter()
                    .map(|&v| {
                        check_pixel(v, "low_bit_watermark")?;
                        let q = v.round() as u8;
                        Ok(f64::from((q & !mask) | (pattern & mask)))
                    })
                    .collect()
            }
            ArtifactTransform::Patch {
                row,
                col,
                height,
                width,
                value,
            } => {
                self.check_patch_bounds(sample_shape)?;
                let (h, w) = spatial(sample_shape)?;
                let channels = sample.len() / (h * w);
                let mut out = sample.to_vec();
                for c in 0..channels {
                    for y in row..row + height {
                        for x in col..col + width {
                            out[(c * h + y) * w + x] = value;
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Binary mask (1 on artifact pixels) for localized transforms.
    pub fn mask(&self, sample_shape: &[usize]) -> Result<Option<Vec<f64>>> {
        match *self {
            ArtifactTransform::Patch {
                row,
                col,
                height,
                width,
                ..
            } => {
                self.check_patch_bounds(sample_shape)?;
                let (h, w) = spatial(sample_shape)?;
                let n: usize = sample_shape.iter().product();
                let mut m = vec![0.0; n];
                for c in 0..n / (h * w) {
                    for y in row..row + height {
                        for x in col..col + width {
                            m[(c * h + y) * w + x] = 1.0;
                        }
                    }
                }
                Ok(Some(m))
            }
            _ => Ok(None),
        }
    }
}

fn check_pixel(v: f64, kind: &'static str) -> Result<()> {
    if (0.0..=PIXEL_MAX).contains(&v) {
        Ok(())
    } else {
        Err(Error::TransformDomain { kind, value: v })
    }
}

fn spatial(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [_, h, w] | [h, w] => Ok((h, w)),
        _ => Err(Error::Shape(format!(
            "patch transform needs an image shape, got {shape:?}"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    TestClean,
    TestBiased,
}

impl SplitTag {
    pub fn is_test(&self) -> bool {
        matches!(self, SplitTag::TestClean | SplitTag::TestBiased)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDataset {
    /// `(N, channels, side, side)` on the `[0, 255]` scale.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Artifact flags `t`; set exactly for transformed samples.
    pub flags: Vec<bool>,
    pub split: SplitTag,
    pub num_classes: usize,
}

impl ConceptDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.batch() != self.labels.len() || self.flags.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} inputs, {} labels, {} flags",
                self.inputs.batch(),
                self.labels.len(),
                self.flags.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::InvalidParameter(format!(
                "label {bad} for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Inputs rescaled to `[0, 1]`.
    pub fn model_inputs(&self) -> Tensor {
        to_model_scale(&self.inputs)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            flags: indices.iter().map(|&i| self.flags[i]).collect(),
            split: self.split,
            num_classes: self.num_classes,
        }
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Applies `transform` to the listed samples and flags them.
    fn transform_samples(&mut self, indices: &[usize], transform: &ArtifactTransform) -> Result<()> {
        let shape = self.inputs.sample_shape().to_vec();
        for &i in indices {
            let out = transform.apply(self.inputs.sample(i), &shape)?;
            self.inputs.sample_mut(i).copy_from_slice(&out);
            self.flags[i] = true;
        }
        Ok(())
    }
}

/// `[0, 255]` pixels to `[0, 1]` network inputs.
pub fn to_model_scale(t: &Tensor) -> Tensor {
    t.map(|v| v / PIXEL_MAX)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub biased_class: usize,
    pub p_bias: f64,
    pub transform: ArtifactTransform,
    /// Fraction of other-class samples that receive the artifact and have
    /// their label flipped to `biased_class`.
    #[serde(default)]
    pub leak_rate: f64,
}

impl BiasSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_bias) {
            return Err(Error::InvalidParameter(format!(
                "p_bias must lie in [0, 1], got {}",
                self.p_bias
            )));
        }
        if !(0.0..=0.01).contains(&self.leak_rate) {
            return Err(Error::InvalidParameter(format!(
                "leak_rate must lie in [0, 0.01], got {}",
                self.leak_rate
            )));
        }
        self.transform.validate()
    }
}

/// A class whose samples legitimately carry the artifact-correlated feature:
/// it is rendered with the orientation of `shares_shape_with` (or its own
/// orientation when absent) and brightened with `alpha`, unflagged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelatedFeature {
    pub class: usize,
    #[serde(default)]
    pub shares_shape_with: Option<usize>,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_side: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub related: Option<RelatedFeature>,
}

fn default_noise() -> f64 {
    24.0
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            samples_per_class: 500,
            image_side: 16,
            noise_std: default_noise(),
            related: None,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidParameter("need at least two classes".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidParameter("samples_per_class must be positive".into()));
        }
        if self.image_side < 8 {
            return Err(Error::InvalidParameter("image_side must be at least 8".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidParameter("noise_std must be non-negative".into()));
        }
        if let Some(r) = self.related {
            if r.class >= self.num_classes
                || r.shares_shape_with.is_some_and(|s| s >= self.num_classes || s == r.class)
            {
                return Err(Error::InvalidParameter("related-feature classes out of range".into()));
            }
            ArtifactTransform::Brightness { alpha: r.alpha }.validate()?;
        }
        Ok(())
    }
}

/// Base task with the default noise level and no related class.
pub fn generate_base_task(
    num_classes: usize,
    samples_per_class: usize,
    image_side: usize,
    seed: u64,
) -> Result<ConceptDataset> {
    generate_task(
        &TaskSpec {
            num_classes,
            samples_per_class,
            image_side,
            ..TaskSpec::default()
        },
        seed,
    )
}

/// Each class is a bar at orientation `pi * c / num_classes` with random
/// centre, length and intensity, plus Gaussian pixel noise; values are
/// quantized to integers in `[0, 255]`. Samples are interleaved by class.
pub fn generate_task(spec: &TaskSpec, seed: u64) -> Result<ConceptDataset> {
    spec.validate()?;
    let mut rng = stream_rng(seed, 1);
    let side = spec.image_side;
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let n = spec.num_classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..spec.samples_per_class {
        for class in 0..spec.num_classes {
            let related = spec.related.filter(|r| r.class == class);
            let shape_class = related.and_then(|r| r.shares_shape_with).unwrap_or(class);
            let theta = std::f64::consts::PI * shape_class as f64 / spec.num_classes as f64;
            let mut img = render_bar(side, theta, &mut rng);
            for v in img.iter_mut() {
                let noisy = if spec.noise_std > 0.0 {
                    *v + noise.sample(&mut rng)
                } else {
                    *v
                };
                *v = noisy.clamp(0.0, PIXEL_MAX).round();
            }
            if let Some(r) = related {
                img = ArtifactTransform::Brightness { alpha: r.alpha }.apply(&img, &[1, side, side])?;
            }
            data.extend(img);
            labels.push(class);
        }
    }
    Ok(ConceptDataset {
        inputs: Tensor::new(vec![n, 1, side, side], data)?,
        flags: vec![false; n],
        labels,
        split: SplitTag::Train,
        num_classes: spec.num_classes,
    })
}

fn render_bar(side: usize, theta: f64, rng: &mut impl Rng) -> Vec<f64> {
    let s = side as f64;
    let cx = rng.gen_range(0.35 * s..0.65 * s);
    let cy = rng.gen_range(0.35 * s..0.65 * s);
    let half_len = rng.gen_range(0.22 * s..0.32 * s);
    let intensity = rng.gen_range(150.0..230.0);
    let (dx, dy) = (theta.cos(), theta.sin());
    let mut img = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let px = x as f64 + 0.5 - cx;
            let py = y as f64 + 0.5 - cy;
            let along = (px * dx + py * dy).clamp(-half_len, half_len);
            let ex = px - along * dx;
            let ey = py - along * dy;
            let dist = (ex * ex + ey * ey).sqrt();
            if dist < 1.1 {
                img[y * side + x] = intensity;
            }
        }
    }
    img
}

/// Class-stratified split by fractions (the remainder goes to the test split).
pub fn stratified_split(
    dataset: &ConceptDataset,
    train_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<(ConceptDataset, ConceptDataset, ConceptDataset)> {
    if !(train_fraction > 0.0 && val_fraction >= 0.0 && train_fraction + val_fraction <= 1.0) {
        return Err(Error::InvalidParameter("split fractions out of range".into()));
    }
    let mut rng = stream_rng(seed, 2);
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for class in 0..dataset.num_classes {
        let mut idx = dataset.class_indices(class);
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_tr = (train_fraction * n as f64).round() as usize;
        let n_va = ((val_fraction * n as f64).round() as usize).min(n - n_tr);
        tr.extend_from_slice(&idx[..n_tr]);
        va.extend_from_slice(&idx[n_tr..n_tr + n_va]);
        te.extend_from_slice(&idx[n_tr + n_va..]);
    }
    for v in [&mut tr, &mut va, &mut te] {
        v.sort_unstable();
    }
    let mut train = dataset.subset(&tr);
    train.split = SplitTag::Train;
    let mut val = dataset.subset(&va);
    val.split = SplitTag::Val;
    let mut test = dataset.subset(&te);
    test.split = SplitTag::TestClean;
    Ok((train, val, test))
}

/// Inserts the artifact into `round(p_bias * |biased class|)` samples of the
/// biased class, plus label-flipping leakage into other classes.
pub fn inject_bias(dataset: &ConceptDataset, spec: &BiasSpec, seed: u64) -> Result<ConceptDataset> {
    spec.validate()?;
    if spec.biased_class >= dataset.num_classes {
        return Err(Error::InvalidParameter(format!(
            "biased class {} not among {} classes",
            spec.biased_class, dataset.num_classes
        )));
    }
    let mut members = dataset.class_indices(spec.biased_class);
    if members.is_empty() {
        return Err(Error::Empty(format!("biased class {}", spec.biased_class)));
    }
    let mut out = dataset.clone();
    let mut rng = stream_rng(seed, 3);
    let count = (spec.p_bias * members.len() as f64).round() as usize;
    members.shuffle(&mut rng);
    let mut chosen = members[..count].to_vec();
    chosen.sort_unstable();
    out.transform_samples(&chosen, &spec.transform)?;

    if spec.leak_rate > 0.0 {
        let mut others: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] != spec.biased_class)
            .collect();
        let leak = (spec.leak_rate * others.len() as f64).round() as usize;
        others.shuffle(&mut rng);
        let mut leaked = others[..leak].to_vec();
        leaked.sort_unstable();
        out.transform_samples(&leaked, &spec.transform)?;
        for i in leaked {
            out.labels[i] = spec.biased_class;
        }
    }
    Ok(out)
}

/// `(clean, biased)` copies of a test split; the biased copy carries the
/// artifact on every sample with labels unchanged.
pub fn make_eval_pair(
    dataset: &ConceptDataset,
    spec: &BiasSpec,
) -> Result<(ConceptDataset, ConceptDataset)> {
    if dataset.flags.iter().any(|&f| f) {
        return Err(Error::InvalidParameter(
            "evaluation pairs are built from an artifact-free split".into(),
        ));
    }
    let mut clean = dataset.clone();
    clean.split = SplitTag::TestClean;
    let mut biased = dataset.clone();
    biased.split = SplitTag::TestBiased;
    let all: Vec<usize> = (0..biased.len()).collect();
    biased.transform_samples(&all, &spec.transform)?;
    Ok((clean, biased))
}
