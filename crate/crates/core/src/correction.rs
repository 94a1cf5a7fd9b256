//! Model correction: RR-ClArC, A-ClArC, P-ClArC, RRR and vanilla fine-tuning.
//!
//! Latent-space methods require the feature extractor (layers up to and
//! including the split layer) to stay frozen, so the CAV keeps describing the
//! same direction throughout fine-tuning.
//!
//! The RR-ClArC penalty is a function of the directional derivative
//! `J = grad_a [m . f(a)] . h`. Its parameter gradient is obtained by pushing
//! `h` forward through the head as a tangent and running one reverse sweep
//! that uses the tangents in place of the layer inputs; for the
//! log-probability target the curvature of the log-softmax adds a second
//! seed to the ordinary backward pass. The RRR penalty is handled the same
//! way with the tangent placed at the input.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cav::Cav;
use crate::data::ConceptDataset;
use crate::error::{Error, Result};
use crate::net::{cross_entropy, softmax_row, ForwardPass, GradientRecord, LayeredModel};
use crate::rng::stream_rng;
use crate::tensor::{dot, norm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnnotationMode {
    AllOnes,
    /// Fresh `{-1, +1}` signs per sample and step.
    RandomSign { seed: u64 },
    OneHot { target_class: usize },
}

impl AnnotationMode {
    pub fn name(&self) -> &'static str {
        match self {
            AnnotationMode::AllOnes => "all_ones",
            AnnotationMode::RandomSign { .. } => "random_sign",
            AnnotationMode::OneHot { .. } => "one_hot",
        }
    }

    /// Draws the annotation vector `m` for one sample.
    pub fn vector(&self, k: usize, rng: &mut impl Rng) -> Vec<f64> {
        match *self {
            AnnotationMode::AllOnes => vec![1.0; k],
            AnnotationMode::RandomSign { .. } => (0..k)
                .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                .collect(),
            AnnotationMode::OneHot { target_class } => {
                (0..k).map(|i| if i == target_class { 1.0 } else { 0.0 }).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `(g . h)^2`
    Squared,
    /// `|g . h|`
    Absolute,
    /// `(g . h / (||g|| ||h||))^2`
    Cosine,
}

impl Aggregation {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Squared => "squared",
            Self::Absolute => "absolute",
            Self::Cosine => "cosine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientTarget {
    /// `m . logits`
    Logits,
    /// `sum_k log p_k` (annotation ignored)
    LogProbs,
}

impl GradientTarget {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Logits => "logits",
            Self::LogProbs => "log_probs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    RrClarc,
    AClarc,
    PClarc,
    Rrr,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::RrClarc => "rr_clarc",
            Method::AClarc => "a_clarc",
            Method::PClarc => "p_clarc",
            Method::Rrr => "rrr",
        }
    }

    pub fn uses_cav(&self) -> bool {
        matches!(self, Method::RrClarc | Method::AClarc | Method::PClarc)
    }

    pub fn uses_lambda(&self) -> bool {
        matches!(self, Method::RrClarc | Method::Rrr)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    pub method: Method,
    pub lambda: f64,
    pub annotation: AnnotationMode,
    pub aggregation: Aggregation,
    pub gradient_target: GradientTarget,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip applied before every SGD step.
    pub grad_clip: Option<f64>,
    pub cav: Option<Cav>,
    /// Per-sample binary input mask for RRR.
    pub mask: Option<Vec<f64>>,
}

impl CorrectionConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            lambda: 0.0,
            annotation: AnnotationMode::RandomSign { seed: 0 },
            aggregation: Aggregation::Squared,
            gradient_target: GradientTarget::Logits,
            epochs: 10,
            learning_rate: 0.05,
            batch_size: 32,
            grad_clip: None,
            cav: None,
            mask: None,
        }
    }

    pub fn validate(&self, model: &LayeredModel) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let AnnotationMode::OneHot { target_class } = self.annotation {
            if target_class >= model.num_classes() {
                return Err(Error::Config(format!(
                    "one-hot target {target_class} for {} classes",
                    model.num_classes()
                )));
            }
        }
        if self.method.uses_cav() {
            let cav = self
                .cav
                .as_ref()
                .ok_or_else(|| Error::Config(format!("{} needs a CAV", self.method)))?;
            if cav.layer_index != model.split_index() {
                return Err(Error::Config(format!(
                    "CAV computed at layer {} but the model splits at {}",
                    cav.layer_index,
                    model.split_index()
                )));
            }
            if cav.dim() != model.latent_dim() {
                return Err(Error::Config(format!(
                    "CAV width {} differs from latent width {}",
                    cav.dim(),
                    model.latent_dim()
                )));
            }
            if cav.norm <= 0.0 {
                return Err(Error::Config("CAV has zero norm".into()));
            }
            if model.frozen_upto().map_or(true, |f| f < model.split_index()) {
                return Err(Error::Config(
                    "latent-space correction requires layers up to the split to be frozen".into(),
                ));
            }
        }
        if self.method == Method::Rrr {
            let mask = self
                .mask
                .as_ref()
                .ok_or_else(|| Error::Config("rrr needs an input mask".into()))?;
            let n: usize = model.input_shape().iter().product();
            if mask.len() != n {
                return Err(Error::Shape(format!("mask of {} values for inputs of {n}", mask.len())));
            }
        }
        Ok(())
    }
}

/// Mean projections `a(x) . h_hat` over non-artifact and artifact samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClarcStats {
    pub mean_clean_projection: f64,
    pub mean_artifact_projection: f64,
}

impl ClarcStats {
    pub fn from_activations(activations: &Tensor, flags: &[bool], cav: &Cav) -> Result<Self> {
        let unit = cav
            .unit_direction()
            .ok_or_else(|| Error::Degenerate("CAV has zero norm".into()))?;
        if activations.batch() != flags.len() || activations.sample_len() != unit.len() {
            return Err(Error::Shape("activations, flags and CAV disagree".into()));
        }
        let (mut clean, mut art) = ((0.0, 0usize), (0.0, 0usize));
        for (i, &f) in flags.iter().enumerate() {
            let z = dot(activations.sample(i), &unit);
            let slot = if f { &mut art } else { &mut clean };
            slot.0 += z;
            slot.1 += 1;
        }
        if clean.1 == 0 || art.1 == 0 {
            return Err(Error::Degenerate(
                "ClArC statistics need artifact and artifact-free samples".into(),
            ));
        }
        let stats = Self {
            mean_clean_projection: clean.0 / clean.1 as f64,
            mean_artifact_projection: art.0 / art.1 as f64,
        };
        crate::error::ensure_finite(
            &[stats.mean_clean_projection, stats.mean_artifact_projection],
            "ClArC statistics",
        )?;
        Ok(stats)
    }

    /// Statistics of a dataset (`[0, 255]` inputs) under the model's extractor.
    pub fn compute(model: &LayeredModel, data: &ConceptDataset, cav: &Cav) -> Result<Self> {
        let acts = model.extract_activations(&data.model_inputs())?;
        Self::from_activations(&acts, &data.flags, cav)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    /// Move every sample to the mean artifact projection (A-ClArC).
    AddArtifact,
    /// Move every sample to the mean clean projection (P-ClArC).
    ProjectClean,
}

/// Per-sample offsets `gamma(x) h` with
/// `gamma(x) = (z_target - a(x) . h_hat) / ||h||`.
pub fn clarc_offsets(activations: &Tensor, cav: &Cav, stats: &ClarcStats, mode: PerturbMode) -> Result<Tensor> {
    let unit = cav
        .unit_direction()
        .ok_or_else(|| Error::Degenerate("CAV has zero norm".into()))?;
    if activations.shape().len() != 2 || activations.sample_len() != unit.len() {
        return Err(Error::Shape(format!(
            "activations {:?} do not match CAV width {}",
            activations.shape(),
            unit.len()
        )));
    }
    let target = match mode {
        PerturbMode::AddArtifact => stats.mean_artifact_projection,
        PerturbMode::ProjectClean => stats.mean_clean_projection,
    };
    let mut out = Tensor::zeros(activations.shape().to_vec());
    for i in 0..activations.batch() {
        let gamma = (target - dot(activations.sample(i), &unit)) / cav.norm;
        for (o, h) in out.sample_mut(i).iter_mut().zip(&cav.direction) {
            *o = gamma * h;
        }
    }
    Ok(out)
}

/// `a'(x) = a(x) + gamma(x) h`, so that `a'(x) . h_hat` equals the target.
pub fn clarc_perturb(activations: &Tensor, cav: &Cav, stats: &ClarcStats, mode: PerturbMode) -> Result<Tensor> {
    let offsets = clarc_offsets(activations, cav, stats, mode)?;
    let mut out = activations.clone();
    for (a, o) in out.data_mut().iter_mut().zip(offsets.data()) {
        *a += o;
    }
    Ok(out)
}

/// Logits with the ClArC perturbation applied at the split layer; a
/// convolutional split output receives the offset at every spatial position.
pub fn forward_perturbed(
    model: &LayeredModel,
    batch: &Tensor,
    cav: &Cav,
    stats: &ClarcStats,
    mode: PerturbMode,
) -> Result<ForwardPass> {
    let split = model.split_index();
    let ext = model.run_layers(0, split + 1, batch.clone())?;
    let split_out = ext.output();
    let pooled = model.pool_latent(split_out)?;
    let offsets = clarc_offsets(&pooled.values, cav, stats, mode)?;
    let shifted = model.broadcast_latent(split_out, &offsets)?;
    model.forward_from(split + 1, shifted)
}

/// RR-ClArC penalty for one sample given `g = grad_a [m . f(a)]`.
pub fn rr_loss(latent_grad: &[f64], cav: &Cav, aggregation: Aggregation) -> Result<f64> {
    if cav.norm <= 0.0 {
        return Err(Error::Degenerate("CAV has zero norm".into()));
    }
    if latent_grad.len() != cav.dim() {
        return Err(Error::Shape(format!(
            "latent gradient of width {} for CAV width {}",
            latent_grad.len(),
            cav.dim()
        )));
    }
    let j = dot(latent_grad, &cav.direction);
    Ok(match aggregation {
        Aggregation::Squared => j * j,
        Aggregation::Absolute => j.abs(),
        Aggregation::Cosine => {
            let g = norm(latent_grad);
            if g < ZERO_GRAD {
                0.0
            } else {
                let c = j / (g * cav.norm);
                c * c
            }
        }
    })
}

const ZERO_GRAD: f64 = 1e-12;

/// Masked squared input gradient `sum (mask * grad_x)^2`.
pub fn rrr_loss(input_grad: &[f64], mask: &[f64]) -> Result<f64> {
    if input_grad.len() != mask.len() {
        return Err(Error::Shape(format!(
            "mask of {} values for a gradient of {}",
            mask.len(),
            input_grad.len()
        )));
    }
    Ok(input_grad
        .iter()
        .zip(mask)
        .map(|(g, m)| (m * g) * (m * g))
        .sum())
}

/// Objective value and parameter gradient for one minibatch.
#[derive(Debug, Clone)]
pub struct StepObjective {
    pub cross_entropy: f64,
    /// Mean method penalty (before multiplying by lambda).
    pub penalty: f64,
    pub grads: GradientRecord,
}

impl StepObjective {
    pub fn total(&self, lambda: f64) -> f64 {
        self.cross_entropy + lambda * self.penalty
    }
}

/// Per-minibatch inputs that are drawn outside the objective.
#[derive(Debug, Clone, Default)]
pub struct StepContext {
    /// Annotation vectors `(batch, k)` for RR-ClArC with logit targets.
    pub annotations: Option<Tensor>,
    /// Statistics for A-ClArC.
    pub stats: Option<ClarcStats>,
}

/// Scalar target `s(z)` whose directional derivative is penalized: returns
/// the per-sample gradient `ds/dz` and, for curved targets, a closure-free
/// description of the Hessian product.
struct Target {
    weights: Tensor,
    /// Softmax probabilities for the log-probability target.
    probs: Option<Tensor>,
}

impl Target {
    fn logits(annotations: Tensor) -> Self {
        Self {
            weights: annotations,
            probs: None,
        }
    }

    /// `s = sum_k log p_k`: `ds/dz = 1 - K p`.
    fn log_probs(logits: &Tensor) -> Self {
        let k = logits.sample_len();
        let mut weights = Tensor::zeros(logits.shape().to_vec());
        let mut probs = Tensor::zeros(logits.shape().to_vec());
        for n in 0..logits.batch() {
            let p = softmax_row(logits.sample(n));
            for (c, pc) in p.iter().enumerate() {
                weights.sample_mut(n)[c] = 1.0 - k as f64 * pc;
            }
            probs.sample_mut(n).copy_from_slice(&p);
        }
        Self {
            weights,
            probs: Some(probs),
        }
    }

    /// `H u` for sample `n` (zero for the linear logit target).
    fn hessian_times(&self, n: usize, u: &[f64]) -> Vec<f64> {
        match &self.probs {
            None => vec![0.0; u.len()],
            Some(p) => {
                let p = p.sample(n);
                let k = p.len() as f64;
                let pu = dot(p, u);
                p.iter().zip(u).map(|(pi, ui)| -k * (pi * ui - pi * pu)).collect()
            }
        }
    }
}

fn row_scaled(t: &Tensor, coeffs: &[f64]) -> Tensor {
    let mut out = t.clone();
    for (n, c) in coeffs.iter().enumerate() {
        out.sample_mut(n).iter_mut().for_each(|v| *v *= c);
    }
    out
}

/// Cross-entropy plus the method penalty for one minibatch (inputs on the
/// model scale), with the gradient of `ce + lambda * penalty`.
pub fn step_objective(
    model: &LayeredModel,
    batch: &Tensor,
    labels: &[usize],
    config: &CorrectionConfig,
    ctx: &StepContext,
) -> Result<StepObjective> {
    let bsz = batch.batch() as f64;
    let split_in = model.split_index() + 1;
    let pass = match config.method {
        Method::AClarc => {
            let cav = config.cav.as_ref().ok_or(Error::Config("a_clarc needs a CAV".into()))?;
            let stats = ctx.stats.as_ref().ok_or(Error::MissingStats)?;
            forward_perturbed(model, batch, cav, stats, PerturbMode::AddArtifact)?
        }
        _ => model.forward_pass(batch)?,
    };
    let logits = pass.output().clone();
    let (ce, mut seed) = cross_entropy(&logits, labels)?;
    let lambda = config.lambda;
    let mut penalty = 0.0;
    let mut extra: Option<Vec<Option<crate::net::ParamGrad>>> = None;

    match config.method {
        Method::RrClarc => {
            let cav = config.cav.as_ref().ok_or(Error::Config("rr_clarc needs a CAV".into()))?;
            let target = match config.gradient_target {
                GradientTarget::Logits => Target::logits(
                    ctx.annotations
                        .clone()
                        .ok_or_else(|| Error::Config("missing annotation vectors".into()))?,
                ),
                GradientTarget::LogProbs => Target::log_probs(&logits),
            };
            if target.weights.shape() != logits.shape() {
                return Err(Error::Shape("annotation vectors do not match logits".into()));
            }
            let split_out = pass.input_of(split_in).unwrap();
            let pooled = model.pool_latent(split_out)?;
            let m = cav.dim();
            let dir = Tensor::new(
                vec![batch.batch(), m],
                (0..batch.batch()).flat_map(|_| cav.direction.iter().copied()).collect(),
            )?;
            let th = model.latent_tangent(&pooled, split_out, &dir)?;
            let tangents_h = model.tangent_forward(&pass, split_in, th)?;
            let u_h = tangents_h.last().unwrap();
            let jvp: Vec<f64> = (0..batch.batch())
                .map(|n| dot(target.weights.sample(n), u_h.sample(n)))
                .collect();

            // per-sample loss and d loss / d jvp (c_h); cosine also needs the
            // gradient norm term (c_g) with the latent gradient as tangent
            let mut c_h = vec![0.0; jvp.len()];
            let mut c_g = vec![0.0; jvp.len()];
            let mut latent_g = None;
            match config.aggregation {
                Aggregation::Squared => {
                    for (n, &j) in jvp.iter().enumerate() {
                        penalty += j * j;
                        c_h[n] = 2.0 * j;
                    }
                }
                Aggregation::Absolute => {
                    for (n, &j) in jvp.iter().enumerate() {
                        penalty += j.abs();
                        c_h[n] = if j > 0.0 {
                            1.0
                        } else if j < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                }
                Aggregation::Cosine => {
                    let g = model
                        .backward_latent_only(&pass, &target.weights, false)?
                        .latent_grad
                        .expect("latent gradient requested");
                    let h2 = cav.norm * cav.norm;
                    for (n, &j) in jvp.iter().enumerate() {
                        let gg = dot(g.sample(n), g.sample(n));
                        if gg.sqrt() < ZERO_GRAD {
                            continue;
                        }
                        penalty += j * j / (gg * h2);
                        c_h[n] = 2.0 * j / (gg * h2);
                        c_g[n] = -j * j / (gg * gg * h2);
                    }
                    latent_g = Some(g);
                }
            }
            penalty /= bsz;

            if lambda != 0.0 {
                let scale = lambda / bsz;
                let coeff_h: Vec<f64> = c_h.iter().map(|c| c * scale).collect();
                let mut grads = model.tangent_param_grads(
                    &pass,
                    split_in,
                    &tangents_h,
                    &row_scaled(&target.weights, &coeff_h),
                )?;
                for n in 0..batch.batch() {
                    let hu = target.hessian_times(n, u_h.sample(n));
                    for (s, v) in seed.sample_mut(n).iter_mut().zip(hu) {
                        *s += coeff_h[n] * v;
                    }
                }
                if let Some(g) = latent_g {
                    let tg = model.latent_tangent(&pooled, split_out, &g)?;
                    let tangents_g = model.tangent_forward(&pass, split_in, tg)?;
                    let u_g = tangents_g.last().unwrap();
                    let coeff_g: Vec<f64> = c_g.iter().map(|c| c * scale).collect();
                    let grads_g = model.tangent_param_grads(
                        &pass,
                        split_in,
                        &tangents_g,
                        &row_scaled(&target.weights, &coeff_g),
                    )?;
                    // d||g||^2 = 2 d(w . J g_fixed): factor 2 on both parts
                    let mut acc = GradientRecord::empty(model.num_layers());
                    acc.parameter_grads = grads;
                    acc.add_param_grads(&grads_g, 2.0);
                    grads = acc.parameter_grads;
                    for n in 0..batch.batch() {
                        let hu = target.hessian_times(n, u_g.sample(n));
                        for (s, v) in seed.sample_mut(n).iter_mut().zip(hu) {
                            *s += 2.0 * coeff_g[n] * v;
                        }
                    }
                }
                extra = Some(grads);
            }
        }
        Method::Rrr => {
            let mask = config.mask.as_ref().ok_or(Error::Config("rrr needs a mask".into()))?;
            let target = Target::log_probs(&logits);
            let gx = model
                .backward_latent_only(&pass, &target.weights, true)?
                .input_grad
                .expect("input gradient requested");
            let mut v = Tensor::zeros(gx.shape().to_vec());
            for n in 0..batch.batch() {
                let g = gx.sample(n);
                penalty += rrr_loss(g, mask)?;
                for ((vi, gi), mi) in v.sample_mut(n).iter_mut().zip(g).zip(mask) {
                    *vi = 2.0 * mi * mi * gi;
                }
            }
            penalty /= bsz;
            if lambda != 0.0 {
                let scale = lambda / bsz;
                let tangents = model.tangent_forward(&pass, 0, v)?;
                let u = tangents.last().unwrap();
                let w = row_scaled(&target.weights, &vec![scale; batch.batch()]);
                extra = Some(model.tangent_param_grads(&pass, 0, &tangents, &w)?);
                for n in 0..batch.batch() {
                    let hu = target.hessian_times(n, u.sample(n));
                    for (s, h) in seed.sample_mut(n).iter_mut().zip(hu) {
                        *s += scale * h;
                    }
                }
            }
        }
        _ => {}
    }

    let mut grads = model.backward(&pass, &seed, false, false)?;
    if let Some(e) = extra {
        grads.add_param_grads(&e, 1.0);
    }
    let total = ce + lambda * penalty;
    if !total.is_finite() {
        return Err(Error::NonFinite("fine-tuning loss".into()));
    }
    Ok(StepObjective {
        cross_entropy: ce,
        penalty,
        grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub cross_entropy: f64,
    pub penalty: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub model: LayeredModel,
    pub epoch_losses: Vec<EpochLoss>,
    /// ClArC statistics on the training data (ClArC methods only).
    pub stats: Option<ClarcStats>,
}

/// Minibatch SGD on `cross_entropy + lambda * penalty` for `config.epochs`
/// epochs. The model's `frozen_upto` is respected; for latent-space methods
/// it must cover the split layer.
pub fn fine_tune(
    model: &LayeredModel,
    data: &ConceptDataset,
    config: &CorrectionConfig,
    seed: u64,
) -> Result<FineTuneOutcome> {
    config.validate(model)?;
    data.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training data".into()));
    }
    let inputs = data.model_inputs();
    let mut model = model.clone();
    let stats = match (config.method.uses_cav(), &config.cav) {
        (true, Some(cav)) => Some(ClarcStats::from_activations(
            &model.extract_activations(&inputs)?,
            &data.flags,
            cav,
        )?),
        _ => None,
    };
    let k = model.num_classes();
    let mut order_rng = stream_rng(seed, 20);
    let ann_seed = match config.annotation {
        AnnotationMode::RandomSign { seed: s } => s,
        _ => 0,
    };
    let mut ann_rng = stream_rng(seed ^ ann_seed.rotate_left(17), 21);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let (mut ce_sum, mut pen_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let x = inputs.select(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut ctx = StepContext {
                annotations: None,
                stats,
            };
            if config.method == Method::RrClarc
                && config.gradient_target == GradientTarget::Logits
            {
                let mut a = Vec::with_capacity(chunk.len() * k);
                for _ in chunk {
                    a.extend(config.annotation.vector(k, &mut ann_rng));
                }
                ctx.annotations = Some(Tensor::new(vec![chunk.len(), k], a)?);
            }
            let mut obj = step_objective(&model, &x, &y, config, &ctx)?;
            if let Some(max_norm) = config.grad_clip {
                let gn = obj.grads.param_norm();
                if gn > max_norm {
                    obj.grads.scale(max_norm / gn);
                }
            }
            model.sgd_step(&obj.grads, config.learning_rate)?;
            ce_sum += obj.cross_entropy;
            pen_sum += obj.penalty;
            batches += 1;
        }
        let ce = ce_sum / batches as f64;
        let pen = pen_sum / batches as f64;
        epoch_losses.push(EpochLoss {
            epoch,
            cross_entropy: ce,
            penalty: pen,
            total: ce + config.lambda * pen,
        });
    }
    Ok(FineTuneOutcome {
        model,
        epoch_losses,
        stats,
    })
}

/// Logits for a batch on the model scale; P-ClArC projects the artifact
/// direction out at the split layer.
pub fn predict_corrected(
    model: &LayeredModel,
    batch: &Tensor,
    config: &CorrectionConfig,
    stats: Option<&ClarcStats>,
) -> Result<Tensor> {
    match config.method {
        Method::PClarc => {
            let stats = stats.ok_or(Error::MissingStats)?;
            let cav = config
                .cav
                .as_ref()
                .ok_or_else(|| Error::Config("p_clarc needs a CAV".into()))?;
            Ok(forward_perturbed(model, batch, cav, stats, PerturbMode::ProjectClean)?
                .output()
                .clone())
        }
        _ => model.forward(batch),
    }
}

/// Latent and input gradients of `sum_n weights[n] . f(x_n)`.
#[derive(Debug, Clone)]
pub struct DeployedGradients {
    /// `(batch, m)`, with respect to the pooled latent.
    pub latent: Tensor,
    pub input: Option<Tensor>,
}

/// Gradients of the model as deployed. With `projection` set, the P-ClArC
/// projection at the split layer is part of the differentiated function.
pub fn deployed_gradients(
    model: &LayeredModel,
    batch: &Tensor,
    weights: &Tensor,
    projection: Option<(&Cav, &ClarcStats)>,
    want_input: bool,
) -> Result<DeployedGradients> {
    let Some((cav, stats)) = projection else {
        let pass = model.forward_pass(batch)?;
        let rec = model.backward_latent_only(&pass, weights, want_input)?;
        return Ok(DeployedGradients {
            latent: rec.latent_grad.expect("latent gradient requested"),
            input: rec.input_grad,
        });
    };
    let split_in = model.split_index() + 1;
    let ext = model.run_layers(0, split_in, batch.clone())?;
    let split_out = ext.output();
    let pooled = model.pool_latent(split_out)?;
    let offsets = clarc_offsets(&pooled.values, cav, stats, PerturbMode::ProjectClean)?;
    let shifted = model.broadcast_latent(split_out, &offsets)?;
    let head = model.forward_from(split_in, shifted)?;
    if head.output().shape() != weights.shape() {
        return Err(Error::Shape("output weights do not match logits".into()));
    }
    let delta = model.pull_back(&head, model.num_layers(), weights.clone())?;

    // offset = -h_hat (h_hat . a) + const, broadcast over positions
    let unit = cav.unit_direction().expect("validated CAV has positive norm");
    let summed = model.sum_channels(&delta);
    let m = unit.len();
    let mut corr = Tensor::zeros(vec![batch.batch(), m]);
    let mut latent = Tensor::zeros(vec![batch.batch(), m]);
    for n in 0..batch.batch() {
        let p = dot(&unit, summed.sample(n));
        for c in 0..m {
            corr.sample_mut(n)[c] = -unit[c] * p;
            latent.sample_mut(n)[c] = delta.sample(n)[pooled.positions[n * m + c]] - unit[c] * p;
        }
    }
    let input = if want_input {
        let mut total = model.latent_tangent(&pooled, split_out, &corr)?;
        for (t, d) in total.data_mut().iter_mut().zip(delta.data()) {
            *t += d;
        }
        Some(model.pull_back(&ext, split_in, total)?)
    } else {
        None
    };
    Ok(DeployedGradients { latent, input })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cav::{fit_signal_cav, ConceptSample};

    fn cav(h: &[f64]) -> Cav {
        let a: Vec<f64> = h.iter().map(|v| 2.0 * v).collect();
        fit_signal_cav(&[
            ConceptSample { activation: a, concept: true },
            ConceptSample { activation: vec![0.0; h.len()], concept: false },
        ])
        .unwrap()
    }

    #[test]
    fn orthogonal_gradient_has_zero_loss() {
        let c = cav(&[1.0, 0.0]);
        for agg in [Aggregation::Squared, Aggregation::Absolute, Aggregation::Cosine] {
            assert_eq!(rr_loss(&[0.0, 2.0], &c, agg).unwrap(), 0.0);
        }
    }

    #[test]
    fn gradient_equal_to_h_gives_norm_to_fourth() {
        let h = [0.5, -1.5, 2.0];
        let c = cav(&h);
        let n2: f64 = h.iter().map(|v| v * v).sum();
        assert!((rr_loss(&h, &c, Aggregation::Squared).unwrap() - n2 * n2).abs() < 1e-12);
        assert!((rr_loss(&h, &c, Aggregation::Cosine).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_cav_rejected() {
        let mut c = cav(&[1.0]);
        c.direction = vec![0.0];
        c.norm = 0.0;
        assert!(rr_loss(&[1.0], &c, Aggregation::Squared).is_err());
    }

    #[test]
    fn axis_aligned_projection() {
        let c = cav(&[1.0, 0.0]);
        let stats = ClarcStats {
            mean_clean_projection: 0.0,
            mean_artifact_projection: 4.0,
        };
        let a = Tensor::new(vec![1, 2], vec![3.0, 5.0]).unwrap();
        let out = clarc_perturb(&a, &c, &stats, PerturbMode::ProjectClean).unwrap();
        assert_eq!(out.data(), &[0.0, 5.0]);
        let fixed = Tensor::new(vec![1, 2], vec![0.0, 5.0]).unwrap();
        assert_eq!(
            clarc_perturb(&fixed, &c, &stats, PerturbMode::ProjectClean).unwrap(),
            fixed
        );
    }

    #[test]
    fn rrr_loss_masks() {
        let g = [1.0, -2.0, 3.0];
        assert_eq!(rrr_loss(&g, &[0.0; 3]).unwrap(), 0.0);
        assert_eq!(rrr_loss(&g, &[1.0; 3]).unwrap(), 14.0);
        assert!(rrr_loss(&g, &[1.0; 2]).is_err());
    }

    #[test]
    fn annotation_vectors() {
        let mut rng = stream_rng(0, 0);
        assert_eq!(AnnotationMode::AllOnes.vector(3, &mut rng), vec![1.0; 3]);
        assert_eq!(
            AnnotationMode::OneHot { target_class: 1 }.vector(3, &mut rng),
            vec![0.0, 1.0, 0.0]
        );
        let v = AnnotationMode::RandomSign { seed: 0 }.vector(50, &mut rng);
        assert!(v.iter().all(|&s| s == 1.0 || s == -1.0));
        assert!(v.iter().any(|&s| s == 1.0) && v.iter().any(|&s| s == -1.0));
    }
}
