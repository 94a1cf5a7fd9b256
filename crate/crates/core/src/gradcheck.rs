//! Central-difference checks of the analytic gradients.
//!
//! Every layer is piecewise linear, so a function of the parameters or
//! inputs is non-differentiable where a ReLU input or a pooling argmax
//! switches. Coordinates whose one-sided slopes disagree at the step size
//! straddle such a kink; they are skipped and counted.

use crate::cav::Cav;
use crate::correction::{
    clarc_offsets, deployed_gradients, step_objective, CorrectionConfig, PerturbMode, StepContext,
};
use crate::error::Result;
use crate::metrics::Predictor;
use crate::net::{LayerKind, LayeredModel};
use crate::tensor::{dot, Tensor};

pub const EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdCheck {
    /// `||fd - analytic|| / sqrt(||fd||^2 + ||analytic||^2)` over smooth coordinates.
    pub rel_error: f64,
    pub skipped: usize,
    pub total: usize,
}

impl FdCheck {
    /// Error below `tol` with under 5% of coordinates skipped.
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol && self.skipped * 20 < self.total
    }

    /// Worst error, pooled counts.
    pub fn merge(self, other: Self) -> Self {
        Self {
            rel_error: self.rel_error.max(other.rel_error),
            skipped: self.skipped + other.skipped,
            total: self.total + other.total,
        }
    }

    pub fn empty() -> Self {
        Self {
            rel_error: 0.0,
            skipped: 0,
            total: 0,
        }
    }
}

#[derive(Default)]
struct Accum {
    num: f64,
    den: f64,
    skipped: usize,
    total: usize,
}

impl Accum {
    fn add(&mut self, f0: f64, fp: f64, fm: f64, analytic: f64) {
        self.total += 1;
        let (fwd, bwd) = ((fp - f0) / EPS, (f0 - fm) / EPS);
        if (fwd - bwd).abs() > 1e-3 * (fwd.abs() + bwd.abs()) + 1e-6 {
            self.skipped += 1;
            return;
        }
        let fd = (fp - fm) / (2.0 * EPS);
        self.num += (fd - analytic) * (fd - analytic);
        self.den += fd * fd + analytic * analytic;
    }

    fn finish(self) -> FdCheck {
        FdCheck {
            rel_error: self.num.sqrt() / self.den.sqrt().max(1e-12),
            skipped: self.skipped,
            total: self.total,
        }
    }
}

/// Parameter gradients of one fine-tuning objective (cross-entropy plus
/// `lambda` times the method penalty) over every trainable coordinate.
pub fn objective_params(
    model: &LayeredModel,
    batch: &Tensor,
    labels: &[usize],
    config: &CorrectionConfig,
    ctx: &StepContext,
) -> Result<FdCheck> {
    let obj = step_objective(model, batch, labels, config, ctx)?;
    let f0 = obj.total(config.lambda);
    let mut acc = Accum::default();
    for (i, layer) in model.layers().iter().enumerate() {
        let Some(p) = &layer.params else { continue };
        if !model.is_trainable(i) {
            continue;
        }
        let g = obj.grads.parameter_grads[i]
            .as_ref()
            .expect("trainable layer has a gradient");
        for (is_weight, len) in [(true, p.weight.len()), (false, p.bias.len())] {
            for j in 0..len {
                let at = |d: f64| -> Result<f64> {
                    let mut m = model.clone();
                    let q = m.layers_mut()[i].params.as_mut().expect("layer has parameters");
                    let t = if is_weight { &mut q.weight } else { &mut q.bias };
                    t.data_mut()[j] += d;
                    Ok(step_objective(&m, batch, labels, config, ctx)?.total(config.lambda))
                };
                let analytic = if is_weight { g.weight.data()[j] } else { g.bias.data()[j] };
                acc.add(f0, at(EPS)?, at(-EPS)?, analytic);
            }
        }
    }
    Ok(acc.finish())
}

fn weighted(logits: &Tensor, weights: &Tensor) -> f64 {
    dot(logits.data(), weights.data())
}

/// Input gradient of `sum_n weights[n] . logits[n]` for the deployed model.
pub fn input_gradient(predictor: &Predictor, batch: &Tensor, weights: &Tensor) -> Result<FdCheck> {
    let grads = deployed_gradients(predictor.model, batch, weights, predictor.projection, true)?;
    let analytic = grads.input.expect("input gradient requested");
    let f0 = weighted(&predictor.logits(batch)?, weights);
    let mut acc = Accum::default();
    for j in 0..batch.len() {
        let at = |d: f64| -> Result<f64> {
            let mut x = batch.clone();
            x.data_mut()[j] += d;
            Ok(weighted(&predictor.logits(&x)?, weights))
        };
        acc.add(f0, at(EPS)?, at(-EPS)?, analytic.data()[j]);
    }
    Ok(acc.finish())
}

/// Logits of the deployed model with the split-layer output replaced.
pub fn logits_from_split(predictor: &Predictor, split_output: &Tensor) -> Result<Tensor> {
    let model = predictor.model;
    let start = model.split_index() + 1;
    let input = match predictor.projection {
        None => split_output.clone(),
        Some((cav, stats)) => {
            let pooled = model.pool_latent(split_output)?;
            let offsets = clarc_offsets(&pooled.values, cav, stats, PerturbMode::ProjectClean)?;
            model.broadcast_latent(split_output, &offsets)?
        }
    };
    Ok(model.forward_from(start, input)?.output().clone())
}

fn split_output(model: &LayeredModel, batch: &Tensor) -> Result<Tensor> {
    Ok(model.run_layers(0, model.split_index() + 1, batch.clone())?.output().clone())
}

/// Gradient with respect to the pooled latent `a`. Moving `a_c` moves the
/// split-layer entry that pooling selected for channel `c`.
pub fn latent_gradient(predictor: &Predictor, batch: &Tensor, weights: &Tensor) -> Result<FdCheck> {
    let model = predictor.model;
    let grads = deployed_gradients(model, batch, weights, predictor.projection, false)?;
    let out = split_output(model, batch)?;
    let pooled = model.pool_latent(&out)?;
    let m = model.latent_dim();
    let f0 = weighted(&logits_from_split(predictor, &out)?, weights);
    let mut acc = Accum::default();
    for n in 0..batch.batch() {
        for c in 0..m {
            let at = |d: f64| -> Result<f64> {
                let mut t = out.clone();
                t.sample_mut(n)[pooled.positions[n * m + c]] += d;
                Ok(weighted(&logits_from_split(predictor, &t)?, weights))
            };
            acc.add(f0, at(EPS)?, at(-EPS)?, grads.latent.sample(n)[c]);
        }
    }
    Ok(acc.finish())
}

/// Per sample, `(f(a + eps h) - f(a)) / eps` and `grad_a f . h` for
/// `f = weights[n] . logits[n]` of the plain model.
pub fn directional_derivatives(
    model: &LayeredModel,
    batch: &Tensor,
    weights: &Tensor,
    cav: &Cav,
    eps: f64,
) -> Result<Vec<(f64, f64)>> {
    let predictor = Predictor::plain(model);
    let grads = deployed_gradients(model, batch, weights, None, false)?;
    let out = split_output(model, batch)?;
    let pooled = model.pool_latent(&out)?;
    let m = model.latent_dim();
    let mut dir = Tensor::zeros(vec![batch.batch(), m]);
    for n in 0..batch.batch() {
        for (d, h) in dir.sample_mut(n).iter_mut().zip(&cav.direction) {
            *d = eps * h;
        }
    }
    let shifted = {
        let tangent = model.latent_tangent(&pooled, &out, &dir)?;
        let mut t = out.clone();
        for (a, b) in t.data_mut().iter_mut().zip(tangent.data()) {
            *a += b;
        }
        t
    };
    let before = logits_from_split(&predictor, &out)?;
    let after = logits_from_split(&predictor, &shifted)?;
    Ok((0..batch.batch())
        .map(|n| {
            let w = weights.sample(n);
            let fd = (dot(after.sample(n), w) - dot(before.sample(n), w)) / eps;
            (fd, dot(grads.latent.sample(n), &cav.direction))
        })
        .collect())
}

/// Small architectures covering dense and convolutional splits and heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmallArch {
    /// Dense layers only.
    Dense,
    /// Conv split layer, dense head.
    ConvToDense,
    /// Conv split layer, conv and pooling in the head.
    ConvHead,
}

impl SmallArch {
    pub const ALL: [SmallArch; 3] = [Self::Dense, Self::ConvToDense, Self::ConvHead];

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Self::Dense => vec![6],
            _ => vec![1, 6, 6],
        }
    }

    /// A randomly initialised model with three classes, split at layer 1.
    pub fn build(&self, seed: u64) -> Result<LayeredModel> {
        use LayerKind::*;
        let kinds = match self {
            Self::Dense => vec![
                Dense { in_features: 6, out_features: 5 },
                Relu,
                Dense { in_features: 5, out_features: 4 },
                Relu,
                Dense { in_features: 4, out_features: 3 },
            ],
            Self::ConvToDense => vec![
                Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 1 },
                Relu,
                MaxPool2d { kernel: 2, stride: 2 },
                Flatten,
                Dense { in_features: 8, out_features: 5 },
                Relu,
                Dense { in_features: 5, out_features: 3 },
            ],
            Self::ConvHead => vec![
                Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 1 },
                Relu,
                Conv2d { in_channels: 2, out_channels: 3, kernel: 2, stride: 1 },
                Relu,
                MaxPool2d { kernel: 3, stride: 3 },
                Flatten,
                Dense { in_features: 3, out_features: 3 },
            ],
        };
        LayeredModel::init(self.input_shape(), &kinds, 1, seed)
    }
}
