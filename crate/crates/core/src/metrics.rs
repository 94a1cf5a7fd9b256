//! Accuracy, TCAV, TCAV sensitivity, input-level bias relevance and
//! class-specific accuracy changes.

use serde::{Deserialize, Serialize};

use crate::cav::Cav;
use crate::correction::{deployed_gradients, predict_corrected, ClarcStats, CorrectionConfig, Method};
use crate::data::{ArtifactTransform, ConceptDataset};
use crate::error::{Error, Result};
use crate::net::{argmax_rows, LayeredModel};
use crate::tensor::{dot, norm, Tensor};

/// Samples are processed in chunks of this size.
const CHUNK: usize = 256;

/// A latent projection `g . h` with `|g . h| <= ZERO_PROJECTION_REL ||g|| ||h||`
/// counts as zero; this keeps round-off from deciding the sign when the
/// gradient is orthogonal to `h` by construction.
pub const ZERO_PROJECTION_REL: f64 = 1e-12;

/// A model as used at inference time, optionally with the P-ClArC
/// projection at the split layer.
#[derive(Debug, Clone, Copy)]
pub struct Predictor<'a> {
    pub model: &'a LayeredModel,
    pub projection: Option<(&'a Cav, &'a ClarcStats)>,
}

impl<'a> Predictor<'a> {
    pub fn plain(model: &'a LayeredModel) -> Self {
        Self { model, projection: None }
    }

    pub fn deployed(
        model: &'a LayeredModel,
        config: &'a CorrectionConfig,
        stats: Option<&'a ClarcStats>,
    ) -> Result<Self> {
        let projection = match config.method {
            Method::PClarc => {
                let cav = config
                    .cav
                    .as_ref()
                    .ok_or_else(|| Error::Config("p_clarc needs a CAV".into()))?;
                Some((cav, stats.ok_or(Error::MissingStats)?))
            }
            _ => None,
        };
        Ok(Self { model, projection })
    }

    /// Logits for a batch on the model scale.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        match self.projection {
            None => self.model.forward(batch),
            Some((cav, stats)) => {
                let mut cfg = CorrectionConfig::new(Method::PClarc);
                cfg.cav = Some(cav.clone());
                predict_corrected(self.model, batch, &cfg, Some(stats))
            }
        }
    }

    pub fn predict(&self, data: &ConceptDataset) -> Result<Vec<usize>> {
        let inputs = data.model_inputs();
        let mut out = Vec::with_capacity(data.len());
        for chunk in chunks(data.len()) {
            out.extend(argmax_rows(&self.logits(&inputs.select(&chunk))?));
        }
        Ok(out)
    }
}

fn chunks(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .step_by(CHUNK)
        .map(|s| (s..(s + CHUNK).min(n)).collect())
        .collect()
}

fn one_hot(batch: usize, k: usize, class: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![batch, k]);
    for n in 0..batch {
        t.sample_mut(n)[class] = 1.0;
    }
    t
}

fn check_target(model: &LayeredModel, target_class: usize) -> Result<()> {
    if target_class >= model.num_classes() {
        return Err(Error::InvalidParameter(format!(
            "target class {target_class} for {} classes",
            model.num_classes()
        )));
    }
    Ok(())
}

fn check_biased(data: &ConceptDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("biased set".into()));
    }
    if data.flags.iter().any(|f| !f) {
        return Err(Error::InvalidParameter(
            "every sample of the biased set must carry the artifact".into(),
        ));
    }
    Ok(())
}

/// Per-sample `grad_a f_target . h`.
pub fn latent_projections(
    predictor: &Predictor,
    data: &ConceptDataset,
    cav: &Cav,
    target_class: usize,
) -> Result<Vec<f64>> {
    check_target(predictor.model, target_class)?;
    if cav.dim() != predictor.model.latent_dim() {
        return Err(Error::Shape(format!(
            "CAV width {} differs from latent width {}",
            cav.dim(),
            predictor.model.latent_dim()
        )));
    }
    let inputs = data.model_inputs();
    let k = predictor.model.num_classes();
    let mut out = Vec::with_capacity(data.len());
    for chunk in chunks(data.len()) {
        let w = one_hot(chunk.len(), k, target_class);
        let g = deployed_gradients(predictor.model, &inputs.select(&chunk), &w, predictor.projection, false)?;
        for n in 0..chunk.len() {
            let gn = g.latent.sample(n);
            let p = dot(gn, &cav.direction);
            let zero = p.abs() <= ZERO_PROJECTION_REL * norm(gn) * cav.norm;
            out.push(if zero { 0.0 } else { p });
        }
    }
    Ok(out)
}

/// Fraction of strictly positive projections.
pub fn tcav_from_projections(projections: &[f64]) -> Result<f64> {
    if projections.is_empty() {
        return Err(Error::Empty("projections".into()));
    }
    Ok(projections.iter().filter(|&&p| p > 0.0).count() as f64 / projections.len() as f64)
}

/// Mean absolute projection.
pub fn sensitivity_from_projections(projections: &[f64]) -> Result<f64> {
    if projections.is_empty() {
        return Err(Error::Empty("projections".into()));
    }
    Ok(projections.iter().map(|p| p.abs()).sum::<f64>() / projections.len() as f64)
}

/// Fraction of artifact samples whose target-logit latent gradient has a
/// positive projection onto `h`.
pub fn tcav_score(model: &LayeredModel, biased: &ConceptDataset, cav: &Cav, target_class: usize) -> Result<f64> {
    check_biased(biased)?;
    tcav_from_projections(&latent_projections(&Predictor::plain(model), biased, cav, target_class)?)
}

/// Mean `|grad_a f_target . h|` over artifact samples.
pub fn tcav_sensitivity(model: &LayeredModel, biased: &ConceptDataset, cav: &Cav, target_class: usize) -> Result<f64> {
    check_biased(biased)?;
    sensitivity_from_projections(&latent_projections(&Predictor::plain(model), biased, cav, target_class)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub r_bias: f64,
    /// Samples with all-zero relevance.
    pub num_excluded: usize,
}

/// Mean fraction of absolute gradient-times-input relevance inside the mask.
pub fn bias_relevance(
    predictor: &Predictor,
    biased: &ConceptDataset,
    mask: &[f64],
    target_class: usize,
) -> Result<RelevanceReport> {
    check_biased(biased)?;
    check_target(predictor.model, target_class)?;
    let inputs = biased.model_inputs();
    if mask.len() != inputs.sample_len() {
        return Err(Error::Shape(format!(
            "mask of {} values for inputs of {}",
            mask.len(),
            inputs.sample_len()
        )));
    }
    let k = predictor.model.num_classes();
    let (mut sum, mut used, mut excluded) = (0.0, 0usize, 0usize);
    for chunk in chunks(biased.len()) {
        let x = inputs.select(&chunk);
        let w = one_hot(chunk.len(), k, target_class);
        let g = deployed_gradients(predictor.model, &x, &w, predictor.projection, true)?
            .input
            .expect("input gradient requested");
        for n in 0..chunk.len() {
            let (mut inside, mut total) = (0.0, 0.0);
            for ((xi, gi), mi) in x.sample(n).iter().zip(g.sample(n)).zip(mask) {
                let r = (xi * gi).abs();
                total += r;
                inside += r * mi.abs();
            }
            if total == 0.0 {
                excluded += 1;
            } else {
                sum += inside / total;
                used += 1;
            }
        }
    }
    if used == 0 {
        return Err(Error::Degenerate("every sample has zero relevance".into()));
    }
    Ok(RelevanceReport {
        r_bias: sum / used as f64,
        num_excluded: excluded,
    })
}

/// Fraction of correct predictions and its binomial standard error.
pub fn accuracy_with_sem(predictions: &[usize], labels: &[usize]) -> Result<(f64, f64)> {
    if predictions.is_empty() {
        return Err(Error::Empty("predictions".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape("predictions and labels differ in length".into()));
    }
    let n = labels.len() as f64;
    let acc = predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / n;
    Ok((acc, (acc * (1.0 - acc) / n).sqrt()))
}

/// Per-class accuracy; `None` for classes absent from `labels`.
pub fn per_class_accuracy(predictions: &[usize], labels: &[usize], k: usize) -> Vec<Option<f64>> {
    let mut hit = vec![0usize; k];
    let mut tot = vec![0usize; k];
    for (&p, &l) in predictions.iter().zip(labels) {
        tot[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    hit.iter()
        .zip(&tot)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect()
}

/// Bias description shared by all evaluations of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    /// CAV of the artifact, used for TCAV.
    pub cav: Cav,
    pub biased_class: usize,
    /// Artifact mask for localized transforms.
    pub mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub clean_accuracy: f64,
    pub clean_sem: f64,
    pub biased_accuracy: f64,
    pub biased_sem: f64,
    pub tcav: f64,
    pub tcav_sens: f64,
    pub r_bias: Option<f64>,
    pub r_bias_excluded: usize,
    /// On the clean set.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub num_clean: usize,
    pub num_biased: usize,
}

/// Full report on an evaluation pair; P-ClArC routes through the projection.
pub fn evaluate(
    model: &LayeredModel,
    clean: &ConceptDataset,
    biased: &ConceptDataset,
    spec: &EvalSpec,
    config: &CorrectionConfig,
    stats: Option<&ClarcStats>,
) -> Result<MetricsReport> {
    check_biased(biased)?;
    let predictor = Predictor::deployed(model, config, stats)?;
    let clean_pred = predictor.predict(clean)?;
    let biased_pred = predictor.predict(biased)?;
    let (clean_accuracy, clean_sem) = accuracy_with_sem(&clean_pred, &clean.labels)?;
    let (biased_accuracy, biased_sem) = accuracy_with_sem(&biased_pred, &biased.labels)?;
    let proj = latent_projections(&predictor, biased, &spec.cav, spec.biased_class)?;
    let (r_bias, r_bias_excluded) = match &spec.mask {
        Some(mask) => {
            let r = bias_relevance(&predictor, biased, mask, spec.biased_class)?;
            (Some(r.r_bias), r.num_excluded)
        }
        None => (None, 0),
    };
    Ok(MetricsReport {
        clean_accuracy,
        clean_sem,
        biased_accuracy,
        biased_sem,
        tcav: tcav_from_projections(&proj)?,
        tcav_sens: sensitivity_from_projections(&proj)?,
        r_bias,
        r_bias_excluded,
        per_class_accuracy: per_class_accuracy(&clean_pred, &clean.labels, model.num_classes()),
        num_clean: clean.len(),
        num_biased: biased.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassImpact {
    /// Accuracy change (after - before) on samples of the selected classes.
    pub selected: f64,
    /// Accuracy change on all samples.
    pub all: f64,
}

pub fn class_impact(
    before: &Predictor,
    after: &Predictor,
    clean: &ConceptDataset,
    selected: &[usize],
) -> Result<ClassImpact> {
    if selected.is_empty() {
        return Err(Error::InvalidParameter("no classes selected".into()));
    }
    let counts = clean.class_counts();
    for &c in selected {
        if counts.get(c).copied().unwrap_or(0) == 0 {
            return Err(Error::InvalidParameter(format!("class {c} absent from the clean set")));
        }
    }
    let pb = before.predict(clean)?;
    let pa = after.predict(clean)?;
    let idx: Vec<usize> = (0..clean.len())
        .filter(|&i| selected.contains(&clean.labels[i]))
        .collect();
    let acc = |p: &[usize], ids: &[usize]| {
        ids.iter().filter(|&&i| p[i] == clean.labels[i]).count() as f64 / ids.len() as f64
    };
    let all: Vec<usize> = (0..clean.len()).collect();
    Ok(ClassImpact {
        selected: acc(&pa, &idx) - acc(&pb, &idx),
        all: acc(&pa, &all) - acc(&pb, &all),
    })
}

/// The `q` classes other than `biased_class` whose mean logit increases
/// most when the artifact is applied to clean samples.
pub fn select_related_classes(
    model: &LayeredModel,
    clean: &ConceptDataset,
    transform: &ArtifactTransform,
    biased_class: usize,
    q: usize,
) -> Result<Vec<usize>> {
    if clean.is_empty() {
        return Err(Error::Empty("clean set".into()));
    }
    let shape = clean.inputs.sample_shape().to_vec();
    let mut shifted = clean.inputs.clone();
    for i in 0..clean.len() {
        let t = transform.apply(clean.inputs.sample(i), &shape)?;
        shifted.sample_mut(i).copy_from_slice(&t);
    }
    let k = model.num_classes();
    let before = model.forward(&clean.model_inputs())?;
    let after = model.forward(&crate::data::to_model_scale(&shifted))?;
    let mut rise = vec![0.0; k];
    for n in 0..clean.len() {
        for c in 0..k {
            rise[c] += after.sample(n)[c] - before.sample(n)[c];
        }
    }
    let mut classes: Vec<usize> = (0..k).filter(|&c| c != biased_class).collect();
    classes.sort_by(|&a, &b| rise[b].total_cmp(&rise[a]).then(a.cmp(&b)));
    classes.truncate(q);
    Ok(classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_and_sem() {
        let (a, s) = accuracy_with_sem(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap();
        assert_eq!(a, 0.75);
        assert!((s - (0.75f64 * 0.25 / 4.0).sqrt()).abs() < 1e-15);
        assert!(accuracy_with_sem(&[], &[]).is_err());
    }

    #[test]
    fn per_class_handles_absent_classes() {
        let pc = per_class_accuracy(&[0, 0, 2], &[0, 1, 2], 4);
        assert_eq!(pc, vec![Some(1.0), Some(0.0), Some(1.0), None]);
    }

    #[test]
    fn tcav_counts_strictly_positive() {
        assert_eq!(tcav_from_projections(&[1.0, 0.0, -1.0, 2.0]).unwrap(), 0.5);
        assert_eq!(sensitivity_from_projections(&[1.0, 0.0, -1.0, 2.0]).unwrap(), 1.0);
        assert!(tcav_from_projections(&[]).is_err());
    }
}
