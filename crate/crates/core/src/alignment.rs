//! Agreement between a CAV and the activation change caused by the artifact.

use serde::{Deserialize, Serialize};

use crate::cav::Cav;
use crate::data::{to_model_scale, ArtifactTransform};
use crate::error::{Error, Result};
use crate::net::LayeredModel;
use crate::tensor::{cosine, norm, Tensor};

/// Deltas with a norm below this are treated as unaffected by the transform.
pub const MIN_DELTA_NORM: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Mean per-sample cosine `s`.
    pub sample_wise: f64,
    /// Standard error of the per-sample cosines.
    pub sample_wise_sem: f64,
    /// Cosine of the mean delta `s_bar`.
    pub overall: f64,
    pub per_sample: Vec<f64>,
    pub num_samples: usize,
    pub num_excluded: usize,
}

/// `a(phi(x)) - a(x)` at the split layer for a batch on the `[0, 255]` scale.
pub fn activation_delta(
    model: &LayeredModel,
    transform: &ArtifactTransform,
    batch: &Tensor,
) -> Result<Tensor> {
    let shape = batch.sample_shape().to_vec();
    let mut transformed = batch.clone();
    for i in 0..batch.batch() {
        let out = transform.apply(batch.sample(i), &shape)?;
        transformed.sample_mut(i).copy_from_slice(&out);
    }
    let before = model.extract_activations(&to_model_scale(batch))?;
    let after = model.extract_activations(&to_model_scale(&transformed))?;
    after.sub(&before)
}

fn check_dims(cav: &Cav, deltas: &Tensor) -> Result<()> {
    if cav.norm <= 0.0 {
        return Err(Error::Degenerate("CAV has zero norm".into()));
    }
    if deltas.shape().len() != 2 || deltas.sample_len() != cav.dim() {
        return Err(Error::Shape(format!(
            "deltas {:?} do not match CAV width {}",
            deltas.shape(),
            cav.dim()
        )));
    }
    Ok(())
}

/// Per-sample cosines between `h` and each delta, skipping near-zero deltas.
/// Returns the cosines and the number of excluded samples.
pub fn per_sample_cosines(cav: &Cav, deltas: &Tensor) -> Result<(Vec<f64>, usize)> {
    check_dims(cav, deltas)?;
    let mut cos = Vec::with_capacity(deltas.batch());
    let mut excluded = 0;
    for i in 0..deltas.batch() {
        let d = deltas.sample(i);
        if norm(d) < MIN_DELTA_NORM {
            excluded += 1;
            continue;
        }
        cos.push(cosine(&cav.direction, d).expect("both norms positive"));
    }
    Ok((cos, excluded))
}

/// `s = (1/N) sum cos(h, delta_n)` over non-excluded samples.
pub fn alignment_sample(cav: &Cav, deltas: &Tensor) -> Result<f64> {
    let (cos, _) = per_sample_cosines(cav, deltas)?;
    if cos.is_empty() {
        return Err(Error::Degenerate("every activation delta is zero".into()));
    }
    Ok(cos.iter().sum::<f64>() / cos.len() as f64)
}

/// `s_bar = cos(h, mean_n delta_n)`.
pub fn alignment_overall(cav: &Cav, deltas: &Tensor) -> Result<f64> {
    check_dims(cav, deltas)?;
    if deltas.batch() == 0 {
        return Err(Error::Empty("activation deltas".into()));
    }
    let m = cav.dim();
    let mut mean = vec![0.0; m];
    for i in 0..deltas.batch() {
        for (a, v) in mean.iter_mut().zip(deltas.sample(i)) {
            *a += v;
        }
    }
    let n = deltas.batch() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    if norm(&mean) < MIN_DELTA_NORM {
        return Err(Error::Degenerate("mean activation delta is zero".into()));
    }
    Ok(cosine(&cav.direction, &mean).expect("both norms positive"))
}

pub fn alignment_report(cav: &Cav, deltas: &Tensor) -> Result<AlignmentReport> {
    let (per_sample, num_excluded) = per_sample_cosines(cav, deltas)?;
    if per_sample.is_empty() {
        return Err(Error::Degenerate("every activation delta is zero".into()));
    }
    let n = per_sample.len() as f64;
    let s = per_sample.iter().sum::<f64>() / n;
    let sem = if per_sample.len() > 1 {
        let var = per_sample.iter().map(|c| (c - s) * (c - s)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(AlignmentReport {
        sample_wise: s,
        sample_wise_sem: sem,
        overall: alignment_overall(cav, deltas)?,
        num_samples: deltas.batch(),
        num_excluded,
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cav::{fit_signal_cav, ConceptSample};

    fn cav(h: &[f64]) -> Cav {
        // signal CAV of two points separated by 2h equals h
        let a: Vec<f64> = h.iter().map(|v| 2.0 * v).collect();
        fit_signal_cav(&[
            ConceptSample { activation: a, concept: true },
            ConceptSample { activation: vec![0.0; h.len()], concept: false },
        ])
        .unwrap()
    }

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::stack(r, &[r[0].len()]).unwrap()
    }

    #[test]
    fn self_alignment_is_one() {
        let c = cav(&[1.0, 2.0]);
        let d = rows(&[&[1.0, 2.0], &[1.0, 2.0]]);
        assert!((alignment_sample(&c, &d).unwrap() - 1.0).abs() < 1e-12);
        assert!((alignment_overall(&c, &d).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_and_cancelling() {
        let c = cav(&[1.0, 0.0]);
        assert!(alignment_sample(&c, &rows(&[&[0.0, 3.0]])).unwrap().abs() < 1e-15);
        assert!(alignment_sample(&c, &rows(&[&[1.0, 0.0], &[-1.0, 0.0]])).unwrap().abs() < 1e-15);
    }

    #[test]
    fn averaging_removes_orthogonal_noise() {
        let c = cav(&[1.0, 0.0]);
        let d = rows(&[&[1.0, 1.0], &[1.0, -1.0]]);
        let s = alignment_sample(&c, &d).unwrap();
        let sb = alignment_overall(&c, &d).unwrap();
        assert!((sb - 1.0).abs() < 1e-12);
        assert!(s < 1.0);
    }

    #[test]
    fn zero_deltas_excluded_and_counted() {
        let c = cav(&[1.0, 0.0]);
        let d = rows(&[&[0.0, 0.0], &[2.0, 0.0]]);
        let r = alignment_report(&c, &d).unwrap();
        assert_eq!(r.num_excluded, 1);
        assert_eq!(r.per_sample.len(), 1);
        assert!(alignment_sample(&c, &rows(&[&[0.0, 0.0]])).is_err());
        assert!(alignment_overall(&c, &rows(&[&[0.0, 0.0]])).is_err());
    }

    #[test]
    fn single_sample_collapse() {
        let c = cav(&[1.0, 1.0]);
        let d = rows(&[&[0.3, -0.7]]);
        assert!((alignment_sample(&c, &d).unwrap() - alignment_overall(&c, &d).unwrap()).abs() < 1e-15);
    }
}
