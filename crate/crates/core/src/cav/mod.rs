//! Concept Activation Vectors.
//!
//! A CAV is a direction `h` in the pooled activation space of the split layer.
//! The signal CAV is the covariance between activations and concept labels;
//! the regression CAVs are the weight vectors of linear concept classifiers
//! fitted on standardized activations and mapped back to raw coordinates.
//! Directions are stored exactly as fitted (never normalized).

mod linalg;
pub mod oracle;
pub mod solvers;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Tensor};
use solvers::LinearFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CavSolver {
    Signal,
    Ridge,
    Lasso,
    Logistic,
    Svm,
}

impl CavSolver {
    pub const ALL: [CavSolver; 5] = [
        CavSolver::Signal,
        CavSolver::Ridge,
        CavSolver::Lasso,
        CavSolver::Logistic,
        CavSolver::Svm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CavSolver::Signal => "signal",
            CavSolver::Ridge => "ridge",
            CavSolver::Lasso => "lasso",
            CavSolver::Logistic => "logistic",
            CavSolver::Svm => "svm",
        }
    }

    pub fn has_hyperparameter(&self) -> bool {
        !matches!(self, CavSolver::Signal)
    }

    /// Decision threshold on `a . h + h0` (regressions predict `t` itself).
    fn threshold(&self) -> f64 {
        match self {
            CavSolver::Ridge | CavSolver::Lasso => 0.5,
            _ => 0.0,
        }
    }
}

impl std::str::FromStr for CavSolver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CavSolver::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown CAV solver `{s}`")))
    }
}

impl std::fmt::Display for CavSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSample {
    pub activation: Vec<f64>,
    pub concept: bool,
}

/// Builds concept samples from a `(batch, m)` activation tensor.
pub fn concept_samples(activations: &Tensor, concepts: &[bool]) -> Result<Vec<ConceptSample>> {
    if activations.batch() != concepts.len() {
        return Err(Error::Shape(format!(
            "{} activations, {} concept labels",
            activations.batch(),
            concepts.len()
        )));
    }
    Ok(concepts
        .iter()
        .enumerate()
        .map(|(i, &c)| ConceptSample {
            activation: activations.sample(i).to_vec(),
            concept: c,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    pub direction: Vec<f64>,
    /// Intercept of the concept classifier, with the decision function
    /// written as `a . h + h0` for every solver. Absent for signal CAVs.
    pub bias_term: Option<f64>,
    pub solver: CavSolver,
    pub hyperparameter: Option<f64>,
    pub layer_index: usize,
    pub norm: f64,
}

impl Cav {
    fn from_parts(direction: Vec<f64>, bias_term: Option<f64>, solver: CavSolver, hp: Option<f64>) -> Result<Self> {
        crate::error::ensure_finite(&direction, "CAV direction")?;
        let norm = norm(&direction);
        Ok(Self {
            direction,
            bias_term,
            solver,
            hyperparameter: hp,
            layer_index: 0,
            norm,
        })
    }

    pub fn at_layer(mut self, layer_index: usize) -> Self {
        self.layer_index = layer_index;
        self
    }

    pub fn dim(&self) -> usize {
        self.direction.len()
    }

    /// `h / ||h||`, when the norm is positive.
    pub fn unit_direction(&self) -> Option<Vec<f64>> {
        (self.norm > 0.0).then(|| self.direction.iter().map(|v| v / self.norm).collect())
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let mut c = Cav::from_parts(
            self.direction.iter().map(|v| v * factor).collect(),
            self.bias_term,
            self.solver,
            self.hyperparameter,
        )?;
        c.layer_index = self.layer_index;
        Ok(c)
    }

    /// Fraction of samples whose concept label the CAV's linear classifier
    /// recovers. Signal CAVs threshold at the midpoint of the projected
    /// class means of `samples`.
    pub fn concept_accuracy(&self, samples: &[ConceptSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Empty("concept samples".into()));
        }
        let proj: Vec<f64> = samples.iter().map(|s| dot(&s.activation, &self.direction)).collect();
        let cut = match self.bias_term {
            Some(h0) => self.solver.threshold() - h0,
            None => {
                let mean_of = |c: bool| {
                    let v: Vec<f64> = samples
                        .iter()
                        .zip(&proj)
                        .filter(|(s, _)| s.concept == c)
                        .map(|(_, p)| *p)
                        .collect();
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                };
                match (mean_of(true), mean_of(false)) {
                    (Some(a), Some(b)) => 0.5 * (a + b),
                    _ => {
                        return Err(Error::Degenerate(
                            "midpoint threshold needs both concept labels".into(),
                        ))
                    }
                }
            }
        };
        let correct = samples
            .iter()
            .zip(&proj)
            .filter(|(s, &p)| (p > cut) == s.concept)
            .count();
        Ok(correct as f64 / samples.len() as f64)
    }
}

fn split_xy(samples: &[ConceptSample]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Empty("concept samples".into()));
    }
    let m = samples[0].activation.len();
    if samples.iter().any(|s| s.activation.len() != m) {
        return Err(Error::Shape("concept samples differ in width".into()));
    }
    for s in samples {
        crate::error::ensure_finite(&s.activation, "concept activation")?;
    }
    let positives = samples.iter().filter(|s| s.concept).count();
    if positives == 0 || positives == samples.len() {
        return Err(Error::Degenerate(
            "all concept labels are equal; the concept direction is undefined".into(),
        ));
    }
    Ok((
        samples.iter().map(|s| s.activation.clone()).collect(),
        samples.iter().map(|s| if s.concept { 1.0 } else { 0.0 }).collect(),
    ))
}

/// Per-feature standardization fitted on the CAV training set. Constant
/// features keep unit scale (their centred values are zero anyway).
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[Vec<f64>]) -> Self {
        let n = x.len() as f64;
        let d = x[0].len();
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in x {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let scale = var
            .into_iter()
            .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, scale }
    }

    fn transform(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| {
                r.iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect()
            })
            .collect()
    }

    /// Maps a fit in standardized coordinates back to raw activations.
    fn unmap(&self, fit: LinearFit) -> (Vec<f64>, f64) {
        let h: Vec<f64> = fit.beta.iter().zip(&self.scale).map(|(b, s)| b / s).collect();
        let h0 = fit.intercept - dot(&h, &self.mean);
        (h, h0)
    }
}

/// `h = sum (a - mean(a)) (t - mean(t))`
pub fn fit_signal_cav(samples: &[ConceptSample]) -> Result<Cav> {
    let (x, t) = split_xy(samples)?;
    let n = x.len() as f64;
    let m = x[0].len();
    let mut mean_a = vec![0.0; m];
    for r in &x {
        for (a, v) in mean_a.iter_mut().zip(r) {
            *a += v / n;
        }
    }
    let mean_t = t.iter().sum::<f64>() / n;
    let mut h = vec![0.0; m];
    for (r, ti) in x.iter().zip(&t) {
        for ((hj, v), a) in h.iter_mut().zip(r).zip(&mean_a) {
            *hj += (v - a) * (ti - mean_t);
        }
    }
    Cav::from_parts(h, None, CavSolver::Signal, None)
}

fn fit_standardized(
    samples: &[ConceptSample],
    solver: CavSolver,
    lambda: f64,
    fit: impl FnOnce(&[Vec<f64>], &[f64]) -> Result<LinearFit>,
) -> Result<Cav> {
    let (x, t) = split_xy(samples)?;
    let std = Standardizer::fit(&x);
    let z = std.transform(&x);
    let (h, h0) = std.unmap(fit(&z, &t)?);
    Cav::from_parts(h, Some(h0), solver, Some(lambda))
}

pub fn fit_ridge_cav(samples: &[ConceptSample], lambda: f64) -> Result<Cav> {
    fit_standardized(samples, CavSolver::Ridge, lambda, |z, t| solvers::ridge_solve(z, t, lambda))
}

pub fn fit_lasso_cav(samples: &[ConceptSample], lambda: f64) -> Result<Cav> {
    fit_standardized(samples, CavSolver::Lasso, lambda, |z, t| solvers::lasso_solve(z, t, lambda))
}

pub fn fit_logistic_cav(samples: &[ConceptSample], lambda: f64) -> Result<Cav> {
    fit_standardized(samples, CavSolver::Logistic, lambda, |z, t| {
        solvers::logistic_solve(z, t, lambda)
    })
}

pub fn fit_svm_cav(samples: &[ConceptSample], lambda: f64) -> Result<Cav> {
    fit_standardized(samples, CavSolver::Svm, lambda, |z, t| solvers::svm_solve(z, t, lambda))
}

/// Fits one CAV; `lambda` is ignored by the signal solver.
pub fn fit_cav(samples: &[ConceptSample], solver: CavSolver, lambda: f64) -> Result<Cav> {
    match solver {
        CavSolver::Signal => fit_signal_cav(samples),
        CavSolver::Ridge => fit_ridge_cav(samples, lambda),
        CavSolver::Lasso => fit_lasso_cav(samples, lambda),
        CavSolver::Logistic => fit_logistic_cav(samples, lambda),
        CavSolver::Svm => fit_svm_cav(samples, lambda),
    }
}

/// `{1e-5, 1e-4, ..., 1e5}`
pub fn default_grid() -> Vec<f64> {
    (-5..=5).map(|e| format!("1e{e}").parse().expect("valid float literal")).collect()
}

/// Fits the solver at every grid value and keeps the CAV with the best
/// validation concept accuracy (ties go to the smaller lambda). Signal CAVs
/// have no hyperparameter and are returned directly.
pub fn sweep_cav(
    train: &[ConceptSample],
    val: &[ConceptSample],
    solver: CavSolver,
    grid: &[f64],
) -> Result<Cav> {
    Ok(sweep_cav_detailed(train, val, solver, grid)?.0)
}

/// Like [`sweep_cav`], also returning `(lambda, validation accuracy)` per
/// grid point.
pub fn sweep_cav_detailed(
    train: &[ConceptSample],
    val: &[ConceptSample],
    solver: CavSolver,
    grid: &[f64],
) -> Result<(Cav, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty hyperparameter grid".into()));
    }
    let pos = val.iter().filter(|s| s.concept).count();
    if pos == 0 || pos == val.len() {
        return Err(Error::Degenerate("validation set needs both concept labels".into()));
    }
    if !solver.has_hyperparameter() {
        let cav = fit_signal_cav(train)?;
        let acc = cav.concept_accuracy(val)?;
        return Ok((cav, vec![(f64::NAN, acc)]));
    }
    let mut best: Option<(Cav, f64, f64)> = None;
    let mut curve = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let cav = fit_cav(train, solver, lambda)?;
        let acc = cav.concept_accuracy(val)?;
        curve.push((lambda, acc));
        let better = match &best {
            None => true,
            Some((_, best_acc, best_lambda)) => {
                acc > *best_acc || (acc == *best_acc && lambda < *best_lambda)
            }
        };
        if better {
            best = Some((cav, acc, lambda));
        }
    }
    Ok((best.unwrap().0, curve))
}
