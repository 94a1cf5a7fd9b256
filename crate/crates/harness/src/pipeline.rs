//! Experiment stages: data, biased model, CAVs, corrections, evaluation.

use anyhow::{Context, Result};
use clarc_core::alignment::{activation_delta, alignment_report, AlignmentReport};
use clarc_core::cav::{concept_samples, sweep_cav_detailed, Cav, CavSolver, ConceptSample};
use clarc_core::correction::{fine_tune, ClarcStats, CorrectionConfig, EpochLoss, Method};
use clarc_core::data::{generate_task, inject_bias, make_eval_pair, stratified_split, ConceptDataset};
use clarc_core::metrics::{accuracy_with_sem, class_impact, evaluate, ClassImpact, EvalSpec, MetricsReport, Predictor};
use clarc_core::net::LayeredModel;

use crate::config::{CorrectionSpec, ExperimentConfig};

/// RR-ClArC grid `{5e1, 1e2, 5e2, ..., 1e12}`.
pub fn large_scale_rr_grid() -> Vec<f64> {
    half_decades(1, 12)
}

/// RRR grid `{5e-5, 1e-3, 5e-3, ..., 1e7}`.
pub fn large_scale_rrr_grid() -> Vec<f64> {
    let mut g = vec![5e-5, 1e-3];
    g.extend(half_decades(-3, 7));
    g
}

/// RR-ClArC grid for the toy task, `{1e-5, 5e-5, 1e-4, ..., 1e0}`. Latent
/// gradients of the small heads are far smaller than those of the
/// image backbones the large-scale grid targets.
pub fn toy_rr_grid() -> Vec<f64> {
    let mut g = vec![1e-5];
    g.extend(half_decades(-5, 0));
    g
}

/// RRR grid for the toy task, `{1e-4, 1e-3, ..., 1e2}`.
pub fn toy_rrr_grid() -> Vec<f64> {
    (-4..=2).map(|e| pow10(1, e)).collect()
}

fn pow10(m: u32, e: i32) -> f64 {
    // parsed so that grid points print as their decimal literals
    format!("{m}e{e}").parse().expect("valid float literal")
}

/// `5 * 10^lo, 10^(lo+1), 5 * 10^(lo+1), ..., 10^hi`
fn half_decades(lo: i32, hi: i32) -> Vec<f64> {
    let mut g = vec![pow10(5, lo)];
    for e in lo + 1..=hi {
        g.push(pow10(1, e));
        if e < hi {
            g.push(pow10(5, e));
        }
    }
    g
}

#[derive(Debug, Clone)]
pub struct FittedCav {
    pub solver: CavSolver,
    pub cav: Cav,
    /// `(lambda, validation concept accuracy)`; `lambda` is NaN for signal.
    pub curve: Vec<(f64, f64)>,
}

/// Generated splits. `val_clean` and `test` are artifact-free; `train` and
/// `val` carry the injected bias.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: ConceptDataset,
    pub val: ConceptDataset,
    pub val_clean: ConceptDataset,
    pub test: ConceptDataset,
}

pub fn generate_data(config: &ExperimentConfig) -> Result<Datasets> {
    config.validate()?;
    let seed = config.seed;
    let base = generate_task(&config.task, seed).context("generate")?;
    let (train_clean, val_clean, test) =
        stratified_split(&base, config.split.train, config.split.val, seed).context("generate: split")?;
    let train = inject_bias(&train_clean, &config.bias, seed).context("generate: inject bias (train)")?;
    let val = inject_bias(&val_clean, &config.bias, seed.wrapping_add(1)).context("generate: inject bias (val)")?;
    Ok(Datasets {
        train,
        val,
        val_clean,
        test,
    })
}

/// Trains the biased model and freezes everything up to the split.
pub fn train_biased(config: &ExperimentConfig, data: &Datasets) -> Result<(LayeredModel, Vec<EpochLoss>)> {
    let side = config.task.image_side;
    let init = LayeredModel::init(vec![1, side, side], &config.model.layers, config.model.split_index, config.seed)
        .context("train: model init")?;
    let mut train_cfg = CorrectionConfig::new(Method::Vanilla);
    train_cfg.epochs = config.training.epochs;
    train_cfg.learning_rate = config.training.learning_rate;
    train_cfg.batch_size = config.training.batch_size;
    let trained = fine_tune(&init, &data.train, &train_cfg, config.seed).context("train")?;
    let mut model = trained.model;
    model.set_frozen_upto(Some(model.split_index()))?;
    Ok((model, trained.epoch_losses))
}

fn concept_set(model: &LayeredModel, data: &ConceptDataset, class: usize) -> Result<Vec<ConceptSample>> {
    let sub = data.subset(&data.class_indices(class));
    let acts = model.extract_activations(&sub.model_inputs())?;
    Ok(concept_samples(&acts, &sub.flags)?)
}

/// Fits every configured solver on biased-class training samples and picks
/// each solver's hyperparameter by validation concept accuracy.
pub fn fit_cavs(config: &ExperimentConfig, data: &Datasets, model: &LayeredModel) -> Result<Vec<FittedCav>> {
    let class = config.bias.biased_class;
    let cav_train = concept_set(model, &data.train, class).context("fit-cav")?;
    let cav_val = concept_set(model, &data.val, class).context("fit-cav")?;
    let mut solvers = config.cav.solvers.clone();
    if !solvers.contains(&config.cav.use_solver) {
        solvers.push(config.cav.use_solver);
    }
    let mut cavs = Vec::new();
    for solver in solvers {
        let (cav, curve) = sweep_cav_detailed(&cav_train, &cav_val, solver, &config.cav.grid)
            .with_context(|| format!("fit-cav ({solver})"))?;
        cavs.push(FittedCav {
            solver,
            cav: cav.at_layer(model.split_index()),
            curve,
        });
    }
    Ok(cavs)
}

/// Everything produced before the correction stage.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub data: Datasets,
    pub val_biased: ConceptDataset,
    pub test_clean: ConceptDataset,
    pub test_biased: ConceptDataset,
    /// The biased model, with layers up to the split frozen.
    pub model: LayeredModel,
    pub train_losses: Vec<EpochLoss>,
    pub cavs: Vec<FittedCav>,
    pub eval_spec: EvalSpec,
    /// Input mask for RRR: the artifact region, or every pixel for
    /// transforms without a location.
    pub rrr_mask: Vec<f64>,
}

impl Prepared {
    pub fn assemble(
        config: &ExperimentConfig,
        data: Datasets,
        model: LayeredModel,
        train_losses: Vec<EpochLoss>,
        cavs: Vec<FittedCav>,
    ) -> Result<Self> {
        let (test_clean, test_biased) = make_eval_pair(&data.test, &config.bias).context("eval pair")?;
        let (_, val_biased) = make_eval_pair(&data.val_clean, &config.bias).context("eval pair (val)")?;
        let cav = cavs
            .iter()
            .find(|c| c.solver == config.cav.use_solver)
            .with_context(|| format!("no {} CAV fitted", config.cav.use_solver))?
            .cav
            .clone();
        let shape = test_clean.inputs.sample_shape().to_vec();
        let artifact_mask = config.bias.transform.mask(&shape)?;
        let rrr_mask = artifact_mask
            .clone()
            .unwrap_or_else(|| vec![1.0; shape.iter().product()]);
        Ok(Self {
            config: config.clone(),
            data,
            val_biased,
            test_clean,
            test_biased,
            model,
            train_losses,
            cavs,
            eval_spec: EvalSpec {
                cav,
                biased_class: config.bias.biased_class,
                mask: artifact_mask,
            },
            rrr_mask,
        })
    }

    pub fn cav(&self, solver: CavSolver) -> Option<&Cav> {
        self.cavs.iter().find(|c| c.solver == solver).map(|c| &c.cav)
    }

    pub fn finetune_seed(&self) -> u64 {
        self.config.seed.wrapping_add(1)
    }
}

/// Data generation, biased training and CAV fitting.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let data = generate_data(config)?;
    let (model, losses) = train_biased(config, &data)?;
    let cavs = fit_cavs(config, &data, &model)?;
    Prepared::assemble(config, data, model, losses, cavs)
}

pub fn correction_config(prepared: &Prepared, spec: &CorrectionSpec, lambda: f64) -> CorrectionConfig {
    let ft = &prepared.config.finetune;
    let mut c = CorrectionConfig::new(spec.method);
    c.lambda = if spec.method.uses_lambda() { lambda } else { 0.0 };
    c.annotation = spec.annotation;
    c.aggregation = spec.aggregation;
    c.gradient_target = spec.gradient_target;
    c.epochs = spec.epochs.unwrap_or(ft.epochs);
    c.learning_rate = spec.learning_rate.unwrap_or(ft.learning_rate);
    c.batch_size = ft.batch_size;
    c.grad_clip = ft.grad_clip;
    if spec.method.uses_cav() {
        c.cav = Some(prepared.eval_spec.cav.clone());
    }
    if spec.method == Method::Rrr {
        c.mask = Some(prepared.rrr_mask.clone());
    }
    c
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub label: String,
    pub method: Method,
    pub lambda: f64,
    pub config: CorrectionConfig,
    pub model: LayeredModel,
    pub stats: Option<ClarcStats>,
    pub epoch_losses: Vec<EpochLoss>,
    pub test: MetricsReport,
    pub val_clean_accuracy: f64,
    pub val_biased_accuracy: f64,
    pub val_biased_count: usize,
    /// Fine-tuning hit a non-finite loss.
    pub diverged: bool,
}

impl RunResult {
    pub fn predictor(&self) -> Result<Predictor<'_>> {
        Ok(Predictor::deployed(&self.model, &self.config, self.stats.as_ref())?)
    }
}

pub fn run_correction(prepared: &Prepared, spec: &CorrectionSpec, lambda: f64) -> Result<RunResult> {
    run_config(prepared, &spec.label(), correction_config(prepared, spec, lambda))
}

/// Fine-tunes the biased model with `config` and evaluates the result.
pub fn run_config(prepared: &Prepared, label: &str, config: CorrectionConfig) -> Result<RunResult> {
    let lambda = config.lambda;
    let out = match fine_tune(&prepared.model, &prepared.data.train, &config, prepared.finetune_seed()) {
        Ok(out) => out,
        Err(clarc_core::Error::NonFinite(_)) => return Ok(diverged_run(prepared, label, config)),
        Err(e) => return Err(e).with_context(|| format!("correct ({label} lambda={lambda})")),
    };
    let test = evaluate(
        &out.model,
        &prepared.test_clean,
        &prepared.test_biased,
        &prepared.eval_spec,
        &config,
        out.stats.as_ref(),
    )
    .with_context(|| format!("evaluate ({label} lambda={lambda})"))?;
    let predictor = Predictor::deployed(&out.model, &config, out.stats.as_ref())?;
    let val_clean = &prepared.data.val_clean;
    let (val_clean_accuracy, _) = accuracy_with_sem(&predictor.predict(val_clean)?, &val_clean.labels)?;
    let (val_biased_accuracy, _) =
        accuracy_with_sem(&predictor.predict(&prepared.val_biased)?, &prepared.val_biased.labels)?;
    Ok(RunResult {
        label: label.to_string(),
        method: config.method,
        lambda,
        config,
        model: out.model,
        stats: out.stats,
        epoch_losses: out.epoch_losses,
        test,
        val_clean_accuracy,
        val_biased_accuracy,
        val_biased_count: prepared.val_biased.len(),
        diverged: false,
    })
}

/// A run whose loss became non-finite. It keeps the starting weights, has
/// NaN metrics and is never selected.
fn diverged_run(prepared: &Prepared, label: &str, config: CorrectionConfig) -> RunResult {
    let k = prepared.model.num_classes();
    RunResult {
        label: label.to_string(),
        method: config.method,
        lambda: config.lambda,
        config,
        model: prepared.model.clone(),
        stats: None,
        epoch_losses: Vec::new(),
        test: MetricsReport {
            clean_accuracy: f64::NAN,
            clean_sem: f64::NAN,
            biased_accuracy: f64::NAN,
            biased_sem: f64::NAN,
            tcav: f64::NAN,
            tcav_sens: f64::NAN,
            r_bias: None,
            r_bias_excluded: 0,
            per_class_accuracy: vec![None; k],
            num_clean: prepared.test_clean.len(),
            num_biased: prepared.test_biased.len(),
        },
        val_clean_accuracy: f64::NAN,
        val_biased_accuracy: f64::NAN,
        val_biased_count: prepared.val_biased.len(),
        diverged: true,
    }
}

/// One-standard-error selection: among runs whose validation clean accuracy
/// is at most `budget` below `reference`, find the best validation biased
/// accuracy, then return the run with the largest lambda whose biased
/// accuracy is within one binomial standard error of that best. Falls back
/// to the best clean accuracy when no run is within budget, and to the first
/// run when every run diverged. A NaN reference admits every finished run.
pub fn select_run(runs: &[RunResult], reference_clean: f64, budget: f64) -> Option<usize> {
    let finished: Vec<usize> = (0..runs.len()).filter(|&i| !runs[i].diverged).collect();
    let within: Vec<usize> = finished
        .iter()
        .copied()
        .filter(|&i| reference_clean.is_nan() || reference_clean - runs[i].val_clean_accuracy <= budget + 1e-12)
        .collect();
    if within.is_empty() {
        return finished
            .into_iter()
            .reduce(|b, i| if runs[i].val_clean_accuracy > runs[b].val_clean_accuracy { i } else { b })
            .or(if runs.is_empty() { None } else { Some(0) });
    }
    let best = within
        .iter()
        .map(|&i| runs[i].val_biased_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let n = runs[within[0]].val_biased_count.max(1) as f64;
    let floor = best - (best * (1.0 - best) / n).sqrt() - 1e-12;
    within
        .into_iter()
        .filter(|&i| runs[i].val_biased_accuracy >= floor)
        .reduce(|b, i| if runs[i].lambda > runs[b].lambda { i } else { b })
}

/// All grid points of one correction spec, with the selected index.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub spec: CorrectionSpec,
    pub runs: Vec<RunResult>,
    pub selected: usize,
}

impl Sweep {
    pub fn best(&self) -> &RunResult {
        &self.runs[self.selected]
    }
}

pub fn run_sweep(prepared: &Prepared, spec: &CorrectionSpec, reference_clean: f64) -> Result<Sweep> {
    let runs = spec
        .lambda_grid()
        .into_iter()
        .map(|l| run_correction(prepared, spec, l))
        .collect::<Result<Vec<_>>>()?;
    let selected = select_run(&runs, reference_clean, prepared.config.selection.clean_drop_budget)
        .context("empty lambda grid")?;
    Ok(Sweep {
        spec: spec.clone(),
        runs,
        selected,
    })
}

#[derive(Debug, Clone)]
pub struct AlignmentRow {
    pub solver: CavSolver,
    /// `None` for signal CAVs.
    pub lambda: Option<f64>,
    pub selected: bool,
    pub report: AlignmentReport,
}

/// Alignment of every solver at every grid point with the activation change
/// caused by the artifact on clean test samples.
pub fn alignment_rows(prepared: &Prepared) -> Result<Vec<AlignmentRow>> {
    let model = &prepared.model;
    let deltas = activation_delta(model, &prepared.config.bias.transform, &prepared.test_clean.inputs)
        .context("align")?;
    let biased_class = prepared.config.bias.biased_class;
    let samples = concept_set(model, &prepared.data.train, biased_class)?;
    let mut rows = Vec::new();
    for fitted in &prepared.cavs {
        if !fitted.solver.has_hyperparameter() {
            rows.push(AlignmentRow {
                solver: fitted.solver,
                lambda: None,
                selected: true,
                report: alignment_report(&fitted.cav, &deltas)?,
            });
            continue;
        }
        for &lambda in &prepared.config.cav.grid {
            let cav = if Some(lambda) == fitted.cav.hyperparameter {
                fitted.cav.clone()
            } else {
                clarc_core::cav::fit_cav(&samples, fitted.solver, lambda)?
            };
            // a CAV shrunk to zero has no direction to align
            if cav.norm == 0.0 {
                continue;
            }
            rows.push(AlignmentRow {
                solver: fitted.solver,
                lambda: Some(lambda),
                selected: Some(lambda) == fitted.cav.hyperparameter,
                report: alignment_report(&cav, &deltas)?,
            });
        }
    }
    Ok(rows)
}

pub fn impact(before: &RunResult, after: &RunResult, prepared: &Prepared, selected: &[usize]) -> Result<ClassImpact> {
    Ok(class_impact(
        &before.predictor()?,
        &after.predictor()?,
        &prepared.test_clean,
        selected,
    )?)
}
