//! End-to-end experiments and the stage functions behind the CLI verbs.

use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clarc_core::cav::CavSolver;
use clarc_core::correction::{Aggregation, AnnotationMode, GradientTarget, Method};
use clarc_core::metrics::{class_impact, evaluate, select_related_classes, Predictor};
use clarc_core::net::LayeredModel;
use serde::{Deserialize, Serialize};

use crate::config::{CorrectionSpec, ExperimentConfig};
use crate::pipeline::{
    alignment_rows, correction_config, fit_cavs, generate_data, run_config, run_sweep, train_biased,
    AlignmentRow, Prepared, Sweep,
};
use crate::report::{self, AblationRow, ImpactRow};
use crate::store::{run_name, RunRecord, Store, MANIFEST};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Relative to the experiment directory; the manifest itself is not listed.
    pub files: Vec<PathBuf>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Results of the correction stage. `sweeps[0]` is the vanilla baseline.
#[derive(Debug, Clone)]
pub struct Corrections {
    pub sweeps: Vec<Sweep>,
}

impl Corrections {
    pub fn baseline(&self) -> &Sweep {
        &self.sweeps[0]
    }

    pub fn by_label(&self, label: &str) -> Option<&Sweep> {
        self.sweeps.iter().find(|s| s.spec.label() == label)
    }

    pub fn model(&self, run: &str) -> Option<&LayeredModel> {
        self.sweeps.iter().find_map(|s| {
            s.runs
                .iter()
                .enumerate()
                .find(|(i, _)| run_name(&s.spec.label(), *i) == run)
                .map(|(_, r)| &r.model)
        })
    }

    /// Records of every run, named by label and grid position.
    pub fn records(&self, seed: u64) -> Vec<RunRecord> {
        self.sweeps
            .iter()
            .flat_map(|s| {
                s.runs.iter().enumerate().map(move |(i, r)| {
                    RunRecord::from_result(r, &run_name(&s.spec.label(), i), seed, i == s.selected)
                })
            })
            .collect()
    }
}

/// Vanilla baseline, then every configured sweep. A configured plain vanilla
/// entry reuses the baseline.
pub fn run_corrections(prepared: &Prepared) -> Result<Corrections> {
    let vanilla = CorrectionSpec::new(Method::Vanilla);
    let baseline = run_sweep(prepared, &vanilla, f64::NAN)?;
    let reference = baseline.best().val_clean_accuracy;
    let mut sweeps = vec![baseline];
    for spec in &prepared.config.corrections {
        if *spec == vanilla {
            continue;
        }
        sweeps.push(run_sweep(prepared, spec, reference)?);
    }
    Ok(Corrections { sweeps })
}

/// Classes other than the biased one whose logits rise most under the
/// artifact, measured with the biased model on clean validation samples.
pub fn related_classes(prepared: &Prepared, q: usize) -> Result<Vec<usize>> {
    Ok(select_related_classes(
        &prepared.model,
        &prepared.data.val_clean,
        &prepared.config.bias.transform,
        prepared.config.bias.biased_class,
        q,
    )?)
}

/// Accuracy change of the selected run of each correction against the
/// vanilla baseline, on the related classes and on all classes.
pub fn class_study(
    prepared: &Prepared,
    records: &[RunRecord],
    model_of: &dyn Fn(&RunRecord) -> Result<LayeredModel>,
) -> Result<Vec<ImpactRow>> {
    let Some(study) = &prepared.config.class_study else {
        return Ok(Vec::new());
    };
    let classes = related_classes(prepared, study.q).context("class study")?;
    let selected: Vec<&RunRecord> = records.iter().filter(|r| r.selected).collect();
    let base = selected
        .iter()
        .find(|r| r.label == "vanilla")
        .context("class study: no vanilla baseline")?;
    let base_model = model_of(base)?;
    let before = Predictor::deployed(&base_model, &base.config, base.stats.as_ref())?;
    let mut rows = Vec::new();
    for r in selected.iter().filter(|r| r.label != "vanilla") {
        let model = model_of(r)?;
        let after = Predictor::deployed(&model, &r.config, r.stats.as_ref())?;
        rows.push(ImpactRow {
            label: r.label.clone(),
            lambda: r.lambda,
            classes: classes.clone(),
            impact: class_impact(&before, &after, &prepared.test_clean, &classes).context("class study")?,
        });
    }
    rows.sort_by(|a, b| a.label.cmp(&b.label));
    Ok(rows)
}

/// Loads the model of a run record from the experiment directory.
pub fn stored_model(store: &Store) -> impl Fn(&RunRecord) -> Result<LayeredModel> + '_ {
    move |r| store.load_checkpoint(&r.checkpoint)
}

/// Re-evaluates every stored run from its checkpoint.
pub fn evaluate_records(
    prepared: &Prepared,
    records: &mut [RunRecord],
    model_of: &dyn Fn(&RunRecord) -> Result<LayeredModel>,
) -> Result<()> {
    for r in records.iter_mut().filter(|r| !r.diverged) {
        let model = model_of(r)?;
        r.test = Some(evaluate(
            &model,
            &prepared.test_clean,
            &prepared.test_biased,
            &prepared.eval_spec,
            &r.config,
            r.stats.as_ref(),
        )
        .with_context(|| format!("evaluate ({})", r.name))?);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Lambda,
    CavSolver,
    AnnotationMode,
    Aggregation,
    Epochs,
    GradientTarget,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        Self::Lambda,
        Self::CavSolver,
        Self::AnnotationMode,
        Self::Aggregation,
        Self::Epochs,
        Self::GradientTarget,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Lambda => "lambda",
            Self::CavSolver => "cav_solver",
            Self::AnnotationMode => "annotation_mode",
            Self::Aggregation => "aggregation",
            Self::Epochs => "epochs",
            Self::GradientTarget => "gradient_target",
        }
    }
}

/// The correction whose settings an ablation varies.
pub fn ablation_base(config: &ExperimentConfig) -> Result<&CorrectionSpec> {
    match &config.ablation.base {
        Some(label) => config.corrections.iter().find(|c| &c.label() == label),
        None => config.corrections.iter().find(|c| c.method == Method::RrClarc),
    }
    .context("ablate: no base correction (add an rr_clarc entry or set ablation.base)")
}

/// Sweeps one axis of the base correction. The lambda axis reports the base
/// sweep itself; the others hold lambda at the base sweep's selection.
pub fn run_ablation(prepared: &Prepared, base_sweep: &[RunRecord], axis: AblationAxis) -> Result<Vec<AblationRow>> {
    let spec = ablation_base(&prepared.config)?;
    let label = spec.label();
    let selected = base_sweep
        .iter()
        .find(|r| r.label == label && r.selected)
        .with_context(|| format!("ablate: no selected run for {label}"))?;
    let lambda = selected.lambda;
    let seed = prepared.config.seed;
    let row = |value: String, base: bool, record: RunRecord| AblationRow {
        axis: axis.name().to_string(),
        value,
        label: label.clone(),
        lambda: record.lambda,
        base,
        record,
    };
    let run = |value: &str, config| -> Result<RunRecord> {
        let result = run_config(prepared, &label, config).with_context(|| format!("ablate ({})", axis.name()))?;
        Ok(RunRecord::from_result(&result, &format!("{label}_{}_{value}", axis.name()), seed, false))
    };
    let mut rows = Vec::new();
    match axis {
        AblationAxis::Lambda => {
            let mut runs: Vec<&RunRecord> = base_sweep.iter().filter(|r| r.label == label).collect();
            runs.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
            for r in runs {
                rows.push(row(format!("{}", r.lambda), r.selected, r.clone()));
            }
        }
        AblationAxis::CavSolver => {
            for f in &prepared.cavs {
                let mut c = correction_config(prepared, spec, lambda);
                if c.cav.is_some() {
                    c.cav = Some(f.cav.clone());
                }
                let base = f.solver == prepared.config.cav.use_solver;
                rows.push(row(f.solver.to_string(), base, run(f.solver.name(), c)?));
            }
        }
        AblationAxis::AnnotationMode => {
            let modes = [
                AnnotationMode::AllOnes,
                AnnotationMode::RandomSign { seed: 0 },
                AnnotationMode::OneHot {
                    target_class: prepared.config.bias.biased_class,
                },
            ];
            for mode in modes {
                let mut c = correction_config(prepared, spec, lambda);
                c.annotation = mode;
                rows.push(row(mode.name().to_string(), mode == spec.annotation, run(mode.name(), c)?));
            }
        }
        AblationAxis::Aggregation => {
            for agg in [Aggregation::Squared, Aggregation::Absolute, Aggregation::Cosine] {
                let mut c = correction_config(prepared, spec, lambda);
                c.aggregation = agg;
                let name = agg.name();
                rows.push(row(name.to_string(), agg == spec.aggregation, run(name, c)?));
            }
        }
        AblationAxis::Epochs => {
            let base_epochs = spec.epochs.unwrap_or(prepared.config.finetune.epochs);
            for &e in &prepared.config.ablation.epochs {
                let mut c = correction_config(prepared, spec, lambda);
                c.epochs = e;
                rows.push(row(e.to_string(), e == base_epochs, run(&e.to_string(), c)?));
            }
        }
        AblationAxis::GradientTarget => {
            for t in [GradientTarget::Logits, GradientTarget::LogProbs] {
                let mut c = correction_config(prepared, spec, lambda);
                c.gradient_target = t;
                let name = t.name();
                rows.push(row(name.to_string(), t == spec.gradient_target, run(name, c)?));
            }
        }
    }
    Ok(rows)
}

/// Rebuilds the pre-correction state from an experiment directory.
pub fn load_prepared(store: &Store, config: &ExperimentConfig) -> Result<Prepared> {
    store.check_stamp(config)?;
    let data = store.load_datasets().context("loading datasets (run `generate`)")?;
    let (model, losses) = store.load_biased().context("loading the biased model (run `train`)")?;
    let mut solvers = config.cav.solvers.clone();
    if !solvers.contains(&config.cav.use_solver) {
        solvers.push(config.cav.use_solver);
    }
    let cavs = store.load_cavs(&solvers).context("loading CAVs (run `fit-cav`)")?;
    Prepared::assemble(config, data, model, losses, cavs)
}

pub fn run_alignment_study(prepared: &Prepared) -> Result<Vec<AlignmentRow>> {
    alignment_rows(prepared)
}

pub fn solvers_of(prepared: &Prepared) -> Vec<CavSolver> {
    prepared.cavs.iter().map(|c| c.solver).collect()
}

/// Files listed by [`RunManifest`] when assembled from a directory rather
/// than from a single process: every stage output implied by the config and
/// the stored run records, plus whatever reports exist.
pub fn expected_files(store: &Store, config: &ExperimentConfig, records: &[RunRecord]) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = vec![crate::store::CONFIG.into()];
    for d in ["train", "val", "val_clean", "test"] {
        files.push(format!("data/{d}.ds").into());
    }
    files.push(crate::store::BIASED_CHECKPOINT.into());
    files.push(crate::store::BIASED_RECORD.into());
    let mut solvers = config.cav.solvers.clone();
    if !solvers.contains(&config.cav.use_solver) {
        solvers.push(config.cav.use_solver);
    }
    for s in solvers {
        files.push(format!("cavs/{s}.cav").into());
    }
    for r in records {
        files.push(r.checkpoint.clone());
        files.push(format!("runs/{}.json", r.name).into());
    }
    let reports = store.path("reports");
    if reports.is_dir() {
        let mut names: Vec<String> = std::fs::read_dir(&reports)?
            .map(|e| Ok(e?.file_name().to_string_lossy().into_owned()))
            .collect::<Result<_>>()?;
        names.retain(|n| n.ends_with(".csv"));
        names.sort();
        files.extend(names.into_iter().map(|n| PathBuf::from(format!("reports/{n}"))));
    }
    for f in &files {
        if !store.path(f).is_file() {
            bail!("expected artifact {} is missing", f.display());
        }
    }
    Ok(files)
}

pub fn write_manifest(store: &mut Store, config: &ExperimentConfig, started: u64, files: Vec<PathBuf>) -> Result<RunManifest> {
    let manifest = RunManifest {
        version: VERSION.to_string(),
        config_hash: config.hash(),
        started_unix: started,
        finished_unix: unix_now(),
        files,
    };
    store.write_json(MANIFEST, &manifest)?;
    Ok(manifest)
}

/// Everything an in-process caller may want after a full run.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub manifest: RunManifest,
    pub prepared: Prepared,
    pub corrections: Corrections,
    pub alignment: Vec<AlignmentRow>,
    pub class_impact: Vec<ImpactRow>,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunManifest> {
    Ok(run_experiment_detailed(config)?.manifest)
}

/// Runs every stage and persists all artifacts under `config.out_dir`.
pub fn run_experiment_detailed(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let started = unix_now();
    config.validate()?;
    let mut store = Store::new(&config.out_dir);
    store.stamp(config)?;

    let data = generate_data(config)?;
    store.save_datasets(config, &data)?;
    let (model, losses) = train_biased(config, &data)?;
    store.save_biased(config.seed, &model, &losses)?;
    let cavs = fit_cavs(config, &data, &model)?;
    store.save_cavs(&cavs)?;
    store.write_bytes("reports/cav_sweep.csv", &report::cav_sweep_csv(&cavs)?)?;
    let prepared = Prepared::assemble(config, data, model, losses, cavs)?;

    let alignment = run_alignment_study(&prepared)?;
    store.write_bytes("reports/alignment.csv", &report::alignment_csv(&alignment)?)?;

    let corrections = run_corrections(&prepared)?;
    let records = corrections.records(config.seed);
    for (record, model) in records.iter().zip(corrections.sweeps.iter().flat_map(|s| s.runs.iter().map(|r| &r.model))) {
        store.save_run(record, model)?;
    }
    let k = prepared.model.num_classes();
    store.write_bytes("reports/metrics.csv", &report::metrics_csv(&records, k)?)?;
    store.write_bytes("reports/losses.csv", &report::losses_csv(&prepared.train_losses, &records)?)?;

    let in_memory = |r: &RunRecord| -> Result<LayeredModel> {
        corrections
            .model(&r.name)
            .cloned()
            .with_context(|| format!("no model for run {}", r.name))
    };
    let class_impact = class_study(&prepared, &records, &in_memory)?;
    if config.class_study.is_some() {
        store.write_bytes("reports/class_impact.csv", &report::class_impact_csv(&class_impact)?)?;
    }

    let files = store.written().to_vec();
    let manifest = write_manifest(&mut store, config, started, files)?;
    Ok(ExperimentOutcome {
        manifest,
        prepared,
        corrections,
        alignment,
        class_impact,
    })
}
