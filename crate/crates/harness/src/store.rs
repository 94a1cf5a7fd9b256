//! On-disk layout of an experiment directory.
//!
//! ```text
//! config.toml
//! data/{train,val,val_clean,test}.ds
//! models/biased.ckpt, models/<run>.ckpt
//! cavs/<solver>.cav
//! runs/biased.json, runs/<run>.json
//! reports/*.csv
//! manifest.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clarc_core::cav::CavSolver;
use clarc_core::correction::{ClarcStats, CorrectionConfig, EpochLoss, Method};
use clarc_core::data::ConceptDataset;
use clarc_core::io::{self, DatasetMeta};
use clarc_core::metrics::MetricsReport;
use clarc_core::net::LayeredModel;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::pipeline::{Datasets, FittedCav, RunResult};

pub const CONFIG: &str = "config.toml";
pub const MANIFEST: &str = "manifest.json";
pub const BIASED_CHECKPOINT: &str = "models/biased.ckpt";
pub const BIASED_RECORD: &str = "runs/biased.json";
const DATASETS: [&str; 4] = ["train", "val", "val_clean", "test"];

/// Structured record of one correction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub label: String,
    pub method: Method,
    pub lambda: f64,
    pub seed: u64,
    pub selected: bool,
    pub config: CorrectionConfig,
    pub epoch_losses: Vec<EpochLoss>,
    pub stats: Option<ClarcStats>,
    /// Relative to the experiment directory.
    pub checkpoint: PathBuf,
    /// `None` for diverged runs, here and in `test`.
    pub val_clean_accuracy: Option<f64>,
    pub val_biased_accuracy: Option<f64>,
    pub val_biased_count: usize,
    pub diverged: bool,
    pub test: Option<MetricsReport>,
}

impl RunRecord {
    pub fn from_result(run: &RunResult, name: &str, seed: u64, selected: bool) -> Self {
        Self {
            name: name.to_string(),
            label: run.label.clone(),
            method: run.method,
            lambda: run.lambda,
            seed,
            selected,
            config: run.config.clone(),
            epoch_losses: run.epoch_losses.clone(),
            stats: run.stats,
            checkpoint: PathBuf::from(format!("models/{name}.ckpt")),
            val_clean_accuracy: (!run.diverged).then_some(run.val_clean_accuracy),
            val_biased_accuracy: (!run.diverged).then_some(run.val_biased_accuracy),
            val_biased_count: run.val_biased_count,
            diverged: run.diverged,
            test: (!run.diverged).then(|| run.test.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasedRecord {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub epoch_losses: Vec<EpochLoss>,
}

/// Run directory name: label plus grid position.
pub fn run_name(label: &str, index: usize) -> String {
    format!("{label}_{index:02}")
}

/// Files under an experiment directory, with every write recorded.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            written: Vec::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    /// Relative paths written through this store, in order, without repeats.
    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    fn record(&mut self, rel: &Path) {
        if !self.written.iter().any(|p| p == rel) {
            self.written.push(rel.to_path_buf());
        }
    }

    pub fn write_bytes(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
        let rel = rel.as_ref();
        io::write_atomic(&self.path(rel), bytes).with_context(|| format!("writing {}", rel.display()))?;
        self.record(rel);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: impl AsRef<Path>, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(rel, text.as_bytes())
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: impl AsRef<Path>) -> Result<T> {
        let p = self.path(rel);
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
    }

    /// Records the config, refusing to mix artifacts of different configs.
    pub fn stamp(&mut self, config: &ExperimentConfig) -> Result<()> {
        if let Some(existing) = self.stamped_config()? {
            if existing.hash() != config.hash() {
                bail!(
                    "{} holds artifacts of a different config; use a fresh --out directory",
                    self.root.display()
                );
            }
        }
        self.write_bytes(CONFIG, config.to_toml()?.as_bytes())
    }

    /// Fails unless the directory was stamped with this config.
    pub fn check_stamp(&self, config: &ExperimentConfig) -> Result<()> {
        match self.stamped_config()? {
            Some(c) if c.hash() == config.hash() => Ok(()),
            Some(_) => bail!("{} was produced by a different config", self.root.display()),
            None => bail!("{} has no {CONFIG}; run `generate` first", self.root.display()),
        }
    }

    fn stamped_config(&self) -> Result<Option<ExperimentConfig>> {
        let p = self.path(CONFIG);
        if !p.exists() {
            return Ok(None);
        }
        ExperimentConfig::load(&p).map(Some)
    }

    pub fn save_datasets(&mut self, config: &ExperimentConfig, data: &Datasets) -> Result<()> {
        for (name, ds) in DATASETS.iter().zip(data.parts()) {
            let meta = DatasetMeta {
                seed: config.seed,
                bias: ds.flags.iter().any(|&f| f).then_some(config.bias),
            };
            let rel = format!("data/{name}.ds");
            io::save_dataset(&self.path(&rel), ds, &meta).with_context(|| format!("writing {rel}"))?;
            self.record(Path::new(&rel));
        }
        Ok(())
    }

    pub fn load_datasets(&self) -> Result<Datasets> {
        let load = |name: &str| -> Result<ConceptDataset> {
            let rel = format!("data/{name}.ds");
            Ok(io::load_dataset(&self.path(&rel)).with_context(|| format!("loading {rel}"))?.0)
        };
        Ok(Datasets {
            train: load("train")?,
            val: load("val")?,
            val_clean: load("val_clean")?,
            test: load("test")?,
        })
    }

    pub fn save_biased(&mut self, seed: u64, model: &LayeredModel, losses: &[EpochLoss]) -> Result<()> {
        self.save_checkpoint(BIASED_CHECKPOINT, model)?;
        self.write_json(
            BIASED_RECORD,
            &BiasedRecord {
                seed,
                checkpoint: BIASED_CHECKPOINT.into(),
                epoch_losses: losses.to_vec(),
            },
        )
    }

    pub fn load_biased(&self) -> Result<(LayeredModel, Vec<EpochLoss>)> {
        let record: BiasedRecord = self.read_json(BIASED_RECORD)?;
        let model = self.load_checkpoint(&record.checkpoint)?;
        Ok((model, record.epoch_losses))
    }

    pub fn save_checkpoint(&mut self, rel: impl AsRef<Path>, model: &LayeredModel) -> Result<()> {
        let rel = rel.as_ref();
        io::save_checkpoint(&self.path(rel), model).with_context(|| format!("writing {}", rel.display()))?;
        self.record(rel);
        Ok(())
    }

    pub fn load_checkpoint(&self, rel: impl AsRef<Path>) -> Result<LayeredModel> {
        let rel = rel.as_ref();
        io::load_checkpoint(&self.path(rel)).with_context(|| format!("loading {}", rel.display()))
    }

    pub fn save_cavs(&mut self, cavs: &[FittedCav]) -> Result<()> {
        for f in cavs {
            let rel = format!("cavs/{}.cav", f.solver);
            io::save_cav(&self.path(&rel), &f.cav).with_context(|| format!("writing {rel}"))?;
            self.record(Path::new(&rel));
        }
        Ok(())
    }

    /// Loads the CAVs of `solvers`; validation curves are not stored here.
    pub fn load_cavs(&self, solvers: &[CavSolver]) -> Result<Vec<FittedCav>> {
        solvers
            .iter()
            .map(|&solver| {
                let rel = format!("cavs/{solver}.cav");
                let cav = io::load_cav(&self.path(&rel)).with_context(|| format!("loading {rel}"))?;
                Ok(FittedCav {
                    solver,
                    cav,
                    curve: Vec::new(),
                })
            })
            .collect()
    }

    pub fn save_run(&mut self, record: &RunRecord, model: &LayeredModel) -> Result<()> {
        self.save_checkpoint(&record.checkpoint, model)?;
        self.write_json(format!("runs/{}.json", record.name), record)
    }

    /// Every run record, ordered by file name.
    pub fn load_runs(&self) -> Result<Vec<RunRecord>> {
        let dir = self.path("runs");
        let mut names: Vec<String> = fs::read_dir(&dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .map(|e| Ok(e?.file_name().to_string_lossy().into_owned()))
            .collect::<Result<_>>()?;
        names.retain(|n| n.ends_with(".json") && format!("runs/{n}") != BIASED_RECORD);
        names.sort();
        names.iter().map(|n| self.read_json(format!("runs/{n}"))).collect()
    }
}

impl Datasets {
    fn parts(&self) -> [&ConceptDataset; 4] {
        [&self.train, &self.val, &self.val_clean, &self.test]
    }
}
