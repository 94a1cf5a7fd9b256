//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clarc_core::cav::CavSolver;
use clarc_core::correction::{Aggregation, AnnotationMode, GradientTarget, Method};
use clarc_core::data::{ArtifactTransform, BiasSpec, RelatedFeature, TaskSpec};
use clarc_core::net::LayerKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub task: TaskSpec,
    pub bias: BiasSpec,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub training: TrainingSpec,
    #[serde(default)]
    pub cav: CavSpec,
    #[serde(default)]
    pub finetune: FinetuneSpec,
    #[serde(default)]
    pub selection: SelectionSpec,
    #[serde(default)]
    pub corrections: Vec<CorrectionSpec>,
    #[serde(default)]
    pub class_study: Option<ClassStudySpec>,
    #[serde(default)]
    pub ablation: AblationSpec,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.6, val: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: Vec<LayerKind>,
    pub split_index: usize,
}

impl Default for ModelSpec {
    /// Two conv blocks, global channel max, two dense layers. The split is
    /// the second ReLU, whose 16 channels form the latent space.
    fn default() -> Self {
        use LayerKind::*;
        Self {
            layers: vec![
                Conv2d { in_channels: 1, out_channels: 8, kernel: 5, stride: 1 },
                Relu,
                MaxPool2d { kernel: 2, stride: 2 },
                Conv2d { in_channels: 8, out_channels: 16, kernel: 3, stride: 1 },
                Relu,
                MaxPool2d { kernel: 4, stride: 4 },
                Flatten,
                Dense { in_features: 16, out_features: 64 },
                Relu,
                Dense { in_features: 64, out_features: 4 },
            ],
            split_index: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.05,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavSpec {
    pub solvers: Vec<CavSolver>,
    pub grid: Vec<f64>,
    /// Solver whose CAV drives the corrections and TCAV.
    pub use_solver: CavSolver,
}

impl Default for CavSpec {
    fn default() -> Self {
        Self {
            solvers: CavSolver::ALL.to_vec(),
            grid: clarc_core::cav::default_grid(),
            use_solver: CavSolver::Signal,
        }
    }
}

/// Defaults shared by every correction run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSpec {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 3e-4,
            batch_size: 16,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSpec {
    /// Largest tolerated clean-accuracy drop, as a fraction.
    pub clean_drop_budget: f64,
}

impl Default for SelectionSpec {
    fn default() -> Self {
        Self { clean_drop_budget: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionSpec {
    pub method: Method,
    /// Swept for rr_clarc and rrr; ignored otherwise.
    #[serde(default)]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_annotation")]
    pub annotation: AnnotationMode,
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
    #[serde(default = "default_target")]
    pub gradient_target: GradientTarget,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    /// Name used in reports; defaults to the method name.
    #[serde(default)]
    pub label: Option<String>,
}

fn default_annotation() -> AnnotationMode {
    AnnotationMode::RandomSign { seed: 0 }
}

fn default_aggregation() -> Aggregation {
    Aggregation::Squared
}

fn default_target() -> GradientTarget {
    GradientTarget::Logits
}

impl CorrectionSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            lambdas: Vec::new(),
            annotation: default_annotation(),
            aggregation: default_aggregation(),
            gradient_target: default_target(),
            epochs: None,
            learning_rate: None,
            label: None,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    /// Grid points to run; a single `0` for methods without a penalty.
    pub fn lambda_grid(&self) -> Vec<f64> {
        if self.method.uses_lambda() {
            self.lambdas.clone()
        } else {
            vec![0.0]
        }
    }
}

/// Ablations vary one setting of a base correction at its selected lambda.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    /// Label of the base correction; the first rr_clarc entry when absent.
    #[serde(default)]
    pub base: Option<String>,
    #[serde(default = "default_ablation_epochs")]
    pub epochs: Vec<usize>,
}

fn default_ablation_epochs() -> Vec<usize> {
    vec![1, 2, 5, 10, 20]
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            base: None,
            epochs: default_ablation_epochs(),
        }
    }
}

/// Accuracy impact of corrections on a class that legitimately uses the
/// artifact-correlated feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassStudySpec {
    /// Number of related classes to select by logit increase.
    #[serde(default = "default_q")]
    pub q: usize,
}

fn default_q() -> usize {
    1
}

impl ExperimentConfig {
    /// Defaults for the brightness-bias task with the given seed.
    pub fn default_with_seed(seed: u64) -> Self {
        Self {
            seed,
            out_dir: default_out(),
            task: TaskSpec::default(),
            bias: BiasSpec {
                biased_class: 0,
                p_bias: 0.2,
                transform: ArtifactTransform::Brightness { alpha: 0.5 },
                leak_rate: 0.01,
            },
            split: SplitSpec::default(),
            model: ModelSpec::default(),
            training: TrainingSpec::default(),
            cav: CavSpec::default(),
            finetune: FinetuneSpec::default(),
            selection: SelectionSpec::default(),
            corrections: Vec::new(),
            class_study: None,
            ablation: AblationSpec::default(),
        }
    }

    /// Defaults plus vanilla, RR-ClArC, A-ClArC, P-ClArC and RRR corrections.
    pub fn standard(seed: u64) -> Self {
        let mut cfg = Self::default_with_seed(seed);
        let mut rr = CorrectionSpec::new(Method::RrClarc);
        rr.lambdas = crate::pipeline::toy_rr_grid();
        let mut rrr = CorrectionSpec::new(Method::Rrr);
        rrr.lambdas = crate::pipeline::toy_rrr_grid();
        cfg.corrections = vec![
            CorrectionSpec::new(Method::Vanilla),
            rr,
            CorrectionSpec::new(Method::AClarc),
            CorrectionSpec::new(Method::PClarc),
            rrr,
        ];
        cfg
    }

    /// Task where class 1 is drawn with class 2's shape and always
    /// brightened, so brightness is a legitimate feature of class 1. Runs a
    /// one-hot RR-ClArC on the biased class against A- and P-ClArC.
    pub fn class_study(seed: u64) -> Self {
        let mut cfg = Self::default_with_seed(seed);
        cfg.task.related = Some(RelatedFeature {
            class: 1,
            shares_shape_with: Some(2),
            alpha: 0.5,
        });
        cfg.class_study = Some(ClassStudySpec { q: default_q() });
        let mut rr = CorrectionSpec::new(Method::RrClarc);
        rr.lambdas = crate::pipeline::toy_rr_grid();
        rr.annotation = AnnotationMode::OneHot {
            target_class: cfg.bias.biased_class,
        };
        rr.label = Some("rr_clarc_onehot".into());
        cfg.corrections = vec![
            CorrectionSpec::new(Method::Vanilla),
            rr,
            CorrectionSpec::new(Method::AClarc),
            CorrectionSpec::new(Method::PClarc),
        ];
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.bias.validate()?;
        ensure!(
            self.bias.biased_class < self.task.num_classes,
            "biased class {} outside {} classes",
            self.bias.biased_class,
            self.task.num_classes
        );
        ensure!(
            self.split.train > 0.0 && self.split.val > 0.0 && self.split.train + self.split.val < 1.0,
            "split fractions must be positive and leave a test split"
        );
        ensure!(self.split_index_valid(), "split_index {} invalid for the model", self.model.split_index);
        ensure!(self.training.epochs > 0 && self.training.learning_rate > 0.0 && self.training.batch_size > 0,
            "training needs positive epochs, learning rate and batch size");
        ensure!(self.finetune.learning_rate > 0.0 && self.finetune.batch_size > 0,
            "fine-tuning needs a positive learning rate and batch size");
        ensure!(!self.cav.solvers.is_empty(), "no CAV solvers configured");
        ensure!(!self.cav.grid.is_empty(), "empty CAV grid");
        ensure!(
            (0.0..=1.0).contains(&self.selection.clean_drop_budget),
            "clean_drop_budget must be a fraction"
        );
        for c in &self.corrections {
            if c.method.uses_lambda() && c.lambdas.is_empty() {
                bail!("{} needs a non-empty lambda grid", c.label());
            }
            if c.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                bail!("{} has a negative or non-finite lambda", c.label());
            }
            if let AnnotationMode::OneHot { target_class } = c.annotation {
                ensure!(target_class < self.task.num_classes, "one-hot target out of range");
            }
        }
        if self.class_study.is_some() {
            ensure!(self.task.related.is_some(), "class study needs task.related");
        }
        for c in &self.corrections {
            ensure!(
                c.label() != "vanilla" || *c == CorrectionSpec::new(Method::Vanilla),
                "the label 'vanilla' is reserved for the plain vanilla baseline"
            );
        }
        if let Some(base) = &self.ablation.base {
            ensure!(
                self.corrections.iter().any(|c| &c.label() == base),
                "ablation base '{base}' is not a configured correction"
            );
        }
        ensure!(self.ablation.epochs.iter().all(|&e| e > 0), "ablation epochs must be positive");
        let mut labels: Vec<String> = self.corrections.iter().map(|c| c.label()).collect();
        labels.sort();
        labels.dedup();
        ensure!(labels.len() == self.corrections.len(), "correction labels must be unique");
        Ok(())
    }

    fn split_index_valid(&self) -> bool {
        let side = self.task.image_side;
        clarc_core::net::LayeredModel::init(
            vec![1, side, side],
            &self.model.layers,
            self.model.split_index,
            0,
        )
        .map(|m| m.num_classes() == self.task.num_classes)
        .unwrap_or(false)
    }
}
