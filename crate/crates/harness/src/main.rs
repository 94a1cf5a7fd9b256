use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use clarc_harness::config::ExperimentConfig;
use clarc_harness::experiment::{
    self, ablation_base, class_study, evaluate_records, expected_files, load_prepared, run_alignment_study,
    run_corrections, stored_model, write_manifest, AblationAxis,
};
use clarc_harness::pipeline::{fit_cavs, generate_data, train_biased};
use clarc_harness::report;
use clarc_harness::store::Store;

#[derive(Parser)]
#[command(name = "clarc", version, about = "Controlled-bias experiments with latent-space corrections")]
struct Cli {
    /// Experiment config (TOML). Without it a preset is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no --config is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Standard)]
    preset: Preset,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Standard,
    ClassStudy,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and split the biased dataset.
    Generate,
    /// Train the biased model.
    Train,
    /// Fit CAVs with every configured solver.
    FitCav,
    /// Alignment of every CAV with the artifact's activation change.
    Align,
    /// Run every correction over its lambda grid.
    Correct,
    /// Re-evaluate stored runs and write the metrics table.
    Evaluate,
    /// Vary one setting of the base correction.
    Ablate {
        #[arg(long, value_enum)]
        axis: AblationAxis,
    },
    /// Class study, loss curves and the manifest.
    Report,
    /// All stages in one process.
    Run,
    /// Print the effective config.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => match cli.preset {
            Preset::Standard => ExperimentConfig::standard(0),
            Preset::ClassStudy => ExperimentConfig::class_study(0),
        },
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let mut store = Store::new(&cfg.out_dir);
    match cli.command {
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
        Command::Generate => {
            store.stamp(&cfg)?;
            let data = generate_data(&cfg)?;
            store.save_datasets(&cfg, &data)?;
        }
        Command::Train => {
            store.check_stamp(&cfg)?;
            let data = store.load_datasets().context("train: run `generate` first")?;
            let (model, losses) = train_biased(&cfg, &data)?;
            store.save_biased(cfg.seed, &model, &losses)?;
        }
        Command::FitCav => {
            store.check_stamp(&cfg)?;
            let data = store.load_datasets().context("fit-cav: run `generate` first")?;
            let (model, _) = store.load_biased().context("fit-cav: run `train` first")?;
            let cavs = fit_cavs(&cfg, &data, &model)?;
            store.save_cavs(&cavs)?;
            store.write_bytes("reports/cav_sweep.csv", &report::cav_sweep_csv(&cavs)?)?;
        }
        Command::Align => {
            let prepared = load_prepared(&store, &cfg)?;
            let rows = run_alignment_study(&prepared)?;
            store.write_bytes("reports/alignment.csv", &report::alignment_csv(&rows)?)?;
        }
        Command::Correct => {
            let prepared = load_prepared(&store, &cfg)?;
            let corrections = run_corrections(&prepared)?;
            let records = corrections.records(cfg.seed);
            let models = corrections.sweeps.iter().flat_map(|s| s.runs.iter().map(|r| &r.model));
            for (record, model) in records.iter().zip(models) {
                store.save_run(record, model)?;
            }
        }
        Command::Evaluate => {
            let prepared = load_prepared(&store, &cfg)?;
            let mut records = store.load_runs().context("evaluate: run `correct` first")?;
            evaluate_records(&prepared, &mut records, &stored_model(&store))?;
            let k = prepared.model.num_classes();
            store.write_bytes("reports/metrics.csv", &report::metrics_csv(&records, k)?)?;
        }
        Command::Ablate { axis } => {
            let prepared = load_prepared(&store, &cfg)?;
            let records = store.load_runs().context("ablate: run `correct` first")?;
            ablation_base(&cfg)?;
            let rows = experiment::run_ablation(&prepared, &records, axis)?;
            store.write_bytes(format!("reports/ablation_{}.csv", axis.name()), &report::ablation_csv(&rows)?)?;
        }
        Command::Report => {
            let started = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let prepared = load_prepared(&store, &cfg)?;
            let records = store.load_runs().context("report: run `correct` first")?;
            store.write_bytes(
                "reports/losses.csv",
                &report::losses_csv(&prepared.train_losses, &records)?,
            )?;
            if cfg.class_study.is_some() {
                let rows = class_study(&prepared, &records, &stored_model(&store))?;
                store.write_bytes("reports/class_impact.csv", &report::class_impact_csv(&rows)?)?;
            }
            let files = expected_files(&store, &cfg, &records)?;
            write_manifest(&mut store, &cfg, started, files)?;
        }
        Command::Run => {
            let manifest = experiment::run_experiment(&cfg)?;
            println!("{} files under {}", manifest.files.len(), cfg.out_dir.display());
        }
    }
    for f in store.written() {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}
