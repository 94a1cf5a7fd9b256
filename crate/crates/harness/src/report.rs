//! CSV reports. Every table has a header row and a fixed column order;
//! floats use the shortest representation that parses back exactly.

use anyhow::Result;
use clarc_core::correction::EpochLoss;
use clarc_core::metrics::{ClassImpact, MetricsReport};
use serde::Serialize;

use crate::pipeline::{AlignmentRow, FittedCav};
use crate::store::RunRecord;

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn table(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

fn strings(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

/// One row per run, ordered by run name.
pub fn metrics_csv(records: &[RunRecord], num_classes: usize) -> Result<Vec<u8>> {
    let mut header = strings(&[
        "run",
        "label",
        "method",
        "lambda",
        "seed",
        "selected",
        "diverged",
        "clean_accuracy",
        "clean_sem",
        "biased_accuracy",
        "biased_sem",
        "tcav",
        "tcav_sens",
        "r_bias",
        "r_bias_excluded",
        "num_clean",
        "num_biased",
        "val_clean_accuracy",
        "val_biased_accuracy",
    ]);
    header.extend((0..num_classes).map(|c| format!("clean_accuracy_class_{c}")));
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let rows: Vec<Vec<String>> = sorted
        .into_iter()
        .map(|r| {
            let t = r.test.as_ref();
            let f = |g: fn(&MetricsReport) -> f64| opt(t.map(g));
            let mut row = vec![
                r.name.clone(),
                r.label.clone(),
                r.method.name().to_string(),
                num(r.lambda),
                r.seed.to_string(),
                r.selected.to_string(),
                r.diverged.to_string(),
                f(|t| t.clean_accuracy),
                f(|t| t.clean_sem),
                f(|t| t.biased_accuracy),
                f(|t| t.biased_sem),
                f(|t| t.tcav),
                f(|t| t.tcav_sens),
                opt(t.and_then(|t| t.r_bias)),
                t.map(|t| t.r_bias_excluded.to_string()).unwrap_or_default(),
                t.map(|t| t.num_clean.to_string()).unwrap_or_default(),
                t.map(|t| t.num_biased.to_string()).unwrap_or_default(),
                opt(r.val_clean_accuracy),
                opt(r.val_biased_accuracy),
            ];
            row.extend((0..num_classes).map(|c| opt(t.and_then(|t| t.per_class_accuracy.get(c).copied().flatten()))));
            row
        })
        .collect();
    table(&header, &rows)
}

pub fn alignment_csv(rows: &[AlignmentRow]) -> Result<Vec<u8>> {
    let header = strings(&["solver", "lambda", "s", "s_sem", "s_bar", "num_excluded", "num_samples", "selected"]);
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.solver.to_string(),
                opt(r.lambda),
                num(r.report.sample_wise),
                num(r.report.sample_wise_sem),
                num(r.report.overall),
                r.report.num_excluded.to_string(),
                r.report.num_samples.to_string(),
                r.selected.to_string(),
            ]
        })
        .collect();
    table(&header, &rows)
}

/// Validation concept accuracy of every solver at every grid point.
pub fn cav_sweep_csv(cavs: &[FittedCav]) -> Result<Vec<u8>> {
    let header = strings(&["solver", "lambda", "val_concept_accuracy", "selected"]);
    let mut rows = Vec::new();
    for f in cavs {
        for &(lambda, acc) in &f.curve {
            let lambda = (!lambda.is_nan()).then_some(lambda);
            rows.push(vec![
                f.solver.to_string(),
                opt(lambda),
                num(acc),
                (lambda == f.cav.hyperparameter).to_string(),
            ]);
        }
    }
    table(&header, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImpactRow {
    pub label: String,
    pub lambda: f64,
    pub classes: Vec<usize>,
    pub impact: ClassImpact,
}

pub fn class_impact_csv(rows: &[ImpactRow]) -> Result<Vec<u8>> {
    let header = strings(&["label", "lambda", "classes", "selected_delta", "all_delta"]);
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let classes: Vec<String> = r.classes.iter().map(|c| c.to_string()).collect();
            vec![
                r.label.clone(),
                num(r.lambda),
                classes.join(";"),
                num(r.impact.selected),
                num(r.impact.all),
            ]
        })
        .collect();
    table(&header, &rows)
}

/// Per-epoch losses of the biased training run and every correction run.
pub fn losses_csv(biased: &[EpochLoss], records: &[RunRecord]) -> Result<Vec<u8>> {
    let header = strings(&["run", "epoch", "cross_entropy", "penalty", "total"]);
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let runs = std::iter::once(("biased", biased)).chain(sorted.iter().map(|r| (r.name.as_str(), &r.epoch_losses[..])));
    let mut rows = Vec::new();
    for (name, losses) in runs {
        for l in losses {
            rows.push(vec![
                name.to_string(),
                l.epoch.to_string(),
                num(l.cross_entropy),
                num(l.penalty),
                num(l.total),
            ]);
        }
    }
    table(&header, &rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub label: String,
    pub lambda: f64,
    /// True for the value used by the base correction.
    pub base: bool,
    pub record: RunRecord,
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<Vec<u8>> {
    let header = strings(&[
        "axis",
        "value",
        "label",
        "lambda",
        "base",
        "clean_accuracy",
        "biased_accuracy",
        "tcav",
        "tcav_sens",
        "r_bias",
        "val_clean_accuracy",
        "val_biased_accuracy",
        "final_penalty",
    ]);
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let t = r.record.test.as_ref();
            vec![
                r.axis.clone(),
                r.value.clone(),
                r.label.clone(),
                num(r.lambda),
                r.base.to_string(),
                opt(t.map(|t| t.clean_accuracy)),
                opt(t.map(|t| t.biased_accuracy)),
                opt(t.map(|t| t.tcav)),
                opt(t.map(|t| t.tcav_sens)),
                opt(t.and_then(|t| t.r_bias)),
                opt(r.record.val_clean_accuracy),
                opt(r.record.val_biased_accuracy),
                opt(r.record.epoch_losses.last().map(|l| l.penalty)),
            ]
        })
        .collect();
    table(&header, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_through_text() {
        for x in [0.1, 1e-5, 1.0 / 3.0, 5e-5, 1e12] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(opt(None), "");
    }

    #[test]
    fn impact_table_has_fixed_header() {
        let bytes = class_impact_csv(&[ImpactRow {
            label: "p_clarc".into(),
            lambda: 0.0,
            classes: vec![1, 3],
            impact: ClassImpact { selected: -0.5, all: -0.125 },
        }])
        .unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(
            text,
            "label,lambda,classes,selected_delta,all_delta\np_clarc,0,1;3,-0.5,-0.125\n"
        );
    }
}
