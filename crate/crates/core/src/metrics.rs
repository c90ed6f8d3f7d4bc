//! Per-organ Dice and Jaccard scores, fold aggregation and report tables.
//!
//! Scores are micro-averaged over every pixel of a fold's test set; the
//! reported `±` is the sample standard deviation across folds.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{label_name, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::mask::Mask;

/// Number of scored organs (labels `1..=13`).
pub const NUM_ORGANS: usize = NUM_CLASSES - 1;

/// Pixel counts for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl OverlapCounts {
    pub fn count(pred: &Mask, gt: &Mask, organ: u8) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(Error::Usage(format!(
                "prediction {:?} and ground truth {:?} differ in shape",
                pred.shape(),
                gt.shape()
            )));
        }
        let mut c = Self::default();
        for (&p, &t) in pred.labels().iter().zip(gt.labels()) {
            match (p == organ, t == organ) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    /// Counts for every organ `1..=13`, index `organ - 1`.
    pub fn count_all(pred: &Mask, gt: &Mask) -> Result<[Self; NUM_ORGANS]> {
        if pred.shape() != gt.shape() {
            return Err(Error::Usage(format!(
                "prediction {:?} and ground truth {:?} differ in shape",
                pred.shape(),
                gt.shape()
            )));
        }
        let mut out = [Self::default(); NUM_ORGANS];
        for (&p, &t) in pred.labels().iter().zip(gt.labels()) {
            if p == t {
                if p != 0 {
                    out[p as usize - 1].tp += 1;
                }
                continue;
            }
            if p != 0 {
                out[p as usize - 1].fp += 1;
            }
            if t != 0 {
                out[t as usize - 1].fn_ += 1;
            }
        }
        Ok(out)
    }

    pub fn add(&mut self, other: Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `None` when the class is absent from both masks.
    pub fn dice(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        (denom > 0).then(|| 2.0 * self.tp as f64 / denom as f64)
    }

    pub fn jaccard(&self) -> Option<f64> {
        let union = self.tp + self.fp + self.fn_;
        (union > 0).then(|| self.tp as f64 / union as f64)
    }
}

/// Dice of class `organ`; `None` when both sets are empty.
pub fn dice(pred: &Mask, gt: &Mask, organ: u8) -> Result<Option<f64>> {
    Ok(OverlapCounts::count(pred, gt, organ)?.dice())
}

/// Jaccard of class `organ`; `None` when both sets are empty.
pub fn jaccard(pred: &Mask, gt: &Mask, organ: u8) -> Result<Option<f64>> {
    Ok(OverlapCounts::count(pred, gt, organ)?.jaccard())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganScore {
    /// Label index, `1..=13`.
    pub organ: usize,
    pub dice: f64,
    pub jaccard: f64,
    /// False when the organ is absent from both prediction and ground truth.
    pub defined: bool,
}

impl OrganScore {
    pub fn from_counts(organ: usize, c: OverlapCounts) -> Self {
        match (c.dice(), c.jaccard()) {
            (Some(dice), Some(jaccard)) => Self { organ, dice, jaccard, defined: true },
            _ => Self { organ, dice: 0.0, jaccard: 0.0, defined: false },
        }
    }
}

/// Accumulates counts over a fold's test set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldAccumulator {
    pub counts: Vec<OverlapCounts>,
}

impl FoldAccumulator {
    pub fn new() -> Self {
        Self { counts: vec![OverlapCounts::default(); NUM_ORGANS] }
    }

    pub fn add(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        for (acc, c) in self.counts.iter_mut().zip(OverlapCounts::count_all(pred, gt)?) {
            acc.add(c);
        }
        Ok(())
    }

    /// One score per organ, in label order.
    pub fn scores(&self) -> Vec<OrganScore> {
        self.counts.iter().enumerate().map(|(i, &c)| OrganScore::from_counts(i + 1, c)).collect()
    }
}

/// Scores of a whole fold from `(prediction, ground truth)` pairs.
pub fn fold_scores<'a>(pairs: impl IntoIterator<Item = (&'a Mask, &'a Mask)>) -> Result<Vec<OrganScore>> {
    let mut acc = FoldAccumulator::new();
    for (p, t) in pairs {
        acc.add(p, t)?;
    }
    Ok(acc.scores())
}

/// One table row, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub organ: String,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub jac_mean: f64,
    pub jac_std: f64,
    /// Folds in which the organ was scored.
    pub folds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Always `"fold"`: the deviation is taken across fold-level scores.
    pub std_across: String,
    pub folds: usize,
    /// The 13 organs in label order.
    pub organs: Vec<ReportRow>,
    /// Unweighted mean of the organ rows.
    pub ave: ReportRow,
}

impl MetricsReport {
    /// Organ rows followed by `Ave`.
    pub fn rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.organs.iter().chain(std::iter::once(&self.ave))
    }
}

/// Mean and sample standard deviation; a single value has deviation 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-organ mean ± std (percent) across folds.
///
/// Undefined fold scores are skipped; an organ never scored gets zeros and
/// `folds: 0`.
pub fn aggregate_folds(per_fold: &[Vec<OrganScore>]) -> Result<MetricsReport> {
    if per_fold.is_empty() {
        return Err(Error::Usage("no fold scores to aggregate".into()));
    }
    let mut organs = Vec::with_capacity(NUM_ORGANS);
    for organ in 1..=NUM_ORGANS {
        let mut dices = Vec::new();
        let mut jacs = Vec::new();
        for fold in per_fold {
            if let Some(s) = fold.iter().find(|s| s.organ == organ && s.defined) {
                dices.push(100.0 * s.dice);
                jacs.push(100.0 * s.jaccard);
            }
        }
        let (dice_mean, dice_std) = mean_std(&dices);
        let (jac_mean, jac_std) = mean_std(&jacs);
        organs.push(ReportRow {
            organ: label_name(organ).to_owned(),
            dice_mean,
            dice_std,
            jac_mean,
            jac_std,
            folds: dices.len(),
        });
    }
    let n = organs.len() as f64;
    let avg = |f: fn(&ReportRow) -> f64| organs.iter().map(f).sum::<f64>() / n;
    let ave = ReportRow {
        organ: "Ave".into(),
        dice_mean: avg(|r| r.dice_mean),
        dice_std: avg(|r| r.dice_std),
        jac_mean: avg(|r| r.jac_mean),
        jac_std: avg(|r| r.jac_std),
        folds: per_fold.len(),
    };
    Ok(MetricsReport { std_across: "fold".into(), folds: per_fold.len(), organs, ave })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Json,
    Text,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "text" | "txt" => Ok(Self::Text),
            _ => Err(Error::Usage(format!("unknown table format `{s}`"))),
        }
    }
}

pub const CSV_HEADER: &str = "organ,dice_mean,dice_std,jac_mean,jac_std";

pub fn emit_table(report: &MetricsReport, format: TableFormat) -> Result<Vec<u8>> {
    let mut out = String::new();
    match format {
        TableFormat::Json => return Ok((serde_json::to_string_pretty(report)? + "\n").into_bytes()),
        TableFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in report.rows() {
                let _ = writeln!(
                    out,
                    "{},{:.2},{:.2},{:.2},{:.2}",
                    r.organ, r.dice_mean, r.dice_std, r.jac_mean, r.jac_std
                );
            }
        }
        TableFormat::Text => {
            let _ = writeln!(out, "# mean ± std across {} folds (%)", report.folds);
            let _ = writeln!(out, "{:<16}  {:>13}  {:>13}", "organ", "dice", "jac");
            for r in report.rows() {
                let _ = writeln!(
                    out,
                    "{:<16}  {:>13}  {:>13}",
                    r.organ,
                    format!("{:.2}±{:.2}", r.dice_mean, r.dice_std),
                    format!("{:.2}±{:.2}", r.jac_mean, r.jac_std)
                );
            }
        }
    }
    Ok(out.into_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Dice,
    Jaccard,
}

/// Variant-by-organ table of one metric: organ rows plus `Ave`, one
/// `mean±std` column per variant in the given order.
pub fn emit_ablation_table(
    metric: Metric,
    columns: &[(&str, &MetricsReport)],
    format: TableFormat,
) -> Result<Vec<u8>> {
    let cell = |r: &ReportRow| match metric {
        Metric::Dice => (r.dice_mean, r.dice_std),
        Metric::Jaccard => (r.jac_mean, r.jac_std),
    };
    let row_names: Vec<String> = match columns.first() {
        Some((_, rep)) => rep.rows().map(|r| r.organ.clone()).collect(),
        None => return Err(Error::Usage("ablation table needs at least one variant".into())),
    };
    match format {
        TableFormat::Json => {
            let mut obj = serde_json::Map::new();
            obj.insert("metric".into(), format!("{metric:?}").to_lowercase().into());
            obj.insert("variants".into(), columns.iter().map(|(v, _)| *v).collect::<Vec<_>>().into());
            let rows: Vec<serde_json::Value> = row_names
                .iter()
                .enumerate()
                .map(|(i, name)| {
                    let cells: Vec<serde_json::Value> = columns
                        .iter()
                        .map(|(_, rep)| {
                            let (m, s) = cell(rep.rows().nth(i).expect("same organ rows"));
                            serde_json::json!({ "mean": m, "std": s })
                        })
                        .collect();
                    serde_json::json!({ "organ": name, "cells": cells })
                })
                .collect();
            obj.insert("rows".into(), rows.into());
            Ok((serde_json::to_string_pretty(&obj)? + "\n").into_bytes())
        }
        TableFormat::Csv | TableFormat::Text => {
            let sep = if format == TableFormat::Csv { "," } else { "  " };
            let mut out = String::new();
            let mut header = vec!["organ".to_owned()];
            header.extend(columns.iter().map(|(v, _)| v.to_string()));
            let _ = writeln!(out, "{}", header.join(sep));
            for (i, name) in row_names.iter().enumerate() {
                let mut line = vec![name.clone()];
                for (_, rep) in columns {
                    let (m, s) = cell(rep.rows().nth(i).expect("same organ rows"));
                    line.push(format!("{m:.2}±{s:.2}"));
                }
                let _ = writeln!(out, "{}", line.join(sep));
            }
            Ok(out.into_bytes())
        }
    }
}
