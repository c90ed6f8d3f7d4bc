//! Cross-validation driver behind the `train`, `eval` and `ablate` commands.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{split_folds, FoldSplit, Sample};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate_folds, emit_ablation_table, emit_table, FoldAccumulator, Metric, MetricsReport, OrganScore,
    OverlapCounts, TableFormat,
};
use crate::networks::{predict_mask, Network, NetworkConfig, VariantId};
use crate::training::{save_checkpoint, staged_train, StagePlan, StagedOutcome, TrainConfig};

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Stage budgets. Stages a variant does not use are dropped; when
    /// absent every stage runs `train.epochs` epochs.
    pub plan: Option<StagePlan>,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.network.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn plan_for(&self, variant: VariantId) -> Result<StagePlan> {
        let default = StagePlan::for_variant(variant, self.train.epochs);
        let plan = match &self.plan {
            None => default,
            Some(p) => StagePlan {
                stages: p.stages.iter().filter(|s| default.stages.iter().any(|d| d.stage == s.stage)).cloned().collect(),
                pretrain_early_stop: p.pretrain_early_stop,
            },
        };
        plan.validate(variant)?;
        Ok(plan)
    }
}

/// Worker count: `SECP_THREADS` if set, else the available parallelism.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("SECP_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Usage(format!("SECP_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Scores of one network on one sample set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub variant: String,
    pub fold: usize,
    pub patients: Vec<String>,
    pub slices: usize,
    pub counts: Vec<OverlapCounts>,
    pub scores: Vec<OrganScore>,
}

/// Predicts slice by slice and accumulates per-organ counts.
pub fn evaluate(net: &Network<f32>, samples: &[&Sample], fold: usize) -> Result<FoldReport> {
    let mut acc = FoldAccumulator::new();
    let mut patients: Vec<String> = Vec::new();
    for s in samples {
        let image = s.image.clone().reshape([1, 1, s.height(), s.width()])?;
        let pred = predict_mask(net, &image)?;
        acc.add(&pred, &s.mask)?;
        if !patients.contains(&s.patient_id) {
            patients.push(s.patient_id.clone());
        }
    }
    patients.sort();
    Ok(FoldReport {
        variant: net.variant.label().to_owned(),
        fold,
        patients,
        slices: samples.len(),
        scores: acc.scores(),
        counts: acc.counts,
    })
}

pub fn split_for(samples: &[Sample], k: usize, seed: u64) -> Result<FoldSplit> {
    let ids: Vec<&str> = samples.iter().map(|s| s.patient_id.as_str()).collect();
    split_folds(&ids, k, seed)
}

pub struct FoldRun {
    pub fold: usize,
    pub outcome: StagedOutcome,
    pub test: FoldReport,
    /// Scores on the fold's own training set, when requested.
    pub train: Option<FoldReport>,
}

/// Staged training on every fold but `fold`, then evaluation on `fold`.
pub fn run_fold(
    variant: VariantId,
    cfg: &RunConfig,
    samples: &[Sample],
    split: &FoldSplit,
    fold: usize,
    score_training_set: bool,
) -> Result<FoldRun> {
    let (train, test) = split.partition(samples, fold)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!("fold {fold} leaves an empty training or test set")));
    }
    let train_owned: Vec<Sample> = train.iter().map(|&s| s.clone()).collect();
    let plan = cfg.plan_for(variant)?;
    let outcome = staged_train(variant, cfg.network, &train_owned, &plan, &cfg.train)?;
    let test_report = evaluate(&outcome.network, &test, fold)?;
    let train_report = if score_training_set { Some(evaluate(&outcome.network, &train, fold)?) } else { None };
    Ok(FoldRun { fold, outcome, test: test_report, train: train_report })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_report(dir: &Path, stem: &str, report: &MetricsReport) -> Result<()> {
    for (ext, format) in [("json", TableFormat::Json), ("csv", TableFormat::Csv), ("txt", TableFormat::Text)] {
        std::fs::write(dir.join(format!("{stem}.{ext}")), emit_table(report, format)?)?;
    }
    Ok(())
}

/// Writes a fold's validation report exactly as `eval` does.
pub fn write_fold_report(path: &Path, report: &FoldReport) -> Result<()> {
    write_json(path, report)
}

/// `k`-fold cross-validation of one variant.
///
/// Layout of `out`: `config.json`, `split.json`, `report.{json,csv,txt}` and
/// per fold `fold{f}/stage{s}.ckpt`, `stage{s}_log.csv`, `final.ckpt`,
/// `report.json`.
pub fn cross_validate(variant: VariantId, samples: &[Sample], k: usize, cfg: &RunConfig, out: &Path) -> Result<MetricsReport> {
    std::fs::create_dir_all(out)?;
    let split = split_for(samples, k, cfg.train.seed)?;
    write_json(&out.join("config.json"), cfg)?;
    write_json(&out.join("split.json"), &split)?;
    let mut per_fold = Vec::with_capacity(k);
    for fold in 0..k {
        log::info!("{variant}: fold {}/{k}", fold + 1);
        let run = run_fold(variant, cfg, samples, &split, fold, false)?;
        let dir = out.join(format!("fold{fold}"));
        std::fs::create_dir_all(&dir)?;
        for (i, stage) in run.outcome.stages.iter().enumerate() {
            std::fs::write(dir.join(format!("stage{}.ckpt", i + 1)), &stage.checkpoint)?;
            std::fs::write(dir.join(format!("stage{}_log.csv", i + 1)), stage.log.to_csv())?;
        }
        save_checkpoint(&run.outcome.network, dir.join("final.ckpt"))?;
        write_fold_report(&dir.join("report.json"), &run.test)?;
        per_fold.push(run.test.scores);
    }
    let report = aggregate_folds(&per_fold)?;
    write_report(out, "report", &report)?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct VariantSummary {
    pub variant: VariantId,
    pub test: MetricsReport,
    pub train: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    /// In [`VariantId::ALL`] order.
    pub variants: Vec<VariantSummary>,
}

impl AblationOutcome {
    /// Mean training Dice (percent) of `variant`, averaged over organs and folds.
    pub fn training_dice(&self, variant: VariantId) -> Option<f64> {
        self.variants.iter().find(|v| v.variant == variant).map(|v| v.train.ave.dice_mean)
    }

    /// Whether SECP-Net fits its training folds at least as well as the baseline.
    pub fn secp_not_worse_than_baseline(&self) -> Option<bool> {
        Some(self.training_dice(VariantId::SECPNet)? >= self.training_dice(VariantId::Baseline)?)
    }

    pub fn table(&self, metric: Metric, format: TableFormat) -> Result<Vec<u8>> {
        let cols: Vec<(&str, &MetricsReport)> = self.variants.iter().map(|v| (v.variant.label(), &v.test)).collect();
        emit_ablation_table(metric, &cols, format)
    }

    /// `ablation_{dice,jac}.{csv,txt,json}`, per-variant reports and `training_dice.json`.
    pub fn write(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out)?;
        for (metric, stem) in [(Metric::Dice, "ablation_dice"), (Metric::Jaccard, "ablation_jac")] {
            for (ext, format) in [("csv", TableFormat::Csv), ("txt", TableFormat::Text), ("json", TableFormat::Json)] {
                std::fs::write(out.join(format!("{stem}.{ext}")), self.table(metric, format)?)?;
            }
        }
        for v in &self.variants {
            write_report(out, &format!("report_{:?}", v.variant), &v.test)?;
        }
        let training: Vec<serde_json::Value> = self
            .variants
            .iter()
            .map(|v| serde_json::json!({ "variant": v.variant.label(), "train_dice_mean": v.train.ave.dice_mean }))
            .collect();
        write_json(
            &out.join("training_dice.json"),
            &serde_json::json!({
                "variants": training,
                "secp_net_not_worse_than_baseline": self.secp_not_worse_than_baseline(),
            }),
        )
    }
}

/// Every variant on every fold, in parallel worker threads.
///
/// Jobs are independent; results are keyed by `(variant, fold)` so the
/// outcome does not depend on scheduling.
pub fn ablate(samples: &[Sample], k: usize, cfg: &RunConfig, threads: usize) -> Result<AblationOutcome> {
    let split = split_for(samples, k, cfg.train.seed)?;
    for v in VariantId::ALL {
        cfg.plan_for(v)?;
    }
    let jobs: Vec<(VariantId, usize)> =
        VariantId::ALL.iter().flat_map(|&v| (0..k).map(move |f| (v, f))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<(FoldReport, FoldReport)>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(variant, fold)) = jobs.get(i) else { break };
                log::info!("ablate: {variant} fold {}/{k}", fold + 1);
                let r = run_fold(variant, cfg, samples, &split, fold, true)
                    .map(|run| (run.test, run.train.expect("training set scored")));
                let failed = r.is_err();
                results.lock().expect("results lock")[i] = Some(r);
                if failed {
                    // stop handing out new jobs
                    next.store(jobs.len(), Ordering::SeqCst);
                    break;
                }
            });
        }
    });

    let mut results = results.into_inner().expect("results lock");
    let mut variants = Vec::with_capacity(VariantId::ALL.len());
    for (vi, &variant) in VariantId::ALL.iter().enumerate() {
        let mut test = Vec::with_capacity(k);
        let mut train = Vec::with_capacity(k);
        for f in 0..k {
            match results[vi * k + f].take() {
                Some(Ok((te, tr))) => {
                    test.push(te.scores);
                    train.push(tr.scores);
                }
                Some(Err(e)) => return Err(e),
                None => return Err(Error::Internal(format!("ablation job {variant} fold {f} did not run"))),
            }
        }
        variants.push(VariantSummary { variant, test: aggregate_folds(&test)?, train: aggregate_folds(&train)? });
    }
    Ok(AblationOutcome { variants })
}
