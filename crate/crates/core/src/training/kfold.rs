use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use super::{train_one, EpochRecord, TrainConfig};
use crate::autodiff::Tensor;
use crate::data::{Fold, FoldPlan, InstanceBag};
use crate::error::{MilError, Result};
use crate::eval::{auc, mean_std, report_table, ResultRow, ScoredSet};
use crate::instrument::{self, Counters};
use crate::model::{Checkpoint, MilModel};
use crate::rng::stable_hash;
use crate::sampling::SamplingPolicy;

/// Stream tag of a fold, derived from its membership. Folds with identical
/// train and validation sets share their random streams.
pub fn fold_tag(fold: &Fold) -> u64 {
    let mut key = fold.train.join("\n");
    key.push('|');
    key.push_str(&fold.validation.join("\n"));
    stable_hash(&key)
}

/// Fresh model for a fold. Initialization depends on the run seed only, so
/// every fold starts from the same encoder; the frozen normalization is
/// calibrated on the fold's training instances.
pub fn fresh_model(cfg: &TrainConfig, input_dim: usize, train: &[&InstanceBag]) -> Result<MilModel> {
    prepared_model(cfg, input_dim, train, |_| Ok(()))
}

/// [`fresh_model`] with `adjust` applied to the raw initialization, before
/// the normalization is calibrated.
pub(super) fn prepared_model(
    cfg: &TrainConfig,
    input_dim: usize,
    train: &[&InstanceBag],
    adjust: impl FnOnce(&mut MilModel) -> Result<()>,
) -> Result<MilModel> {
    let mut model = MilModel::new(cfg.model_config(input_dim), cfg.seed)?;
    adjust(&mut model)?;
    let features: Vec<&Tensor> = train.iter().map(|b| &b.features).collect();
    model.calibrate_norm(&features)?;
    if cfg.freeze_encoder {
        for group in model.encoder_groups() {
            model.set_group_trainable(&group, false)?;
        }
    }
    Ok(model)
}

/// Positive-class scores of full, unsampled bags.
pub fn score_bags(model: &MilModel, bags: &[&InstanceBag]) -> Result<ScoredSet> {
    let mut scores = Vec::with_capacity(bags.len());
    for bag in bags {
        scores.push(model.predict(bag)?.positive_score());
    }
    ScoredSet::new(
        scores,
        bags.iter().map(|b| u8::from(b.label == 1)).collect(),
        bags.iter().map(|b| b.bag_id.clone()).collect(),
    )
}

/// Scores `bags` and reports the sampling/augmentation calls made while
/// doing so, which must be none.
pub(super) fn pure_test_scores(model: &MilModel, bags: &[&InstanceBag]) -> Result<(ScoredSet, Counters)> {
    let before = instrument::snapshot();
    let scores = score_bags(model, bags)?;
    Ok((scores, instrument::snapshot().since(before)))
}

pub(super) fn lookup<'a>(index: &HashMap<&str, &'a InstanceBag>, ids: &[String]) -> Result<Vec<&'a InstanceBag>> {
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| MilError::InvalidConfig(format!("fold references unknown bag {id}")))
        })
        .collect()
}

pub(super) fn input_dim(bags: &[InstanceBag]) -> Result<usize> {
    bags.first()
        .map(InstanceBag::dim)
        .ok_or_else(|| MilError::InvalidConfig("empty development set".into()))
}

pub(super) fn run_parallel<T: Send, R: Send>(jobs: usize, items: Vec<T>, f: impl Fn(T) -> R + Sync + Send) -> Vec<R> {
    if jobs <= 1 {
        return items.into_iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| items.into_par_iter().map(&f).collect()),
        Err(_) => items.into_iter().map(f).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub checkpoint: Checkpoint,
    /// AUC on the held-out test set with full bags.
    pub test_auc: f64,
    pub test_scores: ScoredSet,
    pub curve: Vec<EpochRecord>,
    /// Sampling and augmentation calls observed during test scoring.
    pub test_counters: Counters,
    /// Every frozen parameter group of the trained model is bit-identical
    /// to its initial value.
    pub frozen_unchanged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KFoldReport {
    pub folds: Vec<FoldResult>,
    pub mean_auc: f64,
    /// Population standard deviation over folds.
    pub std_auc: f64,
}

impl KFoldReport {
    pub fn aucs(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.test_auc).collect()
    }

    pub fn result_row(&self, method: &str) -> ResultRow {
        ResultRow::from_folds(method, &self.aucs())
    }

    pub fn summary_csv(&self, method: &str) -> String {
        report_table(&[self.result_row(method)])
            .map(|(csv, _)| csv)
            .unwrap_or_default()
    }

    pub fn folds_csv(&self) -> String {
        let mut out = String::from("fold,best_epoch,val_loss,val_auc,test_auc\n");
        for f in &self.folds {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                f.fold, f.checkpoint.epoch, f.checkpoint.validation_loss, f.checkpoint.validation_auc, f.test_auc
            );
        }
        out
    }
}

pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_auc\n");
    for r in curve {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_auc);
    }
    out
}

fn frozen_bytes(model: &MilModel) -> Vec<(String, Vec<u8>)> {
    model
        .group_names()
        .into_iter()
        .filter(|g| !model.is_group_trainable(g))
        .map(|g| {
            let bytes = model.group_bytes(&g);
            (g, bytes)
        })
        .collect()
}

fn run_fold(
    i: usize,
    fold: &Fold,
    index: &HashMap<&str, &InstanceBag>,
    test: &[&InstanceBag],
    cfg: &TrainConfig,
    dim: usize,
) -> Result<FoldResult> {
    let train = lookup(index, &fold.train)?;
    let val = lookup(index, &fold.validation)?;
    let tag = fold_tag(fold);
    let model = fresh_model(cfg, dim, &train)?;
    let frozen_before = frozen_bytes(&model);
    let outcome = train_one(model, &train, &val, cfg, tag)?;
    let best = &outcome.best.model;
    let frozen_unchanged = frozen_before.iter().all(|(g, bytes)| best.group_bytes(g) == *bytes);
    let (test_scores, test_counters) = pure_test_scores(best, test)?;
    Ok(FoldResult {
        fold: i,
        test_auc: auc(&test_scores)?,
        checkpoint: outcome.best,
        test_scores,
        curve: outcome.curve,
        test_counters,
        frozen_unchanged,
    })
}

/// Trains one model per fold and scores each fold's best checkpoint on the
/// held-out test bags.
pub fn train_kfold(
    dev: &[InstanceBag],
    test: &[InstanceBag],
    plan: &FoldPlan,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<KFoldReport> {
    cfg.validate()?;
    if plan.folds.is_empty() {
        return Err(MilError::InvalidConfig("fold plan has no folds".into()));
    }
    let dim = input_dim(dev)?;
    let index: HashMap<&str, &InstanceBag> = dev.iter().map(|b| (b.bag_id.as_str(), b)).collect();
    let test: Vec<&InstanceBag> = test.iter().collect();
    let tasks: Vec<(usize, &Fold)> = plan.folds.iter().enumerate().collect();
    let results = run_parallel(jobs, tasks, |(i, fold)| {
        run_fold(i, fold, &index, &test, cfg, dim).map_err(|e| e.with_fold(i))
    });
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;
    let (mean_auc, std_auc) = mean_std(&folds.iter().map(|f| f.test_auc).collect::<Vec<_>>());
    Ok(KFoldReport {
        folds,
        mean_auc,
        std_auc,
    })
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub policy: SamplingPolicy,
    /// The error text of a failed cell.
    pub outcome: std::result::Result<KFoldReport, String>,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Row with the highest mean AUC; ties go to the earlier grid entry.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in self.rows.iter().enumerate() {
            if let Ok(report) = &row.outcome {
                if best.is_none_or(|(_, m)| report.mean_auc > m) {
                    best = Some((i, report.mean_auc));
                }
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn report(&self, policy: SamplingPolicy) -> Option<&KFoldReport> {
        self.rows
            .iter()
            .find(|r| r.policy == policy)
            .and_then(|r| r.outcome.as_ref().ok())
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("policy,label,mean_auc,std_auc,status\n");
        for row in &self.rows {
            let (mean, std, status) = match &row.outcome {
                Ok(r) => (r.mean_auc.to_string(), r.std_auc.to_string(), "ok".to_string()),
                Err(e) => (
                    String::new(),
                    String::new(),
                    format!("failed: {}", e.replace([',', '\n'], ";")),
                ),
            };
            let _ = writeln!(out, "{},{},{mean},{std},{status}", row.policy, row.policy.label());
        }
        out
    }

    /// Aligned text table of the successful rows.
    pub fn text(&self) -> String {
        let rows: Vec<ResultRow> = self
            .rows
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().map(|rep| rep.result_row(&r.policy.label())))
            .collect();
        report_table(&rows).map(|(_, text)| text).unwrap_or_default()
    }
}

/// Runs [`train_kfold`] once per policy. A failing cell is recorded and the
/// remaining cells still run.
pub fn sweep(
    dev: &[InstanceBag],
    test: &[InstanceBag],
    plan: &FoldPlan,
    base: &TrainConfig,
    grid: &[SamplingPolicy],
    jobs: usize,
) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(MilError::InvalidConfig("empty policy grid".into()));
    }
    let rows = run_parallel(jobs, grid.to_vec(), |policy| {
        let cfg = TrainConfig {
            sampling: policy,
            ..base.clone()
        };
        SweepRow {
            policy,
            outcome: train_kfold(dev, test, plan, &cfg, 1).map_err(|e| e.to_string()),
        }
    });
    Ok(SweepTable { rows })
}
