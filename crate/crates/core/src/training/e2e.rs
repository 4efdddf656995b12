use std::collections::HashMap;

use super::kfold::{fold_tag, lookup, prepared_model, pure_test_scores};
use super::{train_one, EpochRecord, TrainConfig};
use crate::data::{Fold, InstanceBag};
use crate::error::{MilError, Result};
use crate::eval::{auc, bootstrap_ci, report_table, BootstrapConfig, BootstrapInterval, ResultRow, ScoredSet};
use crate::instrument::Counters;
use crate::model::{
    block_group, decode_checkpoint, encode_checkpoint, Checkpoint, MilModel, ModelConfig, GROUP_ATTENTION,
    GROUP_BAG_CLASSIFIER, GROUP_INSTANCE_HEAD, GROUP_NORM,
};
use crate::sampling::SamplingPolicy;

/// Instances per visit in both stages.
pub const E2E_SAMPLE_COUNT: usize = 1024;
/// Feature jitter used in stage 2.
pub const DEFAULT_STAGE2_JITTER: f64 = 0.1;
/// Stage-2 learning rate divisor.
pub const STAGE2_LR_DIVISOR: f64 = 10.0;

/// Parameter groups made trainable in stage 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnfreezeSpec {
    pub groups: Vec<String>,
}

impl UnfreezeSpec {
    /// The second encoder block and everything after it, except the
    /// normalization layer.
    pub fn default_for(config: &ModelConfig) -> Self {
        let mut groups: Vec<String> = (1..config.block_widths.len()).map(block_group).collect();
        groups.extend([GROUP_ATTENTION, GROUP_BAG_CLASSIFIER, GROUP_INSTANCE_HEAD].map(String::from));
        UnfreezeSpec { groups }
    }

    pub fn validate(&self, model: &MilModel) -> Result<()> {
        let known = model.group_names();
        for g in &self.groups {
            if g == GROUP_NORM {
                return Err(MilError::InvalidConfig(format!("{GROUP_NORM} can never be unfrozen")));
            }
            if !known.contains(g) {
                return Err(MilError::InvalidConfig(format!("unknown parameter group {g:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct E2EConfig {
    pub stage1: TrainConfig,
    /// `None` selects [`UnfreezeSpec::default_for`].
    pub unfreeze: Option<UnfreezeSpec>,
    pub stage2_jitter: f64,
    pub bootstrap: BootstrapConfig,
}

impl Default for E2EConfig {
    fn default() -> Self {
        E2EConfig {
            stage1: TrainConfig {
                sampling: SamplingPolicy::FixedCount(E2E_SAMPLE_COUNT),
                ..TrainConfig::default()
            },
            unfreeze: None,
            stage2_jitter: DEFAULT_STAGE2_JITTER,
            bootstrap: BootstrapConfig::default(),
        }
    }
}

impl E2EConfig {
    pub fn stage2_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.stage1.lr / STAGE2_LR_DIVISOR,
            augment_sigma: self.stage2_jitter,
            ..self.stage1.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochRecord>,
    pub test_scores: ScoredSet,
    pub test_auc: f64,
    pub ci: BootstrapInterval,
    pub test_counters: Counters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct E2EReport {
    pub stage1: StageReport,
    pub stage2: StageReport,
    pub stage2_lr: f64,
    /// Stage 2 started from exactly the stage-1 checkpoint's values.
    pub stage2_init_matches: bool,
    pub stage1_encoder_unchanged: bool,
    /// Groups outside the unfreeze spec kept their stage-1 values.
    pub stage2_frozen_unchanged: bool,
    /// Encoder groups inside the unfreeze spec moved during stage 2.
    pub stage2_unfrozen_changed: bool,
}

impl E2EReport {
    pub fn rows(&self) -> Vec<ResultRow> {
        [("stage1-frozen", &self.stage1), ("stage2-e2e", &self.stage2)]
            .map(|(name, s)| ResultRow {
                method: name.into(),
                auc: s.test_auc,
                std: None,
                ci: Some((s.ci.lo, s.ci.hi)),
            })
            .to_vec()
    }

    pub fn summary_csv(&self) -> String {
        report_table(&self.rows()).map(|(csv, _)| csv).unwrap_or_default()
    }
}

/// Scales the first-block weights reading input feature `feature`, making a
/// frozen encoder nearly blind to that direction.
pub fn attenuate_input(model: &mut MilModel, feature: usize, factor: f64) -> Result<()> {
    let name = format!("{}.weight", block_group(0));
    let id = model
        .params()
        .find(&name)
        .ok_or_else(|| MilError::State(format!("model has no {name}")))?;
    let w = &mut model.params_mut().get_mut(id).value;
    if feature >= w.rows() {
        return Err(MilError::InvalidConfig(format!("feature {feature} out of range")));
    }
    for j in 0..w.cols() {
        let v = w.get(feature, j);
        w.set(feature, j, v * factor)?;
    }
    Ok(())
}

/// A fresh model whose encoder underweights input `feature`: its first-block
/// weights are scaled by `factor` before the normalization is calibrated.
pub fn misaligned_model(
    cfg: &TrainConfig,
    input_dim: usize,
    train: &[&InstanceBag],
    feature: usize,
    factor: f64,
) -> Result<MilModel> {
    prepared_model(cfg, input_dim, train, |m| attenuate_input(m, feature, factor))
}

fn finish_stage(
    outcome: super::TrainOutcome,
    test: &[&InstanceBag],
    bootstrap: &BootstrapConfig,
) -> Result<StageReport> {
    let (test_scores, test_counters) = pure_test_scores(&outcome.best.model, test)?;
    Ok(StageReport {
        test_auc: auc(&test_scores)?,
        ci: bootstrap_ci(&test_scores, bootstrap)?,
        checkpoint: outcome.best,
        curve: outcome.curve,
        test_scores,
        test_counters,
    })
}

/// Stage 1 trains the head over the frozen encoder of `model`; stage 2
/// starts from the best stage-1 checkpoint, unfreezes the spec's groups and
/// trains with a tenth of the learning rate and feature jitter.
pub fn two_stage_e2e(
    model: MilModel,
    dev: &[InstanceBag],
    test: &[InstanceBag],
    split: &Fold,
    cfg: &E2EConfig,
) -> Result<E2EReport> {
    if !model.encoder_frozen() {
        return Err(MilError::InvalidConfig("stage 1 needs a frozen encoder".into()));
    }
    let spec = cfg
        .unfreeze
        .clone()
        .unwrap_or_else(|| UnfreezeSpec::default_for(model.config()));
    spec.validate(&model)?;
    let stage2_cfg = cfg.stage2_config();
    stage2_cfg.validate()?;

    let index: HashMap<&str, &InstanceBag> = dev.iter().map(|b| (b.bag_id.as_str(), b)).collect();
    let train = lookup(&index, &split.train)?;
    let val = lookup(&index, &split.validation)?;
    let test: Vec<&InstanceBag> = test.iter().collect();
    let tag = fold_tag(split);

    let encoder_groups = model.encoder_groups();
    let encoder_before: Vec<Vec<u8>> = encoder_groups.iter().map(|g| model.group_bytes(g)).collect();
    let stage1 = finish_stage(train_one(model, &train, &val, &cfg.stage1, tag)?, &test, &cfg.bootstrap)?;
    let stage1_model = &stage1.checkpoint.model;
    let stage1_encoder_unchanged = encoder_groups
        .iter()
        .zip(&encoder_before)
        .all(|(g, b)| stage1_model.group_bytes(g) == *b);

    let mut stage2_model = decode_checkpoint(&encode_checkpoint(&stage1.checkpoint)?)?.model;
    let groups = stage2_model.group_names();
    let stage2_init_matches = groups
        .iter()
        .all(|g| stage2_model.group_bytes(g) == stage1_model.group_bytes(g));
    for g in groups.iter().filter(|g| *g != GROUP_NORM) {
        stage2_model.set_group_trainable(g, spec.groups.contains(g))?;
    }
    let stage2 = finish_stage(
        train_one(stage2_model, &train, &val, &stage2_cfg, tag.wrapping_add(1))?,
        &test,
        &cfg.bootstrap,
    )?;
    let stage2_model = &stage2.checkpoint.model;
    let stage2_frozen_unchanged = groups
        .iter()
        .filter(|g| !spec.groups.contains(g))
        .all(|g| stage2_model.group_bytes(g) == stage1_model.group_bytes(g));
    let stage2_unfrozen_changed = encoder_groups
        .iter()
        .filter(|g| spec.groups.contains(g))
        .all(|g| stage2_model.group_bytes(g) != stage1_model.group_bytes(g));

    Ok(E2EReport {
        stage1,
        stage2,
        stage2_lr: stage2_cfg.lr,
        stage2_init_matches,
        stage1_encoder_unchanged,
        stage2_frozen_unchanged,
        stage2_unfrozen_changed,
    })
}
