//! Per-fold optimization with early stopping, k-fold runs, sampling-policy
//! sweeps and two-stage fine-tuning.
//!
//! Every bag visit is one optimizer step. Randomness is drawn from named
//! streams keyed by the run seed, a fold tag, the epoch and the bag id, so a
//! fold's trajectory does not depend on which thread runs it or on what ran
//! before it.

mod config;
mod e2e;
mod kfold;

pub use config::{TrainConfig, CONFIG_KEYS};
pub use e2e::{
    attenuate_input, misaligned_model, two_stage_e2e, E2EConfig, E2EReport, StageReport, UnfreezeSpec,
    DEFAULT_STAGE2_JITTER, E2E_SAMPLE_COUNT, STAGE2_LR_DIVISOR,
};
pub use kfold::{
    curve_csv, fold_tag, fresh_model, score_bags, sweep, train_kfold, FoldResult, KFoldReport, SweepRow, SweepTable,
};

use std::slice;

use rand::seq::SliceRandom;

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, Tensor};
use crate::data::{augment_features, InstanceBag};
use crate::error::{MilError, Result};
use crate::eval::{auc, ScoredSet};
use crate::model::{bag_cross_entropy, build_total_loss, pseudo_labels, Checkpoint, MilModel};
use crate::rng::{stable_hash, Purpose, RngStream, StreamId};
use crate::sampling::sample_rows;

/// Per-epoch losses. `val_auc` is NaN when the validation set holds a
/// single class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub curve: Vec<EpochRecord>,
}

/// Tracks the lowest validation loss; ties keep the earlier epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records an epoch's loss; returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

fn divergence(epoch: usize, bag_id: &str) -> MilError {
    MilError::Divergence {
        fold: None,
        epoch,
        bag_id: bag_id.to_string(),
    }
}

/// One optimizer step on a (possibly sampled) bag. `head_only` means the
/// input is already embedded.
fn step(
    model: &mut MilModel,
    adam: &mut AdamState,
    input: &Tensor,
    head_only: bool,
    label: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input();
    let nodes = if head_only {
        model.build_head(&mut g, x)
    } else {
        let h = model.build_encoder(&mut g, x);
        model.build_head(&mut g, h)
    };
    g.forward(model.params(), slice::from_ref(input))?;
    let m = input.rows();
    let pseudo = if cfg.c_inst > 0.0 && m >= 2 {
        pseudo_labels(g.value(nodes.attention[label])?.as_slice(), cfg.pseudo_count)?
    } else {
        Vec::new()
    };
    // A single-instance visit has nothing to rank, so it trains on the bag
    // loss alone.
    let (c_bag, c_inst) = if pseudo.is_empty() {
        (1.0, 0.0)
    } else {
        (cfg.c_bag, cfg.c_inst)
    };
    let n_classes = model.config().n_classes;
    let loss = build_total_loss(&mut g, &nodes, label, n_classes, m, &pseudo, c_bag, c_inst)?;
    g.forward_pending(model.params())?;
    let value = g.value(loss)?.get(0, 0);
    g.backward(loss, model.params_mut())?;
    adam_step(model.params_mut(), adam, cfg.lr)?;
    Ok(value)
}

/// Mean bag cross-entropy and AUC over full validation bags.
fn validate(model: &MilModel, bags: &[&InstanceBag], embeddings: Option<&[Tensor]>) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut scores = Vec::with_capacity(bags.len());
    let mut labels = Vec::with_capacity(bags.len());
    for (i, bag) in bags.iter().enumerate() {
        let pred = match embeddings {
            Some(e) => model.predict_embeddings(&e[i])?,
            None => model.predict(bag)?,
        };
        loss += bag_cross_entropy(&pred.class_probabilities, bag.label);
        scores.push(pred.positive_score());
        labels.push(u8::from(bag.label == 1));
    }
    let val_auc = ScoredSet::from_pairs(&scores, &labels)
        .and_then(|s| auc(&s))
        .unwrap_or(f64::NAN);
    Ok((loss / bags.len() as f64, val_auc))
}

/// Trains `model` until validation loss stops improving and returns the
/// checkpoint with the lowest validation loss.
///
/// `tag` distinguishes the random streams of different folds or stages.
/// When the encoder is frozen and no augmentation is requested, instance
/// embeddings are computed once and sampling selects their rows; the
/// encoder is row-wise, so this is exact.
pub fn train_one(
    mut model: MilModel,
    train: &[&InstanceBag],
    val: &[&InstanceBag],
    cfg: &TrainConfig,
    tag: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(MilError::InvalidConfig(format!(
            "training needs nonempty train and validation sets, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    for bag in train.iter().chain(val) {
        if bag.label >= model.config().n_classes {
            return Err(MilError::InvalidLabel(format!(
                "bag {} has label {}",
                bag.bag_id, bag.label
            )));
        }
    }
    let frozen = model.encoder_frozen();
    let encode_all = |bags: &[&InstanceBag]| {
        bags.iter()
            .map(|b| model.encode(&b.features))
            .collect::<Result<Vec<_>>>()
    };
    let train_cache = if frozen && cfg.augment_sigma == 0.0 {
        Some(encode_all(train)?)
    } else {
        None
    };
    let val_cache = if frozen { Some(encode_all(val)?) } else { None };
    let fingerprint = cfg.fingerprint();

    let mut adam = AdamState::new(
        model.params(),
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = None;
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let e = epoch as u64;
        order.sort_unstable();
        order.shuffle(&mut RngStream::new(
            cfg.seed,
            StreamId::new(Purpose::Shuffle).fold(tag).epoch(e),
        ));
        let mut total = 0.0;
        for &i in &order {
            let bag = train[i];
            let item = stable_hash(&bag.bag_id);
            let mut sample_rng = RngStream::new(cfg.seed, StreamId::new(Purpose::Sample).fold(tag).epoch(e).item(item));
            let rows = sample_rows(bag.len(), cfg.sampling, &mut sample_rng)?;
            let full = rows.len() == bag.len();
            let (input, head_only) = match &train_cache {
                Some(cache) if full => (cache[i].clone(), true),
                Some(cache) => (cache[i].select_rows(&rows), true),
                None => {
                    let mut visit = if full { (*bag).clone() } else { bag.subset(&rows) };
                    if cfg.augment_sigma > 0.0 {
                        let mut aug_rng =
                            RngStream::new(cfg.seed, StreamId::new(Purpose::Augment).fold(tag).epoch(e).item(item));
                        visit = augment_features(&visit, cfg.augment_sigma, &mut aug_rng)?;
                    }
                    (visit.features, false)
                }
            };
            let loss = match step(&mut model, &mut adam, &input, head_only, bag.label, cfg) {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(MilError::InvalidValue(_)) => return Err(divergence(epoch, &bag.bag_id)),
                Err(other) => return Err(other),
            };
            total += loss;
        }
        let (val_loss, val_auc) = match validate(&model, val, val_cache.as_deref()) {
            Ok(v) if v.0.is_finite() => v,
            Ok(_) | Err(MilError::InvalidValue(_)) => return Err(divergence(epoch, &val[0].bag_id)),
            Err(other) => return Err(other),
        };
        curve.push(EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss,
            val_auc,
        });
        if stopper.observe(epoch, val_loss) {
            best = Some(Checkpoint {
                model: model.clone(),
                epoch,
                validation_loss: val_loss,
                validation_auc: val_auc,
                config_fingerprint: fingerprint,
            });
        }
        if stopper.should_stop() {
            break;
        }
    }
    let best = best.ok_or_else(|| MilError::State("no epoch completed".into()))?;
    Ok(TrainOutcome { best, curve })
}
