use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::curriculum::{BalanceMode, CurriculumKind, EpisodePlan};
use crate::error::{Error, Result};
use crate::evaluation::{roc_auc, ScoredSet, EVAL_BATCH};
use crate::model::{BackboneConfig, MultiTaskModel, Variant};
use crate::training::dataset::Dataset;
use crate::training::loss::{loss_and_grad, multitask_loss, sigmoid, LossBreakdown, Objective};
use crate::training::optim::{Optimizer, OptimizerKind};

pub const LR_RANGE: (f64, f64) = (1e-5, 2e-3);
pub const BATCH_SIZES: [usize; 4] = [1, 4, 8, 16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs_per_episode: usize,
    pub patience: usize,
    pub seed: u64,
    pub kind: CurriculumKind,
    pub balance: BalanceMode,
    /// Backbone checkpoint to start from instead of random weights.
    pub pretrained: Option<PathBuf>,
}

impl Default for TrainConfig {
    /// Adam at 3e-4 with batch 8, the tiny-model defaults.
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            optimizer: OptimizerKind::Adam,
            batch_size: 8,
            epochs_per_episode: 30,
            patience: 15,
            seed: 0,
            kind: CurriculumKind::Curriculum,
            balance: BalanceMode::Off,
            pretrained: None,
        }
    }
}

impl TrainConfig {
    /// Defaults for a backbone variant: batch 16 for the full network, 8 for the tiny one.
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            batch_size: match variant {
                Variant::Densenet121_3d => 16,
                Variant::TinyDensenet3d => 8,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = LR_RANGE;
        if !(self.learning_rate >= lo && self.learning_rate <= hi) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {} outside [{lo:e}, {hi:e}]",
                self.learning_rate
            )));
        }
        if !BATCH_SIZES.contains(&self.batch_size) {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} not in {BATCH_SIZES:?}",
                self.batch_size
            )));
        }
        if self.epochs_per_episode == 0 || self.patience == 0 {
            return Err(Error::InvalidConfig("epochs_per_episode and patience must be at least 1".into()));
        }
        Ok(())
    }

    /// Looser checks for direct episode calls, which also accept a zero learning rate.
    fn check_runnable(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs_per_episode == 0 || self.patience == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, epochs_per_episode and patience must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// One JSON-lines log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub episode: usize,
    pub epoch: usize,
    pub split: Split,
    pub l_age: f64,
    pub l_sex: f64,
    pub l_dx: f64,
    pub l_total: f64,
    pub val_auc: Option<f64>,
}

/// Per-epoch losses, averaged per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub episode: usize,
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    /// Validation AUC of the optimized classification task; `None` when validation has one class.
    pub val_auc: Option<f64>,
}

impl EpochRecord {
    pub fn log_rows(&self) -> [LogRow; 2] {
        let row = |split, l: &LossBreakdown, val_auc| LogRow {
            episode: self.episode,
            epoch: self.epoch,
            split,
            l_age: l.l_age,
            l_sex: l.l_sex,
            l_dx: l.l_dx,
            l_total: l.l_total,
            val_auc,
        };
        [row(Split::Train, &self.train, None), row(Split::Val, &self.val, self.val_auc)]
    }

    /// The two log rows as newline-terminated JSON.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut s = String::new();
        for r in self.log_rows() {
            s.push_str(&serde_json::to_string(&r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Every epoch of the episode ran.
    EpochBudget,
    /// Validation loss had not improved for `patience` epochs.
    EarlyStopping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub n_subjects: usize,
    pub epochs_run: usize,
    /// Zero-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Weights after the last episode's best-validation restore.
    pub model: MultiTaskModel<f32>,
    pub log: Vec<EpochRecord>,
    pub episodes: Vec<EpisodeSummary>,
}

impl TrainResult {
    pub fn best_checkpoint(&self) -> Checkpoint {
        self.model.full_checkpoint()
    }

    /// Stopping reason of the final episode.
    pub fn stop_reason(&self) -> StopReason {
        self.episodes.last().map_or(StopReason::EpochBudget, |e| e.stop)
    }

    pub fn log_json_lines(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.log {
            s.push_str(&r.to_json_lines()?);
        }
        Ok(s)
    }
}

/// Mean per-subject loss over `idx` and the AUC of the task `objective` classifies.
pub fn evaluate_loss(
    model: &MultiTaskModel<f32>,
    data: &Dataset,
    idx: &[usize],
    objective: Objective,
) -> Result<(LossBreakdown, Option<f64>)> {
    let mut total = LossBreakdown::default();
    let mut labels = Vec::with_capacity(idx.len());
    let mut scores = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, t) = data.batch(model, chunk)?;
        let out = model.forward(&x)?;
        let to64 = |v: &[f32]| v.iter().map(|&z| z as f64).collect::<Vec<f64>>();
        let (age, sex, dx) = (to64(&out.age), to64(&out.sex_logit), to64(&out.dx_logit));
        let l = multitask_loss(&age, &sex, &dx, &t.age, &t.sex, &t.dx)?;
        total.accumulate(&match objective {
            Objective::MultiTask => l,
            Objective::SexOnly => LossBreakdown::new(0.0, l.l_sex, 0.0),
        });
        let (logits, truth) = match objective {
            Objective::MultiTask => (dx, &t.dx),
            Objective::SexOnly => (sex, &t.sex),
        };
        labels.extend(truth.iter().map(|&y| y == 1.0));
        scores.extend(logits.into_iter().map(sigmoid));
    }
    let set = ScoredSet::new(labels, scores)?;
    let auc = roc_auc(&set).ok();
    Ok((total.scaled(1.0 / idx.len().max(1) as f64), auc))
}

fn shuffle_rng(seed: u64, episode: usize, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // High bit keeps these streams apart from the weight-initialization stream.
    rng.set_stream((1 << 63) | ((episode as u64) << 32) | epoch as u64);
    rng
}

/// Outcome of [`train_episode`].
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub records: Vec<EpochRecord>,
    pub summary: EpisodeSummary,
}

/// Trains on one episode's subjects and restores the best-validation weights.
///
/// `subjects` index into `train` and give the starting order; every epoch
/// reshuffles that order with a stream keyed by `(seed, episode, epoch)`.
#[allow(clippy::too_many_arguments)]
pub fn train_episode(
    model: &mut MultiTaskModel<f32>,
    train: &Dataset,
    subjects: &[usize],
    val: &Dataset,
    config: &TrainConfig,
    episode: usize,
    objective: Objective,
    sink: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<EpisodeOutcome> {
    config.check_runnable()?;
    if subjects.is_empty() {
        return Err(Error::InvalidInput(format!("episode {episode} has no subjects")));
    }
    if val.is_empty() {
        return Err(Error::InvalidInput("validation set is empty".into()));
    }
    let val_idx: Vec<usize> = (0..val.len()).collect();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, model.params());
    let mut best: Option<(f64, usize, crate::nn::ParamStore<f32>)> = None;
    let mut since_best = 0;
    let mut records = Vec::new();
    let mut stop = StopReason::EpochBudget;

    for epoch in 0..config.epochs_per_episode {
        let mut order = subjects.to_vec();
        order.shuffle(&mut shuffle_rng(config.seed, episode, epoch));
        let mut train_loss = LossBreakdown::default();
        for batch in order.chunks(config.batch_size) {
            let (x, t) = train.batch(model, batch)?;
            let (out, tape) = model.forward_train(&x)?;
            let diverged = |detail: String| Error::Divergence { episode, epoch, detail };
            let (loss, d) = loss_and_grad(&out, &t, objective).map_err(|e| diverged(e.to_string()))?;
            if !loss.is_finite() {
                return Err(diverged(format!("training loss {:?}", loss)));
            }
            let grads = model.backward(&tape, &d);
            if !grads.is_finite() {
                return Err(diverged("non-finite gradient".into()));
            }
            opt.step(model.params_mut(), &grads);
            train_loss.accumulate(&loss);
        }
        let (val_loss, val_auc) = evaluate_loss(model, val, &val_idx, objective).map_err(|e| match e {
            Error::NonFinite(d) => Error::Divergence {
                episode,
                epoch,
                detail: format!("validation {d}"),
            },
            other => other,
        })?;
        let record = EpochRecord {
            episode,
            epoch,
            train: train_loss.scaled(1.0 / subjects.len() as f64),
            val: val_loss,
            val_auc,
        };
        log::debug!(
            "episode {episode} epoch {epoch}: train {:.4} val {:.4} auc {:?}",
            record.train.l_total,
            record.val.l_total,
            record.val_auc
        );
        sink(&record)?;
        records.push(record);

        if best.as_ref().is_none_or(|(b, _, _)| val_loss.l_total < *b) {
            best = Some((val_loss.l_total, epoch, model.params().clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stop = StopReason::EarlyStopping;
                break;
            }
        }
    }

    let (best_val_loss, best_epoch, params) = best.expect("at least one epoch ran");
    *model.params_mut() = params;
    Ok(EpisodeOutcome {
        summary: EpisodeSummary {
            episode,
            n_subjects: subjects.len(),
            epochs_run: records.len(),
            best_epoch,
            best_val_loss,
            stop,
        },
        records,
    })
}

/// Runs every episode of `plan` in order on an existing model.
///
/// Weights carry over between episodes; optimizer state does not.
pub fn train_plan(
    mut model: MultiTaskModel<f32>,
    train: &Dataset,
    val: &Dataset,
    plan: &EpisodePlan,
    config: &TrainConfig,
    objective: Objective,
    sink: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainResult> {
    if plan.is_empty() {
        return Err(Error::Curriculum("episode plan is empty".into()));
    }
    let mut log = Vec::new();
    let mut episodes = Vec::new();
    for ep in &plan.episodes {
        let idx = train.indices_of(ep.subject_ids.iter().map(String::as_str))?;
        let out = train_episode(&mut model, train, &idx, val, config, ep.index, objective, sink)?;
        log::info!(
            "episode {} ({} subjects): {} epochs, best val loss {:.4} at epoch {}",
            ep.index,
            idx.len(),
            out.summary.epochs_run,
            out.summary.best_val_loss,
            out.summary.best_epoch
        );
        log.extend(out.records);
        episodes.push(out.summary);
    }
    Ok(TrainResult { model, log, episodes })
}

/// Builds a model (seeded by `config.seed`), optionally loads the pretrained
/// backbone named in the config, and trains it through `plan`.
///
/// The age head's constant offset is the mean training age.
pub fn run_curriculum_training(
    train: &Dataset,
    val: &Dataset,
    plan: &EpisodePlan,
    backbone: &BackboneConfig,
    config: &TrainConfig,
    sink: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainResult> {
    config.validate()?;
    let mut model = MultiTaskModel::build(backbone, config.seed)?;
    if let Some(path) = &config.pretrained {
        model.load_backbone_weights(&Checkpoint::read(path)?)?;
    }
    model.age_offset = train.mean_age();
    train_plan(model, train, val, plan, config, Objective::MultiTask, sink)
}
