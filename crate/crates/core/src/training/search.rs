use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::EpisodePlan;
use crate::error::{Error, Result};
use crate::evaluation::{roc_auc, score_dataset, EVAL_BATCH};
use crate::model::BackboneConfig;
use crate::training::dataset::Dataset;
use crate::training::optim::OptimizerKind;
use crate::training::trainer::{run_curriculum_training, TrainConfig, BATCH_SIZES, LR_RANGE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub lr_min: f64,
    pub lr_max: f64,
    pub optimizers: Vec<OptimizerKind>,
    pub batch_sizes: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            lr_min: LR_RANGE.0,
            lr_max: LR_RANGE.1,
            optimizers: OptimizerKind::ALL.to_vec(),
            batch_sizes: BATCH_SIZES.to_vec(),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning-rate range [{}, {}] is not a positive interval",
                self.lr_min, self.lr_max
            )));
        }
        if self.optimizers.is_empty() || self.batch_sizes.is_empty() {
            return Err(Error::InvalidConfig("search space has no optimizers or batch sizes".into()));
        }
        Ok(())
    }

    /// Draws a learning rate log-uniformly and optimizer and batch size uniformly.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> (f64, OptimizerKind, usize) {
        let (lo, hi) = (self.lr_min.ln(), self.lr_max.ln());
        let lr = if lo == hi { self.lr_min } else { rng.random_range(lo..hi).exp() };
        let lr = lr.clamp(self.lr_min, self.lr_max);
        let opt = *self.optimizers.choose(rng).expect("nonempty");
        let batch = *self.batch_sizes.choose(rng).expect("nonempty");
        (lr, opt, batch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: TrainConfig,
    pub best_trial: usize,
    pub trials: Vec<Trial>,
}

/// Random search over learning rate, optimizer and batch size.
///
/// Each trial trains `plan` for `budget_epochs` epochs per episode starting
/// from `base`, and is scored by validation ROC-AUC. Ties go to the earlier trial.
#[allow(clippy::too_many_arguments)]
pub fn hyperparameter_search(
    train: &Dataset,
    val: &Dataset,
    plan: &EpisodePlan,
    backbone: &BackboneConfig,
    base: &TrainConfig,
    space: &SearchSpace,
    n_trials: usize,
    seed: u64,
    budget_epochs: usize,
) -> Result<SearchResult> {
    if n_trials == 0 {
        return Err(Error::InvalidConfig("n_trials must be at least 1".into()));
    }
    if budget_epochs == 0 {
        return Err(Error::InvalidConfig("budget_epochs must be at least 1".into()));
    }
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_trials);
    let mut configs = Vec::with_capacity(n_trials);
    for index in 0..n_trials {
        let (learning_rate, optimizer, batch_size) = space.sample(&mut rng);
        let config = TrainConfig {
            learning_rate,
            optimizer,
            batch_size,
            epochs_per_episode: budget_epochs,
            ..base.clone()
        };
        let res = run_curriculum_training(train, val, plan, backbone, &config, &mut |_| Ok(()))?;
        let val_auc = roc_auc(&score_dataset(&res.model, val, EVAL_BATCH)?)?;
        log::info!("trial {index}: lr {learning_rate:.2e} {} batch {batch_size} -> val AUC {val_auc:.3}", optimizer.label());
        trials.push(Trial {
            index,
            learning_rate,
            optimizer,
            batch_size,
            val_auc,
        });
        configs.push(config);
    }
    let best_trial = trials
        .iter()
        .fold(0, |b, t| if t.val_auc > trials[b].val_auc { t.index } else { b });
    let best = TrainConfig {
        epochs_per_episode: base.epochs_per_episode,
        ..configs[best_trial].clone()
    };
    Ok(SearchResult {
        best,
        best_trial,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curriculum::{build_episode_plan, BalanceMode, CurriculumKind};
    use crate::training::dataset::tests::tiny_cohort;

    #[test]
    fn samples_stay_inside_the_space() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let (lr, opt, b) = space.sample(&mut rng);
            assert!((1e-5..=2e-3).contains(&lr));
            assert!(OptimizerKind::ALL.contains(&opt));
            assert!(BATCH_SIZES.contains(&b));
        }
    }

    #[test]
    fn search_is_deterministic_and_selects_the_max() {
        let (m, ds) = tiny_cohort(4, [1, 1, 1, 1], 8);
        let plan = build_episode_plan(&m, CurriculumKind::None, BalanceMode::Off, 0).unwrap();
        let backbone = BackboneConfig {
            init_features: 8,
            growth_rate: 4,
            block_layers: [1, 1, 1, 1],
            bn_size: 2,
            ..BackboneConfig::tiny([16, 16, 16])
        };
        let base = TrainConfig::default();
        let run = |n| hyperparameter_search(&ds, &ds, &plan, &backbone, &base, &SearchSpace::default(), n, 5, 1).unwrap();
        let a = run(3);
        assert_eq!(a, run(3));
        let max = a.trials.iter().map(|t| t.val_auc).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.trials[a.best_trial].val_auc, max);
        assert_eq!(a.best.epochs_per_episode, base.epochs_per_episode);
        let one = run(1);
        assert_eq!(one.best_trial, 0);
        assert_eq!(one.best.learning_rate, one.trials[0].learning_rate);
        assert!(hyperparameter_search(&ds, &ds, &plan, &backbone, &base, &SearchSpace::default(), 0, 5, 1).is_err());
    }
}
