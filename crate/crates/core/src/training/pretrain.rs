//! Proxy pretraining: the backbone learns sex classification, then only the
//! backbone is kept as an initialization for the downstream tasks.

use std::collections::BTreeSet;

use crate::checkpoint::Checkpoint;
use crate::curriculum::{BalanceMode, CurriculumKind, Episode, EpisodePlan};
use crate::data_model::Sex;
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, MultiTaskModel};
use crate::training::dataset::Dataset;
use crate::training::loss::{sigmoid, Objective};
use crate::training::trainer::{train_plan, EpochRecord, TrainConfig};

#[derive(Debug, Clone)]
pub struct PretrainResult {
    /// Backbone-only checkpoint; the sex head is discarded.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub val_sex_accuracy: f64,
}

/// Fraction of subjects whose sex logit has the right sign (male ⇔ logit ≥ 0).
pub fn sex_accuracy(model: &MultiTaskModel<f32>, data: &Dataset) -> Result<f64> {
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(crate::evaluation::EVAL_BATCH) {
        let (x, t) = data.batch(model, chunk)?;
        let out = model.forward(&x)?;
        correct += out
            .sex_logit
            .iter()
            .zip(&t.sex)
            .filter(|(&z, &y)| (sigmoid(z as f64) >= 0.5) == (y == 1.0))
            .count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Trains backbone plus sex head on sex alone over `cohort` (one episode, all
/// subjects) and returns the backbone.
pub fn pretrain_proxy(
    cohort: &Dataset,
    val: &Dataset,
    backbone: &BackboneConfig,
    config: &TrainConfig,
    sink: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<PretrainResult> {
    config.validate()?;
    if !has_both_sexes(cohort) {
        return Err(Error::InvalidInput(format!(
            "pretraining cohort {} has a single sex",
            cohort.name
        )));
    }
    let plan = EpisodePlan {
        kind: CurriculumKind::None,
        balance: BalanceMode::Off,
        seed: config.seed,
        episodes: vec![Episode {
            index: 0,
            included_stages: BTreeSet::new(),
            balanced: false,
            subject_ids: cohort.samples().iter().map(|s| s.record.subject_id.clone()).collect(),
        }],
    };
    let model = MultiTaskModel::build(backbone, config.seed)?;
    let res = train_plan(model, cohort, val, &plan, config, Objective::SexOnly, sink)?;
    let val_sex_accuracy = sex_accuracy(&res.model, val)?;
    log::info!("proxy pretraining: validation sex accuracy {val_sex_accuracy:.3}");
    Ok(PretrainResult {
        checkpoint: res.model.backbone_checkpoint(),
        log: res.log,
        val_sex_accuracy,
    })
}

/// True when both sexes occur in `data`.
pub fn has_both_sexes(data: &Dataset) -> bool {
    let male = data.samples().iter().filter(|s| s.record.sex == Sex::Male).count();
    male > 0 && male < data.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::CheckpointKind;
    use crate::training::dataset::{Dataset, Sample};
    use crate::training::dataset::tests::tiny_cohort;

    fn backbone() -> BackboneConfig {
        BackboneConfig {
            init_features: 8,
            growth_rate: 4,
            block_layers: [1, 1, 1, 1],
            bn_size: 2,
            ..BackboneConfig::tiny([16, 16, 16])
        }
    }

    #[test]
    fn single_sex_cohort_is_rejected() {
        let (_, ds) = tiny_cohort(6, [0, 0, 0, 0], 3);
        let one: Vec<Sample> = ds.samples().iter().filter(|s| s.record.sex == Sex::Male).cloned().collect();
        let one = Dataset::from_samples("males", one);
        assert!(!has_both_sexes(&one));
        let err = pretrain_proxy(&one, &ds, &backbone(), &TrainConfig::default(), &mut |_| Ok(())).unwrap_err();
        assert!(err.to_string().contains("single sex"), "{err}");
    }

    #[test]
    fn emits_a_backbone_checkpoint() {
        let (_, ds) = tiny_cohort(6, [1, 1, 0, 0], 4);
        assert!(has_both_sexes(&ds));
        let config = TrainConfig {
            epochs_per_episode: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let res = pretrain_proxy(&ds, &ds, &backbone(), &config, &mut |_| Ok(())).unwrap();
        assert_eq!(res.checkpoint.kind, CheckpointKind::Backbone);
        assert!(res.checkpoint.tensors.iter().all(|t| t.name.starts_with("backbone.")));
        assert_eq!(res.log.len(), 1);
        assert!((0.0..=1.0).contains(&res.val_sex_accuracy));
        let mut fresh = MultiTaskModel::<f32>::build(&backbone(), 99).unwrap();
        fresh.load_backbone_weights(&res.checkpoint).unwrap();
    }
}
