use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};

use curriculum_mtl::data_model::SplitSpec;
use curriculum_mtl::interpretation::OcclusionConfig;
use curriculum_mtl::model::{BackboneConfig, Variant};
use curriculum_mtl::synthetic::SyntheticConfig;
use curriculum_mtl::training::{SearchSpace, TrainConfig};

/// Out-of-distribution cohort: same generator, shifted intensities, fresh seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodSection {
    pub site_offset: f64,
    pub seed: u64,
    pub site: String,
}

impl Default for OodSection {
    fn default() -> Self {
        Self {
            site_offset: 2.0,
            seed: 1_000,
            site: "ood".into(),
        }
    }
}

/// Architecture choice; the input shape follows the synthetic volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub variant: Variant,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            variant: Variant::TinyDensenet3d,
        }
    }
}

/// Proxy pretraining cohort (controls only, split 90:10) and its optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub n_subjects: usize,
    pub seed: u64,
    pub sex_signal_scale: f64,
    pub train: TrainConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            seed: 2_000,
            sex_signal_scale: 0.5,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub n_trials: usize,
    pub budget_epochs: usize,
    pub seed: u64,
    pub space: SearchSpace,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            n_trials: 8,
            budget_epochs: 5,
            seed: 0,
            space: SearchSpace::default(),
        }
    }
}

/// One experiment: every section has documented defaults, unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticConfig,
    pub ood: OodSection,
    pub split: SplitSpec,
    pub backbone: BackboneSection,
    pub train: TrainConfig,
    pub pretrain: PretrainSection,
    pub occlusion: OcclusionConfig,
    pub search: SearchSection,
    pub n_runs: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            ood: OodSection::default(),
            split: SplitSpec::default(),
            backbone: BackboneSection::default(),
            train: TrainConfig::default(),
            pretrain: PretrainSection::default(),
            occlusion: OcclusionConfig::default(),
            search: SearchSection::default(),
            n_runs: 3,
            output_dir: PathBuf::from("experiment"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    /// Replaces every seed in the config with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.synthetic.seed = seed;
        self.split.seed = seed;
        self.train.seed = seed;
        self.ood.seed = seed.wrapping_add(OodSection::default().seed);
        self.pretrain.seed = seed.wrapping_add(PretrainSection::default().seed);
        self.pretrain.train.seed = seed;
        self.search.seed = seed;
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig::preset(self.backbone.variant, self.synthetic.shape)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.split.validate()?;
        self.backbone_config().validate()?;
        self.train.validate()?;
        self.pretrain.train.validate()?;
        self.occlusion.validate(self.synthetic.shape)?;
        self.search.space.validate()?;
        ensure!(self.n_runs >= 1, "n_runs must be at least 1");
        ensure!(self.pretrain.n_subjects >= 4, "pretrain.n_subjects must be at least 4");
        ensure!(self.search.n_trials >= 1, "search.n_trials must be at least 1");
        ensure!(self.search.budget_epochs >= 1, "search.budget_epochs must be at least 1");
        ensure!(self.ood.site_offset.is_finite(), "ood.site_offset must be finite");
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"n_runs": 2, "typo": 1}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"train": {"learning_rat": 0.001}}"#).is_err());
        let partial: ExperimentConfig = serde_json::from_str(r#"{"n_runs": 2}"#).unwrap();
        assert_eq!(partial.n_runs, 2);
        assert_eq!(partial.train, TrainConfig::default());
    }

    #[test]
    fn seed_override_reaches_every_section() {
        let mut c = ExperimentConfig::default();
        c.override_seed(41);
        assert_eq!((c.synthetic.seed, c.split.seed, c.train.seed, c.search.seed), (41, 41, 41, 41));
        assert_ne!(c.ood.seed, c.synthetic.seed);
    }
}
