//! Synthetic cohorts with stage-graded signal and known ground truth.
//!
//! Each volume is Gaussian background noise plus a site offset. Patients get an
//! additive effect inside a fixed box, and the effect grows with H&Y stage.
//! Males get a smooth global intensity field so the sex task is learnable. A
//! uniform shift or scaling would not work here because the per-image
//! z-transform erases it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data_model::{CohortManifest, Diagnosis, Sex, SubjectRecord};
use crate::error::{Error, IoContext, Result};
use crate::volume::{Volume, DEFAULT_VOXEL_SIZE_MM};

/// Axis-aligned box `[center - half_extent, center + half_extent)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalBox {
    pub center: [usize; 3],
    pub half_extent: [usize; 3],
}

impl SignalBox {
    pub fn lo(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.center[a].saturating_sub(self.half_extent[a]))
    }

    pub fn hi(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.center[a] + self.half_extent[a])
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        let (lo, hi) = (self.lo(), self.hi());
        (0..3).all(|a| p[a] >= lo[a] && p[a] < hi[a])
    }

    pub fn fits(&self, shape: [usize; 3]) -> bool {
        (0..3).all(|a| {
            self.half_extent[a] > 0
                && self.center[a] >= self.half_extent[a]
                && self.center[a] + self.half_extent[a] <= shape[a]
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.half_extent.iter().map(|h| 2 * h).product()
    }

    pub fn mask(&self, shape: [usize; 3]) -> Vec<bool> {
        let mut m = Vec::with_capacity(shape.iter().product());
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    m.push(self.contains([x, y, z]));
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub shape: [usize; 3],
    pub n_controls: usize,
    /// Patient counts for H&Y stages 1..=4.
    pub n_per_stage: [usize; 4],
    /// Additive in-box effect for stages 1..=4; must be non-decreasing.
    pub effect_sizes: [f64; 4],
    pub signal_region: SignalBox,
    pub noise_sd: f64,
    pub site_offset: f64,
    pub age_range: (f64, f64),
    pub sex_signal_scale: f64,
    pub seed: u64,
    pub site: String,
    pub voxel_size_mm: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            shape: [32, 38, 32],
            n_controls: 150,
            n_per_stage: [38, 38, 37, 37],
            effect_sizes: [0.2, 0.4, 0.6, 0.8],
            signal_region: SignalBox {
                center: [10, 12, 10],
                half_extent: [4, 4, 4],
            },
            noise_sd: 1.0,
            site_offset: 0.0,
            age_range: (50.0, 80.0),
            sex_signal_scale: 0.5,
            seed: 0,
            site: "synth".into(),
            voxel_size_mm: DEFAULT_VOXEL_SIZE_MM,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("synthetic: {m}")));
        if self.shape.iter().any(|&d| d == 0) {
            return bad(format!("shape {:?} has a zero axis", self.shape));
        }
        if self.n_controls + self.n_per_stage.iter().sum::<usize>() == 0 {
            return bad("all group counts are zero".into());
        }
        if self.effect_sizes.windows(2).any(|w| w[1] < w[0])
            || self.effect_sizes.iter().any(|e| !e.is_finite())
        {
            return bad(format!(
                "effect sizes must be finite and non-decreasing in stage, got {:?}",
                self.effect_sizes
            ));
        }
        if !self.signal_region.fits(self.shape) {
            return bad(format!(
                "signal region {:?} does not fit inside {:?}",
                self.signal_region, self.shape
            ));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd must be positive, got {}", self.noise_sd));
        }
        let (lo, hi) = self.age_range;
        if !(lo > 0.0 && hi < 120.0 && lo < hi) {
            return bad(format!("age range ({lo}, {hi}) must satisfy 0 < min < max < 120"));
        }
        if !self.site_offset.is_finite() || !self.sex_signal_scale.is_finite() {
            return bad("site_offset and sex_signal_scale must be finite".into());
        }
        Ok(())
    }

    pub fn n_subjects(&self) -> usize {
        self.n_controls + self.n_per_stage.iter().sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub diagnosis: Diagnosis,
    pub stage: Option<u8>,
    /// Box carrying the disease signal; `None` for controls.
    pub mask_box: Option<SignalBox>,
    pub age: f64,
    pub sex: Sex,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub subjects: BTreeMap<String, SubjectTruth>,
}

impl GroundTruth {
    pub fn get(&self, subject_id: &str) -> Option<&SubjectTruth> {
        self.subjects.get(subject_id)
    }

    /// Boolean signal mask for a subject: the signal box for patients, all false for controls.
    pub fn mask(&self, subject_id: &str, shape: [usize; 3]) -> Option<Vec<bool>> {
        let t = self.subjects.get(subject_id)?;
        Some(match t.mask_box {
            Some(b) => b.mask(shape),
            None => vec![false; shape.iter().product()],
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A generated cohort: manifest, in-memory volumes (manifest order) and ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub manifest: CohortManifest,
    pub volumes: Vec<Volume>,
    pub truth: GroundTruth,
}

impl SyntheticCohort {
    /// Writes every volume under `dir` at its `volume_ref` and rebases the manifest on `dir`.
    pub fn write_volumes(&mut self, dir: &Path) -> Result<()> {
        for (r, v) in self.manifest.records.iter().zip(&self.volumes) {
            v.write(&dir.join(&r.volume_ref))?;
        }
        self.manifest.base_dir = dir.to_path_buf();
        Ok(())
    }

    pub fn volume(&self, subject_id: &str) -> Option<&Volume> {
        let i = self
            .manifest
            .records
            .iter()
            .position(|r| r.subject_id == subject_id)?;
        self.volumes.get(i)
    }
}

/// Smooth field added to male volumes: one cosine period along the second axis.
pub fn sex_field(shape: [usize; 3], y: usize) -> f64 {
    (2.0 * std::f64::consts::PI * (y as f64 + 0.5) / shape[1] as f64).cos()
}

/// Generates a cohort. Controls come first, then patients by ascending stage.
///
/// Subject `i` draws from ChaCha stream `i` of `seed`, so output does not depend
/// on generation order.
pub fn generate_cohort(config: &SyntheticConfig) -> Result<SyntheticCohort> {
    config.validate()?;
    let mut groups: Vec<(Diagnosis, Option<u8>)> = vec![(Diagnosis::Control, None); config.n_controls];
    for (k, &n) in config.n_per_stage.iter().enumerate() {
        groups.extend(std::iter::repeat_n((Diagnosis::Patient, Some(k as u8 + 1)), n));
    }

    let mut records = Vec::with_capacity(groups.len());
    let mut volumes = Vec::with_capacity(groups.len());
    let mut truth = GroundTruth::default();
    for (i, (diagnosis, stage)) in groups.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);
        let (subject, volume) = generate_subject(config, &mut rng, diagnosis, stage);
        let subject_id = format!("{}-{i:04}", config.site);
        truth.subjects.insert(
            subject_id.clone(),
            SubjectTruth {
                diagnosis,
                stage,
                mask_box: stage.map(|_| config.signal_region),
                age: subject.0,
                sex: subject.1,
            },
        );
        records.push(SubjectRecord {
            volume_ref: format!("volumes/{subject_id}.f32"),
            subject_id,
            age: subject.0,
            sex: subject.1,
            diagnosis,
            hy_stage: stage,
            site: config.site.clone(),
        });
        volumes.push(volume);
    }
    let manifest = CohortManifest::new(config.site.clone(), records, config.shape, ".")?;
    Ok(SyntheticCohort {
        manifest,
        volumes,
        truth,
    })
}

fn generate_subject(
    config: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
    diagnosis: Diagnosis,
    stage: Option<u8>,
) -> ((f64, Sex), Volume) {
    let age = rng.random_range(config.age_range.0..config.age_range.1);
    let sex = if rng.random_bool(0.5) { Sex::Male } else { Sex::Female };
    let effect = match (diagnosis, stage) {
        (Diagnosis::Patient, Some(s)) if s >= 1 => config.effect_sizes[s as usize - 1],
        _ => 0.0,
    };
    let shape = config.shape;
    let sex_scale = if sex == Sex::Male { config.sex_signal_scale } else { 0.0 };
    let region = config.signal_region;
    let mut data = Vec::with_capacity(shape.iter().product());
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            let field = sex_scale * sex_field(shape, y);
            for z in 0..shape[2] {
                let noise: f64 = rng.sample(StandardNormal);
                let mut v = config.noise_sd * noise + config.site_offset + field;
                if effect != 0.0 && region.contains([x, y, z]) {
                    v += effect;
                }
                data.push(v as f32);
            }
        }
    }
    let volume = Volume::new(shape, data)
        .expect("generated data matches shape")
        .with_voxel_size(config.voxel_size_mm);
    ((age, sex), volume)
}

/// Same generator with a different site offset and seed, modelling a site with domain shift.
pub fn generate_ood_cohort(config: &SyntheticConfig, offset: f64, seed: u64) -> Result<SyntheticCohort> {
    let shifted = SyntheticConfig {
        site_offset: offset,
        seed,
        ..config.clone()
    };
    generate_cohort(&shifted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            shape: [16, 16, 16],
            n_controls: 6,
            n_per_stage: [2, 2, 2, 2],
            signal_region: SignalBox {
                center: [8, 8, 8],
                half_extent: [3, 3, 3],
            },
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn counts_ids_and_truth_agree() {
        let c = generate_cohort(&small()).unwrap();
        assert_eq!(c.manifest.len(), 14);
        assert_eq!(c.volumes.len(), 14);
        assert_eq!(c.manifest.stage_counts(), [0, 2, 2, 2, 2]);
        for r in &c.manifest.records {
            let t = c.truth.get(&r.subject_id).unwrap();
            assert_eq!(t.mask_box.is_some(), r.is_patient());
            assert_eq!(t.stage, r.hy_stage);
            assert!(r.age >= 50.0 && r.age < 80.0);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_cohort(&small()).unwrap();
        let b = generate_cohort(&small()).unwrap();
        assert_eq!(a.volumes, b.volumes);
        assert_eq!(a.manifest, b.manifest);
        let c = generate_cohort(&SyntheticConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.volumes[0], c.volumes[0]);
    }

    #[test]
    fn ood_with_zero_offset_and_same_seed_is_identical() {
        let cfg = small();
        let a = generate_cohort(&cfg).unwrap();
        let b = generate_ood_cohort(&cfg, 0.0, cfg.seed).unwrap();
        assert_eq!(a.volumes, b.volumes);
    }

    #[test]
    fn noiseless_stage_four_is_exactly_offset_inside_box() {
        let cfg = SyntheticConfig {
            noise_sd: 1e-12,
            effect_sizes: [0.25, 0.5, 0.75, 1.0],
            sex_signal_scale: 0.0,
            ..small()
        };
        let c = generate_cohort(&cfg).unwrap();
        let i = c.manifest.records.iter().position(|r| r.hy_stage == Some(4)).unwrap();
        let v = &c.volumes[i];
        for x in 0..16 {
            for y in 0..16 {
                for z in 0..16 {
                    let want = if cfg.signal_region.contains([x, y, z]) { 1.0 } else { 0.0 };
                    assert!((v.get(x, y, z) - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn masks_match_configured_box() {
        let cfg = small();
        let c = generate_cohort(&cfg).unwrap();
        let expected = cfg.signal_region.mask(cfg.shape);
        assert_eq!(expected.iter().filter(|&&b| b).count(), 216);
        for r in &c.manifest.records {
            let m = c.truth.mask(&r.subject_id, cfg.shape).unwrap();
            if r.is_patient() {
                assert_eq!(m, expected);
            } else {
                assert!(m.iter().all(|b| !b));
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let zero = SyntheticConfig {
            n_controls: 0,
            n_per_stage: [0; 4],
            ..small()
        };
        assert!(generate_cohort(&zero).is_err());
        let decreasing = SyntheticConfig {
            effect_sizes: [0.4, 0.3, 0.5, 0.6],
            ..small()
        };
        assert!(generate_cohort(&decreasing).is_err());
        let outside = SyntheticConfig {
            signal_region: SignalBox {
                center: [14, 8, 8],
                half_extent: [3, 3, 3],
            },
            ..small()
        };
        assert!(generate_cohort(&outside).is_err());
    }

    #[test]
    fn truth_sidecar_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_cohort(&small()).unwrap();
        let p = dir.path().join("truth.json");
        c.truth.write(&p).unwrap();
        assert_eq!(GroundTruth::read(&p).unwrap(), c.truth);
    }
}
