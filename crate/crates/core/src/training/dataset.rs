use std::collections::HashMap;

use crate::data_model::{CohortManifest, SubjectRecord};
use crate::error::{Error, Result};
use crate::model::MultiTaskModel;
use crate::nn::{Feat, Scalar};
use crate::preprocessing::{check_shape, z_transform};
use crate::training::loss::Targets;
use crate::volume::Volume;

/// One subject ready for the network: standardized volume plus targets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record: SubjectRecord,
    pub volume: Volume,
}

impl Sample {
    pub fn age(&self) -> f64 {
        self.record.age
    }

    pub fn sex(&self) -> f64 {
        self.record.sex.label() as f64
    }

    pub fn dx(&self) -> f64 {
        self.record.diagnosis.label() as f64
    }
}

/// In-memory, z-transformed subjects in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    samples: Vec<Sample>,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Reads every volume a manifest references and standardizes it.
    pub fn load(manifest: &CohortManifest) -> Result<Self> {
        let volumes = manifest
            .records
            .iter()
            .map(|r| Volume::read(&manifest.volume_path(r)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_volumes(manifest, volumes)
    }

    /// Pairs raw volumes (manifest order) with their records and standardizes them.
    pub fn from_volumes(manifest: &CohortManifest, volumes: Vec<Volume>) -> Result<Self> {
        if volumes.len() != manifest.len() {
            return Err(Error::InvalidInput(format!(
                "{}: {} volumes for {} records",
                manifest.name,
                volumes.len(),
                manifest.len()
            )));
        }
        let samples = manifest
            .records
            .iter()
            .zip(volumes)
            .map(|(r, v)| {
                check_shape(&v, manifest.canonical_shape)?;
                Ok(Sample {
                    record: r.clone(),
                    volume: z_transform(&v)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_samples(manifest.name.clone(), samples))
    }

    /// Wraps already standardized samples.
    pub fn from_samples(name: impl Into<String>, samples: Vec<Sample>) -> Self {
        let index = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.record.subject_id.clone(), i))
            .collect();
        Self {
            name: name.into(),
            samples,
            index,
        }
    }

    /// Manifest-order subset of records from `manifest` picked out of a larger dataset.
    pub fn restrict_to(&self, manifest: &CohortManifest) -> Result<Self> {
        let idx = self.indices_of(manifest.records.iter().map(|r| r.subject_id.as_str()))?;
        Ok(Self::from_samples(
            manifest.name.clone(),
            idx.into_iter().map(|i| self.samples[i].clone()).collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn find(&self, subject_id: &str) -> Option<&Sample> {
        self.index.get(subject_id).map(|&i| &self.samples[i])
    }

    pub fn indices_of<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Vec<usize>> {
        ids.into_iter()
            .map(|id| {
                self.index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::InvalidInput(format!("subject {id} is not in dataset {}", self.name)))
            })
            .collect()
    }

    pub fn mean_age(&self) -> f64 {
        self.samples.iter().map(Sample::age).sum::<f64>() / self.samples.len().max(1) as f64
    }

    pub fn n_patients(&self) -> usize {
        self.samples.iter().filter(|s| s.record.is_patient()).count()
    }

    /// Input batch and targets for the samples at `idx`, in that order.
    pub fn batch<T: Scalar>(&self, model: &MultiTaskModel<T>, idx: &[usize]) -> Result<(Feat<T>, Targets)> {
        let vols: Vec<&Volume> = idx.iter().map(|&i| &self.samples[i].volume).collect();
        let x = model.batch_from_volumes(&vols)?;
        let mut t = Targets::default();
        for &i in idx {
            let s = &self.samples[i];
            t.push(s.age(), s.sex(), s.dx());
        }
        Ok((x, t))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::synthetic::{generate_cohort, SignalBox, SyntheticConfig};

    pub(crate) fn tiny_cohort(n_controls: usize, n_per_stage: [usize; 4], seed: u64) -> (CohortManifest, Dataset) {
        let config = SyntheticConfig {
            shape: [16, 16, 16],
            n_controls,
            n_per_stage,
            effect_sizes: [1.5, 2.0, 2.5, 3.0],
            signal_region: SignalBox {
                center: [8, 8, 8],
                half_extent: [4, 4, 4],
            },
            seed,
            ..SyntheticConfig::default()
        };
        let cohort = generate_cohort(&config).unwrap();
        let ds = Dataset::from_volumes(&cohort.manifest, cohort.volumes).unwrap();
        (cohort.manifest, ds)
    }

    #[test]
    fn volumes_are_standardized_and_indexed() {
        let (m, ds) = tiny_cohort(3, [1, 1, 1, 1], 4);
        assert_eq!(ds.len(), 7);
        for s in ds.samples() {
            let (mean, sd) = s.volume.mean_sd();
            assert!(mean.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6);
        }
        let id = &m.records[5].subject_id;
        assert_eq!(ds.indices_of([id.as_str()]).unwrap(), vec![5]);
        assert!(ds.indices_of(["missing"]).is_err());
        assert_eq!(ds.n_patients(), 4);
    }

    #[test]
    fn volume_count_must_match_records() {
        let (m, ds) = tiny_cohort(2, [1, 0, 0, 0], 1);
        let vols: Vec<Volume> = ds.samples().iter().take(2).map(|s| s.volume.clone()).collect();
        assert!(Dataset::from_volumes(&m, vols).is_err());
    }
}
