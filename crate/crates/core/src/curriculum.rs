//! Episodic training schedules built from H&Y staging.
//!
//! The curriculum starts with controls and the most severe stage, then adds
//! one milder stage per episode. The anti-curriculum runs the other way. Episodes are
//! cumulative, so the last one always holds the full training set (unless
//! balancing subsamples controls).

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{CohortManifest, Diagnosis, MAX_STAGE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumKind {
    /// Most severe stage first.
    Curriculum,
    /// Mildest stage first.
    AntiCurriculum,
    /// One episode with every training subject (regular training).
    None,
}

impl CurriculumKind {
    pub fn label(self) -> &'static str {
        match self {
            CurriculumKind::Curriculum => "curriculum",
            CurriculumKind::AntiCurriculum => "anti_curriculum",
            CurriculumKind::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    Off,
    /// Subsample controls down to the episode's patient count.
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub index: usize,
    pub included_stages: BTreeSet<u8>,
    pub balanced: bool,
    /// Roster in the seeded order the trainer starts from.
    pub subject_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodePlan {
    pub kind: CurriculumKind,
    pub balance: BalanceMode,
    pub seed: u64,
    pub episodes: Vec<Episode>,
}

impl EpisodePlan {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Order in which stages join the training pool.
///
/// Stage 0 (no visible motor signs) joins after stage 1 under the curriculum
/// and before it under the anti-curriculum.
fn stage_order(kind: CurriculumKind, present: &BTreeSet<u8>) -> Vec<u8> {
    let mut ascending: Vec<u8> = present.iter().copied().collect();
    match kind {
        CurriculumKind::AntiCurriculum => ascending,
        CurriculumKind::Curriculum => {
            ascending.reverse();
            ascending
        }
        CurriculumKind::None => ascending,
    }
}

pub fn build_episode_plan(
    train: &CohortManifest,
    kind: CurriculumKind,
    balance: BalanceMode,
    seed: u64,
) -> Result<EpisodePlan> {
    let mut controls = Vec::new();
    let mut present = BTreeSet::new();
    for r in &train.records {
        match (r.diagnosis, r.hy_stage) {
            (Diagnosis::Control, _) => controls.push(r.subject_id.clone()),
            (Diagnosis::Patient, Some(s)) if s <= MAX_STAGE => {
                present.insert(s);
            }
            (Diagnosis::Patient, other) => {
                return Err(Error::Curriculum(format!(
                    "subject {} has unusable stage {other:?}",
                    r.subject_id
                )))
            }
        }
    }
    if controls.is_empty() {
        return Err(Error::Curriculum(format!("{}: no controls", train.name)));
    }
    if present.is_empty() {
        return Err(Error::Curriculum(format!("{}: no patients", train.name)));
    }

    let stage_sets: Vec<BTreeSet<u8>> = match kind {
        CurriculumKind::None => vec![present.clone()],
        _ => {
            let order = stage_order(kind, &present);
            (1..=order.len())
                .map(|k| order[..k].iter().copied().collect())
                .collect()
        }
    };

    let episodes = stage_sets
        .into_iter()
        .enumerate()
        .map(|(index, included_stages)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            let patients: Vec<String> = train
                .records
                .iter()
                .filter(|r| r.hy_stage.is_some_and(|s| included_stages.contains(&s)))
                .map(|r| r.subject_id.clone())
                .collect();
            let balanced = balance == BalanceMode::Balanced;
            let mut roster: Vec<String> = if balanced && controls.len() > patients.len() {
                let mut picked: Vec<String> = controls
                    .choose_multiple(&mut rng, patients.len())
                    .cloned()
                    .collect();
                // Keep manifest order before the shuffle so the draw alone decides membership.
                picked.sort_by_key(|id| controls.iter().position(|c| c == id));
                picked
            } else {
                controls.clone()
            };
            roster.extend(patients);
            roster.shuffle(&mut rng);
            Episode {
                index,
                included_stages,
                balanced,
                subject_ids: roster,
            }
        })
        .collect();

    Ok(EpisodePlan {
        kind,
        balance,
        seed,
        episodes,
    })
}

pub fn episode_subjects(plan: &EpisodePlan, k: usize) -> Result<&[String]> {
    plan.episodes
        .get(k)
        .map(|e| e.subject_ids.as_slice())
        .ok_or_else(|| {
            Error::Curriculum(format!(
                "episode index {k} out of range (plan has {})",
                plan.episodes.len()
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::tests::staged_manifest;
    use std::collections::HashSet;

    fn taiwan() -> CohortManifest {
        staged_manifest(180, [0, 61, 67, 43, 27])
    }

    fn sizes(plan: &EpisodePlan) -> Vec<usize> {
        plan.episodes.iter().map(|e| e.subject_ids.len()).collect()
    }

    #[test]
    fn curriculum_episode_sizes() {
        let plan = build_episode_plan(&taiwan(), CurriculumKind::Curriculum, BalanceMode::Off, 0).unwrap();
        assert_eq!(sizes(&plan), vec![207, 250, 317, 378]);
        assert_eq!(plan.episodes[0].included_stages, BTreeSet::from([4]));
        assert_eq!(plan.episodes[3].included_stages, BTreeSet::from([1, 2, 3, 4]));
    }

    #[test]
    fn anti_curriculum_episode_sizes() {
        let plan = build_episode_plan(&taiwan(), CurriculumKind::AntiCurriculum, BalanceMode::Off, 0).unwrap();
        assert_eq!(sizes(&plan), vec![241, 308, 351, 378]);
        assert_eq!(plan.episodes[0].included_stages, BTreeSet::from([1]));
    }

    #[test]
    fn none_is_single_full_episode() {
        let m = taiwan();
        let plan = build_episode_plan(&m, CurriculumKind::None, BalanceMode::Off, 0).unwrap();
        assert_eq!(plan.len(), 1);
        let ids: HashSet<_> = episode_subjects(&plan, 0).unwrap().iter().collect();
        assert_eq!(ids.len(), m.len());
    }

    #[test]
    fn only_stage_two_gives_one_episode() {
        let m = staged_manifest(10, [0, 0, 5, 0, 0]);
        let plan = build_episode_plan(&m, CurriculumKind::Curriculum, BalanceMode::Off, 0).unwrap();
        assert_eq!(plan.len(), 1);
        assert_eq!(plan.episodes[0].subject_ids.len(), 15);
    }

    #[test]
    fn stage_zero_is_last_for_curriculum_and_first_for_anti() {
        let m = staged_manifest(10, [3, 2, 0, 0, 4]);
        let c = build_episode_plan(&m, CurriculumKind::Curriculum, BalanceMode::Off, 0).unwrap();
        let order: Vec<_> = c.episodes.iter().map(|e| e.included_stages.clone()).collect();
        assert_eq!(order, vec![BTreeSet::from([4]), BTreeSet::from([1, 4]), BTreeSet::from([0, 1, 4])]);
        let a = build_episode_plan(&m, CurriculumKind::AntiCurriculum, BalanceMode::Off, 0).unwrap();
        assert_eq!(a.episodes[0].included_stages, BTreeSet::from([0]));
    }

    #[test]
    fn balanced_subsamples_controls() {
        let m = taiwan();
        let plan = build_episode_plan(&m, CurriculumKind::Curriculum, BalanceMode::Balanced, 3).unwrap();
        let counts: Vec<(usize, usize)> = plan
            .episodes
            .iter()
            .map(|e| {
                let cn = e.subject_ids.iter().filter(|id| id.starts_with("cn")).count();
                (cn, e.subject_ids.len() - cn)
            })
            .collect();
        assert_eq!(counts, vec![(27, 27), (70, 70), (137, 137), (180, 198)]);
    }

    #[test]
    fn errors() {
        let no_patients = staged_manifest(5, [0; 5]);
        assert!(build_episode_plan(&no_patients, CurriculumKind::Curriculum, BalanceMode::Off, 0).is_err());
        let no_controls = staged_manifest(0, [0, 3, 0, 0, 0]);
        assert!(build_episode_plan(&no_controls, CurriculumKind::Curriculum, BalanceMode::Off, 0).is_err());
        let plan = build_episode_plan(&taiwan(), CurriculumKind::Curriculum, BalanceMode::Off, 0).unwrap();
        assert!(episode_subjects(&plan, 4).is_err());
    }

    #[test]
    fn deterministic_roster_and_json_round_trip() {
        let m = taiwan();
        let a = build_episode_plan(&m, CurriculumKind::Curriculum, BalanceMode::Balanced, 11).unwrap();
        let b = build_episode_plan(&m, CurriculumKind::Curriculum, BalanceMode::Balanced, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(EpisodePlan::from_json(&a.to_json().unwrap()).unwrap(), a);
        let c = build_episode_plan(&m, CurriculumKind::Curriculum, BalanceMode::Balanced, 12).unwrap();
        assert_ne!(a.episodes[0].subject_ids, c.episodes[0].subject_ids);
    }
}
