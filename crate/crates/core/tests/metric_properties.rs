use proptest::prelude::*;

use curriculum_mtl::evaluation::{
    accuracy_precision_at, candidate_thresholds, confusion_at, roc_auc, youden_threshold, ScoredSet,
};
use curriculum_mtl::interpretation::{occlusion_sensitivity, EdgeMode, OcclusionConfig, PatientScorer};
use curriculum_mtl::training::{bce_with_logits, multitask_loss};
use curriculum_mtl::volume::Volume;
use curriculum_mtl::Result;

fn scored() -> impl Strategy<Value = ScoredSet> {
    (2usize..50)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(any::<bool>(), n),
                prop::collection::vec(0u8..10, n),
            )
        })
        .prop_map(|(mut labels, levels)| {
            labels[0] = true;
            labels[1] = false;
            let scores = levels.iter().map(|&l| l as f64 * 0.3 - 1.2).collect();
            ScoredSet::new(labels, scores).unwrap()
        })
}

fn with_scores(s: &ScoredSet, f: impl Fn(f64) -> f64) -> ScoredSet {
    ScoredSet::new(s.labels.clone(), s.scores.iter().map(|&x| f(x)).collect()).unwrap()
}

fn youden_scaled(s: &ScoredSet, t: f64) -> usize {
    let c = confusion_at(s, t);
    c.tp * s.n_neg() + c.tn * s.n_pos()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn loss_terms_add_up(
        rows in prop::collection::vec((20.0f64..90.0, 20.0f64..90.0, -30.0f64..30.0, -30.0f64..30.0, any::<bool>(), any::<bool>()), 1..40)
    ) {
        let col = |f: fn(&(f64, f64, f64, f64, bool, bool)) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
        let l = multitask_loss(
            &col(|r| r.0), &col(|r| r.2), &col(|r| r.3),
            &col(|r| r.1), &col(|r| r.4 as u8 as f64), &col(|r| r.5 as u8 as f64),
        ).unwrap();
        prop_assert!((l.l_total - (l.l_age + l.l_sex + l.l_dx)).abs() < 1e-6);
        prop_assert!(l.l_age >= 0.0 && l.l_sex >= 0.0 && l.l_dx >= 0.0);
    }

    #[test]
    fn bce_matches_the_explicit_formula(z in -30.0f64..=30.0, y in any::<bool>()) {
        let y = y as u8 as f64;
        let p = 1.0 / (1.0 + (-z).exp());
        let q = 1.0 / (1.0 + z.exp());
        let explicit = -(y * p.ln() + (1.0 - y) * q.ln());
        prop_assert!((bce_with_logits(z, y) - explicit).abs() < 1e-6);
    }

    #[test]
    fn auc_ignores_monotone_transforms(s in scored()) {
        let base = roc_auc(&s).unwrap();
        prop_assert_eq!(roc_auc(&with_scores(&s, |x| x.exp())).unwrap(), base);
        prop_assert_eq!(roc_auc(&with_scores(&s, |x| 3.0 * x * x * x + 1.0)).unwrap(), base);
    }

    #[test]
    fn auc_complement_symmetry(s in scored()) {
        let base = roc_auc(&s).unwrap();
        let negated = with_scores(&s, |x| -x);
        prop_assert!((roc_auc(&negated).unwrap() - (1.0 - base)).abs() < 1e-12);
        let swapped = ScoredSet::new(negated.labels.iter().map(|l| !l).collect(), negated.scores.clone()).unwrap();
        prop_assert!((roc_auc(&swapped).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn youden_threshold_is_optimal_and_metrics_match(s in scored()) {
        let t = youden_threshold(&s).unwrap();
        let best = youden_scaled(&s, t);
        for c in candidate_thresholds(&s) {
            prop_assert!(youden_scaled(&s, c) <= best);
        }
        let m = accuracy_precision_at(&s, t);
        let (mut tp, mut fp, mut tn) = (0usize, 0usize, 0usize);
        for (&l, &v) in s.labels.iter().zip(&s.scores) {
            match (l, v >= t) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (false, false) => tn += 1,
                _ => {}
            }
        }
        prop_assert_eq!(m.accuracy, (tp + tn) as f64 / s.len() as f64);
        prop_assert_eq!(m.precision_defined, tp + fp > 0);
        if tp + fp > 0 {
            prop_assert_eq!(m.precision, tp as f64 / (tp + fp) as f64);
        }
    }
}

/// Probability 0.9, dropping by `drop` as soon as any voxel carries the fill value.
struct ConstantDrop {
    shape: [usize; 3],
    drop: f64,
}

impl PatientScorer for ConstantDrop {
    fn input_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn patient_probabilities(&self, volumes: &[&Volume]) -> Result<Vec<f64>> {
        Ok(volumes
            .iter()
            .map(|v| if v.data().contains(&0.0) { 0.9 - self.drop } else { 0.9 })
            .collect())
    }
}

#[test]
fn constant_drop_gives_a_flat_heatmap() {
    for (shape, mode) in [([20, 23, 18], EdgeMode::ClampExtraPosition), ([16, 24, 20], EdgeMode::InteriorOnly)] {
        let scorer = ConstantDrop { shape, drop: 0.25 };
        let v = Volume::filled(shape, 1.0);
        let config = OcclusionConfig {
            patch_size: 8,
            stride: 4,
            fill_value: 0.0,
            edge_mode: mode,
        };
        let h = occlusion_sensitivity(&scorer, &v, &config).unwrap();
        for &x in &h.values {
            assert!((x - 0.25).abs() < 1e-12, "{x}");
        }
        assert_eq!(occlusion_sensitivity(&scorer, &v, &config).unwrap(), h);
    }
}
