//! Trains every curriculum strategy on a synthetic cohort and prints test AUCs.
//!
//! Usage: `cargo run --release --example strategy_comparison -- [seeds] [epochs]`

use std::time::Instant;

use curriculum_mtl::curriculum::{build_episode_plan, BalanceMode, CurriculumKind};
use curriculum_mtl::data_model::{split_manifest, SplitSpec};
use curriculum_mtl::evaluation::evaluate;
use curriculum_mtl::model::BackboneConfig;
use curriculum_mtl::synthetic::{generate_cohort, SyntheticConfig};
use curriculum_mtl::training::{run_curriculum_training, Dataset, TrainConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> curriculum_mtl::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(1, |s| s.parse().expect("seed count"));
    let epochs: usize = args.next().map_or(30, |s| s.parse().expect("epoch count"));
    for seed in 0..seeds {
        let synth = SyntheticConfig {
            seed,
            ..SyntheticConfig::default()
        };
        let cohort = generate_cohort(&synth)?;
        let all = Dataset::from_volumes(&cohort.manifest, cohort.volumes)?;
        let spec = SplitSpec {
            seed,
            ..SplitSpec::default()
        };
        let (tr, va, te) = split_manifest(&cohort.manifest, &spec)?;
        let (train, val, test) = (all.restrict_to(&tr)?, all.restrict_to(&va)?, all.restrict_to(&te)?);
        let backbone = BackboneConfig::tiny(synth.shape);
        for kind in [CurriculumKind::Curriculum, CurriculumKind::AntiCurriculum, CurriculumKind::None] {
            let t = Instant::now();
            let config = TrainConfig {
                seed,
                kind,
                epochs_per_episode: epochs,
                ..TrainConfig::default()
            };
            let plan = build_episode_plan(&tr, kind, BalanceMode::Off, seed)?;
            let res = run_curriculum_training(&train, &val, &plan, &backbone, &config, &mut |_| Ok(()))?;
            let report = evaluate(&res.model, &val, &test)?;
            let epochs_run: usize = res.episodes.iter().map(|e| e.epochs_run).sum();
            println!(
                "seed {seed} {:<16} test AUC {:.3}  epochs {epochs_run:>3}  {:.0} s",
                kind.label(),
                report.roc_auc,
                t.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
