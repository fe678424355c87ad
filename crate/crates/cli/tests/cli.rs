use std::fs;
use std::path::Path;
use std::process::Command;

use cmtl::config::ExperimentConfig;
use cmtl::{cmd_evaluate, cmd_generate, cmd_occlude, cmd_pretrain, cmd_report, cmd_search, cmd_train, Layout};
use curriculum_mtl::curriculum::CurriculumKind;
use curriculum_mtl::synthetic::SignalBox;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn small_config(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.synthetic.shape = [16, 16, 16];
    c.synthetic.n_controls = 20;
    c.synthetic.n_per_stage = [10, 10, 10, 10];
    c.synthetic.effect_sizes = [1.5, 2.0, 2.5, 3.0];
    c.synthetic.signal_region = SignalBox {
        center: [8, 8, 8],
        half_extent: [4, 4, 4],
    };
    c.pretrain.n_subjects = 20;
    c.pretrain.train.epochs_per_episode = 1;
    c.pretrain.train.batch_size = 4;
    c.train.epochs_per_episode = 2;
    c.train.batch_size = 4;
    c.search.n_trials = 2;
    c.search.budget_epochs = 1;
    c.n_runs = 1;
    c.output_dir = dir.to_path_buf();
    c
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small_config(tmp.path());
    let layout = Layout::new(tmp.path());

    let g = cmd_generate(&c).unwrap();
    assert_eq!((g.n_train, g.n_val, g.n_test), (48, 6, 6));
    for name in ["cohort", "train", "val", "test", "ood", "pretrain_train", "pretrain_val"] {
        assert!(layout.manifest(name).exists(), "{name}");
    }
    assert!(layout.data().join("ground_truth.json").exists());

    let p = cmd_pretrain(&c).unwrap();
    assert!(p.checkpoint.exists());
    assert!((0.0..=1.0).contains(&p.val_sex_accuracy));

    let runs = cmd_train(&c).unwrap();
    assert_eq!(runs.len(), 1);
    let run_dir = layout.run_dir("curriculum", 0);
    for f in ["model.ckpt", "log.jsonl", "plan.json", "summary.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run_dir.join("log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["episode", "epoch", "split", "l_age", "l_sex", "l_dx", "l_total"] {
        assert!(first.get(key).is_some(), "{key}");
    }

    c.train.pretrained = Some(p.checkpoint.clone());
    c.train.kind = CurriculumKind::None;
    cmd_train(&c).unwrap();
    assert!(layout.run_dir("none_pretrained", 0).join("model.ckpt").exists());

    let rows = cmd_evaluate(&c).unwrap();
    assert_eq!(rows.len(), 2);
    c.train.pretrained = None;
    c.train.kind = CurriculumKind::Curriculum;
    cmd_evaluate(&c).unwrap();
    let table = cmd_report(&c).unwrap();
    assert!(table.contains("curriculum") && table.contains("none_pretrained"));
    assert!(tmp.path().join("report.json").exists());

    let manifest = curriculum_mtl::data_model::load_manifest(&layout.manifest("test"), None).unwrap();
    let id = manifest.records.iter().find(|r| r.is_patient()).unwrap().subject_id.clone();
    let files = cmd_occlude(&c, &id, 0).unwrap();
    assert!(files.heatmap.exists());
    assert_eq!(files.slices.len(), 3);
    assert!(cmd_occlude(&c, "nobody", 0).is_err());

    let s = cmd_search(&c).unwrap();
    assert_eq!(s.trials.len(), 2);
    assert!(layout.search_dir().join("best.json").exists());
}

#[test]
fn commands_fail_cleanly_before_generation() {
    let tmp = tempfile::tempdir().unwrap();
    let c = small_config(tmp.path());
    let e = cmd_train(&c).unwrap_err();
    assert!(format!("{e:#}").contains("generate"));
    assert!(cmd_report(&c).is_err());
}

#[test]
fn generation_is_byte_identical_for_equal_seeds() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_generate(&small_config(a.path())).unwrap();
    cmd_generate(&small_config(b.path())).unwrap();
    for name in ["cohort.csv", "train.csv", "test.csv", "ood.csv", "ground_truth.json"] {
        let x = fs::read(a.path().join("data").join(name)).unwrap();
        let y = fs::read(b.path().join("data").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn binary_reports_errors_on_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"n_runs": 1, "unknown_key": true}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cmtl"))
        .args(["generate", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().find(|l| l.starts_with("error:")).unwrap();
    assert!(line.contains("unknown_key"), "{line}");
}

#[test]
fn binary_overrides_output_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, serde_json::to_string(&small_config(Path::new("ignored"))).unwrap()).unwrap();
    let out_dir = tmp.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_cmtl"))
        .args(["generate", "--seed", "7", "--config"])
        .arg(&cfg)
        .arg("--output")
        .arg(&out_dir)
        .env("RUST_LOG", "off")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out_dir.join("data/train.csv").exists());
    assert!(!Path::new("ignored").exists());
}
