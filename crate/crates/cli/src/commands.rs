use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use curriculum_mtl::checkpoint::Checkpoint;
use curriculum_mtl::curriculum::build_episode_plan;
use curriculum_mtl::data_model::{load_manifest, split_manifest, CohortManifest, SplitSpec};
use curriculum_mtl::evaluation::{
    read_run_csv, report_at, score_dataset, summarize, write_report_json, write_run_csv, youden_threshold, ReportRow,
    RunRow, EVAL_BATCH,
};
use curriculum_mtl::interpretation::{export_overlay, occlusion_sensitivity, OverlayFiles};
use curriculum_mtl::model::MultiTaskModel;
use curriculum_mtl::preprocessing::z_transform;
use curriculum_mtl::synthetic::{generate_cohort, generate_ood_cohort, SyntheticConfig};
use curriculum_mtl::training::{
    hyperparameter_search, pretrain_proxy, run_curriculum_training, Dataset, EpisodeSummary, EpochRecord,
    SearchResult, StopReason,
};
use curriculum_mtl::volume::Volume;

use crate::config::ExperimentConfig;

/// File layout under the experiment's output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self, name: &str) -> PathBuf {
        self.data().join(format!("{name}.csv"))
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn run_dir(&self, strategy: &str, run: usize) -> PathBuf {
        self.root.join("runs").join(strategy).join(format!("run-{run}"))
    }

    pub fn report_dir(&self, strategy: &str) -> PathBuf {
        self.root.join("reports").join(strategy)
    }

    pub fn occlusion_dir(&self, strategy: &str, run: usize) -> PathBuf {
        self.root.join("occlusion").join(strategy).join(format!("run-{run}"))
    }

    pub fn search_dir(&self) -> PathBuf {
        self.root.join("search")
    }
}

/// Strategy label used in paths and reports, e.g. `curriculum` or `none_pretrained`.
pub fn strategy_label(config: &ExperimentConfig) -> String {
    let base = config.train.kind.label();
    if config.train.pretrained.is_some() {
        format!("{base}_pretrained")
    } else {
        base.to_string()
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_split(layout: &Layout, name: &str, shape: [usize; 3]) -> Result<CohortManifest> {
    let path = layout.manifest(name);
    if !path.exists() {
        bail!("{} not found; run `cmtl generate` first", path.display());
    }
    Ok(load_manifest(&path, Some(shape))?)
}

fn load_dataset(layout: &Layout, name: &str, shape: [usize; 3]) -> Result<Dataset> {
    Ok(Dataset::load(&load_split(layout, name, shape)?)?)
}

/// JSON-lines writer for per-epoch records.
struct LogFile {
    out: BufWriter<File>,
}

impl LogFile {
    fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { out: BufWriter::new(f) })
    }

    fn write(&mut self, r: &EpochRecord) -> curriculum_mtl::Result<()> {
        let io = |e: std::io::Error| curriculum_mtl::Error::InvalidInput(format!("writing training log: {e}"));
        self.out.write_all(r.to_json_lines()?.as_bytes()).map_err(io)
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_ood: usize,
    pub n_pretrain: usize,
}

/// Writes the cohort, its train/val/test split, the OOD cohort and the proxy-pretraining cohort.
pub fn cmd_generate(config: &ExperimentConfig) -> Result<GenerateSummary> {
    config.validate()?;
    let layout = Layout::new(&config.output_dir);
    let data = layout.data();
    create_dir(&data)?;

    let mut cohort = generate_cohort(&config.synthetic)?;
    cohort.write_volumes(&data)?;
    cohort.manifest.write_csv(&layout.manifest("cohort"))?;
    cohort.truth.write(&data.join("ground_truth.json"))?;
    let (train, val, test) = split_manifest(&cohort.manifest, &config.split)?;
    for (name, m) in [("train", &train), ("val", &val), ("test", &test)] {
        m.write_csv(&layout.manifest(name))?;
    }

    let ood_synth = SyntheticConfig {
        site: config.ood.site.clone(),
        ..config.synthetic.clone()
    };
    let mut ood = generate_ood_cohort(&ood_synth, config.ood.site_offset, config.ood.seed)?;
    ood.write_volumes(&data)?;
    ood.manifest.write_csv(&layout.manifest("ood"))?;
    ood.truth.write(&data.join("ood_ground_truth.json"))?;

    let proxy = SyntheticConfig {
        n_controls: config.pretrain.n_subjects,
        n_per_stage: [0; 4],
        sex_signal_scale: config.pretrain.sex_signal_scale,
        seed: config.pretrain.seed,
        site: "pretrain".into(),
        ..config.synthetic.clone()
    };
    let mut proxy = generate_cohort(&proxy)?;
    proxy.write_volumes(&data)?;
    let proxy_split = SplitSpec {
        train_fraction: 0.9,
        val_fraction: 0.05,
        test_fraction: 0.05,
        seed: config.pretrain.seed,
        stratify_by: vec![curriculum_mtl::data_model::StratifyKey::Sex],
    };
    let (p_train, p_val, p_test) = split_manifest(&proxy.manifest, &proxy_split)?;
    // The proxy cohort needs no held-out test split; fold it into validation.
    let mut p_val_records = p_val.records.clone();
    p_val_records.extend(p_test.records.iter().cloned());
    let p_val = CohortManifest::new(p_val.name.clone(), p_val_records, p_val.canonical_shape, p_val.base_dir.clone())?;
    p_train.write_csv(&layout.manifest("pretrain_train"))?;
    p_val.write_csv(&layout.manifest("pretrain_val"))?;

    let summary = GenerateSummary {
        n_train: train.len(),
        n_val: val.len(),
        n_test: test.len(),
        n_ood: ood.manifest.len(),
        n_pretrain: proxy.manifest.len(),
    };
    log::info!("generated dataset in {}: {summary:?}", data.display());
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub val_sex_accuracy: f64,
    pub epochs: usize,
}

/// Proxy pretraining on the sex task; writes `pretrain/backbone.ckpt`.
pub fn cmd_pretrain(config: &ExperimentConfig) -> Result<PretrainSummary> {
    config.validate()?;
    let layout = Layout::new(&config.output_dir);
    let shape = config.synthetic.shape;
    let train = load_dataset(&layout, "pretrain_train", shape)?;
    let val = load_dataset(&layout, "pretrain_val", shape)?;
    let dir = layout.pretrain_dir();
    create_dir(&dir)?;
    let mut log = LogFile::create(&dir.join("log.jsonl"))?;
    let res = pretrain_proxy(&train, &val, &config.backbone_config(), &config.pretrain.train, &mut |r| log.write(r))?;
    log.finish()?;
    let checkpoint = dir.join("backbone.ckpt");
    res.checkpoint.write(&checkpoint)?;
    let summary = PretrainSummary {
        checkpoint,
        val_sex_accuracy: res.val_sex_accuracy,
        epochs: res.log.len(),
    };
    write_json(&summary, &dir.join("summary.json"))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: String,
    pub run: usize,
    pub seed: u64,
    pub episodes: Vec<EpisodeSummary>,
    pub stop_reason: StopReason,
    pub final_val_loss: f64,
    pub final_val_auc: Option<f64>,
}

/// Trains `n_runs` seeds (`train.seed + run`) of the configured strategy.
pub fn cmd_train(config: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    config.validate()?;
    let layout = Layout::new(&config.output_dir);
    let shape = config.synthetic.shape;
    let train_manifest = load_split(&layout, "train", shape)?;
    let train = Dataset::load(&train_manifest)?;
    let val = load_dataset(&layout, "val", shape)?;
    let strategy = strategy_label(config);
    let backbone = config.backbone_config();

    let mut summaries = Vec::with_capacity(config.n_runs);
    for run in 0..config.n_runs {
        let seed = config.train.seed.wrapping_add(run as u64);
        let train_config = curriculum_mtl::training::TrainConfig {
            seed,
            ..config.train.clone()
        };
        let plan = build_episode_plan(&train_manifest, train_config.kind, train_config.balance, seed)?;
        let dir = layout.run_dir(&strategy, run);
        create_dir(&dir)?;
        fs::write(dir.join("plan.json"), plan.to_json()?)?;
        let mut log = LogFile::create(&dir.join("log.jsonl"))?;
        log::info!("{strategy} run {run} (seed {seed}): {} episode(s)", plan.len());
        let res = run_curriculum_training(&train, &val, &plan, &backbone, &train_config, &mut |r| log.write(r))?;
        log.finish()?;
        res.best_checkpoint().write(&dir.join("model.ckpt"))?;
        let last = res.episodes.last().expect("nonempty plan");
        let final_val_auc = res
            .log
            .iter()
            .find(|r| r.episode == last.episode && r.epoch == last.best_epoch)
            .and_then(|r| r.val_auc);
        let summary = RunSummary {
            strategy: strategy.clone(),
            run,
            seed,
            episodes: res.episodes.clone(),
            stop_reason: res.stop_reason(),
            final_val_loss: last.best_val_loss,
            final_val_auc,
        };
        write_json(&summary, &dir.join("summary.json"))?;
        summaries.push(summary);
    }
    Ok(summaries)
}

fn load_run_model(layout: &Layout, strategy: &str, run: usize) -> Result<MultiTaskModel<f32>> {
    let path = layout.run_dir(strategy, run).join("model.ckpt");
    if !path.exists() {
        bail!("{} not found; run `cmtl train` first", path.display());
    }
    Ok(MultiTaskModel::from_checkpoint(&Checkpoint::read(&path)?)?)
}

/// In-distribution test and zero-shot OOD reports for every trained run.
///
/// The decision threshold comes from the validation set in both cases.
pub fn cmd_evaluate(config: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    config.validate()?;
    let layout = Layout::new(&config.output_dir);
    let shape = config.synthetic.shape;
    let val = load_dataset(&layout, "val", shape)?;
    let test = load_dataset(&layout, "test", shape)?;
    let ood = load_dataset(&layout, "ood", shape)?;
    let strategy = strategy_label(config);
    let architecture = config.backbone.variant.label();
    let pretrained = config.train.pretrained.is_some();

    let mut rows = Vec::new();
    for run in 0..config.n_runs {
        let model = load_run_model(&layout, &strategy, run)?;
        let threshold = youden_threshold(&score_dataset(&model, &val, EVAL_BATCH)?)?;
        for (name, data) in [("test", &test), ("ood", &ood)] {
            let r = report_at(&score_dataset(&model, data, EVAL_BATCH)?, threshold)?;
            rows.push(RunRow {
                architecture: architecture.into(),
                pretrained,
                strategy: strategy.clone(),
                dataset: name.into(),
                run,
                seed: config.train.seed.wrapping_add(run as u64),
                roc_auc: r.roc_auc,
                threshold: r.threshold,
                accuracy: r.accuracy,
                precision: r.precision,
                precision_defined: r.precision_defined,
                n_pos: r.n_pos,
                n_neg: r.n_neg,
            });
        }
    }
    let dir = layout.report_dir(&strategy);
    create_dir(&dir)?;
    write_run_csv(&rows, &dir.join("runs.csv"))?;
    let summary = summarize(&rows)?;
    write_report_json(&summary, &dir.join("report.json"))?;
    Ok(summary)
}

/// Collects every strategy's per-run CSV into `report.json`, `report.csv` and a text table.
pub fn cmd_report(config: &ExperimentConfig) -> Result<String> {
    let layout = Layout::new(&config.output_dir);
    let reports = layout.root.join("reports");
    let mut dirs: Vec<PathBuf> = match fs::read_dir(&reports) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("runs.csv").exists())
            .collect(),
        Err(_) => Vec::new(),
    };
    if dirs.is_empty() {
        bail!("no evaluation results under {}; run `cmtl evaluate` first", reports.display());
    }
    dirs.sort();
    let mut rows = Vec::new();
    for d in &dirs {
        rows.extend(read_run_csv(&d.join("runs.csv"))?);
    }
    let summary = summarize(&rows)?;
    write_report_json(&summary, &layout.root.join("report.json"))?;
    write_run_csv(&rows, &layout.root.join("report.csv"))?;
    Ok(format_table(&summary))
}

pub fn format_table(rows: &[ReportRow]) -> String {
    let mut s = format!(
        "{:<14} {:<10} {:<26} {:<8} {:>5}  {:<15} {:<15} {:<15}\n",
        "architecture", "pretrained", "strategy", "dataset", "runs", "ROC-AUC", "accuracy", "precision"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<14} {:<10} {:<26} {:<8} {:>5}  {:<15} {:<15} {:<15}\n",
            r.architecture,
            if r.pretrained { "yes" } else { "no" },
            r.strategy,
            r.dataset,
            r.n_runs,
            r.roc_auc.to_string(),
            r.accuracy.to_string(),
            r.precision.to_string()
        ));
    }
    s
}

/// Occlusion heatmap and overlays for one subject of any generated manifest.
pub fn cmd_occlude(config: &ExperimentConfig, subject_id: &str, run: usize) -> Result<OverlayFiles> {
    config.validate()?;
    let layout = Layout::new(&config.output_dir);
    let shape = config.synthetic.shape;
    let mut found = None;
    for name in ["test", "val", "train", "ood"] {
        let path = layout.manifest(name);
        if !path.exists() {
            continue;
        }
        let m = load_manifest(&path, Some(shape))?;
        if let Some(r) = m.find(subject_id) {
            found = Some(m.volume_path(r));
            break;
        }
    }
    let Some(volume_path) = found else {
        bail!("unknown subject {subject_id}");
    };
    let strategy = strategy_label(config);
    let model = load_run_model(&layout, &strategy, run)?;
    let v = z_transform(&Volume::read(&volume_path)?)?;
    let heatmap = occlusion_sensitivity(&model, &v, &config.occlusion)?;
    Ok(export_overlay(&heatmap, &v, &layout.occlusion_dir(&strategy, run), subject_id)?)
}

/// Random hyperparameter search; writes the trial table and best config.
pub fn cmd_search(config: &ExperimentConfig) -> Result<SearchResult> {
    config.validate()?;
    let layout = Layout::new(&config.output_dir);
    let shape = config.synthetic.shape;
    let train_manifest = load_split(&layout, "train", shape)?;
    let train = Dataset::load(&train_manifest)?;
    let val = load_dataset(&layout, "val", shape)?;
    let plan = build_episode_plan(&train_manifest, config.train.kind, config.train.balance, config.train.seed)?;
    let s = &config.search;
    let res = hyperparameter_search(
        &train,
        &val,
        &plan,
        &config.backbone_config(),
        &config.train,
        &s.space,
        s.n_trials,
        s.seed,
        s.budget_epochs,
    )?;
    let dir = layout.search_dir();
    create_dir(&dir)?;
    let path = dir.join("trials.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for t in &res.trials {
        w.serialize(t)?;
    }
    w.flush()?;
    write_json(&res.best, &dir.join("best.json"))?;
    Ok(res)
}
