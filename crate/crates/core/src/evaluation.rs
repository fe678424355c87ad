//! Binary classification metrics, run aggregation and the report layout.
//!
//! The decision rule everywhere is `score >= t` → positive.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::model::MultiTaskModel;
use crate::training::dataset::Dataset;
use crate::training::loss::sigmoid;

/// Labelled scores, one pair per subject.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoredSet {
    pub labels: Vec<bool>,
    pub scores: Vec<f64>,
}

impl ScoredSet {
    pub fn new(labels: Vec<bool>, scores: Vec<f64>) -> Result<Self> {
        if labels.len() != scores.len() {
            return Err(Error::Evaluation(format!(
                "{} labels for {} scores",
                labels.len(),
                scores.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score {s}")));
        }
        Ok(Self { labels, scores })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_neg(&self) -> usize {
        self.len() - self.n_pos()
    }

    fn require_both_classes(&self) -> Result<()> {
        if self.n_pos() == 0 || self.n_neg() == 0 {
            return Err(Error::Evaluation(format!(
                "need both classes, got {} positive and {} negative",
                self.n_pos(),
                self.n_neg()
            )));
        }
        Ok(())
    }

    /// Scores of one class, sorted ascending.
    fn sorted_class(&self, positive: bool) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .labels
            .iter()
            .zip(&self.scores)
            .filter(|(&l, _)| l == positive)
            .map(|(_, &s)| s)
            .collect();
        v.sort_by(f64::total_cmp);
        v
    }
}

/// Area under the ROC curve as the Mann–Whitney statistic (ties count one half).
pub fn roc_auc(s: &ScoredSet) -> Result<f64> {
    s.require_both_classes()?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    // Twice the rank sum of positives, with tied groups sharing their mean rank.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && s.scores[order[j + 1]] == s.scores[order[i]] {
            j += 1;
        }
        let ranks2 = (i + 1 + j + 1) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| s.labels[k]).count() as u128;
        rank_sum2 += ranks2 * pos_in_group;
        i = j + 1;
    }
    let (np, nn) = (s.n_pos() as u128, s.n_neg() as u128);
    // U = R - np(np+1)/2, doubled to stay integral.
    let u2 = rank_sum2 - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

/// Candidate thresholds: below-all sentinel, midpoints of adjacent distinct scores, above-all sentinel.
pub fn candidate_thresholds(s: &ScoredSet) -> Vec<f64> {
    let mut u = s.scores.clone();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let mut c = Vec::with_capacity(u.len() + 1);
    if let (Some(&lo), Some(&hi)) = (u.first(), u.last()) {
        c.push(lo.next_down());
        c.extend(u.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
        c.push(hi.next_up());
    }
    c
}

/// Confusion counts at threshold `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn confusion_at(s: &ScoredSet, t: f64) -> Confusion {
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&l, &v) in s.labels.iter().zip(&s.scores) {
        match (l, v >= t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Threshold maximizing sensitivity + specificity − 1; the smallest candidate wins ties.
pub fn youden_threshold(s: &ScoredSet) -> Result<f64> {
    s.require_both_classes()?;
    let pos = s.sorted_class(true);
    let neg = s.sorted_class(false);
    let (np, nn) = (pos.len() as u128, neg.len() as u128);
    let mut best: Option<(u128, f64)> = None;
    for t in candidate_thresholds(s) {
        let tp = (pos.len() - pos.partition_point(|&v| v < t)) as u128;
        let tn = neg.partition_point(|&v| v < t) as u128;
        // J * np * nn + np * nn, compared exactly in integers.
        let score = tp * nn + tn * np;
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, t));
        }
    }
    Ok(best.expect("at least two candidates").1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    /// 0 when nothing is predicted positive (see `precision_defined`).
    pub precision: f64,
    pub precision_defined: bool,
}

pub fn accuracy_precision_at(s: &ScoredSet, t: f64) -> ThresholdMetrics {
    let c = confusion_at(s, t);
    let n = s.len().max(1) as f64;
    let predicted = c.tp + c.fp;
    ThresholdMetrics {
        accuracy: (c.tp + c.tn) as f64 / n,
        precision: if predicted == 0 { 0.0 } else { c.tp as f64 / predicted as f64 },
        precision_defined: predicted > 0,
    }
}

/// Metrics of one trained model on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub roc_auc: f64,
    pub threshold: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub precision_defined: bool,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Scores `s` at a threshold chosen elsewhere.
pub fn report_at(s: &ScoredSet, threshold: f64) -> Result<EvaluationReport> {
    let m = accuracy_precision_at(s, threshold);
    Ok(EvaluationReport {
        roc_auc: roc_auc(s)?,
        threshold,
        accuracy: m.accuracy,
        precision: m.precision,
        precision_defined: m.precision_defined,
        n_pos: s.n_pos(),
        n_neg: s.n_neg(),
    })
}

/// Patient probabilities for every subject of a dataset.
pub fn score_dataset(model: &MultiTaskModel<f32>, data: &Dataset, batch: usize) -> Result<ScoredSet> {
    let mut scores = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = data.batch(model, chunk)?;
        let out = model.forward(&x)?;
        scores.extend(out.dx_logit.iter().map(|&z| sigmoid(z as f64)));
    }
    let labels = data.samples().iter().map(|s| s.record.is_patient()).collect();
    ScoredSet::new(labels, scores)
}

/// Evaluation batch size; inference only, so it need not match training.
pub const EVAL_BATCH: usize = 8;

/// Evaluates on `test` with the Youden threshold fitted on `val`.
pub fn evaluate(model: &MultiTaskModel<f32>, val: &Dataset, test: &Dataset) -> Result<EvaluationReport> {
    let threshold = youden_threshold(&score_dataset(model, val, EVAL_BATCH)?)?;
    report_at(&score_dataset(model, test, EVAL_BATCH)?, threshold)
}

/// Zero-shot evaluation on an out-of-distribution cohort: no refitting, threshold from `val`.
pub fn zero_shot_eval(model: &MultiTaskModel<f32>, ood: &Dataset, val: &Dataset) -> Result<EvaluationReport> {
    evaluate(model, val, ood)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample (n − 1) standard deviation; 0 for a single value.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, sd }
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ({:.3})", self.mean, self.sd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_runs: usize,
    pub roc_auc: MeanSd,
    pub threshold: MeanSd,
    pub accuracy: MeanSd,
    pub precision: MeanSd,
    pub runs: Vec<EvaluationReport>,
}

pub fn aggregate_runs(reports: &[EvaluationReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::Evaluation("no runs to aggregate".into()));
    }
    let col = |f: fn(&EvaluationReport) -> f64| MeanSd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        n_runs: reports.len(),
        roc_auc: col(|r| r.roc_auc),
        threshold: col(|r| r.threshold),
        accuracy: col(|r| r.accuracy),
        precision: col(|r| r.precision),
        runs: reports.to_vec(),
    })
}

/// One row of the summary table: an experiment on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub architecture: String,
    pub pretrained: bool,
    pub strategy: String,
    pub dataset: String,
    pub n_runs: usize,
    pub roc_auc: MeanSd,
    pub accuracy: MeanSd,
    pub precision: MeanSd,
}

impl ReportRow {
    pub fn new(architecture: &str, pretrained: bool, strategy: &str, dataset: &str, agg: &AggregateReport) -> Self {
        Self {
            architecture: architecture.into(),
            pretrained,
            strategy: strategy.into(),
            dataset: dataset.into(),
            n_runs: agg.n_runs,
            roc_auc: agg.roc_auc,
            accuracy: agg.accuracy,
            precision: agg.precision,
        }
    }
}

/// Per-run CSV record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub architecture: String,
    pub pretrained: bool,
    pub strategy: String,
    pub dataset: String,
    pub run: usize,
    pub seed: u64,
    pub roc_auc: f64,
    pub threshold: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub precision_defined: bool,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl RunRow {
    pub fn report(&self) -> EvaluationReport {
        EvaluationReport {
            roc_auc: self.roc_auc,
            threshold: self.threshold,
            accuracy: self.accuracy,
            precision: self.precision,
            precision_defined: self.precision_defined,
            n_pos: self.n_pos,
            n_neg: self.n_neg,
        }
    }
}

/// Groups per-run rows by (architecture, pretrained, strategy, dataset), keeping first-seen order.
pub fn summarize(rows: &[RunRow]) -> Result<Vec<ReportRow>> {
    let mut keys: Vec<(String, bool, String, String)> = Vec::new();
    for r in rows {
        let k = (r.architecture.clone(), r.pretrained, r.strategy.clone(), r.dataset.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(a, p, s, d)| {
            let reports: Vec<EvaluationReport> = rows
                .iter()
                .filter(|r| r.architecture == a && r.pretrained == p && r.strategy == s && r.dataset == d)
                .map(RunRow::report)
                .collect();
            Ok(ReportRow::new(&a, p, &s, &d, &aggregate_runs(&reports)?))
        })
        .collect()
}

pub fn write_run_csv(rows: &[RunRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().at(path)?;
    Ok(())
}

pub fn read_run_csv(path: &Path) -> Result<Vec<RunRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<RunRow>, _>>()?)
}

pub fn write_report_json(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).at(path)?;
    serde_json::to_writer_pretty(&mut f, rows)?;
    f.write_all(b"\n").at(path)?;
    Ok(())
}
