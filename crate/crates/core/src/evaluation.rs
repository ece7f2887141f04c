//! Episode scoring, aggregation over a run, report files, and the parallel
//! episode runner.
//!
//! Error rates use the number of labels actually assigned as denominator, not
//! the pool size. Confidence intervals use the normal approximation
//! `1.96 · s / √E` with the `E − 1` sample standard deviation.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{extract_positives, run_music_normalized, MusicConfig, MusicResult, NormalizedEpisode};
use crate::episode::{sample_episode, Episode, EpisodeConfig, Truth};
use crate::feature_store::FeatureStore;
use crate::{Error, Result};

pub const REPORT_VERSION: u32 = 1;
const Z95: f64 = 1.96;

/// `wrong` out of `assigned` labels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorCount {
    pub wrong: u64,
    pub assigned: u64,
    /// `wrong / assigned`, or 0 when nothing was assigned.
    pub rate: f64,
}

impl ErrorCount {
    pub fn new(wrong: u64, assigned: u64) -> Self {
        let rate = if assigned == 0 { 0.0 } else { wrong as f64 / assigned as f64 };
        Self { wrong, assigned, rate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub episode_index: u64,
    pub query_accuracy: f64,
    /// Query accuracy after each training stage, stage 0 first.
    pub per_iteration_accuracy: Vec<f64>,
    pub negative_iterations: u64,
    /// Entry `t` covers the labels assigned in round `t + 1`.
    pub neg_error_per_iteration: Vec<ErrorCount>,
    /// Positives implied by complete exclusion sets. Distractor samples are
    /// always counted wrong.
    pub pos_error: ErrorCount,
    pub pos_proportion: f64,
    /// Stage-0 argmax labels above the positive threshold.
    pub threshold_baseline_error: ErrorCount,
    /// Negative labels handed out per episode class.
    pub neg_per_class: Vec<u64>,
    /// Positive labels per episode class.
    pub pos_per_class: Vec<u64>,
    pub pool_size: u64,
}

fn is_wrong_positive(truth: Truth, class: usize) -> bool {
    truth != Truth::Class(class)
}

pub fn score_episode(result: &MusicResult, episode: &Episode) -> Result<EpisodeReport> {
    let c = episode.ways;
    if result.predictions.len() != episode.queries.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} queries",
            result.predictions.len(),
            episode.queries.len()
        )));
    }
    if result.pseudo.samples() != episode.unlabeled.len() || result.pseudo.classes() != c {
        return Err(Error::contract("pseudo-label state does not match the episode pool"));
    }
    let correct = result
        .predictions
        .iter()
        .zip(&episode.queries)
        .filter(|(p, q)| **p == q.label)
        .count();
    let query_accuracy = if episode.queries.is_empty() {
        0.0
    } else {
        correct as f64 / episode.queries.len() as f64
    };

    let rounds = result.pseudo.log().iter().map(|a| a.iteration).max().unwrap_or(0);
    let mut neg = vec![(0u64, 0u64); rounds];
    let mut neg_per_class = vec![0u64; c];
    for a in result.pseudo.log() {
        let slot = &mut neg[a.iteration - 1];
        slot.1 += 1;
        if episode.unlabeled[a.sample].truth == Truth::Class(a.class) {
            slot.0 += 1;
        }
        neg_per_class[a.class] += 1;
    }

    let positives = extract_positives(&result.pseudo);
    let mut pos_per_class = vec![0u64; c];
    let mut pos_wrong = 0;
    for &(u, k) in &positives {
        pos_per_class[k] += 1;
        pos_wrong += is_wrong_positive(episode.unlabeled[u].truth, k) as u64;
    }
    let base_wrong = result
        .threshold_baseline
        .iter()
        .filter(|&&(u, k)| is_wrong_positive(episode.unlabeled[u].truth, k))
        .count() as u64;
    let pool = episode.unlabeled.len();

    Ok(EpisodeReport {
        episode_index: episode.index,
        query_accuracy,
        per_iteration_accuracy: result.snapshots.iter().map(|s| s.query_accuracy).collect(),
        negative_iterations: result.negative_iterations as u64,
        neg_error_per_iteration: neg.into_iter().map(|(w, n)| ErrorCount::new(w, n)).collect(),
        pos_error: ErrorCount::new(pos_wrong, positives.len() as u64),
        pos_proportion: if pool == 0 { 0.0 } else { positives.len() as f64 / pool as f64 },
        threshold_baseline_error: ErrorCount::new(base_wrong, result.threshold_baseline.len() as u64),
        neg_per_class,
        pos_per_class,
        pool_size: pool as u64,
    })
}

/// Mean with a normal-approximation 95% half-width.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95_halfwidth: f64,
    pub n: u64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let constant = values.iter().all(|v| v.to_bits() == values[0].to_bits());
        let half = if n < 2 || constant {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            Z95 * var.sqrt() / (n as f64).sqrt()
        };
        Self {
            mean,
            ci95_halfwidth: half,
            n: n as u64,
        }
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.ci95_halfwidth
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.ci95_halfwidth
    }
}

/// Error counts pooled over episodes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PooledError {
    pub mean_wrong: f64,
    pub mean_assigned: f64,
    /// Total wrong over total assigned.
    pub pooled_rate: f64,
    /// Per-episode rates over episodes that assigned anything.
    pub per_episode_rate: Summary,
}

impl PooledError {
    fn of<'a>(counts: impl Iterator<Item = &'a ErrorCount>, episodes: usize) -> Self {
        let counts: Vec<&ErrorCount> = counts.collect();
        let wrong: u64 = counts.iter().map(|c| c.wrong).sum();
        let assigned: u64 = counts.iter().map(|c| c.assigned).sum();
        let rates: Vec<f64> = counts.iter().filter(|c| c.assigned > 0).map(|c| c.rate).collect();
        Self {
            mean_wrong: wrong as f64 / episodes as f64,
            mean_assigned: assigned as f64 / episodes as f64,
            pooled_rate: ErrorCount::new(wrong, assigned).rate,
            per_episode_rate: Summary::of(&rates),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Mean accuracy after each stage; runs with fewer stages contribute their
    /// final accuracy to the later positions.
    pub mean_per_iteration_accuracy: Vec<f64>,
    pub mean_negative_iterations: f64,
    pub neg_error_per_iteration: Vec<PooledError>,
    pub pos_error: PooledError,
    pub pos_proportion: Summary,
    pub threshold_baseline_error: PooledError,
    pub mean_neg_per_class: Vec<f64>,
    pub mean_pos_per_class: Vec<f64>,
    /// Denominator convention for the per-class counts and error rates.
    pub count_convention: String,
}

/// The resolved configuration echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub store: String,
    pub episode: EpisodeConfig,
    pub music: MusicConfig,
    pub resolved_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub mode: String,
    pub config: Option<ReportConfig>,
    pub episodes: u64,
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
    pub diagnostics: Diagnostics,
    pub episode_reports: Vec<EpisodeReport>,
}

impl RunReport {
    pub fn accuracy(&self) -> Summary {
        Summary {
            mean: self.mean_accuracy,
            ci95_halfwidth: self.ci95_halfwidth,
            n: self.episodes,
        }
    }

    /// `"xx.xx ± y.yy"` in percent.
    pub fn accuracy_line(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean_accuracy, 100.0 * self.ci95_halfwidth)
    }
}

fn mean_columns<'a>(rows: impl Iterator<Item = &'a Vec<u64>>, episodes: usize) -> Vec<f64> {
    let mut sums: Vec<f64> = Vec::new();
    for row in rows {
        if sums.len() < row.len() {
            sums.resize(row.len(), 0.0);
        }
        for (s, v) in sums.iter_mut().zip(row) {
            *s += *v as f64;
        }
    }
    sums.into_iter().map(|s| s / episodes as f64).collect()
}

/// Aggregates episode reports. The result does not depend on input order.
pub fn aggregate(reports: &[EpisodeReport]) -> Result<RunReport> {
    if reports.is_empty() {
        return Err(Error::contract("aggregate needs at least one episode report"));
    }
    let mut sorted = reports.to_vec();
    sorted.sort_by_key(|r| r.episode_index);
    let e = sorted.len();

    let acc = Summary::of(&sorted.iter().map(|r| r.query_accuracy).collect::<Vec<_>>());

    let stages = sorted.iter().map(|r| r.per_iteration_accuracy.len()).max().unwrap_or(0);
    let mean_per_iteration_accuracy = (0..stages)
        .map(|t| {
            sorted
                .iter()
                .map(|r| {
                    r.per_iteration_accuracy
                        .get(t)
                        .or(r.per_iteration_accuracy.last())
                        .copied()
                        .unwrap_or(r.query_accuracy)
                })
                .sum::<f64>()
                / e as f64
        })
        .collect();

    let rounds = sorted.iter().map(|r| r.neg_error_per_iteration.len()).max().unwrap_or(0);
    let empty = ErrorCount::default();
    let neg_error_per_iteration = (0..rounds)
        .map(|t| PooledError::of(sorted.iter().map(|r| r.neg_error_per_iteration.get(t).unwrap_or(&empty)), e))
        .collect();

    let diagnostics = Diagnostics {
        mean_per_iteration_accuracy,
        mean_negative_iterations: sorted.iter().map(|r| r.negative_iterations as f64).sum::<f64>() / e as f64,
        neg_error_per_iteration,
        pos_error: PooledError::of(sorted.iter().map(|r| &r.pos_error), e),
        pos_proportion: Summary::of(&sorted.iter().map(|r| r.pos_proportion).collect::<Vec<_>>()),
        threshold_baseline_error: PooledError::of(sorted.iter().map(|r| &r.threshold_baseline_error), e),
        mean_neg_per_class: mean_columns(sorted.iter().map(|r| &r.neg_per_class), e),
        mean_pos_per_class: mean_columns(sorted.iter().map(|r| &r.pos_per_class), e),
        count_convention: "error rates are wrong/assigned; per-class counts are labels assigned per episode".into(),
    };

    Ok(RunReport {
        format_version: REPORT_VERSION,
        mode: String::new(),
        config: None,
        episodes: e as u64,
        mean_accuracy: acc.mean,
        ci95_halfwidth: acc.ci95_halfwidth,
        diagnostics,
        episode_reports: sorted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Pretty-printed JSON of the whole [`RunReport`].
    Json,
    /// One row per episode; see [`TABLE_HEADER`].
    Table,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" | "report" => Ok(ReportFormat::Json),
            "csv" | "table" => Ok(ReportFormat::Table),
            other => Err(Error::contract(format!("unknown report format {other:?}"))),
        }
    }
}

/// Columns of the per-episode table. List-valued cells are `;`-separated.
pub const TABLE_HEADER: [&str; 14] = [
    "episode_index",
    "accuracy",
    "negative_iterations",
    "per_iteration_accuracy",
    "neg_wrong",
    "neg_assigned",
    "pos_wrong",
    "pos_assigned",
    "pos_proportion",
    "baseline_wrong",
    "baseline_assigned",
    "neg_per_class",
    "pos_per_class",
    "pool_size",
];

fn join<T: ToString>(values: impl Iterator<Item = T>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

fn split<T: FromStr>(cell: &str) -> Result<Vec<T>> {
    if cell.is_empty() {
        return Ok(Vec::new());
    }
    cell.split(';')
        .map(|v| v.parse().map_err(|_| Error::Format(format!("bad table cell {v:?}"))))
        .collect()
}

pub fn serialize_report(report: &RunReport, format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
            out.push(b'\n');
            Ok(out)
        }
        ReportFormat::Table => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::Format(e.to_string());
            w.write_record(TABLE_HEADER).map_err(csv_err)?;
            for r in &report.episode_reports {
                w.write_record([
                    r.episode_index.to_string(),
                    r.query_accuracy.to_string(),
                    r.negative_iterations.to_string(),
                    join(r.per_iteration_accuracy.iter()),
                    join(r.neg_error_per_iteration.iter().map(|c| c.wrong)),
                    join(r.neg_error_per_iteration.iter().map(|c| c.assigned)),
                    r.pos_error.wrong.to_string(),
                    r.pos_error.assigned.to_string(),
                    r.pos_proportion.to_string(),
                    r.threshold_baseline_error.wrong.to_string(),
                    r.threshold_baseline_error.assigned.to_string(),
                    join(r.neg_per_class.iter()),
                    join(r.pos_per_class.iter()),
                    r.pool_size.to_string(),
                ])
                .map_err(csv_err)?;
            }
            w.into_inner().map_err(|e| Error::Format(e.to_string()))
        }
    }
}

pub fn parse_report(bytes: &[u8]) -> Result<RunReport> {
    serde_json::from_slice(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Parses a table produced by [`serialize_report`] back into episode reports.
pub fn parse_table(bytes: &[u8]) -> Result<Vec<EpisodeReport>> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers = r.headers().map_err(|e| Error::Format(e.to_string()))?;
    if headers.iter().ne(TABLE_HEADER.iter().copied()) {
        return Err(Error::Format("unexpected table header".into()));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number {s:?}"))) };
    let int = |s: &str| -> Result<u64> { s.parse().map_err(|_| Error::Format(format!("bad integer {s:?}"))) };
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| Error::Format(e.to_string()))?;
        let neg_wrong: Vec<u64> = split(&row[4])?;
        let neg_assigned: Vec<u64> = split(&row[5])?;
        if neg_wrong.len() != neg_assigned.len() {
            return Err(Error::Format("neg_wrong / neg_assigned length mismatch".into()));
        }
        out.push(EpisodeReport {
            episode_index: int(&row[0])?,
            query_accuracy: num(&row[1])?,
            negative_iterations: int(&row[2])?,
            per_iteration_accuracy: split(&row[3])?,
            neg_error_per_iteration: neg_wrong
                .into_iter()
                .zip(neg_assigned)
                .map(|(w, n)| ErrorCount::new(w, n))
                .collect(),
            pos_error: ErrorCount::new(int(&row[6])?, int(&row[7])?),
            pos_proportion: num(&row[8])?,
            threshold_baseline_error: ErrorCount::new(int(&row[9])?, int(&row[10])?),
            neg_per_class: split(&row[11])?,
            pos_per_class: split(&row[12])?,
            pool_size: int(&row[13])?,
        });
    }
    Ok(out)
}

/// Samples, runs and scores one episode.
pub fn run_episode(store: &FeatureStore, episode_cfg: &EpisodeConfig, music: &MusicConfig, index: u64) -> Result<EpisodeReport> {
    let episode = sample_episode(store, episode_cfg, index)?;
    let normalized = NormalizedEpisode::new(&episode)?;
    let result = run_music_normalized(&normalized, music)?;
    score_episode(&result, &episode)
}

/// Runs `episode_cfg.episodes` episodes on `threads` workers (0 = rayon's
/// default) and aggregates them. Output is independent of `threads`.
pub fn run_benchmark(
    store: &FeatureStore,
    store_label: &str,
    episode_cfg: &EpisodeConfig,
    music: &MusicConfig,
    threads: usize,
) -> Result<RunReport> {
    episode_cfg.validate()?;
    music.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let reports: Vec<EpisodeReport> = pool.install(|| {
        (0..episode_cfg.episodes as u64)
            .into_par_iter()
            .map(|i| run_episode(store, episode_cfg, music, i))
            .collect::<Result<_>>()
    })?;
    let mut report = aggregate(&reports)?;
    report.mode = music.mode.as_str().to_string();
    report.config = Some(ReportConfig {
        store: store_label.to_string(),
        episode: episode_cfg.clone(),
        music: music.clone(),
        resolved_delta: music.resolved_delta(episode_cfg.ways),
    });
    Ok(report)
}
