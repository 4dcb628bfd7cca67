//! Accuracy, percentile-bootstrap confidence intervals, confusion matrices
//! and the grouped accuracy report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetId, LabelVocabulary};
use crate::reply::ReplyStatus;
use crate::seed::rng_for;
use crate::shots::Strategy;

pub const DEFAULT_BOOTSTRAP_ITERS: usize = 100_000;

/// Iterations per deterministic RNG substream. Chunks may run on any
/// thread; results do not depend on the thread count.
const BOOTSTRAP_CHUNK: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no outcomes to evaluate")]
    EmptyOutcomes,
    #[error("truth label {0:?} is not in the vocabulary")]
    UnknownTruthLabel(String),
    #[error("bootstrap needs at least one iteration")]
    ZeroIterations,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutcomeStatus {
    Ok,
    InvalidJson,
    UnknownAnswer,
    Refusal,
    ScoreOutOfRange,
    /// The item did not produce a prediction (transport or pipeline error).
    Failed,
}

impl From<ReplyStatus> for OutcomeStatus {
    fn from(s: ReplyStatus) -> Self {
        match s {
            ReplyStatus::Ok => OutcomeStatus::Ok,
            ReplyStatus::InvalidJson => OutcomeStatus::InvalidJson,
            ReplyStatus::UnknownAnswer => OutcomeStatus::UnknownAnswer,
            ReplyStatus::Refusal => OutcomeStatus::Refusal,
            ReplyStatus::ScoreOutOfRange => OutcomeStatus::ScoreOutOfRange,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub tile_id: String,
    pub truth: String,
    pub predicted: Option<String>,
    pub status: OutcomeStatus,
}

impl Outcome {
    pub fn new(
        tile_id: impl Into<String>,
        truth: impl Into<String>,
        predicted: Option<String>,
        status: OutcomeStatus,
    ) -> Self {
        Outcome {
            tile_id: tile_id.into(),
            truth: truth.into(),
            predicted,
            status,
        }
    }

    /// Non-OK statuses never count as correct, even with a label.
    pub fn correct(&self) -> bool {
        self.status == OutcomeStatus::Ok && self.predicted.as_deref() == Some(self.truth.as_str())
    }
}

pub fn accuracy(outcomes: &[Outcome]) -> Result<f64, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::EmptyOutcomes);
    }
    let correct = outcomes.iter().filter(|o| o.correct()).count();
    Ok(correct as f64 / outcomes.len() as f64)
}

/// 1-based nearest rank for percentile `per_mille / 10` of `n` values.
fn nearest_rank(n: usize, per_mille: usize) -> usize {
    (n * per_mille).div_ceil(1000).clamp(1, n)
}

/// Percentile bootstrap of accuracy: `iters` resamples of size n with
/// replacement; returns the 2.5th and 97.5th nearest-rank percentiles.
pub fn bootstrap_ci(outcomes: &[Outcome], iters: usize, seed: u64) -> Result<(f64, f64), EvalError> {
    let flags: Vec<bool> = outcomes.iter().map(Outcome::correct).collect();
    bootstrap_ci_flags(&flags, iters, seed)
}

pub fn bootstrap_ci_flags(correct: &[bool], iters: usize, seed: u64) -> Result<(f64, f64), EvalError> {
    let n = correct.len();
    if n == 0 {
        return Err(EvalError::EmptyOutcomes);
    }
    if iters == 0 {
        return Err(EvalError::ZeroIterations);
    }
    let chunks = iters.div_ceil(BOOTSTRAP_CHUNK);
    let mut counts: Vec<u32> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|chunk| {
            let len = BOOTSTRAP_CHUNK.min(iters - chunk * BOOTSTRAP_CHUNK);
            let mut rng = rng_for(seed, &["bootstrap", &chunk.to_string()]);
            (0..len)
                .map(|_| {
                    (0..n).filter(|_| correct[rng.random_range(0..n)]).count() as u32
                })
                .collect::<Vec<_>>()
        })
        .collect();
    counts.sort_unstable();
    let low = counts[nearest_rank(iters, 25) - 1];
    let high = counts[nearest_rank(iters, 975) - 1];
    Ok((f64::from(low) / n as f64, f64::from(high) / n as f64))
}

/// Rows are truth labels, columns predicted labels plus a final
/// `unparsed` column collecting every non-OK outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn unparsed_column(&self) -> usize {
        self.labels.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn truth_count(&self, row: usize) -> u64 {
        self.counts[row].iter().sum()
    }
}

pub fn confusion_matrix(outcomes: &[Outcome], vocab: &LabelVocabulary) -> Result<ConfusionMatrix, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::EmptyOutcomes);
    }
    let labels: Vec<String> = vocab.keys().map(String::from).collect();
    let mut counts = vec![vec![0u64; labels.len() + 1]; labels.len()];
    for o in outcomes {
        let row = vocab
            .index_of(&o.truth)
            .ok_or_else(|| EvalError::UnknownTruthLabel(o.truth.clone()))?;
        let col = match (&o.status, &o.predicted) {
            (OutcomeStatus::Ok, Some(p)) => vocab.index_of(p).unwrap_or(labels.len()),
            _ => labels.len(),
        };
        counts[row][col] += 1;
    }
    Ok(ConfusionMatrix { labels, counts })
}

/// Diagonal over truth count per label; labels without truth examples are
/// omitted.
pub fn per_label_recall(matrix: &ConfusionMatrix) -> BTreeMap<String, f64> {
    matrix
        .labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            let total = matrix.truth_count(i);
            (total > 0).then(|| (l.clone(), matrix.counts[i][i] as f64 / total as f64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SummaryKey {
    pub dataset: DatasetId,
    /// `vlm` or `probe`.
    pub system: String,
    pub strategy: Strategy,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    #[serde(flatten)]
    pub key: SummaryKey,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub per_label_recall: BTreeMap<String, f64>,
    pub confusion: ConfusionMatrix,
    pub status_counts: BTreeMap<OutcomeStatus, usize>,
    pub bootstrap_iters: usize,
    pub seed: u64,
}

pub fn summarize(
    key: SummaryKey,
    outcomes: &[Outcome],
    vocab: &LabelVocabulary,
    iters: usize,
    seed: u64,
) -> Result<EvalSummary, EvalError> {
    let acc = accuracy(outcomes)?;
    let (ci_low, ci_high) = bootstrap_ci(outcomes, iters, seed)?;
    let confusion = confusion_matrix(outcomes, vocab)?;
    let mut status_counts = BTreeMap::new();
    for o in outcomes {
        *status_counts.entry(o.status).or_insert(0) += 1;
    }
    Ok(EvalSummary {
        key,
        n: outcomes.len(),
        correct: outcomes.iter().filter(|o| o.correct()).count(),
        accuracy: acc,
        ci_low,
        ci_high,
        per_label_recall: per_label_recall(&confusion),
        confusion,
        status_counts,
        bootstrap_iters: iters,
        seed,
    })
}

pub fn format_cell(accuracy: f64, low: f64, high: f64) -> String {
    format!("{accuracy:.3} ({low:.3}\u{2013}{high:.3})")
}

fn column_name(k: usize) -> String {
    match k {
        0 => "Zero".into(),
        1 => "One".into(),
        3 => "Three".into(),
        5 => "Five".into(),
        10 => "Ten".into(),
        other => format!("k={other}"),
    }
}

fn system_rank(system: &str) -> (bool, &str) {
    (system != "vlm", system)
}

type RowKey<'a> = (DatasetId, (bool, &'a str), Strategy);

/// Groups summaries into rows of (dataset, system, strategy) with one
/// column per shot count. Missing combinations render as empty cells.
struct Table<'a> {
    ks: Vec<usize>,
    rows: BTreeMap<RowKey<'a>, BTreeMap<usize, &'a EvalSummary>>,
}

impl<'a> Table<'a> {
    fn new(summaries: &'a [EvalSummary]) -> Self {
        let mut ks: Vec<usize> = summaries.iter().map(|s| s.key.k).collect();
        ks.sort_unstable();
        ks.dedup();
        let mut rows: BTreeMap<RowKey<'a>, BTreeMap<usize, &'a EvalSummary>> = BTreeMap::new();
        for s in summaries {
            rows.entry((s.key.dataset, system_rank(&s.key.system), s.key.strategy))
                .or_default()
                .insert(s.key.k, s);
        }
        Table { ks, rows }
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["dataset".to_string(), "system".into(), "strategy".into()];
        h.extend(self.ks.iter().map(|&k| column_name(k)));
        h
    }

    fn lines(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|((ds, (_, system), strategy), cells)| {
                let mut line = vec![ds.to_string(), system.to_string(), strategy.to_string()];
                line.extend(self.ks.iter().map(|k| {
                    cells
                        .get(k)
                        .map(|s| format_cell(s.accuracy, s.ci_low, s.ci_high))
                        .unwrap_or_default()
                }));
                line
            })
            .collect()
    }
}

pub fn render_csv(summaries: &[EvalSummary]) -> Result<String, EvalError> {
    let table = Table::new(summaries);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(table.header())?;
    for line in table.lines() {
        w.write_record(line)?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn render_markdown(summaries: &[EvalSummary]) -> String {
    let table = Table::new(summaries);
    let header = table.header();
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}|", vec!["---"; header.len()].join("|"));
    for line in table.lines() {
        let _ = writeln!(out, "| {} |", line.join(" | "));
    }
    out
}

/// Writes `report.csv` and `report.md` into `dir`.
pub fn report_table(summaries: &[EvalSummary], dir: impl AsRef<Path>) -> Result<(), EvalError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.csv"), render_csv(summaries)?)?;
    std::fs::write(dir.join("report.md"), render_markdown(summaries))?;
    Ok(())
}
