//! Experiment orchestration: test set, shots, prompts, gateway, parsing,
//! probe comparator, evaluation and reports.

pub mod config;
pub mod oracle;

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{filter_unanimous, sample_balanced_test_set, CorpusError, RecordIndex, TestSet};
use crate::evalstat::{report_table, summarize, EvalError, EvalSummary, Outcome, OutcomeStatus, SummaryKey};
use crate::gateway::{Backend, Gateway, GatewayError, ResponseCache};
use crate::probe::{predict, train_probe, ProbeError};
use crate::prompt::{render_image_part, user_prompt, PromptError};
use crate::reply::{parse_reply, ModelReply};
use crate::seed::derive_seed;
use crate::shots::{interleave, select_shots, ShotConfig, ShotSet, Strategy};

pub use config::{validate_config, validate_config_with, Experiment, ExperimentConfig, GridEntry, Overrides};
pub use oracle::MajorityShotOracle;

pub const RUN_LOG: &str = "run.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TESTSET_FILE: &str = "testset.json";
pub const SHOTS_FILE: &str = "shots.jsonl";

pub const VLM_SYSTEM: &str = "vlm";
pub const PROBE_SYSTEM: &str = "probe";

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("invalid config:\n{}", config::format_problems(.0))]
    Validation(Vec<String>),
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("leakage in entry for {tile}: {reason}")]
    Leakage { tile: String, reason: String },
    #[error("run log {path} line {line}: {reason}")]
    MalformedLog { path: String, line: usize, reason: String },
    #[error("run log was written for config {found}, expected {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("worker pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePrediction {
    pub label: String,
    pub correct: bool,
}

/// One (test tile, strategy, k) item of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemEntry {
    pub tile: String,
    pub truth: String,
    pub strategy: Strategy,
    pub k: usize,
    pub shots: Option<ShotSet>,
    pub request_hash: Option<String>,
    pub reply: Option<String>,
    pub parsed: Option<ModelReply>,
    pub status: OutcomeStatus,
    pub correct: bool,
    pub probe: Option<ProbePrediction>,
    pub error: Option<String>,
}

impl ItemEntry {
    pub fn outcome(&self) -> Outcome {
        Outcome::new(
            self.tile.clone(),
            self.truth.clone(),
            self.parsed.as_ref().and_then(|p| p.label.clone()),
            self.status,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LogLine {
    Header { config_hash: String, config: Value },
    Item(Box<ItemEntry>),
    Summary { summaries: Vec<EvalSummary> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config_hash: String,
    pub test_set: TestSet,
    pub entries: Vec<ItemEntry>,
    pub summaries: Vec<EvalSummary>,
    /// Entries that passed the leakage audit (all of them, or the run
    /// aborts).
    pub audited: usize,
}

/// Gateway for `exp` with its reply cache attached, and the built-in
/// majority-of-shots oracle when the backend is `oracle`.
pub fn build_gateway(exp: &Experiment) -> Result<Gateway, RunnerError> {
    let cache = ResponseCache::open(exp.cache_dir()).map_err(GatewayError::from)?;
    let mut gw = Gateway::new(exp.config.gateway.clone())?.with_cache(cache);
    if exp.config.gateway.backend == Backend::Oracle {
        gw = gw.with_oracle(Arc::new(MajorityShotOracle::new(
            Arc::new(exp.store.clone()),
            exp.vocab.clone(),
        )));
    }
    Ok(gw)
}

fn draw_test_set(exp: &Experiment) -> Result<TestSet, RunnerError> {
    let candidates = if exp.config.unanimous_only {
        filter_unanimous(&exp.records)?
    } else {
        exp.records.clone()
    };
    Ok(sample_balanced_test_set(
        &candidates,
        exp.dataset,
        exp.config.n,
        exp.config.seed,
        exp.config.label_subset.as_deref(),
    )?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), RunnerError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Draws the test set and writes it to `testset.json` under `out`.
pub fn write_test_set(exp: &Experiment, out: &Path) -> Result<TestSet, RunnerError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let test_set = draw_test_set(exp)?;
    write_json(&out.join(TESTSET_FILE), &test_set)?;
    Ok(test_set)
}

/// Selects shots for every (cell, test tile) and writes them as JSONL.
/// Items whose selection fails are logged and skipped.
pub fn write_shot_sets(exp: &Experiment, out: &Path) -> Result<usize, RunnerError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let test_set = draw_test_set(exp)?;
    let index = RecordIndex::new(exp.records.clone());
    let path = out.join(SHOTS_FILE);
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    let mut written = 0;
    for &(strategy, k) in &exp.cells {
        let cfg = shot_config(exp, strategy, k);
        for tile in &test_set.tile_ids {
            match select_shots(&cfg, &exp.store, &index, tile, &exp.vocab) {
                Ok(set) => {
                    serde_json::to_writer(&mut w, &set).expect("serializable");
                    w.write_all(b"\n").map_err(io_err(&path))?;
                    written += 1;
                }
                Err(e) => log::warn!("{tile} {strategy} k={k}: {e}"),
            }
        }
    }
    w.flush().map_err(io_err(&path))?;
    Ok(written)
}

fn shot_config(exp: &Experiment, strategy: Strategy, k: usize) -> ShotConfig {
    ShotConfig {
        strategy,
        k,
        seed: exp.config.seed,
        exclude_same_patient: exp.config.exclude_same_patient,
    }
}

/// Trains the linear probe on every non-test tile and predicts each test
/// tile. Returns label keys by tile id.
fn probe_predictions(
    exp: &Experiment,
    index: &RecordIndex,
    test_set: &TestSet,
) -> Result<HashMap<String, String>, RunnerError> {
    let test: HashSet<&str> = test_set.tile_ids.iter().map(String::as_str).collect();
    let as_f64 = |id: &str| -> Vec<f64> {
        exp.store
            .vector(id)
            .expect("validated: tiles are in the store")
            .iter()
            .map(|&v| f64::from(v))
            .collect()
    };
    let mut x = Vec::new();
    let mut y = Vec::new();
    for r in index.records() {
        if test.contains(r.tile_id.as_str()) {
            continue;
        }
        if let Some(i) = exp.vocab.index_of(&r.label) {
            x.push(as_f64(&r.tile_id));
            y.push(i);
        }
    }
    let labels: Vec<String> = exp.vocab.keys().map(str::to_string).collect();
    let model = train_probe(&x, &y, &labels, &exp.probe_train())?;
    let mut out = HashMap::new();
    for tile in &test_set.tile_ids {
        let (i, _) = predict(&model, &as_f64(tile))?;
        out.insert(tile.clone(), labels[i].clone());
    }
    Ok(out)
}

fn process_item(
    exp: &Experiment,
    index: &RecordIndex,
    gateway: &Gateway,
    (strategy, k): (Strategy, usize),
    tile: &str,
    probe: Option<&HashMap<String, String>>,
) -> ItemEntry {
    let truth = index.get(tile).map(|r| r.label.clone()).unwrap_or_default();
    let mut entry = ItemEntry {
        tile: tile.to_string(),
        probe: probe.and_then(|p| p.get(tile)).map(|label| ProbePrediction {
            correct: *label == truth,
            label: label.clone(),
        }),
        truth,
        strategy,
        k,
        shots: None,
        request_hash: None,
        reply: None,
        parsed: None,
        status: OutcomeStatus::Failed,
        correct: false,
        error: None,
    };

    let shots = match select_shots(&shot_config(exp, strategy, k), &exp.store, index, tile, &exp.vocab) {
        Ok(s) => s,
        Err(e) => {
            entry.error = Some(format!("shot selection: {e}"));
            return entry;
        }
    };
    let interleaved = interleave(&shots, &exp.vocab);
    entry.shots = Some(shots);
    let interleaved = match interleaved {
        Ok(i) => i,
        Err(e) => {
            entry.error = Some(format!("shot order: {e}"));
            return entry;
        }
    };
    let bundle = user_prompt(&exp.vocab, &interleaved, tile, exp.config.prompt_variant, |id| {
        let rec = index.get(id).ok_or_else(|| PromptError::UnknownTile(id.to_string()))?;
        render_image_part(&rec.image_path)
    });
    let bundle = match bundle {
        Ok(b) => b,
        Err(e) => {
            entry.error = Some(format!("prompt: {e}"));
            return entry;
        }
    };
    entry.request_hash = Some(gateway.request_hash(&bundle, 0));
    let raw = match gateway.complete(&bundle, 0) {
        Ok(r) => r,
        Err(e) => {
            entry.error = Some(format!("gateway: {e}"));
            return entry;
        }
    };
    log::debug!(
        "{tile} {strategy} k={k}: {} after {} attempt(s), {} ms",
        raw.backend_used,
        raw.attempt_count,
        raw.latency_ms
    );
    let parsed = parse_reply(&raw.text, &exp.vocab);
    entry.status = parsed.status.into();
    entry.reply = Some(raw.text);
    entry.parsed = Some(parsed);
    entry.correct = entry.outcome().correct();
    entry
}

/// Checks that an entry's shots exclude the test tile, tiles outside the
/// shot pool, and (when configured) tiles of the same patient.
pub fn audit_entry(entry: &ItemEntry, index: &RecordIndex, exclude_same_patient: bool) -> Result<(), RunnerError> {
    let Some(shots) = &entry.shots else {
        return Ok(());
    };
    let leak = |reason: String| RunnerError::Leakage {
        tile: entry.tile.clone(),
        reason,
    };
    if shots.test_tile_id != entry.tile {
        return Err(leak(format!("shot set belongs to {}", shots.test_tile_id)));
    }
    let patient = index.get(&entry.tile).and_then(|r| r.patient_id.as_deref());
    for id in shots.all_ids() {
        if id == entry.tile {
            return Err(leak("test tile among its own shots".into()));
        }
        let rec = index
            .get(id)
            .ok_or_else(|| leak(format!("shot {id} is outside the shot pool")))?;
        if exclude_same_patient && patient.is_some() && rec.patient_id.as_deref() == patient {
            return Err(leak(format!("shot {id} shares the test tile's patient")));
        }
    }
    Ok(())
}

fn bootstrap_seed(master: u64, system: &str, strategy: Strategy, k: usize) -> u64 {
    derive_seed(master, &["bootstrap", system, strategy.as_str(), &k.to_string()])
}

/// One summary per grid cell, plus the probe row when probe predictions
/// are present.
pub fn summarize_entries(exp: &Experiment, entries: &[ItemEntry]) -> Result<Vec<EvalSummary>, RunnerError> {
    let iters = exp.config.bootstrap_iters;
    let seed = exp.config.seed;
    let mut out = Vec::new();
    for &(strategy, k) in &exp.cells {
        let outcomes: Vec<Outcome> = entries
            .iter()
            .filter(|e| e.strategy == strategy && e.k == k)
            .map(ItemEntry::outcome)
            .collect();
        if outcomes.is_empty() {
            continue;
        }
        let key = SummaryKey {
            dataset: exp.dataset,
            system: VLM_SYSTEM.into(),
            strategy,
            k,
        };
        out.push(summarize(key, &outcomes, &exp.vocab, iters, bootstrap_seed(seed, VLM_SYSTEM, strategy, k))?);
    }

    let mut seen = HashSet::new();
    let probe: Vec<Outcome> = entries
        .iter()
        .filter_map(|e| {
            let p = e.probe.as_ref()?;
            seen.insert(e.tile.as_str()).then(|| {
                Outcome::new(e.tile.clone(), e.truth.clone(), Some(p.label.clone()), OutcomeStatus::Ok)
            })
        })
        .collect();
    if !probe.is_empty() {
        let key = SummaryKey {
            dataset: exp.dataset,
            system: PROBE_SYSTEM.into(),
            strategy: Strategy::Zero,
            k: 0,
        };
        out.push(summarize(key, &probe, &exp.vocab, iters, bootstrap_seed(seed, PROBE_SYSTEM, Strategy::Zero, 0))?);
    }
    Ok(out)
}

struct LogWriter {
    path: PathBuf,
    w: BufWriter<File>,
}

impl LogWriter {
    fn create(path: PathBuf) -> Result<Self, RunnerError> {
        let f = File::create(&path).map_err(io_err(&path))?;
        Ok(LogWriter {
            w: BufWriter::new(f),
            path,
        })
    }

    fn line(&mut self, line: &LogLine) -> Result<(), RunnerError> {
        serde_json::to_writer(&mut self.w, line).expect("serializable");
        self.w.write_all(b"\n").map_err(io_err(&self.path))
    }

    fn flush(&mut self) -> Result<(), RunnerError> {
        self.w.flush().map_err(io_err(&self.path))
    }
}

/// Runs the full grid. Item failures are recorded in their entries; only
/// I/O, evaluation and leakage problems abort.
pub fn run_experiment(exp: &Experiment, gateway: &Gateway) -> Result<RunRecord, RunnerError> {
    let out = exp.out_dir();
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let index = RecordIndex::new(exp.records.clone());
    let test_set = write_test_set(exp, out)?;
    let probe = if exp.config.probe {
        Some(probe_predictions(exp, &index, &test_set)?)
    } else {
        None
    };

    let items: Vec<((Strategy, usize), &str)> = exp
        .cells
        .iter()
        .flat_map(|&cell| test_set.tile_ids.iter().map(move |t| (cell, t.as_str())))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(exp.config.parallelism)
        .build()
        .map_err(|e| RunnerError::Pool(e.to_string()))?;

    let mut log = LogWriter::create(out.join(RUN_LOG))?;
    log.line(&LogLine::Header {
        config_hash: exp.config_hash.clone(),
        config: exp.semantic.clone(),
    })?;
    log.flush()?;

    let mut entries = Vec::with_capacity(items.len());
    let chunk_len = exp.config.parallelism * 4;
    for (i, chunk) in items.chunks(chunk_len).enumerate() {
        let done: Vec<ItemEntry> = pool.install(|| {
            chunk
                .par_iter()
                .map(|&(cell, tile)| process_item(exp, &index, gateway, cell, tile, probe.as_ref()))
                .collect()
        });
        for entry in done {
            audit_entry(&entry, &index, exp.config.exclude_same_patient)?;
            if let Some(err) = &entry.error {
                log::warn!("{} {} k={}: {err}", entry.tile, entry.strategy, entry.k);
            }
            log.line(&LogLine::Item(Box::new(entry.clone())))?;
            entries.push(entry);
        }
        log.flush()?;
        log::info!("{} / {} items", (i * chunk_len + chunk.len()).min(items.len()), items.len());
    }

    let summaries = summarize_entries(exp, &entries)?;
    log.line(&LogLine::Summary {
        summaries: summaries.clone(),
    })?;
    log.flush()?;
    write_json(&out.join(SUMMARY_FILE), &summaries)?;
    report_table(&summaries, out)?;

    Ok(RunRecord {
        config_hash: exp.config_hash.clone(),
        test_set,
        audited: entries.len(),
        entries,
        summaries,
    })
}

/// Reads the item entries of a run log, checking it belongs to `exp`.
pub fn read_run_log(exp: &Experiment, path: &Path) -> Result<Vec<ItemEntry>, RunnerError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogLine = serde_json::from_str(&line).map_err(|e| RunnerError::MalformedLog {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        match parsed {
            LogLine::Header { config_hash, .. } if config_hash != exp.config_hash => {
                return Err(RunnerError::ConfigMismatch {
                    expected: exp.config_hash.clone(),
                    found: config_hash,
                })
            }
            LogLine::Item(e) => entries.push(*e),
            _ => {}
        }
    }
    Ok(entries)
}

/// Recomputes summaries from a run log and writes `summary.json`.
pub fn evaluate_log(exp: &Experiment, log_path: &Path, out: &Path) -> Result<Vec<EvalSummary>, RunnerError> {
    let entries = read_run_log(exp, log_path)?;
    let index = RecordIndex::new(exp.records.clone());
    for e in &entries {
        audit_entry(e, &index, exp.config.exclude_same_patient)?;
    }
    let summaries = summarize_entries(exp, &entries)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write_json(&out.join(SUMMARY_FILE), &summaries)?;
    Ok(summaries)
}

/// Renders `report.csv` and `report.md` from a `summary.json`.
pub fn report_from_summary(summary_path: &Path, out: &Path) -> Result<Vec<EvalSummary>, RunnerError> {
    let bytes = std::fs::read(summary_path).map_err(io_err(summary_path))?;
    let summaries: Vec<EvalSummary> = serde_json::from_slice(&bytes).map_err(|e| RunnerError::MalformedLog {
        path: summary_path.display().to_string(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    report_table(&summaries, out)?;
    Ok(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DatasetId, TileRecord};
    use std::collections::BTreeMap;

    fn rec(id: &str, label: &str, patient: Option<&str>) -> TileRecord {
        TileRecord {
            tile_id: id.into(),
            dataset: DatasetId::Mhist,
            label: label.into(),
            patient_id: patient.map(String::from),
            consensus_votes: None,
            image_path: String::new(),
        }
    }

    fn entry(tile: &str, shots: &[(&str, &[&str])]) -> ItemEntry {
        let per_label: BTreeMap<String, Vec<String>> = shots
            .iter()
            .map(|(l, ids)| (l.to_string(), ids.iter().map(|s| s.to_string()).collect()))
            .collect();
        ItemEntry {
            tile: tile.into(),
            truth: "HP".into(),
            strategy: Strategy::Knn,
            k: 1,
            shots: Some(ShotSet {
                test_tile_id: tile.into(),
                strategy: Strategy::Knn,
                k: 1,
                per_label,
            }),
            request_hash: None,
            reply: None,
            parsed: None,
            status: OutcomeStatus::Failed,
            correct: false,
            probe: None,
            error: None,
        }
    }

    #[test]
    fn audit_catches_leaks() {
        let index = RecordIndex::new(vec![
            rec("t", "HP", Some("p1")),
            rec("a", "HP", Some("p1")),
            rec("b", "SSA", Some("p2")),
        ]);
        assert!(audit_entry(&entry("t", &[("SSA", &["b"])]), &index, true).is_ok());
        assert!(audit_entry(&entry("t", &[("HP", &["t"])]), &index, false).is_err());
        assert!(audit_entry(&entry("t", &[("HP", &["a"])]), &index, true).is_err());
        assert!(audit_entry(&entry("t", &[("HP", &["a"])]), &index, false).is_ok());
        assert!(audit_entry(&entry("t", &[("HP", &["zz"])]), &index, false).is_err());
    }

    #[test]
    fn log_line_tags() {
        let line = LogLine::Header {
            config_hash: "h".into(),
            config: serde_json::json!({}),
        };
        let s = serde_json::to_string(&line).unwrap();
        assert!(s.starts_with(r#"{"type":"header""#));
        let item = serde_json::to_string(&LogLine::Item(Box::new(entry("t", &[])))).unwrap();
        assert!(item.starts_with(r#"{"type":"item","tile":"t""#));
        let back: LogLine = serde_json::from_str(&item).unwrap();
        assert_eq!(back, LogLine::Item(Box::new(entry("t", &[]))));
    }
}
