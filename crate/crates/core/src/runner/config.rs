//! Experiment configuration: parsing, cross-reference validation, hashing.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::RunnerError;
use crate::corpus::{filter_unanimous, load_manifest, DatasetId, LabelVocabulary, TileRecord};
use crate::embed_store::{load_store, EmbeddingStore};
use crate::gateway::wire::sorted;
use crate::gateway::{Backend, GatewayConfig};
use crate::probe::TrainConfig;
use crate::prompt::PromptVariant;
use crate::shots::Strategy;

fn default_true() -> bool {
    true
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_parallelism() -> usize {
    4
}

fn default_bootstrap_iters() -> usize {
    100_000
}

/// One strategy with the shot counts to run it at. `zero` takes no `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub strategy: Strategy,
    #[serde(default)]
    pub k: Vec<usize>,
}

/// The on-disk JSON config. Relative paths resolve against the config
/// file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: String,
    #[serde(default)]
    pub label_subset: Option<Vec<String>>,
    pub n: usize,
    pub seed: u64,
    pub manifest: PathBuf,
    pub store: PathBuf,
    pub grid: Vec<GridEntry>,
    #[serde(default = "default_true")]
    pub exclude_same_patient: bool,
    /// Draw test tiles only from records whose annotators agreed
    /// unanimously.
    #[serde(default)]
    pub unanimous_only: bool,
    /// Tiles used while developing prompts; never drawn as test tiles or
    /// shots.
    #[serde(default)]
    pub holdout_ids: Vec<String>,
    #[serde(default)]
    pub prompt_variant: PromptVariant,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub probe: bool,
    #[serde(default)]
    pub probe_train: Option<TrainConfig>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Reply cache location; `<out_dir>/cache` when unset.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_bootstrap_iters")]
    pub bootstrap_iters: usize,
}

/// Command-line overrides applied before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub backend: Option<Backend>,
    pub out_dir: Option<PathBuf>,
}

/// A config whose cross-references all resolved, with everything loaded.
#[derive(Debug, Clone)]
pub struct Experiment {
    /// Normalized: absolute paths, grid expanded in canonical order.
    pub config: ExperimentConfig,
    pub dataset: DatasetId,
    pub vocab: LabelVocabulary,
    /// Records of the configured dataset, holdout tiles removed.
    pub records: Vec<TileRecord>,
    pub store: EmbeddingStore,
    /// `(strategy, k)` cells in run order.
    pub cells: Vec<(Strategy, usize)>,
    /// Every result-affecting setting; logged in the run header.
    pub semantic: Value,
    pub config_hash: String,
}

impl Experiment {
    pub fn out_dir(&self) -> &Path {
        &self.config.out_dir
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.config
            .cache_dir
            .clone()
            .unwrap_or_else(|| self.config.out_dir.join("cache"))
    }

    pub fn probe_train(&self) -> TrainConfig {
        self.config.probe_train.clone().unwrap_or_else(|| TrainConfig {
            seed: crate::seed::derive_seed(self.config.seed, &["probe"]),
            ..TrainConfig::default()
        })
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn file_sha256(path: &Path) -> Result<String, std::io::Error> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Expands the grid into sorted, de-duplicated cells, reporting bad entries.
fn expand_grid(grid: &[GridEntry], problems: &mut Vec<String>) -> Vec<(Strategy, usize)> {
    if grid.is_empty() {
        problems.push("grid is empty".into());
    }
    let mut cells = BTreeSet::new();
    for entry in grid {
        match entry.strategy {
            Strategy::Zero => {
                if entry.k.iter().any(|&k| k != 0) {
                    problems.push("zero strategy takes no k values".into());
                }
                cells.insert((0usize, Strategy::Zero));
            }
            s => {
                if entry.k.is_empty() {
                    problems.push(format!("{s} strategy lists no k values"));
                }
                for &k in &entry.k {
                    if k == 0 {
                        problems.push(format!("{s} strategy needs k >= 1"));
                    } else {
                        cells.insert((k, s));
                    }
                }
            }
        }
    }
    // Zero first, then by strategy, then k.
    let mut out: Vec<(Strategy, usize)> = cells.into_iter().map(|(k, s)| (s, k)).collect();
    out.sort_by_key(|&(s, k)| (s != Strategy::Zero, s, k));
    out
}

/// The fields that change results, plus digests of the input files.
fn semantic_value(cfg: &ExperimentConfig, cells: &[(Strategy, usize)], manifest_sha: &str, store_sha: &str) -> Value {
    let mut holdout = cfg.holdout_ids.clone();
    holdout.sort();
    holdout.dedup();
    json!({
        "dataset": cfg.dataset,
        "label_subset": cfg.label_subset,
        "n": cfg.n,
        "seed": cfg.seed,
        "cells": cells.iter().map(|(s, k)| json!([s.as_str(), k])).collect::<Vec<_>>(),
        "exclude_same_patient": cfg.exclude_same_patient,
        "unanimous_only": cfg.unanimous_only,
        "holdout_ids": holdout,
        "prompt_variant": cfg.prompt_variant,
        "model_name": cfg.gateway.model_name,
        "temperature": cfg.gateway.temperature,
        "image_detail": cfg.gateway.image_detail,
        "probe": cfg.probe,
        "probe_train": cfg.probe_train,
        "bootstrap_iters": cfg.bootstrap_iters,
        "manifest_sha256": manifest_sha,
        "store_sha256": store_sha,
    })
}

pub fn config_hash(semantic: &Value) -> String {
    hex::encode(Sha256::digest(sorted(semantic).to_string().as_bytes()))
}

fn count_by_label<'a>(records: impl Iterator<Item = &'a TileRecord>, label: &str) -> usize {
    records.filter(|r| r.label == label).count()
}

/// Loads and checks `path`, reporting every problem found at once.
pub fn validate_config(path: impl AsRef<Path>) -> Result<Experiment, RunnerError> {
    validate_config_with(path, &Overrides::default())
}

pub fn validate_config_with(path: impl AsRef<Path>, overrides: &Overrides) -> Result<Experiment, RunnerError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| RunnerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| RunnerError::Validation(vec![format!("{}: {e}", path.display())]))?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let base = std::path::absolute(&base).unwrap_or(base);
    if let Some(b) = overrides.backend {
        cfg.gateway.backend = b;
    }
    if let Some(o) = &overrides.out_dir {
        cfg.out_dir = std::path::absolute(o).unwrap_or_else(|_| o.clone());
    }
    cfg.manifest = resolve(&base, &cfg.manifest);
    cfg.store = resolve(&base, &cfg.store);
    cfg.out_dir = resolve(&base, &cfg.out_dir);
    cfg.cache_dir = cfg.cache_dir.map(|c| resolve(&base, &c));
    validate_loaded(cfg)
}

/// Validation for an already-parsed config with absolute paths.
pub fn validate_loaded(mut cfg: ExperimentConfig) -> Result<Experiment, RunnerError> {
    let mut problems = Vec::new();

    let dataset = match cfg.dataset.parse::<DatasetId>() {
        Ok(d) => Some(d),
        Err(_) => {
            problems.push(format!("unknown dataset id {:?}", cfg.dataset));
            None
        }
    };
    let vocab = dataset.and_then(|d| match LabelVocabulary::for_dataset(d).restricted(cfg.label_subset.as_deref()) {
        Ok(v) => Some(v),
        Err(e) => {
            problems.push(e.to_string());
            None
        }
    });
    if let Some(v) = &vocab {
        if cfg.n == 0 || v.is_empty() || !cfg.n.is_multiple_of(v.len()) {
            problems.push(format!("n = {} is not a positive multiple of {} labels", cfg.n, v.len()));
        }
    }
    if cfg.parallelism == 0 {
        problems.push("parallelism must be at least 1".into());
    }
    if cfg.bootstrap_iters == 0 {
        problems.push("bootstrap_iters must be positive".into());
    }
    problems.extend(cfg.gateway.problems());
    if cfg.gateway.backend == Backend::Live && std::env::var_os(&cfg.gateway.api_key_env_name).is_none() {
        problems.push(format!(
            "live backend needs an API key in environment variable {}",
            cfg.gateway.api_key_env_name
        ));
    }
    let cells = expand_grid(&cfg.grid, &mut problems);

    let manifest_sha = file_sha256(&cfg.manifest);
    let manifest_dir = cfg.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let records = match load_manifest(&cfg.manifest) {
        Ok(mut r) => {
            // Image paths are relative to the manifest.
            for rec in &mut r {
                rec.image_path = resolve(&manifest_dir, Path::new(&rec.image_path)).display().to_string();
            }
            Some(r)
        }
        Err(e) => {
            problems.push(format!("manifest {}: {e}", cfg.manifest.display()));
            None
        }
    };
    let store_sha = file_sha256(&cfg.store);
    let store = match load_store(&cfg.store) {
        Ok(s) => Some(s),
        Err(e) => {
            problems.push(format!("store {}: {e}", cfg.store.display()));
            None
        }
    };

    let mut pool = Vec::new();
    if let (Some(ds), Some(vocab), Some(records)) = (dataset, &vocab, &records) {
        let holdout: HashSet<&str> = cfg.holdout_ids.iter().map(String::as_str).collect();
        pool = records
            .iter()
            .filter(|r| r.dataset == ds && !holdout.contains(r.tile_id.as_str()))
            .cloned()
            .collect::<Vec<_>>();
        if pool.is_empty() {
            problems.push(format!("manifest has no {ds} records"));
        }

        let missing_images: Vec<&str> = pool
            .iter()
            .filter(|r| vocab.contains(&r.label) && !Path::new(&r.image_path).is_file())
            .map(|r| r.image_path.as_str())
            .collect();
        if !missing_images.is_empty() {
            problems.push(format!(
                "{} image files missing, e.g. {}",
                missing_images.len(),
                missing_images[0]
            ));
        }

        let needs_store = cfg.probe || cells.iter().any(|&(s, _)| s == Strategy::Knn);
        if let Some(store) = &store {
            if needs_store {
                let absent: Vec<&str> = pool
                    .iter()
                    .filter(|r| vocab.contains(&r.label) && !store.contains(&r.tile_id))
                    .map(|r| r.tile_id.as_str())
                    .collect();
                if !absent.is_empty() {
                    problems.push(format!(
                        "{} tiles missing from the embedding store, e.g. {}",
                        absent.len(),
                        absent[0]
                    ));
                }
            }
        }

        let test_pool: Vec<TileRecord> = if cfg.unanimous_only {
            match filter_unanimous(&pool) {
                Ok(p) => p,
                Err(e) => {
                    problems.push(e.to_string());
                    Vec::new()
                }
            }
        } else {
            pool.clone()
        };
        let per_label_test = if vocab.is_empty() { 0 } else { cfg.n / vocab.len() };
        let max_k = cells.iter().map(|&(_, k)| k).max().unwrap_or(0);
        for label in vocab.keys() {
            let test_avail = count_by_label(test_pool.iter(), label);
            if test_avail < per_label_test {
                problems.push(format!(
                    "label {label}: {test_avail} test candidates, {per_label_test} needed"
                ));
            }
            // A test tile never serves as its own shot.
            let shot_avail = count_by_label(pool.iter(), label);
            if max_k > 0 && shot_avail < max_k + 1 {
                problems.push(format!(
                    "label {label}: {shot_avail} shot candidates, k = {max_k} needs {}",
                    max_k + 1
                ));
            }
        }
    }

    if !problems.is_empty() {
        return Err(RunnerError::Validation(problems));
    }
    let (Some(dataset), Some(vocab), Some(store), Ok(manifest_sha), Ok(store_sha)) =
        (dataset, vocab, store, manifest_sha, store_sha)
    else {
        unreachable!("every missing input was reported as a problem")
    };

    cfg.grid = normalized_grid(&cells);
    cfg.dataset = dataset.to_string();
    cfg.holdout_ids.sort();
    cfg.holdout_ids.dedup();
    let semantic = semantic_value(&cfg, &cells, &manifest_sha, &store_sha);
    let config_hash = config_hash(&semantic);
    Ok(Experiment {
        config: cfg,
        dataset,
        vocab,
        records: pool,
        store,
        cells,
        semantic,
        config_hash,
    })
}

fn normalized_grid(cells: &[(Strategy, usize)]) -> Vec<GridEntry> {
    let mut out: Vec<GridEntry> = Vec::new();
    for &(s, k) in cells {
        match out.last_mut() {
            Some(e) if e.strategy == s => e.k.push(k),
            _ => out.push(GridEntry {
                strategy: s,
                k: if s == Strategy::Zero { vec![] } else { vec![k] },
            }),
        }
    }
    out
}

/// Human-readable list of validation problems.
pub fn format_problems(problems: &[String]) -> String {
    let mut s = String::new();
    for p in problems {
        let _ = writeln!(s, "  - {p}");
    }
    s
}
