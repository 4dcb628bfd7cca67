//! Few-shot example selection and rank-major interleaving.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{is_excluded, LabelVocabulary, RecordIndex};
use crate::embed_store::{nearest_per_label, EmbedError, EmbeddingStore};
use crate::seed::rng_for;

#[derive(Debug, thiserror::Error)]
pub enum ShotError {
    #[error("label {label}: {available} candidates available, {k} requested")]
    NotEnoughCandidates {
        label: String,
        available: usize,
        k: usize,
    },
    #[error("unknown tile {0:?}")]
    UnknownTile(String),
    #[error("invalid shot config: {0}")]
    InvalidConfig(String),
    #[error("ragged shot set: label {label} has {len} shots, expected {k}")]
    RaggedShotSet { label: String, len: usize, k: usize },
    #[error(transparent)]
    Embed(EmbedError),
}

impl From<EmbedError> for ShotError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::NotEnoughCandidates {
                label,
                available,
                k,
            } => ShotError::NotEnoughCandidates {
                label,
                available,
                k,
            },
            EmbedError::UnknownTile(id) => ShotError::UnknownTile(id),
            other => ShotError::Embed(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Zero,
    Random,
    Knn,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Zero => "zero",
            Strategy::Random => "random",
            Strategy::Knn => "knn",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = ShotError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "zero" => Ok(Strategy::Zero),
            "random" => Ok(Strategy::Random),
            "knn" => Ok(Strategy::Knn),
            _ => Err(ShotError::InvalidConfig(format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotConfig {
    pub strategy: Strategy,
    /// Shots per label; 0 exactly when the strategy is zero-shot.
    pub k: usize,
    /// Used by the random strategy only.
    pub seed: u64,
    pub exclude_same_patient: bool,
}

impl ShotConfig {
    pub fn validate(&self) -> Result<(), ShotError> {
        if (self.strategy == Strategy::Zero) != (self.k == 0) {
            return Err(ShotError::InvalidConfig(format!(
                "strategy {} with k={}: k must be 0 exactly for zero-shot",
                self.strategy, self.k
            )));
        }
        Ok(())
    }
}

/// Ordered shots for one test tile. Each label's list is rank-ordered:
/// index 0 is the most similar (kNN) or first drawn (random).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSet {
    #[serde(rename = "test")]
    pub test_tile_id: String,
    pub strategy: Strategy,
    pub k: usize,
    #[serde(rename = "shots")]
    pub per_label: BTreeMap<String, Vec<String>>,
}

impl ShotSet {
    pub fn all_ids(&self) -> impl Iterator<Item = &str> {
        self.per_label.values().flatten().map(String::as_str)
    }
}

pub fn select_shots(
    config: &ShotConfig,
    store: &EmbeddingStore,
    records: &RecordIndex,
    test_tile_id: &str,
    vocab: &LabelVocabulary,
) -> Result<ShotSet, ShotError> {
    config.validate()?;
    let test = records
        .get(test_tile_id)
        .ok_or_else(|| ShotError::UnknownTile(test_tile_id.to_string()))?;

    let mut per_label = BTreeMap::new();
    for label in vocab.keys() {
        let ids = match config.strategy {
            Strategy::Zero => Vec::new(),
            Strategy::Knn => nearest_per_label(
                store,
                records,
                test_tile_id,
                label,
                config.k,
                config.exclude_same_patient,
            )?
            .into_iter()
            .map(|n| n.tile_id)
            .collect(),
            Strategy::Random => {
                let eligible: Vec<&str> = records
                    .with_label(label)
                    .filter(|c| !is_excluded(test, c, config.exclude_same_patient))
                    .map(|c| c.tile_id.as_str())
                    .collect();
                if eligible.len() < config.k {
                    return Err(ShotError::NotEnoughCandidates {
                        label: label.to_string(),
                        available: eligible.len(),
                        k: config.k,
                    });
                }
                let mut rng = rng_for(config.seed, &["random-shots", test_tile_id, label]);
                rand::seq::index::sample(&mut rng, eligible.len(), config.k)
                    .into_iter()
                    .map(|i| eligible[i].to_string())
                    .collect()
            }
        };
        per_label.insert(label.to_string(), ids);
    }
    Ok(ShotSet {
        test_tile_id: test_tile_id.to_string(),
        strategy: config.strategy,
        k: config.k,
        per_label,
    })
}

/// Rank-major cycling: round `r` shows the rank-`r` shot of every label in
/// vocabulary order. Returns `(tile_id, label_key)` pairs.
pub fn interleave(
    shots: &ShotSet,
    vocab: &LabelVocabulary,
) -> Result<Vec<(String, String)>, ShotError> {
    let empty = Vec::new();
    let mut lists = Vec::with_capacity(vocab.len());
    for label in vocab.keys() {
        let list = shots.per_label.get(label).unwrap_or(&empty);
        if list.len() != shots.k {
            return Err(ShotError::RaggedShotSet {
                label: label.to_string(),
                len: list.len(),
                k: shots.k,
            });
        }
        lists.push((label, list));
    }
    let mut out = Vec::with_capacity(shots.k * vocab.len());
    for rank in 0..shots.k {
        for (label, list) in &lists {
            out.push((list[rank].clone(), (*label).to_string()));
        }
    }
    Ok(out)
}
