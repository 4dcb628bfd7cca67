//! Offline reply oracle for end-to-end runs without a model.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::corpus::LabelVocabulary;
use crate::embed_store::EmbeddingStore;
use crate::gateway::ReplyOracle;
use crate::reply::format_reply;

/// Answers with the most frequent shot label. Ties go to the tied label
/// whose closest shot is most similar to the target (then lowest tile id);
/// with no shots the first vocabulary label is answered.
#[derive(Debug, Clone)]
pub struct MajorityShotOracle {
    store: Arc<EmbeddingStore>,
    vocab: LabelVocabulary,
}

impl MajorityShotOracle {
    pub fn new(store: Arc<EmbeddingStore>, vocab: LabelVocabulary) -> Self {
        MajorityShotOracle { store, vocab }
    }

    /// The label key the oracle picks, if the target is known.
    pub fn decide(&self, shots: &[(String, String)], target_tile_id: &str) -> Option<String> {
        let target = self.store.index_of(target_tile_id)?;
        if shots.is_empty() {
            return self.vocab.keys().next().map(str::to_string);
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for (_, label) in shots {
            *counts.entry(label.as_str()).or_default() += 1;
        }
        let top = counts.values().copied().max()?;
        let tied: Vec<&str> = counts.iter().filter(|(_, &c)| c == top).map(|(l, _)| *l).collect();
        if tied.len() == 1 {
            return Some(tied[0].to_string());
        }
        let mut best: Option<(f64, &str, &str)> = None;
        for (tile, label) in shots {
            if !tied.contains(&label.as_str()) {
                continue;
            }
            let row = self.store.index_of(tile)?;
            let sim = self.store.similarity(target, row);
            let better = match best {
                None => true,
                Some((s, t, _)) => match sim.partial_cmp(&s).unwrap_or(Ordering::Equal) {
                    Ordering::Greater => true,
                    Ordering::Equal => tile.as_str() < t,
                    Ordering::Less => false,
                },
            };
            if better {
                best = Some((sim, tile, label));
            }
        }
        best.map(|(_, _, l)| l.to_string())
    }
}

impl ReplyOracle for MajorityShotOracle {
    fn reply(&self, shots: &[(String, String)], target_tile_id: &str) -> Option<String> {
        let label = self.decide(shots, target_tile_id)?;
        let answer = self.vocab.answer_for(&label)?;
        Some(format_reply("Decided by the labels of the example images.", answer, 1.0))
    }
}
