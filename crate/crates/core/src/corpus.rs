//! Dataset manifests, label vocabularies and balanced test-set draws.
//!
//! A manifest is a UTF-8 CSV with the exact header
//! `tile_id,dataset,label,patient_id,consensus,image_path`. Optional fields
//! (`patient_id`, `consensus`) are empty strings when absent.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const MANIFEST_HEADER: [&str; 6] = [
    "tile_id",
    "dataset",
    "label",
    "patient_id",
    "consensus",
    "image_path",
];

/// Number of MHIST annotators; `consensus` counts SSA votes out of this.
pub const MHIST_ANNOTATORS: u8 = 7;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("unknown label {label:?} for dataset {dataset} at line {line}")]
    UnknownLabel {
        line: u64,
        dataset: DatasetId,
        label: String,
    },
    #[error("duplicate tile_id {tile_id:?} at line {line}")]
    DuplicateTileId { line: u64, tile_id: String },
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("record {0:?} has no consensus votes")]
    MissingConsensus(String),
    #[error("label {label} has {available} records, {needed} needed")]
    InsufficientSamples {
        label: String,
        available: usize,
        needed: usize,
    },
    #[error("n={n} is not divisible by the {labels} selected labels")]
    IndivisibleN { n: usize, labels: usize },
    #[error("label subset entry {label:?} is not in the {dataset} vocabulary")]
    UnknownSubsetLabel { dataset: DatasetId, label: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetId {
    #[serde(rename = "CRC100K")]
    Crc100k,
    #[serde(rename = "PCAM")]
    Pcam,
    #[serde(rename = "MHIST")]
    Mhist,
}

impl DatasetId {
    pub const ALL: [DatasetId; 3] = [DatasetId::Crc100k, DatasetId::Pcam, DatasetId::Mhist];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Crc100k => "CRC100K",
            DatasetId::Pcam => "PCAM",
            DatasetId::Mhist => "MHIST",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "CRC100K" => Ok(DatasetId::Crc100k),
            "PCAM" => Ok(DatasetId::Pcam),
            "MHIST" => Ok(DatasetId::Mhist),
            other => Err(CorpusError::UnknownDataset(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRecord {
    pub tile_id: String,
    pub dataset: DatasetId,
    /// Canonical label key, e.g. `TUM`.
    pub label: String,
    pub patient_id: Option<String>,
    /// MHIST only: number of annotators (out of seven) voting SSA.
    pub consensus_votes: Option<u8>,
    pub image_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub key: String,
    /// The exact string the model is asked to answer with.
    pub answer: String,
}

/// Ordered label list for a dataset. The order drives shot interleaving
/// and confusion-matrix layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    pub dataset: DatasetId,
    pub labels: Vec<Label>,
}

impl LabelVocabulary {
    pub fn for_dataset(dataset: DatasetId) -> Self {
        let pairs: &[(&str, &str)] = match dataset {
            // Alphabetical by key; BACK is not part of the vocabulary.
            DatasetId::Crc100k => &[
                ("ADI", "Adipose"),
                ("DEB", "Debris"),
                ("LYM", "Lymphocytes"),
                ("MUC", "Mucus"),
                ("MUS", "Muscle"),
                ("NORM", "Normal"),
                ("STR", "Stroma"),
                ("TUM", "Cancer"),
            ],
            DatasetId::Pcam => &[("TUM", "Cancer"), ("NORM", "No Cancer")],
            DatasetId::Mhist => &[("HP", "HP"), ("SSA", "SSA")],
        };
        LabelVocabulary {
            dataset,
            labels: pairs
                .iter()
                .map(|(k, a)| Label {
                    key: (*k).to_string(),
                    answer: (*a).to_string(),
                })
                .collect(),
        }
    }

    /// Restricts the vocabulary to `subset`, keeping canonical order.
    pub fn restricted(&self, subset: Option<&[String]>) -> Result<Self, CorpusError> {
        let Some(subset) = subset else {
            return Ok(self.clone());
        };
        for key in subset {
            if self.index_of(key).is_none() {
                return Err(CorpusError::UnknownSubsetLabel {
                    dataset: self.dataset,
                    label: key.clone(),
                });
            }
        }
        Ok(LabelVocabulary {
            dataset: self.dataset,
            labels: self
                .labels
                .iter()
                .filter(|l| subset.contains(&l.key))
                .cloned()
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(|l| l.key.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.index_of(key).is_some()
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.key == key)
    }

    pub fn answer_for(&self, key: &str) -> Option<&str> {
        self.labels
            .iter()
            .find(|l| l.key == key)
            .map(|l| l.answer.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSet {
    pub dataset: DatasetId,
    pub tile_ids: Vec<String>,
    pub seed: u64,
    pub label_subset: Option<Vec<String>>,
}

/// Owned lookup over manifest records.
#[derive(Debug, Clone, Default)]
pub struct RecordIndex {
    records: Vec<TileRecord>,
    by_id: HashMap<String, usize>,
}

impl RecordIndex {
    /// Later duplicates of a tile id are ignored; `load_manifest` already
    /// rejects them.
    pub fn new(records: Vec<TileRecord>) -> Self {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            by_id.entry(r.tile_id.clone()).or_insert(i);
        }
        RecordIndex { records, by_id }
    }

    pub fn get(&self, tile_id: &str) -> Option<&TileRecord> {
        self.by_id.get(tile_id).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[TileRecord] {
        &self.records
    }

    pub fn with_label<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a TileRecord> + 'a {
        self.records.iter().filter(move |r| r.label == label)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// True when `candidate` must be hidden from shots for `test`: it is the
/// test tile itself, or (when requested) both carry the same known patient.
pub fn is_excluded(test: &TileRecord, candidate: &TileRecord, exclude_same_patient: bool) -> bool {
    if candidate.tile_id == test.tile_id {
        return true;
    }
    exclude_same_patient
        && matches!(
            (&test.patient_id, &candidate.patient_id),
            (Some(a), Some(b)) if a == b
        )
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<TileRecord>, CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_manifest(file)
}

pub fn read_manifest<R: std::io::Read>(reader: R) -> Result<Vec<TileRecord>, CorpusError> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);

    let mut rows = csv.records();
    let header = match rows.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => {
            return Err(CorpusError::MalformedRow {
                line: 1,
                reason: e.to_string(),
            })
        }
        None => {
            return Err(CorpusError::MalformedRow {
                line: 1,
                reason: "missing header".into(),
            })
        }
    };
    let header_fields: Vec<&str> = header.iter().collect();
    if header_fields != MANIFEST_HEADER {
        return Err(CorpusError::MalformedRow {
            line: 1,
            reason: format!("header must be {}", MANIFEST_HEADER.join(",")),
        });
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rows {
        let row = row.map_err(|e| CorpusError::MalformedRow {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != MANIFEST_HEADER.len() {
            return Err(CorpusError::MalformedRow {
                line,
                reason: format!("expected 6 fields, found {}", row.len()),
            });
        }
        let malformed = |reason: String| CorpusError::MalformedRow { line, reason };

        let tile_id = row[0].to_string();
        if tile_id.is_empty() {
            return Err(malformed("empty tile_id".into()));
        }
        let dataset: DatasetId = row[1]
            .parse()
            .map_err(|_| malformed(format!("unknown dataset {:?}", &row[1])))?;
        let label = row[2].to_string();
        if !LabelVocabulary::for_dataset(dataset).contains(&label) {
            return Err(CorpusError::UnknownLabel {
                line,
                dataset,
                label,
            });
        }
        let patient_id = non_empty(&row[3]);
        let consensus_votes = match non_empty(&row[4]) {
            None => None,
            Some(_) if dataset != DatasetId::Mhist => {
                return Err(malformed("consensus votes are only valid for MHIST".into()))
            }
            Some(v) => match v.parse::<u8>() {
                Ok(n) if n <= MHIST_ANNOTATORS => Some(n),
                _ => return Err(malformed(format!("consensus {v:?} outside 0..=7"))),
            },
        };
        let image_path = row[5].to_string();
        if image_path.is_empty() {
            return Err(malformed("empty image_path".into()));
        }
        if !seen.insert(tile_id.clone()) {
            return Err(CorpusError::DuplicateTileId { line, tile_id });
        }
        out.push(TileRecord {
            tile_id,
            dataset,
            label,
            patient_id,
            consensus_votes,
            image_path,
        });
    }
    Ok(out)
}

fn non_empty(s: &str) -> Option<String> {
    if s.is_empty() {
        None
    } else {
        Some(s.to_string())
    }
}

/// Writes records in manifest CSV format.
pub fn write_manifest<W: std::io::Write>(writer: W, records: &[TileRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MANIFEST_HEADER)?;
    for r in records {
        let votes = r.consensus_votes.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            r.tile_id.as_str(),
            r.dataset.as_str(),
            r.label.as_str(),
            r.patient_id.as_deref().unwrap_or(""),
            votes.as_str(),
            r.image_path.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Keeps the records on which all seven annotators agree (0 or 7 SSA votes).
pub fn filter_unanimous(records: &[TileRecord]) -> Result<Vec<TileRecord>, CorpusError> {
    let mut out = Vec::new();
    for r in records {
        match r.consensus_votes {
            None => return Err(CorpusError::MissingConsensus(r.tile_id.clone())),
            Some(0) | Some(MHIST_ANNOTATORS) => out.push(r.clone()),
            Some(_) => {}
        }
    }
    Ok(out)
}

/// Draws `n / |labels|` tiles per selected label, uniformly without
/// replacement. Records of other datasets are ignored. Output is grouped by
/// label in vocabulary order, manifest order within each label.
pub fn sample_balanced_test_set(
    records: &[TileRecord],
    dataset: DatasetId,
    n: usize,
    seed: u64,
    label_subset: Option<&[String]>,
) -> Result<TestSet, CorpusError> {
    let vocab = LabelVocabulary::for_dataset(dataset).restricted(label_subset)?;
    if vocab.is_empty() || !n.is_multiple_of(vocab.len()) {
        return Err(CorpusError::IndivisibleN {
            n,
            labels: vocab.len(),
        });
    }
    let per_label = n / vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tile_ids = Vec::with_capacity(n);
    for key in vocab.keys() {
        let pool: Vec<&TileRecord> = records
            .iter()
            .filter(|r| r.dataset == dataset && r.label == key)
            .collect();
        if pool.len() < per_label {
            return Err(CorpusError::InsufficientSamples {
                label: key.to_string(),
                available: pool.len(),
                needed: per_label,
            });
        }
        let mut picked = rand::seq::index::sample(&mut rng, pool.len(), per_label).into_vec();
        picked.sort_unstable();
        tile_ids.extend(picked.into_iter().map(|i| pool[i].tile_id.clone()));
    }
    Ok(TestSet {
        dataset,
        tile_ids,
        seed,
        label_subset: label_subset.map(|s| s.to_vec()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, ds: DatasetId, label: &str, votes: Option<u8>) -> TileRecord {
        TileRecord {
            tile_id: id.into(),
            dataset: ds,
            label: label.into(),
            patient_id: None,
            consensus_votes: votes,
            image_path: format!("{id}.png"),
        }
    }

    #[test]
    fn loads_three_rows_in_order() {
        let csv = "tile_id,dataset,label,patient_id,consensus,image_path\n\
                   a,CRC100K,TUM,p1,,a.png\n\
                   b,CRC100K,NORM,,,b.png\n\
                   c,MHIST,SSA,p9,7,c.png\n";
        let recs = read_manifest(csv.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(
            recs.iter().map(|r| r.tile_id.as_str()).collect::<Vec<_>>(),
            ["a", "b", "c"]
        );
        assert_eq!(recs[0].patient_id.as_deref(), Some("p1"));
        assert_eq!(recs[1].patient_id, None);
        assert_eq!(recs[2].consensus_votes, Some(7));
    }

    #[test]
    fn background_label_is_rejected() {
        let csv = "tile_id,dataset,label,patient_id,consensus,image_path\n\
                   a,CRC100K,TUM,,,a.png\n\
                   b,CRC100K,BACK,,,b.png\n";
        match read_manifest(csv.as_bytes()) {
            Err(CorpusError::UnknownLabel { line, label, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(label, "BACK");
            }
            other => panic!("expected UnknownLabel, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_tile_ids_are_rejected() {
        let csv = "tile_id,dataset,label,patient_id,consensus,image_path\n\
                   a,PCAM,TUM,,,a.png\n\
                   a,PCAM,NORM,,,b.png\n";
        assert!(matches!(
            read_manifest(csv.as_bytes()),
            Err(CorpusError::DuplicateTileId { line: 3, .. })
        ));
    }

    #[test]
    fn malformed_rows_report_line() {
        let bad_header = "id,dataset,label\n";
        assert!(matches!(
            read_manifest(bad_header.as_bytes()),
            Err(CorpusError::MalformedRow { line: 1, .. })
        ));
        let short = "tile_id,dataset,label,patient_id,consensus,image_path\na,PCAM,TUM\n";
        assert!(matches!(
            read_manifest(short.as_bytes()),
            Err(CorpusError::MalformedRow { line: 2, .. })
        ));
        let votes = "tile_id,dataset,label,patient_id,consensus,image_path\na,MHIST,HP,,8,a.png\n";
        assert!(matches!(
            read_manifest(votes.as_bytes()),
            Err(CorpusError::MalformedRow { line: 2, .. })
        ));
        let votes_wrong_ds =
            "tile_id,dataset,label,patient_id,consensus,image_path\na,PCAM,TUM,,3,a.png\n";
        assert!(matches!(
            read_manifest(votes_wrong_ds.as_bytes()),
            Err(CorpusError::MalformedRow { .. })
        ));
    }

    #[test]
    fn manifest_write_read_round_trip() {
        let recs = vec![
            rec("x", DatasetId::Mhist, "HP", Some(0)),
            TileRecord {
                patient_id: Some("p, with comma".into()),
                ..rec("y", DatasetId::Pcam, "NORM", None)
            },
        ];
        let mut buf = Vec::new();
        write_manifest(&mut buf, &recs).unwrap();
        assert_eq!(read_manifest(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn vocabularies_are_fixed() {
        let crc = LabelVocabulary::for_dataset(DatasetId::Crc100k);
        assert_eq!(
            crc.keys().collect::<Vec<_>>(),
            ["ADI", "DEB", "LYM", "MUC", "MUS", "NORM", "STR", "TUM"]
        );
        assert!(!crc.contains("BACK"));
        let pcam = LabelVocabulary::for_dataset(DatasetId::Pcam);
        assert_eq!(pcam.answer_for("TUM"), Some("Cancer"));
        assert_eq!(pcam.answer_for("NORM"), Some("No Cancer"));
        assert_eq!(pcam.len(), 2);
        let mhist = LabelVocabulary::for_dataset(DatasetId::Mhist);
        assert_eq!(mhist.keys().collect::<Vec<_>>(), ["HP", "SSA"]);
        assert_eq!(crc, LabelVocabulary::for_dataset(DatasetId::Crc100k));
    }

    #[test]
    fn binary_subset_keeps_canonical_order() {
        let crc = LabelVocabulary::for_dataset(DatasetId::Crc100k);
        let sub = crc
            .restricted(Some(&["TUM".to_string(), "NORM".to_string()]))
            .unwrap();
        assert_eq!(sub.keys().collect::<Vec<_>>(), ["NORM", "TUM"]);
        assert!(crc.restricted(Some(&["BACK".to_string()])).is_err());
    }

    #[test]
    fn unanimous_filter() {
        let recs = vec![
            rec("a", DatasetId::Mhist, "SSA", Some(7)),
            rec("b", DatasetId::Mhist, "SSA", Some(4)),
            rec("c", DatasetId::Mhist, "HP", Some(0)),
        ];
        let kept = filter_unanimous(&recs).unwrap();
        assert_eq!(
            kept.iter().map(|r| r.tile_id.as_str()).collect::<Vec<_>>(),
            ["a", "c"]
        );
        assert!(filter_unanimous(&[]).unwrap().is_empty());
        let missing = vec![rec("d", DatasetId::Mhist, "HP", None)];
        assert!(matches!(
            filter_unanimous(&missing),
            Err(CorpusError::MissingConsensus(id)) if id == "d"
        ));
    }

    fn pool(ds: DatasetId, per_label: usize) -> Vec<TileRecord> {
        let vocab = LabelVocabulary::for_dataset(ds);
        vocab
            .keys()
            .flat_map(|k| (0..per_label).map(move |i| rec(&format!("{k}-{i:03}"), ds, k, None)))
            .collect()
    }

    fn per_label_counts(set: &TestSet, recs: &[TileRecord]) -> HashMap<String, usize> {
        let idx = RecordIndex::new(recs.to_vec());
        let mut counts = HashMap::new();
        for id in &set.tile_ids {
            *counts.entry(idx.get(id).unwrap().label.clone()).or_default() += 1;
        }
        counts
    }

    #[test]
    fn balanced_draws() {
        let recs = pool(DatasetId::Pcam, 50);
        let set = sample_balanced_test_set(&recs, DatasetId::Pcam, 60, 7, None).unwrap();
        assert_eq!(set.tile_ids.len(), 60);
        assert!(per_label_counts(&set, &recs).values().all(|&c| c == 30));

        let recs = pool(DatasetId::Crc100k, 40);
        let set = sample_balanced_test_set(&recs, DatasetId::Crc100k, 120, 7, None).unwrap();
        let counts = per_label_counts(&set, &recs);
        assert_eq!(counts.len(), 8);
        assert!(counts.values().all(|&c| c == 15));

        let again = sample_balanced_test_set(&recs, DatasetId::Crc100k, 120, 7, None).unwrap();
        assert_eq!(set, again);
        let other = sample_balanced_test_set(&recs, DatasetId::Crc100k, 120, 8, None).unwrap();
        assert_ne!(set.tile_ids, other.tile_ids);
    }

    #[test]
    fn balanced_draw_errors() {
        let recs = pool(DatasetId::Pcam, 10);
        assert!(matches!(
            sample_balanced_test_set(&recs, DatasetId::Pcam, 61, 0, None),
            Err(CorpusError::IndivisibleN { n: 61, labels: 2 })
        ));
        assert!(matches!(
            sample_balanced_test_set(&recs, DatasetId::Pcam, 60, 0, None),
            Err(CorpusError::InsufficientSamples { available: 10, needed: 30, .. })
        ));
    }

    #[test]
    fn binary_crc_subset_draw() {
        let recs = pool(DatasetId::Crc100k, 40);
        let subset = vec!["TUM".to_string(), "NORM".to_string()];
        let set =
            sample_balanced_test_set(&recs, DatasetId::Crc100k, 60, 1, Some(&subset)).unwrap();
        let counts = per_label_counts(&set, &recs);
        assert_eq!(counts.len(), 2);
        assert_eq!(counts["TUM"], 30);
        assert_eq!(counts["NORM"], 30);
    }

    #[test]
    fn exclusion_rules() {
        let mut t = rec("t", DatasetId::Pcam, "TUM", None);
        let mut c = rec("c", DatasetId::Pcam, "TUM", None);
        assert!(is_excluded(&t, &t, false));
        assert!(!is_excluded(&t, &c, true));
        t.patient_id = Some("p".into());
        assert!(!is_excluded(&t, &c, true));
        c.patient_id = Some("p".into());
        assert!(is_excluded(&t, &c, true));
        assert!(!is_excluded(&t, &c, false));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn test_sets_are_balanced(per in 1usize..6, extra in 0usize..10, seed in any::<u64>()) {
                let recs = pool(DatasetId::Crc100k, per + extra);
                let set = sample_balanced_test_set(&recs, DatasetId::Crc100k, per * 8, seed, None).unwrap();
                let counts = per_label_counts(&set, &recs);
                prop_assert_eq!(counts.len(), 8);
                prop_assert!(counts.values().all(|&c| c == per));
                let unique: HashSet<_> = set.tile_ids.iter().collect();
                prop_assert_eq!(unique.len(), set.tile_ids.len());
            }

            #[test]
            fn unanimous_is_ordered_subset(votes in proptest::collection::vec(0u8..=7, 0..40)) {
                let recs: Vec<_> = votes.iter().enumerate()
                    .map(|(i, &v)| rec(&format!("t{i}"), DatasetId::Mhist, if v >= 4 { "SSA" } else { "HP" }, Some(v)))
                    .collect();
                let kept = filter_unanimous(&recs).unwrap();
                let mut it = recs.iter();
                for k in &kept {
                    prop_assert!(it.any(|r| r == k));
                    prop_assert!(k.consensus_votes == Some(0) || k.consensus_votes == Some(7));
                }
            }
        }
    }
}
