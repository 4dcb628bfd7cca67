//! Fixed-dimension tile embeddings with exact cosine kNN.
//!
//! On-disk layout (`EMB1`):
//!
//! ```text
//! b"EMB1" | header_len: u32 LE | header: UTF-8 JSON | count*dim f32 LE, row-major
//! ```
//!
//! The JSON header is `{"dim":..,"count":..,"model_id":..,"tile_ids":[..]}`
//! and rows follow `tile_ids` order.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{is_excluded, RecordIndex};

pub const MAGIC: &[u8; 4] = b"EMB1";

/// Rows with a Euclidean norm at or below this are rejected.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes, expected EMB1")]
    BadMagic,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("zero vector for tile {0:?}")]
    ZeroVector(String),
    #[error("non-finite value in row for tile {0:?}")]
    NonFinite(String),
    #[error("duplicate tile id {0:?}")]
    DuplicateTileId(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("unknown tile {0:?}")]
    UnknownTile(String),
    #[error("label {label}: {available} candidates available, {k} requested")]
    NotEnoughCandidates {
        label: String,
        available: usize,
        k: usize,
    },
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
    count: usize,
    model_id: String,
    tile_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    model_id: String,
    tile_ids: Vec<String>,
    matrix: Vec<f32>,
    norms: Vec<f64>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub tile_id: String,
    pub similarity: f64,
}

impl EmbeddingStore {
    pub fn new(
        model_id: impl Into<String>,
        dim: usize,
        tile_ids: Vec<String>,
        matrix: Vec<f32>,
    ) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::HeaderMismatch("dim must be positive".into()));
        }
        if matrix.len() != tile_ids.len() * dim {
            return Err(EmbedError::HeaderMismatch(format!(
                "{} ids x {dim} dims needs {} floats, got {}",
                tile_ids.len(),
                tile_ids.len() * dim,
                matrix.len()
            )));
        }
        let mut index = HashMap::with_capacity(tile_ids.len());
        let mut norms = Vec::with_capacity(tile_ids.len());
        for (i, id) in tile_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(EmbedError::DuplicateTileId(id.clone()));
            }
            let row = &matrix[i * dim..(i + 1) * dim];
            if row.iter().any(|x| !x.is_finite()) {
                return Err(EmbedError::NonFinite(id.clone()));
            }
            let norm = norm(row);
            if norm <= MIN_NORM {
                return Err(EmbedError::ZeroVector(id.clone()));
            }
            norms.push(norm);
        }
        Ok(EmbeddingStore {
            dim,
            model_id: model_id.into(),
            tile_ids,
            matrix,
            norms,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tile_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tile_ids.is_empty()
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn tile_ids(&self) -> &[String] {
        &self.tile_ids
    }

    pub fn index_of(&self, tile_id: &str) -> Option<usize> {
        self.index.get(tile_id).copied()
    }

    pub fn contains(&self, tile_id: &str) -> bool {
        self.index.contains_key(tile_id)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vector(&self, tile_id: &str) -> Option<&[f32]> {
        self.index_of(tile_id).map(|i| self.row(i))
    }

    pub fn norm(&self, i: usize) -> f64 {
        self.norms[i]
    }

    /// Cosine similarity between two stored rows, using cached norms.
    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        (dot(self.row(a), self.row(b)) / (self.norms[a] * self.norms[b])).clamp(-1.0, 1.0)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), EmbedError> {
        let header = serde_json::to_vec(&Header {
            dim: self.dim,
            count: self.tile_ids.len(),
            model_id: self.model_id.clone(),
            tile_ids: self.tile_ids.clone(),
        })
        .map_err(|e| EmbedError::MalformedHeader(e.to_string()))?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| EmbedError::MalformedHeader("header exceeds 4 GiB".into()))?;
        w.write_all(MAGIC)?;
        w.write_all(&header_len.to_le_bytes())?;
        w.write_all(&header)?;
        let mut payload = Vec::with_capacity(self.matrix.len() * 4);
        for x in &self.matrix {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, EmbedError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| EmbedError::BadMagic)?;
        if &magic != MAGIC {
            return Err(EmbedError::BadMagic);
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)
            .map_err(|_| EmbedError::HeaderMismatch("truncated header length".into()))?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)
            .map_err(|_| EmbedError::HeaderMismatch("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&header)
            .map_err(|e| EmbedError::MalformedHeader(e.to_string()))?;
        if header.tile_ids.len() != header.count {
            return Err(EmbedError::HeaderMismatch(format!(
                "count {} but {} tile ids",
                header.count,
                header.tile_ids.len()
            )));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let expected = header
            .count
            .checked_mul(header.dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| EmbedError::HeaderMismatch("count x dim overflows".into()))?;
        if payload.len() != expected {
            return Err(EmbedError::HeaderMismatch(format!(
                "payload has {} bytes, header declares {expected}",
                payload.len()
            )));
        }
        let matrix = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        EmbeddingStore::new(header.model_id, header.dim, header.tile_ids, matrix)
    }
}

pub fn save_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<(), EmbedError> {
    let path = path.as_ref();
    let tmp = path.with_extension("emb.tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        store.write_to(&mut f)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_store(path: impl AsRef<Path>) -> Result<EmbeddingStore, EmbedError> {
    let f = std::fs::File::open(path)?;
    EmbeddingStore::read_from(std::io::BufReader::new(f))
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// `dot(a,b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= MIN_NORM || nb <= MIN_NORM {
        return Err(EmbedError::ZeroVector(String::new()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Descending similarity, ties broken by ascending tile id.
pub fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.tile_id.cmp(&b.tile_id))
}

/// The `k` pool tiles with `label` most cosine-similar to the test tile.
///
/// The test tile itself is never returned; with `exclude_same_patient`,
/// tiles sharing the test tile's known patient id are dropped as well.
pub fn nearest_per_label(
    store: &EmbeddingStore,
    records: &RecordIndex,
    test_tile_id: &str,
    label: &str,
    k: usize,
    exclude_same_patient: bool,
) -> Result<Vec<Neighbor>, EmbedError> {
    if k == 0 {
        return Err(EmbedError::ZeroK);
    }
    let test = records
        .get(test_tile_id)
        .ok_or_else(|| EmbedError::UnknownTile(test_tile_id.to_string()))?;
    let test_row = store
        .index_of(test_tile_id)
        .ok_or_else(|| EmbedError::UnknownTile(test_tile_id.to_string()))?;

    let mut scored = Vec::new();
    for cand in records.with_label(label) {
        if is_excluded(test, cand, exclude_same_patient) {
            continue;
        }
        let row = store
            .index_of(&cand.tile_id)
            .ok_or_else(|| EmbedError::UnknownTile(cand.tile_id.clone()))?;
        scored.push(Neighbor {
            tile_id: cand.tile_id.clone(),
            similarity: store.similarity(test_row, row),
        });
    }
    if scored.len() < k {
        return Err(EmbedError::NotEnoughCandidates {
            label: label.to_string(),
            available: scored.len(),
            k,
        });
    }
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, neighbor_order);
        scored.truncate(k);
    }
    scored.sort_by(neighbor_order);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DatasetId, TileRecord};

    fn rec(id: &str, label: &str, patient: Option<&str>) -> TileRecord {
        TileRecord {
            tile_id: id.into(),
            dataset: DatasetId::Pcam,
            label: label.into(),
            patient_id: patient.map(Into::into),
            consensus_votes: None,
            image_path: format!("{id}.png"),
        }
    }

    #[test]
    fn cosine_closed_forms() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(EmbedError::DimMismatch { .. })
        ));
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(EmbedError::ZeroVector(_))
        ));
    }

    fn sample_store(rows: usize, dim: usize) -> EmbeddingStore {
        let ids = (0..rows).map(|i| format!("t{i:02}")).collect();
        let data = (0..rows * dim)
            .map(|i| ((i * 7919) % 101) as f32 / 13.0 - 3.0 + 0.001)
            .collect();
        EmbeddingStore::new("test", dim, ids, data).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let store = sample_store(10, 768);
        let mut first = Vec::new();
        store.write_to(&mut first).unwrap();
        let loaded = EmbeddingStore::read_from(first.as_slice()).unwrap();
        assert_eq!(loaded, store);
        let mut second = Vec::new();
        loaded.write_to(&mut second).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.emb");
        let store = sample_store(4, 3);
        save_store(&store, &path).unwrap();
        assert_eq!(load_store(&path).unwrap(), store);
    }

    #[test]
    fn decode_errors() {
        let store = sample_store(3, 4);
        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            EmbeddingStore::read_from(truncated),
            Err(EmbedError::HeaderMismatch(_))
        ));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            EmbeddingStore::read_from(bad.as_slice()),
            Err(EmbedError::BadMagic)
        ));

        // Zero out the last row's payload.
        let mut zeroed = bytes.clone();
        let n = zeroed.len();
        zeroed[n - 16..].fill(0);
        assert!(matches!(
            EmbeddingStore::read_from(zeroed.as_slice()),
            Err(EmbedError::ZeroVector(id)) if id == "t02"
        ));
    }

    #[test]
    fn header_layout_matches_format() {
        let store = EmbeddingStore::new("m", 2, vec!["a".into()], vec![1.0, 2.0]).unwrap();
        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"EMB1");
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header, r#"{"dim":2,"count":1,"model_id":"m","tile_ids":["a"]}"#);
        assert_eq!(&bytes[8 + hlen..], [1.0f32.to_le_bytes(), 2.0f32.to_le_bytes()].concat());
    }

    #[test]
    fn construction_rejects_bad_rows() {
        assert!(matches!(
            EmbeddingStore::new("m", 2, vec!["a".into(), "a".into()], vec![1.0; 4]),
            Err(EmbedError::DuplicateTileId(_))
        ));
        assert!(matches!(
            EmbeddingStore::new("m", 2, vec!["a".into()], vec![f32::NAN, 1.0]),
            Err(EmbedError::NonFinite(_))
        ));
    }

    /// Six candidates on hand-set 2-d vectors; expected order from a
    /// brute-force sort of every candidate.
    #[test]
    fn knn_matches_brute_force_on_hand_vectors() {
        let vecs: &[(&str, &str, [f32; 2])] = &[
            ("q", "A", [1.0, 0.0]),
            ("a1", "A", [1.0, 0.1]),
            ("a2", "A", [0.0, 1.0]),
            ("a3", "A", [1.0, 1.0]),
            ("a4", "A", [-1.0, 0.2]),
            ("a5", "A", [1.0, -0.5]),
            ("a6", "A", [0.5, 2.0]),
            ("b1", "B", [1.0, 0.0]),
        ];
        let records = RecordIndex::new(vecs.iter().map(|(id, l, _)| rec(id, l, None)).collect());
        let store = EmbeddingStore::new(
            "m",
            2,
            vecs.iter().map(|(id, _, _)| id.to_string()).collect(),
            vecs.iter().flat_map(|(_, _, v)| *v).collect(),
        )
        .unwrap();

        let mut brute: Vec<(f64, &str)> = vecs[1..7]
            .iter()
            .map(|(id, _, v)| {
                let c = f64::from(v[0]) / (f64::from(v[0]).hypot(f64::from(v[1])));
                (c, *id)
            })
            .collect();
        brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        let expected: Vec<&str> = brute.iter().take(3).map(|x| x.1).collect();
        assert_eq!(expected, ["a1", "a5", "a3"]);

        let got = nearest_per_label(&store, &records, "q", "A", 3, false).unwrap();
        assert_eq!(
            got.iter().map(|n| n.tile_id.as_str()).collect::<Vec<_>>(),
            expected
        );
        assert!(got.windows(2).all(|w| w[0].similarity >= w[1].similarity));
    }

    #[test]
    fn patient_exclusion_and_shortage() {
        let records = RecordIndex::new(vec![
            rec("q", "A", Some("p1")),
            rec("a1", "A", Some("p1")),
            rec("a2", "A", Some("p2")),
            rec("a3", "A", None),
            rec("a4", "A", Some("p3")),
            rec("a5", "A", Some("p4")),
        ]);
        let ids: Vec<String> = records.records().iter().map(|r| r.tile_id.clone()).collect();
        let data = (0..ids.len()).flat_map(|i| [1.0, i as f32]).collect();
        let store = EmbeddingStore::new("m", 2, ids, data).unwrap();

        let all = nearest_per_label(&store, &records, "q", "A", 5, false).unwrap();
        assert_eq!(all.len(), 5);
        assert!(all.iter().any(|n| n.tile_id == "a1"));

        match nearest_per_label(&store, &records, "q", "A", 5, true) {
            Err(EmbedError::NotEnoughCandidates { available: 4, k: 5, .. }) => {}
            other => panic!("expected NotEnoughCandidates, got {other:?}"),
        }
        let four = nearest_per_label(&store, &records, "q", "A", 4, true).unwrap();
        assert!(four.iter().all(|n| n.tile_id != "a1" && n.tile_id != "q"));
        assert!(matches!(
            nearest_per_label(&store, &records, "zz", "A", 1, true),
            Err(EmbedError::UnknownTile(_))
        ));
    }

    #[test]
    fn ties_break_on_ascending_id() {
        let records = RecordIndex::new(vec![
            rec("q", "A", None),
            rec("zeta", "A", None),
            rec("alpha", "A", None),
            rec("mid", "A", None),
        ]);
        let store = EmbeddingStore::new(
            "m",
            2,
            vec!["q".into(), "zeta".into(), "alpha".into(), "mid".into()],
            vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let got = nearest_per_label(&store, &records, "q", "A", 2, false).unwrap();
        assert_eq!(got[0].tile_id, "alpha");
        assert_eq!(got[1].tile_id, "zeta");
        assert_eq!(got[0].similarity, got[1].similarity);
    }
}
