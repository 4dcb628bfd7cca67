//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Instant;

use icl_bench::corpus::{write_manifest, DatasetId, TileRecord};
use icl_bench::embed_store::{save_store, EmbeddingStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mhist_mini")
}

/// Two-label PCAM-style corpus: TUM around `+separation * e0`, NORM around
/// `-separation * e0`, unit Gaussian noise in every dimension.
pub struct SynthCorpus {
    pub dir: tempfile::TempDir,
    pub records: Vec<TileRecord>,
    pub store: EmbeddingStore,
}

impl SynthCorpus {
    pub fn two_clusters(per_label: usize, dim: usize, separation: f32, seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("img")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, 1.0).unwrap();
        let mut records = Vec::new();
        let mut ids = Vec::new();
        let mut matrix = Vec::new();
        for (li, label) in ["TUM", "NORM"].iter().enumerate() {
            let sign = if li == 0 { 1.0 } else { -1.0 };
            for j in 0..per_label {
                let i = li * per_label + j;
                let tile_id = format!("syn{i:04}");
                let image_path = format!("img/{tile_id}.png");
                write_png(&dir.path().join(&image_path), i);
                for d in 0..dim {
                    let center = if d == 0 { sign * separation } else { 0.0 };
                    matrix.push(center + noise.sample(&mut rng));
                }
                records.push(TileRecord {
                    tile_id: tile_id.clone(),
                    dataset: DatasetId::Pcam,
                    label: label.to_string(),
                    patient_id: Some(format!("{label}-p{}", j / 5)),
                    consensus_votes: None,
                    image_path,
                });
                ids.push(tile_id);
            }
        }
        let store = EmbeddingStore::new("synthetic-gaussian", dim, ids, matrix).unwrap();
        let manifest = std::fs::File::create(dir.path().join("manifest.csv")).unwrap();
        write_manifest(manifest, &records).unwrap();
        save_store(&store, dir.path().join("store.emb")).unwrap();
        SynthCorpus { dir, records, store }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    /// Writes `config.json` from defaults overlaid with `overrides`.
    pub fn write_config(&self, name: &str, overrides: Value) -> PathBuf {
        let mut cfg = json!({
            "dataset": "PCAM",
            "n": 60,
            "seed": 11,
            "manifest": "manifest.csv",
            "store": "store.emb",
            "grid": [{"strategy": "zero"}, {"strategy": "knn", "k": [3, 5, 10]}],
            "bootstrap_iters": 2000,
            "parallelism": 4,
            "gateway": {"backend": "oracle"},
            "out_dir": "out",
        });
        merge(&mut cfg, overrides);
        let path = self.path().join(name);
        std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
        path
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// A 4x4 PNG whose pixels encode `i`, so every tile's bytes differ.
pub fn write_png(path: &Path, i: usize) {
    let img = image::RgbImage::from_fn(4, 4, |x, y| {
        image::Rgb([(i % 251) as u8, (i / 251) as u8, (x * 4 + y) as u8])
    });
    img.save(path).unwrap();
}

#[derive(Debug, Clone)]
pub struct Captured {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
    pub at: Instant,
}

impl Captured {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap()
    }
}

type Script = dyn Fn(usize, &Captured) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server answering each request from a script. The
/// script receives the 0-based request index.
pub struct StubServer {
    pub addr: SocketAddr,
    pub requests: Arc<Mutex<Vec<Captured>>>,
    count: Arc<AtomicUsize>,
}

impl StubServer {
    pub fn start<F>(script: F) -> Self
    where
        F: Fn(usize, &Captured) -> (u16, String) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let requests = Arc::new(Mutex::new(Vec::new()));
        let count = Arc::new(AtomicUsize::new(0));
        let script: Arc<Script> = Arc::new(script);
        {
            let requests = requests.clone();
            let count = count.clone();
            thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(stream) = stream else { continue };
                    let requests = requests.clone();
                    let count = count.clone();
                    let script = script.clone();
                    thread::spawn(move || serve(stream, &requests, &count, &*script));
                }
            });
        }
        StubServer { addr, requests, count }
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn hits(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }

    pub fn captured(&self) -> Vec<Captured> {
        self.requests.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, requests: &Mutex<Vec<Captured>>, count: &AtomicUsize, script: &Script) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut stream = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let mut parts = request_line.split_whitespace();
        let method = parts.next().unwrap_or_default().to_string();
        let path = parts.next().unwrap_or_default().to_string();
        let mut headers = Vec::new();
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((k, v)) = line.split_once(':') {
                headers.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        let len = headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
            .and_then(|(_, v)| v.parse::<usize>().ok())
            .unwrap_or(0);
        let mut body = vec![0u8; len];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let captured = Captured {
            method,
            path,
            headers,
            body,
            at: Instant::now(),
        };
        let index = {
            let mut reqs = requests.lock().unwrap();
            reqs.push(captured.clone());
            count.fetch_add(1, Ordering::SeqCst)
        };
        let (status, body) = script(index, &captured);
        let response = format!(
            "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
            body.len()
        );
        if stream.write_all(response.as_bytes()).is_err() {
            return;
        }
    }
}

/// Chat-completions response body carrying `content`.
pub fn completion(content: &str) -> String {
    json!({
        "id": "stub",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
    })
    .to_string()
}
