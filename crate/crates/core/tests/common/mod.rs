#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use ktree::ingest::synth_corpus;
use ktree::{EmbeddingSet, ItemTable};

pub struct Reply {
    pub status: u16,
    pub body: String,
    pub delay: Duration,
}

impl Reply {
    pub fn ok(body: impl Into<String>) -> Self {
        Reply { status: 200, body: body.into(), delay: Duration::ZERO }
    }
}

/// Minimal keep-alive HTTP/1.1 server. The handler sees the request body and
/// the 0-based request number.
pub struct MockServer {
    pub url: String,
    requests: Arc<AtomicUsize>,
}

impl MockServer {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(&str, usize) -> Reply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/score", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let handler = Arc::new(handler);
        let counter = requests.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let handler = handler.clone();
                let counter = counter.clone();
                thread::spawn(move || {
                    let mut writer = stream.try_clone().unwrap();
                    let mut reader = BufReader::new(stream);
                    loop {
                        let mut length = 0usize;
                        let mut line = String::new();
                        if reader.read_line(&mut line).unwrap_or(0) == 0 {
                            return;
                        }
                        loop {
                            line.clear();
                            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                                return;
                            }
                            let header = line.trim_end();
                            if header.is_empty() {
                                break;
                            }
                            if let Some((k, v)) = header.split_once(':') {
                                if k.eq_ignore_ascii_case("content-length") {
                                    length = v.trim().parse().unwrap();
                                }
                            }
                        }
                        let mut body = vec![0u8; length];
                        if reader.read_exact(&mut body).is_err() {
                            return;
                        }
                        let n = counter.fetch_add(1, Ordering::SeqCst);
                        let reply = handler(std::str::from_utf8(&body).unwrap(), n);
                        thread::sleep(reply.delay);
                        let head = format!(
                            "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
                            reply.status,
                            reply.body.len()
                        );
                        if writer.write_all(head.as_bytes()).is_err() || writer.write_all(reply.body.as_bytes()).is_err() {
                            return;
                        }
                    }
                });
            }
        });
        MockServer { url, requests }
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

pub fn parse_pairs(body: &str) -> Vec<(String, String)> {
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    v["pairs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| (p[0].as_str().unwrap().to_string(), p[1].as_str().unwrap().to_string()))
        .collect()
}

pub fn scores_json(scores: &[f64]) -> String {
    serde_json::json!({ "scores": scores }).to_string()
}

/// Lexical-scoring server.
pub fn lexical_server() -> MockServer {
    MockServer::start(|body, _| {
        let scores: Vec<f64> = parse_pairs(body).iter().map(|(a, b)| ktree::scorers::lexical_score(a, b)).collect();
        Reply::ok(scores_json(&scores))
    })
}

pub fn gaussian(clusters: usize, per: usize, dim: usize, seed: u64) -> EmbeddingSet {
    synth_corpus(clusters, per, dim, 1.0, seed).unwrap().embeddings
}

/// Uniform vectors in the positive orthant, so every cosine lies in [0, 1].
pub fn positive_vectors(n: usize, dim: usize, seed: u64) -> EmbeddingSet {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..n * dim).map(|_| rng.random_range(0.01f32..1.0)).collect();
    let items = ItemTable::new((0..n).map(|i| format!("item {i}")).collect()).unwrap();
    EmbeddingSet::new(items, dim, data).unwrap()
}
