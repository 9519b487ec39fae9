//! Pairwise text scorers used to route interaction-mode beam search.
//!
//! A [`PairScorer`] maps `(query, candidate)` text pairs to similarities in
//! `[0, 1]`. [`LexicalScorer`] is a local term-frequency cosine; [`RemoteScorer`]
//! delegates to a model server over HTTP:
//!
//! ```text
//! POST /score  {"pairs": [["text a", "text b"], ...]}  ->  {"scores": [0.87, ...]}
//! ```

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_URL: &str = "KTREE_SCORER_URL";
pub const ENV_TIMEOUT_MS: &str = "KTREE_SCORER_TIMEOUT_MS";
pub const ENV_MAX_RETRIES: &str = "KTREE_SCORER_MAX_RETRIES";
pub const ENV_BATCH_LIMIT: &str = "KTREE_SCORER_BATCH_LIMIT";

const EXCERPT_LEN: usize = 200;

#[derive(Debug, Error)]
pub enum ScoreError {
    /// Transient; the request may be retried.
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: usize },

    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },

    #[error("protocol error (status {status:?}): {excerpt}")]
    Protocol { status: Option<u16>, excerpt: String },

    #[error("scorer contract violated: {0}")]
    ContractViolation(String),
}

impl ScoreError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ScoreError::Timeout { .. } | ScoreError::Transport { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScorerInfo {
    pub name: String,
    /// Largest number of pairs accepted by one `score_batch` call.
    pub batch_limit: usize,
}

pub trait PairScorer: Send + Sync {
    fn info(&self) -> ScorerInfo;

    /// One score in `[0, 1]` per pair, in input order. `pairs.len()` never
    /// exceeds `info().batch_limit` when called through [`score_pairs`].
    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, ScoreError>;
}

/// Scores any number of pairs through `scorer`, chunking by its batch limit
/// and checking the response contract.
pub fn score_pairs(scorer: &dyn PairScorer, pairs: &[(&str, &str)]) -> Result<Vec<f64>, ScoreError> {
    let limit = scorer.info().batch_limit.max(1);
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(limit) {
        let scores = scorer.score_batch(chunk)?;
        check_scores(chunk.len(), &scores)?;
        out.extend(scores);
    }
    Ok(out)
}

fn check_scores(expected: usize, scores: &[f64]) -> Result<(), ScoreError> {
    if scores.len() != expected {
        return Err(ScoreError::ContractViolation(format!(
            "expected {expected} scores, got {}",
            scores.len()
        )));
    }
    if let Some((i, s)) = scores
        .iter()
        .enumerate()
        .find(|(_, s)| !(s.is_finite() && (0.0..=1.0).contains(*s)))
    {
        return Err(ScoreError::ContractViolation(format!("score {s} at position {i} outside [0, 1]")));
    }
    Ok(())
}

fn term_frequencies(text: &str) -> HashMap<String, u64> {
    let mut tf = HashMap::new();
    for token in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        *tf.entry(token.to_lowercase()).or_insert(0) += 1;
    }
    tf
}

/// Cosine similarity of lowercased term-frequency vectors.
///
/// Two texts without any tokens score 1.0; exactly one empty side scores 0.0.
pub fn lexical_score(a: &str, b: &str) -> f64 {
    let ta = term_frequencies(a);
    let tb = term_frequencies(b);
    match (ta.is_empty(), tb.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    // Integer accumulation keeps the result independent of map iteration order.
    let dot: u64 = ta.iter().map(|(t, &c)| c * tb.get(t).copied().unwrap_or(0)).sum();
    let na: u64 = ta.values().map(|c| c * c).sum();
    let nb: u64 = tb.values().map(|c| c * c).sum();
    (dot as f64 / ((na as f64).sqrt() * (nb as f64).sqrt())).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalScorer;

impl PairScorer for LexicalScorer {
    fn info(&self) -> ScorerInfo {
        ScorerInfo {
            name: "lexical".into(),
            batch_limit: usize::MAX,
        }
    }

    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, ScoreError> {
        Ok(pairs.iter().map(|(a, b)| lexical_score(a, b)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteConfig {
    /// Full URL of the scoring endpoint, e.g. `http://host:8080/score`.
    pub endpoint: String,
    pub timeout_ms: u64,
    pub max_retries: usize,
    pub batch_limit: usize,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_ms: 10_000,
            max_retries: 3,
            batch_limit: 64,
        }
    }

    /// Applies `KTREE_SCORER_*` environment overrides.
    pub fn with_env_overrides(mut self) -> Result<Self, String> {
        if let Ok(url) = std::env::var(ENV_URL) {
            self.endpoint = url;
        }
        fn parse<T: std::str::FromStr>(key: &str) -> Result<Option<T>, String> {
            match std::env::var(key) {
                Ok(v) => v.parse().map(Some).map_err(|_| format!("{key}={v:?} is not a valid number")),
                Err(_) => Ok(None),
            }
        }
        if let Some(v) = parse(ENV_TIMEOUT_MS)? {
            self.timeout_ms = v;
        }
        if let Some(v) = parse(ENV_MAX_RETRIES)? {
            self.max_retries = v;
        }
        if let Some(v) = parse(ENV_BATCH_LIMIT)? {
            self.batch_limit = v;
        }
        Ok(self)
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    pairs: Vec<(&'a str, &'a str)>,
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

fn excerpt(body: &str) -> String {
    match body.char_indices().nth(EXCERPT_LEN) {
        Some((cut, _)) => format!("{}…", &body[..cut]),
        None => body.to_string(),
    }
}

/// HTTP client for an external pair-scoring service.
pub struct RemoteScorer {
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteScorer {
    pub fn new(config: RemoteConfig) -> Result<Self, String> {
        if config.batch_limit == 0 {
            return Err("scorer batch_limit must be at least 1".into());
        }
        if config.endpoint.is_empty() {
            return Err("scorer endpoint is empty".into());
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, agent })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// Scores pairs in request order, chunked by `batch_limit`.
    pub fn remote_score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, ScoreError> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(self.config.batch_limit) {
            out.extend(self.post_with_retries(chunk)?);
        }
        Ok(out)
    }

    fn post_with_retries(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, ScoreError> {
        let body = serde_json::to_string(&ScoreRequest { pairs: pairs.to_vec() })
            .expect("string pairs always serialize");
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.post_once(&body, pairs.len(), attempts) {
                Err(e) if e.is_retryable() && attempts <= self.config.max_retries => continue,
                other => return other,
            }
        }
    }

    fn post_once(&self, body: &str, expected: usize, attempts: usize) -> Result<Vec<f64>, ScoreError> {
        let response = self
            .agent
            .post(&self.config.endpoint)
            .header("Content-Type", "application/json")
            .send(body);
        let mut response = match response {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(ScoreError::Timeout { attempts }),
            Err(e @ (ureq::Error::Io(_) | ureq::Error::ConnectionFailed)) => {
                return Err(ScoreError::Transport {
                    attempts,
                    message: e.to_string(),
                })
            }
            Err(e) => {
                return Err(ScoreError::Protocol {
                    status: None,
                    excerpt: e.to_string(),
                })
            }
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Err(ScoreError::Timeout { attempts }),
            Err(e) => {
                return Err(ScoreError::Protocol {
                    status: Some(status),
                    excerpt: e.to_string(),
                })
            }
        };
        if !(200..300).contains(&status) {
            return Err(ScoreError::Protocol {
                status: Some(status),
                excerpt: excerpt(&text),
            });
        }
        let parsed: ScoreResponse = serde_json::from_str(&text).map_err(|e| ScoreError::Protocol {
            status: Some(status),
            excerpt: format!("{e}: {}", excerpt(&text)),
        })?;
        check_scores(expected, &parsed.scores)?;
        Ok(parsed.scores)
    }
}

impl PairScorer for RemoteScorer {
    fn info(&self) -> ScorerInfo {
        ScorerInfo {
            name: format!("remote:{}", self.config.endpoint),
            batch_limit: self.config.batch_limit,
        }
    }

    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, ScoreError> {
        self.remote_score_batch(pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexical_examples() {
        assert!((lexical_score("who is the best", "who is the best") - 1.0).abs() < 1e-12);
        assert_eq!(lexical_score("alpha beta", "gamma delta"), 0.0);
        assert!((lexical_score("a b", "a c") - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lexical_case_and_punctuation() {
        assert!((lexical_score("Who is THE best?", "who, is the best") - 1.0).abs() < 1e-12);
        assert_eq!(lexical_score("", ""), 1.0);
        assert_eq!(lexical_score("?!", "..."), 1.0);
        assert_eq!(lexical_score("", "word"), 0.0);
        assert_eq!(lexical_score("word", "  "), 0.0);
    }

    #[test]
    fn score_pairs_chunks_and_checks() {
        struct Fixed(Vec<f64>, usize);
        impl PairScorer for Fixed {
            fn info(&self) -> ScorerInfo {
                ScorerInfo { name: "fixed".into(), batch_limit: self.1 }
            }
            fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, ScoreError> {
                assert!(pairs.len() <= self.1);
                Ok(self.0.iter().copied().take(pairs.len()).collect())
            }
        }
        let pairs = vec![("a", "b"); 5];
        assert_eq!(score_pairs(&Fixed(vec![0.5; 2], 2), &pairs).unwrap(), vec![0.5; 5]);
        assert!(matches!(
            score_pairs(&Fixed(vec![1.5; 2], 2), &pairs),
            Err(ScoreError::ContractViolation(_))
        ));
        assert!(matches!(
            score_pairs(&Fixed(vec![0.5], 2), &pairs),
            Err(ScoreError::ContractViolation(_))
        ));
        assert!(score_pairs(&Fixed(vec![], 2), &[]).unwrap().is_empty());
    }

    #[test]
    fn empty_remote_batch_makes_no_request() {
        // Port 9 (discard) is not listening; any request would fail.
        let scorer = RemoteScorer::new(RemoteConfig::new("http://127.0.0.1:9/score")).unwrap();
        assert!(scorer.remote_score_batch(&[]).unwrap().is_empty());
    }

    #[test]
    fn excerpt_truncates_on_char_boundary() {
        let long = "é".repeat(500);
        let e = excerpt(&long);
        assert_eq!(e.chars().count(), EXCERPT_LEN + 1);
    }

    proptest::proptest! {
        #[test]
        fn lexical_is_symmetric_and_bounded(a in "[a-c ,.?]{0,20}", b in "[a-c ,.?]{0,20}") {
            let ab = lexical_score(&a, &b);
            proptest::prop_assert_eq!(ab.to_bits(), lexical_score(&b, &a).to_bits());
            proptest::prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
