//! Relevance judge: rule-based reference rubric, JSON-over-HTTP client for a
//! remote judge, and a canned-response mock server for tests.
//!
//! Wire contract: POST a JSON body `{query_text, response_text,
//! reference_text}`; the endpoint replies `{score, rationale}` with
//! `score` in [0, 1].

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sample::{Response, Sample};
use crate::vocab::Vocab;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge transport error: {0}")]
    Transport(String),
    #[error("judge returned a malformed payload: {0}")]
    Malformed(String),
    #[error("judge score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub query_text: String,
    pub response_text: String,
    pub reference_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    /// Relevance score in [0, 1].
    pub score: f64,
    pub rationale: String,
}

pub trait JudgeBackend: Send + Sync {
    fn judge(&self, request: &JudgeRequest) -> Result<JudgeVerdict, JudgeError>;
    fn id(&self) -> &str;
}

/// Rubric weights for the reference judge. The defaults award 0.2 for a
/// schema-valid response, 0.6 for the correct category, and 0.2 for carrying
/// any bbox at all.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RubricWeights {
    pub schema: f64,
    pub category: f64,
    pub bbox: f64,
}

impl Default for RubricWeights {
    fn default() -> Self {
        Self {
            schema: 0.2,
            category: 0.6,
            bbox: 0.2,
        }
    }
}

/// Deterministic rule-based judge; parses both texts under the response
/// schema and scores the rubric against the reference's category.
pub struct ReferenceJudge {
    pub weights: RubricWeights,
    vocab: Vocab,
}

impl ReferenceJudge {
    pub fn new(vocab: Vocab, weights: RubricWeights) -> Self {
        Self { weights, vocab }
    }

    fn score_parsed(&self, response: &Response, gt_category: Option<usize>) -> JudgeVerdict {
        let mut score = 0.0;
        let mut notes = Vec::new();
        if response.schema_valid {
            score += self.weights.schema;
            notes.push("schema ok");
        } else {
            notes.push("schema invalid");
        }
        match (response.parsed_category, gt_category) {
            (Some(got), Some(want)) if got == want => {
                score += self.weights.category;
                notes.push("category correct");
            }
            _ => notes.push("category wrong or missing"),
        }
        if response.parsed_bbox.is_some() {
            score += self.weights.bbox;
            notes.push("bbox present");
        } else {
            notes.push("bbox missing");
        }
        JudgeVerdict {
            score,
            rationale: notes.join("; "),
        }
    }
}

impl JudgeBackend for ReferenceJudge {
    fn judge(&self, request: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
        let parse = |text: &str| {
            let tokens = text
                .split_whitespace()
                .filter_map(|w| self.vocab.token(w).ok())
                .collect::<Vec<_>>();
            self.vocab.parse_response(&tokens)
        };
        let response = parse(&request.response_text);
        let reference = parse(&request.reference_text);
        Ok(self.score_parsed(&response, reference.parsed_category))
    }

    fn id(&self) -> &str {
        "reference"
    }
}

/// Convenience entry point used by the trainer: renders the sample and
/// response to the wire texts and dispatches to the configured backend.
pub fn relevance_judge(
    response: &Response,
    sample: &Sample,
    vocab: &Vocab,
    backend: &dyn JudgeBackend,
) -> Result<JudgeVerdict, JudgeError> {
    let request = JudgeRequest {
        query_text: vocab.decode_text(&sample.query),
        response_text: vocab.decode_text(&response.tokens),
        reference_text: vocab.decode_text(&sample.reference_response),
    };
    let verdict = backend.judge(&request)?;
    if !(0.0..=1.0).contains(&verdict.score) {
        return Err(JudgeError::ScoreOutOfRange(verdict.score));
    }
    Ok(verdict)
}

/// Remote judge speaking the JSON-over-HTTP contract.
pub struct HttpJudge {
    client: reqwest::blocking::Client,
    endpoint: String,
}

impl HttpJudge {
    pub fn new(endpoint: String, timeout: Duration) -> Result<Self, JudgeError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| JudgeError::Transport(e.to_string()))?;
        Ok(Self { client, endpoint })
    }
}

impl JudgeBackend for HttpJudge {
    fn judge(&self, request: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
        let reply = self
            .client
            .post(&self.endpoint)
            .json(request)
            .send()
            .map_err(|e| JudgeError::Transport(e.to_string()))?;
        if !reply.status().is_success() {
            return Err(JudgeError::Transport(format!("http status {}", reply.status())));
        }
        let verdict: JudgeVerdict = reply
            .json()
            .map_err(|e| JudgeError::Malformed(e.to_string()))?;
        if !(0.0..=1.0).contains(&verdict.score) {
            return Err(JudgeError::ScoreOutOfRange(verdict.score));
        }
        Ok(verdict)
    }

    fn id(&self) -> &str {
        "http"
    }
}

/// Tries the primary backend and, on transport or payload errors, falls back
/// to the secondary (typically the reference judge).
pub struct FallbackJudge {
    pub primary: Box<dyn JudgeBackend>,
    pub fallback: Box<dyn JudgeBackend>,
}

impl JudgeBackend for FallbackJudge {
    fn judge(&self, request: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
        match self.primary.judge(request) {
            Ok(v) => Ok(v),
            Err(_) => self.fallback.judge(request),
        }
    }

    fn id(&self) -> &str {
        "fallback"
    }
}

/// Minimal single-threaded HTTP server replaying canned JSON bodies, for
/// exercising the remote contract in tests. Responses are served in order;
/// when the queue is exhausted the last entry repeats.
pub struct MockJudgeServer {
    addr: String,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockJudgeServer {
    pub fn start(canned_bodies: Vec<String>) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = format!("http://{}", listener.local_addr()?);
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = Arc::clone(&stop);
        let queue = Arc::new(Mutex::new(canned_bodies));
        let handle = std::thread::spawn(move || {
            while !stop2.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let body = {
                            let mut q = queue.lock().unwrap();
                            if q.len() > 1 {
                                q.remove(0)
                            } else {
                                q.first().cloned().unwrap_or_default()
                            }
                        };
                        let _ = serve_one(stream, &body);
                    }
                    Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(2));
                    }
                    Err(_) => break,
                }
            }
        });
        Ok(Self {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    /// Endpoint URL, e.g. `http://127.0.0.1:PORT`.
    pub fn url(&self) -> &str {
        &self.addr
    }
}

impl Drop for MockJudgeServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve_one(mut stream: TcpStream, body: &str) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_millis(500)))?;
    // Drain the request: headers, then Content-Length bytes of body.
    let mut buf = Vec::new();
    let mut chunk = [0u8; 1024];
    let header_end;
    loop {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Ok(());
        }
        buf.extend_from_slice(&chunk[..n]);
        if let Some(pos) = find_header_end(&buf) {
            header_end = pos;
            break;
        }
        if buf.len() > 1 << 20 {
            return Ok(());
        }
    }
    let headers = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let content_length = headers
        .lines()
        .find_map(|l| {
            let (k, v) = l.split_once(':')?;
            k.trim()
                .eq_ignore_ascii_case("content-length")
                .then(|| v.trim().parse::<usize>().ok())?
        })
        .unwrap_or(0);
    let mut have = buf.len() - (header_end + 4);
    while have < content_length {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            break;
        }
        have += n;
    }
    let reply = format!(
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        body.len(),
        body
    );
    stream.write_all(reply.as_bytes())
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}
