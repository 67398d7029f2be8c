//! Text-generation backends for the build pipeline: a deterministic mock and
//! a JSON-over-HTTP client mirroring the judge contract with an added
//! attachments field.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::BuildError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    /// Reserved for real deployments (image payload references); the mock
    /// and toy pipelines leave it empty.
    pub attachments: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationReply {
    pub text: String,
}

pub trait TextBackend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BuildError>;
    fn id(&self) -> &str;
}

/// Deterministic mock. For diagnosis prompts it answers with a wordy
/// first-person report that mentions the category before the bbox (so the
/// reflection pass has real reordering work); for reflection prompts it
/// extracts the category and bbox from the prior response and re-emits the
/// canonical schema text.
pub struct MockTextBackend;

const CATEGORY_MARK: &str = "category=";
const BBOX_MARK: &str = "bbox=";
const PRIOR_MARK: &str = "prior:";

impl TextBackend for MockTextBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BuildError> {
        let p = &request.prompt;
        if let Some(prior) = extract_after(p, PRIOR_MARK) {
            // Reflection: reorder whatever the first pass produced.
            let category = extract_quoted(&prior, "finding of ")
                .or_else(|| extract_quoted(&prior, "category "));
            let bbox = extract_bbox_words(&prior);
            return match (category, bbox) {
                (Some(cat), Some(bb)) => Ok(format!(
                    "abnormality present bbox {bb} category {cat}"
                )),
                // Leave unparsable output as-is; the validator flags it.
                _ => Ok(prior.trim().to_string()),
            };
        }
        let category = extract_value(p, CATEGORY_MARK)
            .ok_or_else(|| BuildError::Backend("prompt missing category slot".into()))?;
        let bbox = extract_value(p, BBOX_MARK)
            .ok_or_else(|| BuildError::Backend("prompt missing bbox slot".into()))?;
        Ok(format!(
            "the study shows a finding of {category} within the marked area bbox {bbox} as annotated"
        ))
    }

    fn id(&self) -> &str {
        "mock"
    }
}

fn extract_value(text: &str, mark: &str) -> Option<String> {
    let start = text.find(mark)? + mark.len();
    let rest = &text[start..];
    let end = rest.find(';').unwrap_or(rest.len());
    Some(rest[..end].trim().to_string())
}

fn extract_after(text: &str, mark: &str) -> Option<String> {
    text.find(mark)
        .map(|i| text[i + mark.len()..].trim().to_string())
}

/// Two words following a marker phrase, e.g. "finding of lung nodule".
fn extract_quoted(text: &str, mark: &str) -> Option<String> {
    let start = text.find(mark)? + mark.len();
    let words: Vec<&str> = text[start..].split_whitespace().take(2).collect();
    (words.len() == 2).then(|| words.join(" "))
}

/// Four integer words following "bbox".
fn extract_bbox_words(text: &str) -> Option<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let i = words.iter().position(|&w| w == "bbox")?;
    let coords = words.get(i + 1..i + 5)?;
    coords
        .iter()
        .all(|w| w.parse::<i64>().is_ok())
        .then(|| coords.join(" "))
}

/// Remote backend speaking JSON over HTTP.
pub struct HttpTextBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
}

impl HttpTextBackend {
    pub fn new(endpoint: String, timeout: Duration) -> Result<Self, BuildError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BuildError::Backend(e.to_string()))?;
        Ok(Self { client, endpoint })
    }
}

impl TextBackend for HttpTextBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BuildError> {
        let reply = self
            .client
            .post(&self.endpoint)
            .json(request)
            .send()
            .map_err(|e| BuildError::Transport(e.to_string()))?;
        if !reply.status().is_success() {
            return Err(BuildError::Transport(format!("http status {}", reply.status())));
        }
        let body: GenerationReply = reply
            .json()
            .map_err(|e| BuildError::Backend(format!("malformed reply: {e}")))?;
        Ok(body.text)
    }

    fn id(&self) -> &str {
        "http"
    }
}
