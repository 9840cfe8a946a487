//! Client for an external vision-language service (JSON over HTTP).

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::render::{self, RenderedFrame};
use crate::semantics::{PromptTemplate, SemanticBackend, SemanticEmbedding};

pub const ENDPOINT_ENV: &str = "MOTIONKIT_VLM_ENDPOINT";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const BEAM_WIDTH: u32 = 5;
pub const LENGTH_PENALTY: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Embed,
    Vqa,
    Itm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VlmRequest {
    /// Base64-encoded PNGs, one per view.
    pub images: Vec<String>,
    pub mode: Mode,
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub beam_width: u32,
    pub length_penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VlmResponse {
    #[serde(default)]
    pub embedding: Option<Value>,
    #[serde(default)]
    pub answer: Option<String>,
    #[serde(default)]
    pub score: Option<Value>,
    pub model_id: String,
}

/// Moves one request/response pair. Implementations must be safe to share.
pub trait Transport: Send + Sync {
    fn send(&self, request: &VlmRequest) -> Result<Value>;
}

/// HTTP transport with bounded retries on connection failures and 5xx answers.
pub struct HttpTransport {
    endpoint: String,
    agent: ureq::Agent,
    retries: u32,
    backoff: Duration,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            endpoint: endpoint.into(),
            agent: config.into(),
            retries: 2,
            backoff: Duration::from_millis(200),
        }
    }

    pub fn with_retries(mut self, retries: u32, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }

    fn attempt(&self, request: &VlmRequest) -> Result<Value> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(request)
            .map_err(|e| Error::ServiceUnavailable(format!("{}: {e}", self.endpoint)))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::ServiceUnavailable(format!("{}: reading response failed: {e}", self.endpoint)))?;
        if status >= 500 {
            return Err(Error::ServiceUnavailable(format!("{} answered HTTP {status}", self.endpoint)));
        }
        if !(200..300).contains(&status) {
            return Err(Error::ServiceProtocolError(format!("HTTP {status}: {body}")));
        }
        serde_json::from_str(&body).map_err(|e| Error::ServiceProtocolError(format!("response is not JSON: {e}")))
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &VlmRequest) -> Result<Value> {
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(request) {
                Err(Error::ServiceUnavailable(msg)) if attempt < self.retries => {
                    log::warn!("VLM request failed ({msg}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Transcript of the two-round guided question protocol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidedAnswer {
    pub question1: String,
    pub answer1: String,
    pub question2: String,
    pub answer2: String,
}

pub struct VlmClient {
    transport: Box<dyn Transport>,
    pub prompt: PromptTemplate,
    /// Fixed embedding width for a run; set by the first response if `None`.
    expected_width: std::sync::OnceLock<usize>,
}

impl VlmClient {
    pub fn new(transport: Box<dyn Transport>) -> Self {
        Self {
            transport,
            prompt: PromptTemplate::default(),
            expected_width: std::sync::OnceLock::new(),
        }
    }

    pub fn http(endpoint: &str, timeout: Duration) -> Self {
        Self::new(Box::new(HttpTransport::new(endpoint, timeout)))
    }

    /// Client for the endpoint in `MOTIONKIT_VLM_ENDPOINT`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var(ENDPOINT_ENV)
            .ok()
            .filter(|s| !s.trim().is_empty())
            .map(|e| Self::http(&e, DEFAULT_TIMEOUT))
    }

    pub fn with_expected_width(self, width: usize) -> Self {
        let _ = self.expected_width.set(width);
        self
    }

    fn request(&self, frame: &RenderedFrame, mode: Mode, prompt: String, text: Option<String>) -> Result<VlmResponse> {
        let images = frame
            .images
            .iter()
            .map(|img| render::encode_png(img).map(|b| base64::engine::general_purpose::STANDARD.encode(b)))
            .collect::<Result<_>>()?;
        let req = VlmRequest {
            images,
            mode,
            prompt,
            text,
            beam_width: BEAM_WIDTH,
            length_penalty: LENGTH_PENALTY,
        };
        let raw = self.transport.send(&req)?;
        serde_json::from_value(raw).map_err(|e| Error::ServiceProtocolError(format!("malformed response: {e}")))
    }

    /// Asks `q1`, then `q2` with the first answer substituted.
    pub fn guided_vqa(&self, frame: &RenderedFrame) -> Result<GuidedAnswer> {
        let question1 = self.prompt.q1.clone();
        let answer1 = self
            .request(frame, Mode::Vqa, question1.clone(), None)?
            .answer
            .ok_or_else(|| Error::ServiceProtocolError("VQA response has no answer".into()))?;
        let question2 = self.prompt.second_question(&answer1);
        let answer2 = self
            .request(frame, Mode::Vqa, question2.clone(), None)?
            .answer
            .ok_or_else(|| Error::ServiceProtocolError("VQA response has no answer".into()))?;
        Ok(GuidedAnswer {
            question1,
            answer1,
            question2,
            answer2,
        })
    }

    /// Image-text matching probability.
    pub fn itm_score(&self, frame: &RenderedFrame, text: &str) -> Result<f64> {
        let resp = self.request(frame, Mode::Itm, self.prompt.q1.clone(), Some(text.to_string()))?;
        let score = resp
            .score
            .as_ref()
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::ServiceProtocolError("ITM response has no numeric score".into()))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::ServiceProtocolError(format!("ITM score {score} is outside [0, 1]")));
        }
        Ok(score)
    }

    fn parse_embedding(&self, value: &Value) -> Result<Vec<f64>> {
        let bad = || Error::ServiceProtocolError("embedding must be a list of numbers or a list of rows".into());
        let rows = value.as_array().ok_or_else(bad)?;
        let number = |v: &Value| v.as_f64().filter(|x| x.is_finite()).ok_or_else(bad);
        let vector: Vec<f64> = if rows.first().is_some_and(Value::is_array) {
            // per-token (or per-view) rows: mean-pool
            let rows: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.as_array().ok_or_else(bad)?.iter().map(number).collect())
                .collect::<Result<_>>()?;
            let k = rows[0].len();
            if rows.iter().any(|r| r.len() != k) {
                return Err(Error::ServiceProtocolError("embedding rows differ in width".into()));
            }
            (0..k).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64).collect()
        } else {
            rows.iter().map(number).collect::<Result<_>>()?
        };
        if vector.is_empty() {
            return Err(bad());
        }
        let expected = *self.expected_width.get_or_init(|| vector.len());
        if vector.len() != expected {
            return Err(Error::EmbeddingWidthMismatch {
                expected,
                got: vector.len(),
            });
        }
        Ok(vector)
    }
}

impl SemanticBackend for VlmClient {
    fn backend_id(&self) -> String {
        "vlm".into()
    }

    fn embed(&self, frame: &RenderedFrame) -> Result<SemanticEmbedding> {
        let prompt = self.prompt.q1.clone();
        let resp = self.request(frame, Mode::Embed, prompt, None)?;
        let value = resp
            .embedding
            .as_ref()
            .ok_or_else(|| Error::ServiceProtocolError("embed response has no embedding".into()))?;
        Ok(SemanticEmbedding {
            vector: self.parse_embedding(value)?,
            backend_id: format!("vlm:{}", resp.model_id),
        })
    }
}

/// In-memory transport answering from a closure and recording every request.
pub struct StubTransport<F> {
    respond: F,
    log: std::sync::Mutex<Vec<VlmRequest>>,
}

impl<F: Fn(&VlmRequest) -> Result<Value> + Send + Sync> StubTransport<F> {
    pub fn new(respond: F) -> Self {
        Self {
            respond,
            log: std::sync::Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<VlmRequest> {
        self.log.lock().unwrap().clone()
    }
}

impl<F: Fn(&VlmRequest) -> Result<Value> + Send + Sync> Transport for StubTransport<F> {
    fn send(&self, request: &VlmRequest) -> Result<Value> {
        self.log.lock().unwrap().push(request.clone());
        (self.respond)(request)
    }
}

impl<T: Transport + ?Sized> Transport for std::sync::Arc<T> {
    fn send(&self, request: &VlmRequest) -> Result<Value> {
        (**self).send(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::View;
    use crate::tensor::Tensor;
    use serde_json::json;
    use std::sync::Arc;

    fn frame() -> RenderedFrame {
        RenderedFrame {
            views: View::ALL.to_vec(),
            images: (0..3).map(|_| Tensor::zeros([8, 8])).collect(),
        }
    }

    #[test]
    fn guided_protocol() {
        let stub = Arc::new(StubTransport::new(|req: &VlmRequest| {
            let answer = if req.prompt.starts_with("Where") {
                "hands are above the head"
            } else {
                "the character is raising both hands"
            };
            Ok(json!({"answer": answer, "model_id": "stub"}))
        }));
        let client = VlmClient::new(Box::new(stub.clone()));
        let out = client.guided_vqa(&frame()).unwrap();
        assert_eq!(out.answer2, "the character is raising both hands");
        let reqs = stub.requests();
        assert_eq!(reqs.len(), 2);
        assert_eq!(reqs[0].prompt, "Where are the hands of the character?");
        assert!(reqs[1].prompt.contains("hands are above the head"));
        assert_eq!(reqs[1].prompt, "hands are above the head What is the character in the image doing?");
        for r in &reqs {
            assert_eq!(r.mode, Mode::Vqa);
            assert_eq!(r.beam_width, 5);
            assert_eq!(r.length_penalty, 1.0);
            assert_eq!(r.images.len(), 3);
        }
        let wire = serde_json::to_value(&reqs[0]).unwrap();
        assert_eq!(wire["beam_width"], json!(5));
        assert_eq!(wire["length_penalty"], json!(1.0));
        assert_eq!(wire["mode"], json!("vqa"));
    }

    #[test]
    fn embeddings() {
        let client = VlmClient::new(Box::new(StubTransport::new(|_: &VlmRequest| {
            Ok(json!({"embedding": [0.5, -1.0, 2.0], "model_id": "stub"}))
        })));
        let a = client.embed(&frame()).unwrap();
        assert_eq!(a.vector, vec![0.5, -1.0, 2.0]);
        assert_eq!(client.embed(&frame()).unwrap(), a);

        let pooled = VlmClient::new(Box::new(StubTransport::new(|_: &VlmRequest| {
            Ok(json!({"embedding": [[1.0, 2.0], [3.0, 4.0], [5.0, 0.0]], "model_id": "stub"}))
        })));
        assert_eq!(pooled.embed(&frame()).unwrap().vector, vec![3.0, 2.0]);

        let wrong = VlmClient::new(Box::new(StubTransport::new(|_: &VlmRequest| {
            Ok(json!({"embedding": [1.0, 2.0], "model_id": "stub"}))
        })))
        .with_expected_width(4);
        assert!(matches!(
            wrong.embed(&frame()),
            Err(Error::EmbeddingWidthMismatch { expected: 4, got: 2 })
        ));
        let malformed = VlmClient::new(Box::new(StubTransport::new(|_: &VlmRequest| {
            Ok(json!({"embedding": "nope", "model_id": "stub"}))
        })));
        assert!(matches!(malformed.embed(&frame()), Err(Error::ServiceProtocolError(_))));
    }

    #[test]
    fn itm_contract() {
        let ok = VlmClient::new(Box::new(StubTransport::new(|_: &VlmRequest| Ok(json!({"score": 0.7, "model_id": "s"})))));
        assert_eq!(ok.itm_score(&frame(), "waving").unwrap(), 0.7);
        for bad in [json!(1.5), json!(-0.1), json!("NaN")] {
            let c = VlmClient::new(Box::new(StubTransport::new(move |_: &VlmRequest| {
                Ok(json!({"score": bad.clone(), "model_id": "s"}))
            })));
            assert!(matches!(c.itm_score(&frame(), "x"), Err(Error::ServiceProtocolError(_))));
        }
    }

    #[test]
    fn unreachable_endpoint() {
        let client = VlmClient::new(Box::new(
            HttpTransport::new("http://127.0.0.1:9/", Duration::from_secs(2)).with_retries(0, Duration::ZERO),
        ));
        assert!(matches!(client.embed(&frame()), Err(Error::ServiceUnavailable(_))));
    }
}
