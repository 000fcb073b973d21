//! Service clients used by the annotation pipeline: an OCR source, an LLM
//! for disambiguation and rationale generation, and a VLM for visual
//! grounding. Tests and hermetic runs use table-driven mocks scripted by
//! request hash (with a question-id convenience key); real deployments use
//! the JSON-over-HTTP adapters at the bottom of this module.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::boxes::BoxPx;
use crate::pipeline::ocr::OcrDocument;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("client unavailable: {0}")]
    Unavailable(String),
    #[error("invalid client response: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectRequest {
    pub question_id: String,
    pub question: String,
    pub answer: String,
    pub ocr_text: String,
    pub candidates: Vec<BoxPx>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RationaleRequest {
    pub question_id: String,
    pub question: String,
    pub answer: String,
    pub ocr_text: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundRequest {
    pub question_id: String,
    pub image_id: String,
    pub question: String,
    pub answer: String,
}

pub trait OcrClient: Send + Sync {
    fn recognize(&self, image_id: &str) -> Result<OcrDocument, ClientError>;
}

pub trait LlmClient: Send + Sync {
    /// Index of the most answer-relevant candidate box.
    fn select_box(&self, req: &SelectRequest) -> Result<usize, ClientError>;
    /// Rationale sentences naming the evidence needed to derive the answer.
    fn rationale(&self, req: &RationaleRequest) -> Result<Vec<String>, ClientError>;
}

pub trait VlmClient: Send + Sync {
    /// Pixel box of the answer-relevant region, located visually.
    fn ground(&self, req: &GroundRequest) -> Result<BoxPx, ClientError>;
}

pub struct ServiceClients {
    pub ocr: Box<dyn OcrClient>,
    pub llm: Box<dyn LlmClient>,
    pub vlm: Box<dyn VlmClient>,
}

/// Stable hex digest of a request's canonical JSON form; mock scripts key on
/// this (or on the plain question id).
pub fn request_hash<T: Serialize>(req: &T) -> String {
    let json = serde_json::to_string(req).expect("requests serialize");
    let digest = Sha256::digest(json.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

// ── mocks ───────────────────────────────────────────────────────────────

/// Scripted responses. Map keys are request hashes or question ids; a JSON
/// `null` value scripts a client failure for that request. `*_default`
/// applies when no key matches; with no default the mock reports itself
/// unavailable, which routes the record to manual.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub select: BTreeMap<String, Option<usize>>,
    #[serde(default)]
    pub rationale: BTreeMap<String, Option<Vec<String>>>,
    #[serde(default)]
    pub ground: BTreeMap<String, Option<BoxPx>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub select_default: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale_default: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_default: Option<BoxPx>,
}

impl MockScript {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }
}

fn lookup<'a, T>(
    map: &'a BTreeMap<String, Option<T>>,
    hash: &str,
    question_id: &str,
) -> Option<&'a Option<T>> {
    map.get(hash).or_else(|| map.get(question_id))
}

pub struct MockLlmClient {
    pub script: MockScript,
}

impl LlmClient for MockLlmClient {
    fn select_box(&self, req: &SelectRequest) -> Result<usize, ClientError> {
        let hash = request_hash(req);
        match lookup(&self.script.select, &hash, &req.question_id) {
            Some(Some(idx)) => Ok(*idx),
            Some(None) => Err(ClientError::Unavailable(format!(
                "scripted select failure for {}",
                req.question_id
            ))),
            None => self.script.select_default.ok_or_else(|| {
                ClientError::Unavailable(format!("no scripted select for {}", req.question_id))
            }),
        }
    }

    fn rationale(&self, req: &RationaleRequest) -> Result<Vec<String>, ClientError> {
        let hash = request_hash(req);
        match lookup(&self.script.rationale, &hash, &req.question_id) {
            Some(Some(sentences)) => Ok(sentences.clone()),
            Some(None) => Err(ClientError::Unavailable(format!(
                "scripted rationale failure for {}",
                req.question_id
            ))),
            None => self.script.rationale_default.clone().ok_or_else(|| {
                ClientError::Unavailable(format!("no scripted rationale for {}", req.question_id))
            }),
        }
    }
}

pub struct MockVlmClient {
    pub script: MockScript,
}

impl VlmClient for MockVlmClient {
    fn ground(&self, req: &GroundRequest) -> Result<BoxPx, ClientError> {
        let hash = request_hash(req);
        match lookup(&self.script.ground, &hash, &req.question_id) {
            Some(Some(bx)) => Ok(*bx),
            Some(None) => Err(ClientError::Unavailable(format!(
                "scripted ground failure for {}",
                req.question_id
            ))),
            None => self.script.ground_default.ok_or_else(|| {
                ClientError::Unavailable(format!("no scripted ground for {}", req.question_id))
            }),
        }
    }
}

/// OCR backed by pre-extracted documents keyed by image id.
pub struct MapOcrClient {
    docs: BTreeMap<String, OcrDocument>,
}

impl MapOcrClient {
    pub fn new(docs: impl IntoIterator<Item = OcrDocument>) -> Self {
        MapOcrClient {
            docs: docs
                .into_iter()
                .map(|d| (d.image_id.clone(), d))
                .collect(),
        }
    }
}

impl OcrClient for MapOcrClient {
    fn recognize(&self, image_id: &str) -> Result<OcrDocument, ClientError> {
        self.docs
            .get(image_id)
            .cloned()
            .ok_or_else(|| ClientError::Unavailable(format!("no OCR document for {image_id}")))
    }
}

/// Mock client bundle from one script plus OCR documents.
pub fn mock_clients(script: MockScript, docs: Vec<OcrDocument>) -> ServiceClients {
    ServiceClients {
        ocr: Box::new(MapOcrClient::new(docs)),
        llm: Box::new(MockLlmClient {
            script: script.clone(),
        }),
        vlm: Box::new(MockVlmClient { script }),
    }
}

// ── HTTP adapters ───────────────────────────────────────────────────────
//
// Each call POSTs the request struct as JSON (plus a rendered prompt) and
// expects a JSON object back:
//   select    → {"choice": <usize>}
//   rationale → {"sentences": ["...", ...]}
//   ground    → {"box": [x0, y0, x1, y1]}

#[derive(Serialize)]
struct PromptedRequest<'a, T: Serialize> {
    #[serde(flatten)]
    request: &'a T,
    prompt: String,
}

#[derive(Deserialize)]
struct SelectResponse {
    choice: usize,
}

#[derive(Deserialize)]
struct RationaleResponse {
    sentences: Vec<String>,
}

#[derive(Deserialize)]
struct GroundResponse {
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

fn post_json<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
    agent: &ureq::Agent,
    url: &str,
    body: &Req,
) -> Result<Resp, ClientError> {
    let mut response = agent
        .post(url)
        .send_json(body)
        .map_err(|e| ClientError::Unavailable(e.to_string()))?;
    response
        .body_mut()
        .read_json::<Resp>()
        .map_err(|e| ClientError::Invalid(e.to_string()))
}

pub struct HttpLlmClient {
    pub select_url: String,
    pub rationale_url: String,
    agent: ureq::Agent,
}

impl HttpLlmClient {
    pub fn new(select_url: impl Into<String>, rationale_url: impl Into<String>) -> Self {
        HttpLlmClient {
            select_url: select_url.into(),
            rationale_url: rationale_url.into(),
            agent: ureq::Agent::new_with_defaults(),
        }
    }
}

impl LlmClient for HttpLlmClient {
    fn select_box(&self, req: &SelectRequest) -> Result<usize, ClientError> {
        let prompt = super::prompts::render_select(req);
        let body = PromptedRequest {
            request: req,
            prompt,
        };
        post_json::<_, SelectResponse>(&self.agent, &self.select_url, &body).map(|r| r.choice)
    }

    fn rationale(&self, req: &RationaleRequest) -> Result<Vec<String>, ClientError> {
        let prompt = super::prompts::render_rationale(req);
        let body = PromptedRequest {
            request: req,
            prompt,
        };
        post_json::<_, RationaleResponse>(&self.agent, &self.rationale_url, &body)
            .map(|r| r.sentences)
    }
}

pub struct HttpVlmClient {
    pub ground_url: String,
    agent: ureq::Agent,
}

impl HttpVlmClient {
    pub fn new(ground_url: impl Into<String>) -> Self {
        HttpVlmClient {
            ground_url: ground_url.into(),
            agent: ureq::Agent::new_with_defaults(),
        }
    }
}

impl VlmClient for HttpVlmClient {
    fn ground(&self, req: &GroundRequest) -> Result<BoxPx, ClientError> {
        let prompt = super::prompts::render_ground(req);
        let body = PromptedRequest {
            request: req,
            prompt,
        };
        let resp: GroundResponse = post_json(&self.agent, &self.ground_url, &body)?;
        BoxPx::new(resp.bbox[0], resp.bbox[1], resp.bbox[2], resp.bbox[3])
            .map_err(|e| ClientError::Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn select_req() -> SelectRequest {
        SelectRequest {
            question_id: "q1".into(),
            question: "what is the total".into(),
            answer: "12".into(),
            ocr_text: "total 12 of 12".into(),
            candidates: vec![
                BoxPx::new(0.0, 0.0, 5.0, 5.0).unwrap(),
                BoxPx::new(10.0, 0.0, 15.0, 5.0).unwrap(),
            ],
        }
    }

    #[test]
    fn request_hash_is_stable_and_input_sensitive() {
        let a = request_hash(&select_req());
        let b = request_hash(&select_req());
        assert_eq!(a, b);
        let mut other = select_req();
        other.answer = "13".into();
        assert_ne!(a, request_hash(&other));
    }

    #[test]
    fn mock_resolves_hash_then_id_then_default() {
        let req = select_req();
        let mut script = MockScript {
            select_default: Some(0),
            ..MockScript::default()
        };
        script.select.insert(request_hash(&req), Some(1));
        let llm = MockLlmClient {
            script: script.clone(),
        };
        assert_eq!(llm.select_box(&req).unwrap(), 1);

        let mut by_id = MockScript::default();
        by_id.select.insert("q1".into(), Some(0));
        let llm = MockLlmClient { script: by_id };
        assert_eq!(llm.select_box(&req).unwrap(), 0);

        let llm = MockLlmClient {
            script: MockScript::default(),
        };
        assert!(matches!(
            llm.select_box(&req),
            Err(ClientError::Unavailable(_))
        ));
    }

    #[test]
    fn scripted_null_is_a_failure() {
        let script = MockScript::from_json(r#"{"select": {"q1": null}}"#).unwrap();
        let llm = MockLlmClient { script };
        assert!(llm.select_box(&select_req()).is_err());
    }

    #[test]
    fn script_json_round_trip() {
        let mut script = MockScript::default();
        script.ground.insert(
            "q3".into(),
            Some(BoxPx::new(1.0, 2.0, 3.0, 4.0).unwrap()),
        );
        script.rationale.insert("q5".into(), None);
        let back = MockScript::from_json(&script.to_json()).unwrap();
        assert_eq!(back.ground.get("q3"), script.ground.get("q3"));
        assert_eq!(back.rationale.get("q5"), Some(&None));
    }
}
