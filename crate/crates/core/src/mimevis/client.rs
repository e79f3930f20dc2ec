use std::collections::HashMap;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::format::sha256_hex;
use crate::mimevis::prompt::{parse_round_two, reference_caption};
use crate::mimevis::text::truncate_words;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VlmRequest {
    pub messages: Vec<ChatMessage>,
    /// PNG-encoded stimulus, if the prompt refers to an image.
    pub image_png: Option<Vec<u8>>,
}

impl VlmRequest {
    pub fn text(prompt: impl Into<String>) -> Self {
        Self {
            messages: vec![ChatMessage::user(prompt)],
            image_png: None,
        }
    }

    pub fn prompt(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

/// A chat-style vision-language model.
pub trait VlmClient: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, request: &VlmRequest) -> Result<String>;
}

impl<C: VlmClient + ?Sized> VlmClient for &C {
    fn id(&self) -> String {
        (**self).id()
    }
    fn complete(&self, request: &VlmRequest) -> Result<String> {
        (**self).complete(request)
    }
}

const COLOURS: &[&str] = &["pale grey", "dark", "bright", "silver", "dusty", "charcoal", "ivory", "smoky"];
const SIZES: &[&str] = &["small", "large", "medium sized", "tall", "compact", "wide"];
const PLACES: &[&str] = &[
    "near the centre",
    "toward the left edge",
    "on the right side",
    "in the upper area",
    "close to the bottom",
    "slightly off centre",
];
const TEXTURES: &[&str] = &["smooth", "grainy", "soft", "striped", "mottled", "glossy"];
const SHAPES: &[&str] = &["rounded", "angular", "irregular", "elongated", "blocky"];
const FINISHES: &[&str] = &["matte", "worn", "polished", "faded", "clean"];
const MOODS: &[&str] = &["calm", "busy", "quiet", "lively", "still"];
const LIGHTS: &[&str] = &["dimly lit", "evenly lit", "brightly lit", "softly lit"];
const SIDES: &[&str] = &["left", "right", "upper", "lower"];

/// Deterministic stand-in that knows the objects in each registered image.
#[derive(Debug, Clone, Default)]
pub struct MockVlmClient {
    pub seed: u64,
    objects: HashMap<String, Vec<String>>,
}

impl MockVlmClient {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            objects: HashMap::new(),
        }
    }

    /// Registers the object names (most salient first) shown in `png`.
    pub fn register(&mut self, png: &[u8], names: Vec<String>) {
        self.objects.insert(sha256_hex(png), names);
    }

    fn pick<'a>(&self, table: &[&'a str], hash: &str, salt: u64) -> &'a str {
        let base = u64::from_str_radix(&hash[..12], 16).unwrap_or(0);
        let mix = crate::rng::derive_key(self.seed ^ base, "mock", &[salt]);
        table[(mix % table.len() as u64) as usize]
    }

    fn describe(&self, png: &[u8]) -> Result<String> {
        let hash = sha256_hex(png);
        let names = self
            .objects
            .get(&hash)
            .ok_or_else(|| Error::Generation("mock client has no record of this image".into()))?;
        let mut out = vec![format!("{} ", reference_caption(names).replacen("A photo of", "This image shows", 1))];
        for (i, name) in names.iter().enumerate() {
            let s = i as u64 * 8;
            out.push(format!(
                "The {name} is {} and {}, placed {} with a {} texture. ",
                self.pick(COLOURS, &hash, s),
                self.pick(SIZES, &hash, s + 1),
                self.pick(PLACES, &hash, s + 2),
                self.pick(TEXTURES, &hash, s + 3)
            ));
            out.push(format!(
                "Its outline is {} and its surface looks {}. ",
                self.pick(SHAPES, &hash, s + 4),
                self.pick(FINISHES, &hash, s + 5)
            ));
        }
        out.push(format!(
            "The scene is {} with a {} background and soft shadows across the frame. ",
            self.pick(LIGHTS, &hash, 1000),
            self.pick(COLOURS, &hash, 1001)
        ));
        out.push(format!(
            "Light falls from the {} side, and the {} foreground fades into a blurred distance. ",
            self.pick(SIDES, &hash, 1002),
            self.pick(TEXTURES, &hash, 1003)
        ));
        out.push(format!(
            "Overall the composition feels {} and balanced, with clear edges and gentle contrast between regions.",
            self.pick(MOODS, &hash, 1004)
        ));
        Ok(out.concat())
    }
}

impl VlmClient for MockVlmClient {
    fn id(&self) -> String {
        format!("mock-{}", self.seed)
    }

    fn complete(&self, request: &VlmRequest) -> Result<String> {
        if let Some(png) = &request.image_png {
            return self.describe(png);
        }
        let prompt = request.prompt();
        let parsed = parse_round_two(&prompt)
            .ok_or_else(|| Error::Generation("mock client could not parse the condensation prompt".into()))?;
        // Reference first, then description detail, cut at the budget.
        let merged = format!("{} {}", parsed.reference, parsed.description);
        Ok(truncate_words(&merged, parsed.budget))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Status(u16),
    Other(String),
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Timeout => write!(f, "timed out"),
            Self::Status(code) => write!(f, "http status {code}"),
            Self::Other(msg) => write!(f, "{msg}"),
        }
    }
}

/// Moves one JSON request to an endpoint and returns the JSON reply.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> std::result::Result<Value, TransportError>;
}

pub const API_KEY_ENV: &str = "MINDSEM_VLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HttpClientConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_ms: u64,
    pub max_retries: usize,
    pub backoff_ms: u64,
}

impl Default for HttpClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat".into(),
            model: "default".into(),
            timeout_ms: 60_000,
            max_retries: 2,
            backoff_ms: 500,
        }
    }
}

/// Remote client speaking a minimal JSON chat protocol.
///
/// Request: `{"model", "messages": [{"role", "content"}], "image": {"mime_type", "data"}?}` with
/// base64 image data. Reply: `{"text": ...}` or `{"choices": [{"message": {"content": ...}}]}`.
pub struct HttpVlmClient {
    pub config: HttpClientConfig,
    transport: Box<dyn Transport>,
    api_key: Option<String>,
}

impl HttpVlmClient {
    /// Reads the bearer token from `MINDSEM_VLM_API_KEY` if set.
    pub fn new(config: HttpClientConfig, transport: Box<dyn Transport>) -> Self {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self {
            config,
            transport,
            api_key,
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    #[cfg(feature = "http")]
    pub fn with_ureq(config: HttpClientConfig) -> Self {
        Self::new(config, Box::new(UreqTransport::default()))
    }

    pub fn request_body(&self, request: &VlmRequest) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": request.messages,
        });
        if let Some(png) = &request.image_png {
            body["image"] = json!({
                "mime_type": "image/png",
                "data": base64::engine::general_purpose::STANDARD.encode(png),
            });
        }
        body
    }
}

fn reply_text(reply: &Value) -> Option<&str> {
    reply
        .get("text")
        .and_then(Value::as_str)
        .or_else(|| reply.pointer("/choices/0/message/content").and_then(Value::as_str))
}

impl VlmClient for HttpVlmClient {
    fn id(&self) -> String {
        format!("http:{}:{}", self.config.endpoint, self.config.model)
    }

    fn complete(&self, request: &VlmRequest) -> Result<String> {
        let body = self.request_body(request);
        let timeout = Duration::from_millis(self.config.timeout_ms);
        let attempts = self.config.max_retries + 1;
        let mut last = TransportError::Other("no attempt made".into());
        for attempt in 1..=attempts {
            match self
                .transport
                .post_json(&self.config.endpoint, self.api_key.as_deref(), &body, timeout)
            {
                Ok(reply) => {
                    let text = reply_text(&reply)
                        .ok_or_else(|| Error::Generation("reply has no text field".into()))?;
                    if text.trim().is_empty() {
                        return Err(Error::Generation("empty reply".into()));
                    }
                    return Ok(text.to_string());
                }
                Err(e) => {
                    log::warn!("vlm request attempt {attempt}/{attempts} failed: {e}");
                    last = e;
                    if attempt < attempts && self.config.backoff_ms > 0 {
                        std::thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1)));
                    }
                }
            }
        }
        Err(Error::Client {
            attempts,
            reason: last.to_string(),
        })
    }
}

#[cfg(feature = "http")]
#[derive(Debug, Default)]
pub struct UreqTransport;

#[cfg(feature = "http")]
impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> std::result::Result<Value, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let mut req = agent.post(url);
        if let Some(key) = bearer {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let map = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            ureq::Error::StatusCode(code) => TransportError::Status(code),
            other => TransportError::Other(other.to_string()),
        };
        let mut resp = req.send_json(body).map_err(map)?;
        resp.body_mut().read_json::<Value>().map_err(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Scripted {
        calls: Arc<AtomicUsize>,
        replies: Vec<std::result::Result<Value, TransportError>>,
    }

    impl Transport for Scripted {
        fn post_json(
            &self,
            _: &str,
            _: Option<&str>,
            _: &Value,
            _: Duration,
        ) -> std::result::Result<Value, TransportError> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            self.replies[i.min(self.replies.len() - 1)].clone()
        }
    }

    fn client(replies: Vec<std::result::Result<Value, TransportError>>) -> (HttpVlmClient, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let cfg = HttpClientConfig {
            max_retries: 2,
            backoff_ms: 0,
            ..Default::default()
        };
        let t = Scripted {
            calls: calls.clone(),
            replies,
        };
        (HttpVlmClient::new(cfg, Box::new(t)).with_api_key(None), calls)
    }

    #[test]
    fn timeouts_exhaust_retries_with_attempt_count() {
        let (c, calls) = client(vec![Err(TransportError::Timeout)]);
        match c.complete(&VlmRequest::text("hi")) {
            Err(Error::Client { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn recovers_after_transient_failure() {
        let (c, calls) = client(vec![
            Err(TransportError::Status(503)),
            Ok(json!({"choices": [{"message": {"content": "a cat"}}]})),
        ]);
        assert_eq!(c.complete(&VlmRequest::text("hi")).unwrap(), "a cat");
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn empty_reply_is_a_generation_error() {
        let (c, _) = client(vec![Ok(json!({"text": "  "}))]);
        assert!(matches!(c.complete(&VlmRequest::text("hi")), Err(Error::Generation(_))));
    }

    #[test]
    fn image_is_base64_encoded() {
        let (c, _) = client(vec![Ok(json!({"text": "x"}))]);
        let req = VlmRequest {
            messages: vec![ChatMessage::user("look")],
            image_png: Some(vec![1, 2, 3]),
        };
        let body = c.request_body(&req);
        assert_eq!(body["image"]["data"], "AQID");
        assert_eq!(body["messages"][0]["role"], "user");
    }

    #[test]
    fn mock_mentions_every_object_and_is_deterministic() {
        let mut m = MockVlmClient::new(7);
        m.register(b"img", vec!["person".into(), "umbrella".into()]);
        let req = VlmRequest {
            messages: vec![ChatMessage::user("describe")],
            image_png: Some(b"img".to_vec()),
        };
        let a = m.complete(&req).unwrap();
        assert!(a.contains("person") && a.contains("umbrella"));
        assert_eq!(a, m.complete(&req).unwrap());
        let unknown = VlmRequest {
            image_png: Some(b"other".to_vec()),
            ..req
        };
        assert!(matches!(m.complete(&unknown), Err(Error::Generation(_))));
    }
}
