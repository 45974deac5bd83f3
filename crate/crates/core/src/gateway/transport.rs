use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use async_trait::async_trait;
use serde_json::{json, Value};

/// The single request shape every provider is adapted to: one user
/// message, plain-text completion.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Completion {
    Text(String),
    /// The provider flagged the request as declined or filtered.
    Refused(String),
    /// Response arrived but carried no usable text.
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    /// Worth retrying: timeouts, connection failures, 429 and 5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
}

#[async_trait]
pub trait Transport: Send + Sync {
    async fn complete(&self, request: &CompletionRequest) -> Result<Completion, TransportError>;
}

fn classify(err: reqwest::Error) -> TransportError {
    if err.is_timeout() || err.is_connect() || err.is_request() {
        TransportError::Transient(err.to_string())
    } else {
        TransportError::Fatal(err.to_string())
    }
}

async fn post_json(req: reqwest::RequestBuilder) -> Result<Option<Value>, TransportError> {
    let resp = req.send().await.map_err(classify)?;
    let status = resp.status();
    let body = resp.text().await.map_err(classify)?;
    if status.as_u16() == 429 || status.is_server_error() {
        return Err(TransportError::Transient(format!("HTTP {status}")));
    }
    if !status.is_success() {
        let snippet: String = body.chars().take(200).collect();
        return Err(TransportError::Fatal(format!("HTTP {status}: {snippet}")));
    }
    if body.trim().is_empty() {
        return Ok(None);
    }
    Ok(serde_json::from_str(&body).ok())
}

fn client(timeout: Duration) -> Result<reqwest::Client, reqwest::Error> {
    reqwest::Client::builder().timeout(timeout).build()
}

/// OpenAI-style `POST {base}/chat/completions`.
#[derive(Debug, Clone)]
pub struct OpenAiChat {
    client: reqwest::Client,
    base_url: String,
    api_key: Option<String>,
}

impl OpenAiChat {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, reqwest::Error> {
        Ok(Self {
            client: client(timeout)?,
            base_url: base_url.trim_end_matches('/').to_owned(),
            api_key,
        })
    }
}

#[async_trait]
impl Transport for OpenAiChat {
    async fn complete(&self, request: &CompletionRequest) -> Result<Completion, TransportError> {
        let body = json!({
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut req = self.client.post(format!("{}/chat/completions", self.base_url)).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let Some(v) = post_json(req).await? else {
            return Ok(Completion::Malformed("empty body".into()));
        };
        let choice = &v["choices"][0];
        if let Some(refusal) = choice["message"]["refusal"].as_str() {
            return Ok(Completion::Refused(refusal.to_owned()));
        }
        if choice["finish_reason"] == "content_filter" {
            return Ok(Completion::Refused("content_filter".into()));
        }
        Ok(match choice["message"]["content"].as_str() {
            Some(text) if !text.trim().is_empty() => Completion::Text(text.to_owned()),
            _ => Completion::Malformed("no message content".into()),
        })
    }
}

/// Gemini-style `POST {base}/models/{model}:generateContent`.
#[derive(Debug, Clone)]
pub struct GeminiGenerate {
    client: reqwest::Client,
    base_url: String,
    api_key: Option<String>,
}

impl GeminiGenerate {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, reqwest::Error> {
        Ok(Self {
            client: client(timeout)?,
            base_url: base_url.trim_end_matches('/').to_owned(),
            api_key,
        })
    }
}

#[async_trait]
impl Transport for GeminiGenerate {
    async fn complete(&self, request: &CompletionRequest) -> Result<Completion, TransportError> {
        let body = json!({
            "contents": [{"role": "user", "parts": [{"text": request.prompt}]}],
            "generationConfig": {
                "temperature": request.temperature,
                "maxOutputTokens": request.max_tokens,
            },
        });
        let url = format!("{}/models/{}:generateContent", self.base_url, request.model);
        let mut req = self.client.post(url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.header("x-goog-api-key", key);
        }
        let Some(v) = post_json(req).await? else {
            return Ok(Completion::Malformed("empty body".into()));
        };
        if let Some(reason) = v["promptFeedback"]["blockReason"].as_str() {
            return Ok(Completion::Refused(reason.to_owned()));
        }
        let candidate = &v["candidates"][0];
        if candidate["finishReason"] == "SAFETY" {
            return Ok(Completion::Refused("SAFETY".into()));
        }
        let text: String = candidate["content"]["parts"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|p| p["text"].as_str())
            .collect();
        Ok(if text.trim().is_empty() {
            Completion::Malformed("no candidate text".into())
        } else {
            Completion::Text(text)
        })
    }
}

type Responder = dyn Fn(&CompletionRequest) -> Result<Completion, TransportError> + Send + Sync;

/// Answers from a closure; counts dispatches. Used for fixtures and tests.
pub struct FnTransport {
    respond: Box<Responder>,
    calls: AtomicUsize,
}

impl FnTransport {
    pub fn new(respond: impl Fn(&CompletionRequest) -> Result<Completion, TransportError> + Send + Sync + 'static) -> Self {
        Self {
            respond: Box::new(respond),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl std::fmt::Debug for FnTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnTransport").field("calls", &self.calls()).finish()
    }
}

#[async_trait]
impl Transport for FnTransport {
    async fn complete(&self, request: &CompletionRequest) -> Result<Completion, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.respond)(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::{extract::Path, http::HeaderMap, http::StatusCode, routing::post, Json, Router};

    async fn serve(app: Router) -> String {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        format!("http://{addr}")
    }

    fn request(prompt: &str) -> CompletionRequest {
        CompletionRequest {
            model: "test-model".into(),
            prompt: prompt.into(),
            temperature: 0.0,
            max_tokens: 64,
        }
    }

    async fn openai(headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, String) {
        assert_eq!(headers["authorization"], "Bearer sk-test");
        let prompt = body["messages"][0]["content"].as_str().unwrap();
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["max_tokens"], 64);
        match prompt {
            "empty" => (StatusCode::OK, String::new()),
            "busy" => (StatusCode::TOO_MANY_REQUESTS, String::new()),
            "bad" => (StatusCode::BAD_REQUEST, "nope".into()),
            "refuse" => (
                StatusCode::OK,
                json!({"choices": [{"message": {"content": null, "refusal": "I can't help"}}]}).to_string(),
            ),
            p => (
                StatusCode::OK,
                json!({"choices": [{"message": {"content": format!("1. {p}")}, "finish_reason": "stop"}]}).to_string(),
            ),
        }
    }

    #[tokio::test]
    async fn openai_adapter_maps_outcomes() {
        let base = serve(Router::new().route("/v1/chat/completions", post(openai))).await;
        let t = OpenAiChat::new(&format!("{base}/v1/"), Some("sk-test".into()), Duration::from_secs(5)).unwrap();
        assert_eq!(t.complete(&request("Dune")).await.unwrap(), Completion::Text("1. Dune".into()));
        assert!(matches!(t.complete(&request("empty")).await.unwrap(), Completion::Malformed(_)));
        assert!(matches!(t.complete(&request("refuse")).await.unwrap(), Completion::Refused(_)));
        assert!(matches!(t.complete(&request("busy")).await, Err(TransportError::Transient(_))));
        assert!(matches!(t.complete(&request("bad")).await, Err(TransportError::Fatal(_))));
    }

    async fn gemini(Path(model): Path<String>, headers: HeaderMap, Json(body): Json<Value>) -> String {
        assert_eq!(model, "test-model:generateContent");
        assert_eq!(headers["x-goog-api-key"], "g-test");
        assert_eq!(body["generationConfig"]["maxOutputTokens"], 64);
        match body["contents"][0]["parts"][0]["text"].as_str().unwrap() {
            "block" => json!({"promptFeedback": {"blockReason": "SAFETY"}}).to_string(),
            "blank" => json!({"candidates": [{"content": {"parts": []}}]}).to_string(),
            p => json!({"candidates": [{"content": {"parts": [{"text": "1. "}, {"text": p}]}, "finishReason": "STOP"}]})
                .to_string(),
        }
    }

    #[tokio::test]
    async fn gemini_adapter_maps_outcomes() {
        let base = serve(Router::new().route("/models/{model}", post(gemini))).await;
        let t = GeminiGenerate::new(&base, Some("g-test".into()), Duration::from_secs(5)).unwrap();
        assert_eq!(t.complete(&request("Tenet")).await.unwrap(), Completion::Text("1. Tenet".into()));
        assert!(matches!(t.complete(&request("block")).await.unwrap(), Completion::Refused(_)));
        assert!(matches!(t.complete(&request("blank")).await.unwrap(), Completion::Malformed(_)));
    }

    #[tokio::test]
    async fn unreachable_host_is_transient() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let t = OpenAiChat::new(&format!("http://{addr}"), None, Duration::from_secs(2)).unwrap();
        assert!(matches!(t.complete(&request("x")).await, Err(TransportError::Transient(_))));
    }
}
