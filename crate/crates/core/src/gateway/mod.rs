//! Provider dispatch with a record-replay cache.
//!
//! Every prompt exchange is keyed by a content hash and appended to a JSONL
//! [`ReplayStore`]. Re-running a matrix only dispatches keys the store has
//! not resolved, and a replay-only provider never touches the network.

mod store;
mod transport;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::{Mutex, Semaphore};
use tokio::time::Instant;

pub use store::ReplayStore;
pub use transport::{Completion, CompletionRequest, FnTransport, GeminiGenerate, OpenAiChat, Transport, TransportError};

use crate::domain::{AuditConfig, DecodingParams};
use crate::prompt::PromptUnit;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {source}", path.display())]
    Store {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: {source}", path.display())]
    Providers {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unknown provider `{0}`")]
    UnknownProvider(String),
    #[error("provider `{provider}`: {message}")]
    InvalidProvider { provider: String, message: String },
    #[error("provider `{provider}` needs credentials in ${var}")]
    MissingCredential { provider: String, var: String },
    #[error("http client: {0}")]
    Client(#[from] reqwest::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    OpenaiChatCompatible,
    GeminiGenerateContent,
    ReplayOnly,
}

fn default_concurrency() -> usize {
    4
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    3
}

fn default_rate() -> u32 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderSpec {
    pub id: String,
    pub kind: ProviderKind,
    #[serde(default)]
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub auth_env_var: Option<String>,
    /// Requests per minute.
    #[serde(default = "default_rate")]
    pub rate_limit: u32,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    /// Seconds per request.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

#[derive(Deserialize)]
struct ProvidersFile {
    providers: Vec<ProviderSpec>,
}

impl ProviderSpec {
    /// Reads `{"providers": [...]}`.
    pub fn load_all(path: &Path) -> Result<Vec<ProviderSpec>, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|source| GatewayError::Io {
            path: path.to_owned(),
            source,
        })?;
        let file: ProvidersFile = serde_json::from_str(&text).map_err(|source| GatewayError::Providers {
            path: path.to_owned(),
            source,
        })?;
        Ok(file.providers)
    }

    pub fn find(path: &Path, id: &str) -> Result<ProviderSpec, GatewayError> {
        Self::load_all(path)?
            .into_iter()
            .find(|p| p.id == id)
            .ok_or_else(|| GatewayError::UnknownProvider(id.to_owned()))
    }

    pub fn replay(id: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind: ProviderKind::ReplayOnly,
            base_url: String::new(),
            model: model.into(),
            auth_env_var: None,
            rate_limit: default_rate(),
            max_concurrency: default_concurrency(),
            timeout: default_timeout(),
            max_retries: default_retries(),
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        let bad = |message: &str| {
            Err(GatewayError::InvalidProvider {
                provider: self.id.clone(),
                message: message.to_owned(),
            })
        };
        if self.rate_limit == 0 {
            return bad("rate_limit must be positive");
        }
        if self.max_concurrency == 0 {
            return bad("max_concurrency must be positive");
        }
        if !(self.timeout > 0.0 && self.timeout.is_finite()) {
            return bad("timeout must be positive");
        }
        if self.kind != ProviderKind::ReplayOnly && self.base_url.is_empty() {
            return bad("base_url required");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeStatus {
    Ok,
    Malformed,
    Refused,
    TransportError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub cache_key: String,
    pub provider_id: String,
    pub model: String,
    pub prompt_text: String,
    pub decoding: DecodingParams,
    pub rep_index: u32,
    pub response_text: String,
    pub status: ExchangeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub timestamp: DateTime<Utc>,
    pub attempt: u32,
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    provider_id: &'a str,
    model: &'a str,
    prompt_text: &'a str,
    temperature: f64,
    max_tokens: u32,
    rep_index: u32,
}

/// Hex SHA-256 over the exchange identity. The repetition count is left out
/// so raising it reuses earlier repetitions.
pub fn cache_key(provider_id: &str, model: &str, prompt: &str, decoding: &DecodingParams, rep_index: u32) -> String {
    let material = KeyMaterial {
        provider_id,
        model,
        prompt_text: prompt,
        temperature: decoding.temperature,
        max_tokens: decoding.max_tokens,
        rep_index,
    };
    hex::encode(Sha256::digest(serde_json::to_vec(&material).expect("key material serializes")))
}

/// Token bucket of capacity one: dispatches are spaced `60 / rpm` seconds
/// apart.
#[derive(Debug)]
struct Pacer {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl Pacer {
    fn new(rpm: u32) -> Self {
        Self {
            interval: Duration::from_secs_f64(60.0 / f64::from(rpm)),
            next: Mutex::new(None),
        }
    }

    async fn wait(&self) {
        let slot = {
            let mut next = self.next.lock().await;
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot
        };
        tokio::time::sleep_until(slot).await;
    }
}

const BACKOFF_BASE: Duration = Duration::from_secs(1);
const BACKOFF_CAP: Duration = Duration::from_secs(60);

/// Delay before retry number `retry` (1-based): full exponential delay,
/// capped, scaled by a jitter factor in [0.5, 1].
fn backoff(retry: u32) -> Duration {
    let exp = BACKOFF_BASE.saturating_mul(2u32.saturating_pow(retry.saturating_sub(1)));
    exp.min(BACKOFF_CAP).mul_f64(rand::rng().random_range(0.5..=1.0))
}

/// Dispatches prompts for one provider under its rate and concurrency budget.
pub struct Gateway {
    provider: ProviderSpec,
    transport: Option<Arc<dyn Transport>>,
    pacer: Pacer,
    permits: Semaphore,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("provider", &self.provider.id)
            .field("live", &self.transport.is_some())
            .finish()
    }
}

impl Gateway {
    /// Builds the HTTP adapter for `provider`. With `offline`, or for
    /// replay-only providers, no transport exists and misses stay misses.
    pub fn connect(provider: ProviderSpec, offline: bool) -> Result<Self, GatewayError> {
        provider.validate()?;
        let transport: Option<Arc<dyn Transport>> = if offline || provider.kind == ProviderKind::ReplayOnly {
            None
        } else {
            let key = match &provider.auth_env_var {
                Some(var) => Some(std::env::var(var).map_err(|_| GatewayError::MissingCredential {
                    provider: provider.id.clone(),
                    var: var.clone(),
                })?),
                None => None,
            };
            let timeout = Duration::from_secs_f64(provider.timeout);
            Some(match provider.kind {
                ProviderKind::OpenaiChatCompatible => Arc::new(OpenAiChat::new(&provider.base_url, key, timeout)?),
                ProviderKind::GeminiGenerateContent => Arc::new(GeminiGenerate::new(&provider.base_url, key, timeout)?),
                ProviderKind::ReplayOnly => unreachable!(),
            })
        };
        Ok(Self::build(provider, transport))
    }

    pub fn with_transport(provider: ProviderSpec, transport: Arc<dyn Transport>) -> Result<Self, GatewayError> {
        provider.validate()?;
        Ok(Self::build(provider, Some(transport)))
    }

    fn build(provider: ProviderSpec, transport: Option<Arc<dyn Transport>>) -> Self {
        Self {
            pacer: Pacer::new(provider.rate_limit),
            permits: Semaphore::new(provider.max_concurrency),
            provider,
            transport,
        }
    }

    pub fn provider(&self) -> &ProviderSpec {
        &self.provider
    }

    pub fn is_live(&self) -> bool {
        self.transport.is_some()
    }

    pub fn key_for(&self, prompt: &str, decoding: &DecodingParams, rep_index: u32) -> String {
        cache_key(&self.provider.id, &self.provider.model, prompt, decoding, rep_index)
    }

    /// Returns the stored record when resolved, otherwise dispatches. Never
    /// fails: terminal problems become `transport_error` records.
    pub async fn execute(
        &self,
        prompt: &str,
        decoding: &DecodingParams,
        rep_index: u32,
        store: &ReplayStore,
    ) -> ExchangeRecord {
        let key = self.key_for(prompt, decoding, rep_index);
        if let Some(rec) = store.resolved(&key) {
            return rec.clone();
        }
        self.dispatch(key, prompt, decoding, rep_index).await
    }

    async fn dispatch(&self, key: String, prompt: &str, decoding: &DecodingParams, rep_index: u32) -> ExchangeRecord {
        let record = |status, response: String, reason: Option<String>, attempt| ExchangeRecord {
            cache_key: key.clone(),
            provider_id: self.provider.id.clone(),
            model: self.provider.model.clone(),
            prompt_text: prompt.to_owned(),
            decoding: decoding.clone(),
            rep_index,
            response_text: response,
            status,
            reason,
            timestamp: Utc::now(),
            attempt,
        };
        let Some(transport) = &self.transport else {
            return record(ExchangeStatus::TransportError, String::new(), Some("cache miss".into()), 0);
        };
        let request = CompletionRequest {
            model: self.provider.model.clone(),
            prompt: prompt.to_owned(),
            temperature: decoding.temperature,
            max_tokens: decoding.max_tokens,
        };
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome = {
                let _permit = self.permits.acquire().await.expect("semaphore never closed");
                self.pacer.wait().await;
                transport.complete(&request).await
            };
            match outcome {
                Ok(Completion::Text(text)) => return record(ExchangeStatus::Ok, text, None, attempt),
                Ok(Completion::Refused(why)) => return record(ExchangeStatus::Refused, String::new(), Some(why), attempt),
                Ok(Completion::Malformed(why)) => {
                    return record(ExchangeStatus::Malformed, String::new(), Some(why), attempt)
                }
                Err(TransportError::Transient(why)) if attempt <= self.provider.max_retries => {
                    tracing::warn!(provider = %self.provider.id, attempt, %why, "retrying");
                    tokio::time::sleep(backoff(attempt)).await;
                }
                Err(e) => {
                    return record(ExchangeStatus::TransportError, String::new(), Some(e.to_string()), attempt)
                }
            }
        }
    }
}

/// Counts by outcome for one `run_matrix` call.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub ok: usize,
    pub malformed: usize,
    pub refused: usize,
    pub transport_error: usize,
    /// Requests sent over the network.
    pub dispatched: usize,
    /// Keys a replay-only run could not find.
    pub missing: Vec<String>,
}

/// Immutable snapshot of the exchanges a matrix needs, by cache key.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSet {
    pub provider_id: String,
    pub model: String,
    pub records: BTreeMap<String, ExchangeRecord>,
    pub summary: RunSummary,
}

impl ResponseSet {
    pub fn get(&self, key: &str) -> Option<&ExchangeRecord> {
        self.records.get(key)
    }
}

/// Every prompt text of a unit: neutral, per-locale neutrals, variants.
pub fn unit_prompts(unit: &PromptUnit) -> impl Iterator<Item = &str> {
    std::iter::once(unit.neutral.as_str())
        .chain(unit.locale_neutrals.values().map(|p| p.as_str()))
        .chain(unit.variants.iter().map(|v| v.text.as_str()))
}

/// Resolves every (prompt, repetition) of `units` against `store`,
/// dispatching the unresolved ones concurrently. This task is the store's
/// only writer; cache misses in replay mode are not written.
pub async fn run_matrix(
    gateway: Arc<Gateway>,
    units: &[PromptUnit],
    config: &AuditConfig,
    store: &mut ReplayStore,
) -> Result<ResponseSet, GatewayError> {
    let decoding = &config.decoding;
    let mut seen = BTreeSet::new();
    let mut records = BTreeMap::new();
    let mut pending = Vec::new();
    for unit in units {
        for prompt in unit_prompts(unit) {
            for rep in 0..decoding.repetitions_per_prompt {
                let key = gateway.key_for(prompt, decoding, rep);
                if !seen.insert(key.clone()) {
                    continue;
                }
                match store.resolved(&key) {
                    Some(rec) => {
                        records.insert(key, rec.clone());
                    }
                    None => pending.push((key, prompt.to_owned(), rep)),
                }
            }
        }
    }
    tracing::info!(
        provider = %gateway.provider.id,
        cached = records.len(),
        pending = pending.len(),
        "resolving matrix"
    );

    let mut summary = RunSummary::default();
    let live = gateway.is_live();
    let mut tasks = tokio::task::JoinSet::new();
    for (key, prompt, rep) in pending {
        let gw = Arc::clone(&gateway);
        let decoding = decoding.clone();
        tasks.spawn(async move { gw.dispatch(key, &prompt, &decoding, rep).await });
    }
    while let Some(joined) = tasks.join_next().await {
        let rec = joined.expect("dispatch task panicked");
        if live {
            summary.dispatched += rec.attempt as usize;
            store.append(rec.clone())?;
        } else {
            summary.missing.push(rec.cache_key.clone());
        }
        records.insert(rec.cache_key.clone(), rec);
    }
    summary.missing.sort();

    for rec in records.values() {
        match rec.status {
            ExchangeStatus::Ok => summary.ok += 1,
            ExchangeStatus::Malformed => summary.malformed += 1,
            ExchangeStatus::Refused => summary.refused += 1,
            ExchangeStatus::TransportError => summary.transport_error += 1,
        }
    }
    Ok(ResponseSet {
        provider_id: gateway.provider.id.clone(),
        model: gateway.provider.model.clone(),
        records,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Domain;
    use crate::prompt::PromptText;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn live_spec(rpm: u32, concurrency: usize, retries: u32) -> ProviderSpec {
        ProviderSpec {
            id: "fake".into(),
            kind: ProviderKind::OpenaiChatCompatible,
            base_url: "http://unused".into(),
            model: "m1".into(),
            auth_env_var: None,
            rate_limit: rpm,
            max_concurrency: concurrency,
            timeout: 5.0,
            max_retries: retries,
        }
    }

    fn echo() -> Arc<FnTransport> {
        Arc::new(FnTransport::new(|r| Ok(Completion::Text(format!("1. {}", r.prompt)))))
    }

    fn units(n: usize) -> Vec<PromptUnit> {
        (0..n)
            .map(|i| PromptUnit {
                anchor_id: format!("a{i}"),
                anchor_name: format!("A{i}"),
                domain: Domain::Music,
                k: 25,
                locale: "en".into(),
                neutral: PromptText::plain(format!("prompt {i}")),
                locale_neutrals: BTreeMap::new(),
                variants: Vec::new(),
            })
            .collect()
    }

    #[test]
    fn cache_key_is_stable_and_sensitive() {
        let d = DecodingParams::default();
        let k = cache_key("p", "m", "I am a fan of X.", &d, 0);
        assert_eq!(k, cache_key("p", "m", "I am a fan of X.", &d, 0));
        assert_eq!(k.len(), 64);
        assert_ne!(k, cache_key("p", "m", "I am a fan of Y.", &d, 0));
        assert_ne!(k, cache_key("p", "m", "I am a fan of X.", &d, 1));
        assert_ne!(k, cache_key("p", "m2", "I am a fan of X.", &d, 0));
        let more = DecodingParams {
            repetitions_per_prompt: 5,
            ..d.clone()
        };
        assert_eq!(k, cache_key("p", "m", "I am a fan of X.", &more, 0));
        let hot = DecodingParams {
            temperature: 0.7,
            ..d
        };
        assert_ne!(k, cache_key("p", "m", "I am a fan of X.", &hot, 0));
    }

    #[test]
    fn backoff_grows_and_caps() {
        for retry in 1..10 {
            let full = BACKOFF_BASE * 2u32.pow(retry - 1);
            let d = backoff(retry);
            assert!(d <= full.min(BACKOFF_CAP) && d >= full.min(BACKOFF_CAP) / 2, "{retry}: {d:?}");
        }
        assert!(backoff(40) <= BACKOFF_CAP);
    }

    #[tokio::test]
    async fn replay_hit_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ReplayStore::open(dir.path().join("s.jsonl")).unwrap();
        let live = Gateway::with_transport(live_spec(6000, 2, 0), echo()).unwrap();
        let d = DecodingParams::default();
        let rec = live.execute("hello", &d, 0, &store).await;
        assert_eq!(rec.status, ExchangeStatus::Ok);
        store.append(rec.clone()).unwrap();

        let replay = Gateway::connect(ProviderSpec { kind: ProviderKind::ReplayOnly, ..live_spec(60, 1, 0) }, false).unwrap();
        assert!(!replay.is_live());
        assert_eq!(replay.execute("hello", &d, 0, &store).await, rec);
        let miss = replay.execute("other", &d, 0, &store).await;
        assert_eq!(miss.status, ExchangeStatus::TransportError);
        assert_eq!(miss.reason.as_deref(), Some("cache miss"));
    }

    #[test]
    fn missing_credential_is_reported() {
        let spec = ProviderSpec {
            auth_env_var: Some("FAIREVAL_TEST_UNSET_KEY".into()),
            ..live_spec(60, 1, 0)
        };
        assert!(matches!(Gateway::connect(spec.clone(), false), Err(GatewayError::MissingCredential { .. })));
        assert!(!Gateway::connect(spec, true).unwrap().is_live());
    }

    #[tokio::test(start_paused = true)]
    async fn transient_errors_retry_then_give_up() {
        let flaky = |fails: usize| {
            let n = AtomicUsize::new(0);
            Arc::new(FnTransport::new(move |_| {
                if n.fetch_add(1, Ordering::SeqCst) < fails {
                    Err(TransportError::Transient("503".into()))
                } else {
                    Ok(Completion::Text("1. ok".into()))
                }
            }))
        };
        let dir = tempfile::tempdir().unwrap();
        let store = ReplayStore::open(dir.path().join("s.jsonl")).unwrap();
        let d = DecodingParams::default();

        let gw = Gateway::with_transport(live_spec(6000, 1, 3), flaky(2)).unwrap();
        let rec = gw.execute("p", &d, 0, &store).await;
        assert_eq!((rec.status, rec.attempt), (ExchangeStatus::Ok, 3));

        let gw = Gateway::with_transport(live_spec(6000, 1, 1), flaky(2)).unwrap();
        let rec = gw.execute("p", &d, 0, &store).await;
        assert_eq!((rec.status, rec.attempt), (ExchangeStatus::TransportError, 2));

        let fatal = Arc::new(FnTransport::new(|_| Err(TransportError::Fatal("401".into()))));
        let gw = Gateway::with_transport(live_spec(6000, 1, 5), fatal.clone()).unwrap();
        assert_eq!(gw.execute("p", &d, 0, &store).await.status, ExchangeStatus::TransportError);
        assert_eq!(fatal.calls(), 1);
    }

    #[tokio::test(start_paused = true)]
    async fn rate_limit_spaces_dispatches() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ReplayStore::open(dir.path().join("s.jsonl")).unwrap();
        let gw = Arc::new(Gateway::with_transport(live_spec(60, 8, 0), echo()).unwrap());
        let config = AuditConfig::new(Domain::Music);
        let start = Instant::now();
        let set = run_matrix(gw, &units(120), &config, &mut store).await.unwrap();
        let elapsed = start.elapsed();
        assert_eq!(set.summary.dispatched, 120);
        assert!(elapsed >= Duration::from_secs(119), "{elapsed:?}");
        assert!(elapsed < Duration::from_secs(125), "{elapsed:?}");
    }

    struct Instrumented {
        in_flight: AtomicUsize,
        peak: AtomicUsize,
    }

    #[async_trait::async_trait]
    impl Transport for Instrumented {
        async fn complete(&self, r: &CompletionRequest) -> Result<Completion, TransportError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            tokio::time::sleep(Duration::from_millis(250)).await;
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            Ok(Completion::Text(format!("1. {}", r.prompt)))
        }
    }

    #[tokio::test(start_paused = true)]
    async fn concurrency_never_exceeds_budget() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ReplayStore::open(dir.path().join("s.jsonl")).unwrap();
        let t = Arc::new(Instrumented {
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let gw = Arc::new(Gateway::with_transport(live_spec(1_000_000, 3, 0), t.clone()).unwrap());
        let set = run_matrix(gw, &units(40), &AuditConfig::new(Domain::Music), &mut store).await.unwrap();
        assert_eq!(set.summary.ok, 40);
        assert_eq!(t.peak.load(Ordering::SeqCst), 3);
    }

    #[tokio::test]
    async fn warm_cache_dispatches_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let mut config = AuditConfig::new(Domain::Music);
        config.decoding.repetitions_per_prompt = 2;
        let transport = echo();
        let gw = Arc::new(Gateway::with_transport(live_spec(1_000_000, 4, 0), transport.clone()).unwrap());

        let mut store = ReplayStore::open(&path).unwrap();
        let first = run_matrix(gw.clone(), &units(5), &config, &mut store).await.unwrap();
        assert_eq!(first.records.len(), 10);
        assert_eq!(transport.calls(), 10);
        drop(store);

        let mut store = ReplayStore::open(&path).unwrap();
        let second = run_matrix(gw, &units(5), &config, &mut store).await.unwrap();
        assert_eq!(transport.calls(), 10);
        assert_eq!(second.summary.dispatched, 0);
        assert_eq!(second.records, first.records);

        let replay = Arc::new(Gateway::connect(ProviderSpec { kind: ProviderKind::ReplayOnly, ..live_spec(60, 1, 0) }, false).unwrap());
        let offline = run_matrix(replay, &units(6), &config, &mut store).await.unwrap();
        assert_eq!(offline.summary.missing.len(), 2);
        assert_eq!(offline.summary.ok, 10);
        assert_eq!(ReplayStore::open(&path).unwrap().len(), 10);
    }
}
