//! Boundary to external rerank scorers and embedders.
//!
//! Wire protocol: `POST /v1/score` with
//! `{"request_id", "mode": "pointwise"|"listwise", "query": {record.., "prompt"}, "candidates": [record..]}`
//! answered by `{"request_id", "p_yes"}` or `{"request_id", "position_probs"}`.
//! Status 200 carries a valid score, 4xx a protocol violation, 5xx a
//! retryable failure. Listwise positions are 1-based serial numbers in
//! prompts and 0-based indices in `position_probs`.
//!
//! Embedders use `POST /v1/embed` with `{"request_id", "record", "prompt"}`
//! and answer `{"request_id", "embedding": [..]}`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::Qrels;
use crate::hashing::{unit_interval, Fnv1a};
use crate::prompts::build_eol_prompt;
use crate::types::{DocId, Record, RecordError};

pub const SCORE_PATH: &str = "/v1/score";
pub const EMBED_PATH: &str = "/v1/embed";
pub const DEFAULT_MAX_INFLIGHT: usize = 8;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: usize },
    #[error("protocol violation ({field}): {reason}")]
    ProtocolViolation { field: &'static str, reason: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("scorer failed: {0}")]
    Scorer(String),
    #[error("invalid record: {0}")]
    InvalidRecord(#[from] RecordError),
}

fn violation(field: &'static str, reason: impl Into<String>) -> GatewayError {
    GatewayError::ProtocolViolation {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Pointwise,
    Listwise,
}

impl ScoreMode {
    fn tag(self) -> &'static [u8] {
        match self {
            ScoreMode::Pointwise => b"pointwise",
            ScoreMode::Listwise => b"listwise",
        }
    }
}

/// Query record plus its one-word prompt, flattened on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPayload {
    #[serde(flatten)]
    pub record: Record,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub request_id: String,
    pub mode: ScoreMode,
    pub query: QueryPayload,
    pub candidates: Vec<Record>,
}

static NEXT_REQUEST: AtomicU64 = AtomicU64::new(1);

/// Process-unique request id.
pub fn next_request_id() -> String {
    format!("req-{}", NEXT_REQUEST.fetch_add(1, Ordering::Relaxed))
}

impl ScoreRequest {
    pub fn new(mode: ScoreMode, query: &Record, candidates: Vec<Record>) -> Result<Self, GatewayError> {
        let prompt = build_eol_prompt(query)?.text;
        let req = Self {
            request_id: next_request_id(),
            mode,
            query: QueryPayload {
                record: query.clone(),
                prompt,
            },
            candidates,
        };
        validate_request(&req)?;
        Ok(req)
    }

    pub fn candidate_ids(&self) -> impl Iterator<Item = &DocId> {
        self.candidates.iter().map(|c| &c.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub request_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_yes: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_probs: Option<Vec<f64>>,
}

impl ScoreResponse {
    pub fn pointwise(request_id: &str, p_yes: f64) -> Self {
        Self {
            request_id: request_id.to_owned(),
            p_yes: Some(p_yes),
            position_probs: None,
        }
    }

    pub fn listwise(request_id: &str, probs: Vec<f64>) -> Self {
        Self {
            request_id: request_id.to_owned(),
            p_yes: None,
            position_probs: Some(probs),
        }
    }
}

pub fn validate_request(req: &ScoreRequest) -> Result<(), GatewayError> {
    match (req.mode, req.candidates.len()) {
        (ScoreMode::Pointwise, 1) => {}
        (ScoreMode::Pointwise, n) => {
            return Err(violation("candidates", format!("pointwise needs 1 candidate, got {n}")))
        }
        (ScoreMode::Listwise, 0) => {
            return Err(violation("candidates", "listwise needs at least 1 candidate"))
        }
        _ => {}
    }
    if req.request_id.is_empty() {
        return Err(violation("request_id", "empty"));
    }
    req.query.record.validate()?;
    for c in &req.candidates {
        c.validate()?;
    }
    Ok(())
}

pub fn validate_response(req: &ScoreRequest, resp: &ScoreResponse) -> Result<(), GatewayError> {
    if resp.request_id != req.request_id {
        return Err(violation(
            "correlation",
            format!("expected {}, got {}", req.request_id, resp.request_id),
        ));
    }
    match req.mode {
        ScoreMode::Pointwise => {
            if resp.position_probs.is_some() {
                return Err(violation("mode", "pointwise response carries position_probs"));
            }
            let p = resp.p_yes.ok_or_else(|| violation("p_yes", "missing"))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(violation("range", format!("p_yes {p} outside [0, 1]")));
            }
        }
        ScoreMode::Listwise => {
            if resp.p_yes.is_some() {
                return Err(violation("mode", "listwise response carries p_yes"));
            }
            let probs = resp
                .position_probs
                .as_ref()
                .ok_or_else(|| violation("position_probs", "missing"))?;
            if probs.len() != req.candidates.len() {
                return Err(violation(
                    "length",
                    format!("{} probabilities for {} candidates", probs.len(), req.candidates.len()),
                ));
            }
            if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
                return Err(violation("range", format!("position probability {p} is negative or non-finite")));
            }
        }
    }
    Ok(())
}

/// Anything that can answer score requests.
pub trait Scorer: Send + Sync {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, GatewayError>;

    /// Short identity recorded in run manifests.
    fn name(&self) -> String;

    /// Longest candidate list a listwise call accepts.
    fn max_list_len(&self) -> Option<usize> {
        None
    }

    /// Upper bound on concurrent calls the caller should issue.
    fn max_inflight(&self) -> usize {
        DEFAULT_MAX_INFLIGHT
    }
}

/// Deterministic pseudo-scores from an integer hash of
/// `(seed, mode, query id, candidate ids)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockHashScorer {
    pub seed: u64,
}

impl MockHashScorer {
    fn base_hash(&self, req: &ScoreRequest) -> Fnv1a {
        let mut h = Fnv1a::new();
        h.write_u64(self.seed);
        h.write(req.mode.tag());
        h.write(&[0]);
        h.write(req.query.record.id.as_str().as_bytes());
        for id in req.candidate_ids() {
            h.write(&[0]);
            h.write(id.as_str().as_bytes());
        }
        h
    }
}

impl Scorer for MockHashScorer {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, GatewayError> {
        let base = self.base_hash(req);
        Ok(match req.mode {
            ScoreMode::Pointwise => ScoreResponse::pointwise(&req.request_id, unit_interval(base.finish())),
            ScoreMode::Listwise => {
                let probs = (0..req.candidates.len())
                    .map(|i| {
                        let mut h = base;
                        h.write_u64(i as u64);
                        unit_interval(h.finish())
                    })
                    .collect();
                ScoreResponse::listwise(&req.request_id, probs)
            }
        })
    }

    fn name(&self) -> String {
        format!("mock:{}", self.seed)
    }
}

/// Scores 1 for relevant candidates and 0 otherwise.
#[derive(Debug, Clone)]
pub struct OracleScorer {
    pub qrels: Arc<Qrels>,
}

impl Scorer for OracleScorer {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, GatewayError> {
        let q = &req.query.record.id;
        let rel: Vec<f64> = req
            .candidate_ids()
            .map(|c| if self.qrels.is_relevant(q, c) { 1.0 } else { 0.0 })
            .collect();
        Ok(match req.mode {
            ScoreMode::Pointwise => ScoreResponse::pointwise(&req.request_id, rel[0]),
            ScoreMode::Listwise => {
                let n = rel.len();
                let probs = if rel.iter().any(|&r| r > 0.0) {
                    rel
                } else {
                    vec![1.0 / n as f64; n]
                };
                ScoreResponse::listwise(&req.request_id, probs)
            }
        })
    }

    fn name(&self) -> String {
        "oracle".into()
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub timeout: Duration,
    pub retries: usize,
    pub max_inflight: usize,
    pub backoff: Duration,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TIMEOUT,
            retries: DEFAULT_RETRIES,
            max_inflight: DEFAULT_MAX_INFLIGHT,
            backoff: Duration::from_millis(50),
        }
    }
}

enum Attempt<T> {
    Done(T),
    Retry(GatewayError),
}

/// Blocking JSON-over-HTTP client shared by the remote scorer and embedder.
#[derive(Debug)]
struct HttpClient {
    base: String,
    client: reqwest::blocking::Client,
    config: HttpConfig,
    permits: Permits,
}

impl HttpClient {
    fn new(endpoint: &str, config: HttpConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            // Reused keep-alive connections to tiny_http occasionally stall
            // until the timeout under concurrent load; a fresh connection
            // per request costs ~0.1 ms on loopback.
            .pool_max_idle_per_host(0)
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self {
            base: endpoint.trim_end_matches('/').to_owned(),
            client,
            permits: Permits::new(config.max_inflight),
            config,
        })
    }

    fn attempt<B: Serialize, R: serde::de::DeserializeOwned>(&self, url: &str, body: &B) -> Attempt<Result<R, GatewayError>> {
        let resp = match self.client.post(url).json(body).send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Attempt::Retry(GatewayError::Timeout { attempts: 0 }),
            Err(e) => return Attempt::Retry(GatewayError::Transport(e.to_string())),
        };
        let status = resp.status();
        if status.is_server_error() {
            let text = resp.text().unwrap_or_default();
            return Attempt::Retry(GatewayError::Transport(format!("{status}: {text}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Attempt::Done(Err(violation("status", format!("{status}: {text}"))));
        }
        Attempt::Done(
            resp.json::<R>()
                .map_err(|e| violation("body", format!("undecodable response: {e}"))),
        )
    }

    fn post<B: Serialize, R: serde::de::DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, GatewayError> {
        let _permit = self.permits.acquire();
        let url = format!("{}{}", self.base, path);
        let attempts = self.config.retries + 1;
        let mut last = GatewayError::Transport("no attempt made".into());
        for i in 0..attempts {
            match self.attempt(&url, body) {
                Attempt::Done(r) => return r,
                Attempt::Retry(e) => last = e,
            }
            if i + 1 < attempts {
                std::thread::sleep(self.config.backoff * (1 << i.min(6)) as u32);
            }
        }
        Err(match last {
            GatewayError::Timeout { .. } => GatewayError::Timeout { attempts },
            other => other,
        })
    }
}

/// Remote scorer behind `POST {endpoint}/v1/score`. Requests are idempotent,
/// so transport failures and 5xx answers are retried.
#[derive(Debug)]
pub struct HttpScorer {
    http: HttpClient,
}

impl HttpScorer {
    pub fn new(endpoint: &str, config: HttpConfig) -> Result<Self, GatewayError> {
        Ok(Self {
            http: HttpClient::new(endpoint, config)?,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.http.base
    }
}

impl Scorer for HttpScorer {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, GatewayError> {
        self.http.post(SCORE_PATH, req)
    }

    fn name(&self) -> String {
        format!("http:{}", self.http.base)
    }

    fn max_inflight(&self) -> usize {
        self.http.config.max_inflight
    }
}

/// Selects one scorer implementation.
pub enum ScorerHandle {
    RemoteHttp(HttpScorer),
    MockHash(MockHashScorer),
    Oracle(OracleScorer),
    Local(Arc<dyn Scorer>),
}

impl ScorerHandle {
    fn inner(&self) -> &dyn Scorer {
        match self {
            ScorerHandle::RemoteHttp(s) => s,
            ScorerHandle::MockHash(s) => s,
            ScorerHandle::Oracle(s) => s,
            ScorerHandle::Local(s) => s.as_ref(),
        }
    }
}

impl Scorer for ScorerHandle {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, GatewayError> {
        score(self.inner(), req)
    }

    fn name(&self) -> String {
        self.inner().name()
    }

    fn max_list_len(&self) -> Option<usize> {
        self.inner().max_list_len()
    }

    fn max_inflight(&self) -> usize {
        self.inner().max_inflight()
    }
}

/// Validates the request, scores it and validates the answer.
pub fn score(scorer: &dyn Scorer, req: &ScoreRequest) -> Result<ScoreResponse, GatewayError> {
    validate_request(req)?;
    let resp = scorer.score(req)?;
    validate_response(req, &resp)?;
    Ok(resp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub request_id: String,
    pub record: Record,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub request_id: String,
    pub embedding: Vec<f32>,
}

/// Remote embedder behind `POST {endpoint}/v1/embed`.
#[derive(Debug)]
pub struct HttpEmbedder {
    http: HttpClient,
}

impl HttpEmbedder {
    pub fn new(endpoint: &str, config: HttpConfig) -> Result<Self, GatewayError> {
        Ok(Self {
            http: HttpClient::new(endpoint, config)?,
        })
    }

    pub fn embed(&self, record: &Record) -> Result<Vec<f32>, GatewayError> {
        let req = EmbedRequest {
            request_id: next_request_id(),
            prompt: build_eol_prompt(record)?.text,
            record: record.clone(),
        };
        let resp: EmbedResponse = self.http.post(EMBED_PATH, &req)?;
        if resp.request_id != req.request_id {
            return Err(violation("correlation", "embed response id mismatch"));
        }
        if resp.embedding.is_empty() || resp.embedding.iter().any(|v| !v.is_finite()) {
            return Err(violation("embedding", "empty or non-finite"));
        }
        Ok(resp.embedding)
    }
}

/// Serves a [`Scorer`] over the wire protocol on a background thread.
/// Used as a loopback adapter and as a reference server for scorer authors.
pub struct ScoreServer {
    server: Arc<tiny_http::Server>,
    url: String,
    worker: Option<JoinHandle<()>>,
}

impl ScoreServer {
    /// Binds `addr` (use port 0 for an ephemeral port).
    pub fn start(scorer: Arc<dyn Scorer>, addr: &str) -> Result<Self, GatewayError> {
        let server = Arc::new(
            tiny_http::Server::http(addr).map_err(|e| GatewayError::Transport(e.to_string()))?,
        );
        let url = match server.server_addr() {
            tiny_http::ListenAddr::IP(a) => format!("http://{a}"),
            #[allow(unreachable_patterns)]
            other => return Err(GatewayError::Transport(format!("unsupported listener {other:?}"))),
        };
        let srv = Arc::clone(&server);
        let worker = std::thread::spawn(move || {
            for request in srv.incoming_requests() {
                let scorer = Arc::clone(&scorer);
                std::thread::spawn(move || handle(scorer.as_ref(), request));
            }
        });
        Ok(Self {
            server,
            url,
            worker: Some(worker),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl Drop for ScoreServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn respond(request: tiny_http::Request, status: u16, body: String) {
    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    let _ = request.respond(
        tiny_http::Response::from_string(body)
            .with_status_code(status)
            .with_header(header),
    );
}

fn handle(scorer: &dyn Scorer, mut request: tiny_http::Request) {
    if request.method() != &tiny_http::Method::Post || request.url() != SCORE_PATH {
        respond(request, 404, r#"{"error":"not found"}"#.into());
        return;
    }
    let mut body = String::new();
    if let Err(e) = request.as_reader().read_to_string(&mut body) {
        respond(request, 400, serde_json::json!({ "error": e.to_string() }).to_string());
        return;
    }
    let req: ScoreRequest = match serde_json::from_str(&body) {
        Ok(r) => r,
        Err(e) => {
            respond(request, 400, serde_json::json!({ "error": e.to_string() }).to_string());
            return;
        }
    };
    match score(scorer, &req) {
        Ok(resp) => respond(request, 200, serde_json::to_string(&resp).expect("serializable")),
        Err(e @ (GatewayError::ProtocolViolation { .. } | GatewayError::InvalidRecord(_))) => {
            respond(request, 400, serde_json::json!({ "error": e.to_string() }).to_string())
        }
        Err(e) => respond(request, 500, serde_json::json!({ "error": e.to_string() }).to_string()),
    }
}
