//! Evaluation harness: prompt rendering, endpoint client, scoring and reports.

use crate::instruct::TEMPLATE_BANK_VERSION;
use crate::jsonl::{self, JsonlError};
use crate::model::{Episode, EvalMode, ImageRef, IMAGE_TAG};
use crate::scalar::{self, Scalar};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

/// Share of transport failures above which a run stops and is marked partial.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;

pub const TEMPERATURE: f64 = 0.0;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("episode {episode} has {available} context shots, {k} requested")]
    NotEnoughShots { episode: String, available: usize, k: usize },
    #[error("endpoint config: {0}")]
    Config(String),
    #[error("endpoint cannot score log-probabilities, needed by {0}")]
    NoLogprob(String),
    #[error("endpoint generation is disabled, needed by {0}")]
    NoGenerate(String),
    #[error("cannot read image {path}: {source}")]
    Image { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: Vec<ContentPart>,
}

/// A rendered episode: alternating user/assistant messages ending with the query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub messages: Vec<Message>,
    pub images: Vec<ImageRef>,
}

fn user_message(s1: &str, image: &ImageRef, s2: &str) -> Message {
    let mut content = Vec::new();
    if !s1.is_empty() {
        content.push(ContentPart::Text { text: s1.to_string() });
    }
    content.push(ContentPart::ImageUrl { image_url: ImageUrl { url: image.as_str().to_string() } });
    if !s2.is_empty() {
        content.push(ContentPart::Text { text: s2.to_string() });
    }
    Message { role: "user".into(), content }
}

/// The last `k` context shots in order, then the query turn.
pub fn render_prompt(e: &Episode, k: usize) -> Result<Prompt, EvalError> {
    let available = e.context_shots.len();
    if k > available {
        return Err(EvalError::NotEnoughShots { episode: e.id.clone(), available, k });
    }
    let shots = &e.context_shots[available - k..];
    let mut messages = Vec::with_capacity(2 * k + 1);
    let mut images = Vec::with_capacity(k + 1);
    for s in shots {
        messages.push(user_message(&s.s1, &s.image, &s.s2));
        messages
            .push(Message { role: "assistant".into(), content: vec![ContentPart::Text { text: s.response.clone() }] });
        images.push(s.image.clone());
    }
    messages.push(user_message(&e.query.s1, &e.query.image, &e.query.s2));
    images.push(e.query.image.clone());
    Ok(Prompt { messages, images })
}

/// A demonstration recovered from a rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTurn {
    pub s1: String,
    pub image: ImageRef,
    pub s2: String,
    pub response: Option<String>,
}

/// Inverse of [`render_prompt`]: user/assistant pairs back to `(s1, image, s2, response)`.
pub fn reparse(p: &Prompt) -> Option<Vec<ParsedTurn>> {
    let mut out: Vec<ParsedTurn> = Vec::new();
    for m in &p.messages {
        match m.role.as_str() {
            "user" => {
                let pos = m.content.iter().position(|c| matches!(c, ContentPart::ImageUrl { .. }))?;
                let text = |parts: &[ContentPart]| -> Option<String> {
                    parts
                        .iter()
                        .map(|c| match c {
                            ContentPart::Text { text } => Some(text.as_str()),
                            ContentPart::ImageUrl { .. } => None,
                        })
                        .collect::<Option<String>>()
                };
                let ContentPart::ImageUrl { image_url } = &m.content[pos] else { return None };
                out.push(ParsedTurn {
                    s1: text(&m.content[..pos])?,
                    image: ImageRef::new(image_url.url.clone()),
                    s2: text(&m.content[pos + 1..])?,
                    response: None,
                });
            }
            "assistant" => {
                let last = out.last_mut().filter(|t| t.response.is_none())?;
                let [ContentPart::Text { text }] = m.content.as_slice() else { return None };
                last.response = Some(text.clone());
            }
            _ => return None,
        }
    }
    Some(out)
}

/// Flattens a prompt to the `Human: ... GPT: ...` text form used in training data.
pub fn prompt_text(p: &Prompt) -> String {
    let mut out = String::new();
    for m in &p.messages {
        out.push_str(if m.role == "user" { "Human: " } else { "GPT: " });
        for c in &m.content {
            match c {
                ContentPart::Text { text } => out.push_str(text),
                ContentPart::ImageUrl { .. } => out.push_str(IMAGE_TAG),
            }
        }
        out.push('\n');
    }
    out.push_str("GPT: ");
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Letter,
    String,
}

impl MatchMode {
    pub fn for_episode(e: &Episode) -> MatchMode {
        if e.options.is_some() {
            MatchMode::Letter
        } else {
            MatchMode::String
        }
    }
}

fn normalize_letter(s: &str) -> String {
    s.trim().trim_end_matches(|c: char| c.is_ascii_punctuation()).trim().to_lowercase()
}

/// Exact match after mode-specific normalization. An empty response never matches.
pub fn score_exact_match(response: &str, gt: &str, mode: MatchMode) -> bool {
    if response.trim().is_empty() {
        return false;
    }
    match mode {
        MatchMode::Letter => {
            let r = normalize_letter(response);
            r.chars().count() == 1 && r == normalize_letter(gt)
        }
        MatchMode::String => response.trim() == gt.trim(),
    }
}

/// Per-token mean of negative log-likelihoods; `+inf` for an empty continuation.
pub fn mean_nll<S: Scalar>(nll: &[S]) -> S {
    if nll.is_empty() {
        S::infinity()
    } else {
        scalar::mean(nll)
    }
}

/// Index of the option with the lowest mean NLL, ties to the lowest index.
pub fn choose_by_mean_nll<S: Scalar>(per_option: &[Vec<S>]) -> Option<usize> {
    let mut best: Option<(usize, S)> = None;
    for (i, nll) in per_option.iter().enumerate() {
        let m = mean_nll(nll);
        if best.is_none_or(|(_, b)| m < b) {
            best = Some((i, m));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageMode {
    /// Image references are sent verbatim as URLs.
    Path,
    /// Image files are inlined as base64 data URLs.
    Base64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    /// Environment variable holding a bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "defaults::max_parallel")]
    pub max_parallel: usize,
    #[serde(default = "defaults::retries")]
    pub retries: u32,
    #[serde(default = "defaults::backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "defaults::timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "defaults::max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "defaults::yes")]
    pub generate: bool,
    #[serde(default)]
    pub score_logprob: bool,
    #[serde(default = "defaults::image_mode")]
    pub image_mode: ImageMode,
    /// Directory relative image paths are resolved against in base64 mode.
    #[serde(default)]
    pub image_root: Option<PathBuf>,
}

mod defaults {
    pub fn max_parallel() -> usize {
        4
    }
    pub fn retries() -> u32 {
        3
    }
    pub fn backoff_ms() -> u64 {
        500
    }
    pub fn timeout_secs() -> u64 {
        120
    }
    pub fn max_tokens() -> u32 {
        64
    }
    pub fn yes() -> bool {
        true
    }
    pub fn image_mode() -> super::ImageMode {
        super::ImageMode::Path
    }
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            token_env: None,
            model: None,
            max_parallel: defaults::max_parallel(),
            retries: defaults::retries(),
            backoff_ms: defaults::backoff_ms(),
            timeout_secs: defaults::timeout_secs(),
            max_tokens: defaults::max_tokens(),
            generate: true,
            score_logprob: false,
            image_mode: ImageMode::Path,
            image_root: None,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.max_parallel == 0 {
            return Err(EvalError::Config("max_parallel must be at least 1".into()));
        }
        if !self.base_url.starts_with("http://") && !self.base_url.starts_with("https://") {
            return Err(EvalError::Config(format!("base_url {:?} is not an http(s) URL", self.base_url)));
        }
        Ok(())
    }

    /// Checks the mode flags against what the episodes need.
    pub fn check_modes(&self, episodes: &[Episode]) -> Result<(), EvalError> {
        for e in episodes {
            match e.eval_mode {
                EvalMode::ExactMatch if !self.generate => return Err(EvalError::NoGenerate(e.task_id.clone())),
                EvalMode::PerplexityChoice if !self.score_logprob => {
                    return Err(EvalError::NoLogprob(e.task_id.clone()))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub messages: Vec<Message>,
    pub max_tokens: u32,
    pub temperature: f64,
}

/// Asks for the log-probability of each token of `continuation` after `messages`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub messages: Vec<Message>,
    pub continuation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub token_logprobs: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Clone, Deserialize)]
struct ChatChoice {
    message: ChatMessageOut,
}

#[derive(Debug, Clone, Deserialize)]
struct ChatMessageOut {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("endpoint does not support {0}")]
    Unsupported(&'static str),
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait InferenceClient: Sync {
    fn generate(&self, req: &ChatRequest) -> Result<String, ClientError>;

    /// Token log-probabilities of the continuation.
    fn score(&self, req: &ScoreRequest) -> Result<Vec<f64>, ClientError>;
}

/// JSON-over-HTTP client: `POST {base}/chat/completions` and `POST {base}/score`.
pub struct HttpClient {
    agent: ureq::Agent,
    base_url: String,
    token: Option<String>,
}

impl HttpClient {
    pub fn new(cfg: &EndpointConfig) -> Result<Self, EvalError> {
        cfg.validate()?;
        let token = match &cfg.token_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| EvalError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpClient { agent, base_url: cfg.base_url.trim_end_matches('/').to_string(), token })
    }

    fn post<T: Serialize, R: serde::de::DeserializeOwned>(&self, path: &str, body: &T) -> Result<R, ClientError> {
        let mut req = self.agent.post(format!("{}{path}", self.base_url));
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req.send_json(body).map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(ClientError::Status { status, body });
        }
        resp.body_mut().read_json::<R>().map_err(|e| ClientError::Malformed(e.to_string()))
    }
}

impl InferenceClient for HttpClient {
    fn generate(&self, req: &ChatRequest) -> Result<String, ClientError> {
        let resp: ChatResponse = self.post("/chat/completions", req)?;
        let choice = resp.choices.into_iter().next().ok_or_else(|| ClientError::Malformed("no choices".into()))?;
        Ok(choice.message.content.unwrap_or_default())
    }

    fn score(&self, req: &ScoreRequest) -> Result<Vec<f64>, ClientError> {
        match self.post::<_, ScoreResponse>("/score", req) {
            Ok(r) => Ok(r.token_logprobs),
            Err(ClientError::Status { status: 404 | 405 | 501, .. }) => {
                Err(ClientError::Unsupported("log-probability scoring"))
            }
            Err(e) => Err(e),
        }
    }
}

fn mime_for(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/jpeg",
    }
}

/// Rewrites image URLs according to `mode`.
pub fn resolve_images(messages: &mut [Message], mode: ImageMode, root: Option<&Path>) -> Result<(), EvalError> {
    if mode == ImageMode::Path {
        return Ok(());
    }
    for part in messages.iter_mut().flat_map(|m| m.content.iter_mut()) {
        if let ContentPart::ImageUrl { image_url } = part {
            let path = match root {
                Some(r) => r.join(&image_url.url),
                None => PathBuf::from(&image_url.url),
            };
            let bytes = std::fs::read(&path).map_err(|source| EvalError::Image { path: path.clone(), source })?;
            let data = base64::engine::general_purpose::STANDARD.encode(bytes);
            image_url.url = format!("data:{};base64,{data}", mime_for(&path));
        }
    }
    Ok(())
}

/// Sha-256 hex digest of the JSON serialization of `v`.
pub fn hash_json<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("serializable");
    hex::encode(Sha256::digest(bytes))
}

/// A cached endpoint exchange for one episode at one shot count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub episode_id: String,
    pub k: usize,
    pub request_hash: String,
    pub response: String,
    /// Per-option token log-probabilities for choice-by-likelihood episodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<Vec<f64>>>,
}

type CacheKey = (String, usize, String);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TranscriptCache {
    entries: BTreeMap<CacheKey, Transcript>,
}

impl TranscriptCache {
    /// Loads `path`; a missing file is an empty cache.
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let mut cache = Self::default();
        for t in jsonl::read::<Transcript>(path)? {
            cache.insert(t);
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let items: Vec<&Transcript> = self.entries.values().collect();
        jsonl::write_atomic(path, jsonl::to_string(&items).as_bytes())?;
        Ok(())
    }

    pub fn insert(&mut self, t: Transcript) {
        self.entries.insert((t.episode_id.clone(), t.k, t.request_hash.clone()), t);
    }

    pub fn get(&self, episode_id: &str, k: usize, request_hash: &str) -> Option<&Transcript> {
        self.entries.get(&(episode_id.to_string(), k, request_hash.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Request {
    Generate(ChatRequest),
    Score(Vec<ScoreRequest>),
}

impl Request {
    fn hash(&self) -> String {
        match self {
            Request::Generate(r) => hash_json(r),
            Request::Score(rs) => hash_json(rs),
        }
    }
}

fn build_request(e: &Episode, k: usize, cfg: &EndpointConfig) -> Result<Request, EvalError> {
    let mut messages = render_prompt(e, k)?.messages;
    resolve_images(&mut messages, cfg.image_mode, cfg.image_root.as_deref())?;
    Ok(match e.eval_mode {
        EvalMode::ExactMatch => Request::Generate(ChatRequest {
            model: cfg.model.clone(),
            messages,
            max_tokens: cfg.max_tokens,
            temperature: TEMPERATURE,
        }),
        EvalMode::PerplexityChoice => Request::Score(
            e.options
                .iter()
                .flatten()
                .map(|o| ScoreRequest { model: cfg.model.clone(), messages: messages.clone(), continuation: o.clone() })
                .collect(),
        ),
    })
}

fn with_retries<T>(cfg: &EndpointConfig, mut f: impl FnMut() -> Result<T, ClientError>) -> Result<T, ClientError> {
    let mut attempt = 0;
    loop {
        match f() {
            Err(e) if e.is_retryable() && attempt < cfg.retries => {
                std::thread::sleep(Duration::from_millis(cfg.backoff_ms.saturating_mul(1 << attempt.min(16))));
                attempt += 1;
            }
            other => return other,
        }
    }
}

type Reply = (String, Option<Vec<Vec<f64>>>);

fn call(client: &dyn InferenceClient, req: &Request, cfg: &EndpointConfig) -> Result<Reply, ClientError> {
    match req {
        Request::Generate(r) => with_retries(cfg, || client.generate(r)).map(|s| (s, None)),
        Request::Score(rs) => {
            let lps = rs.iter().map(|r| with_retries(cfg, || client.score(r))).collect::<Result<Vec<_>, _>>()?;
            Ok((String::new(), Some(lps)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore<S> {
    pub task_id: String,
    pub total: usize,
    pub correct: usize,
    pub empty: usize,
    pub errors: usize,
    /// Percentage of correct answers: `100 · correct / total`.
    pub accuracy: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportColumn<S> {
    pub name: String,
    pub accuracy: Option<S>,
}

/// A headline table: named columns plus the unweighted mean over the filled ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable<S> {
    pub name: String,
    pub columns: Vec<ReportColumn<S>>,
    pub avg: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport<S> {
    pub status: RunStatus,
    pub k: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    pub fingerprint: String,
    pub tasks: Vec<TaskScore<S>>,
    pub tables: Vec<ReportTable<S>>,
    /// Episodes never sent because the run stopped early.
    pub unattempted: usize,
}

/// `(table, columns as (task id, header))` in display order.
pub const REPORT_TABLES: [(&str, &[(&str, &str)]); 2] = [
    (
        "icl_tasks",
        &[
            ("seed_23", "SEED 23"),
            ("seed_unseen", "Unseen"),
            ("seed_ic", "Ins Count"),
            ("vlc_mc", "MC VL"),
            ("vlc_qa", "QA VL"),
            ("vlc_cap", "Cap VL"),
        ],
    ),
    (
        "fewshot",
        &[
            ("fewshot/food101", "Food"),
            ("fewshot/cars", "Cars"),
            ("fewshot/dogs", "Dogs"),
            ("fewshot/cub", "CUB"),
            ("fewshot/flowers", "Flowers"),
        ],
    ),
];

impl<S: Scalar> RunReport<S> {
    pub fn task(&self, task_id: &str) -> Option<&TaskScore<S>> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn table(&self, name: &str) -> Option<&ReportTable<S>> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let mut text = serde_json::to_string_pretty(self).expect("serializable");
        text.push('\n');
        jsonl::write_atomic(path, text.as_bytes())?;
        Ok(())
    }

    /// Plain-text rendering of the headline tables and per-task counts.
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "k={} status={:?} fingerprint={}\n",
            self.k,
            self.status,
            &self.fingerprint[..16.min(self.fingerprint.len())]
        );
        for t in &self.tables {
            let headers: Vec<&str> = t.columns.iter().map(|c| c.name.as_str()).chain(["AVG"]).collect();
            let cells: Vec<String> = t
                .columns
                .iter()
                .map(|c| c.accuracy.map_or("-".to_string(), |a| format!("{a:.2}")))
                .chain([format!("{:.2}", t.avg)])
                .collect();
            let widths: Vec<usize> = headers.iter().zip(&cells).map(|(h, c)| h.len().max(c.len())).collect();
            let row = |items: Vec<String>| {
                items.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect::<Vec<_>>().join(" | ")
            };
            out.push_str(&row(headers.iter().map(|h| h.to_string()).collect()));
            out.push('\n');
            out.push_str(&row(cells));
            out.push('\n');
        }
        for t in &self.tasks {
            out.push_str(&format!(
                "{}: {}/{} correct, {} empty, {} errors, {:.2}%\n",
                t.task_id, t.correct, t.total, t.empty, t.errors, t.accuracy
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub k: usize,
    pub seed: Option<u64>,
    /// Drop failed episodes from the denominator instead of counting them wrong.
    pub exclude_errors: bool,
    /// Never contact the endpoint; episodes missing from the cache count as errors.
    pub cache_only: bool,
}

impl RunOptions {
    pub fn new(k: usize) -> Self {
        RunOptions { k, seed: None, exclude_errors: false, cache_only: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Outcome {
    Correct,
    Wrong,
    Empty,
    Error,
    Unattempted,
}

fn judge(e: &Episode, t: &Transcript) -> Outcome {
    match e.eval_mode {
        EvalMode::ExactMatch => {
            if t.response.trim().is_empty() {
                Outcome::Empty
            } else if score_exact_match(&t.response, &e.ground_truth, MatchMode::for_episode(e)) {
                Outcome::Correct
            } else {
                Outcome::Wrong
            }
        }
        EvalMode::PerplexityChoice => {
            let nll: Vec<Vec<f64>> = t.logprobs.iter().flatten().map(|lp| lp.iter().map(|x| -x).collect()).collect();
            match (choose_by_mean_nll(&nll), e.answer_index()) {
                (Some(chosen), Some(gt)) if chosen == gt => Outcome::Correct,
                _ => Outcome::Wrong,
            }
        }
    }
}

/// Stable digest of the run configuration and episode set.
pub fn fingerprint(episodes: &[Episode], cfg: &EndpointConfig, opts: &RunOptions) -> String {
    let episode_hashes: Vec<String> = episodes.iter().map(hash_json).collect();
    hash_json(&serde_json::json!({
        "template_bank": TEMPLATE_BANK_VERSION,
        "temperature": TEMPERATURE,
        "max_tokens": cfg.max_tokens,
        "model": cfg.model,
        "k": opts.k,
        "image_mode": cfg.image_mode,
        "exclude_errors": opts.exclude_errors,
        "episodes": hash_json(&episode_hashes),
    }))
}

fn aggregate<S: Scalar>(episodes: &[Episode], outcomes: &[Outcome], exclude_errors: bool) -> Vec<TaskScore<S>> {
    let mut by_task: BTreeMap<&str, TaskScore<S>> = BTreeMap::new();
    for (e, o) in episodes.iter().zip(outcomes) {
        let t = by_task.entry(e.task_id.as_str()).or_insert_with(|| TaskScore {
            task_id: e.task_id.clone(),
            total: 0,
            correct: 0,
            empty: 0,
            errors: 0,
            accuracy: S::zero(),
        });
        match o {
            Outcome::Unattempted => continue,
            Outcome::Error if exclude_errors => {
                t.errors += 1;
                continue;
            }
            Outcome::Error => t.errors += 1,
            Outcome::Empty => t.empty += 1,
            Outcome::Correct => t.correct += 1,
            Outcome::Wrong => {}
        }
        t.total += 1;
    }
    by_task
        .into_values()
        .map(|mut t| {
            t.accuracy = scalar::fraction::<S>(100 * t.correct, t.total);
            t
        })
        .collect()
}

/// Headline tables for every table with at least one task present.
pub fn report_tables<S: Scalar>(tasks: &[TaskScore<S>]) -> Vec<ReportTable<S>> {
    REPORT_TABLES
        .iter()
        .filter_map(|(name, cols)| {
            let columns: Vec<ReportColumn<S>> = cols
                .iter()
                .map(|(task, header)| ReportColumn {
                    name: header.to_string(),
                    accuracy: tasks.iter().find(|t| t.task_id == *task).map(|t| t.accuracy),
                })
                .collect();
            let filled: Vec<S> = columns.iter().filter_map(|c| c.accuracy).collect();
            (!filled.is_empty()).then(|| ReportTable { name: name.to_string(), avg: scalar::mean(&filled), columns })
        })
        .collect()
}

/// Runs every episode at `opts.k` shots, filling `cache` with new transcripts.
///
/// Requests fan out over at most `cfg.max_parallel` threads; results are keyed by episode
/// position, so the report does not depend on completion order. Episodes already in the
/// cache are never sent.
pub fn run_suite<S: Scalar>(
    episodes: &[Episode],
    client: Option<&dyn InferenceClient>,
    cfg: &EndpointConfig,
    opts: &RunOptions,
    cache: &mut TranscriptCache,
) -> Result<RunReport<S>, EvalError> {
    cfg.validate()?;
    if !opts.cache_only {
        cfg.check_modes(episodes)?;
    }
    let requests: Vec<(Request, String)> = episodes
        .iter()
        .map(|e| {
            build_request(e, opts.k, cfg).map(|r| {
                let h = r.hash();
                (r, h)
            })
        })
        .collect::<Result<_, _>>()?;

    let mut transcripts: Vec<Option<Transcript>> =
        episodes.iter().zip(&requests).map(|(e, (_, h))| cache.get(&e.id, opts.k, h).cloned()).collect();
    let pending: Vec<usize> = (0..episodes.len()).filter(|&i| transcripts[i].is_none()).collect();
    let mut attempted = vec![true; episodes.len()];

    if let (Some(client), false) = (client, opts.cache_only) {
        let budget = (MAX_FAILURE_FRACTION * episodes.len() as f64).floor() as usize;
        let next = AtomicUsize::new(0);
        let failures = AtomicUsize::new(0);
        let results: Mutex<Vec<(usize, Option<Transcript>)>> = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..cfg.max_parallel.min(pending.len().max(1)) {
                scope.spawn(|| loop {
                    if failures.load(Ordering::SeqCst) > budget {
                        break;
                    }
                    let slot = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&i) = pending.get(slot) else { break };
                    let (req, hash) = &requests[i];
                    let t = match call(client, req, cfg) {
                        Ok((response, logprobs)) => Some(Transcript {
                            episode_id: episodes[i].id.clone(),
                            k: opts.k,
                            request_hash: hash.clone(),
                            response,
                            logprobs,
                        }),
                        Err(_) => {
                            failures.fetch_add(1, Ordering::SeqCst);
                            None
                        }
                    };
                    results.lock().expect("results lock").push((i, t));
                });
            }
        });
        let mut done = vec![false; episodes.len()];
        for (i, t) in results.into_inner().expect("results lock") {
            done[i] = true;
            if let Some(t) = t {
                cache.insert(t.clone());
                transcripts[i] = Some(t);
            }
        }
        for &i in &pending {
            attempted[i] = done[i];
        }
    }

    let outcomes: Vec<Outcome> = episodes
        .iter()
        .zip(&transcripts)
        .zip(&attempted)
        .map(|((e, t), &a)| match (t, a) {
            (Some(t), _) => judge(e, t),
            (None, true) => Outcome::Error,
            (None, false) => Outcome::Unattempted,
        })
        .collect();
    let unattempted = outcomes.iter().filter(|o| **o == Outcome::Unattempted).count();
    let errors = outcomes.iter().filter(|o| **o == Outcome::Error).count();
    let partial = unattempted > 0 || errors as f64 > MAX_FAILURE_FRACTION * episodes.len() as f64;
    let tasks = aggregate::<S>(episodes, &outcomes, opts.exclude_errors);
    Ok(RunReport {
        status: if partial { RunStatus::Partial } else { RunStatus::Complete },
        k: opts.k,
        seed: opts.seed,
        fingerprint: fingerprint(episodes, cfg, opts),
        tables: report_tables(&tasks),
        tasks,
        unattempted,
    })
}

/// One report per shot count over the same episodes, so comparisons across `k` are paired.
pub fn run_paired<S: Scalar>(
    episodes: &[Episode],
    client: Option<&dyn InferenceClient>,
    cfg: &EndpointConfig,
    ks: &[usize],
    base: &RunOptions,
    cache: &mut TranscriptCache,
) -> Result<Vec<RunReport<S>>, EvalError> {
    ks.iter().map(|&k| run_suite(episodes, client, cfg, &RunOptions { k, ..base.clone() }, cache)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Provenance, Shot, TaskType};
    use rand::{Rng, SeedableRng};
    use std::sync::atomic::AtomicUsize;

    fn shot(i: usize, response: &str) -> Shot {
        Shot {
            s1: format!("Look {i} "),
            s2: format!("\nWhich? {i}"),
            image: ImageRef::new(format!("img{i}.jpg")),
            response: response.into(),
            provenance: Provenance {
                record_id: format!("r{i}"),
                partition: "vlc/color".into(),
                task_type: TaskType::MultiChoice,
                option_order: None,
            },
        }
    }

    fn episode(id: &str, gt: &str, mode: EvalMode) -> Episode {
        Episode {
            id: id.into(),
            task_id: "vlc_mc".into(),
            partition: "vlc/color".into(),
            context_shots: vec![shot(1, "A"), shot(2, "B")],
            query: shot(3, ""),
            ground_truth: gt.into(),
            options: Some(vec!["red".into(), "blue".into(), "green".into(), "pink".into()]),
            eval_mode: mode,
        }
    }

    #[test]
    fn render_shapes() {
        let e = episode("e", "A", EvalMode::ExactMatch);
        let p = render_prompt(&e, 0).unwrap();
        assert_eq!((p.messages.len(), p.images.len()), (1, 1));
        let p = render_prompt(&e, 2).unwrap();
        assert_eq!((p.messages.len(), p.images.len()), (5, 3));
        let p = render_prompt(&e, 1).unwrap();
        assert_eq!(p.images[0], ImageRef::new("img2.jpg"));
        assert!(matches!(render_prompt(&e, 3), Err(EvalError::NotEnoughShots { .. })));
    }

    #[test]
    fn render_reparse_round_trip() {
        let e = episode("e", "A", EvalMode::ExactMatch);
        let parsed = reparse(&render_prompt(&e, 2).unwrap()).unwrap();
        for (p, s) in parsed.iter().zip(&e.context_shots) {
            assert_eq!(
                (&p.s1, &p.image, &p.s2, p.response.as_deref()),
                (&s.s1, &s.image, &s.s2, Some(s.response.as_str()))
            );
        }
        assert_eq!(parsed[2].response, None);
        assert_eq!(parsed[2].s1, e.query.s1);
    }

    #[test]
    fn prompt_text_matches_training_format() {
        let e = episode("e", "A", EvalMode::ExactMatch);
        let text = prompt_text(&render_prompt(&e, 1).unwrap());
        assert_eq!(text, "Human: Look 2 <image>\nWhich? 2\nGPT: B\nHuman: Look 3 <image>\nWhich? 3\nGPT: ");
    }

    #[test]
    fn exact_match_examples() {
        assert!(score_exact_match("B.", "B", MatchMode::Letter));
        assert!(score_exact_match(" b ", "B", MatchMode::Letter));
        assert!(!score_exact_match("", "B", MatchMode::Letter));
        assert!(!score_exact_match("", "", MatchMode::String));
        assert!(!score_exact_match("BB", "B", MatchMode::Letter));
        assert!(!score_exact_match("B) red", "B", MatchMode::Letter));
        assert!(score_exact_match("a red car", "a red car ", MatchMode::String));
        assert!(!score_exact_match("A red car", "a red car", MatchMode::String));
    }

    #[test]
    fn mean_nll_hand_example() {
        assert_eq!(choose_by_mean_nll(&[vec![2.0, 2.0], vec![1.0, 3.0, 5.0]]), Some(0));
        assert_eq!(choose_by_mean_nll(&[vec![1.0f32], vec![1.0], vec![1.0], vec![1.0]]), Some(0));
        assert_eq!(choose_by_mean_nll::<f64>(&[vec![], vec![7.0]]), Some(1));
        assert_eq!(choose_by_mean_nll::<f64>(&[]), None);
    }

    struct Echo {
        calls: AtomicUsize,
        fail: bool,
    }

    impl InferenceClient for Echo {
        fn generate(&self, req: &ChatRequest) -> Result<String, ClientError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fail {
                return Err(ClientError::Status { status: 400, body: "no".into() });
            }
            let last = req.messages.last().unwrap();
            let Some(ContentPart::Text { text }) = last.content.last() else { unreachable!() };
            Ok(if text.ends_with('3') { "A." } else { "C" }.into())
        }

        fn score(&self, req: &ScoreRequest) -> Result<Vec<f64>, ClientError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(vec![-(req.continuation.len() as f64)])
        }
    }

    fn cfg() -> EndpointConfig {
        EndpointConfig { score_logprob: true, backoff_ms: 0, ..EndpointConfig::new("http://127.0.0.1:1") }
    }

    #[test]
    fn run_counts_and_cache_replay() {
        let episodes = vec![
            episode("e1", "A", EvalMode::ExactMatch),
            episode("e2", "B", EvalMode::ExactMatch),
            episode("e3", "B", EvalMode::PerplexityChoice),
        ];
        let client = Echo { calls: AtomicUsize::new(0), fail: false };
        let mut cache = TranscriptCache::default();
        let r1: RunReport<f64> = run_suite(&episodes, Some(&client), &cfg(), &RunOptions::new(2), &mut cache).unwrap();
        let t = r1.task("vlc_mc").unwrap();
        // e1 correct, e2 wrong, e3: shortest option "red" wins (A) but gt is B.
        assert_eq!((t.total, t.correct), (3, 1));
        assert_eq!(t.accuracy, 100.0 / 3.0);
        assert_eq!(r1.status, RunStatus::Complete);
        let calls = client.calls.load(Ordering::SeqCst);
        assert_eq!(calls, 2 + 4);

        let opts = RunOptions { cache_only: true, ..RunOptions::new(2) };
        let r2: RunReport<f64> = run_suite(&episodes, None, &cfg(), &opts, &mut cache).unwrap();
        assert_eq!(r1.tasks, r2.tasks);
        let r3: RunReport<f64> = run_suite(&episodes, Some(&client), &cfg(), &RunOptions::new(2), &mut cache).unwrap();
        assert_eq!(client.calls.load(Ordering::SeqCst), calls);
        assert_eq!(r1, r3);
    }

    #[test]
    fn failures_count_wrong_and_mark_partial() {
        let episodes: Vec<Episode> = (0..10).map(|i| episode(&format!("e{i}"), "A", EvalMode::ExactMatch)).collect();
        let client = Echo { calls: AtomicUsize::new(0), fail: true };
        let mut cache = TranscriptCache::default();
        let r: RunReport<f64> = run_suite(&episodes, Some(&client), &cfg(), &RunOptions::new(0), &mut cache).unwrap();
        assert_eq!(r.status, RunStatus::Partial);
        let t = r.task("vlc_mc").unwrap();
        assert_eq!(t.correct, 0);
        assert!(t.errors >= 1);
        assert!(r.unattempted + t.errors == 10);
        assert!(cache.is_empty());

        let opts = RunOptions { exclude_errors: true, ..RunOptions::new(0) };
        let r: RunReport<f64> = run_suite(&episodes, Some(&client), &cfg(), &opts, &mut cache).unwrap();
        assert_eq!(r.task("vlc_mc").unwrap().total, 0);
    }

    #[test]
    fn perplexity_needs_logprob_mode() {
        let episodes = vec![episode("e", "A", EvalMode::PerplexityChoice)];
        let client = Echo { calls: AtomicUsize::new(0), fail: false };
        let c = EndpointConfig { score_logprob: false, ..cfg() };
        let err = run_suite::<f64>(&episodes, Some(&client), &c, &RunOptions::new(0), &mut TranscriptCache::default());
        assert!(matches!(err, Err(EvalError::NoLogprob(_))));
    }

    #[test]
    fn tables_average_filled_columns() {
        let mk = |id: &str, correct| TaskScore::<f64> {
            task_id: id.into(),
            total: 4,
            correct,
            empty: 0,
            errors: 0,
            accuracy: correct as f64 * 25.0,
        };
        let tables = report_tables(&[mk("seed_ic", 1), mk("vlc_mc", 4), mk("fewshot/dogs", 2)]);
        assert_eq!(tables.len(), 2);
        assert_eq!(
            tables[0].columns.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(),
            ["SEED 23", "Unseen", "Ins Count", "MC VL", "QA VL", "Cap VL"]
        );
        assert_eq!(tables[0].avg, 62.5);
        assert_eq!(tables[1].avg, 50.0);
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let episodes = vec![episode("e", "A", EvalMode::ExactMatch)];
        let a = fingerprint(&episodes, &cfg(), &RunOptions::new(1));
        assert_eq!(a, fingerprint(&episodes, &cfg(), &RunOptions::new(1)));
        assert_ne!(a, fingerprint(&episodes, &cfg(), &RunOptions::new(2)));
    }

    #[test]
    fn base64_images_are_inlined() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("img3.png"), [1u8, 2, 3]).unwrap();
        let mut messages = vec![user_message("x", &ImageRef::new("img3.png"), "")];
        resolve_images(&mut messages, ImageMode::Base64, Some(dir.path())).unwrap();
        let ContentPart::ImageUrl { image_url } = &messages[0].content[1] else { panic!() };
        assert_eq!(image_url.url, "data:image/png;base64,AQID");
    }

    #[test]
    fn random_choice_cases_match_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let opts: Vec<Vec<f64>> =
                (0..4).map(|_| (0..rng.random_range(1..5)).map(|_| rng.random_range(0..4) as f64).collect()).collect();
            let means: Vec<f64> = opts.iter().map(|o| o.iter().sum::<f64>() / o.len() as f64).collect();
            let min = means.iter().cloned().fold(f64::INFINITY, f64::min);
            let expected = means.iter().position(|m| *m == min).unwrap();
            assert_eq!(choose_by_mean_nll(&opts), Some(expected));
        }
    }
}
