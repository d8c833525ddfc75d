//! Single-token MCQA inference: prompt assembly, first-token option
//! probabilities, and confidence normalization.
//!
//! The prompt instructs the model to answer with one letter, so the
//! probability mass the backend assigns to each option label's first token
//! is a direct readout of the model's preference. Dividing each option's
//! probability by the sum over options yields the confidence score that
//! drives the hyperparameter sweeps.
//!
//! Two backends ship: [`ScriptedBackend`], which replays fixture
//! probabilities keyed by question/config/prompt-content and makes whole
//! pipelines deterministic, and [`HttpBackend`], a client for completion
//! endpoints that report top log-probabilities.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::BufRead;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Tokenizer;
use crate::retrieval::{Passage, RetrievalConfig};
use crate::semaphore::Semaphore;

/// Raw probability assigned to a label the backend did not report.
pub const PROB_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid question `{qid}`: {detail}")]
    InvalidQuestion { qid: String, detail: String },
    #[error("unknown prompt template `{0}`")]
    UnknownTemplate(String),
    #[error("question alone exceeds the context budget ({needed} > {budget} tokens)")]
    Unanswerable { needed: usize, budget: usize },
    #[error("raw probability for option {label} must be positive, got {value}")]
    NonPositiveProbability { label: Label, value: f64 },
    #[error("backend `{backend}` transport failure: {detail}")]
    Transport { backend: String, detail: String },
    #[error("backend `{backend}` returned HTTP {status}")]
    HttpStatus { backend: String, status: u16 },
    #[error("backend `{backend}` response missing `{field}`")]
    MissingField { backend: String, field: String },
    #[error("no scripted record matches qid `{qid}`")]
    NoScriptedRecord { qid: String },
    #[error("scripted fixture {path} line {line}: {detail}")]
    BadFixture {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Questions and labels
// ---------------------------------------------------------------------------

/// Option label, one of `A`..`E`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Label(char);

impl Label {
    pub const A: Label = Label('A');

    pub fn new(c: char) -> Option<Label> {
        ('A'..='E').contains(&c).then_some(Label(c))
    }

    /// `A, B, ...` for the first `n` labels.
    pub fn first_n(n: usize) -> Vec<Label> {
        ('A'..='E').take(n).map(Label).collect()
    }

    pub fn as_char(&self) -> char {
        self.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl TryFrom<String> for Label {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Label::new(c).ok_or_else(|| format!("label out of range: `{s}`")),
            _ => Err(format!("label must be a single character, got `{s}`")),
        }
    }
}

impl From<Label> for String {
    fn from(label: Label) -> String {
        label.0.to_string()
    }
}

/// A multiple-choice question with labeled options and an optional gold
/// answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCQuestion {
    pub qid: String,
    pub stem: String,
    pub options: BTreeMap<Label, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl MCQuestion {
    pub fn new(
        qid: impl Into<String>,
        stem: impl Into<String>,
        options: BTreeMap<Label, String>,
        gold: Option<Label>,
    ) -> Result<Self, InferenceError> {
        let q = MCQuestion {
            qid: qid.into(),
            stem: stem.into(),
            options,
            gold,
            category: None,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        let invalid = |detail: String| InferenceError::InvalidQuestion {
            qid: self.qid.clone(),
            detail,
        };
        if self.options.len() < 2 || self.options.len() > 5 {
            return Err(invalid(format!(
                "expected 2 to 5 options, got {}",
                self.options.len()
            )));
        }
        let expected = Label::first_n(self.options.len());
        let actual: Vec<Label> = self.options.keys().copied().collect();
        if actual != expected {
            return Err(invalid(format!(
                "labels must be consecutive from A, got {actual:?}"
            )));
        }
        if let Some(gold) = self.gold {
            if !self.options.contains_key(&gold) {
                return Err(invalid(format!("gold label {gold} is not an option")));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<Label> {
        self.options.keys().copied().collect()
    }
}

// ---------------------------------------------------------------------------
// Prompt assembly
// ---------------------------------------------------------------------------

/// Identifier of the single built-in prompt template.
pub const DEFAULT_TEMPLATE: &str = "default";

const INSTRUCTION: &str = "Answer with only the letter of the correct option.";
const ANSWER_CUE: &str = "Answer:";

/// An assembled prompt and the passages that made it in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub included_passages: Vec<Passage>,
    pub token_estimate: usize,
    pub budget: usize,
}

impl Prompt {
    /// SHA-256 of the prompt text, lowercase hex.
    pub fn digest(&self) -> String {
        to_hex(&Sha256::digest(self.text.as_bytes()))
    }
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn render(q: &MCQuestion, passages: &[&Passage]) -> String {
    let mut s = String::new();
    s.push_str(INSTRUCTION);
    s.push_str("\n\n");
    if !passages.is_empty() {
        s.push_str("Context:\n");
        for (i, p) in passages.iter().enumerate() {
            s.push_str(&format!("[{}] {}\n", i + 1, p.text));
        }
        s.push('\n');
    }
    s.push_str(&format!("Question: {}\n", q.stem));
    for (label, text) in &q.options {
        s.push_str(&format!("{label}. {text}\n"));
    }
    s.push('\n');
    s.push_str(ANSWER_CUE);
    s
}

/// Assemble the single-token answer prompt under a token budget.
///
/// Passages are considered in descending score order; one that would push
/// the rendered prompt over budget is skipped, and lower-ranked passages are
/// still considered. Zero passages produce the plain no-context prompt. A
/// question whose prompt exceeds the budget even with no passages is
/// unanswerable.
pub fn assemble_prompt(
    q: &MCQuestion,
    passages: &[Passage],
    budget: usize,
    template_id: &str,
    tokenizer: &dyn Tokenizer,
) -> Result<Prompt, InferenceError> {
    if template_id != DEFAULT_TEMPLATE {
        return Err(InferenceError::UnknownTemplate(template_id.to_string()));
    }
    let base = render(q, &[]);
    let base_tokens = tokenizer.count_tokens(&base);
    if base_tokens > budget {
        return Err(InferenceError::Unanswerable {
            needed: base_tokens,
            budget,
        });
    }

    let mut ranked: Vec<&Passage> = passages.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.seed_chunk_id.cmp(&b.seed_chunk_id))
    });

    let mut included: Vec<&Passage> = Vec::new();
    let mut text = base;
    let mut token_estimate = base_tokens;
    for passage in ranked {
        included.push(passage);
        let candidate = render(q, &included);
        let tokens = tokenizer.count_tokens(&candidate);
        if tokens <= budget {
            text = candidate;
            token_estimate = tokens;
        } else {
            included.pop();
        }
    }

    Ok(Prompt {
        text,
        included_passages: included.into_iter().cloned().collect(),
        token_estimate,
        budget,
    })
}

// ---------------------------------------------------------------------------
// Probabilities and confidence
// ---------------------------------------------------------------------------

/// Per-option first-token probabilities as reported by a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawOptionProbs {
    pub probs: BTreeMap<Label, f64>,
    /// Backend id the values came from.
    pub source: String,
}

/// Normalized option probabilities with the chosen answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceResult {
    pub normalized: BTreeMap<Label, f64>,
    pub chosen: Label,
    /// `normalized[chosen]`, in `(0, 1]`.
    pub confidence: f64,
}

/// Divide each raw probability by the option sum; the chosen label is the
/// argmax, ties broken by the lexicographically smallest label.
pub fn normalize_confidence(raw: &RawOptionProbs) -> Result<ConfidenceResult, InferenceError> {
    for (label, value) in &raw.probs {
        if !(value.is_finite() && *value > 0.0) {
            return Err(InferenceError::NonPositiveProbability {
                label: *label,
                value: *value,
            });
        }
    }
    let total: f64 = raw.probs.values().sum();
    let normalized: BTreeMap<Label, f64> =
        raw.probs.iter().map(|(l, v)| (*l, v / total)).collect();
    // BTreeMap iterates labels in order, so strict `>` keeps the smallest
    // label among ties.
    let (chosen, confidence) = normalized
        .iter()
        .fold(None::<(Label, f64)>, |best, (l, v)| match best {
            Some((_, bv)) if *v <= bv => best,
            _ => Some((*l, *v)),
        })
        .expect("at least two options");
    Ok(ConfidenceResult {
        normalized,
        chosen,
        confidence,
    })
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

/// Everything a backend may key its answer on.
pub struct InferenceRequest<'a> {
    pub prompt: &'a Prompt,
    pub labels: &'a [Label],
    /// Question id, when known.
    pub qid: Option<&'a str>,
    /// Retrieval configuration that produced the prompt, when applicable
    /// (`None` for the no-context baseline).
    pub config: Option<&'a RetrievalConfig>,
}

/// Source of first-token option probabilities.
pub trait InferenceBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Probability that the first generated token is each label's token.
    /// Labels the backend does not report receive [`PROB_FLOOR`].
    fn first_token_probs(&self, req: &InferenceRequest<'_>)
        -> Result<RawOptionProbs, InferenceError>;
}

fn floor_probs(map: &BTreeMap<Label, f64>, labels: &[Label], source: &str) -> RawOptionProbs {
    let probs = labels
        .iter()
        .map(|l| (*l, map.get(l).copied().unwrap_or(PROB_FLOOR)))
        .collect();
    RawOptionProbs {
        probs,
        source: source.to_string(),
    }
}

// -- scripted ---------------------------------------------------------------

/// Retrieval configuration key as written in scripted fixtures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepKey {
    pub k: usize,
    pub window: usize,
    pub provider: String,
}

impl SweepKey {
    pub fn of(cfg: &RetrievalConfig) -> Self {
        SweepKey {
            k: cfg.k,
            window: cfg.window,
            provider: cfg.provider.name.clone(),
        }
    }
}

/// One line of a scripted-backend fixture.
///
/// Records are matched against a request in precedence order:
/// 1. `qid` + `config` both match;
/// 2. `qid` matches and the record has no `config`;
/// 3. `prompt_sha256` equals the prompt digest;
/// 4. default record (neither `qid` nor `prompt_sha256` nor `config`).
///
/// Within a tier the first record in file order wins. A record with a
/// `needle` answers with `probs` when the prompt text contains the needle
/// and with `probs_absent` otherwise, which lets fixtures reward prompts
/// that actually retrieved the right context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SweepKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub needle: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    pub probs: BTreeMap<Label, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs_absent: Option<BTreeMap<Label, f64>>,
}

/// Deterministic backend replaying fixture probabilities.
pub struct ScriptedBackend {
    records: Vec<ScriptedRecord>,
}

impl ScriptedBackend {
    pub fn new(records: Vec<ScriptedRecord>) -> Result<Self, InferenceError> {
        for (i, rec) in records.iter().enumerate() {
            validate_record(rec, "<memory>", i + 1)?;
        }
        Ok(ScriptedBackend { records })
    }

    /// Load a JSONL fixture, one [`ScriptedRecord`] per line.
    pub fn from_path(path: &Path) -> Result<Self, InferenceError> {
        let file = fs::File::open(path).map_err(|e| InferenceError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut records = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| InferenceError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ScriptedRecord =
                serde_json::from_str(&line).map_err(|e| InferenceError::BadFixture {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    detail: e.to_string(),
                })?;
            validate_record(&rec, &path.display().to_string(), lineno + 1)?;
            records.push(rec);
        }
        Ok(ScriptedBackend { records })
    }

    fn lookup(&self, req: &InferenceRequest<'_>) -> Option<&ScriptedRecord> {
        if let (Some(qid), Some(cfg)) = (req.qid, req.config) {
            let hit = self.records.iter().find(|r| {
                r.qid.as_deref() == Some(qid)
                    && r.config.as_ref().is_some_and(|c| *c == SweepKey::of(cfg))
            });
            if hit.is_some() {
                return hit;
            }
        }
        if let Some(qid) = req.qid {
            let hit = self
                .records
                .iter()
                .find(|r| r.qid.as_deref() == Some(qid) && r.config.is_none());
            if hit.is_some() {
                return hit;
            }
        }
        let digest = req.prompt.digest();
        let hit = self
            .records
            .iter()
            .find(|r| r.prompt_sha256.as_deref() == Some(digest.as_str()));
        if hit.is_some() {
            return hit;
        }
        self.records
            .iter()
            .find(|r| r.qid.is_none() && r.prompt_sha256.is_none() && r.config.is_none())
    }
}

fn validate_record(rec: &ScriptedRecord, path: &str, line: usize) -> Result<(), InferenceError> {
    let bad = |detail: String| InferenceError::BadFixture {
        path: path.to_string(),
        line,
        detail,
    };
    if rec.probs.is_empty() {
        return Err(bad("probs must be non-empty".into()));
    }
    for map in [Some(&rec.probs), rec.probs_absent.as_ref()].into_iter().flatten() {
        for (label, v) in map {
            if !(v.is_finite() && *v > 0.0) {
                return Err(bad(format!("probability for {label} must be positive")));
            }
        }
    }
    if rec.needle.is_some() && rec.probs_absent.is_none() {
        return Err(bad("record with a needle requires probs_absent".into()));
    }
    Ok(())
}

impl InferenceBackend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn first_token_probs(
        &self,
        req: &InferenceRequest<'_>,
    ) -> Result<RawOptionProbs, InferenceError> {
        let rec = self
            .lookup(req)
            .ok_or_else(|| InferenceError::NoScriptedRecord {
                qid: req.qid.unwrap_or("<none>").to_string(),
            })?;
        let map = match (&rec.needle, &rec.probs_absent) {
            (Some(needle), Some(absent)) if !req.prompt.text.contains(needle) => absent,
            _ => &rec.probs,
        };
        Ok(floor_probs(map, req.labels, self.id()))
    }
}

// -- http ---------------------------------------------------------------

/// Configuration for [`HttpBackend`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Full completion endpoint URL.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    /// How many top alternatives to request per position.
    #[serde(default = "default_logprobs")]
    pub logprobs: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Additional attempts after a transport or 5xx failure.
    #[serde(default)]
    pub retries: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_logprobs() -> usize {
    5
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_in_flight() -> usize {
    4
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    logprobs: usize,
    temperature: f32,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    logprobs: Option<LogprobData>,
}

#[derive(Deserialize)]
struct LogprobData {
    top_logprobs: Option<Vec<BTreeMap<String, f64>>>,
}

/// Client for a completion endpoint that reports per-position top
/// log-probabilities. Temperature is pinned to 0 and exactly one token is
/// requested; option probabilities are read from the first position.
pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    in_flight: Semaphore,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, InferenceError> {
        let api_key = config
            .api_key_env
            .as_ref()
            .and_then(|name| std::env::var(name).ok());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| InferenceError::Transport {
                backend: "http".into(),
                detail: e.to_string(),
            })?;
        Ok(HttpBackend {
            in_flight: Semaphore::new(config.max_in_flight),
            config,
            api_key,
            client,
        })
    }

    fn send_once(&self, prompt: &str) -> Result<CompletionResponse, InferenceError> {
        let _permit = self.in_flight.acquire();
        let mut req = self.client.post(&self.config.base_url).json(&CompletionRequest {
            model: &self.config.model,
            prompt,
            max_tokens: 1,
            logprobs: self.config.logprobs,
            temperature: 0.0,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| InferenceError::Transport {
            backend: "http".into(),
            detail: e.to_string(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(InferenceError::HttpStatus {
                backend: "http".into(),
                status: status.as_u16(),
            });
        }
        resp.json().map_err(|e| InferenceError::Transport {
            backend: "http".into(),
            detail: format!("unreadable response body: {e}"),
        })
    }

    fn send(&self, prompt: &str) -> Result<CompletionResponse, InferenceError> {
        let mut last = None;
        for _ in 0..=self.config.retries {
            match self.send_once(prompt) {
                Ok(resp) => return Ok(resp),
                Err(e @ InferenceError::HttpStatus { status, .. }) if status >= 500 => {
                    last = Some(e);
                }
                Err(e @ InferenceError::Transport { .. }) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

impl InferenceBackend for HttpBackend {
    fn id(&self) -> &str {
        "http"
    }

    fn first_token_probs(
        &self,
        req: &InferenceRequest<'_>,
    ) -> Result<RawOptionProbs, InferenceError> {
        let missing = |field: &str| InferenceError::MissingField {
            backend: "http".into(),
            field: field.to_string(),
        };
        let resp = self.send(&req.prompt.text)?;
        let choice = resp.choices.first().ok_or_else(|| missing("choices[0]"))?;
        let logprobs = choice
            .logprobs
            .as_ref()
            .ok_or_else(|| missing("choices[0].logprobs"))?;
        let top = logprobs
            .top_logprobs
            .as_ref()
            .ok_or_else(|| missing("choices[0].logprobs.top_logprobs"))?;
        let first = top.first().ok_or_else(|| missing("top_logprobs[0]"))?;

        // Option tokens are the labels, usually preceded by a space after
        // the answer cue; prefer the spaced form.
        let mut map = BTreeMap::new();
        for &label in req.labels {
            let spaced = format!(" {label}");
            let plain = label.to_string();
            if let Some(lp) = first.get(&spaced).or_else(|| first.get(&plain)) {
                map.insert(label, lp.exp());
            }
        }
        Ok(floor_probs(&map, req.labels, self.id()))
    }
}
