//! Hyperparameter sweeps over the (chunk number x window size) grid, scored
//! by first-token confidence.
//!
//! Two policies share the same visit order (provider outermost, then chunk
//! number, then window size): the threshold method answers as soon as a
//! configuration's confidence clears the threshold, while the
//! best-probability method visits every configuration and keeps the global
//! maximum. Per-question retrieval is cached within a sweep: the top-k lists
//! for every `k` in the grid are prefixes of one search at the largest `k`.

use std::collections::HashMap;
use std::fs;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{write_atomic, Corpus, Tokenizer};
use crate::embedding::{EmbeddingProvider, ProviderId};
use crate::inference::{
    assemble_prompt, normalize_confidence, ConfidenceResult, InferenceBackend, InferenceError,
    InferenceRequest, MCQuestion,
};
use crate::retrieval::{expand_and_merge, retrieve, RetrievalConfig, RetrievalError};
use crate::vindex::{ScoredHit, VectorIndex};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("sweep grid lists must be non-empty")]
    EmptyGrid,
    #[error("sweep grid lists must be strictly ascending")]
    NotAscending,
    #[error("threshold must be in (0, 1], got {0}")]
    InvalidTheta(f64),
    #[error("no provider stack named `{0}`")]
    UnknownProvider(String),
    #[error("cannot combine zero sweep results")]
    EmptyCombine,
    #[error("sweep aborted at config {config}: {source}")]
    Pipeline {
        config: String,
        #[source]
        source: PipelineError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed sweep record in {path} line {line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
}

/// Default top-K range: 5 to 35 in steps of 5.
pub const DEFAULT_CHUNK_NUMBERS: [usize; 7] = [5, 10, 15, 20, 25, 30, 35];
/// Default window sizes: 0 and 1.
pub const DEFAULT_WINDOW_SIZES: [usize; 2] = [0, 1];

/// The hyperparameter grid a sweep visits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub chunk_numbers: Vec<usize>,
    pub window_sizes: Vec<usize>,
    pub providers: Vec<ProviderId>,
}

impl SweepGrid {
    pub fn new(
        chunk_numbers: Vec<usize>,
        window_sizes: Vec<usize>,
        providers: Vec<ProviderId>,
    ) -> Result<Self, OptimizerError> {
        if chunk_numbers.is_empty() || window_sizes.is_empty() || providers.is_empty() {
            return Err(OptimizerError::EmptyGrid);
        }
        if !strictly_ascending(&chunk_numbers) || !strictly_ascending(&window_sizes) {
            return Err(OptimizerError::NotAscending);
        }
        if chunk_numbers[0] == 0 {
            return Err(OptimizerError::EmptyGrid);
        }
        Ok(SweepGrid {
            chunk_numbers,
            window_sizes,
            providers,
        })
    }

    /// The default 7x2 grid over the given providers.
    pub fn with_default_ranges(providers: Vec<ProviderId>) -> Result<Self, OptimizerError> {
        SweepGrid::new(
            DEFAULT_CHUNK_NUMBERS.to_vec(),
            DEFAULT_WINDOW_SIZES.to_vec(),
            providers,
        )
    }

    pub fn len(&self) -> usize {
        self.chunk_numbers.len() * self.window_sizes.len() * self.providers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_k(&self) -> usize {
        *self.chunk_numbers.last().expect("non-empty")
    }
}

fn strictly_ascending(xs: &[usize]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

/// Row-major iteration order: provider outermost, then chunk number, then
/// window size.
pub fn iterate_grid(grid: &SweepGrid) -> Vec<RetrievalConfig> {
    let mut configs = Vec::with_capacity(grid.len());
    for provider in &grid.providers {
        for &k in &grid.chunk_numbers {
            for &window in &grid.window_sizes {
                configs.push(RetrievalConfig::new(k, window, provider.clone()));
            }
        }
    }
    configs
}

/// Which sweep policy produced a result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMethod {
    Threshold { theta: f64 },
    BestProbability,
}

/// One visited configuration and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub config: RetrievalConfig,
    pub result: ConfidenceResult,
    /// SHA-256 over the passages that made it into the prompt.
    pub passages_digest: String,
}

/// Outcome of sweeping one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub qid: String,
    pub method: SweepMethod,
    /// Visited configurations, in iteration order.
    pub records: Vec<SweepRecord>,
    /// The answer selected by the method's rule.
    #[serde(rename = "final")]
    pub final_result: ConfidenceResult,
    pub winning_config: RetrievalConfig,
    /// False iff the threshold method exited early.
    pub exhausted: bool,
}

/// An embedding provider together with the index built from it.
pub struct ProviderStack {
    pub provider: Box<dyn EmbeddingProvider>,
    pub index: VectorIndex,
}

impl ProviderStack {
    pub fn new(provider: Box<dyn EmbeddingProvider>, index: VectorIndex) -> Self {
        ProviderStack { provider, index }
    }
}

/// Shared read-only dependencies for sweeps; one set serves any number of
/// concurrent per-question sweeps.
pub struct SweepDeps<'a> {
    pub corpus: &'a Corpus,
    pub stacks: &'a [ProviderStack],
    pub backend: &'a dyn InferenceBackend,
    pub tokenizer: &'a dyn Tokenizer,
    /// Context-window token budget for assembled prompts.
    pub budget: usize,
    pub template_id: &'a str,
}

impl SweepDeps<'_> {
    fn stack_for(&self, provider: &ProviderId) -> Result<&ProviderStack, OptimizerError> {
        self.stacks
            .iter()
            .find(|s| s.index.provider() == provider)
            .ok_or_else(|| OptimizerError::UnknownProvider(provider.name.clone()))
    }
}

/// Per-sweep retrieval cache: one search at the grid's maximum k per
/// provider; every smaller k is a prefix of it.
struct RetrievalCache {
    max_k: usize,
    hits: HashMap<String, Vec<ScoredHit>>,
}

impl RetrievalCache {
    fn new(max_k: usize) -> Self {
        RetrievalCache {
            max_k,
            hits: HashMap::new(),
        }
    }

    fn hits_for(
        &mut self,
        question: &MCQuestion,
        cfg: &RetrievalConfig,
        deps: &SweepDeps<'_>,
    ) -> Result<Vec<ScoredHit>, OptimizerError> {
        if !self.hits.contains_key(&cfg.provider.name) {
            let stack = deps.stack_for(&cfg.provider)?;
            let wide = RetrievalConfig::new(self.max_k, cfg.window, cfg.provider.clone());
            let hits = retrieve(
                &question.stem,
                &wide,
                &stack.index,
                stack.provider.as_ref(),
            )
            .map_err(|e| pipeline_err(cfg, e.into()))?;
            self.hits.insert(cfg.provider.name.clone(), hits);
        }
        let all = &self.hits[&cfg.provider.name];
        Ok(all[..cfg.k.min(all.len())].to_vec())
    }
}

fn pipeline_err(cfg: &RetrievalConfig, source: PipelineError) -> OptimizerError {
    OptimizerError::Pipeline {
        config: cfg.describe(),
        source,
    }
}

/// Run the full per-config pipeline: retrieve, expand, merge, assemble,
/// query the backend, normalize.
fn run_config(
    question: &MCQuestion,
    cfg: &RetrievalConfig,
    deps: &SweepDeps<'_>,
    cache: &mut RetrievalCache,
) -> Result<SweepRecord, OptimizerError> {
    let hits = cache.hits_for(question, cfg, deps)?;
    let passages = expand_and_merge(&hits, cfg.window, deps.corpus)
        .map_err(|e| pipeline_err(cfg, e.into()))?;
    let prompt = assemble_prompt(
        question,
        &passages,
        deps.budget,
        deps.template_id,
        deps.tokenizer,
    )
    .map_err(|e| pipeline_err(cfg, e.into()))?;
    let labels = question.labels();
    let raw = deps
        .backend
        .first_token_probs(&InferenceRequest {
            prompt: &prompt,
            labels: &labels,
            qid: Some(&question.qid),
            config: Some(cfg),
        })
        .map_err(|e| pipeline_err(cfg, e.into()))?;
    let result = normalize_confidence(&raw).map_err(|e| pipeline_err(cfg, e.into()))?;
    Ok(SweepRecord {
        config: cfg.clone(),
        result,
        passages_digest: digest_passages(&prompt.included_passages),
    })
}

fn digest_passages(passages: &[crate::retrieval::Passage]) -> String {
    let mut hasher = Sha256::new();
    for p in passages {
        hasher.update(p.doc_id.as_bytes());
        hasher.update(p.sentence_range.0.to_le_bytes());
        hasher.update(p.sentence_range.1.to_le_bytes());
        hasher.update(p.text.as_bytes());
        hasher.update([0u8]);
    }
    let digest: [u8; 32] = hasher.finalize().into();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Index of the best record: maximum confidence, ties to the earliest
/// position.
fn best_index(records: &[SweepRecord]) -> usize {
    let mut best = 0;
    for (i, rec) in records.iter().enumerate().skip(1) {
        if rec.result.confidence > records[best].result.confidence {
            best = i;
        }
    }
    best
}

/// Visit configurations in grid order and answer at the first whose
/// confidence reaches `theta` (inclusive). If none qualifies, fall back to
/// the best-seen record with `exhausted = true` so callers can abstain.
pub fn threshold_sweep(
    question: &MCQuestion,
    grid: &SweepGrid,
    theta: f64,
    deps: &SweepDeps<'_>,
) -> Result<SweepResult, OptimizerError> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(OptimizerError::InvalidTheta(theta));
    }
    let mut cache = RetrievalCache::new(grid.max_k());
    let mut records: Vec<SweepRecord> = Vec::new();
    for cfg in iterate_grid(grid) {
        let record = run_config(question, &cfg, deps, &mut cache)?;
        let qualified = record.result.confidence >= theta;
        records.push(record);
        if qualified {
            let last = records.last().expect("just pushed");
            let (final_result, winning_config) = (last.result.clone(), last.config.clone());
            return Ok(SweepResult {
                qid: question.qid.clone(),
                method: SweepMethod::Threshold { theta },
                records,
                final_result,
                winning_config,
                exhausted: false,
            });
        }
    }
    let best = &records[best_index(&records)];
    let (final_result, winning_config) = (best.result.clone(), best.config.clone());
    Ok(SweepResult {
        qid: question.qid.clone(),
        method: SweepMethod::Threshold { theta },
        records,
        final_result,
        winning_config,
        exhausted: true,
    })
}

/// Visit every configuration and answer with the globally
/// highest-confidence record, ties to the earliest visited.
pub fn best_probability_sweep(
    question: &MCQuestion,
    grid: &SweepGrid,
    deps: &SweepDeps<'_>,
) -> Result<SweepResult, OptimizerError> {
    let mut cache = RetrievalCache::new(grid.max_k());
    let mut records: Vec<SweepRecord> = Vec::new();
    for cfg in iterate_grid(grid) {
        records.push(run_config(question, &cfg, deps, &mut cache)?);
    }
    let best = &records[best_index(&records)];
    let (final_result, winning_config) = (best.result.clone(), best.config.clone());
    Ok(SweepResult {
        qid: question.qid.clone(),
        method: SweepMethod::BestProbability,
        records,
        final_result,
        winning_config,
        exhausted: true,
    })
}

/// Run one question with the given method.
pub fn sweep(
    question: &MCQuestion,
    grid: &SweepGrid,
    method: &SweepMethod,
    deps: &SweepDeps<'_>,
) -> Result<SweepResult, OptimizerError> {
    match method {
        SweepMethod::Threshold { theta } => threshold_sweep(question, grid, *theta, deps),
        SweepMethod::BestProbability => best_probability_sweep(question, grid, deps),
    }
}

/// The record with the globally maximum confidence from an iterator of
/// records; ties go to the earliest item.
pub fn best_record<'a>(records: impl IntoIterator<Item = &'a SweepRecord>) -> Option<&'a SweepRecord> {
    let mut best: Option<&SweepRecord> = None;
    for rec in records {
        match best {
            Some(b) if rec.result.confidence <= b.result.confidence => {}
            _ => best = Some(rec),
        }
    }
    best
}

/// Select the highest-confidence answer across all records of all sweeps
/// (ties by input order, then iteration position). All inputs must belong to
/// the same question.
pub fn combine(results: &[SweepResult]) -> Result<ConfidenceResult, OptimizerError> {
    best_record(results.iter().flat_map(|r| r.records.iter()))
        .map(|rec| rec.result.clone())
        .ok_or(OptimizerError::EmptyCombine)
}

/// Persist sweep results as JSONL, one result per line.
pub fn write_sweep_results(path: &Path, results: &[SweepResult]) -> Result<(), OptimizerError> {
    let mut out = Vec::new();
    for result in results {
        serde_json::to_writer(&mut out, result).expect("sweep result serializes");
        out.push(b'\n');
    }
    write_atomic(path, &out).map_err(|e| OptimizerError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Load sweep results written by [`write_sweep_results`].
pub fn read_sweep_results(path: &Path) -> Result<Vec<SweepResult>, OptimizerError> {
    let file = fs::File::open(path).map_err(|e| OptimizerError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut results = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| OptimizerError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let result: SweepResult =
            serde_json::from_str(&line).map_err(|e| OptimizerError::Malformed {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        results.push(result);
    }
    Ok(results)
}
