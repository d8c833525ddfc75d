//! Question-to-context retrieval: search the index, widen each hit by a
//! sentence window in its source document, and merge overlapping passages.
//!
//! The window unit is whole source sentences per side. Window 0 returns
//! exactly the sentences the chunk covered; hard-split chunks recover their
//! full parent sentence, restoring the integrity the split destroyed.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError};
use crate::embedding::{EmbeddingError, EmbeddingProvider, ProviderId};
use crate::vindex::{IndexError, ScoredHit, VectorIndex};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("index was built with provider `{index}`, config wants `{config}`")]
    ProviderMismatch { index: String, config: String },
}

/// One point of the retrieval hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Top-K chunk number.
    pub k: usize,
    /// Chunk window size: source sentences merged on each side of a hit.
    pub window: usize,
    pub provider: ProviderId,
}

impl RetrievalConfig {
    pub fn new(k: usize, window: usize, provider: ProviderId) -> Self {
        assert!(k >= 1, "top-k must be >= 1");
        RetrievalConfig {
            k,
            window,
            provider,
        }
    }

    /// Short human-readable form used in logs and error messages.
    pub fn describe(&self) -> String {
        format!("(k={}, window={}, provider={})", self.k, self.window, self.provider.name)
    }
}

/// A context passage: a window-expanded, possibly merged stretch of source
/// text that contains at least one retrieved chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub doc_id: String,
    /// Inclusive `[first, last]` sentence indices covered.
    pub sentence_range: (usize, usize),
    pub text: String,
    /// Score of the best seeding hit.
    pub score: f32,
    /// Chunk id of the highest-scoring seeding hit.
    pub seed_chunk_id: u64,
}

/// Embed the question and return the raw top-k hits.
pub fn retrieve(
    question_text: &str,
    cfg: &RetrievalConfig,
    index: &VectorIndex,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<ScoredHit>, RetrievalError> {
    if index.provider() != &cfg.provider {
        return Err(RetrievalError::ProviderMismatch {
            index: index.provider().name.clone(),
            config: cfg.provider.name.clone(),
        });
    }
    let query = provider.embed_one(question_text)?;
    Ok(index.search(&query, cfg.k)?)
}

/// Expand a hit to the sentences `[first - window, last + window]` of its
/// seed chunk, clamped to the document bounds.
pub fn expand_window(
    hit: ScoredHit,
    window: usize,
    corpus: &Corpus,
) -> Result<Passage, RetrievalError> {
    let chunk = corpus.chunk(hit.chunk_id)?;
    let doc = corpus.document(&chunk.doc_id)?;
    let (first, last) = chunk.sentence_range;
    let lo = first.saturating_sub(window);
    let hi = (last + window).min(doc.sentences.len() - 1);
    Ok(Passage {
        doc_id: chunk.doc_id.clone(),
        sentence_range: (lo, hi),
        text: doc.sentence_range_text(lo, hi).to_string(),
        score: hit.score,
        seed_chunk_id: hit.chunk_id,
    })
}

/// Merge same-document passages whose sentence ranges overlap or touch.
///
/// A merged passage takes the maximum score of its members and the seed
/// chunk of the highest-scoring member (ties to the lower chunk id); its
/// text is re-read from the source document over the union range. Output is
/// sorted by descending score, ties by ascending seed chunk id.
pub fn merge_passages(
    passages: Vec<Passage>,
    corpus: &Corpus,
) -> Result<Vec<Passage>, RetrievalError> {
    let mut by_doc: HashMap<String, Vec<Passage>> = HashMap::new();
    for p in passages {
        by_doc.entry(p.doc_id.clone()).or_default().push(p);
    }

    let mut merged: Vec<Passage> = Vec::new();
    for (doc_id, mut group) in by_doc {
        let doc = corpus.document(&doc_id)?;
        group.sort_by(|a, b| a.sentence_range.cmp(&b.sentence_range));
        let mut open: Option<Passage> = None;
        for p in group {
            match &mut open {
                None => open = Some(p),
                Some(current) => {
                    let (lo, hi) = current.sentence_range;
                    let (plo, phi) = p.sentence_range;
                    if plo <= hi + 1 {
                        current.sentence_range = (lo, hi.max(phi));
                        let better = p.score.total_cmp(&current.score).is_gt()
                            || (p.score == current.score
                                && p.seed_chunk_id < current.seed_chunk_id);
                        if better {
                            current.score = p.score;
                            current.seed_chunk_id = p.seed_chunk_id;
                        }
                    } else {
                        merged.push(finish(current.clone(), doc)?);
                        open = Some(p);
                    }
                }
            }
        }
        if let Some(current) = open {
            merged.push(finish(current, doc)?);
        }
    }

    merged.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.seed_chunk_id.cmp(&b.seed_chunk_id))
    });
    Ok(merged)
}

fn finish(mut passage: Passage, doc: &crate::corpus::Document) -> Result<Passage, RetrievalError> {
    let (lo, hi) = passage.sentence_range;
    passage.text = doc.sentence_range_text(lo, hi).to_string();
    Ok(passage)
}

/// Full per-question retrieval: search, expand every hit, merge.
pub fn retrieve_passages(
    question_text: &str,
    cfg: &RetrievalConfig,
    index: &VectorIndex,
    provider: &dyn EmbeddingProvider,
    corpus: &Corpus,
) -> Result<Vec<Passage>, RetrievalError> {
    let hits = retrieve(question_text, cfg, index, provider)?;
    expand_and_merge(&hits, cfg.window, corpus)
}

/// Expand pre-computed hits by `window` sentences and merge overlaps.
pub fn expand_and_merge(
    hits: &[ScoredHit],
    window: usize,
    corpus: &Corpus,
) -> Result<Vec<Passage>, RetrievalError> {
    let passages = hits
        .iter()
        .map(|&hit| expand_window(hit, window, corpus))
        .collect::<Result<Vec<_>, _>>()?;
    merge_passages(passages, corpus)
}
