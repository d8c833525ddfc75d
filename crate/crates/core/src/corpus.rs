//! Document ingestion and sentence-coherent chunking.
//!
//! Raw documents are split into sentences by a small deterministic rule set
//! (terminator followed by whitespace, digit-adjacent periods exempt, blank
//! lines), then packed greedily into token-bounded chunks. Chunks keep their
//! provenance (document id, sentence range) so retrieval can later revert to
//! the source text and widen the context window around a hit.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors produced while building, sealing, or loading a corpus.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("document id must be non-empty")]
    EmptyDocId,
    #[error("duplicate document id `{0}`")]
    DuplicateDocId(String),
    #[error("max_chunk_tokens must be >= 1")]
    InvalidChunkBudget,
    #[error("unknown document id `{0}`")]
    UnknownDoc(String),
    #[error("unknown chunk id {0}")]
    UnknownChunk(u64),
    #[error("corpus data mismatch: {0}")]
    Corrupt(String),
    #[error("malformed record in {path} line {line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

/// Token budget estimator. The pipeline only needs a consistent estimate, so
/// the default is a words-based heuristic; an exact model tokenizer can be
/// plugged in behind this trait.
pub trait Tokenizer: Send + Sync {
    /// Stable identifier recorded in the corpus manifest.
    fn id(&self) -> &str;
    fn count_tokens(&self, text: &str) -> usize;
}

/// Default estimator: `ceil(word_count * 4 / 3)`, where words are maximal
/// runs of non-whitespace characters.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicTokenizer;

impl Tokenizer for HeuristicTokenizer {
    fn id(&self) -> &str {
        "heuristic-words-4-3"
    }

    fn count_tokens(&self, text: &str) -> usize {
        count_tokens(text)
    }
}

/// `ceil(word_count * 4 / 3)` over whitespace-separated words.
pub fn count_tokens(text: &str) -> usize {
    let words = text.split_whitespace().count();
    (words * 4).div_ceil(3)
}

// ---------------------------------------------------------------------------
// Sentences and documents
// ---------------------------------------------------------------------------

/// Byte range of one sentence within its document text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    /// Offset of the first byte (inclusive). Always on a char boundary.
    pub start: usize,
    /// Offset one past the last byte (exclusive).
    pub end: usize,
    /// Ordinal within the document, consecutive from 0.
    pub index: usize,
}

/// A source document with its computed sentence spans.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    pub sentences: Vec<SentenceSpan>,
}

impl Document {
    /// Build a document, computing sentence spans with [`split_sentences`].
    /// Empty text yields zero sentences.
    pub fn ingest(doc_id: impl Into<String>, text: impl Into<String>) -> Result<Self, CorpusError> {
        let doc_id = doc_id.into();
        if doc_id.is_empty() {
            return Err(CorpusError::EmptyDocId);
        }
        let text = text.into();
        let sentences = split_sentences(&text);
        Ok(Document {
            doc_id,
            text,
            sentences,
        })
    }

    /// Text slice covered by the sentence range `[first, last]`, inclusive.
    pub fn sentence_range_text(&self, first: usize, last: usize) -> &str {
        let start = self.sentences[first].start;
        let end = self.sentences[last].end;
        &self.text[start..end]
    }
}

/// Split text into sentence spans.
///
/// A boundary is placed after `.`, `?`, `!`, or `;` when the next character
/// is whitespace, and at blank-line paragraph breaks. A period immediately
/// preceded by an ASCII digit never ends a sentence, so version strings and
/// clause numbers like `38.331` survive intact. Spans start and end on
/// non-whitespace characters and jointly cover every non-whitespace byte.
pub fn split_sentences(text: &str) -> Vec<SentenceSpan> {
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut sent_start: Option<usize> = None;
    let mut last_end = 0usize;
    let mut prev_char: Option<char> = None;

    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if c.is_whitespace() {
            // Consume the whole whitespace run; two newlines make it a
            // paragraph break that closes any open sentence.
            let mut newlines = usize::from(c == '\n');
            while let Some(&(_, c2)) = iter.peek() {
                if !c2.is_whitespace() {
                    break;
                }
                newlines += usize::from(c2 == '\n');
                iter.next();
            }
            if newlines >= 2 {
                if let Some(s) = sent_start.take() {
                    spans.push((s, last_end));
                }
            }
            prev_char = Some(c);
            continue;
        }

        if sent_start.is_none() {
            sent_start = Some(i);
        }
        last_end = i + c.len_utf8();

        let terminator = match c {
            '?' | '!' | ';' => true,
            '.' => !prev_char.is_some_and(|p| p.is_ascii_digit()),
            _ => false,
        };
        if terminator {
            if let Some(&(_, next)) = iter.peek() {
                if next.is_whitespace() {
                    if let Some(s) = sent_start.take() {
                        spans.push((s, last_end));
                    }
                }
            }
        }
        prev_char = Some(c);
    }
    if let Some(s) = sent_start {
        spans.push((s, last_end));
    }

    spans
        .into_iter()
        .enumerate()
        .map(|(index, (start, end))| SentenceSpan { start, end, index })
        .collect()
}

// ---------------------------------------------------------------------------
// Chunks
// ---------------------------------------------------------------------------

/// A sentence-coherent, token-bounded slice of a document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    /// Dense id, `0..N-1` in corpus order.
    pub chunk_id: u64,
    pub doc_id: String,
    /// Inclusive `[first, last]` sentence indices covered by this chunk.
    pub sentence_range: (usize, usize),
    /// Byte sub-range of the document when a single oversize sentence was
    /// hard-split at a word boundary; `None` for sentence-aligned chunks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_span: Option<(usize, usize)>,
    pub text: String,
    pub token_count: usize,
}

/// Greedily pack a document's sentences into chunks of at most
/// `max_chunk_tokens` tokens.
///
/// Consecutive sentences accumulate while the accumulated text stays within
/// budget. A single sentence that alone exceeds the budget is hard-split at
/// the largest word boundary whose prefix fits, recording `sub_span`; a lone
/// word larger than the budget becomes its own over-budget chunk so packing
/// always makes progress. Chunk ids are assigned densely from 0 within this
/// call; [`CorpusBuilder::seal`] renumbers them corpus-wide.
pub fn build_chunks(
    doc: &Document,
    max_chunk_tokens: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<Chunk>, CorpusError> {
    if max_chunk_tokens == 0 {
        return Err(CorpusError::InvalidChunkBudget);
    }
    let mut chunks: Vec<Chunk> = Vec::new();
    // Open accumulation: inclusive sentence range.
    let mut acc: Option<(usize, usize)> = None;

    let flush = |acc: &mut Option<(usize, usize)>, chunks: &mut Vec<Chunk>| {
        if let Some((first, last)) = acc.take() {
            let text = doc.sentence_range_text(first, last);
            chunks.push(Chunk {
                chunk_id: chunks.len() as u64,
                doc_id: doc.doc_id.clone(),
                sentence_range: (first, last),
                sub_span: None,
                text: text.to_string(),
                token_count: tokenizer.count_tokens(text),
            });
        }
    };

    for (si, span) in doc.sentences.iter().enumerate() {
        let sentence = &doc.text[span.start..span.end];
        if tokenizer.count_tokens(sentence) > max_chunk_tokens {
            flush(&mut acc, &mut chunks);
            hard_split(doc, si, max_chunk_tokens, tokenizer, &mut chunks);
            continue;
        }
        acc = match acc {
            None => Some((si, si)),
            Some((first, _)) => {
                let candidate = doc.sentence_range_text(first, si);
                if tokenizer.count_tokens(candidate) <= max_chunk_tokens {
                    Some((first, si))
                } else {
                    flush(&mut acc, &mut chunks);
                    Some((si, si))
                }
            }
        };
    }
    flush(&mut acc, &mut chunks);
    Ok(chunks)
}

/// Split one oversize sentence at word boundaries into budget-sized pieces.
fn hard_split(
    doc: &Document,
    sentence_index: usize,
    max_chunk_tokens: usize,
    tokenizer: &dyn Tokenizer,
    chunks: &mut Vec<Chunk>,
) {
    let span = doc.sentences[sentence_index];
    // Word boundaries as absolute byte ranges within the document.
    let words: Vec<(usize, usize)> = word_spans(&doc.text[span.start..span.end])
        .into_iter()
        .map(|(s, e)| (span.start + s, span.start + e))
        .collect();

    let mut piece_first = 0usize;
    while piece_first < words.len() {
        let piece_start = words[piece_first].0;
        let mut piece_last = piece_first;
        // Extend while the next word still fits.
        while piece_last + 1 < words.len() {
            let candidate = &doc.text[piece_start..words[piece_last + 1].1];
            if tokenizer.count_tokens(candidate) <= max_chunk_tokens {
                piece_last += 1;
            } else {
                break;
            }
        }
        let piece_end = words[piece_last].1;
        let text = &doc.text[piece_start..piece_end];
        chunks.push(Chunk {
            chunk_id: chunks.len() as u64,
            doc_id: doc.doc_id.clone(),
            sentence_range: (sentence_index, sentence_index),
            sub_span: Some((piece_start, piece_end)),
            text: text.to_string(),
            token_count: tokenizer.count_tokens(text),
        });
        piece_first = piece_last + 1;
    }
}

/// Byte ranges of maximal non-whitespace runs.
fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut end = 0usize;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push((s, end));
            }
        } else {
            if start.is_none() {
                start = Some(i);
            }
            end = i + c.len_utf8();
        }
    }
    if let Some(s) = start {
        spans.push((s, end));
    }
    spans
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

/// Immutable, sealed collection of documents and their chunks.
///
/// Chunk ids are dense `0..N-1` across the whole corpus, in document
/// insertion order. A sealed corpus is freely shareable across threads.
#[derive(Debug, Clone)]
pub struct Corpus {
    docs: Vec<Document>,
    doc_lookup: HashMap<String, usize>,
    chunks: Vec<Chunk>,
    max_chunk_tokens: usize,
    tokenizer_id: String,
}

impl Corpus {
    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn chunk(&self, chunk_id: u64) -> Result<&Chunk, CorpusError> {
        self.chunks
            .get(chunk_id as usize)
            .ok_or(CorpusError::UnknownChunk(chunk_id))
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn document(&self, doc_id: &str) -> Result<&Document, CorpusError> {
        self.doc_lookup
            .get(doc_id)
            .map(|&i| &self.docs[i])
            .ok_or_else(|| CorpusError::UnknownDoc(doc_id.to_string()))
    }

    pub fn max_chunk_tokens(&self) -> usize {
        self.max_chunk_tokens
    }

    pub fn tokenizer_id(&self) -> &str {
        &self.tokenizer_id
    }

    /// Persist as a directory: `manifest.json`, `documents.jsonl` (source
    /// texts, needed for window expansion), `chunks.jsonl` (chunk records).
    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            max_chunk_tokens: self.max_chunk_tokens,
            tokenizer: self.tokenizer_id.clone(),
            document_count: self.docs.len(),
            chunk_count: self.chunks.len(),
        };
        let mpath = dir.join("manifest.json");
        fs::write(
            &mpath,
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )
        .map_err(|e| io_err(&mpath, e))?;

        let dpath = dir.join("documents.jsonl");
        let mut out = Vec::new();
        for doc in &self.docs {
            let rec = DocRecord {
                doc_id: doc.doc_id.clone(),
                text: doc.text.clone(),
            };
            serde_json::to_writer(&mut out, &rec).expect("doc record serializes");
            out.push(b'\n');
        }
        fs::write(&dpath, out).map_err(|e| io_err(&dpath, e))?;

        let cpath = dir.join("chunks.jsonl");
        let mut out = Vec::new();
        for chunk in &self.chunks {
            serde_json::to_writer(&mut out, chunk).expect("chunk serializes");
            out.push(b'\n');
        }
        fs::write(&cpath, out).map_err(|e| io_err(&cpath, e))?;
        Ok(())
    }

    /// Load a corpus persisted by [`Corpus::save`].
    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let mpath = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_str(
            &fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?,
        )
        .map_err(|e| CorpusError::Corrupt(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(CorpusError::Corrupt(format!(
                "unsupported corpus format version {}",
                manifest.format_version
            )));
        }

        let dpath = dir.join("documents.jsonl");
        let mut docs = Vec::new();
        let mut doc_lookup = HashMap::new();
        for (lineno, line) in read_lines(&dpath)?.into_iter().enumerate() {
            let rec: DocRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                path: dpath.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            if doc_lookup.insert(rec.doc_id.clone(), docs.len()).is_some() {
                return Err(CorpusError::DuplicateDocId(rec.doc_id));
            }
            docs.push(Document::ingest(rec.doc_id, rec.text)?);
        }
        if docs.len() != manifest.document_count {
            return Err(CorpusError::Corrupt(format!(
                "manifest says {} documents, file has {}",
                manifest.document_count,
                docs.len()
            )));
        }

        let cpath = dir.join("chunks.jsonl");
        let mut chunks = Vec::new();
        for (lineno, line) in read_lines(&cpath)?.into_iter().enumerate() {
            let chunk: Chunk = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                path: cpath.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            if chunk.chunk_id != chunks.len() as u64 {
                return Err(CorpusError::Corrupt(format!(
                    "chunk ids not dense at {}",
                    chunk.chunk_id
                )));
            }
            if !doc_lookup.contains_key(&chunk.doc_id) {
                return Err(CorpusError::UnknownDoc(chunk.doc_id));
            }
            chunks.push(chunk);
        }
        if chunks.len() != manifest.chunk_count {
            return Err(CorpusError::Corrupt(format!(
                "manifest says {} chunks, file has {}",
                manifest.chunk_count,
                chunks.len()
            )));
        }

        Ok(Corpus {
            docs,
            doc_lookup,
            chunks,
            max_chunk_tokens: manifest.max_chunk_tokens,
            tokenizer_id: manifest.tokenizer,
        })
    }
}

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    max_chunk_tokens: usize,
    tokenizer: String,
    document_count: usize,
    chunk_count: usize,
}

#[derive(Serialize, Deserialize)]
struct DocRecord {
    doc_id: String,
    text: String,
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    Ok(lines)
}

/// Single-writer corpus under construction.
pub struct CorpusBuilder {
    docs: Vec<Document>,
    seen: HashMap<String, usize>,
    max_chunk_tokens: usize,
    tokenizer: Arc<dyn Tokenizer>,
}

impl CorpusBuilder {
    pub fn new(max_chunk_tokens: usize, tokenizer: Arc<dyn Tokenizer>) -> Result<Self, CorpusError> {
        if max_chunk_tokens == 0 {
            return Err(CorpusError::InvalidChunkBudget);
        }
        Ok(CorpusBuilder {
            docs: Vec::new(),
            seen: HashMap::new(),
            max_chunk_tokens,
            tokenizer,
        })
    }

    pub fn add_document(
        &mut self,
        doc_id: impl Into<String>,
        text: impl Into<String>,
    ) -> Result<(), CorpusError> {
        let doc = Document::ingest(doc_id, text)?;
        if self.seen.contains_key(&doc.doc_id) {
            return Err(CorpusError::DuplicateDocId(doc.doc_id));
        }
        self.seen.insert(doc.doc_id.clone(), self.docs.len());
        self.docs.push(doc);
        Ok(())
    }

    /// Add every `*.txt` file in a directory; the file stem becomes the
    /// document id. Files are taken in sorted name order for determinism.
    pub fn add_text_dir(&mut self, dir: &Path) -> Result<usize, CorpusError> {
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| io_err(dir, e))?
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| io_err(dir, e))?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|ext| ext == "txt"))
            .collect();
        paths.sort();
        let mut added = 0;
        for path in paths {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| CorpusError::Corrupt(format!("bad file name {}", path.display())))?
                .to_string();
            let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            self.add_document(stem, text)?;
            added += 1;
        }
        Ok(added)
    }

    /// Add documents from a JSONL file of `{"doc_id": ..., "text": ...}`.
    pub fn add_jsonl(&mut self, path: &Path) -> Result<usize, CorpusError> {
        let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut added = 0;
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DocRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            self.add_document(rec.doc_id, rec.text)?;
            added += 1;
        }
        Ok(added)
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Chunk every document and freeze the corpus. Chunk ids are assigned
    /// densely across documents in insertion order.
    pub fn seal(self) -> Result<Corpus, CorpusError> {
        let mut chunks = Vec::new();
        for doc in &self.docs {
            let mut doc_chunks = build_chunks(doc, self.max_chunk_tokens, self.tokenizer.as_ref())?;
            // Renumber relative ids onto the corpus-wide sequence.
            let base = chunks.len() as u64;
            for (i, chunk) in doc_chunks.iter_mut().enumerate() {
                chunk.chunk_id = base + i as u64;
            }
            chunks.extend(doc_chunks);
        }
        Ok(Corpus {
            docs: self.docs,
            doc_lookup: self.seen,
            chunks,
            max_chunk_tokens: self.max_chunk_tokens,
            tokenizer_id: self.tokenizer.id().to_string(),
        })
    }
}

/// Collapse whitespace runs to single spaces and trim the ends.
pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Write JSONL lines atomically (temp file in the same directory, then
/// rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
