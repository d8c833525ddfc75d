//! Retrieval-augmented multiple-choice question answering, driven by the
//! normalized first-token probability of the answer.
//!
//! The pipeline turns a knowledge base into sentence-coherent chunks
//! ([`corpus`]), embeds them into unit-norm vectors ([`embedding`]), and
//! serves exact top-k inner-product search over them ([`vindex`]). Per
//! question, [`retrieval`] expands each hit by a sentence window back in the
//! source document, [`inference`] assembles a single-token answer prompt and
//! normalizes the option probabilities into a confidence score, and
//! [`optimizer`] sweeps the (chunk number x window size) grid using that
//! confidence — either exiting early at a threshold or exhaustively keeping
//! the best-probability configuration. [`eval`] runs sweeps over whole
//! datasets and emits accuracy tables, coverage reports, and confidence
//! histograms.

pub mod corpus;
pub mod embedding;
pub mod eval;
pub mod inference;
pub mod optimizer;
pub mod retrieval;
mod semaphore;
pub mod vindex;

pub use corpus::{Chunk, Corpus, CorpusBuilder, Document, SentenceSpan};
pub use embedding::{EmbeddingProvider, EmbeddingVector, LocalHashProvider, ProviderId};
pub use eval::{EvalReport, Histogram, ReportFormat, ThresholdReport};
pub use inference::{ConfidenceResult, InferenceBackend, Label, MCQuestion, Prompt, RawOptionProbs};
pub use optimizer::{ProviderStack, SweepDeps, SweepGrid, SweepMethod, SweepRecord, SweepResult};
pub use retrieval::{Passage, RetrievalConfig};
pub use vindex::{ScoredHit, VectorIndex};

#[cfg(test)]
mod testsupport;
