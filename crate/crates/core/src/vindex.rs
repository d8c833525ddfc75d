//! Exact top-k inner-product index over chunk embeddings.
//!
//! A flat scan, not an approximate structure: every query scores every
//! entry, so results are exact and fully reproducible. Ties break by
//! ascending chunk id. The on-disk format is a little-endian header,
//! fixed-size records, and a trailing SHA-256 checksum.

use std::collections::HashSet;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::write_atomic;
use crate::embedding::{EmbeddingVector, ProviderId};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("vector dimension mismatch: index has {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("chunk id {0} already present in index")]
    DuplicateChunkId(u64),
    #[error("index file version {0} unsupported")]
    VersionMismatch(u32),
    #[error("index file checksum mismatch (corrupt or truncated)")]
    ChecksumMismatch,
    #[error("index file corrupt: {0}")]
    Corrupt(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One search result: a chunk id and its inner-product score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub chunk_id: u64,
    pub score: f32,
}

/// Flat inner-product index. Build is single-writer; a populated index is
/// immutable and safe to search from any number of threads.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    provider: ProviderId,
    ids: Vec<u64>,
    seen: HashSet<u64>,
    /// Row-major `len x dim` matrix.
    vectors: Vec<f32>,
}

impl VectorIndex {
    pub fn new(provider: ProviderId) -> Self {
        VectorIndex {
            provider,
            ids: Vec::new(),
            seen: HashSet::new(),
            vectors: Vec::new(),
        }
    }

    pub fn provider(&self) -> &ProviderId {
        &self.provider
    }

    pub fn dim(&self) -> usize {
        self.provider.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Append one entry. Chunk ids must be unique and dimensions must match
    /// the provider's.
    pub fn add(&mut self, chunk_id: u64, vec: &EmbeddingVector) -> Result<(), IndexError> {
        if vec.dim() != self.dim() {
            return Err(IndexError::DimMismatch {
                expected: self.dim(),
                got: vec.dim(),
            });
        }
        if !self.seen.insert(chunk_id) {
            return Err(IndexError::DuplicateChunkId(chunk_id));
        }
        self.ids.push(chunk_id);
        self.vectors.extend_from_slice(&vec.values);
        Ok(())
    }

    /// Exact top-k by inner product, ties broken by ascending chunk id.
    /// Returns `min(k, len)` hits; an empty index yields an empty list.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<ScoredHit>, IndexError> {
        if query.dim() != self.dim() {
            return Err(IndexError::DimMismatch {
                expected: self.dim(),
                got: query.dim(),
            });
        }
        let dim = self.dim();
        let mut scored: Vec<ScoredHit> = self
            .ids
            .iter()
            .enumerate()
            .map(|(row, &chunk_id)| {
                let base = row * dim;
                let mut acc = 0.0f32;
                for (a, b) in self.vectors[base..base + dim].iter().zip(&query.values) {
                    acc += a * b;
                }
                ScoredHit {
                    chunk_id,
                    score: acc,
                }
            })
            .collect();
        scored.sort_unstable_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.chunk_id.cmp(&b.chunk_id))
        });
        scored.truncate(k);
        Ok(scored)
    }

    /// Write the index: header, one record per entry, SHA-256 trailer.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut buf = Vec::with_capacity(32 + self.ids.len() * (8 + self.dim() * 4));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        let name = self.provider.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        for (row, &id) in self.ids.iter().enumerate() {
            buf.extend_from_slice(&id.to_le_bytes());
            let base = row * self.dim();
            for v in &self.vectors[base..base + self.dim()] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let checksum: [u8; 32] = Sha256::digest(&buf).into();
        buf.extend_from_slice(&checksum);
        write_atomic(path, &buf).map_err(|e| IndexError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Load an index written by [`VectorIndex::save`], verifying the
    /// checksum before parsing.
    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = fs::read(path).map_err(|e| IndexError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if bytes.len() < 32 {
            return Err(IndexError::ChecksumMismatch);
        }
        let (payload, trailer) = bytes.split_at(bytes.len() - 32);
        let checksum: [u8; 32] = Sha256::digest(payload).into();
        if checksum != trailer {
            return Err(IndexError::ChecksumMismatch);
        }

        let mut cursor = payload;
        let mut magic = [0u8; 4];
        read(&mut cursor, &mut magic)?;
        if &magic != MAGIC {
            return Err(IndexError::Corrupt("bad magic".into()));
        }
        let version = read_u32(&mut cursor)?;
        if version != VERSION {
            return Err(IndexError::VersionMismatch(version));
        }
        let dim = read_u32(&mut cursor)? as usize;
        let count = read_u64(&mut cursor)? as usize;
        let name_len = read_u16(&mut cursor)? as usize;
        let mut name = vec![0u8; name_len];
        read(&mut cursor, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| IndexError::Corrupt("provider name".into()))?;

        let mut index = VectorIndex::new(ProviderId::new(name, dim));
        index.ids.reserve(count);
        index.vectors.reserve(count * dim);
        for _ in 0..count {
            let id = read_u64(&mut cursor)?;
            if !index.seen.insert(id) {
                return Err(IndexError::Corrupt(format!("duplicate chunk id {id}")));
            }
            index.ids.push(id);
            for _ in 0..dim {
                let mut f = [0u8; 4];
                read(&mut cursor, &mut f)?;
                index.vectors.push(f32::from_le_bytes(f));
            }
        }
        if !cursor.is_empty() {
            return Err(IndexError::Corrupt("trailing bytes after records".into()));
        }
        Ok(index)
    }
}

const MAGIC: &[u8; 4] = b"FTVI";
const VERSION: u32 = 1;

fn read(cursor: &mut &[u8], buf: &mut [u8]) -> Result<(), IndexError> {
    cursor
        .read_exact(buf)
        .map_err(|_| IndexError::Corrupt("unexpected end of file".into()))
}

fn read_u16(cursor: &mut &[u8]) -> Result<u16, IndexError> {
    let mut b = [0u8; 2];
    read(cursor, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(cursor: &mut &[u8]) -> Result<u32, IndexError> {
    let mut b = [0u8; 4];
    read(cursor, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(cursor: &mut &[u8]) -> Result<u64, IndexError> {
    let mut b = [0u8; 8];
    read(cursor, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit(values: Vec<f32>) -> EmbeddingVector {
        let mut v = EmbeddingVector { values };
        v.normalize();
        v
    }

    fn random_unit(rng: &mut impl Rng, dim: usize) -> EmbeddingVector {
        loop {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let vec = unit(v);
            if !vec.is_zero() {
                return vec;
            }
        }
    }

    /// Independent double-loop oracle with the same dot-product and ordering
    /// definitions.
    fn brute_force(entries: &[(u64, EmbeddingVector)], query: &EmbeddingVector, k: usize) -> Vec<ScoredHit> {
        let mut scored: Vec<ScoredHit> = entries
            .iter()
            .map(|(id, v)| {
                let mut acc = 0.0f32;
                for (a, b) in v.values.iter().zip(&query.values) {
                    acc += a * b;
                }
                ScoredHit {
                    chunk_id: *id,
                    score: acc,
                }
            })
            .collect();
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.chunk_id.cmp(&b.chunk_id)));
        scored.truncate(k);
        scored
    }

    #[test]
    fn add_grows_index() {
        let mut index = VectorIndex::new(ProviderId::new("p", 4));
        assert!(index.is_empty());
        index.add(0, &unit(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(index.len(), 1);
    }

    #[test]
    fn add_rejects_duplicate_id() {
        let mut index = VectorIndex::new(ProviderId::new("p", 4));
        index.add(7, &unit(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        let err = index.add(7, &unit(vec![0.0, 1.0, 0.0, 0.0])).unwrap_err();
        assert!(matches!(err, IndexError::DuplicateChunkId(7)));
    }

    #[test]
    fn add_rejects_dim_mismatch() {
        let mut index = VectorIndex::new(ProviderId::new("p", 4));
        let err = index.add(0, &unit(vec![1.0, 0.0])).unwrap_err();
        assert!(matches!(err, IndexError::DimMismatch { expected: 4, got: 2 }));
    }

    #[test]
    fn self_query_ranks_first_with_unit_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut index = VectorIndex::new(ProviderId::new("p", 16));
        let mut stored = Vec::new();
        for id in 0..20u64 {
            let v = random_unit(&mut rng, 16);
            index.add(id, &v).unwrap();
            stored.push(v);
        }
        let hits = index.search(&stored[13], 1).unwrap();
        assert_eq!(hits[0].chunk_id, 13);
        assert!((hits[0].score - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn search_matches_brute_force_on_small_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let entries: Vec<(u64, EmbeddingVector)> =
            (0..5u64).map(|id| (id, random_unit(&mut rng, 8))).collect();
        let mut index = VectorIndex::new(ProviderId::new("p", 8));
        for (id, v) in &entries {
            index.add(*id, v).unwrap();
        }
        let query = random_unit(&mut rng, 8);
        assert_eq!(index.search(&query, 3).unwrap(), brute_force(&entries, &query, 3));
    }

    #[test]
    fn identical_vectors_tie_break_by_ascending_id() {
        let v = unit(vec![0.5, 0.5, 0.0, 0.0]);
        let mut index = VectorIndex::new(ProviderId::new("p", 4));
        index.add(9, &v).unwrap();
        index.add(2, &v).unwrap();
        let hits = index.search(&v, 2).unwrap();
        assert_eq!(hits[0].chunk_id, 2);
        assert_eq!(hits[1].chunk_id, 9);
        assert_eq!(hits[0].score, hits[1].score);
    }

    #[test]
    fn empty_index_returns_empty() {
        let index = VectorIndex::new(ProviderId::new("p", 4));
        assert!(index.search(&unit(vec![1.0, 0.0, 0.0, 0.0]), 5).unwrap().is_empty());
    }

    #[test]
    fn k_larger_than_size_returns_all() {
        let mut index = VectorIndex::new(ProviderId::new("p", 4));
        index.add(0, &unit(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        index.add(1, &unit(vec![0.0, 1.0, 0.0, 0.0])).unwrap();
        assert_eq!(index.search(&unit(vec![1.0, 0.0, 0.0, 0.0]), 10).unwrap().len(), 2);
    }

    #[test]
    fn save_load_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut index = VectorIndex::new(ProviderId::new("local-test", 12));
        for id in 0..50u64 {
            index.add(id * 3, &random_unit(&mut rng, 12)).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        index.save(&path).unwrap();
        let loaded = VectorIndex::load(&path).unwrap();
        assert_eq!(loaded, index);

        let query = random_unit(&mut rng, 12);
        assert_eq!(
            loaded.search(&query, 10).unwrap(),
            index.search(&query, 10).unwrap()
        );
    }

    #[test]
    fn empty_index_round_trips() {
        let index = VectorIndex::new(ProviderId::new("p", 4));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        index.save(&path).unwrap();
        let loaded = VectorIndex::load(&path).unwrap();
        assert_eq!(loaded, index);
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let mut index = VectorIndex::new(ProviderId::new("p", 4));
        index.add(0, &unit(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        index.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            VectorIndex::load(&path).unwrap_err(),
            IndexError::ChecksumMismatch
        ));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let index = VectorIndex::new(ProviderId::new("p", 4));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        index.save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 99; // version field, little-endian low byte
        let payload_len = bytes.len() - 32;
        let checksum: [u8; 32] = Sha256::digest(&bytes[..payload_len]).into();
        bytes[payload_len..].copy_from_slice(&checksum);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            VectorIndex::load(&path).unwrap_err(),
            IndexError::VersionMismatch(99)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn search_equals_oracle(seed in 0u64..500, n in 1usize..60, k in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let entries: Vec<(u64, EmbeddingVector)> =
                (0..n as u64).map(|id| (id, random_unit(&mut rng, 8))).collect();
            let mut index = VectorIndex::new(ProviderId::new("p", 8));
            for (id, v) in &entries {
                index.add(*id, v).unwrap();
            }
            let query = random_unit(&mut rng, 8);
            prop_assert_eq!(index.search(&query, k).unwrap(), brute_force(&entries, &query, k));
        }

        #[test]
        fn search_k_is_prefix_of_k_plus_one(seed in 0u64..500, n in 1usize..40, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut index = VectorIndex::new(ProviderId::new("p", 8));
            for id in 0..n as u64 {
                index.add(id, &random_unit(&mut rng, 8)).unwrap();
            }
            let query = random_unit(&mut rng, 8);
            let small = index.search(&query, k).unwrap();
            let large = index.search(&query, k + 1).unwrap();
            prop_assert_eq!(&large[..small.len()], &small[..]);
        }

        #[test]
        fn scores_bounded_for_unit_vectors(seed in 0u64..200, n in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut index = VectorIndex::new(ProviderId::new("p", 8));
            for id in 0..n as u64 {
                index.add(id, &random_unit(&mut rng, 8)).unwrap();
            }
            let query = random_unit(&mut rng, 8);
            for hit in index.search(&query, n).unwrap() {
                prop_assert!(hit.score >= -1.0 - 1e-6 && hit.score <= 1.0 + 1e-6);
            }
        }
    }
}
