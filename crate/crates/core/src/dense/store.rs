//! Offline passage embeddings and exact inner-product search.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! u8        version (= STORE_VERSION)
//! [u8; 4]   magic "CQAE"
//! u32       dim
//! u32       count
//! u64       fingerprint of W_p + featurizer config
//! count x { u32 byte length, UTF-8 passage id }
//! count x dim f32 components, passage-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array1;
use rayon::prelude::*;

use super::EncoderParams;
use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const STORE_VERSION: u8 = 1;
const MAGIC: &[u8; 4] = b"CQAE";
/// Stores at least this large are scanned in parallel shards.
const PARALLEL_THRESHOLD: usize = 8192;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    fingerprint: u64,
}

impl EmbeddingStore {
    /// Encodes every passage with the frozen passage projection.
    pub fn build(corpus: &Corpus, encoder: &EncoderParams) -> Result<Self> {
        if !encoder.is_frozen() {
            return Err(Error::EncoderNotFrozen);
        }
        let dim = encoder.dim();
        let vectors: Vec<Vec<f32>> = corpus
            .passages()
            .par_iter()
            .map(|p| encoder.encode_passage(p).iter().map(|&v| v as f32).collect())
            .collect();
        Ok(Self {
            ids: corpus.passages().iter().map(|p| p.id.clone()).collect(),
            dim,
            data: vectors.concat(),
            fingerprint: encoder.fingerprint(),
        })
    }

    /// Store over explicit vectors, mainly for tests and benchmarks.
    pub fn from_vectors(ids: Vec<String>, vectors: &[Vec<f32>], fingerprint: u64) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        if ids.len() != vectors.len() {
            return Err(Error::InvalidArgument("one id per vector required".into()));
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("embedding components must be finite".into()));
        }
        Ok(Self {
            ids,
            dim,
            data: vectors.concat(),
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn vector(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn vector_f64(&self, index: usize) -> Array1<f64> {
        self.vector(index).iter().map(|&v| v as f64).collect()
    }

    /// Fails when `encoder`'s passage projection is not the one the store
    /// was built with.
    pub fn verify(&self, encoder: &EncoderParams) -> Result<()> {
        let model = encoder.fingerprint();
        if model != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                store: self.fingerprint,
                model,
            });
        }
        if encoder.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: encoder.dim(),
            });
        }
        Ok(())
    }

    pub fn inner_product(&self, query: &Array1<f64>, index: usize) -> f64 {
        self.vector(index)
            .iter()
            .zip(query.iter())
            .map(|(&p, &q)| p as f64 * q)
            .sum()
    }

    /// Exact top-`k` by inner product: scores non-increasing, ties by
    /// ascending passage index.
    pub fn mips_topk(&self, query: &Array1<f64>, k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let scan = |range: std::ops::Range<usize>| -> Vec<(usize, f64)> {
            let mut scored: Vec<(usize, f64)> = range.map(|i| (i, self.inner_product(query, i))).collect();
            select_top(&mut scored, k);
            scored
        };
        let mut hits = if self.len() >= PARALLEL_THRESHOLD {
            let shard = self.len().div_ceil(rayon::current_num_threads().max(1));
            (0..self.len())
                .step_by(shard)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|start| scan(start..(start + shard).min(self.len())))
                .flatten()
                .collect()
        } else {
            scan(0..self.len())
        };
        select_top(&mut hits, k);
        Ok(hits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(21 + self.data.len() * 4);
        buf.push(STORE_VERSION);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        buf.extend_from_slice(&self.fingerprint.to_le_bytes());
        for id in &self.ids {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        let version = r.take(1)?[0];
        if version != STORE_VERSION {
            return Err(Error::Format(format!("embedding store version {version} (expected {STORE_VERSION})")));
        }
        if r.take(4)? != MAGIC {
            return Err(Error::Format("embedding store magic mismatch".into()));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let fingerprint = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let raw = r.take(len)?;
            ids.push(String::from_utf8(raw.to_vec()).map_err(|e| Error::Format(e.to_string()))?);
        }
        let raw = r.take(count * dim * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in embedding store".into()));
        }
        Ok(Self {
            ids,
            dim,
            data,
            fingerprint,
        })
    }
}

/// Keeps the `k` best `(index, score)` pairs, sorted.
fn select_top(scored: &mut Vec<(usize, f64)>, k: usize) {
    let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated embedding store".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_fixture, PlantSpec};
    use crate::dense::Featurizer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_store() -> EmbeddingStore {
        EmbeddingStore::from_vectors(vec!["A".into(), "B".into()], &[vec![1.0, 0.0], vec![0.0, 1.0]], 0).unwrap()
    }

    #[test]
    fn picks_the_aligned_vector() {
        let hits = two_store().mips_topk(&Array1::from(vec![1.0, 0.0]), 1).unwrap();
        assert_eq!(hits, vec![(0, 1.0)]);
    }

    #[test]
    fn zero_query_ties_break_by_id() {
        let ids: Vec<String> = (0..6).map(|i| format!("p{i}")).collect();
        let vecs: Vec<Vec<f32>> = (0..6).map(|i| vec![i as f32, 1.0]).collect();
        let store = EmbeddingStore::from_vectors(ids, &vecs, 0).unwrap();
        let hits = store.mips_topk(&Array1::zeros(2), 3).unwrap();
        assert_eq!(hits, vec![(0, 0.0), (1, 0.0), (2, 0.0)]);
    }

    #[test]
    fn dimension_mismatch_and_zero_k_are_errors() {
        let s = two_store();
        assert!(matches!(s.mips_topk(&Array1::zeros(3), 1), Err(Error::DimensionMismatch { .. })));
        assert!(s.mips_topk(&Array1::zeros(2), 0).is_err());
    }

    #[test]
    fn matches_full_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let ids: Vec<String> = (0..n).map(|i| format!("p{i:05}")).collect();
        let vecs: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..32).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let store = EmbeddingStore::from_vectors(ids, &vecs, 0).unwrap();
        for _ in 0..5 {
            let q: Array1<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut oracle: Vec<(usize, f64)> = (0..n)
                .map(|i| (i, vecs[i].iter().zip(q.iter()).map(|(&a, &b)| a as f64 * b).sum()))
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            oracle.truncate(50);
            assert_eq!(store.mips_topk(&q, 50).unwrap(), oracle);
        }
    }

    fn fixture_store() -> (Corpus, EncoderParams, EmbeddingStore) {
        let f = generate_fixture(7, 200, &PlantSpec::default()).unwrap();
        let (corpus, _) = Corpus::from_passages(f.passages).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut enc = EncoderParams::new(Featurizer::new(4096, 1), 128, &mut rng);
        assert!(matches!(EmbeddingStore::build(&corpus, &enc), Err(Error::EncoderNotFrozen)));
        enc.freeze();
        let store = EmbeddingStore::build(&corpus, &enc).unwrap();
        (corpus, enc, store)
    }

    #[test]
    fn builds_one_vector_per_passage_deterministically() {
        let (corpus, enc, store) = fixture_store();
        assert_eq!(store.len(), 200);
        assert_eq!(store.dim(), 128);
        assert_eq!(EmbeddingStore::build(&corpus, &enc).unwrap(), store);
        store.verify(&enc).unwrap();
    }

    #[test]
    fn changed_passage_projection_is_detected() {
        let (corpus, _, store) = fixture_store();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut other = EncoderParams::new(Featurizer::new(4096, 1), 128, &mut rng);
        other.freeze();
        assert!(matches!(store.verify(&other), Err(Error::FingerprintMismatch { .. })));
        let _ = corpus;
    }

    #[test]
    fn binary_round_trip() {
        let (_, _, store) = fixture_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        store.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes[0], STORE_VERSION);
        assert_eq!(EmbeddingStore::load(&path).unwrap(), store);
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(EmbeddingStore::load(&path).is_err());
    }
}
