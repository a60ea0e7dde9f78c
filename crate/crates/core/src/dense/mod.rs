//! Dense retrieval: hashed featurizer standing in for the encoder bodies,
//! trainable question/passage projections, the offline embedding store and
//! exact maximum inner product search.

mod featurizer;
mod store;

pub use featurizer::{fnv, hash_features, hashed_slot, Featurizer};
pub use store::{EmbeddingStore, STORE_VERSION};

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Passage, SEP};
use crate::error::{Error, Result};
use crate::math::SparseVec;

/// Linear map `out_dim x in_dim`, stored one row per *input* feature so that
/// products with sparse inputs touch contiguous memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// Shape `(in_dim, out_dim)`: `table[[i, o]]` is entry `(o, i)` of the map.
    table: Array2<f64>,
}

impl Projection {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            table: Array2::zeros((in_dim, out_dim)),
        }
    }

    /// Entries uniform in `[-1/sqrt(in_dim), 1/sqrt(in_dim)]`.
    pub fn uniform<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            table: Array2::from_shape_fn((in_dim, out_dim), |_| rng.gen_range(-bound..=bound)),
        }
    }

    /// `out_dim x in_dim` matrix given row-major in that orientation.
    pub fn from_matrix(m: &Array2<f64>) -> Self {
        Self {
            table: m.t().to_owned(),
        }
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        self.table.t().to_owned()
    }

    pub fn out_dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn in_dim(&self) -> usize {
        self.table.nrows()
    }

    pub fn get(&self, out: usize, input: usize) -> f64 {
        self.table[[input, out]]
    }

    pub fn set(&mut self, out: usize, input: usize, value: f64) {
        self.table[[input, out]] = value;
    }

    pub fn apply(&self, x: &SparseVec) -> Array1<f64> {
        let mut out = Array1::zeros(self.out_dim());
        for (i, v) in x.iter() {
            out.scaled_add(v, &self.table.row(i));
        }
        out
    }

    pub fn apply_dense(&self, x: &Array1<f64>) -> Array1<f64> {
        self.table.t().dot(x)
    }

    /// Flat parameter storage, for optimisers and gradient checks.
    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        self.table.as_slice_mut().expect("standard layout")
    }

    pub fn as_slice(&self) -> &[f64] {
        self.table.as_slice().expect("standard layout")
    }

    /// `self -= lr * grad`.
    pub fn descend(&mut self, grad: &RowGrad, lr: f64) {
        for (&i, g) in &grad.rows {
            self.table.row_mut(i as usize).scaled_add(-lr, g);
        }
    }
}

/// Gradient of a [`Projection`] as a sum of outer products, kept as sparse
/// rows keyed by input feature.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowGrad {
    pub rows: BTreeMap<u32, Array1<f64>>,
}

impl RowGrad {
    /// Adds `out_grad ⊗ input`.
    pub fn add_outer(&mut self, out_grad: &Array1<f64>, input: &SparseVec) {
        for (&i, &v) in input.indices.iter().zip(&input.values) {
            self.rows
                .entry(i)
                .and_modify(|r| r.scaled_add(v, out_grad))
                .or_insert_with(|| out_grad * v);
        }
    }

    pub fn merge(&mut self, other: &RowGrad) {
        for (&i, g) in &other.rows {
            self.rows
                .entry(i)
                .and_modify(|r| *r += g)
                .or_insert_with(|| g.clone());
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.rows.values_mut().for_each(|r| *r *= factor);
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Dense `out_dim x in_dim` view.
    pub fn to_matrix(&self, out_dim: usize, in_dim: usize) -> Array2<f64> {
        let mut m = Array2::zeros((out_dim, in_dim));
        for (&i, g) in &self.rows {
            m.column_mut(i as usize).assign(g);
        }
        m
    }

    pub fn sum_squares(&self) -> f64 {
        self.rows.values().map(|r| r.dot(r)).sum()
    }
}

/// Question and passage projections over the shared featurizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub featurizer: Featurizer,
    pub w_q: Projection,
    w_p: Projection,
    frozen_p: bool,
}

impl EncoderParams {
    /// Both projections start from the same draw.
    pub fn new<R: Rng>(featurizer: Featurizer, d_q: usize, rng: &mut R) -> Self {
        let w_q = Projection::uniform(d_q, featurizer.dim, rng);
        let w_p = w_q.clone();
        Self {
            featurizer,
            w_q,
            w_p,
            frozen_p: false,
        }
    }

    pub fn from_parts(featurizer: Featurizer, w_q: Projection, w_p: Projection, frozen_p: bool) -> Result<Self> {
        if w_q.out_dim() != w_p.out_dim() {
            return Err(Error::DimensionMismatch {
                expected: w_q.out_dim(),
                got: w_p.out_dim(),
            });
        }
        for w in [&w_q, &w_p] {
            if w.in_dim() != featurizer.dim {
                return Err(Error::DimensionMismatch {
                    expected: featurizer.dim,
                    got: w.in_dim(),
                });
            }
        }
        Ok(Self {
            featurizer,
            w_q,
            w_p,
            frozen_p,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.out_dim()
    }

    pub fn w_p(&self) -> &Projection {
        &self.w_p
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_p
    }

    pub fn freeze(&mut self) {
        self.frozen_p = true;
    }

    /// Mutable access to `W_p`; fails once frozen.
    pub fn w_p_mut(&mut self) -> Result<&mut Projection> {
        if self.frozen_p {
            Err(Error::EncoderFrozen)
        } else {
            Ok(&mut self.w_p)
        }
    }

    /// Digest of `W_p` and the featurizer configuration.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.featurizer.dim as u64).to_le_bytes());
        h.update(self.featurizer.seed.to_le_bytes());
        h.update((self.w_p.out_dim() as u64).to_le_bytes());
        for v in self.w_p.as_slice() {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
    }

    /// `v_p = W_p φ(title + " " + text)`.
    pub fn encode_passage(&self, p: &Passage) -> Array1<f64> {
        self.w_p.apply(&self.featurizer.features(&p.encoder_text()))
    }

    pub fn passage_features(&self, p: &Passage) -> SparseVec {
        self.featurizer.features(&p.encoder_text())
    }

    /// First-round question encoding `v_q = W_q φ(q*)`.
    pub fn encode_question_first_round(&self, question: &str, history: &[String]) -> Result<QueryEncoding> {
        if crate::corpus::tokenize(question).is_empty() {
            return Err(Error::InvalidArgument("current question is empty".into()));
        }
        let text = Featurizer::normalize(&question_string(question, history));
        Ok(self.encode_query_text(text))
    }

    pub fn encode_query_text(&self, text: String) -> QueryEncoding {
        let features = self.featurizer.features(&text);
        let vector = self.w_q.apply(&features);
        QueryEncoding { text, features, vector }
    }
}

/// A question-side encoding together with the inputs that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEncoding {
    pub text: String,
    pub features: SparseVec,
    pub vector: Array1<f64>,
}

/// `q_k*`: history entries then the current question, separated by `[SEP]`.
pub fn question_string(question: &str, history: &[String]) -> String {
    let mut parts: Vec<&str> = history.iter().map(String::as_str).collect();
    parts.push(question);
    parts.join(&format!(" {SEP} "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn passage(title: &str, text: &str) -> Passage {
        Passage {
            id: "x".into(),
            title: title.into(),
            text: text.into(),
            tokens: tokenize(text),
            out_links: vec![],
        }
    }

    fn encoder(d_f: usize, d_q: usize, seed: u64) -> EncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderParams::new(Featurizer::new(d_f, 3), d_q, &mut rng)
    }

    #[test]
    fn identity_projection_passes_features_through() {
        let feat = Featurizer::new(8, 1);
        let id = Projection::from_matrix(&Array2::eye(8));
        let enc = EncoderParams::from_parts(feat, id.clone(), id, true).unwrap();
        let p = passage("T", "some words here");
        assert_eq!(enc.encode_passage(&p), feat.featurize("T some words here"));
    }

    #[test]
    fn zero_projection_gives_zero_vector() {
        let feat = Featurizer::new(16, 1);
        let z = Projection::zeros(4, 16);
        let enc = EncoderParams::from_parts(feat, z.clone(), z, false).unwrap();
        assert!(enc.encode_passage(&passage("a", "b c")).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn passage_encoding_matches_naive_product() {
        let enc = encoder(64, 8, 5);
        let p = passage("Title", "the quick brown fox jumps over");
        let phi = enc.featurizer.featurize(&p.encoder_text());
        let w = enc.w_p().to_matrix();
        let got = enc.encode_passage(&p);
        for r in 0..8 {
            let mut acc = 0.0;
            for c in 0..64 {
                acc += w[[r, c]] * phi[c];
            }
            assert!((acc - got[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn first_round_without_history_is_plain_question() {
        let enc = encoder(128, 8, 1);
        let q = enc.encode_question_first_round("who is x", &[]).unwrap();
        assert_eq!(q.text, "who is x");
        assert_eq!(q.vector, enc.w_q.apply_dense(&enc.featurizer.featurize("who is x")));
    }

    #[test]
    fn history_is_joined_with_separator() {
        assert_eq!(question_string("b", &["a".into()]), "a [SEP] b");
        let enc = encoder(128, 8, 1);
        let q = enc.encode_question_first_round("B", &["a".into()]).unwrap();
        assert_eq!(q.text, "a [SEP] b");
    }

    #[test]
    fn three_turn_string_template() {
        let enc = encoder(256, 8, 2);
        let history = vec!["Who was Ada?".to_string(), "Where did she work".to_string()];
        let q = enc.encode_question_first_round("What did she write?", &history).unwrap();
        let expected = "who was ada [SEP] where did she work [SEP] what did she write";
        assert_eq!(q.text, expected);
        assert_eq!(q.vector, enc.w_q.apply(&enc.featurizer.features(expected)));
    }

    #[test]
    fn empty_question_is_an_error() {
        let enc = encoder(32, 4, 1);
        assert!(enc.encode_question_first_round("  ?", &[]).is_err());
    }

    #[test]
    fn score_is_linear_in_question_features() {
        let enc = encoder(32, 6, 9);
        let mut phi = SparseVec::from_pairs(vec![(1, 0.5), (7, -0.25), (30, 1.0)]);
        let vp = enc.encode_passage(&passage("t", "alpha beta"));
        let s1 = enc.w_q.apply(&phi).dot(&vp);
        phi = phi.scaled(2.0);
        let s2 = enc.w_q.apply(&phi).dot(&vp);
        assert!((s2 - 2.0 * s1).abs() < 1e-12);
    }

    #[test]
    fn frozen_encoder_rejects_updates() {
        let mut enc = encoder(16, 4, 1);
        assert!(enc.w_p_mut().is_ok());
        enc.freeze();
        assert!(matches!(enc.w_p_mut(), Err(Error::EncoderFrozen)));
    }

    #[test]
    fn row_grad_matches_dense_outer_product() {
        let mut g = RowGrad::default();
        let x = SparseVec::from_pairs(vec![(0, 1.0), (2, -2.0)]);
        let y = Array1::from(vec![1.0, 3.0]);
        g.add_outer(&y, &x);
        g.add_outer(&y, &x);
        let m = g.to_matrix(2, 3);
        assert_eq!(m[[1, 2]], -12.0);
        assert_eq!(m[[0, 0]], 2.0);
        assert_eq!(m[[0, 1]], 0.0);
    }
}
