//! TF-IDF retriever supplying the lexical seeds of the explorer.
//!
//! Weights are `w(t, d) = (1 + ln tf) * ln((1 + N) / (1 + df))` with cosine
//! normalisation on both sides. A passage whose every term occurs in all
//! passages has zero norm and never scores above zero.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{is_sentinel, tokenize_with_sentinels, write_file, Corpus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    /// term -> (passage index, term frequency), ascending passage index.
    postings: BTreeMap<String, Vec<(usize, u32)>>,
    doc_freq: BTreeMap<String, usize>,
    doc_norm: Vec<f64>,
    n_docs: usize,
}

fn term_counts(tokens: impl IntoIterator<Item = String>) -> BTreeMap<String, u32> {
    let mut tf = BTreeMap::new();
    for t in tokens {
        if !is_sentinel(&t) {
            *tf.entry(t).or_insert(0) += 1;
        }
    }
    tf
}

fn tf_weight(tf: u32) -> f64 {
    1.0 + (tf as f64).ln()
}

impl InvertedIndex {
    /// Indexes the title and text of every passage.
    pub fn build(corpus: &Corpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let docs: Vec<String> = corpus.passages().iter().map(|p| p.encoder_text()).collect();
        Ok(Self::from_texts(&docs))
    }

    /// Builds directly from texts; text `i` is passage index `i`.
    pub fn from_texts<S: AsRef<str>>(docs: &[S]) -> Self {
        let mut postings: BTreeMap<String, Vec<(usize, u32)>> = BTreeMap::new();
        let mut per_doc = Vec::with_capacity(docs.len());
        for (d, text) in docs.iter().enumerate() {
            let tf = term_counts(tokenize_with_sentinels(text.as_ref()));
            for (term, &count) in &tf {
                postings.entry(term.clone()).or_default().push((d, count));
            }
            per_doc.push(tf);
        }
        let n_docs = docs.len();
        let doc_freq: BTreeMap<String, usize> = postings.iter().map(|(t, p)| (t.clone(), p.len())).collect();
        let mut index = Self {
            postings,
            doc_freq,
            doc_norm: Vec::new(),
            n_docs,
        };
        index.doc_norm = per_doc
            .iter()
            .map(|tf| {
                tf.iter()
                    .map(|(t, &c)| (tf_weight(c) * index.idf(t)).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        index
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn doc_norm(&self, doc: usize) -> f64 {
        self.doc_norm[doc]
    }

    pub fn postings(&self, term: &str) -> &[(usize, u32)] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.doc_freq.keys().map(String::as_str)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.doc_freq(term) as f64;
        ((1.0 + self.n_docs as f64) / (1.0 + df)).ln()
    }

    /// Normalised query weights over indexed terms, in term order.
    pub fn query_weights(&self, query: &str) -> Vec<(&str, f64)> {
        let tf = term_counts(tokenize_with_sentinels(query));
        let mut weights: Vec<(&str, f64)> = tf
            .iter()
            .filter_map(|(t, &c)| {
                let (key, _) = self.doc_freq.get_key_value(t.as_str())?;
                Some((key.as_str(), tf_weight(c) * self.idf(t)))
            })
            .collect();
        let norm = weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            weights.iter_mut().for_each(|(_, w)| *w /= norm);
        }
        weights
    }

    /// Top-`k` passages by cosine similarity; only positive scores are
    /// returned, ties broken by ascending passage index.
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for (term, wq) in self.query_weights(query) {
            if wq == 0.0 {
                continue;
            }
            let idf = self.idf(term);
            for &(doc, tf) in self.postings(term) {
                *acc.entry(doc).or_insert(0.0) += wq * tf_weight(tf) * idf;
            }
        }
        let mut scored: Vec<(usize, f64)> = acc
            .into_iter()
            .filter_map(|(doc, dot)| {
                let norm = self.doc_norm[doc];
                (norm > 0.0 && dot > 0.0).then(|| (doc, dot / norm))
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PassageRecord;
    use proptest::prelude::*;

    /// Dense-vector oracle: explicit weighted vectors over the vocabulary.
    fn brute_force_scores(docs: &[&str], query: &str) -> Vec<f64> {
        let tok = |s: &str| crate::corpus::tokenize(s);
        let mut vocab: Vec<String> = docs.iter().flat_map(|d| tok(d)).collect();
        vocab.sort();
        vocab.dedup();
        let n = docs.len() as f64;
        let count = |toks: &[String], t: &str| toks.iter().filter(|x| *x == t).count();
        let doc_toks: Vec<Vec<String>> = docs.iter().map(|d| tok(d)).collect();
        let idf: Vec<f64> = vocab
            .iter()
            .map(|t| {
                let df = doc_toks.iter().filter(|d| d.contains(t)).count() as f64;
                ((1.0 + n) / (1.0 + df)).ln()
            })
            .collect();
        let vectorize = |toks: &[String]| -> Vec<f64> {
            vocab
                .iter()
                .zip(&idf)
                .map(|(t, &i)| {
                    let c = count(toks, t);
                    if c == 0 {
                        0.0
                    } else {
                        (1.0 + (c as f64).ln()) * i
                    }
                })
                .collect()
        };
        let q = vectorize(&tok(query));
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        doc_toks
            .iter()
            .map(|d| {
                let v = vectorize(d);
                let dn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if qn == 0.0 || dn == 0.0 {
                    0.0
                } else {
                    q.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / (qn * dn)
                }
            })
            .collect()
    }

    #[test]
    fn doc_freq_counts_documents() {
        let idx = InvertedIndex::from_texts(&["a b", "b c"]);
        assert_eq!(idx.doc_freq("a"), 1);
        assert_eq!(idx.doc_freq("b"), 2);
        assert_eq!(idx.doc_freq("c"), 1);
        assert_eq!(idx.n_docs(), 2);
        assert!(idx.doc_norm(0) > 0.0 && idx.doc_norm(1) > 0.0);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let (corpus, _) = Corpus::from_passages(Vec::<PassageRecord>::new()).unwrap();
        assert!(matches!(InvertedIndex::build(&corpus), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn unknown_terms_give_empty_result() {
        let idx = InvertedIndex::from_texts(&["a b", "b c"]);
        assert!(idx.retrieve("zzz qqq", 3).is_empty());
        assert!(idx.retrieve("", 3).is_empty());
        assert!(idx.retrieve("a", 0).is_empty());
    }

    #[test]
    fn self_query_ranks_first() {
        let docs = ["alpha beta gamma", "delta epsilon", "zeta eta theta iota"];
        let idx = InvertedIndex::from_texts(&docs);
        for (i, d) in docs.iter().enumerate() {
            assert_eq!(idx.retrieve(d, 1)[0].0, i);
        }
    }

    #[test]
    fn hand_corpus_matches_hand_weights() {
        // N = 3; df(cat)=2, df(dog)=1, df(fish)=1, df(bird)=1.
        let docs = ["cat cat dog", "cat fish", "bird"];
        let idx = InvertedIndex::from_texts(&docs);
        let i_cat = (4.0f64 / 3.0).ln();
        let i_one = 2.0f64.ln();
        let d0 = [(1.0 + 2.0f64.ln()) * i_cat, i_one];
        let d1 = [i_cat, i_one];
        let n0 = (d0[0] * d0[0] + d0[1] * d0[1]).sqrt();
        let n1 = (d1[0] * d1[0] + d1[1] * d1[1]).sqrt();
        // query "cat": unit vector on cat.
        let s0 = d0[0] / n0;
        let s1 = d1[0] / n1;
        let got = idx.retrieve("cat", 3);
        assert_eq!(got.len(), 2);
        let expected = if s0 >= s1 { [(0, s0), (1, s1)] } else { [(1, s1), (0, s0)] };
        for (g, e) in got.iter().zip(expected) {
            assert_eq!(g.0, e.0);
            assert!((g.1 - e.1).abs() < 1e-12);
        }
        let oracle = brute_force_scores(&docs, "cat");
        assert!((oracle[0] - s0).abs() < 1e-12 && (oracle[1] - s1).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_ascending_index() {
        let idx = InvertedIndex::from_texts(&["x y", "x z", "x w", "v"]);
        let got = idx.retrieve("x", 3);
        assert_eq!(got.iter().map(|g| g.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn extra_document_changes_scores_only_through_idf() {
        let base = ["red green", "green blue blue", "blue red red"];
        let extended = ["red green", "green blue blue", "blue red red", "violet"];
        let a = InvertedIndex::from_texts(&base);
        let b = InvertedIndex::from_texts(&extended);
        for term in ["red", "green", "blue"] {
            assert_eq!(a.postings(term), b.postings(term));
            assert_eq!(a.doc_freq(term), b.doc_freq(term));
            assert!(b.idf(term) > a.idf(term));
        }
        assert_eq!(b.n_docs(), a.n_docs() + 1);
    }

    fn word() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["ant", "bee", "cow", "dog", "elk", "fox", "gnu", "hen", "ibis", "jay"])
            .prop_map(String::from)
    }

    fn doc() -> impl Strategy<Value = String> {
        prop::collection::vec(word(), 1..8).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn postings_scores_match_dense_oracle(docs in prop::collection::vec(doc(), 1..30), query in doc()) {
            let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
            let idx = InvertedIndex::from_texts(&refs);
            let oracle = brute_force_scores(&refs, &query);
            let got = idx.retrieve(&query, docs.len());
            for &(d, s) in &got {
                prop_assert!((oracle[d] - s).abs() < 1e-9);
            }
            for (d, &s) in oracle.iter().enumerate() {
                if s > 1e-9 {
                    prop_assert!(got.iter().any(|g| g.0 == d));
                }
            }
            for w in got.windows(2) {
                prop_assert!(w[0].1 >= w[1].1);
            }
        }
    }
}
