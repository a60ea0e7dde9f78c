//! Listwise ranker, span reader and final answer selection.
//!
//! Each candidate passage is read as `[CLS] q* [SEP] p [SEP]`. Token `j` is
//! represented by `v_j = W_t φ_tok(j)`, where `φ_tok` signed-hashes these
//! feature strings (dimension `d_t`, L2-normalised):
//!
//! | feature | meaning |
//! |---|---|
//! | `w:{tok}` | the token |
//! | `p:{prev}`, `n:{next}` | neighbours (`<s>` / `</s>` at the edges) |
//! | `r:q`, `r:p`, `r:s` | region: question, passage, sentinel |
//! | `pos:{k}` | passage offset bucket `min(offset / 8, 15)`; `pos:q` elsewhere |
//! | `qm` | passage token that also occurs in the question |
//! | `pqm`, `nqm` | previous / next token occurs in the question |
//! | `bias` | constant |
//!
//! `v_{q,p}` is the mean of the token vectors.

use std::collections::HashSet;

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{is_sentinel, tokenize_with_sentinels, Passage, CLS, SEP};
use crate::dense::{hash_features, Projection, RowGrad};
use crate::error::{Error, Result};
use crate::math::{softmax, SparseVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Question,
    Passage,
    Sentinel,
}

impl Region {
    fn tag(self) -> &'static str {
        match self {
            Region::Question => "r:q",
            Region::Passage => "r:p",
            Region::Sentinel => "r:s",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointSequence {
    pub tokens: Vec<String>,
    pub regions: Vec<Region>,
    pub passage_index: usize,
    /// Sequence position of the first passage token.
    pub passage_start: usize,
    /// Passage tokens kept after truncation.
    pub passage_len: usize,
}

impl JointSequence {
    /// The question keeps at most `max_seq / 2` tokens, dropping the oldest
    /// history first; the passage fills the rest and loses its tail.
    pub fn build(q_star: &str, passage: &Passage, passage_index: usize, max_seq: usize) -> Self {
        let q = tokenize_with_sentinels(q_star);
        let q_keep = q.len().min(max_seq / 2);
        let q = &q[q.len() - q_keep..];
        let p_keep = passage.tokens.len().min(max_seq.saturating_sub(3 + q_keep));
        let mut tokens = Vec::with_capacity(q_keep + p_keep + 3);
        let mut regions = Vec::with_capacity(tokens.capacity());
        tokens.push(CLS.to_string());
        regions.push(Region::Sentinel);
        for t in q {
            regions.push(if is_sentinel(t) { Region::Sentinel } else { Region::Question });
            tokens.push(t.clone());
        }
        tokens.push(SEP.to_string());
        regions.push(Region::Sentinel);
        let passage_start = tokens.len();
        for t in &passage.tokens[..p_keep] {
            tokens.push(t.clone());
            regions.push(Region::Passage);
        }
        tokens.push(SEP.to_string());
        regions.push(Region::Sentinel);
        Self {
            tokens,
            regions,
            passage_index,
            passage_start,
            passage_len: p_keep,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn question_terms(&self) -> HashSet<&str> {
        self.tokens
            .iter()
            .zip(&self.regions)
            .filter(|(_, &r)| r == Region::Question)
            .map(|(t, _)| t.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFeaturizer {
    pub dim: usize,
    pub seed: u64,
}

impl TokenFeaturizer {
    /// Feature strings of token `j` (see the module table).
    pub fn feature_strings(seq: &JointSequence, j: usize) -> Vec<String> {
        Self::feature_strings_with(seq, j, &seq.question_terms())
    }

    fn feature_strings_with(seq: &JointSequence, j: usize, question: &HashSet<&str>) -> Vec<String> {
        let tok = &seq.tokens[j];
        let prev = if j == 0 { "<s>" } else { seq.tokens[j - 1].as_str() };
        let next = seq.tokens.get(j + 1).map_or("</s>", String::as_str);
        let region = seq.regions[j];
        let mut f = vec![
            format!("w:{tok}"),
            format!("p:{prev}"),
            format!("n:{next}"),
            region.tag().to_string(),
            "bias".to_string(),
        ];
        if region == Region::Passage {
            f.push(format!("pos:{}", ((j - seq.passage_start) / 8).min(15)));
            if question.contains(tok.as_str()) {
                f.push("qm".into());
            }
            if question.contains(prev) {
                f.push("pqm".into());
            }
            if question.contains(next) {
                f.push("nqm".into());
            }
        } else {
            f.push("pos:q".into());
        }
        f
    }

    pub fn features(&self, seq: &JointSequence) -> Vec<SparseVec> {
        let question = seq.question_terms();
        (0..seq.len())
            .map(|j| {
                let strings = Self::feature_strings_with(seq, j, &question);
                hash_features(strings.iter().map(String::as_str), self.seed, self.dim)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadHeads {
    pub tokens: TokenFeaturizer,
    /// `W_t`, `d_q x d_t`.
    pub w_t: Projection,
    pub w_ra: Array1<f64>,
    pub w_s: Array1<f64>,
    pub w_e: Array1<f64>,
}

impl ReadHeads {
    pub fn init<R: Rng>(d_q: usize, tokens: TokenFeaturizer, rng: &mut R) -> Self {
        let w_t = Projection::uniform(d_q, tokens.dim, rng);
        let bound = 1.0 / (d_q as f64).sqrt();
        let mut vec = || -> Array1<f64> { (0..d_q).map(|_| rng.gen_range(-bound..=bound)).collect() };
        Self {
            tokens,
            w_t,
            w_ra: vec(),
            w_s: vec(),
            w_e: vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_ra.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointEncoding {
    pub sequence: JointSequence,
    pub features: Vec<SparseVec>,
    /// One row per token.
    pub vectors: Array2<f64>,
    pub pooled: Array1<f64>,
}

pub fn encode_joint(heads: &ReadHeads, q_star: &str, passage: &Passage, passage_index: usize, max_seq: usize) -> JointEncoding {
    let sequence = JointSequence::build(q_star, passage, passage_index, max_seq);
    let features = heads.tokens.features(&sequence);
    let mut vectors = Array2::zeros((features.len(), heads.dim()));
    for (j, f) in features.iter().enumerate() {
        vectors.row_mut(j).assign(&heads.w_t.apply(f));
    }
    let pooled = vectors.mean_axis(ndarray::Axis(0)).expect("sequences are never empty");
    JointEncoding {
        sequence,
        features,
        vectors,
        pooled,
    }
}

/// Encodes every candidate; order follows `candidates`.
pub fn encode_candidates(heads: &ReadHeads, q_star: &str, candidates: &[(usize, &Passage)], max_seq: usize) -> Vec<JointEncoding> {
    candidates
        .par_iter()
        .map(|&(i, p)| encode_joint(heads, q_star, p, i, max_seq))
        .collect()
}

/// Ranker logits and `S_b`, a softmax over the candidates.
pub fn ranker_scores(heads: &ReadHeads, encodings: &[JointEncoding]) -> Result<(Vec<f64>, Vec<f64>)> {
    if encodings.is_empty() {
        return Err(Error::InvalidArgument("ranker needs at least one candidate".into()));
    }
    let logits: Vec<f64> = encodings.iter().map(|e| heads.w_ra.dot(&e.pooled)).collect();
    let probs = softmax(&logits);
    Ok((logits, probs))
}

/// Start and end distributions over all tokens of all candidates jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct ReaderScores {
    /// Flat offset of each candidate's first token.
    pub offsets: Vec<usize>,
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

pub fn reader_scores(heads: &ReadHeads, encodings: &[JointEncoding]) -> ReaderScores {
    let mut offsets = Vec::with_capacity(encodings.len());
    let mut start_logits = Vec::new();
    let mut end_logits = Vec::new();
    for e in encodings {
        offsets.push(start_logits.len());
        start_logits.extend(e.vectors.dot(&heads.w_s));
        end_logits.extend(e.vectors.dot(&heads.w_e));
    }
    let start = softmax(&start_logits);
    let end = softmax(&end_logits);
    ReaderScores {
        offsets,
        start_logits,
        end_logits,
        start,
        end,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerCandidate {
    pub passage_id: String,
    pub passage_index: usize,
    /// Position of the passage in the candidate list.
    pub candidate: usize,
    /// Inclusive sequence positions of the first and last token.
    pub seq_start: usize,
    pub seq_end: usize,
    /// Half-open token interval within the passage.
    pub span: (usize, usize),
    pub text: String,
    pub s_a: f64,
    pub s_b: f64,
    pub s_s: f64,
    pub s_e: f64,
    pub total: f64,
}

impl AnswerCandidate {
    pub fn combine(s_a: f64, s_b: f64, s_s: f64, s_e: f64) -> f64 {
        s_a + s_b + s_s + s_e
    }

    pub fn recompute_total(&self) -> f64 {
        Self::combine(self.s_a, self.s_b, self.s_s, self.s_e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Answer {
    Span(AnswerCandidate),
    Abstain,
}

impl Answer {
    pub fn text(&self) -> &str {
        match self {
            Answer::Span(c) => &c.text,
            Answer::Abstain => "",
        }
    }

    pub fn candidate(&self) -> Option<&AnswerCandidate> {
        match self {
            Answer::Span(c) => Some(c),
            Answer::Abstain => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRules {
    pub max_answer_len: usize,
    pub top_spans: usize,
}

impl Default for SpanRules {
    fn default() -> Self {
        Self {
            max_answer_len: 30,
            top_spans: 20,
        }
    }
}

/// A span considered during extraction, before filtering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSpan {
    pub candidate: usize,
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// Top spans by `S_s + S_e` over every candidate sequence, with
/// `start <= end` and at most `max_answer_len` tokens.
pub fn top_spans(encodings: &[JointEncoding], reader: &ReaderScores, rules: &SpanRules) -> Vec<ScoredSpan> {
    let mut spans = Vec::new();
    for (c, e) in encodings.iter().enumerate() {
        let off = reader.offsets[c];
        let n = e.sequence.len();
        for s in 0..n {
            for t in s..n.min(s + rules.max_answer_len) {
                spans.push(ScoredSpan {
                    candidate: c,
                    start: s,
                    end: t,
                    score: reader.start[off + s] + reader.end[off + t],
                });
            }
        }
    }
    spans.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.candidate.cmp(&b.candidate))
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
    });
    spans.truncate(rules.top_spans);
    spans
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Whether a span may be returned: entirely inside the passage region and
/// not a token run of any conversation question.
pub fn span_is_valid(seq: &JointSequence, start: usize, end: usize, rules: &SpanRules, questions: &[Vec<String>]) -> bool {
    if start > end || end >= seq.len() || end - start + 1 > rules.max_answer_len {
        return false;
    }
    if seq.regions[start..=end].iter().any(|&r| r != Region::Passage) {
        return false;
    }
    let run = &seq.tokens[start..=end];
    !questions.iter().any(|q| contains_run(q, run))
}

/// Picks the best valid span by `S = S_a + S_b + S_s + S_e`; ties go to the
/// higher `S_b`, then the lower passage index, then the earlier start.
pub fn extract_answer(
    encodings: &[JointEncoding],
    ids: &[&str],
    s_a: &[f64],
    s_b: &[f64],
    reader: &ReaderScores,
    questions: &[Vec<String>],
    rules: &SpanRules,
) -> Answer {
    let mut best: Option<AnswerCandidate> = None;
    for span in top_spans(encodings, reader, rules) {
        let e = &encodings[span.candidate];
        if !span_is_valid(&e.sequence, span.start, span.end, rules, questions) {
            continue;
        }
        let off = reader.offsets[span.candidate];
        let (sa, sb) = (s_a[span.candidate], s_b[span.candidate]);
        let (ss, se) = (reader.start[off + span.start], reader.end[off + span.end]);
        let cand = AnswerCandidate {
            passage_id: ids[span.candidate].to_string(),
            passage_index: e.sequence.passage_index,
            candidate: span.candidate,
            seq_start: span.start,
            seq_end: span.end,
            span: (span.start - e.sequence.passage_start, span.end + 1 - e.sequence.passage_start),
            text: e.sequence.tokens[span.start..=span.end].join(" "),
            s_a: sa,
            s_b: sb,
            s_s: ss,
            s_e: se,
            total: AnswerCandidate::combine(sa, sb, ss, se),
        };
        let better = match &best {
            None => true,
            Some(b) => cand
                .total
                .total_cmp(&b.total)
                .then(cand.s_b.total_cmp(&b.s_b))
                .then(b.passage_index.cmp(&cand.passage_index))
                .then(b.seq_start.cmp(&cand.seq_start))
                .is_gt(),
        };
        if better {
            best = Some(cand);
        }
    }
    best.map_or(Answer::Abstain, Answer::Span)
}

/// Gradients of the ranker and reader heads.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReadGrads {
    pub w_t: RowGrad,
    pub w_ra: Option<Array1<f64>>,
    pub w_s: Option<Array1<f64>>,
    pub w_e: Option<Array1<f64>>,
}

fn add_into(slot: &mut Option<Array1<f64>>, g: &Array1<f64>) {
    match slot {
        Some(s) => *s += g,
        None => *slot = Some(g.clone()),
    }
}

impl ReadGrads {
    pub fn merge(&mut self, other: &ReadGrads) {
        self.w_t.merge(&other.w_t);
        for (dst, src) in [(&mut self.w_ra, &other.w_ra), (&mut self.w_s, &other.w_s), (&mut self.w_e, &other.w_e)] {
            if let Some(g) = src {
                add_into(dst, g);
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        self.w_t.scale(f);
        for g in [&mut self.w_ra, &mut self.w_s, &mut self.w_e].into_iter().flatten() {
            *g *= f;
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.w_t.sum_squares()
            + [&self.w_ra, &self.w_s, &self.w_e]
                .into_iter()
                .flatten()
                .map(|g| g.dot(g))
                .sum::<f64>()
    }
}

/// Backpropagates logit gradients of the ranker (`d_rank`, per candidate)
/// and reader (`d_start`, `d_end`, flat over tokens) to the heads.
pub fn read_backward(
    heads: &ReadHeads,
    encodings: &[JointEncoding],
    offsets: &[usize],
    d_rank: Option<&[f64]>,
    d_start: Option<&[f64]>,
    d_end: Option<&[f64]>,
) -> ReadGrads {
    let d = heads.dim();
    let mut grads = ReadGrads::default();
    let mut g_ra = Array1::zeros(d);
    let mut g_s = Array1::zeros(d);
    let mut g_e = Array1::zeros(d);
    for (c, e) in encodings.iter().enumerate() {
        let n = e.sequence.len();
        let pooled_grad = d_rank.map(|dr| &heads.w_ra * (dr[c] / n as f64));
        if let Some(dr) = d_rank {
            g_ra.scaled_add(dr[c], &e.pooled);
        }
        for j in 0..n {
            let mut dv = pooled_grad.clone().unwrap_or_else(|| Array1::zeros(d));
            let v = e.vectors.row(j);
            if let Some(ds) = d_start {
                let g = ds[offsets[c] + j];
                g_s.scaled_add(g, &v);
                dv.scaled_add(g, &heads.w_s);
            }
            if let Some(de) = d_end {
                let g = de[offsets[c] + j];
                g_e.scaled_add(g, &v);
                dv.scaled_add(g, &heads.w_e);
            }
            grads.w_t.add_outer(&dv, &e.features[j]);
        }
    }
    grads.w_ra = d_rank.map(|_| g_ra);
    grads.w_s = d_start.map(|_| g_s);
    grads.w_e = d_end.map(|_| g_e);
    grads
}
