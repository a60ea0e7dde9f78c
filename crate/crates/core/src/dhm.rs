//! Dynamic history modeling: question/feedback/history triplets, attention
//! over their encodings, and the multi-round retrieval loop.

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RoundConfig;
use crate::corpus::{tokenize, Corpus, Passage, CLS, SEP};
use crate::dense::{EmbeddingStore, EncoderParams, Featurizer, QueryEncoding};
use crate::error::{Error, Result};
use crate::math::softmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    /// `W_a`, a single row of length `d_q`.
    pub w_a: Array1<f64>,
}

impl AttentionParams {
    pub fn zeros(d_q: usize) -> Self {
        Self { w_a: Array1::zeros(d_q) }
    }

    pub fn uniform<R: Rng>(d_q: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_q as f64).sqrt();
        Self {
            w_a: (0..d_q).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub text: String,
    /// 1-based index of the history question.
    pub history_index: usize,
}

/// One triplet per history question, each carrying the same feedback
/// passages (truncated to `feedback_tokens` tokens).
pub fn build_triplets(
    question: &str,
    history: &[String],
    feedback: &[&Passage],
    feedback_tokens: usize,
) -> Result<Vec<Triplet>> {
    if history.is_empty() {
        return Err(Error::InvalidArgument("triplets need at least one history question".into()));
    }
    let q = Featurizer::normalize(question);
    let mut middle = String::new();
    for p in feedback {
        let tokens = tokenize(&p.encoder_text());
        let kept = &tokens[..tokens.len().min(feedback_tokens)];
        middle.push_str(&kept.join(" "));
        middle.push(' ');
        middle.push_str(SEP);
        middle.push(' ');
    }
    Ok(history
        .iter()
        .enumerate()
        .map(|(i, h)| Triplet {
            text: format!("{CLS} {q} {SEP} {middle}{} {SEP}", Featurizer::normalize(h)),
            history_index: i + 1,
        })
        .collect())
}

/// Result of attending over triplet encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    pub v_q: Array1<f64>,
}

pub fn attend_history(vectors: &[Array1<f64>], params: &AttentionParams) -> Result<Attention> {
    let Some(first) = vectors.first() else {
        return Err(Error::InvalidArgument("attention over an empty triplet list".into()));
    };
    for v in vectors {
        if v.len() != params.w_a.len() {
            return Err(Error::DimensionMismatch {
                expected: params.w_a.len(),
                got: v.len(),
            });
        }
    }
    let logits: Vec<f64> = vectors.iter().map(|v| params.w_a.dot(v)).collect();
    let weights = softmax(&logits);
    let mut v_q = Array1::zeros(first.len());
    for (w, v) in weights.iter().zip(vectors) {
        v_q.scaled_add(*w, v);
    }
    Ok(Attention { logits, weights, v_q })
}

/// Backward pass of [`attend_history`]: returns `dL/dW_a` and `dL/du_i`
/// for each triplet vector, given `dL/dv_q`.
pub fn attend_history_backward(
    vectors: &[Array1<f64>],
    attention: &Attention,
    params: &AttentionParams,
    grad_v_q: &Array1<f64>,
) -> (Array1<f64>, Vec<Array1<f64>>) {
    let g_dot_v = grad_v_q.dot(&attention.v_q);
    let mut grad_w_a = Array1::zeros(params.w_a.len());
    let grads = vectors
        .iter()
        .zip(&attention.weights)
        .map(|(u, &alpha)| {
            let d_logit = alpha * (grad_v_q.dot(u) - g_dot_v);
            grad_w_a.scaled_add(d_logit, u);
            let mut du = grad_v_q * alpha;
            du.scaled_add(d_logit, &params.w_a);
            du
        })
        .collect();
    (grad_w_a, grads)
}

/// Diagnostics for one retrieval round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    /// Passages fed back from the previous round.
    pub feedback: Vec<String>,
    /// Attention weights over history triplets (empty in round 1).
    pub weights: Vec<f64>,
    pub passages: Vec<String>,
    pub scores: Vec<f64>,
}

/// Everything a round-2+ step computed, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DhmRound {
    pub triplets: Vec<Triplet>,
    pub encodings: Vec<QueryEncoding>,
    pub attention: Attention,
    pub list: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiRound {
    pub first: QueryEncoding,
    pub first_list: Vec<(usize, f64)>,
    /// The last DHM round, absent when only round 1 ran.
    pub last: Option<DhmRound>,
    pub trace: Vec<RoundTrace>,
}

impl MultiRound {
    pub fn final_list(&self) -> &[(usize, f64)] {
        self.last.as_ref().map_or(&self.first_list, |r| &r.list)
    }

    pub fn final_query(&self) -> &Array1<f64> {
        self.last.as_ref().map_or(&self.first.vector, |r| &r.attention.v_q)
    }
}

/// A single feedback round: triplets from `feedback`, attention, MIPS.
#[allow(clippy::too_many_arguments)]
pub fn dhm_round(
    encoder: &EncoderParams,
    attention: &AttentionParams,
    store: &EmbeddingStore,
    corpus: &Corpus,
    question: &str,
    history: &[String],
    feedback: &[usize],
    n_1: usize,
    feedback_tokens: usize,
) -> Result<DhmRound> {
    let passages: Vec<&Passage> = feedback.iter().map(|&i| corpus.passage(i)).collect();
    let triplets = build_triplets(question, history, &passages, feedback_tokens)?;
    let encodings: Vec<QueryEncoding> = triplets
        .iter()
        .map(|t| encoder.encode_query_text(t.text.clone()))
        .collect();
    let vectors: Vec<Array1<f64>> = encodings.iter().map(|e| e.vector.clone()).collect();
    let att = attend_history(&vectors, attention)?;
    let list = store.mips_topk(&att.v_q, n_1)?;
    Ok(DhmRound {
        triplets,
        encodings,
        attention: att,
        list,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn multi_round_retrieve(
    encoder: &EncoderParams,
    attention: &AttentionParams,
    store: &EmbeddingStore,
    corpus: &Corpus,
    question: &str,
    history: &[String],
    config: &RoundConfig,
    feedback_tokens: usize,
) -> Result<MultiRound> {
    config.validate()?;
    let first = encoder.encode_question_first_round(question, history)?;
    let first_list = store.mips_topk(&first.vector, config.n_1)?;
    let ids = |list: &[(usize, f64)]| list.iter().map(|&(i, _)| corpus.passage(i).id.clone()).collect::<Vec<_>>();
    let mut trace = vec![RoundTrace {
        round: 1,
        feedback: vec![],
        weights: vec![],
        passages: ids(&first_list),
        scores: first_list.iter().map(|&(_, s)| s).collect(),
    }];
    let mut last: Option<DhmRound> = None;
    if !history.is_empty() {
        for round in 2..=config.rounds {
            let prev = last.as_ref().map_or(&first_list, |r| &r.list);
            let feedback: Vec<usize> = prev.iter().take(config.n_r).map(|&(i, _)| i).collect();
            let r = dhm_round(
                encoder,
                attention,
                store,
                corpus,
                question,
                history,
                &feedback,
                config.n_1,
                feedback_tokens,
            )?;
            trace.push(RoundTrace {
                round,
                feedback: feedback.iter().map(|&i| corpus.passage(i).id.clone()).collect(),
                weights: r.attention.weights.clone(),
                passages: ids(&r.list),
                scores: r.list.iter().map(|&(_, s)| s).collect(),
            });
            last = Some(r);
        }
    }
    Ok(MultiRound {
        first,
        first_list,
        last,
        trace,
    })
}
