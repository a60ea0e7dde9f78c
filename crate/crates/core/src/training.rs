//! Losses, analytic gradients and the phase schedule.
//!
//! Every loss is a binary cross-entropy over softmax probabilities
//! ([`softmax_bce`]). Phases update disjoint parameter sets:
//!
//! | phase | loss | updated |
//! |---|---|---|
//! | pretrain | retriever, in-batch negatives | `W_q`, `W_p` |
//! | joint | retriever (round 1) + ranker + reader | `W_q`, `W_t`, `W_ra`, `W_s`, `W_e` |
//! | dhm | retriever on the last round's list | `W_a`, `W_q` |
//! | explorer | explorer | GAT |
//!
//! Training turns see gold answer passages of earlier turns.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Turn};
use crate::dense::{EmbeddingStore, RowGrad};
use crate::dhm::{attend_history_backward, multi_round_retrieve};
use crate::error::{Error, Result};
use crate::explorer::{gat_backward, GatParams};
use crate::math::{softmax_bce, SparseVec};
use crate::model::{Family, ModelParams};
use crate::pipeline::{teacher_history, Engine, ExploreStage, TurnOutput};
use crate::rank_read::{read_backward, ReadGrads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Joint,
    Dhm,
    Explorer,
}

impl Phase {
    pub const ORDER: [Phase; 4] = [Phase::Pretrain, Phase::Joint, Phase::Dhm, Phase::Explorer];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Joint => "joint",
            Phase::Dhm => "dhm",
            Phase::Explorer => "explorer",
        }
    }

    pub fn families(self) -> &'static [Family] {
        match self {
            Phase::Pretrain => &[Family::Wq, Family::Wp],
            Phase::Joint => &[Family::Wq, Family::Wt, Family::Wra, Family::Ws, Family::We],
            Phase::Dhm => &[Family::Wa, Family::Wq],
            Phase::Explorer => &[Family::Gat],
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ORDER
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown phase `{s}` (pretrain|joint|dhm|explorer)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Run a finite-difference check on the first example before training.
    pub grad_check: bool,
    /// Pretraining only: inverse-cloze pseudo-queries drawn per passage and
    /// epoch, on top of the question pairs.
    #[serde(default)]
    pub pseudo_queries: usize,
    /// Batch gradients with a larger global L2 norm are rescaled to it.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 5,
            batch_size: 32,
            seed: 7,
            grad_check: false,
            pseudo_queries: 1,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return Err(Error::InvalidArgument("max_grad_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub retriever: f64,
    pub explorer: f64,
    pub ranker: f64,
    pub reader: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.retriever + self.explorer + self.ranker + self.reader;
        self
    }

    fn add(&mut self, o: &LossBreakdown) {
        self.retriever += o.retriever;
        self.explorer += o.explorer;
        self.ranker += o.ranker;
        self.reader += o.reader;
        self.total += o.total;
    }

    fn scaled(mut self, f: f64) -> Self {
        self.retriever *= f;
        self.explorer *= f;
        self.ranker *= f;
        self.reader *= f;
        self.total *= f;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub examples: usize,
    pub skipped: usize,
}

pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("phase,epoch,retriever,explorer,ranker,reader,total,examples,skipped\n");
    for e in log {
        let l = &e.loss;
        let _ = writeln!(
            out,
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{},{}",
            e.phase.name(),
            e.epoch,
            l.retriever,
            l.explorer,
            l.ranker,
            l.reader,
            l.total,
            e.examples,
            e.skipped
        );
    }
    out
}

pub fn write_loss_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    std::fs::write(path, loss_log_csv(log)).map_err(|e| Error::io(path, e))
}

/// A training question: turn `turn` (0-based) of conversation `conv`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub conv: usize,
    pub turn: usize,
}

/// Every turn of the selected conversations, in corpus order.
pub fn examples(corpus: &Corpus, keep_conv: impl Fn(usize) -> bool) -> Vec<Example> {
    corpus
        .conversations()
        .iter()
        .enumerate()
        .filter(|(c, _)| keep_conv(*c))
        .flat_map(|(c, conv)| (0..conv.turns.len()).map(move |t| Example { conv: c, turn: t }))
        .collect()
}

/// Gradient for every family; absent entries are zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelGrads {
    pub w_q: RowGrad,
    pub w_p: RowGrad,
    pub w_a: Option<Array1<f64>>,
    pub gat: Option<GatParams>,
    pub read: ReadGrads,
}

impl ModelGrads {
    pub fn merge(&mut self, o: &ModelGrads) {
        self.w_q.merge(&o.w_q);
        self.w_p.merge(&o.w_p);
        if let Some(g) = &o.w_a {
            match &mut self.w_a {
                Some(s) => *s += g,
                None => self.w_a = Some(g.clone()),
            }
        }
        if let Some(g) = &o.gat {
            match &mut self.gat {
                Some(s) => s.add_scaled(g, 1.0),
                None => self.gat = Some(g.clone()),
            }
        }
        self.read.merge(&o.read);
    }

    pub fn scale(&mut self, f: f64) {
        self.w_q.scale(f);
        self.w_p.scale(f);
        if let Some(g) = &mut self.w_a {
            *g *= f;
        }
        if let Some(g) = &mut self.gat {
            let copy = g.clone();
            g.add_scaled(&copy, f - 1.0);
        }
        self.read.scale(f);
    }

    pub fn norm(&self) -> f64 {
        let mut ss = self.w_q.sum_squares() + self.w_p.sum_squares() + self.read.sum_squares();
        if let Some(g) = &self.w_a {
            ss += g.dot(g);
        }
        if let Some(g) = &self.gat {
            ss += g.sum_squares();
        }
        ss.sqrt()
    }

    /// Rescales to at most `max` in global norm.
    pub fn clip(&mut self, max: Option<f64>) {
        if let Some(max) = max {
            let n = self.norm();
            if n > max {
                self.scale(max / n);
            }
        }
    }

    /// Dense gradients laid out like [`ModelParams::for_each_block_mut`].
    pub fn dense_blocks(&self, params: &ModelParams) -> Vec<(Family, Vec<f64>)> {
        let rows_dense = |g: &RowGrad, in_dim: usize, out_dim: usize| {
            let mut v = vec![0.0; in_dim * out_dim];
            for (&i, r) in &g.rows {
                v[i as usize * out_dim..(i as usize + 1) * out_dim].copy_from_slice(r.as_slice().expect("contiguous"));
            }
            v
        };
        let opt = |g: &Option<Array1<f64>>, n: usize| g.as_ref().map_or(vec![0.0; n], |a| a.to_vec());
        let enc = &params.encoder;
        let mut out = vec![(Family::Wq, rows_dense(&self.w_q, enc.w_q.in_dim(), enc.w_q.out_dim()))];
        if !enc.is_frozen() {
            out.push((Family::Wp, rows_dense(&self.w_p, enc.w_p().in_dim(), enc.w_p().out_dim())));
        }
        out.push((Family::Wa, opt(&self.w_a, params.attention.w_a.len())));
        let zeros = params.gat.zeros_like();
        for b in self.gat.as_ref().unwrap_or(&zeros).blocks() {
            out.push((Family::Gat, b.to_vec()));
        }
        let r = &params.read;
        out.push((Family::Wt, rows_dense(&self.read.w_t, r.w_t.in_dim(), r.w_t.out_dim())));
        out.push((Family::Wra, opt(&self.read.w_ra, r.w_ra.len())));
        out.push((Family::Ws, opt(&self.read.w_s, r.w_s.len())));
        out.push((Family::We, opt(&self.read.w_e, r.w_e.len())));
        out
    }
}

/// `θ -= lr · g` for the listed families.
pub fn apply_gradients(params: &mut ModelParams, grads: &ModelGrads, lr: f64, families: &[Family]) -> Result<()> {
    for fam in families {
        match fam {
            Family::Wq => params.encoder.w_q.descend(&grads.w_q, lr),
            Family::Wp => params.encoder.w_p_mut()?.descend(&grads.w_p, lr),
            Family::Wa => {
                if let Some(g) = &grads.w_a {
                    params.attention.w_a.scaled_add(-lr, g);
                }
            }
            Family::Gat => {
                if let Some(g) = &grads.gat {
                    params.gat.add_scaled(g, -lr);
                }
            }
            Family::Wt => params.read.w_t.descend(&grads.read.w_t, lr),
            Family::Wra => {
                if let Some(g) = &grads.read.w_ra {
                    params.read.w_ra.scaled_add(-lr, g);
                }
            }
            Family::Ws => {
                if let Some(g) = &grads.read.w_s {
                    params.read.w_s.scaled_add(-lr, g);
                }
            }
            Family::We => {
                if let Some(g) = &grads.read.w_e {
                    params.read.w_e.scaled_add(-lr, g);
                }
            }
        }
    }
    Ok(())
}

/// If no gold passage is listed, the lowest-ranked entry is replaced by
/// the first gold passage.
pub fn inject_gold(list: &[usize], golds: &[usize]) -> Vec<usize> {
    let mut out = list.to_vec();
    if !golds.is_empty() && !out.iter().any(|i| golds.contains(i)) {
        match out.last_mut() {
            Some(last) => *last = golds[0],
            None => out.push(golds[0]),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverLoss {
    pub candidates: Vec<usize>,
    pub labels: Vec<f64>,
    pub probs: Vec<f64>,
    pub loss: f64,
    pub grad_v_q: Array1<f64>,
}

/// Retriever loss over the (gold-injected) list, with `dL/dv_q`.
pub fn retriever_loss(store: &EmbeddingStore, v_q: &Array1<f64>, list: &[usize], golds: &[usize]) -> RetrieverLoss {
    let candidates = inject_gold(list, golds);
    let logits: Vec<f64> = candidates.iter().map(|&i| store.inner_product(v_q, i)).collect();
    let labels: Vec<f64> = candidates.iter().map(|i| golds.contains(i) as u8 as f64).collect();
    let bce = softmax_bce(&logits, &labels);
    let mut grad_v_q = Array1::zeros(v_q.len());
    for (&i, &g) in candidates.iter().zip(&bce.grad_logits) {
        for (acc, &p) in grad_v_q.iter_mut().zip(store.vector(i)) {
            *acc += g * p as f64;
        }
    }
    RetrieverLoss {
        candidates,
        labels,
        probs: bce.probs,
        loss: bce.loss,
        grad_v_q,
    }
}

/// Explorer loss over every subgraph node. `None` when the subgraph holds
/// no gold passage.
pub fn explorer_loss(stage: &ExploreStage, params: &ModelParams, golds: &[usize]) -> Option<(f64, GatParams, Array1<f64>)> {
    let labels: Vec<f64> = stage.subgraph.nodes.iter().map(|n| golds.contains(n) as u8 as f64).collect();
    if !labels.iter().any(|&y| y > 0.0) {
        return None;
    }
    let bce = softmax_bce(&stage.explored.logits, &labels);
    let v_q = &stage.retrieval.first.vector;
    let v_star = &stage.gat.output;
    let mut d_out = ndarray::Array2::zeros(v_star.dim());
    let mut d_vq = Array1::zeros(v_q.len());
    for (i, &g) in bce.grad_logits.iter().enumerate() {
        d_out.row_mut(i).scaled_add(g, v_q);
        d_vq.scaled_add(g, &v_star.row(i));
    }
    let mut grads = params.gat.zeros_like();
    gat_backward(&stage.gat, &params.gat, &d_out, &mut grads);
    Some((bce.loss, grads, d_vq))
}

/// Start and end labels over the joint token population.
pub fn reader_labels(out: &TurnOutput, turn: &Turn, corpus: &Corpus) -> (Vec<f64>, Vec<f64>) {
    let n = out.reader.start.len();
    let mut y_s = vec![0.0; n];
    let mut y_e = vec![0.0; n];
    for (c, e) in out.encodings.iter().enumerate() {
        let seq = &e.sequence;
        for a in &turn.answers {
            if corpus.index_of(&a.passage_id) != Some(seq.passage_index) || a.span.1 > seq.passage_len {
                continue;
            }
            let off = out.reader.offsets[c] + seq.passage_start;
            y_s[off + a.span.0] = 1.0;
            y_e[off + a.span.1 - 1] = 1.0;
        }
    }
    (y_s, y_e)
}

/// Ranker and reader losses with their head gradients.
pub fn rank_read_loss(out: &TurnOutput, params: &ModelParams, turn: &Turn, corpus: &Corpus) -> (f64, f64, ReadGrads) {
    let golds = corpus.gold_indices(turn);
    let labels: Vec<f64> = out.explore.candidates.iter().map(|c| golds.contains(c) as u8 as f64).collect();
    let rank = softmax_bce(&out.rank_logits, &labels);
    let (y_s, y_e) = reader_labels(out, turn, corpus);
    let start = softmax_bce(&out.reader.start_logits, &y_s);
    let end = softmax_bce(&out.reader.end_logits, &y_e);
    let grads = read_backward(
        &params.read,
        &out.encodings,
        &out.reader.offsets,
        Some(&rank.grad_logits),
        Some(&start.grad_logits),
        Some(&end.grad_logits),
    );
    (rank.loss, start.loss + end.loss, grads)
}

/// Loss and gradient of one example for `phase` (not `Pretrain`).
/// `Ok(None)` marks a skipped example.
pub fn example_loss(engine: &Engine, ex: Example, phase: Phase) -> Result<Option<(LossBreakdown, ModelGrads)>> {
    let corpus = engine.corpus;
    let conv = &corpus.conversations()[ex.conv];
    let turn = &conv.turns[ex.turn];
    let golds = corpus.gold_indices(turn);
    if golds.is_empty() {
        return Ok(None);
    }
    let history = teacher_history(corpus, conv, ex.turn);
    let params = engine.params;
    let mut grads = ModelGrads::default();
    let mut loss = LossBreakdown::default();
    match phase {
        Phase::Pretrain => {
            return Err(Error::InvalidArgument("pretraining runs over batches, see `pretrain`".into()));
        }
        Phase::Joint => {
            let out = engine.answer_turn(&turn.question, &history)?;
            let first = &out.explore.retrieval.first;
            let r = retriever_loss(engine.store, &first.vector, &out.round1(), &golds);
            grads.w_q.add_outer(&r.grad_v_q, &first.features);
            let (l_rank, l_read, read) = rank_read_loss(&out, params, turn, corpus);
            grads.read = read;
            loss.retriever = r.loss;
            loss.ranker = l_rank;
            loss.reader = l_read;
        }
        Phase::Dhm => {
            let strings: Vec<String> = history.iter().map(|h| h.history_string()).collect();
            let mr = multi_round_retrieve(
                &params.encoder,
                &params.attention,
                engine.store,
                corpus,
                &turn.question,
                &strings,
                &engine.config.retrieval,
                engine.config.feedback_tokens,
            )?;
            let Some(last) = &mr.last else {
                return Ok(None);
            };
            let list: Vec<usize> = last.list.iter().map(|&(i, _)| i).collect();
            let r = retriever_loss(engine.store, &last.attention.v_q, &list, &golds);
            let vectors: Vec<Array1<f64>> = last.encodings.iter().map(|e| e.vector.clone()).collect();
            let (g_wa, g_u) = attend_history_backward(&vectors, &last.attention, &params.attention, &r.grad_v_q);
            for (enc, g) in last.encodings.iter().zip(&g_u) {
                grads.w_q.add_outer(g, &enc.features);
            }
            grads.w_a = Some(g_wa);
            loss.retriever = r.loss;
        }
        Phase::Explorer => {
            let stage = engine.explore_turn(&turn.question, &history)?;
            let Some((l, g_gat, d_vq)) = explorer_loss(&stage, params, &golds) else {
                return Ok(None);
            };
            grads.gat = Some(g_gat);
            grads.w_q.add_outer(&d_vq, &stage.retrieval.first.features);
            loss.explorer = l;
        }
    }
    let loss = loss.finish();
    if !loss.total.is_finite() {
        return Err(non_finite(params, &turn.qid, &loss));
    }
    Ok(Some((loss, grads)))
}

fn non_finite(params: &ModelParams, qid: &str, loss: &LossBreakdown) -> Error {
    let mut diagnostics = format!(
        "losses retriever={} explorer={} ranker={} reader={}; parameter norms:",
        loss.retriever, loss.explorer, loss.ranker, loss.reader
    );
    for (fam, n) in params.family_norms() {
        let _ = write!(diagnostics, " {}={n:.6e}", fam.name());
    }
    Error::NonFiniteLoss {
        question: qid.to_string(),
        diagnostics,
    }
}

/// Trains one phase (not `Pretrain`) over `examples`, updating `params`
/// in place. Same inputs and seed give the same log and parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_phase(
    params: &mut ModelParams,
    corpus: &Corpus,
    store: &EmbeddingStore,
    index: &crate::lexical::InvertedIndex,
    pipeline: &crate::config::PipelineConfig,
    examples: &[Example],
    phase: Phase,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if phase == Phase::Pretrain {
        return Err(Error::InvalidArgument("use `pretrain` for the pretraining phase".into()));
    }
    if !params.encoder.is_frozen() {
        return Err(Error::EncoderNotFrozen);
    }
    store.verify(&params.encoder)?;
    if cfg.grad_check {
        if let Some(&ex) = examples.first() {
            let entries = grad_check(params, corpus, store, index, pipeline, ex, phase, &GradCheckConfig::default())?;
            let worst = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
            if worst > 1e-4 {
                log::warn!("{} gradient check: max relative error {worst:.3e}", phase.name());
            } else {
                log::info!("{} gradient check: {} coordinates, max relative error {worst:.3e}", phase.name(), entries.len());
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ phase as u64);
    let mut order: Vec<Example> = examples.to_vec();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let (mut seen, mut skipped) = (0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<Option<(LossBreakdown, ModelGrads)>>> = {
                let engine = Engine {
                    corpus,
                    params,
                    store,
                    index,
                    config: pipeline,
                };
                batch.par_iter().map(|&ex| example_loss(&engine, ex, phase)).collect()
            };
            let mut grads = ModelGrads::default();
            let mut used = 0usize;
            for r in results {
                match r? {
                    Some((l, g)) => {
                        sum.add(&l);
                        grads.merge(&g);
                        used += 1;
                    }
                    None => skipped += 1,
                }
            }
            seen += used;
            if used > 0 {
                grads.scale(1.0 / used as f64);
                grads.clip(cfg.max_grad_norm);
                apply_gradients(params, &grads, cfg.lr, phase.families())?;
            }
        }
        let loss = if seen > 0 { sum.scaled(1.0 / seen as f64) } else { sum };
        log::info!("{} epoch {epoch}: loss {:.6} over {seen} examples ({skipped} skipped)", phase.name(), loss.total);
        log.push(EpochLog {
            phase,
            epoch,
            loss,
            examples: seen,
            skipped,
        });
    }
    Ok(log)
}


/// In-batch pretraining pair: first-round query features and a gold
/// passage.
#[derive(Debug, Clone)]
struct PretrainPair {
    features: SparseVec,
    passage: usize,
}

/// Tokens taken from the passage text for one pseudo-query.
pub const PSEUDO_QUERY_WINDOW: usize = 4;

/// Title plus a random window of the passage text, paired with the passage.
fn pseudo_pairs(corpus: &Corpus, params: &ModelParams, per_passage: usize, rng: &mut ChaCha8Rng) -> Vec<PretrainPair> {
    use rand::Rng;
    let mut out = Vec::with_capacity(corpus.len() * per_passage);
    for (i, p) in corpus.passages().iter().enumerate() {
        for _ in 0..per_passage {
            let w = PSEUDO_QUERY_WINDOW.min(p.tokens.len());
            let start = rng.gen_range(0..=p.tokens.len() - w);
            let text = format!("{} {}", p.title, p.tokens[start..start + w].join(" "));
            out.push(PretrainPair {
                features: params.encoder.featurizer.features(&crate::dense::Featurizer::normalize(&text)),
                passage: i,
            });
        }
    }
    out
}

fn pretrain_pairs(corpus: &Corpus, params: &ModelParams, examples: &[Example]) -> Vec<PretrainPair> {
    examples
        .iter()
        .filter_map(|ex| {
            let conv = &corpus.conversations()[ex.conv];
            let turn = &conv.turns[ex.turn];
            let passage = *corpus.gold_indices(turn).first()?;
            let history: Vec<String> = conv.turns[..ex.turn].iter().map(|t| t.question.clone()).collect();
            let enc = params.encoder.encode_question_first_round(&turn.question, &history).ok()?;
            Some(PretrainPair {
                features: enc.features,
                passage,
            })
        })
        .collect()
}

/// Splits `order` into batches of at most `size` with no passage twice in
/// a batch. Conflicting pairs move to a later batch.
fn unique_passage_batches(order: &[usize], pairs: &[PretrainPair], size: usize) -> Vec<Vec<usize>> {
    let mut pending: std::collections::VecDeque<usize> = order.iter().copied().collect();
    let mut batches = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(size);
        let mut used = BTreeSet::new();
        let mut deferred = std::collections::VecDeque::new();
        while let Some(i) = pending.pop_front() {
            if batch.len() == size {
                deferred.push_back(i);
                continue;
            }
            if used.insert(pairs[i].passage) {
                batch.push(i);
            } else {
                deferred.push_back(i);
            }
        }
        pending = deferred;
        batches.push(batch);
    }
    batches
}

/// Loss and `(W_q, W_p)` gradients of one in-batch step (summed over the
/// batch).
fn in_batch_step(params: &ModelParams, corpus: &Corpus, pairs: &[&PretrainPair]) -> (f64, RowGrad, RowGrad) {
    let enc = &params.encoder;
    let queries: Vec<Array1<f64>> = pairs.iter().map(|p| enc.w_q.apply(&p.features)).collect();
    let p_feats: Vec<SparseVec> = pairs.iter().map(|p| enc.passage_features(corpus.passage(p.passage))).collect();
    let passages: Vec<Array1<f64>> = p_feats.iter().map(|f| enc.w_p().apply(f)).collect();
    let n = pairs.len();
    let mut d_q = vec![Array1::zeros(enc.dim()); n];
    let mut d_p = vec![Array1::zeros(enc.dim()); n];
    let mut loss = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = passages.iter().map(|p| queries[i].dot(p)).collect();
        let labels: Vec<f64> = (0..n).map(|j| (i == j) as u8 as f64).collect();
        let bce = softmax_bce(&logits, &labels);
        loss += bce.loss;
        for (j, &g) in bce.grad_logits.iter().enumerate() {
            d_q[i].scaled_add(g, &passages[j]);
            d_p[j].scaled_add(g, &queries[i]);
        }
    }
    let mut g_q = RowGrad::default();
    let mut g_p = RowGrad::default();
    for i in 0..n {
        g_q.add_outer(&d_q[i], &pairs[i].features);
        g_p.add_outer(&d_p[i], &p_feats[i]);
    }
    (loss, g_q, g_p)
}

/// Dense pretraining of `W_q` and `W_p` with in-batch negatives, then
/// freezes `W_p` and builds the embedding store.
pub fn pretrain(
    params: &mut ModelParams,
    corpus: &Corpus,
    examples: &[Example],
    cfg: &TrainConfig,
) -> Result<(Vec<EpochLog>, EmbeddingStore)> {
    cfg.validate()?;
    if params.encoder.is_frozen() {
        return Err(Error::EncoderFrozen);
    }
    let questions = pretrain_pairs(corpus, params, examples);
    let skipped = examples.len() - questions.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut pairs = questions.clone();
        pairs.extend(pseudo_pairs(corpus, params, cfg.pseudo_queries, &mut rng));
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in unique_passage_batches(&order, &pairs, cfg.batch_size) {
            let refs: Vec<&PretrainPair> = batch.iter().map(|&i| &pairs[i]).collect();
            let (loss, g_q, g_p) = in_batch_step(params, corpus, &refs);
            if !loss.is_finite() {
                let l = LossBreakdown {
                    retriever: loss,
                    ..Default::default()
                };
                return Err(non_finite(params, "<pretraining batch>", &l.finish()));
            }
            total += loss;
            let mut grads = ModelGrads {
                w_q: g_q,
                w_p: g_p,
                ..Default::default()
            };
            grads.scale(1.0 / refs.len() as f64);
            grads.clip(cfg.max_grad_norm);
            params.encoder.w_q.descend(&grads.w_q, cfg.lr);
            params.encoder.w_p_mut()?.descend(&grads.w_p, cfg.lr);
        }
        let mean = if pairs.is_empty() { 0.0 } else { total / pairs.len() as f64 };
        log::info!("pretrain epoch {epoch}: loss {mean:.6} over {} pairs", pairs.len());
        log.push(EpochLog {
            phase: Phase::Pretrain,
            epoch,
            loss: LossBreakdown {
                retriever: mean,
                ..Default::default()
            }
            .finish(),
            examples: pairs.len(),
            skipped,
        });
    }
    params.encoder.freeze();
    let store = EmbeddingStore::build(corpus, &params.encoder)?;
    Ok((log, store))
}

/// Families whose gradient a phase's loss produces.
pub fn loss_families(phase: Phase) -> &'static [Family] {
    match phase {
        Phase::Pretrain => &[Family::Wq, Family::Wp],
        Phase::Joint => &[Family::Wq, Family::Wt, Family::Wra, Family::Ws, Family::We],
        Phase::Dhm => &[Family::Wa, Family::Wq],
        Phase::Explorer => &[Family::Gat, Family::Wq],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub family: Family,
    pub block: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates checked per block; larger blocks are sampled, always
    /// including the largest analytic entries.
    pub max_per_block: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_per_block: 64,
            seed: 0,
        }
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn nudge(params: &mut ModelParams, block: usize, coord: usize, delta: f64) {
    let mut b = 0;
    params.for_each_block_mut(|_, values| {
        if b == block {
            values[coord] += delta;
        }
        b += 1;
    });
}

/// Central differences of `example_loss` against its analytic gradient,
/// over the families [`loss_families`] names. The store is held fixed.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    params: &ModelParams,
    corpus: &Corpus,
    store: &EmbeddingStore,
    index: &crate::lexical::InvertedIndex,
    pipeline: &crate::config::PipelineConfig,
    ex: Example,
    phase: Phase,
    check: &GradCheckConfig,
) -> Result<Vec<GradCheckEntry>> {
    let loss_at = |p: &ModelParams| -> Result<f64> {
        let engine = Engine {
            corpus,
            params: p,
            store,
            index,
            config: pipeline,
        };
        Ok(example_loss(&engine, ex, phase)?.map_or(0.0, |(l, _)| l.total))
    };
    let engine = Engine {
        corpus,
        params,
        store,
        index,
        config: pipeline,
    };
    let Some((_, grads)) = example_loss(&engine, ex, phase)? else {
        return Ok(Vec::new());
    };
    let dense = grads.dense_blocks(params);
    let wanted = loss_families(phase);
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed);
    let mut work = params.clone();
    let mut out = Vec::new();
    for (block, (family, g)) in dense.iter().enumerate() {
        if !wanted.contains(family) {
            continue;
        }
        let coords: Vec<usize> = if g.len() <= check.max_per_block {
            (0..g.len()).collect()
        } else {
            let mut by_mag: Vec<usize> = (0..g.len()).collect();
            by_mag.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
            let mut chosen: BTreeSet<usize> = by_mag[..check.max_per_block / 2].iter().copied().collect();
            let mut rest: Vec<usize> = (0..g.len()).filter(|i| !chosen.contains(i)).collect();
            rest.shuffle(&mut rng);
            chosen.extend(rest.into_iter().take(check.max_per_block - chosen.len()));
            chosen.into_iter().collect()
        };
        for coord in coords {
            nudge(&mut work, block, coord, check.eps);
            let plus = loss_at(&work)?;
            nudge(&mut work, block, coord, -2.0 * check.eps);
            let minus = loss_at(&work)?;
            nudge(&mut work, block, coord, check.eps);
            let numeric = (plus - minus) / (2.0 * check.eps);
            out.push(GradCheckEntry {
                family: *family,
                block,
                coord,
                analytic: g[coord],
                numeric,
                rel_err: relative_error(g[coord], numeric),
            });
        }
    }
    Ok(out)
}

/// Per-phase settings of the full schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub pretrain: TrainConfig,
    pub joint: TrainConfig,
    pub dhm: TrainConfig,
    pub explorer: TrainConfig,
}

/// Tuned on the 500-passage fixtures. Plain [`TrainConfig::default`] learns
/// almost nothing at this scale.
impl Default for ScheduleConfig {
    fn default() -> Self {
        let phase = |lr, epochs| TrainConfig {
            lr,
            epochs,
            max_grad_norm: Some(3.0),
            ..TrainConfig::default()
        };
        Self {
            pretrain: phase(5.0, 20),
            joint: phase(1.0, 10),
            dhm: phase(1.0, 10),
            explorer: phase(0.2, 10),
        }
    }
}

impl ScheduleConfig {
    pub fn phase(&self, phase: Phase) -> &TrainConfig {
        match phase {
            Phase::Pretrain => &self.pretrain,
            Phase::Joint => &self.joint,
            Phase::Dhm => &self.dhm,
            Phase::Explorer => &self.explorer,
        }
    }

    pub fn phase_mut(&mut self, phase: Phase) -> &mut TrainConfig {
        match phase {
            Phase::Pretrain => &mut self.pretrain,
            Phase::Joint => &mut self.joint,
            Phase::Dhm => &mut self.dhm,
            Phase::Explorer => &mut self.explorer,
        }
    }
}

/// Every phase in order. Returns the concatenated loss log and the store
/// built after pretraining.
pub fn run_schedule(
    params: &mut ModelParams,
    corpus: &Corpus,
    index: &crate::lexical::InvertedIndex,
    pipeline: &crate::config::PipelineConfig,
    examples: &[Example],
    schedule: &ScheduleConfig,
) -> Result<(Vec<EpochLog>, EmbeddingStore)> {
    let (mut log, store) = pretrain(params, corpus, examples, &schedule.pretrain)?;
    for phase in [Phase::Joint, Phase::Dhm, Phase::Explorer] {
        log.extend(train_phase(params, corpus, &store, index, pipeline, examples, phase, schedule.phase(phase))?);
    }
    Ok((log, store))
}
