//! One conversation turn through every stage, and whole conversations in
//! either history setting.

use ndarray::Array2;
use serde::Serialize;

use crate::config::{PipelineConfig, Setting};
use crate::corpus::{tokenize, Conversation, Corpus, Passage, SEP};
use crate::dense::EmbeddingStore;
use crate::dhm::{multi_round_retrieve, MultiRound, RoundTrace};
use crate::error::Result;
use crate::explorer::{expand, gat_forward, node_matrix, score_and_select, Explored, GatForward, SeedSet, SubGraph};
use crate::lexical::InvertedIndex;
use crate::model::ModelParams;
use crate::rank_read::{encode_candidates, extract_answer, ranker_scores, reader_scores, Answer, JointEncoding, ReaderScores, SpanRules};

/// What an earlier turn contributes to the current one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryTurn {
    pub question: String,
    /// Answer text appended to the history question, when visible.
    pub answer_text: Option<String>,
    /// Passages holding that turn's answers; they seed the explorer.
    pub answer_passages: Vec<usize>,
}

impl HistoryTurn {
    pub fn history_string(&self) -> String {
        match &self.answer_text {
            Some(a) if !a.is_empty() => format!("{} {SEP} {a}", self.question),
            _ => self.question.clone(),
        }
    }
}

/// Read-only view of everything inference needs.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    pub corpus: &'a Corpus,
    pub params: &'a ModelParams,
    pub store: &'a EmbeddingStore,
    pub index: &'a InvertedIndex,
    pub config: &'a PipelineConfig,
}

/// Retrieval and explorer intermediates of one turn.
#[derive(Debug, Clone)]
pub struct ExploreStage {
    pub history: Vec<String>,
    pub retrieval: MultiRound,
    pub tfidf: Vec<(usize, f64)>,
    pub seed: SeedSet,
    pub subgraph: SubGraph,
    pub node_inputs: Array2<f64>,
    pub gat: GatForward,
    pub explored: Explored,
    /// Corpus indices of the explorer's selection, best first.
    pub candidates: Vec<usize>,
}

impl ExploreStage {
    pub fn round1(&self) -> Vec<usize> {
        self.retrieval.first_list.iter().map(|&(i, _)| i).collect()
    }

    pub fn retriever(&self) -> Vec<usize> {
        self.retrieval.final_list().iter().map(|&(i, _)| i).collect()
    }

    pub fn q_star(&self) -> &str {
        &self.retrieval.first.text
    }
}

/// Every intermediate of one turn; training reuses the caches.
#[derive(Debug, Clone)]
pub struct TurnOutput {
    pub explore: ExploreStage,
    pub encodings: Vec<JointEncoding>,
    pub rank_logits: Vec<f64>,
    pub rank_scores: Vec<f64>,
    pub reader: ReaderScores,
    pub answer: Answer,
}

impl TurnOutput {
    pub fn round1(&self) -> Vec<usize> {
        self.explore.round1()
    }

    pub fn retriever(&self) -> Vec<usize> {
        self.explore.retriever()
    }

    pub fn explorer(&self) -> &[usize] {
        &self.explore.candidates
    }

    /// Candidates reordered by `S_b`, ties by ascending index.
    pub fn ranker(&self) -> Vec<usize> {
        let cands = &self.explore.candidates;
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_by(|&a, &b| self.rank_scores[b].total_cmp(&self.rank_scores[a]).then(cands[a].cmp(&cands[b])));
        order.into_iter().map(|i| cands[i]).collect()
    }

    pub fn trace(&self) -> &[RoundTrace] {
        &self.explore.retrieval.trace
    }

    /// Answer passage used as history in the predicted-answer setting.
    pub fn answer_passages(&self) -> Vec<usize> {
        self.answer.candidate().map(|c| vec![c.passage_index]).unwrap_or_default()
    }
}

impl<'a> Engine<'a> {
    pub fn span_rules(&self) -> SpanRules {
        SpanRules {
            max_answer_len: self.config.max_answer_len,
            top_spans: self.config.top_spans,
        }
    }

    /// Retrieval rounds, seed set, expansion and GAT rescoring.
    pub fn explore_turn(&self, question: &str, history: &[HistoryTurn]) -> Result<ExploreStage> {
        let cfg = self.config;
        let p = self.params;
        let history_strings: Vec<String> = history.iter().map(HistoryTurn::history_string).collect();
        let retrieval = multi_round_retrieve(
            &p.encoder,
            &p.attention,
            self.store,
            self.corpus,
            question,
            &history_strings,
            &cfg.retrieval,
            cfg.feedback_tokens,
        )?;
        let tfidf = self.index.retrieve(&retrieval.first.text, cfg.tfidf_k);
        let seed = SeedSet::new(
            history.iter().flat_map(|h| h.answer_passages.iter().copied()),
            retrieval.final_list().iter().map(|&(i, _)| i),
            tfidf.iter().map(|&(i, _)| i),
        );
        let subgraph = expand(&seed, self.corpus.graph(), cfg.m, cfg.node_cap);
        let store = self.store;
        let node_inputs = node_matrix(&subgraph, self.corpus, store.dim(), |i| {
            (i < store.len()).then(|| store.vector_f64(i))
        })?;
        let gat = gat_forward(&subgraph, &node_inputs, &p.gat)?;
        let explored = score_and_select(&retrieval.first.vector, &subgraph, &gat.output, cfg.n_2)?;
        let candidates = explored.selected.iter().map(|&(l, _)| subgraph.nodes[l]).collect();
        Ok(ExploreStage {
            history: history_strings,
            retrieval,
            tfidf,
            seed,
            subgraph,
            node_inputs,
            gat,
            explored,
            candidates,
        })
    }

    /// Ranker, reader and answer selection over the explorer's candidates.
    pub fn read_turn(&self, explore: ExploreStage, question: &str, history: &[HistoryTurn]) -> Result<TurnOutput> {
        let p = self.params;
        let passages: Vec<(usize, &Passage)> = explore
            .candidates
            .iter()
            .map(|&i| (i, self.corpus.passage(i)))
            .collect();
        let encodings = encode_candidates(&p.read, explore.q_star(), &passages, self.config.max_seq);
        let (rank_logits, rank_scores) = ranker_scores(&p.read, &encodings)?;
        let reader = reader_scores(&p.read, &encodings);
        let mut questions: Vec<Vec<String>> = history.iter().map(|h| tokenize(&h.question)).collect();
        questions.push(tokenize(question));
        let ids: Vec<&str> = passages.iter().map(|(_, p)| p.id.as_str()).collect();
        let s_a: Vec<f64> = explore.explored.selected.iter().map(|&(_, s)| s).collect();
        let answer = extract_answer(&encodings, &ids, &s_a, &rank_scores, &reader, &questions, &self.span_rules());
        Ok(TurnOutput {
            explore,
            encodings,
            rank_logits,
            rank_scores,
            reader,
            answer,
        })
    }

    pub fn answer_turn(&self, question: &str, history: &[HistoryTurn]) -> Result<TurnOutput> {
        let explore = self.explore_turn(question, history)?;
        self.read_turn(explore, question, history)
    }

    /// Runs every turn in order. In the predicted setting each turn sees
    /// the pipeline's own earlier answers; in the true setting it sees the
    /// gold ones, with answer text in the history questions.
    pub fn run_conversation(&self, conv: &Conversation, setting: Setting) -> Result<Vec<TurnOutput>> {
        let mut history: Vec<HistoryTurn> = Vec::with_capacity(conv.turns.len());
        let mut outputs = Vec::with_capacity(conv.turns.len());
        for turn in &conv.turns {
            let out = self.answer_turn(&turn.question, &history)?;
            history.push(match setting {
                Setting::Pred => HistoryTurn {
                    question: turn.question.clone(),
                    answer_text: None,
                    answer_passages: out.answer_passages(),
                },
                Setting::True => HistoryTurn {
                    question: turn.question.clone(),
                    answer_text: turn.answers.first().map(|a| a.text.clone()),
                    answer_passages: self.corpus.gold_indices(turn),
                },
            });
            outputs.push(out);
        }
        Ok(outputs)
    }
}

/// History entries the training phases use for turn `k` (0-based): gold
/// answer passages, questions without answer text.
pub fn teacher_history(corpus: &Corpus, conv: &Conversation, k: usize) -> Vec<HistoryTurn> {
    conv.turns[..k]
        .iter()
        .map(|t| HistoryTurn {
            question: t.question.clone(),
            answer_text: None,
            answer_passages: corpus.gold_indices(t),
        })
        .collect()
}
