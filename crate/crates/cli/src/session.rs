//! Conversation state of an interactive `ask` session.

use std::fmt::Write as _;

use convqa::config::PipelineConfig;
use convqa::pipeline::{Engine, HistoryTurn, TurnOutput};
use convqa::rank_read::Answer;

/// Questions asked so far with the pipeline's own answers. Turn `k` sees
/// exactly `k - 1` history entries, built as in the predicted-answer
/// setting: the question alone, seeded by the predicted answer passage.
#[derive(Debug, Clone)]
pub struct Session {
    pub turns: Vec<(String, Answer)>,
    history: Vec<HistoryTurn>,
    pub config: PipelineConfig,
    pub trace: bool,
}

impl Session {
    pub fn new(config: PipelineConfig, trace: bool) -> Self {
        Self {
            turns: Vec::new(),
            history: Vec::new(),
            config,
            trace,
        }
    }

    pub fn history(&self) -> &[HistoryTurn] {
        &self.history
    }

    pub fn reset(&mut self) {
        self.turns.clear();
        self.history.clear();
    }

    pub fn ask(&mut self, engine: &Engine, question: &str) -> convqa::Result<TurnOutput> {
        let out = engine.answer_turn(question, &self.history)?;
        self.history.push(HistoryTurn {
            question: question.to_string(),
            answer_text: None,
            answer_passages: out.answer_passages(),
        });
        self.turns.push((question.to_string(), out.answer.clone()));
        Ok(out)
    }
}

/// Answer text, source passage and the four score components.
pub fn render_answer(out: &TurnOutput) -> String {
    match &out.answer {
        Answer::Span(c) => format!(
            "answer: {}\npassage: {}\nscores: s_a={:.6} s_b={:.6} s_s={:.6} s_e={:.6} total={:.6}\n",
            c.text, c.passage_id, c.s_a, c.s_b, c.s_s, c.s_e, c.total
        ),
        Answer::Abstain => "answer: (no valid span)\n".to_string(),
    }
}

/// Retrieval rounds and explorer candidates of one turn.
pub fn render_trace(engine: &Engine, out: &TurnOutput) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "q*: {}", out.explore.q_star());
    for r in out.trace() {
        let _ = writeln!(s, "round {}: {}", r.round, r.passages.join(" "));
        if !r.weights.is_empty() {
            let w: Vec<String> = r.weights.iter().map(|w| format!("{w:.4}")).collect();
            let _ = writeln!(s, "  attention: {}", w.join(" "));
        }
    }
    let _ = writeln!(s, "subgraph: {} nodes", out.explore.subgraph.len());
    let ids: Vec<&str> = out.explorer().iter().map(|&i| engine.corpus.passage(i).id.as_str()).collect();
    let _ = writeln!(s, "explorer: {}", ids.join(" "));
    let ranked: Vec<&str> = out.ranker().iter().map(|&i| engine.corpus.passage(i).id.as_str()).collect();
    let _ = writeln!(s, "ranker: {}", ranked.join(" "));
    s
}
