//! Answer and retrieval metrics, hop coverage, and run reports.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Setting;
use crate::corpus::{tokenize, Corpus};
use crate::error::{Error, Result};
use crate::pipeline::{Engine, TurnOutput};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Token-bag F1 against the best reference.
pub fn word_f1(prediction: &str, references: &[&str], strip_articles: bool) -> f64 {
    let norm = |s: &str| -> Vec<String> {
        tokenize(s)
            .into_iter()
            .filter(|t| !strip_articles || !ARTICLES.contains(&t.as_str()))
            .collect()
    };
    let pred = norm(prediction);
    references
        .iter()
        .map(|r| f1_tokens(&pred, &norm(r)))
        .fold(0.0, f64::max)
}

fn f1_tokens(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return (pred.is_empty() && gold.is_empty()) as u8 as f64;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// `(HEQ-Q, HEQ-D)` in percent. `dialogs[i]` names the dialog of question
/// `i`.
pub fn heq(f1: &[f64], human: &[f64], dialogs: &[usize]) -> Result<(f64, f64)> {
    if f1.len() != human.len() || f1.len() != dialogs.len() {
        return Err(Error::InvalidArgument("heq inputs differ in length".into()));
    }
    if f1.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut passed = 0usize;
    let mut per_dialog: std::collections::BTreeMap<usize, bool> = Default::default();
    for i in 0..f1.len() {
        let ok = f1[i] >= human[i];
        passed += ok as usize;
        let d = per_dialog.entry(dialogs[i]).or_insert(true);
        *d &= ok;
    }
    let q = 100.0 * passed as f64 / f1.len() as f64;
    let d = 100.0 * per_dialog.values().filter(|&&ok| ok).count() as f64 / per_dialog.len() as f64;
    Ok((q, d))
}

/// `(MRR, Recall@k)` over whole lists.
pub fn mrr_and_recall(lists: &[Vec<usize>], golds: &[Vec<usize>], k: usize) -> Result<(f64, f64)> {
    if k < 1 {
        return Err(Error::InvalidArgument("recall cutoff k must be at least 1".into()));
    }
    if lists.len() != golds.len() {
        return Err(Error::InvalidArgument("ranked lists and gold sets differ in length".into()));
    }
    if lists.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut rr = 0.0;
    let mut hits = 0usize;
    for (list, gold) in lists.iter().zip(golds) {
        if let Some(pos) = list.iter().position(|p| gold.contains(p)) {
            rr += 1.0 / (pos + 1) as f64;
            hits += (pos < k) as usize;
        }
    }
    let n = lists.len() as f64;
    Ok((rr / n, hits as f64 / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopCoverage {
    pub max_hops: u32,
    /// Non-first turns with a gold passage on both sides.
    pub evaluated: usize,
    /// `within[h - 1]`: cumulative fraction within `h` hops.
    pub within: Vec<f64>,
    /// Farther than `max_hops` or disconnected.
    pub unreachable: usize,
}

impl HopCoverage {
    pub fn at(&self, hops: u32) -> f64 {
        match hops {
            0 => 0.0,
            h => self.within[(h.min(self.max_hops) - 1) as usize],
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("hop coverage over {} turns\n", self.evaluated);
        for (h, f) in self.within.iter().enumerate() {
            let _ = writeln!(out, "  within {} hop(s): {:.4}", h + 1, f);
        }
        let _ = writeln!(out, "  unreachable: {}", self.unreachable);
        out
    }
}

/// BFS distance from each turn's predecessor golds to its own golds.
pub fn hop_coverage(corpus: &Corpus, max_hops: u32) -> Result<HopCoverage> {
    if max_hops < 1 {
        return Err(Error::InvalidArgument("max_hops must be at least 1".into()));
    }
    let mut counts = vec![0usize; max_hops as usize];
    let mut evaluated = 0usize;
    let mut unreachable = 0usize;
    for conv in corpus.conversations() {
        for pair in conv.turns.windows(2) {
            let prev = corpus.gold_indices(&pair[0]);
            let cur = corpus.gold_indices(&pair[1]);
            if prev.is_empty() || cur.is_empty() {
                continue;
            }
            evaluated += 1;
            let dist = corpus.graph().distances(&prev, Some(max_hops));
            match cur.iter().filter_map(|c| dist.get(c)).min() {
                Some(&d) => {
                    for slot in counts.iter_mut().skip(d.max(1) as usize - 1) {
                        *slot += 1;
                    }
                }
                None => unreachable += 1,
            }
        }
    }
    let within = counts
        .iter()
        .map(|&c| if evaluated == 0 { 0.0 } else { c as f64 / evaluated as f64 })
        .collect();
    Ok(HopCoverage {
        max_hops,
        evaluated,
        within,
        unreachable,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: String,
    pub k: usize,
    pub recall: f64,
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub qid: String,
    pub conv_id: String,
    pub turn: usize,
    pub prediction: Option<String>,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub setting: Setting,
    pub questions: usize,
    pub dialogs: usize,
    /// Turns with no resolvable gold passage; excluded from stage metrics.
    pub without_gold: usize,
    pub stages: Vec<StageMetrics>,
    pub f1: f64,
    pub heq_q: f64,
    pub heq_d: f64,
    pub per_question: Vec<QuestionResult>,
}

impl RunReport {
    pub fn stage(&self, name: &str) -> Option<&StageMetrics> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Columns `Rt-R  Rt-M  Rr-M  H-Q  H-D  F1`, then every stage.
    pub fn to_text(&self) -> String {
        let get = |s: &str| self.stage(s).cloned();
        let (rt, rr) = (get("retriever"), get("ranker"));
        let mut out = format!(
            "setting: {}  questions: {}  dialogs: {}\n",
            self.setting.as_str(),
            self.questions,
            self.dialogs
        );
        let _ = writeln!(out, "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "Rt-R", "Rt-M", "Rr-M", "H-Q", "H-D", "F1");
        let _ = writeln!(
            out,
            "{:>8.4} {:>8.4} {:>8.4} {:>8.2} {:>8.2} {:>8.2}",
            rt.as_ref().map_or(0.0, |s| s.recall),
            rt.as_ref().map_or(0.0, |s| s.mrr),
            rr.as_ref().map_or(0.0, |s| s.mrr),
            self.heq_q,
            self.heq_d,
            self.f1
        );
        let _ = writeln!(out, "\n{:<10} {:>4} {:>8} {:>8}", "stage", "k", "recall", "mrr");
        for s in &self.stages {
            let _ = writeln!(out, "{:<10} {:>4} {:>8.4} {:>8.4}", s.stage, s.k, s.recall, s.mrr);
        }
        out
    }
}

/// Options that change scoring but not the pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub strip_articles: bool,
}

/// Runs every conversation in `setting` and returns the outputs per
/// conversation, in corpus order.
pub fn run_all(engine: &Engine, convs: &[usize], setting: Setting) -> Result<Vec<Vec<TurnOutput>>> {
    let conversations = engine.corpus.conversations();
    convs
        .par_iter()
        .map(|&c| engine.run_conversation(&conversations[c], setting))
        .collect()
}

pub fn report(engine: &Engine, convs: &[usize], outputs: &[Vec<TurnOutput>], setting: Setting, opts: EvalOptions) -> Result<RunReport> {
    let corpus = engine.corpus;
    let cfg = engine.config;
    let mut names_lists: [(&str, usize, Vec<Vec<usize>>); 4] = [
        ("round1", cfg.retrieval.n_1, Vec::new()),
        ("retriever", cfg.retrieval.n_1, Vec::new()),
        ("explorer", cfg.n_2, Vec::new()),
        ("ranker", cfg.n_2, Vec::new()),
    ];
    let mut golds = Vec::new();
    let mut f1s = Vec::new();
    let mut human = Vec::new();
    let mut dialogs = Vec::new();
    let mut per_question = Vec::new();
    let mut without_gold = 0usize;
    for (&c, outs) in convs.iter().zip(outputs) {
        let conv = &corpus.conversations()[c];
        for (t, (turn, out)) in conv.turns.iter().zip(outs).enumerate() {
            let refs: Vec<&str> = turn.answers.iter().map(|a| a.text.as_str()).collect();
            let prediction = out.answer.candidate().map(|c| c.text.clone());
            let f1 = if refs.is_empty() {
                prediction.is_none() as u8 as f64
            } else {
                word_f1(prediction.as_deref().unwrap_or(""), &refs, opts.strip_articles)
            };
            f1s.push(f1);
            human.push(turn.human_f1);
            dialogs.push(c);
            per_question.push(QuestionResult {
                qid: turn.qid.clone(),
                conv_id: conv.conv_id.clone(),
                turn: t + 1,
                prediction,
                f1,
            });
            let g = corpus.gold_indices(turn);
            if g.is_empty() {
                without_gold += 1;
                continue;
            }
            golds.push(g);
            names_lists[0].2.push(out.round1());
            names_lists[1].2.push(out.retriever());
            names_lists[2].2.push(out.explorer().to_vec());
            names_lists[3].2.push(out.ranker());
        }
    }
    let mut stages = Vec::new();
    for (name, k, lists) in &names_lists {
        let (mrr, recall) = mrr_and_recall(lists, &golds, *k)?;
        stages.push(StageMetrics {
            stage: name.to_string(),
            k: *k,
            recall,
            mrr,
        });
    }
    let (heq_q, heq_d) = heq(&f1s, &human, &dialogs)?;
    let f1 = if f1s.is_empty() { 0.0 } else { 100.0 * f1s.iter().sum::<f64>() / f1s.len() as f64 };
    Ok(RunReport {
        setting,
        questions: f1s.len(),
        dialogs: convs.len(),
        without_gold,
        stages,
        f1,
        heq_q,
        heq_d,
        per_question,
    })
}

pub fn evaluate(engine: &Engine, convs: &[usize], setting: Setting, opts: EvalOptions) -> Result<RunReport> {
    let outputs = run_all(engine, convs, setting)?;
    report(engine, convs, &outputs, setting, opts)
}
