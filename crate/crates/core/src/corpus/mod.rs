//! Passage collection, hyperlink graph and conversational QA data.
//!
//! Passages are kept sorted by id; every other module addresses a passage by
//! its position in that order (its *index*), so "ascending passage id" and
//! "ascending index" are the same tie-break everywhere.

mod fixture;
mod tokenize;

pub use fixture::{generate_fixture, ConversationStyle, FixtureFiles, FixtureManifest, PlantSpec, TurnPlan};
pub use tokenize::{is_sentinel, normalize_answer, tokenize, tokenize_with_sentinels, CLS, SEP};

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version written into the persisted store manifest.
pub const STORE_FORMAT_VERSION: u32 = 1;

/// One line of `passages.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
    #[serde(default)]
    pub out_links: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
    /// `tokenize(text)`.
    pub tokens: Vec<String>,
    /// Out-links that resolve to passages of the collection.
    pub out_links: Vec<String>,
}

impl Passage {
    /// Text fed to the passage encoder: title and body.
    pub fn encoder_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

/// Undirected closure of the out-links, indexed by passage index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HyperlinkGraph {
    adjacency: Vec<Vec<usize>>,
}

impl HyperlinkGraph {
    /// Builds a symmetric, self-loop free graph from undirected index pairs.
    pub fn from_edges(n_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut sets = vec![BTreeSet::new(); n_nodes];
        for (a, b) in edges {
            if a != b {
                sets[a].insert(b);
                sets[b].insert(a);
            }
        }
        Self {
            adjacency: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Sorted neighbour indices.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    /// Breadth-first hop distances from a set of sources, up to `max_hops`
    /// (`None` = unbounded). Unreached nodes are absent.
    pub fn distances(&self, sources: &[usize], max_hops: Option<u32>) -> HashMap<usize, u32> {
        let mut dist = HashMap::new();
        let mut queue = VecDeque::new();
        for &s in sources {
            if dist.insert(s, 0).is_none() {
                queue.push_back(s);
            }
        }
        while let Some(node) = queue.pop_front() {
            let d = dist[&node];
            if max_hops.is_some_and(|m| d >= m) {
                continue;
            }
            for &nb in &self.adjacency[node] {
                if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(nb) {
                    e.insert(d + 1);
                    queue.push_back(nb);
                }
            }
        }
        dist
    }

    /// Hop distance between two sets, `None` if disconnected.
    pub fn distance(&self, from: &[usize], to: &[usize]) -> Option<u32> {
        let dist = self.distances(from, None);
        to.iter().filter_map(|t| dist.get(t).copied()).min()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub text: String,
    pub passage_id: String,
    /// Token interval `[start, end)` in the passage.
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub qid: String,
    pub question: String,
    pub answers: Vec<AnswerRecord>,
    pub human_f1: f64,
}

impl Turn {
    /// Gold passage ids, deduplicated, in first-seen order.
    pub fn gold_passages(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for a in &self.answers {
            if !out.contains(&a.passage_id.as_str()) {
                out.push(&a.passage_id);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub conv_id: String,
    pub turns: Vec<Turn>,
}

/// Wire form of one line of `conversations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub conv_id: String,
    pub turns: Vec<TurnRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub qid: String,
    pub question: String,
    pub answers: Vec<AnswerWire>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerWire {
    pub text: String,
    pub passage_id: String,
    pub span: [usize; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageStats {
    pub passages: usize,
    pub edges: usize,
    pub dangling_links: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConversationStats {
    pub accepted: usize,
    /// One diagnostic line per rejected record.
    pub rejected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreManifest {
    format_version: u32,
    passages: usize,
    edges: usize,
    dangling_links: usize,
    conversations: usize,
}

/// The ingested collection: passages, graph and conversations.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    passages: Vec<Passage>,
    index_of: HashMap<String, usize>,
    graph: HyperlinkGraph,
    conversations: Vec<Conversation>,
    dangling_links: usize,
}

impl Corpus {
    /// Builds the passage store and graph. Out-links to unknown ids are
    /// dropped and counted.
    pub fn from_passages(records: Vec<PassageRecord>) -> Result<(Self, PassageStats)> {
        let mut by_id: BTreeMap<String, PassageRecord> = BTreeMap::new();
        for rec in records {
            if rec.id.is_empty() {
                return Err(Error::InvalidArgument("passage id must be nonempty".into()));
            }
            if by_id.contains_key(&rec.id) {
                return Err(Error::DuplicatePassage(rec.id));
            }
            by_id.insert(rec.id.clone(), rec);
        }
        let index_of: HashMap<String, usize> = by_id
            .keys()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();

        let mut dangling = 0usize;
        let mut edges = Vec::new();
        let mut passages = Vec::with_capacity(by_id.len());
        for (i, rec) in by_id.into_values().enumerate() {
            let mut links = Vec::with_capacity(rec.out_links.len());
            for link in rec.out_links {
                match index_of.get(&link) {
                    Some(&j) => {
                        edges.push((i, j));
                        links.push(link);
                    }
                    None => dangling += 1,
                }
            }
            passages.push(Passage {
                tokens: tokenize(&rec.text),
                id: rec.id,
                title: rec.title,
                text: rec.text,
                out_links: links,
            });
        }
        if dangling > 0 {
            log::warn!("dropped {dangling} dangling out-links");
        }
        let graph = HyperlinkGraph::from_edges(passages.len(), edges);
        let stats = PassageStats {
            passages: passages.len(),
            edges: graph.edge_count(),
            dangling_links: dangling,
        };
        Ok((
            Self {
                passages,
                index_of,
                graph,
                conversations: Vec::new(),
                dangling_links: dangling,
            },
            stats,
        ))
    }

    /// Reads `passages.jsonl`. Blank lines are skipped.
    pub fn ingest_passages(path: &Path) -> Result<(Self, PassageStats)> {
        let records = read_jsonl::<PassageRecord>(path)?;
        Self::from_passages(records)
    }

    /// Reads `conversations.jsonl`, validating every answer record against
    /// the ingested passages. Invalid conversations are rejected with one
    /// diagnostic each; malformed JSON aborts with the line number.
    pub fn ingest_conversations(&mut self, path: &Path) -> Result<ConversationStats> {
        let records = read_jsonl::<ConversationRecord>(path)?;
        Ok(self.add_conversations(records))
    }

    pub fn add_conversations(&mut self, records: Vec<ConversationRecord>) -> ConversationStats {
        let mut stats = ConversationStats::default();
        for rec in records {
            if self.conversations.iter().any(|c| c.conv_id == rec.conv_id) {
                stats
                    .rejected
                    .push(format!("conversation `{}`: duplicate conv_id", rec.conv_id));
                continue;
            }
            match self.validate_conversation(rec) {
                Ok(conv) => {
                    self.conversations.push(conv);
                    stats.accepted += 1;
                }
                Err(msg) => stats.rejected.push(msg),
            }
        }
        for msg in &stats.rejected {
            log::warn!("rejected {msg}");
        }
        stats
    }

    fn validate_conversation(&self, rec: ConversationRecord) -> std::result::Result<Conversation, String> {
        let conv_id = rec.conv_id;
        if rec.turns.is_empty() {
            return Err(format!("conversation `{conv_id}`: no turns"));
        }
        let mut problems = Vec::new();
        let mut turns = Vec::with_capacity(rec.turns.len());
        for turn in rec.turns {
            let qid = turn.qid.clone();
            if turn.answers.is_empty() {
                problems.push(format!("turn `{qid}`: no answer records"));
            }
            let human_f1 = match turn.human_f1 {
                Some(h) if (0.0..=1.0).contains(&h) => h,
                Some(h) => {
                    problems.push(format!("turn `{qid}`: human_f1 {h} outside [0, 1]"));
                    0.0
                }
                None => {
                    problems.push(format!("turn `{qid}`: missing human_f1"));
                    0.0
                }
            };
            let mut answers = Vec::with_capacity(turn.answers.len());
            for a in turn.answers {
                let record = AnswerRecord {
                    text: a.text,
                    passage_id: a.passage_id,
                    span: (a.span[0], a.span[1]),
                };
                if let Err(e) = self.check_answer(&record) {
                    problems.push(format!("turn `{qid}`: {e}"));
                }
                answers.push(record);
            }
            turns.push(Turn {
                qid,
                question: turn.question,
                answers,
                human_f1,
            });
        }
        if problems.is_empty() {
            Ok(Conversation { conv_id, turns })
        } else {
            Err(format!("conversation `{conv_id}`: {}", problems.join("; ")))
        }
    }

    /// Checks the span invariants of one answer record.
    pub fn check_answer(&self, a: &AnswerRecord) -> std::result::Result<(), String> {
        let passage = self
            .passage_by_id(&a.passage_id)
            .ok_or_else(|| format!("unknown passage_id `{}`", a.passage_id))?;
        let (start, end) = a.span;
        if start >= end {
            return Err(format!("empty span [{start}, {end})"));
        }
        if end > passage.tokens.len() {
            return Err(format!(
                "span [{start}, {end}) out of range for passage `{}` with {} tokens",
                passage.id,
                passage.tokens.len()
            ));
        }
        let span_text = passage.tokens[start..end].join(" ");
        let expected = normalize_answer(&a.text);
        if span_text != expected {
            return Err(format!(
                "span text mismatch: passage tokens \"{span_text}\" vs answer \"{expected}\""
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn passage(&self, index: usize) -> &Passage {
        &self.passages[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index_of.get(id).copied()
    }

    pub fn passage_by_id(&self, id: &str) -> Option<&Passage> {
        self.index_of(id).map(|i| &self.passages[i])
    }

    pub fn graph(&self) -> &HyperlinkGraph {
        &self.graph
    }

    pub fn conversations(&self) -> &[Conversation] {
        &self.conversations
    }

    pub fn dangling_links(&self) -> usize {
        self.dangling_links
    }

    /// Gold passage indices of a turn.
    pub fn gold_indices(&self, turn: &Turn) -> Vec<usize> {
        turn.gold_passages()
            .into_iter()
            .filter_map(|id| self.index_of(id))
            .collect()
    }

    /// Adjacency keyed by passage id, the persisted graph form.
    pub fn adjacency_by_id(&self) -> BTreeMap<String, Vec<String>> {
        (0..self.len())
            .map(|i| {
                (
                    self.passages[i].id.clone(),
                    self.graph
                        .neighbors(i)
                        .iter()
                        .map(|&j| self.passages[j].id.clone())
                        .collect(),
                )
            })
            .collect()
    }

    /// Persists the store as a directory: `manifest.json`, `passages.jsonl`,
    /// `graph.json`, `conversations.jsonl`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = StoreManifest {
            format_version: STORE_FORMAT_VERSION,
            passages: self.len(),
            edges: self.graph.edge_count(),
            dangling_links: self.dangling_links,
            conversations: self.conversations.len(),
        };
        write_file(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;

        let mut buf = Vec::new();
        for p in &self.passages {
            let rec = PassageRecord {
                id: p.id.clone(),
                title: p.title.clone(),
                text: p.text.clone(),
                out_links: p.out_links.clone(),
            };
            serde_json::to_writer(&mut buf, &rec)?;
            buf.push(b'\n');
        }
        write_file(&dir.join("passages.jsonl"), &buf)?;
        write_file(&dir.join("graph.json"), serde_json::to_string(&self.adjacency_by_id())?.as_bytes())?;

        let mut buf = Vec::new();
        for c in &self.conversations {
            serde_json::to_writer(&mut buf, &conversation_to_record(c))?;
            buf.push(b'\n');
        }
        write_file(&dir.join("conversations.jsonl"), &buf)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let raw = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: StoreManifest = serde_json::from_str(&raw)?;
        if manifest.format_version != STORE_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "corpus store version {} (expected {STORE_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let (mut corpus, stats) = Self::ingest_passages(&dir.join("passages.jsonl"))?;
        corpus.dangling_links = manifest.dangling_links;
        if stats.passages != manifest.passages || stats.edges != manifest.edges {
            return Err(Error::Format("corpus store manifest does not match passages".into()));
        }
        let conv = corpus.ingest_conversations(&dir.join("conversations.jsonl"))?;
        if !conv.rejected.is_empty() || conv.accepted != manifest.conversations {
            return Err(Error::Format("corpus store conversations failed validation".into()));
        }
        Ok(corpus)
    }
}

pub fn conversation_to_record(c: &Conversation) -> ConversationRecord {
    ConversationRecord {
        conv_id: c.conv_id.clone(),
        turns: c
            .turns
            .iter()
            .map(|t| TurnRecord {
                qid: t.qid.clone(),
                question: t.question.clone(),
                answers: t
                    .answers
                    .iter()
                    .map(|a| AnswerWire {
                        text: a.text.clone(),
                        passage_id: a.passage_id.clone(),
                        span: [a.span.0, a.span.1],
                    })
                    .collect(),
                human_f1: Some(t.human_f1),
            })
            .collect(),
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Reads one JSON value per non-blank line, reporting 1-based line numbers.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}
