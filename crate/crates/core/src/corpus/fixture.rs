//! Synthetic corpora with planted conversational locality.
//!
//! Every passage belongs to an entity and covers one aspect of it. Passages
//! of the same entity are linked to each other; on top of that every passage
//! draws `links_per_passage` random out-links. A conversation walks over gold
//! passages: a *planted* turn picks its gold within `hop_limit` hops of the
//! previous turn's gold, an unplanted turn picks one strictly farther away.
//!
//! Two question styles exist:
//!
//! * [`ConversationStyle::Hop`]: the first question names an entity and an
//!   aspect, later questions only name an aspect. The answer lives in a
//!   linked passage that the question text alone cannot single out.
//! * [`ConversationStyle::Topic`]: the first question names the entity, later
//!   questions ask for further aspects of the same entity without naming it.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_file, AnswerWire, ConversationRecord, HyperlinkGraph, PassageRecord, TurnRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConversationStyle {
    Hop,
    Topic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub style: ConversationStyle,
    /// Fraction of non-first turns whose gold lies within `hop_limit` hops.
    pub fraction: f64,
    pub hop_limit: u32,
    pub conversations: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    /// Random out-links drawn per passage (the edge budget).
    pub links_per_passage: usize,
    pub passages_per_entity: usize,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            style: ConversationStyle::Hop,
            fraction: 0.6,
            hop_limit: 2,
            conversations: 100,
            min_turns: 4,
            max_turns: 5,
            links_per_passage: 2,
            passages_per_entity: 1,
        }
    }
}

impl PlantSpec {
    pub fn topic() -> Self {
        Self {
            style: ConversationStyle::Topic,
            fraction: 1.0,
            hop_limit: 1,
            passages_per_entity: 5,
            links_per_passage: 1,
            ..Self::default()
        }
    }
}

/// Ground truth for one generated turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnPlan {
    pub conv_id: String,
    pub qid: String,
    /// 1-based turn number.
    pub turn: usize,
    pub gold: String,
    pub planted: bool,
    /// Hop distance from the previous turn's gold; `None` for the first turn
    /// and for unreachable golds.
    pub hop_distance: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub seed: u64,
    pub n_passages: usize,
    pub plant: PlantSpec,
    /// Distinct undirected edges in the generated link plan.
    pub planted_edges: usize,
    pub turns: Vec<TurnPlan>,
}

impl FixtureManifest {
    /// Fraction of non-first turns whose gold is within `hops` of the
    /// previous gold.
    pub fn fraction_within(&self, hops: u32) -> f64 {
        let later: Vec<&TurnPlan> = self.turns.iter().filter(|t| t.turn > 1).collect();
        if later.is_empty() {
            return 0.0;
        }
        let within = later
            .iter()
            .filter(|t| t.hop_distance.is_some_and(|d| d <= hops))
            .count();
        within as f64 / later.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureFiles {
    pub passages: Vec<PassageRecord>,
    pub conversations: Vec<ConversationRecord>,
    pub manifest: FixtureManifest,
}

impl FixtureFiles {
    pub fn passages_jsonl(&self) -> Result<String> {
        to_jsonl(&self.passages)
    }

    pub fn conversations_jsonl(&self) -> Result<String> {
        to_jsonl(&self.conversations)
    }

    /// Writes `passages.jsonl`, `conversations.jsonl` and `manifest.json`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("passages.jsonl"), self.passages_jsonl()?.as_bytes())?;
        write_file(&dir.join("conversations.jsonl"), self.conversations_jsonl()?.as_bytes())?;
        write_file(
            &dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)?.as_bytes(),
        )
    }
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

struct Aspect {
    keyword: &'static str,
    cue: &'static str,
    closer: &'static str,
}

const ASPECTS: &[Aspect] = &[
    Aspect { keyword: "career", cue: "worked as", closer: "professionally" },
    Aspect { keyword: "birth", cue: "born in", closer: "originally" },
    Aspect { keyword: "education", cue: "studied at", closer: "academically" },
    Aspect { keyword: "family", cue: "married to", closer: "happily" },
    Aspect { keyword: "awards", cue: "received the", closer: "honorably" },
    Aspect { keyword: "founding", cue: "founded the", closer: "initially" },
    Aspect { keyword: "music", cue: "recorded the", closer: "live" },
    Aspect { keyword: "travels", cue: "travelled to", closer: "abroad" },
    Aspect { keyword: "politics", cue: "elected to", closer: "officially" },
    Aspect { keyword: "sports", cue: "played for", closer: "competitively" },
    Aspect { keyword: "writing", cue: "wrote the", closer: "anonymously" },
    Aspect { keyword: "death", cue: "died in", closer: "peacefully" },
];

const FILLER: &[&str] = &[
    "city", "year", "later", "early", "during", "many", "people", "time", "known", "several",
    "also", "first", "group", "local", "small", "large", "new", "old", "part", "area", "state",
    "world", "life", "work", "number", "would", "could", "other", "some", "most", "more",
    "often", "public", "period", "region", "history", "member", "series", "number", "form",
    "major", "common", "general", "second", "third", "early", "recent", "north", "south",
    "east", "west", "river", "house", "school", "church", "field", "court", "market", "street",
    "company", "office", "report", "local", "season", "island", "village", "county", "century",
    "version", "term", "order", "level", "place", "point", "line", "case", "side", "story",
    "event", "result", "change", "system", "study", "idea", "body", "plan", "role", "board",
];

const FOLLOW_UP: &[&str] = &[
    "what about the {kw}",
    "and the {kw}",
    "anything on {kw}",
    "tell me more on the {kw}",
    "what is said of {kw}",
];

const SYLLABLE_ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "th", "sh"];
const SYLLABLE_VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

const NAME_ENDINGS: &[&str] = &["n", "r", "x", "l", "s"];
const ANSWER_ENDINGS: &[&str] = &["m", "k", "t", "d", "p", "f"];

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize, endings: &[&str], used: &mut HashSet<String>) -> String {
    loop {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(SYLLABLE_ONSETS.choose(rng).expect("nonempty"));
            w.push_str(SYLLABLE_VOWELS.choose(rng).expect("nonempty"));
        }
        w.push_str(endings.choose(rng).expect("nonempty"));
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn fill(rng: &mut ChaCha8Rng, n: usize) -> Vec<&'static str> {
    (0..n).map(|_| *FILLER.choose(rng).expect("nonempty")).collect()
}

struct PlannedPassage {
    entity: usize,
    aspect: usize,
    answer: Vec<String>,
    /// Token offset of the answer in the passage text.
    answer_start: usize,
}

/// Generates a corpus, conversations and the ground-truth manifest.
/// Deterministic for a fixed seed.
pub fn generate_fixture(seed: u64, n_passages: usize, plant: &PlantSpec) -> Result<FixtureFiles> {
    if n_passages < 10 {
        return Err(Error::InvalidArgument(format!("n_passages must be at least 10, got {n_passages}")));
    }
    if !(0.0..=1.0).contains(&plant.fraction) {
        return Err(Error::InvalidArgument(format!("plant fraction {} outside [0, 1]", plant.fraction)));
    }
    if plant.min_turns == 0 || plant.min_turns > plant.max_turns {
        return Err(Error::InvalidArgument("turn range must satisfy 1 <= min <= max".into()));
    }
    if plant.hop_limit == 0 {
        return Err(Error::InvalidArgument("hop_limit must be at least 1".into()));
    }
    let per_entity = plant.passages_per_entity.clamp(1, ASPECTS.len());
    if plant.fraction > 0.0 && plant.links_per_passage == 0 && per_entity == 1 {
        return Err(Error::InfeasiblePlant(
            "plant fraction > 0 but the link budget is zero; raise links_per_passage".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used_words: HashSet<String> = FILLER.iter().map(|s| s.to_string()).collect();
    for a in ASPECTS {
        used_words.insert(a.keyword.into());
        used_words.extend(a.cue.split(' ').map(String::from));
        used_words.insert(a.closer.into());
    }

    // Entities and their passages.
    let n_entities = n_passages.div_ceil(per_entity);
    let names: Vec<String> = (0..n_entities).map(|_| pseudo_word(&mut rng, 2, NAME_ENDINGS, &mut used_words)).collect();
    let mut planned = Vec::with_capacity(n_passages);
    let mut entity_passages: Vec<Vec<usize>> = vec![Vec::new(); n_entities];
    for e in 0..n_entities {
        let mut aspects: Vec<usize> = (0..ASPECTS.len()).collect();
        aspects.shuffle(&mut rng);
        for &aspect in aspects.iter().take(per_entity) {
            if planned.len() == n_passages {
                break;
            }
            let answer_len = rng.gen_range(1..=2);
            let answer = (0..answer_len).map(|_| pseudo_word(&mut rng, 2, ANSWER_ENDINGS, &mut used_words)).collect();
            entity_passages[e].push(planned.len());
            planned.push(PlannedPassage {
                entity: e,
                aspect,
                answer,
                answer_start: 0,
            });
        }
    }

    // Link plan: entity cliques plus random out-links.
    let width = (n_passages - 1).to_string().len().max(4);
    let ids: Vec<String> = (0..n_passages).map(|i| format!("p{i:0width$}")).collect();
    let mut out_links: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_passages];
    for members in &entity_passages {
        for &a in members {
            for &b in members {
                if a != b {
                    out_links[a].insert(b);
                }
            }
        }
    }
    for (i, links) in out_links.iter_mut().enumerate() {
        let mut added = 0;
        let mut attempts = 0;
        while added < plant.links_per_passage && attempts < 64 * (plant.links_per_passage + 1) {
            attempts += 1;
            let j = rng.gen_range(0..n_passages);
            if j != i && links.insert(j) {
                added += 1;
            }
        }
    }
    let graph = HyperlinkGraph::from_edges(
        n_passages,
        out_links
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.iter().map(move |&j| (i, j))),
    );

    // Passage texts.
    let mut passages = Vec::with_capacity(n_passages);
    for (i, p) in planned.iter_mut().enumerate() {
        let aspect = &ASPECTS[p.aspect];
        let name = &names[p.entity];
        let mut words: Vec<String> = vec![name.clone(), aspect.keyword.into()];
        words.extend(fill(&mut rng, 3).into_iter().map(String::from));
        words.extend(aspect.cue.split(' ').map(String::from));
        p.answer_start = words.len();
        words.extend(p.answer.iter().cloned());
        words.push(aspect.closer.into());
        words.extend(fill(&mut rng, 5).into_iter().map(String::from));
        words.push(aspect.keyword.into());
        words.extend(fill(&mut rng, 3).into_iter().map(String::from));
        let mut title = name.clone();
        title[..1].make_ascii_uppercase();
        passages.push(PassageRecord {
            id: ids[i].clone(),
            title,
            text: format!("{}.", words.join(" ")),
            out_links: out_links[i].iter().map(|&j| ids[j].clone()).collect(),
        });
    }

    // Conversation lengths, then an exact planted allocation.
    let lengths: Vec<usize> = (0..plant.conversations)
        .map(|_| rng.gen_range(plant.min_turns..=plant.max_turns))
        .collect();
    let later_turns: usize = lengths.iter().map(|l| l - 1).sum();
    let n_planted = (plant.fraction * later_turns as f64).round() as usize;
    let mut planted_flags: Vec<bool> = (0..later_turns).map(|i| i < n_planted).collect();
    planted_flags.shuffle(&mut rng);
    let mut flags = planted_flags.into_iter();

    let conv_width = plant.conversations.saturating_sub(1).to_string().len().max(3);
    let mut conversations = Vec::with_capacity(plant.conversations);
    let mut turn_plans = Vec::new();
    for (c, &len) in lengths.iter().enumerate() {
        let conv_id = format!("c{c:0conv_width$}");
        let first = match plant.style {
            ConversationStyle::Hop => rng.gen_range(0..n_passages),
            ConversationStyle::Topic => {
                let rich: Vec<usize> = (0..n_entities)
                    .filter(|&e| entity_passages[e].len() >= len.min(per_entity))
                    .collect();
                let e = *rich.choose(&mut rng).expect("at least one entity");
                *entity_passages[e].choose(&mut rng).expect("nonempty entity")
            }
        };
        let mut golds = vec![first];
        let mut plans = vec![(false, None)];
        for _ in 1..len {
            let planted = flags.next().expect("allocated per later turn");
            let prev = *golds.last().expect("nonempty");
            let dist = graph.distances(&[prev], None);
            let used: HashSet<usize> = golds.iter().copied().collect();
            let near = |n: &usize| dist.get(n).is_some_and(|&d| d >= 1 && d <= plant.hop_limit) && !used.contains(n);
            let candidates: Vec<usize> = if planted {
                let mut c: Vec<usize> = Vec::new();
                if plant.style == ConversationStyle::Topic {
                    c = entity_passages[planned[first].entity].iter().copied().filter(near).collect();
                }
                if c.is_empty() {
                    c = (0..n_passages).filter(near).collect();
                }
                c
            } else {
                (0..n_passages)
                    .filter(|n| dist.get(n).is_none_or(|&d| d > plant.hop_limit) && !used.contains(n))
                    .collect()
            };
            let Some(&next) = candidates.choose(&mut rng) else {
                return Err(Error::InfeasiblePlant(if planted {
                    format!(
                        "passage {} has no unused passage within {} hops; raise links_per_passage (now {})",
                        ids[prev], plant.hop_limit, plant.links_per_passage
                    )
                } else {
                    format!(
                        "no passage lies farther than {} hops from {}; lower links_per_passage or hop_limit",
                        plant.hop_limit, ids[prev]
                    )
                }));
            };
            plans.push((planted, dist.get(&next).copied()));
            golds.push(next);
        }

        let mut turns = Vec::with_capacity(len);
        for (t, (&gold, &(planted, hop_distance))) in golds.iter().zip(&plans).enumerate() {
            let p = &planned[gold];
            let aspect = &ASPECTS[p.aspect];
            let question = if t == 0 {
                match plant.style {
                    ConversationStyle::Hop => format!("tell me about the {} of {}", aspect.keyword, names[p.entity]),
                    ConversationStyle::Topic => format!("tell me about {} and their {}", names[p.entity], aspect.keyword),
                }
            } else {
                FOLLOW_UP.choose(&mut rng).expect("nonempty").replace("{kw}", aspect.keyword)
            };
            let qid = format!("{conv_id}_q{:02}", t + 1);
            let human_f1 = (rng.gen_range(0.5..=1.0f64) * 100.0).round() / 100.0;
            turns.push(TurnRecord {
                qid: qid.clone(),
                question,
                answers: vec![AnswerWire {
                    text: p.answer.join(" "),
                    passage_id: ids[gold].clone(),
                    span: [p.answer_start, p.answer_start + p.answer.len()],
                }],
                human_f1: Some(human_f1),
            });
            turn_plans.push(TurnPlan {
                conv_id: conv_id.clone(),
                qid,
                turn: t + 1,
                gold: ids[gold].clone(),
                planted,
                hop_distance: if t == 0 { None } else { hop_distance },
            });
        }
        conversations.push(ConversationRecord { conv_id, turns });
    }

    Ok(FixtureFiles {
        passages,
        conversations,
        manifest: FixtureManifest {
            seed,
            n_passages,
            plant: plant.clone(),
            planted_edges: graph.edge_count(),
            turns: turn_plans,
        },
    })
}
