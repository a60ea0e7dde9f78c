#![allow(dead_code)]

pub mod oracles;

use convqa::config::PipelineConfig;
use convqa::corpus::{generate_fixture, FixtureManifest, PlantSpec};
use convqa::corpus::Corpus;
use convqa::dense::EmbeddingStore;
use convqa::lexical::InvertedIndex;
use convqa::model::{ModelConfig, ModelParams};
use convqa::training::{examples, run_schedule, EpochLog, Example, ScheduleConfig};

pub fn fixture_corpus(seed: u64, n: usize, plant: &PlantSpec) -> (Corpus, FixtureManifest) {
    let files = generate_fixture(seed, n, plant).unwrap();
    let (mut corpus, _) = Corpus::from_passages(files.passages.clone()).unwrap();
    let stats = corpus.add_conversations(files.conversations.clone());
    assert!(stats.rejected.is_empty(), "fixture conversations rejected: {stats:?}");
    (corpus, files.manifest)
}

/// Conversations held out for evaluation: every fifth one.
pub fn is_held_out(conv: usize) -> bool {
    conv % 5 == 4
}

pub fn train_examples(corpus: &Corpus) -> Vec<Example> {
    examples(corpus, |c| !is_held_out(c))
}

pub fn eval_convs(corpus: &Corpus) -> Vec<usize> {
    (0..corpus.conversations().len()).filter(|&c| is_held_out(c)).collect()
}

pub struct Trained {
    pub params: ModelParams,
    pub store: EmbeddingStore,
    pub index: InvertedIndex,
    pub log: Vec<EpochLog>,
}

pub fn train_full(corpus: &Corpus, model: &ModelConfig, pipeline: &PipelineConfig, schedule: &ScheduleConfig) -> Trained {
    let mut params = ModelParams::init(model).unwrap();
    let index = InvertedIndex::build(corpus).unwrap();
    let train = train_examples(corpus);
    let (log, store) = run_schedule(&mut params, corpus, &index, pipeline, &train, schedule).unwrap();
    Trained { params, store, index, log }
}

use convqa::corpus::{AnswerWire, ConversationRecord, PassageRecord, TurnRecord};
use convqa::model::ModelConfig as Mc;

/// Five linked passages and one three-turn conversation.
pub fn tiny_corpus() -> Corpus {
    let texts = [
        ("a0", "Alder", "alder river flows north past the mill town of brenk", vec!["a1", "a2"]),
        ("a1", "Brenk", "brenk is a mill town founded by tovel on the alder river", vec!["a0", "a3"]),
        ("a2", "Mill", "the mill was rebuilt in stone after a flood near the river", vec!["a4"]),
        ("a3", "Tovel", "tovel was a trader who founded brenk and later sailed east", vec!["a1", "a4"]),
        ("a4", "East", "ships sailing east from brenk carried grain and wool", vec!["a2"]),
    ];
    let passages = texts
        .iter()
        .map(|(id, title, text, links)| PassageRecord {
            id: id.to_string(),
            title: title.to_string(),
            text: text.to_string(),
            out_links: links.iter().map(|s| s.to_string()).collect(),
        })
        .collect();
    let (mut corpus, _) = Corpus::from_passages(passages).unwrap();
    let turn = |qid: &str, q: &str, a: &str, pid: &str, span: [usize; 2]| TurnRecord {
        qid: qid.into(),
        question: q.into(),
        answers: vec![AnswerWire {
            text: a.into(),
            passage_id: pid.into(),
            span,
        }],
        human_f1: Some(0.8),
    };
    let stats = corpus.add_conversations(vec![ConversationRecord {
        conv_id: "c0".into(),
        turns: vec![
            turn("c0_q01", "where does the alder river flow", "north", "a0", [3, 4]),
            turn("c0_q02", "who founded the town", "tovel", "a1", [7, 8]),
            turn("c0_q03", "where did he sail", "east", "a3", [10, 11]),
        ],
    }]);
    assert!(stats.rejected.is_empty(), "{stats:?}");
    corpus
}

pub fn tiny_model_config() -> Mc {
    Mc {
        d_f: 64,
        d_q: 16,
        d_t: 64,
        ..Mc::default()
    }
}

/// Lists wide enough that no selection boundary moves under small
/// perturbations.
pub fn tiny_pipeline() -> PipelineConfig {
    let mut p = PipelineConfig::default();
    p.retrieval.n_1 = 5;
    p.retrieval.n_r = 1;
    p.n_2 = 5;
    p.feedback_tokens = 8;
    p
}

/// Frozen passage encoder and its store, without training.
pub fn tiny_untrained(seed: u64) -> (Corpus, ModelParams, EmbeddingStore, InvertedIndex) {
    let corpus = tiny_corpus();
    let mut params = ModelParams::init(&Mc { seed, ..tiny_model_config() }).unwrap();
    params.encoder.freeze();
    let store = EmbeddingStore::build(&corpus, &params.encoder).unwrap();
    let index = InvertedIndex::build(&corpus).unwrap();
    (corpus, params, store, index)
}
