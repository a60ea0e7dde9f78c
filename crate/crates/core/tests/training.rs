mod common;

use std::sync::OnceLock;

use convqa::config::PipelineConfig;
use convqa::corpus::{Corpus, PlantSpec};
use convqa::dense::EmbeddingStore;
use convqa::lexical::InvertedIndex;
use convqa::math::softmax_bce;
use convqa::model::{ModelConfig, ModelParams};
use convqa::pipeline::teacher_history;
use convqa::training::{
    examples, inject_gold, loss_log_csv, pretrain, retriever_loss, train_phase, Example, Phase, ScheduleConfig, TrainConfig,
};
use convqa::Error;
use ndarray::Array1;
use proptest::prelude::*;

use common::{fixture_corpus, tiny_model_config, tiny_pipeline, tiny_untrained, train_examples};

#[test]
fn uniform_retriever_scores_give_the_hand_value() {
    let store = EmbeddingStore::from_vectors(
        vec!["a".into(), "b".into(), "c".into()],
        &[vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]],
        0,
    )
    .unwrap();
    let out = retriever_loss(&store, &Array1::from_vec(vec![0.3, -0.1]), &[0, 1, 2], &[1]);
    let expected = -(1.0f64 / 3.0).ln() - 2.0 * (2.0f64 / 3.0).ln();
    assert!((out.loss - expected).abs() < 1e-12, "{} vs {expected}", out.loss);
    assert_eq!(out.labels, vec![0.0, 1.0, 0.0]);
    assert!(out.grad_v_q.iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn confident_gold_drives_loss_to_zero() {
    let bce = softmax_bce(&[60.0, 0.0, 0.0], &[1.0, 0.0, 0.0]);
    assert!(bce.loss >= 0.0 && bce.loss < 1e-9, "{}", bce.loss);
}

#[test]
fn uniform_four_token_reader_start_half() {
    let bce = softmax_bce(&[0.0; 4], &[0.0, 1.0, 0.0, 0.0]);
    let expected = -(0.25f64).ln() - 3.0 * (0.75f64).ln();
    assert!((bce.loss - expected).abs() < 1e-12);
}

#[test]
fn injection_replaces_lowest_ranked_entry() {
    assert_eq!(inject_gold(&[4, 7, 2], &[9]), vec![4, 7, 9]);
    assert_eq!(inject_gold(&[4, 9, 2], &[9]), vec![4, 9, 2]);
    assert_eq!(inject_gold(&[], &[3]), vec![3]);
    assert_eq!(inject_gold(&[1, 2], &[]), vec![1, 2]);
}

proptest! {
    #[test]
    fn injection_leaves_exactly_one_positive(list in proptest::collection::hash_set(0usize..50, 1..8), gold in 0usize..50) {
        let list: Vec<usize> = list.into_iter().collect();
        let out = inject_gold(&list, &[gold]);
        prop_assert_eq!(out.len(), list.len());
        prop_assert_eq!(out.iter().filter(|&&i| i == gold).count(), 1);
    }

    #[test]
    fn clamped_losses_are_finite_and_nonnegative(
        logits in proptest::collection::vec(-1e4f64..1e4, 1..12),
        mask in proptest::collection::vec(any::<bool>(), 12),
    ) {
        let labels: Vec<f64> = logits.iter().zip(&mask).map(|(_, &m)| m as u8 as f64).collect();
        let bce = softmax_bce(&logits, &labels);
        prop_assert!(bce.loss.is_finite());
        prop_assert!(bce.loss >= 0.0);
        prop_assert!(bce.grad_logits.iter().all(|g| g.is_finite()));
    }
}

fn tiny_examples(corpus: &Corpus) -> Vec<Example> {
    examples(corpus, |_| true)
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let (corpus, params, store, index) = tiny_untrained(3);
    let ex = tiny_examples(&corpus);
    let cfg = TrainConfig {
        lr: 0.0,
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    for phase in [Phase::Joint, Phase::Dhm, Phase::Explorer] {
        let mut p = params.clone();
        train_phase(&mut p, &corpus, &store, &index, &tiny_pipeline(), &ex, phase, &cfg).unwrap();
        for ((_, name, a), (_, _, b)) in params.blocks().iter().zip(p.blocks().iter()) {
            let same = a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{} changed under lr 0 in {}", name, phase.name());
        }
    }
}

#[test]
fn same_seed_gives_identical_logs_and_parameters() {
    let (corpus, params, store, index) = tiny_untrained(3);
    let ex = tiny_examples(&corpus);
    let cfg = TrainConfig {
        lr: 0.5,
        epochs: 3,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let run = || {
        let mut p = params.clone();
        let mut log = Vec::new();
        for phase in [Phase::Joint, Phase::Dhm, Phase::Explorer] {
            log.extend(train_phase(&mut p, &corpus, &store, &index, &tiny_pipeline(), &ex, phase, &cfg).unwrap());
        }
        (p, loss_log_csv(&log))
    };
    let (p1, l1) = run();
    let (p2, l2) = run();
    assert_eq!(l1, l2);
    assert_eq!(p1, p2);
    assert_ne!(p1, params);
}

#[test]
fn pretraining_is_deterministic_and_freezes_the_passage_encoder() {
    let corpus = common::tiny_corpus();
    let ex = tiny_examples(&corpus);
    let cfg = TrainConfig {
        lr: 1.0,
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let mut p = ModelParams::init(&tiny_model_config()).unwrap();
        let (log, store) = pretrain(&mut p, &corpus, &ex, &cfg).unwrap();
        (p, log, store)
    };
    let (mut p1, l1, s1) = run();
    let (_, l2, s2) = run();
    assert_eq!(l1, l2);
    assert_eq!(s1.fingerprint(), s2.fingerprint());
    assert!((0..s1.len()).all(|i| s1.vector(i) == s2.vector(i)));

    assert!(p1.encoder.is_frozen());
    assert!(matches!(p1.encoder.w_p_mut(), Err(Error::EncoderFrozen)));
    assert!(matches!(pretrain(&mut p1, &corpus, &ex, &cfg), Err(Error::EncoderFrozen)));
    s1.verify(&p1.encoder).unwrap();
}

#[test]
fn training_requires_a_frozen_encoder() {
    let corpus = common::tiny_corpus();
    let mut p = ModelParams::init(&tiny_model_config()).unwrap();
    let mut frozen = p.clone();
    frozen.encoder.freeze();
    let store = EmbeddingStore::build(&corpus, &frozen.encoder).unwrap();
    let index = InvertedIndex::build(&corpus).unwrap();
    let err = train_phase(&mut p, &corpus, &store, &index, &tiny_pipeline(), &tiny_examples(&corpus), Phase::Joint, &TrainConfig::default());
    assert!(matches!(err, Err(Error::EncoderNotFrozen)));
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let (corpus, mut params, store, index) = tiny_untrained(3);
    params.read.w_ra.fill(f64::NAN);
    let err = train_phase(
        &mut params,
        &corpus,
        &store,
        &index,
        &tiny_pipeline(),
        &tiny_examples(&corpus),
        Phase::Joint,
        &TrainConfig::default(),
    )
    .unwrap_err();
    match err {
        Error::NonFiniteLoss { question, diagnostics } => {
            assert!(question.starts_with("c0_q"), "{question}");
            assert!(diagnostics.contains("W_ra"), "{diagnostics}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn invalid_train_configs_are_rejected() {
    for cfg in [
        TrainConfig { lr: -1.0, ..TrainConfig::default() },
        TrainConfig { lr: f64::NAN, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { max_grad_norm: Some(0.0), ..TrainConfig::default() },
    ] {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    assert!(TrainConfig::default().validate().is_ok());
}

#[test]
fn loss_log_csv_has_one_row_per_epoch() {
    let (corpus, mut params, store, index) = tiny_untrained(3);
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let log = train_phase(&mut params, &corpus, &store, &index, &tiny_pipeline(), &tiny_examples(&corpus), Phase::Joint, &cfg).unwrap();
    let csv = loss_log_csv(&log);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "phase,epoch,retriever,explorer,ranker,reader,total,examples,skipped");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("joint,1,"));
    for e in &log {
        let l = &e.loss;
        assert!((l.total - (l.retriever + l.explorer + l.ranker + l.reader)).abs() < 1e-12);
        assert_eq!(l.explorer, 0.0);
    }
}

struct Pretrained {
    corpus: Corpus,
    train: Vec<Example>,
    random: (ModelParams, EmbeddingStore),
    trained: (ModelParams, EmbeddingStore),
}

fn planted() -> &'static Pretrained {
    static CELL: OnceLock<Pretrained> = OnceLock::new();
    CELL.get_or_init(|| {
        let (corpus, _) = fixture_corpus(7, 500, &PlantSpec::default());
        let train = train_examples(&corpus);
        let mut random = ModelParams::init(&ModelConfig::default()).unwrap();
        let mut trained = random.clone();
        random.encoder.freeze();
        let random_store = EmbeddingStore::build(&corpus, &random.encoder).unwrap();
        let (_, store) = pretrain(&mut trained, &corpus, &train, &ScheduleConfig::default().pretrain).unwrap();
        Pretrained {
            corpus,
            train,
            random: (random, random_store),
            trained: (trained, store),
        }
    })
}

fn first_round_recall(corpus: &Corpus, ex: &[Example], params: &ModelParams, store: &EmbeddingStore, k: usize) -> f64 {
    let mut hits = 0;
    for e in ex {
        let conv = &corpus.conversations()[e.conv];
        let turn = &conv.turns[e.turn];
        let history: Vec<String> = teacher_history(corpus, conv, e.turn).iter().map(|h| h.history_string()).collect();
        let v = params.encoder.encode_question_first_round(&turn.question, &history).unwrap();
        let top = store.mips_topk(&v.vector, k).unwrap();
        let golds = corpus.gold_indices(turn);
        hits += top.iter().any(|(i, _)| golds.contains(i)) as usize;
    }
    hits as f64 / ex.len() as f64
}

#[test]
fn pretraining_beats_random_projection_recall() {
    let p = planted();
    let random = first_round_recall(&p.corpus, &p.train, &p.random.0, &p.random.1, 5);
    let trained = first_round_recall(&p.corpus, &p.train, &p.trained.0, &p.trained.1, 5);
    eprintln!("recall@5 random {random:.3} pretrained {trained:.3}");
    assert!(trained > random);
}

#[test]
fn joint_loss_strictly_decreases_over_first_five_epochs() {
    let p = planted();
    let mut params = p.trained.0.clone();
    let index = InvertedIndex::build(&p.corpus).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        lr: 0.3,
        max_grad_norm: Some(3.0),
        ..TrainConfig::default()
    };
    let log = train_phase(&mut params, &p.corpus, &p.trained.1, &index, &PipelineConfig::default(), &p.train, Phase::Joint, &cfg).unwrap();
    let totals: Vec<f64> = log.iter().map(|e| e.loss.total).collect();
    eprintln!("joint totals {totals:?}");
    assert!(totals.windows(2).all(|w| w[1] < w[0]), "{totals:?}");
}
