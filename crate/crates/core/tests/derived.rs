//! Hand-derived reference values and before/after training checks.

use cifsed_core::corpus::{
    augment_session, generate_synthetic, select_exemplars, split_sessions, trigger_lexemes, ClassId, Dataset,
    SessionPlan, SyntheticConfig,
};
use cifsed_core::crf::{sequence_nll, TransitionGenParams};
use cifsed_core::distill::{
    adapt_student, build_input, pretrain_base, teacher_predict, teacher_weights, ModelSnapshot, SnapshotMeta,
    TrainConfig, SNAPSHOT_VERSION,
};
use cifsed_core::encoder::EncoderConfig;
use cifsed_core::harness::evaluate_session;
use cifsed_core::math::Matrix;
use cifsed_core::metrics::{SpanCounts, Span};
use cifsed_core::model::{EpisodeInput, ModelConfig, ModelParams, QuerySeq, SupportSeq};
use cifsed_core::prompt::PromptTemplates;

fn corpus(classes: usize, per_class: usize, multiword: f64, seed: u64) -> Dataset {
    generate_synthetic(
        &SyntheticConfig {
            num_classes: classes,
            instances_per_class: per_class,
            multiword_prob: multiword,
            ..SyntheticConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn snapshot(params: ModelParams, classes: usize) -> ModelSnapshot {
    ModelSnapshot {
        params,
        attention: Matrix::identity(2 * classes + 1),
        meta: SnapshotMeta {
            version: SNAPSHOT_VERSION,
            session: 0,
            classes: Vec::new(),
            seed: 0,
        },
    }
}

#[test]
fn two_of_three_predictions_against_four_gold() {
    let span = |start, class| Span { start, end: start + 1, class: ClassId(class), well_formed: true };
    let gold = [span(0, 0), span(2, 0), span(4, 1), span(6, 1)];
    let pred = [span(0, 0), span(2, 0), span(4, 0)];
    let c = SpanCounts::of(&pred, &gold);
    assert_eq!((c.correct, c.predicted, c.gold), (2, 3, 4));
    assert!((c.f1() - 4.0 / 7.0).abs() < 1e-15);
}

#[test]
fn two_token_nll_by_hand() {
    // Paths 00, 01, 10, 11 score 1.5, 2, 0, 1.5; gold 00.
    let em = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let tr = Matrix::from_vec(2, 2, vec![0.5, 0.0, 0.0, 0.5]);
    let nll = sequence_nll(&em, &[tr], &[0, 0]).unwrap();
    assert!((nll - 1.353732798546091).abs() < 1e-12);
}

#[test]
fn softmax_of_one_and_zero() {
    let w = teacher_weights(&[1.0, 0.0]);
    assert!((w[0] - 0.7310585786300049).abs() < 1e-15);
    assert!((w[1] - 0.2689414213699951).abs() < 1e-15);
}

fn hundred_class_plan(way: usize) -> (Dataset, SessionPlan) {
    let ds = corpus(100, 4, 0.15, 5);
    let plan = split_sessions(&ds, way, 50, 6).unwrap();
    (ds, plan)
}

#[test]
fn exemplar_store_sizes() {
    let (ds, plan) = hundred_class_plan(10);
    assert_eq!(select_exemplars(&ds, &plan, 1, 1, 0).unwrap().len(), 50);
    assert_eq!(select_exemplars(&ds, &plan, 3, 1, 0).unwrap().len(), 70);
}

#[test]
fn second_session_support_of_sixty() {
    let (ds, plan) = hundred_class_plan(5);
    let store = select_exemplars(&ds, &plan, 2, 1, 0).unwrap();
    let episode = augment_session(&ds, &plan, 2, Some(&store), 0).unwrap();
    assert_eq!(episode.support.len(), 60);
}

#[test]
fn single_token_prediction_is_emission_softmax() {
    let config = ModelConfig {
        encoder: EncoderConfig { hidden: 6, vocab_size: 64, max_len: 8, init_scale: 0.5 },
        log_sigma_bias: -1.0,
    };
    let params = ModelParams::init(&config, 11).unwrap();
    let words = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect::<Vec<_>>();
    let input = EpisodeInput {
        num_labels: 3,
        support: vec![SupportSeq {
            tokens: words(&["they", "blew", "up"]),
            labels: vec![Some(0), Some(1), Some(2)],
            prompt_len: 0,
        }],
        query: vec![QuerySeq { tokens: words(&["blew"]), gold: vec![1] }],
    };
    let p = teacher_predict(&snapshot(params.clone(), 1), &input, 3, 0).unwrap();
    let em = params.forward_episode(&input, 0, 0).unwrap().queries[0].emissions.clone();
    let top = em.row(0).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = em.row(0).iter().map(|v| (v - top).exp()).sum();
    for y in 0..3 {
        let want = (em[(0, y)] - top).exp() / z;
        assert!((p[0].matrix()[(0, y)] - want).abs() < 1e-12);
    }
}

/// Plants one axis per class trigger and a shared axis for every other word.
fn oracle_params(classes: usize) -> ModelParams {
    let encoder = EncoderConfig { hidden: classes + 2, vocab_size: 1 << 16, max_len: 64, init_scale: 0.5 };
    let mut params = ModelParams::init(&ModelConfig { encoder: encoder.clone(), log_sigma_bias: -1.0 }, 0).unwrap();
    params.transition = TransitionGenParams::zeros(encoder.hidden);
    params.encoder.projection = Matrix::zeros(encoder.hidden, 2 * encoder.hidden);
    let mut emb = Matrix::zeros(encoder.vocab_size, encoder.hidden);
    for r in 0..encoder.vocab_size {
        emb[(r, 0)] = 1.0;
    }
    let mut trigger_rows = std::collections::BTreeSet::new();
    for k in 0..classes {
        for lexeme in trigger_lexemes(k) {
            let r = encoder.token_id(&lexeme);
            assert!(trigger_rows.insert(r), "trigger buckets collide");
            emb[(r, 0)] = 0.0;
            emb[(r, k + 1)] = 5.0;
        }
    }
    params.encoder.embeddings = emb;
    params
}

#[test]
fn planted_oracle_recovers_triggers() {
    let classes = 6;
    let ds = corpus(classes, 12, 0.0, 3);
    let plan = split_sessions(&ds, 2, 2, 1).unwrap();
    let snap = snapshot(oracle_params(classes), classes);
    let report = evaluate_session(&snap, &ds, &plan, 2, 20, &PromptTemplates::default(), None, 4).unwrap();
    assert!(report.f1 > 0.99, "oracle F1 {}", report.f1);
}

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { hidden: 12, vocab_size: 1024, max_len: 64, init_scale: 0.5 },
        log_sigma_bias: -1.0,
    }
}

#[test]
fn pretraining_beats_initialization_on_held_out_base_episodes() {
    let ds = corpus(10, 24, 0.15, 0);
    let templates = PromptTemplates::default();
    for seed in 0..5 {
        let (train, test) = ds.partition(0.25, seed).unwrap();
        let plan = split_sessions(&train, 2, 6, seed).unwrap();
        let trained = TrainConfig {
            pretrain_episodes: 150,
            lr_encoder: 1e-2,
            lr_transition: 1e-2,
            ..TrainConfig::default()
        };
        let untrained = TrainConfig { pretrain_episodes: 0, ..trained.clone() };
        let (before, _) = pretrain_base(&train, &plan, &small_model(), &untrained, seed).unwrap();
        let (after, _) = pretrain_base(&train, &plan, &small_model(), &trained, seed).unwrap();
        let f1 = |s: &ModelSnapshot| evaluate_session(s, &test, &plan, 0, 20, &templates, None, 9).unwrap().f1;
        let (b, a) = (f1(&before), f1(&after));
        assert!(a > b, "seed {seed}: {b} -> {a}");
    }
}

#[test]
fn adaptation_lowers_support_nll_every_step() {
    let ds = corpus(10, 12, 0.15, 1);
    let plan = split_sessions(&ds, 2, 6, 2).unwrap();
    let store = select_exemplars(&ds, &plan, 1, 1, 0).unwrap();
    let episode = augment_session(&ds, &plan, 1, Some(&store), 0).unwrap();
    let mut input = build_input(&ds, &plan, &episode, None, 64).unwrap();
    input.query = input
        .support
        .iter()
        .map(|s| QuerySeq { tokens: s.tokens.clone(), gold: s.labels.iter().map(|l| l.unwrap()).collect() })
        .collect();
    let start = ModelParams::init(&small_model(), 3).unwrap();
    // Sampled per-step losses are noisy; judge each step on the mean transitions.
    let support_nll = |params: &ModelParams| {
        let fwd = params.forward_episode(&input, 0, 0).unwrap();
        fwd.queries
            .iter()
            .zip(&input.query)
            .map(|(q, gold)| sequence_nll(&q.emissions, std::slice::from_ref(&fwd.moments.mu), &gold.gold).unwrap())
            .sum::<f64>()
    };
    let curve: Vec<f64> = (0..=8)
        .map(|steps| {
            let config = TrainConfig { adapt_steps: steps, ..TrainConfig::default() };
            let (params, trace) = adapt_student(&start, &input, &config, 5).unwrap();
            assert_eq!(trace.len(), steps);
            support_nll(&params)
        })
        .collect();
    assert!(curve.windows(2).all(|w| w[1] < w[0]), "{curve:?}");
}
