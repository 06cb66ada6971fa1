use super::*;
use crate::corpus::{ResponsePassage, Speaker};
use crate::dense::{encode, HashedEncoderConfig};
use crate::eval::{evaluate_full_rank, MissingPolicy, RunFile};
use crate::negatives::{sample, Backends, SamplerKind, SamplerSpec};
use crate::synthetic::{planted_signal, PlantedConfig};

fn small_corpus() -> crate::synthetic::SyntheticDataset {
    planted_signal(
        &PlantedConfig {
            topics: 6,
            responses: 120,
            contexts: 60,
            ..PlantedConfig::default()
        },
        5,
    )
    .unwrap()
}

fn batch_from(
    d: &crate::synthetic::SyntheticDataset,
    start: usize,
    b: usize,
    m: usize,
    seed: u64,
) -> Batch {
    let set = sample(
        &SamplerSpec::new(SamplerKind::Random, seed),
        &d.train,
        &d.collection,
        Backends::default(),
        m.max(1),
    )
    .unwrap();
    Batch::new(
        d.train.examples[start..start + b]
            .iter()
            .map(|ex| TrainingExample {
                context: ex.context.clone(),
                positive_id: ex.response_id.clone(),
                negative_ids: set
                    .negatives(&ex.context.id)
                    .unwrap()
                    .iter()
                    .take(m)
                    .map(|n| n.id.clone())
                    .collect(),
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn score_matrix_shapes() {
    let d = small_corpus();
    let a = Analyzer::default();
    let enc = HashedEncoder::random(
        &HashedEncoderConfig {
            buckets: 256,
            dim: 4,
            init_scale: 0.5,
        },
        1,
    );
    let m0 = score_matrix(&enc, &batch_from(&d, 0, 2, 0, 1), &d.collection, &a).unwrap();
    assert_eq!((m0.rows, m0.cols), (2, 2));
    assert_eq!(m0.positive_cols, vec![0, 1]);
    let mut disjoint = batch_from(&d, 0, 2, 0, 1);
    let positives: Vec<String> = disjoint
        .examples
        .iter()
        .map(|e| e.positive_id.clone())
        .collect();
    let mut pool = d
        .collection
        .iter()
        .map(|p| p.id.clone())
        .filter(|id| !positives.contains(id));
    for ex in &mut disjoint.examples {
        ex.negative_ids = pool.by_ref().take(10).collect();
    }
    let m10 = score_matrix(&enc, &disjoint, &d.collection, &a).unwrap();
    assert_eq!((m10.rows, m10.cols), (2, 22));
    // Diagonal holds the positive scores.
    let b = batch_from(&d, 0, 2, 0, 1);
    let u = encode(&enc, &concat_context(&b.examples[1].context), &a).vector;
    let v = encode(
        &enc,
        &d.collection.get(&b.examples[1].positive_id).unwrap().text,
        &a,
    )
    .vector;
    let expected: f64 = u
        .as_slice()
        .iter()
        .zip(v.as_slice())
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum();
    assert!((m0.get(1, 1) - expected).abs() < 1e-6);

    let zero = HashedEncoder::zeros(256, 4);
    let mz = score_matrix(&zero, &batch_from(&d, 0, 3, 4, 1), &d.collection, &a).unwrap();
    assert!(mz.scores.iter().all(|&s| s == 0.0));
}

#[test]
fn duplicate_candidates_collapse() {
    let c = Collection::from_passages([
        ResponsePassage::new("a", "alpha"),
        ResponsePassage::new("b", "beta"),
        ResponsePassage::new("z", "zeta"),
    ])
    .unwrap();
    let ctx = |id: &str| DialogueContext::new(id, [("hi", Speaker::Seeker)]).unwrap();
    let batch = Batch::new(vec![
        TrainingExample {
            context: ctx("c1"),
            positive_id: "a".into(),
            negative_ids: vec!["z".into(), "b".into()],
        },
        TrainingExample {
            context: ctx("c2"),
            positive_id: "b".into(),
            negative_ids: vec!["z".into()],
        },
    ])
    .unwrap();
    let m = score_matrix(
        &HashedEncoder::zeros(8, 2),
        &batch,
        &c,
        &Analyzer::default(),
    )
    .unwrap();
    assert_eq!(m.candidate_ids, vec!["a", "b", "z"]);
    assert_eq!(m.positive_cols, vec![0, 1]);
}

#[test]
fn batch_invariants() {
    let ctx = DialogueContext::new("c", [("hi", Speaker::Seeker)]).unwrap();
    let ex = TrainingExample {
        context: ctx.clone(),
        positive_id: "a".into(),
        negative_ids: vec!["a".into()],
    };
    assert!(Batch::new(vec![ex]).is_err());
    let ex = TrainingExample {
        context: ctx,
        positive_id: "a".into(),
        negative_ids: vec![],
    };
    assert!(Batch::new(vec![ex.clone(), ex]).is_err());
}

fn fd_config(loss: LossKind, inclusive: bool) -> TrainConfig {
    TrainConfig {
        loss,
        inclusive_denominator: inclusive,
        ..TrainConfig::default()
    }
}

#[test]
fn finite_differences_match_analytic_gradient() {
    let d = small_corpus();
    let a = Analyzer::default();
    let enc = HashedEncoder::random(
        &HashedEncoderConfig {
            buckets: 64,
            dim: 8,
            init_scale: 1.0,
        },
        3,
    );
    for (loss, inclusive) in [
        (LossKind::Mnrl, false),
        (LossKind::Mnrl, true),
        (LossKind::Contrastive, false),
    ] {
        let batch = batch_from(&d, 3, 3, 4, 2);
        let report = finite_diff_check(
            &enc,
            &batch,
            &d.collection,
            &a,
            &fd_config(loss, inclusive),
            1e-5,
            200,
            1,
        )
        .unwrap();
        assert!(report.checked >= 200, "{report:?}");
        assert!(report.max_relative_error < 1e-4, "{loss:?} {report:?}");
        assert_eq!(report.untouched_nonzero, 0);
    }
}

#[test]
fn untouched_rows_have_zero_gradient() {
    let d = small_corpus();
    let a = Analyzer::default();
    let enc = HashedEncoder::random(
        &HashedEncoderConfig {
            buckets: 4096,
            dim: 4,
            init_scale: 1.0,
        },
        3,
    );
    let batch = batch_from(&d, 0, 2, 2, 2);
    let report = finite_diff_check(
        &enc,
        &batch,
        &d.collection,
        &a,
        &TrainConfig::default(),
        1e-5,
        50,
        4,
    )
    .unwrap();
    assert_eq!(report.untouched_checked, 8);
    assert_eq!(report.untouched_nonzero, 0);
    assert!(finite_diff_check(
        &enc,
        &batch,
        &d.collection,
        &a,
        &TrainConfig::default(),
        1.0,
        5,
        4
    )
    .is_err());
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 200,
        validate_every: 50,
        negatives_per_example: 5,
        seed,
        ..TrainConfig::default()
    }
}

fn run(d: &crate::synthetic::SyntheticDataset, cfg: &TrainConfig) -> TrainState {
    let set = sample(
        &SamplerSpec::new(SamplerKind::Random, cfg.seed),
        &d.train,
        &d.collection,
        Backends::default(),
        cfg.negatives_per_example,
    )
    .unwrap();
    let enc = HashedEncoder::random(
        &HashedEncoderConfig {
            buckets: 1024,
            dim: 16,
            init_scale: 0.1,
        },
        cfg.seed,
    );
    train(
        &d.train,
        &d.validation,
        &d.collection,
        &Analyzer::default(),
        enc,
        &set,
        cfg,
    )
    .unwrap()
}

#[test]
fn training_is_deterministic_and_improves() {
    let d = small_corpus();
    let a = run(&d, &quick_config(7));
    let b = run(&d, &quick_config(7));
    assert_eq!(a.best_step, b.best_step);
    assert_eq!(a.encoder.table(), b.encoder.table());
    assert_eq!(a.validations.len(), 4);
    let max = a
        .validations
        .iter()
        .map(|v| v.map)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(a.best_validation_map, max);
    assert!(a.best_validation_map > a.initial_validation_map, "{a:?}");
}

#[test]
fn single_validation_selects_last_step() {
    let d = small_corpus();
    let cfg = TrainConfig {
        steps: 30,
        validate_every: 30,
        ..quick_config(1)
    };
    let s = run(&d, &cfg);
    assert_eq!(s.validations.len(), 1);
    assert_eq!(s.best_step, 30);
    assert_eq!(s.log.len(), 30);
    assert!(s.log[29].validation_map.is_some() && s.log[0].validation_map.is_none());
}

#[test]
fn loss_falls_over_first_window() {
    let d = small_corpus();
    let cfg = TrainConfig {
        steps: 100,
        validate_every: 100,
        ..quick_config(2)
    };
    let s = run(&d, &cfg);
    let mean = |r: std::ops::Range<usize>| {
        s.log[r.clone()].iter().map(|e| e.loss).sum::<f64>() / r.len() as f64
    };
    assert!(
        mean(80..100) < mean(0..20),
        "{} vs {}",
        mean(80..100),
        mean(0..20)
    );
}

#[test]
fn contrastive_training_runs() {
    let d = small_corpus();
    let cfg = TrainConfig {
        loss: LossKind::Contrastive,
        ..quick_config(3)
    };
    let s = run(&d, &cfg);
    assert!(s.log.iter().all(|e| e.loss.is_finite()));
}

#[test]
fn config_validation() {
    assert!(TrainConfig {
        validate_every: 0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        steps: 10,
        validate_every: 20,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        loss: LossKind::Contrastive,
        margin: 0.0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    TrainConfig::default().validate().unwrap();
}

#[test]
fn requires_enough_negatives() {
    let d = small_corpus();
    let set = sample(
        &SamplerSpec::new(SamplerKind::Random, 0),
        &d.train,
        &d.collection,
        Backends::default(),
        2,
    )
    .unwrap();
    let enc = HashedEncoder::zeros(64, 4);
    let err = train(
        &d.train,
        &d.validation,
        &d.collection,
        &Analyzer::default(),
        enc,
        &set,
        &quick_config(0),
    )
    .unwrap_err();
    assert!(err.to_string().contains("fewer than 5 negatives"), "{err}");
}

#[test]
fn checkpoint_round_trip() {
    let d = small_corpus();
    let cfg = TrainConfig {
        steps: 20,
        validate_every: 10,
        ..quick_config(4)
    };
    let s = run(&d, &cfg);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &s, &cfg).unwrap();
    let (enc, meta) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(meta.best_step, s.best_step);
    assert_eq!(meta.config, cfg);
    for (x, y) in enc.table().iter().zip(s.encoder.table()) {
        assert_eq!(*x, f64::from(*y as f32));
    }
    let log = dir.path().join("log.jsonl");
    write_log(&log, &s.log).unwrap();
    let first = std::fs::read_to_string(&log).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert!(line.get("validation_map").is_none());
    assert!(line.get("loss").is_some());
}

#[test]
fn trained_encoder_ranks_better_than_untrained() {
    let d = small_corpus();
    let cfg = TrainConfig {
        steps: 300,
        validate_every: 50,
        ..quick_config(9)
    };
    let s = run(&d, &cfg);
    let a = Analyzer::default();
    let recall = |enc: &HashedEncoder| {
        let store = crate::dense::build_store(enc, &d.collection, &a).unwrap();
        let lists: Vec<_> = d
            .test
            .iter()
            .map(|ex| {
                let q = encode(enc, &concat_context(&ex.context), &a).vector;
                crate::dense::dense_search(&store, &ex.context.id, q.as_slice(), 10).unwrap()
            })
            .collect();
        let run = RunFile::from_scored_lists(&lists, "t").unwrap();
        evaluate_full_rank(&run, &d.test, &[10], MissingPolicy::Error)
            .unwrap()
            .recall_at(10)
            .unwrap()
    };
    let untrained = HashedEncoder::random(
        &HashedEncoderConfig {
            buckets: 1024,
            dim: 16,
            init_scale: 0.1,
        },
        9,
    );
    assert!(recall(&s.encoder) > recall(&untrained));
}
