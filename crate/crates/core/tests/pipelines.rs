//! End-to-end runs of every pipeline over the checked-in smoke dataset, plus
//! parsing of the interchange fixtures.

use std::fs;
use std::path::{Path, PathBuf};

use fullrank::corpus::{ingest_collection, ingest_dialogues, CollectionFormat, EmptyPolicy};
use fullrank::dense::import_store;
use fullrank::expansion::{attach_expansions, read_expansions};
use fullrank::harness::{
    replay, run_experiment, run_rm3_grid, ExperimentConfig, Manifest, Pipeline,
};
use fullrank::negatives::{
    ingest_generated, read_generated, read_negatives, CorpusChoice, SamplerKind, SamplerSpec,
};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn smoke_config(pipeline: Pipeline, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.name = "smoke".into();
    cfg.pipeline = pipeline;
    cfg.data.root = Some(fixtures().join("smoke"));
    cfg.data.name = "smoke".into();
    cfg.data.collection = "collection.jsonl".into();
    cfg.data.train = Some("train.jsonl".into());
    cfg.data.validation = Some("validation.jsonl".into());
    cfg.data.test = "test.jsonl".into();
    cfg.data.expansions = Some("expansions.jsonl".into());
    cfg.data.response_embeddings = Some("responses.dvec".into());
    cfg.data.context_embeddings = Some("contexts.dvec".into());
    cfg.k = 20;
    cfg.ks = vec![1, 10, 20];
    cfg.train.steps = 40;
    cfg.train.validate_every = 20;
    cfg.train.negatives_per_example = 4;
    cfg.train.validation_candidates = 5;
    cfg.encoder.buckets = 512;
    cfg.encoder.dim = 8;
    cfg.output_dir = out.to_path_buf();
    cfg
}

#[test]
fn dvec_fixture_parses() {
    let store = import_store(&fixtures().join("tiny.dvec")).unwrap();
    assert_eq!(store.dim(), 4);
    assert_eq!(store.ids(), ["a", "b", "c"]);
    assert_eq!(store.get("c").unwrap(), [0.0, 0.0, -1.0, 2.5]);
    assert_eq!(
        store.to_bytes(),
        fs::read(fixtures().join("tiny.dvec")).unwrap()
    );
}

#[test]
fn expansion_fixture_parses_and_attaches() {
    let path = fixtures().join("smoke/expansions.jsonl");
    let records = read_expansions(&path).unwrap();
    assert_eq!(records.len(), 60);
    assert!(records.iter().all(|r| r.predictions.len() <= 5));
    let c = ingest_collection(
        &fixtures().join("smoke/collection.jsonl"),
        CollectionFormat::Jsonl,
        EmptyPolicy::Reject,
    )
    .unwrap();
    let (expanded, report) = attach_expansions(&c, &path).unwrap();
    assert_eq!(report.matched, 60);
    assert!(report.unmatched.is_empty());
    assert_eq!(expanded.get("r005").unwrap().expansions.len(), 5);
    assert!(expanded.get("r099").unwrap().expansions.is_empty());
}

#[test]
fn generated_fixture_parses() {
    let dir = fixtures().join("smoke");
    let records = read_generated(&dir.join("generated.jsonl")).unwrap();
    assert_eq!(records.len(), 48);
    let c = ingest_collection(
        &dir.join("collection.jsonl"),
        CollectionFormat::Jsonl,
        EmptyPolicy::Reject,
    )
    .unwrap();
    let train = ingest_dialogues(&dir.join("train.jsonl"), &c, EmptyPolicy::Reject).unwrap();
    let generated = ingest_generated(&dir.join("generated.jsonl"), &train, &c).unwrap();
    assert_eq!(generated.for_context("c000").len(), 2);
    assert_eq!(
        generated.for_context("c000")[0].text,
        "uninstall and reinstall the app"
    );
}

#[test]
fn every_pipeline_runs_and_writes_artifacts() {
    for pipeline in [
        Pipeline::Sparse,
        Pipeline::SparseRm3,
        Pipeline::SparseExpansion,
        Pipeline::DenseZeroshotImport,
        Pipeline::DenseFinetune,
    ] {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&smoke_config(pipeline, dir.path())).unwrap();
        assert_eq!(out.report.num_queries, 10, "{pipeline:?}");
        let manifest = Manifest::read(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(manifest.status, "completed");
        assert_eq!(manifest.completed_stages.last().unwrap(), "evaluate");
        for f in ["run.trec", "eval.json", "summary.csv"] {
            assert!(dir.path().join(f).is_file(), "{pipeline:?} {f}");
        }
        let r = |k| out.report.recall_at(k).unwrap();
        assert!(r(1) <= r(10) && r(10) <= r(20));
        match pipeline {
            Pipeline::Sparse | Pipeline::SparseRm3 | Pipeline::SparseExpansion => {
                assert!(dir.path().join("index.frix").is_file());
                assert!(r(10) > 0.0, "{pipeline:?}");
            }
            Pipeline::DenseZeroshotImport => assert!(r(10) > 0.0),
            Pipeline::DenseFinetune => {
                assert!(dir.path().join("checkpoint/checkpoint.json").is_file());
                assert_eq!(
                    fs::read_to_string(dir.path().join("log.jsonl"))
                        .unwrap()
                        .lines()
                        .count(),
                    40
                );
                let negs = read_negatives(&dir.path().join("negatives.jsonl")).unwrap();
                assert_eq!(negs.len(), 24);
            }
        }
    }
}

#[test]
fn finetune_with_composite_generated_and_expanded_pool() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(Pipeline::DenseFinetune, dir.path());
    cfg.data.external_collection = Some("collection.jsonl".into());
    cfg.sampler = SamplerSpec::new(
        SamplerKind::Composite {
            parts: vec![
                SamplerSpec::new(
                    SamplerKind::GeneratedFile {
                        path: "generated.jsonl".into(),
                    },
                    0,
                ),
                SamplerSpec::new(SamplerKind::SparseTopk, 0),
            ],
        },
        0,
    );
    cfg.sampler.corpus = CorpusChoice::Expanded;
    run_experiment(&cfg).unwrap();
    let negs = read_negatives(&dir.path().join("negatives.jsonl")).unwrap();
    let first = negs.negatives("c000").unwrap();
    assert_eq!(first.len(), 4);
    assert!(first[0].id.starts_with("gen:c000:"));
    assert!(first[0].text.is_some());
}

#[test]
fn replay_reproduces_run_files() {
    for pipeline in [Pipeline::SparseRm3, Pipeline::DenseFinetune] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_experiment(&smoke_config(pipeline, a.path())).unwrap();
        replay(&a.path().join("manifest.json"), Some(b.path())).unwrap();
        let read = |d: &Path| fs::read(d.join("run.trec")).unwrap();
        assert_eq!(read(a.path()), read(b.path()), "{pipeline:?}");
    }
}

#[test]
fn replay_rejects_changed_inputs() {
    let src = tempfile::tempdir().unwrap();
    for f in ["collection.jsonl", "test.jsonl"] {
        fs::copy(fixtures().join("smoke").join(f), src.path().join(f)).unwrap();
    }
    let out = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(Pipeline::Sparse, out.path());
    cfg.data.root = Some(src.path().to_path_buf());
    cfg.data.train = None;
    cfg.data.validation = None;
    cfg.data.expansions = None;
    cfg.data.response_embeddings = None;
    cfg.data.context_embeddings = None;
    run_experiment(&cfg).unwrap();
    let mut text = fs::read_to_string(src.path().join("test.jsonl")).unwrap();
    text.push('\n');
    fs::write(src.path().join("test.jsonl"), text).unwrap();
    let err = replay(&out.path().join("manifest.json"), None).unwrap_err();
    assert!(err.to_string().contains("data.test"), "{err}");
}

#[test]
fn failed_stage_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(Pipeline::DenseZeroshotImport, dir.path());
    // Context vectors keyed by response ids cannot serve the test contexts.
    cfg.data.context_embeddings = Some("responses.dvec".into());
    let err = run_experiment(&cfg).unwrap_err();
    assert!(err.to_string().contains("retrieve"), "{err}");
    let manifest = Manifest::read(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(manifest.status, "failed at retrieve");
}

#[test]
fn rm3_grid_table_has_every_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let csv = run_rm3_grid(&smoke_config(Pipeline::Sparse, dir.path())).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 19);
    assert!(rows[0].starts_with("BM25,"));
    assert!(rows.iter().any(|r| r.starts_with("+RM3 (5-5-0.5),")));
    assert_eq!(
        fs::read_to_string(dir.path().join("rm3_grid.csv")).unwrap(),
        csv
    );
}
