use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures/smoke")
        .join(file)
}

fn fullrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fullrank"))
        .args(args)
        .env_remove("FULLRANK_DATA_ROOT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = fullrank(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn index_search_evaluate_ttest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let collection = smoke("collection.jsonl");
    let test = smoke("test.jsonl");
    let idx = d.join("idx.frix");
    ok(&["index", "--collection", p(&collection), "--out", p(&idx)]);

    let single = ok(&[
        "search",
        "--index",
        p(&idx),
        "--query",
        "printer queue jam",
        "-k",
        "3",
    ]);
    assert_eq!(single.lines().count(), 3);
    assert!(single.lines().all(|l| l.starts_with("q Q0 r")));

    for (name, extra) in [("bm25", vec![]), ("rm3", vec!["--rm3", "5-5-0.5"])] {
        let run = d.join(format!("{name}.trec"));
        let mut args = vec![
            "search",
            "--index",
            p(&idx),
            "--dialogues",
            p(&test),
            "--collection",
            p(&collection),
            "--out",
            p(&run),
            "--tag",
            name,
        ];
        args.extend(extra);
        ok(&args);
        let eval = d.join(format!("{name}.json"));
        let recall = ok(&[
            "evaluate",
            "--run",
            p(&run),
            "--split",
            p(&test),
            "--collection",
            p(&collection),
            "--ks",
            "1,10,100",
            "--out",
            p(&eval),
        ]);
        let recall: serde_json::Value = serde_json::from_str(&recall).unwrap();
        assert!(recall["R@10"].as_f64().unwrap() > 0.0);
    }
    let t = ok(&[
        "ttest",
        "--a",
        p(&d.join("bm25.json")),
        "--b",
        p(&d.join("bm25.json")),
    ]);
    let t: serde_json::Value = serde_json::from_str(&t).unwrap();
    assert_eq!(t["p_value"], 1.0);
    assert!(t["t_statistic"].is_null());
}

#[test]
fn expansion_and_embedding_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let collection = smoke("collection.jsonl");
    let expanded = d.join("expanded.jsonl");
    ok(&[
        "expand-attach",
        "--collection",
        p(&collection),
        "--expansions",
        p(&smoke("expansions.jsonl")),
        "--out",
        p(&expanded),
    ]);
    assert!(fs::read_to_string(&expanded)
        .unwrap()
        .contains("how do i fix my"));
    let stats = ok(&[
        "expand-stats",
        "--collection",
        p(&collection),
        "--expansions",
        p(&smoke("expansions.jsonl")),
        "--split",
        p(&smoke("test.jsonl")),
    ]);
    assert!(serde_json::from_str::<serde_json::Value>(&stats).is_ok());
    ok(&[
        "index",
        "--collection",
        p(&expanded),
        "--use-expansions",
        "--out",
        p(&d.join("x.frix")),
    ]);

    let vecs = d.join("r.dvec");
    ok(&[
        "embed",
        "--collection",
        p(&collection),
        "--buckets",
        "64",
        "--dim",
        "4",
        "--out",
        p(&vecs),
    ]);
    let summary = ok(&[
        "import-embeddings",
        "--input",
        p(&vecs),
        "--collection",
        p(&collection),
    ]);
    let summary: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(summary["rows"], 100);
    assert_eq!(summary["dim"], 4);

    let ctx = d.join("c.dvec");
    ok(&[
        "embed",
        "--collection",
        p(&collection),
        "--dialogues",
        p(&smoke("test.jsonl")),
        "--buckets",
        "64",
        "--dim",
        "4",
        "--out",
        p(&ctx),
    ]);
    // Context vectors do not cover response ids.
    let out = fullrank(&[
        "import-embeddings",
        "--input",
        p(&ctx),
        "--collection",
        p(&collection),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

fn write_config(d: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "name": "cli",
        "pipeline": "dense_finetune",
        "data": {
            "name": "smoke",
            "collection": "collection.jsonl",
            "train": "train.jsonl",
            "validation": "validation.jsonl",
            "test": "test.jsonl"
        },
        "train": { "steps": 20, "validate_every": 10, "negatives_per_example": 3, "validation_candidates": 4 },
        "encoder": { "buckets": 256, "dim": 8, "init_scale": 0.1 },
        "k": 20,
        "ks": [1, 10],
        "output_dir": p(&d.join("run"))
    });
    let path = d.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn config_driven_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d);
    let root = smoke("")
        .to_str()
        .unwrap()
        .trim_end_matches('/')
        .to_string();
    let set_root = format!("data.root=\"{root}\"");

    ok(&[
        "sample-negatives",
        "--config",
        p(&cfg),
        "--set",
        &set_root,
        "--out",
        p(&d.join("neg.jsonl")),
    ]);
    assert_eq!(
        fs::read_to_string(d.join("neg.jsonl"))
            .unwrap()
            .lines()
            .count(),
        24
    );
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--set",
        &set_root,
        "--negatives",
        p(&d.join("neg.jsonl")),
        "--out",
        p(&d.join("ckpt")),
    ]);
    assert!(d.join("ckpt/checkpoint.json").is_file());
    ok(&[
        "embed",
        "--collection",
        p(&smoke("collection.jsonl")),
        "--checkpoint",
        p(&d.join("ckpt")),
        "--out",
        p(&d.join("t.dvec")),
    ]);

    // The data root may also come from the environment.
    let out = Command::new(env!("CARGO_BIN_EXE_fullrank"))
        .args(["run", "--config", p(&cfg), "--set", "pipeline=sparse"])
        .env("FULLRANK_DATA_ROOT", &root)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let recall: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(recall["R@10"].as_f64().unwrap() > 0.0);
    let first = fs::read(d.join("run/run.trec")).unwrap();
    ok(&[
        "replay",
        "--manifest",
        p(&d.join("run/manifest.json")),
        "--out",
        p(&d.join("again")),
    ]);
    assert_eq!(fs::read(d.join("again/run.trec")).unwrap(), first);

    let grid = ok(&["rm3-grid", "--config", p(&cfg), "--set", &set_root]);
    assert_eq!(grid.lines().count(), 20);
}

#[test]
fn export_annotation_worksheet() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d);
    let root = smoke("")
        .to_str()
        .unwrap()
        .trim_end_matches('/')
        .to_string();
    let set_root = format!("data.root=\"{root}\"");
    ok(&[
        "sample-negatives",
        "--config",
        p(&cfg),
        "--set",
        &set_root,
        "--out",
        p(&d.join("random.jsonl")),
    ]);
    ok(&[
        "sample-negatives",
        "--config",
        p(&cfg),
        "--set",
        &set_root,
        "--set",
        "sampler.type=sparse_topk",
        "--out",
        p(&d.join("bm25.jsonl")),
    ]);
    let spec = serde_json::json!([{
        "name": "smoke",
        "collection": smoke("collection.jsonl"),
        "split": smoke("train.jsonl"),
        "samplers": [["random", "random.jsonl"], ["bm25", "bm25.jsonl"]]
    }]);
    fs::write(d.join("spec.json"), spec.to_string()).unwrap();
    ok(&[
        "export-annotation",
        "--spec",
        p(&d.join("spec.json")),
        "--contexts",
        "5",
        "--negatives",
        "3",
        "--out",
        p(&d.join("sheet.csv")),
    ]);
    let sheet = fs::read_to_string(d.join("sheet.csv")).unwrap();
    assert_eq!(
        sheet.lines().next().unwrap(),
        "dataset,context_id,context,sampler,negative_id,negative,relevance"
    );
    assert_eq!(sheet.lines().count(), 1 + 5 * 2 * 3);
}

#[test]
fn exit_codes() {
    assert_eq!(fullrank(&["--version"]).status.code(), Some(0));
    // Unknown flag.
    assert_eq!(fullrank(&["index", "--bogus"]).status.code(), Some(1));
    // Missing input file.
    let out = fullrank(&[
        "index",
        "--collection",
        "/nonexistent.jsonl",
        "--out",
        "/tmp/x.frix",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
    // Malformed override.
    assert_eq!(
        fullrank(&["run", "--set", "novalue"]).status.code(),
        Some(1)
    );
    // Bad RM3 label.
    assert_eq!(
        fullrank(&["search", "--index", "x", "--query", "q", "--rm3", "5-5"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn runtime_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // An unwritable output location is an I/O failure, not a validation error.
    let blocker = d.join("file");
    fs::write(&blocker, "").unwrap();
    let out = fullrank(&[
        "index",
        "--collection",
        p(&smoke("collection.jsonl")),
        "--out",
        p(&blocker.join("sub/idx.frix")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
