//! Experiment orchestration: declarative configs, staged pipelines and
//! reproducibility manifests.
//!
//! A run executes ingest, optional expansion, indexing or embedding,
//! optional sampling and training, retrieval and evaluation, writing each
//! stage's artifacts into the output directory. The manifest records the
//! fully resolved config and fingerprints of every input file, which is all
//! `replay` needs to reproduce the run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    concat_context, ingest_collection, ingest_dialogues, Analyzer, AnalyzerConfig, Collection,
    CollectionFormat, DatasetSplit, EmptyPolicy,
};
use crate::dense::{
    build_store, dense_search, encode, fnv1a64, import_store, HashedEncoder, HashedEncoderConfig,
    LexiconEncoder,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_full_rank, paired_ttest, write_run, EvalReport, MissingPolicy, RunFile,
    SignificanceReport, SummaryTable,
};
use crate::expansion::{attach_expansions, expansion_stats, rm3_expand, Rm3Config};
use crate::negatives::{
    sample, write_negatives, Backends, CorpusChoice, DenseBackend, SampleSet, SamplerKind,
    SamplerSpec,
};
use crate::ranking::ScoredList;
use crate::seeds::derive_seed;
use crate::sparse::{Bm25Params, InvertedIndex};
use crate::training::{save_checkpoint, train, write_log, TrainConfig};

/// Environment variable naming the directory relative data paths resolve against.
pub const DATA_ROOT_ENV: &str = "FULLRANK_DATA_ROOT";

/// Namespace prefix for passages taken from an external collection.
pub const EXTERNAL_NAMESPACE: &str = "ext:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    #[default]
    Sparse,
    SparseRm3,
    SparseExpansion,
    DenseZeroshotImport,
    DenseFinetune,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Base for relative paths; falls back to the environment, then to the
    /// config file's directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub name: String,
    pub collection: PathBuf,
    pub collection_format: CollectionFormat,
    pub empty_policy: EmptyPolicy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
    pub test: PathBuf,
    /// Expansion JSONL for `sparse_expansion`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expansions: Option<PathBuf>,
    /// DVEC of response vectors for `dense_zeroshot_import`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_embeddings: Option<PathBuf>,
    /// DVEC of context vectors, keyed by context id.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_embeddings: Option<PathBuf>,
    /// DVEC of token vectors used as the query encoder of dense negative sampling.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler_lexicon: Option<PathBuf>,
    /// Additional responses for sampling from an expanded corpus.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external_collection: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub pipeline: Pipeline,
    pub data: DataConfig,
    pub analyzer: AnalyzerConfig,
    pub bm25: Bm25Params,
    pub rm3: Rm3Config,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rm3_first_pass_k: Option<usize>,
    pub sampler: SamplerSpec,
    pub train: TrainConfig,
    pub encoder: HashedEncoderConfig,
    /// Retrieval depth of the run file.
    pub k: usize,
    pub ks: Vec<usize>,
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(skip)]
    base_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            pipeline: Pipeline::Sparse,
            data: DataConfig {
                name: "dataset".into(),
                ..DataConfig::default()
            },
            analyzer: AnalyzerConfig::default(),
            bm25: Bm25Params::default(),
            rm3: Rm3Config::default(),
            rm3_first_pass_k: None,
            sampler: SamplerSpec::default(),
            train: TrainConfig::default(),
            encoder: HashedEncoderConfig::default(),
            k: 100,
            ks: vec![1, 10],
            output_dir: PathBuf::from("runs/experiment"),
            seed: 42,
            base_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a JSON config; relative data paths may resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    /// Applies `key.path=value` overrides. Values parse as JSON when possible
    /// and are taken as strings otherwise.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut value = serde_json::to_value(&*self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("override `{o}` is not key=value")))?;
            let parsed = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            set_path(&mut value, key, parsed)?;
        }
        let base = self.base_dir.take();
        *self = serde_json::from_value(value)?;
        self.base_dir = base;
        Ok(())
    }

    fn data_root(&self) -> Option<PathBuf> {
        self.data
            .root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .or_else(|| self.base_dir.clone())
    }

    /// Makes data paths absolute, derives component seeds from `seed` and
    /// checks that the pipeline's inputs exist. Idempotent.
    pub fn resolve(&self) -> Result<Self> {
        let mut cfg = self.clone();
        let root = cfg.data_root();
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                if let Some(r) = &root {
                    *p = r.join(&*p);
                }
            }
        };
        let d = &mut cfg.data;
        fix(&mut d.collection);
        fix(&mut d.test);
        for p in [
            &mut d.train,
            &mut d.validation,
            &mut d.expansions,
            &mut d.response_embeddings,
            &mut d.context_embeddings,
            &mut d.sampler_lexicon,
            &mut d.external_collection,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if let SamplerKind::GeneratedFile { path } = &mut cfg.sampler.kind {
            fix(path);
        }
        if let SamplerKind::Composite { parts } = &mut cfg.sampler.kind {
            for part in parts {
                if let SamplerKind::GeneratedFile { path } = &mut part.kind {
                    fix(path);
                }
            }
        }
        cfg.data.root = None;
        cfg.base_dir = None;
        cfg.sampler.seed = derive_seed(cfg.seed, "sampling");
        if let SamplerKind::Composite { parts } = &mut cfg.sampler.kind {
            for (i, part) in parts.iter_mut().enumerate() {
                part.seed = derive_seed(cfg.seed, &format!("sampling:{i}"));
            }
        }
        cfg.train.seed = derive_seed(cfg.seed, "training");
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.ks.is_empty() || self.ks.iter().any(|&k| k == 0 || k > self.k) {
            return Err(Error::Invalid(format!(
                "cutoffs {:?} must be positive and within the retrieval depth {}",
                self.ks, self.k
            )));
        }
        let mut required: Vec<(&str, Option<&PathBuf>)> = vec![
            ("data.collection", Some(&self.data.collection)),
            ("data.test", Some(&self.data.test)),
        ];
        match self.pipeline {
            Pipeline::Sparse | Pipeline::SparseRm3 => {}
            Pipeline::SparseExpansion => {
                required.push(("data.expansions", self.data.expansions.as_ref()))
            }
            Pipeline::DenseZeroshotImport => {
                required.push((
                    "data.response_embeddings",
                    self.data.response_embeddings.as_ref(),
                ));
                required.push((
                    "data.context_embeddings",
                    self.data.context_embeddings.as_ref(),
                ));
            }
            Pipeline::DenseFinetune => {
                required.push(("data.train", self.data.train.as_ref()));
                required.push(("data.validation", self.data.validation.as_ref()));
                if self.sampler.corpus == CorpusChoice::Expanded {
                    required.push((
                        "data.external_collection",
                        self.data.external_collection.as_ref(),
                    ));
                }
                self.sampler.validate()?;
                self.train.validate()?;
            }
        }
        if self.pipeline == Pipeline::SparseRm3 {
            self.rm3.validate()?;
        }
        for (key, path) in required {
            match path {
                None => {
                    return Err(Error::Invalid(format!(
                        "`{key}` is required for this pipeline"
                    )))
                }
                Some(p) if !p.is_file() => {
                    return Err(Error::Invalid(format!(
                        "`{key}`: {} does not exist",
                        p.display()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Input files of the resolved config, keyed by config path.
    fn inputs(&self) -> Vec<(String, PathBuf)> {
        let d = &self.data;
        let mut out = vec![
            ("data.collection".to_string(), d.collection.clone()),
            ("data.test".to_string(), d.test.clone()),
        ];
        let optional = [
            ("data.train", &d.train),
            ("data.validation", &d.validation),
            ("data.expansions", &d.expansions),
            ("data.response_embeddings", &d.response_embeddings),
            ("data.context_embeddings", &d.context_embeddings),
            ("data.sampler_lexicon", &d.sampler_lexicon),
            ("data.external_collection", &d.external_collection),
        ];
        for (k, p) in optional {
            if let Some(p) = p {
                out.push((k.to_string(), p.clone()));
            }
        }
        let generated = |s: &SamplerSpec| match &s.kind {
            SamplerKind::GeneratedFile { path } => Some(path.clone()),
            _ => None,
        };
        if let Some(p) = generated(&self.sampler) {
            out.push(("sampler.generated".into(), p));
        }
        if let SamplerKind::Composite { parts } = &self.sampler.kind {
            for (i, part) in parts.iter().enumerate() {
                if let Some(p) = generated(part) {
                    out.push((format!("sampler.parts.{i}.generated"), p));
                }
            }
        }
        out
    }

    /// Short method name for tables, e.g. `bm25+rm3(10-10-0.5)`.
    pub fn method_label(&self) -> String {
        match self.pipeline {
            Pipeline::Sparse => "bm25".into(),
            Pipeline::SparseRm3 => format!("bm25+rm3({})", self.rm3.label()),
            Pipeline::SparseExpansion => "bm25+expansion".into(),
            Pipeline::DenseZeroshotImport => "dense-import".into(),
            Pipeline::DenseFinetune => format!("dense-finetune[{}]", self.sampler.label()),
        }
    }
}

fn set_path(value: &mut serde_json::Value, key: &str, new: serde_json::Value) -> Result<()> {
    let mut cur = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Invalid(format!(
                "override `{key}`: `{part}` is not inside an object"
            ))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), new);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Err(Error::Invalid("empty override key".into()))
}

/// Hex FNV-1a fingerprint of a file's bytes.
pub fn file_fingerprint(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub config: ExperimentConfig,
    /// Config path of each input file and its fingerprint.
    pub inputs: BTreeMap<String, String>,
    pub completed_stages: Vec<String>,
    /// `completed`, `running`, or `failed at <stage>`.
    pub status: String,
    pub metrics: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub output_dir: PathBuf,
    pub report: EvalReport,
    pub manifest: Manifest,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    manifest: Manifest,
}

impl Runner<'_> {
    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
        log::info!("stage {name}");
        match f(&self.dir) {
            Ok(v) => {
                self.manifest.completed_stages.push(name.to_string());
                Ok(v)
            }
            Err(e) => {
                self.manifest.status = format!("failed at {name}");
                if let Err(w) = self.manifest.write(&self.dir) {
                    log::error!("could not record failure in manifest: {w}");
                }
                Err(Error::Stage {
                    stage: name,
                    source: Box::new(e),
                })
            }
        }
    }

    fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, serde_json::to_string_pretty(value)? + "\n")
            .map_err(|e| Error::io(&path, e))
    }
}

fn load_split(path: &Path, collection: &Collection) -> Result<DatasetSplit> {
    ingest_dialogues(path, collection, EmptyPolicy::Reject)
}

/// Runs a resolved config end to end.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let cfg = &cfg.resolve()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut inputs = BTreeMap::new();
    for (key, path) in cfg.inputs() {
        inputs.insert(key, file_fingerprint(&path)?);
    }
    let mut r = Runner {
        cfg,
        dir: dir.clone(),
        manifest: Manifest {
            tool: format!("fullrank {}", env!("CARGO_PKG_VERSION")),
            config: cfg.clone(),
            inputs,
            completed_stages: Vec::new(),
            status: "running".into(),
            metrics: BTreeMap::new(),
        },
    };
    r.manifest.write(&dir)?;

    let (collection, test) = r.stage("ingest", |_| {
        let c = ingest_collection(
            &cfg.data.collection,
            cfg.data.collection_format,
            cfg.data.empty_policy,
        )?;
        let test = load_split(&cfg.data.test, &c)?;
        Ok((c, test))
    })?;

    let lists = match cfg.pipeline {
        Pipeline::Sparse | Pipeline::SparseRm3 | Pipeline::SparseExpansion => {
            sparse_pipeline(&mut r, collection.clone(), &test)?
        }
        Pipeline::DenseZeroshotImport => r.stage("retrieve", |_| imported_dense(cfg, &test))?,
        Pipeline::DenseFinetune => finetune_pipeline(&mut r, &collection, &test)?,
    };

    let report = r.stage("evaluate", |dir| {
        let run = RunFile::from_scored_lists(&lists, &cfg.name)?;
        write_run(&dir.join("run.trec"), &run)?;
        let report = evaluate_full_rank(&run, &test, &cfg.ks, MissingPolicy::Miss)?;
        Runner::write_json(dir, "eval.json", &report)?;
        let mut table = SummaryTable::new(&report.ks);
        table.add(&cfg.method_label(), &cfg.data.name, &report);
        let path = dir.join("summary.csv");
        fs::write(&path, table.to_csv()?).map_err(|e| Error::io(&path, e))?;
        Ok(report)
    })?;
    for (k, v) in &report.recall {
        r.manifest.metrics.insert(k.clone(), *v);
    }
    r.manifest.status = "completed".into();
    r.manifest.write(&dir)?;
    Ok(ExperimentOutcome {
        output_dir: dir,
        report,
        manifest: r.manifest,
    })
}

fn sparse_pipeline(
    r: &mut Runner<'_>,
    collection: Collection,
    test: &DatasetSplit,
) -> Result<Vec<ScoredList>> {
    let cfg = r.cfg;
    let use_expansions = cfg.pipeline == Pipeline::SparseExpansion;
    let collection = if use_expansions {
        r.stage("expand", |dir| {
            let path = cfg.data.expansions.as_ref().expect("validated");
            let (expanded, report) = attach_expansions(&collection, path)?;
            if !report.unmatched.is_empty() {
                log::warn!(
                    "{} expansion records match no response",
                    report.unmatched.len()
                );
            }
            let stats = expansion_stats(test, &collection, &expanded)?;
            Runner::write_json(dir, "expansion_stats.json", &stats)?;
            Ok(expanded)
        })?
    } else {
        collection
    };
    let index = r.stage("index", |dir| {
        let index = InvertedIndex::build(&collection, &cfg.analyzer, cfg.bm25, use_expansions)?;
        index.save(&dir.join("index.frix"))?;
        Ok(index)
    })?;
    r.stage("retrieve", |_| {
        test.iter()
            .map(|ex| {
                let text = ex.context.joined_text();
                if cfg.pipeline == Pipeline::SparseRm3 {
                    let first_pass = cfg
                        .rm3_first_pass_k
                        .unwrap_or_else(|| cfg.rm3.default_first_pass_k());
                    match rm3_expand(&index, &text, &cfg.rm3, first_pass) {
                        Ok(exp) => Ok(index.search(&ex.context.id, &exp.query, cfg.k)),
                        Err(e) => {
                            log::warn!("rm3 skipped for `{}`: {e}", ex.context.id);
                            Ok(ScoredList::empty(ex.context.id.clone(), cfg.k))
                        }
                    }
                } else {
                    Ok(index.search(&ex.context.id, text.as_str(), cfg.k))
                }
            })
            .collect()
    })
}

fn imported_dense(cfg: &ExperimentConfig, test: &DatasetSplit) -> Result<Vec<ScoredList>> {
    let responses = import_store(cfg.data.response_embeddings.as_ref().expect("validated"))?;
    let contexts = import_store(cfg.data.context_embeddings.as_ref().expect("validated"))?;
    let missing: Vec<String> = test
        .iter()
        .filter(|ex| contexts.get(&ex.context.id).is_none())
        .map(|ex| ex.context.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::DanglingIds(missing));
    }
    test.iter()
        .map(|ex| {
            let q = contexts.get(&ex.context.id).expect("checked");
            dense_search(&responses, &ex.context.id, q, cfg.k)
        })
        .collect()
}

fn finetune_pipeline(
    r: &mut Runner<'_>,
    collection: &Collection,
    test: &DatasetSplit,
) -> Result<Vec<ScoredList>> {
    let cfg = r.cfg;
    let analyzer = Analyzer::new(cfg.analyzer.clone());
    let (train_split, validation) = r.stage("ingest-training", |_| {
        let t = load_split(cfg.data.train.as_ref().expect("validated"), collection)?;
        let v = load_split(cfg.data.validation.as_ref().expect("validated"), collection)?;
        Ok((t, v))
    })?;
    let initial = initial_encoder(cfg);

    let (set, training_collection) = r.stage("sample", |dir| {
        let (set, pool) = sample_for_config(cfg, collection, &train_split, &analyzer, &initial)?;
        write_negatives(&dir.join("negatives.jsonl"), &set)?;
        let training_collection = set.augment(&pool)?;
        Ok((set, training_collection))
    })?;

    let state = r.stage("train", |dir| {
        let state = train(
            &train_split,
            &validation,
            &training_collection,
            &analyzer,
            initial.clone(),
            &set,
            &cfg.train,
        )?;
        save_checkpoint(&dir.join("checkpoint"), &state, &cfg.train)?;
        write_log(&dir.join("log.jsonl"), &state.log)?;
        Ok(state)
    })?;
    r.manifest
        .metrics
        .insert("best_validation_map".into(), state.best_validation_map);
    r.manifest.metrics.insert(
        "initial_validation_map".into(),
        state.initial_validation_map,
    );

    r.stage("retrieve", |dir| {
        let store = build_store(&state.encoder, collection, &analyzer)?;
        store.export(&dir.join("responses.dvec"))?;
        test.iter()
            .map(|ex| {
                let q = encode(&state.encoder, &concat_context(&ex.context), &analyzer);
                dense_search(&store, &ex.context.id, q.vector.as_slice(), cfg.k)
            })
            .collect()
    })
}

/// Samples training negatives as configured. Returns the set and the pool
/// it was drawn from (the native collection, or its union with the external
/// one under [`EXTERNAL_NAMESPACE`]).
pub fn sample_for_config(
    cfg: &ExperimentConfig,
    collection: &Collection,
    train_split: &DatasetSplit,
    analyzer: &Analyzer,
    initial: &HashedEncoder,
) -> Result<(SampleSet, Collection)> {
    let pool = match cfg.sampler.corpus {
        CorpusChoice::Native => collection.clone(),
        CorpusChoice::Expanded => {
            let path = cfg.data.external_collection.as_ref().ok_or_else(|| {
                Error::Invalid(
                    "`data.external_collection` is required for the expanded pool".into(),
                )
            })?;
            let ext = ingest_collection(path, cfg.data.collection_format, cfg.data.empty_policy)?;
            collection.union_namespaced(&ext, EXTERNAL_NAMESPACE)?
        }
    };
    let needs = |k: fn(&SamplerKind) -> bool| {
        k(&cfg.sampler.kind)
            || matches!(&cfg.sampler.kind, SamplerKind::Composite { parts } if parts.iter().any(|p| k(&p.kind)))
    };
    let index = if needs(|k| matches!(k, SamplerKind::SparseTopk)) {
        Some(InvertedIndex::build(&pool, &cfg.analyzer, cfg.bm25, false)?)
    } else {
        None
    };
    let lexicon = match &cfg.data.sampler_lexicon {
        Some(p) => Some(LexiconEncoder::from_store(&import_store(p)?)),
        None => None,
    };
    let store = if needs(|k| matches!(k, SamplerKind::DenseTopk)) {
        Some(match &lexicon {
            Some(l) => build_store(l, &pool, analyzer)?,
            None => build_store(initial, &pool, analyzer)?,
        })
    } else {
        None
    };
    let dense = store.as_ref().map(|s| DenseBackend {
        store: s,
        encoder: match &lexicon {
            Some(l) => l as &dyn crate::dense::Encoder,
            None => initial,
        },
        analyzer,
    });
    let backends = Backends {
        index: index.as_ref(),
        dense,
    };
    let set = sample(
        &cfg.sampler,
        train_split,
        &pool,
        backends,
        cfg.train.negatives_per_example,
    )?;
    Ok((set, pool))
}

/// Initial encoder of a resolved config.
pub fn initial_encoder(cfg: &ExperimentConfig) -> HashedEncoder {
    HashedEncoder::random(&cfg.encoder, derive_seed(cfg.seed, "init"))
}

/// Loaded inputs of the fine-tuning pipeline.
pub struct TrainingData {
    pub collection: Collection,
    pub train: DatasetSplit,
    pub validation: DatasetSplit,
    pub analyzer: Analyzer,
}

impl TrainingData {
    /// Ingests the collection and the training and validation splits of a
    /// resolved config.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let missing = |k: &str| Error::Invalid(format!("`{k}` is required"));
        let collection = ingest_collection(
            &cfg.data.collection,
            cfg.data.collection_format,
            cfg.data.empty_policy,
        )?;
        let train = load_split(
            cfg.data
                .train
                .as_ref()
                .ok_or_else(|| missing("data.train"))?,
            &collection,
        )?;
        let validation = load_split(
            cfg.data
                .validation
                .as_ref()
                .ok_or_else(|| missing("data.validation"))?,
            &collection,
        )?;
        Ok(Self {
            collection,
            train,
            validation,
            analyzer: Analyzer::new(cfg.analyzer.clone()),
        })
    }
}

/// Re-runs the experiment recorded in `manifest_path`, optionally into
/// another directory. Inputs must still match their recorded fingerprints.
pub fn replay(manifest_path: &Path, output_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    let manifest = Manifest::read(manifest_path)?;
    let mut cfg = manifest.config.clone();
    if let Some(d) = output_dir {
        cfg.output_dir = d.to_path_buf();
    }
    let changed: Vec<String> = cfg
        .inputs()
        .into_iter()
        .filter(|(key, path)| file_fingerprint(path).ok().as_ref() != manifest.inputs.get(key))
        .map(|(key, _)| key)
        .collect();
    if !changed.is_empty() {
        return Err(Error::Invalid(format!(
            "inputs changed since the manifest was written: {changed:?}"
        )));
    }
    run_experiment(&cfg)
}

/// BM25 and every RM3 grid configuration on the test split, as a CSV table
/// (also written to `rm3_grid.csv` in the output directory).
pub fn run_rm3_grid(cfg: &ExperimentConfig) -> Result<String> {
    let mut cfg = cfg.clone();
    cfg.pipeline = Pipeline::SparseRm3;
    let cfg = cfg.resolve()?;
    let collection = ingest_collection(
        &cfg.data.collection,
        cfg.data.collection_format,
        cfg.data.empty_policy,
    )?;
    let test = load_split(&cfg.data.test, &collection)?;
    let index = InvertedIndex::build(&collection, &cfg.analyzer, cfg.bm25, false)?;
    let evaluate = |lists: Vec<ScoredList>| -> Result<EvalReport> {
        let run = RunFile::from_scored_lists(&lists, &cfg.name)?;
        evaluate_full_rank(&run, &test, &cfg.ks, MissingPolicy::Miss)
    };
    let mut table = SummaryTable::new(&cfg.ks);
    let bm25 = evaluate(
        test.iter()
            .map(|ex| index.search(&ex.context.id, ex.context.joined_text().as_str(), cfg.k))
            .collect(),
    )?;
    table.add("BM25", &cfg.data.name, &bm25);
    for rm3 in Rm3Config::grid() {
        let first_pass = cfg
            .rm3_first_pass_k
            .unwrap_or_else(|| rm3.default_first_pass_k());
        let mut lists = Vec::with_capacity(test.len());
        for ex in test.iter() {
            lists.push(
                match rm3_expand(&index, &ex.context.joined_text(), &rm3, first_pass) {
                    Ok(exp) => index.search(&ex.context.id, &exp.query, cfg.k),
                    Err(_) => ScoredList::empty(ex.context.id.clone(), cfg.k),
                },
            );
        }
        table.add(
            &format!("+RM3 ({})", rm3.label()),
            &cfg.data.name,
            &evaluate(lists)?,
        );
    }
    let csv = table.to_csv()?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join("rm3_grid.csv");
    fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    Ok(csv)
}

/// Paired t-test on per-query hit@`k` indicators of two reports over the
/// same queries.
pub fn compare_reports(
    label: &str,
    a: &EvalReport,
    b: &EvalReport,
    k: usize,
    confidence: f64,
    m_comparisons: usize,
) -> Result<SignificanceReport> {
    let qa: Vec<&str> = a.per_query.iter().map(|q| q.qid.as_str()).collect();
    let qb: Vec<&str> = b.per_query.iter().map(|q| q.qid.as_str()).collect();
    if qa != qb {
        return Err(Error::Invalid("reports cover different queries".into()));
    }
    paired_ttest(label, &a.hits(k), &b.hits(k), confidence, m_comparisons)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_or_strings() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides(&[
            "k=50",
            "train.learning_rate=0.5",
            "name=abc",
            "pipeline=\"sparse_rm3\"",
            "rm3.fb_docs=5",
        ])
        .unwrap();
        assert_eq!(cfg.k, 50);
        assert_eq!(cfg.train.learning_rate, 0.5);
        assert_eq!(cfg.name, "abc");
        assert_eq!(cfg.pipeline, Pipeline::SparseRm3);
        assert_eq!(cfg.rm3.fb_docs, 5);
        assert!(cfg.apply_overrides(&["k"]).is_err());
        assert!(cfg.apply_overrides(&["k=\"many\""]).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial =
            ExperimentConfig::from_json(r#"{"pipeline":"dense_finetune","k":10}"#).unwrap();
        assert_eq!(partial.pipeline, Pipeline::DenseFinetune);
        assert_eq!(partial.ks, vec![1, 10]);
    }

    #[test]
    fn resolve_reports_missing_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.data.root = Some(dir.path().to_path_buf());
        cfg.data.collection = "c.jsonl".into();
        cfg.data.test = "t.jsonl".into();
        let err = cfg.resolve().unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("data.collection"), "{err}");

        fs::write(dir.path().join("c.jsonl"), "").unwrap();
        fs::write(dir.path().join("t.jsonl"), "").unwrap();
        let resolved = cfg.resolve().unwrap();
        assert!(resolved.data.collection.is_absolute());
        assert_eq!(resolved.resolve().unwrap(), resolved);

        cfg.pipeline = Pipeline::SparseExpansion;
        assert!(cfg
            .resolve()
            .unwrap_err()
            .to_string()
            .contains("data.expansions"));
        cfg.pipeline = Pipeline::Sparse;
        cfg.ks = vec![1, 1000];
        assert!(cfg.resolve().is_err());
    }

    #[test]
    fn seeds_derive_from_top_level() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("c"), "").unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.data.collection = dir.path().join("c");
        cfg.data.test = dir.path().join("c");
        let a = cfg.resolve().unwrap();
        cfg.seed += 1;
        let b = cfg.resolve().unwrap();
        assert_ne!(a.sampler.seed, b.sampler.seed);
        assert_ne!(a.train.seed, a.sampler.seed);
    }
}
