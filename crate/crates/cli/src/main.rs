//! Command-line front end.
//!
//! Exit status: 0 on success, 1 when inputs or configuration are invalid,
//! 2 when a run fails for any other reason.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use fullrank::corpus::{
    concat_context, ingest_collection, ingest_dialogues, Analyzer, AnalyzerConfig, Collection,
    CollectionFormat, DatasetSplit, EmptyPolicy,
};
use fullrank::dense::{
    build_store, encode, import_store, Encoder, HashedEncoder, HashedEncoderConfig, VectorStore,
};
use fullrank::eval::{evaluate_full_rank, read_run, write_run, EvalReport, MissingPolicy, RunFile};
use fullrank::expansion::{attach_expansions, expansion_stats, rm3_expand, Rm3Config};
use fullrank::harness::{
    compare_reports, initial_encoder, replay, run_experiment, run_rm3_grid, sample_for_config,
    ExperimentConfig, TrainingData,
};
use fullrank::negatives::{
    export_annotation_sample, read_negatives, write_negatives, AnnotationSource, SampleSet,
    DEFAULT_CONTEXTS_PER_DATASET, DEFAULT_NEGATIVES_PER_CONTEXT,
};
use fullrank::ranking::ScoredList;
use fullrank::sparse::{Bm25Params, InvertedIndex};
use fullrank::training::{load_checkpoint, save_checkpoint, train, write_log};
use fullrank::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fullrank",
    version,
    about = "Full-rank response retrieval experiments"
)]
struct Cli {
    /// Log verbosity; repeat for more detail.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.learning_rate=0.05`. Applied
    /// after the config file, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct CollectionArgs {
    /// Response collection.
    #[arg(long)]
    collection: PathBuf,
    /// `jsonl` or `tsv`.
    #[arg(long, default_value = "jsonl", value_parser = parse_enum::<CollectionFormat>)]
    format: CollectionFormat,
    /// `reject`, `drop` or `allow` empty responses.
    #[arg(long, default_value = "reject", value_parser = parse_enum::<EmptyPolicy>)]
    empty: EmptyPolicy,
}

impl CollectionArgs {
    fn load(&self) -> Result<Collection> {
        ingest_collection(&self.collection, self.format, self.empty)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a BM25 index over a collection.
    Index {
        #[command(flatten)]
        collection: CollectionArgs,
        /// Index response text with its attached expansions.
        #[arg(long)]
        use_expansions: bool,
        #[arg(long, default_value_t = Bm25Params::default().k1)]
        k1: f64,
        #[arg(long, default_value_t = Bm25Params::default().b)]
        b: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve from an index for one query or every context of a split.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(
            long,
            conflicts_with = "dialogues",
            required_unless_present = "dialogues"
        )]
        query: Option<String>,
        /// Dialogue split; its ground-truth links are checked against `--collection`.
        #[arg(long, requires = "collection")]
        dialogues: Option<PathBuf>,
        #[arg(long)]
        collection: Option<PathBuf>,
        #[arg(short, long, default_value_t = 100)]
        k: usize,
        /// Expand queries with RM3, given as `terms-docs-weight`.
        #[arg(long, value_parser = parse_rm3)]
        rm3: Option<Rm3Config>,
        #[arg(long, default_value = "bm25")]
        tag: String,
        /// Run file to write; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attach expansion predictions to a collection.
    ExpandAttach {
        #[command(flatten)]
        collection: CollectionArgs,
        #[arg(long)]
        expansions: PathBuf,
        /// Expanded collection (JSONL).
        #[arg(long)]
        out: PathBuf,
    },
    /// Token statistics of expansions over the ground-truth responses of a split.
    ExpandStats {
        #[command(flatten)]
        collection: CollectionArgs,
        #[arg(long)]
        expansions: PathBuf,
        #[arg(long)]
        split: PathBuf,
    },
    /// Encode responses (or the contexts of a split) with a hashed encoder.
    Embed {
        #[command(flatten)]
        collection: CollectionArgs,
        /// Embed the contexts of this split instead of the responses.
        #[arg(long)]
        dialogues: Option<PathBuf>,
        /// Trained checkpoint directory; a seeded random encoder otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = HashedEncoderConfig::default().buckets)]
        buckets: usize,
        #[arg(long, default_value_t = HashedEncoderConfig::default().dim)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate an embedding file and report its shape and id coverage.
    ImportEmbeddings {
        #[arg(long)]
        input: PathBuf,
        /// Collection whose ids the rows must cover.
        #[arg(long)]
        collection: Option<PathBuf>,
    },
    /// Sample training negatives as configured.
    SampleNegatives {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the hashed encoder as configured.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Previously sampled negatives; sampled as configured otherwise.
        #[arg(long)]
        negatives: Option<PathBuf>,
        /// Directory for the checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall@K of a run file against a split.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        collection: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,10")]
        ks: Vec<usize>,
        /// `error` or `miss` for split queries absent from the run.
        #[arg(long, default_value = "error", value_parser = parse_enum::<MissingPolicy>)]
        missing: MissingPolicy,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired t-test on per-query hits of two evaluation reports.
    Ttest {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
        /// Number of comparisons for the Bonferroni correction.
        #[arg(long, default_value_t = 1)]
        comparisons: usize,
        #[arg(long, default_value = "a vs b")]
        label: String,
    },
    /// Write a CSV worksheet of sampled negatives for manual annotation.
    ExportAnnotation {
        /// JSON list of `{name, collection, split, samplers: [[name, negatives.jsonl], ...]}`;
        /// paths resolve against the spec file.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CONTEXTS_PER_DATASET)]
        contexts: usize,
        #[arg(long, default_value_t = DEFAULT_NEGATIVES_PER_CONTEXT)]
        negatives: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate BM25 and every RM3 grid configuration.
    Rm3Grid {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run a full pipeline as configured.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Re-run the experiment recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_rm3(s: &str) -> std::result::Result<Rm3Config, String> {
    let parts: Vec<&str> = s.split('-').collect();
    let [t, d, w] = parts.as_slice() else {
        return Err(format!("expected terms-docs-weight, got `{s}`"));
    };
    let num = |x: &str| x.parse::<usize>().map_err(|e| format!("`{x}`: {e}"));
    let weight = w.parse::<f64>().map_err(|e| format!("`{w}`: {e}"))?;
    Rm3Config::new(num(t)?, num(d)?, weight).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
struct AnnotationDataset {
    name: String,
    collection: PathBuf,
    split: PathBuf,
    samplers: Vec<(String, PathBuf)>,
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_split(path: &Path, collection: &Collection) -> Result<DatasetSplit> {
    ingest_dialogues(path, collection, EmptyPolicy::Reject)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Index {
            collection,
            use_expansions,
            k1,
            b,
            out,
        } => {
            let c = collection.load()?;
            let index = InvertedIndex::build(
                &c,
                &AnalyzerConfig::default(),
                Bm25Params { k1, b },
                use_expansions,
            )?;
            index.save(&out)?;
            log::info!("indexed {} responses into {}", c.len(), out.display());
        }
        Command::Search {
            index,
            query,
            dialogues,
            collection,
            k,
            rm3,
            tag,
            out,
        } => {
            let index = InvertedIndex::load(&index)?;
            let queries: Vec<(String, String)> = match (query, dialogues) {
                (Some(q), _) => vec![("q".to_string(), q)],
                (None, Some(d)) => {
                    let c = ingest_collection(
                        &collection.expect("required by clap"),
                        CollectionFormat::Jsonl,
                        EmptyPolicy::Allow,
                    )?;
                    load_split(&d, &c)?
                        .iter()
                        .map(|ex| (ex.context.id.clone(), ex.context.joined_text()))
                        .collect()
                }
                (None, None) => unreachable!("required by clap"),
            };
            let lists = queries
                .iter()
                .map(|(id, text)| match &rm3 {
                    None => Ok(index.search(id, text.as_str(), k)),
                    Some(cfg) => match rm3_expand(&index, text, cfg, cfg.default_first_pass_k()) {
                        Ok(exp) => Ok(index.search(id, &exp.query, k)),
                        Err(e) if e.is_validation() => {
                            log::warn!("no results for `{id}`: {e}");
                            Ok(ScoredList::empty(id.clone(), k))
                        }
                        Err(e) => Err(e),
                    },
                })
                .collect::<Result<Vec<_>>>()?;
            let run = RunFile::from_scored_lists(&lists, &tag)?;
            match out {
                Some(p) => write_run(&p, &run)?,
                None => print!("{}", run.to_trec_string()),
            }
        }
        Command::ExpandAttach {
            collection,
            expansions,
            out,
        } => {
            let (expanded, report) = attach_expansions(&collection.load()?, &expansions)?;
            if !report.unmatched.is_empty() {
                log::warn!(
                    "{} expansion records match no response",
                    report.unmatched.len()
                );
            }
            expanded.write_jsonl(&out)?;
            log::info!("attached expansions to {} responses", report.matched);
        }
        Command::ExpandStats {
            collection,
            expansions,
            split,
        } => {
            let c = collection.load()?;
            let (expanded, _) = attach_expansions(&c, &expansions)?;
            let split = load_split(&split, &c)?;
            print_json(&expansion_stats(&split, &c, &expanded)?)?;
        }
        Command::Embed {
            collection,
            dialogues,
            checkpoint,
            buckets,
            dim,
            seed,
            out,
        } => {
            let c = collection.load()?;
            let encoder = match checkpoint {
                Some(dir) => load_checkpoint(&dir)?.0,
                None => HashedEncoder::random(
                    &HashedEncoderConfig {
                        buckets,
                        dim,
                        ..Default::default()
                    },
                    seed,
                ),
            };
            let analyzer = Analyzer::new(AnalyzerConfig::default());
            let store = match dialogues {
                None => build_store(&encoder, &c, &analyzer)?,
                Some(d) => {
                    let mut store = VectorStore::new(encoder.dim());
                    for ex in load_split(&d, &c)?.iter() {
                        let v = encode(&encoder, &concat_context(&ex.context), &analyzer).vector;
                        store.push(&ex.context.id, v.as_slice())?;
                    }
                    store
                }
            };
            store.export(&out)?;
        }
        Command::ImportEmbeddings { input, collection } => {
            let store = import_store(&input)?;
            let mut summary = serde_json::json!({ "rows": store.len(), "dim": store.dim() });
            if let Some(p) = collection {
                let c = ingest_collection(&p, CollectionFormat::Jsonl, EmptyPolicy::Allow)?;
                let missing: Vec<String> = c
                    .iter()
                    .filter(|r| store.get(&r.id).is_none())
                    .map(|r| r.id.clone())
                    .collect();
                if !missing.is_empty() {
                    return Err(Error::DanglingIds(missing));
                }
                summary["covers_collection"] = true.into();
            }
            print_json(&summary)?;
        }
        Command::SampleNegatives { config, out } => {
            let cfg = config.load()?.resolve()?;
            let data = TrainingData::load(&cfg)?;
            let (set, _) = sample_for_config(
                &cfg,
                &data.collection,
                &data.train,
                &data.analyzer,
                &initial_encoder(&cfg),
            )?;
            write_negatives(&out, &set)?;
            log::info!("sampled negatives for {} contexts", set.len());
        }
        Command::Train {
            config,
            negatives,
            out,
        } => {
            let cfg = config.load()?.resolve()?;
            let data = TrainingData::load(&cfg)?;
            let initial = initial_encoder(&cfg);
            let (set, pool): (SampleSet, Collection) = match negatives {
                Some(p) => (read_negatives(&p)?, data.collection.clone()),
                None => sample_for_config(
                    &cfg,
                    &data.collection,
                    &data.train,
                    &data.analyzer,
                    &initial,
                )?,
            };
            let training_collection = set.augment(&pool)?;
            let state = train(
                &data.train,
                &data.validation,
                &training_collection,
                &data.analyzer,
                initial,
                &set,
                &cfg.train,
            )?;
            save_checkpoint(&out, &state, &cfg.train)?;
            write_log(&out.join("log.jsonl"), &state.log)?;
            log::info!(
                "best validation MAP {:.4} at step {}",
                state.best_validation_map,
                state.best_step
            );
        }
        Command::Evaluate {
            run,
            split,
            collection,
            ks,
            missing,
            out,
        } => {
            let c = ingest_collection(&collection, CollectionFormat::Jsonl, EmptyPolicy::Allow)?;
            let report =
                evaluate_full_rank(&read_run(&run)?, &load_split(&split, &c)?, &ks, missing)?;
            if let Some(p) = out {
                write_text(&p, &(serde_json::to_string_pretty(&report)? + "\n"))?;
            }
            print_json(&report.recall)?;
        }
        Command::Ttest {
            a,
            b,
            k,
            confidence,
            comparisons,
            label,
        } => {
            let read = |p: &Path| -> Result<EvalReport> {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Ok(serde_json::from_str(&text)?)
            };
            print_json(&compare_reports(
                &label,
                &read(&a)?,
                &read(&b)?,
                k,
                confidence,
                comparisons,
            )?)?;
        }
        Command::ExportAnnotation {
            spec,
            contexts,
            negatives,
            seed,
            out,
        } => {
            let text = fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let datasets: Vec<AnnotationDataset> = serde_json::from_str(&text)?;
            let base = spec.parent().unwrap_or(Path::new("."));
            let mut loaded = Vec::new();
            for d in &datasets {
                let c = ingest_collection(
                    &base.join(&d.collection),
                    CollectionFormat::Jsonl,
                    EmptyPolicy::Allow,
                )?;
                let split = load_split(&base.join(&d.split), &c)?;
                let sets = d
                    .samplers
                    .iter()
                    .map(|(name, p)| Ok((name.as_str(), read_negatives(&base.join(p))?)))
                    .collect::<Result<Vec<_>>>()?;
                loaded.push((d.name.as_str(), c, split, sets));
            }
            let sources: Vec<AnnotationSource<'_>> = loaded
                .iter()
                .map(|(name, c, split, sets)| AnnotationSource {
                    dataset: name,
                    split,
                    collection: c,
                    samplers: sets.iter().map(|(n, s)| (*n, s)).collect(),
                })
                .collect();
            let rows = export_annotation_sample(&sources, contexts, negatives, seed, &out)?;
            log::info!("wrote {rows} rows to {}", out.display());
        }
        Command::Rm3Grid { config } => print!("{}", run_rm3_grid(&config.load()?)?),
        Command::Run { config } => {
            let outcome = run_experiment(&config.load()?)?;
            print_json(&outcome.report.recall)?;
        }
        Command::Replay { manifest, out } => {
            let outcome = replay(&manifest, out.as_deref())?;
            print_json(&outcome.report.recall)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
