//! Dialogue and response data model, dataset ingestion and text analysis.

mod analysis;

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use analysis::{
    analyze, Analyzer, AnalyzerConfig, Stemmer, TokenPattern, ENGLISH_STOPWORDS, TURN_SEP,
    UTTERANCE_SEP,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    #[serde(alias = "user", alias = "questioner")]
    Seeker,
    #[serde(alias = "agent", alias = "system", alias = "answerer")]
    Responder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub speaker: Speaker,
    /// Index of the turn this utterance belongs to; a turn is a maximal run
    /// of consecutive utterances by the same speaker.
    pub turn_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueContext {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl DialogueContext {
    /// Builds a context from `(text, speaker)` pairs, assigning turn indices.
    pub fn new<I, S>(id: impl Into<String>, utterances: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Speaker)>,
        S: Into<String>,
    {
        let id = id.into();
        let mut out: Vec<Utterance> = Vec::new();
        for (text, speaker) in utterances {
            let turn_index = match out.last() {
                None => 0,
                Some(prev) if prev.speaker == speaker => prev.turn_index,
                Some(prev) => prev.turn_index + 1,
            };
            out.push(Utterance {
                text: text.into(),
                speaker,
                turn_index,
            });
        }
        if out.is_empty() {
            return Err(Error::Invalid(format!("context `{id}` has no utterances")));
        }
        Ok(Self {
            id,
            utterances: out,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// The final utterance u^τ.
    pub fn last_utterance(&self) -> &Utterance {
        self.utterances
            .last()
            .expect("dialogue contexts hold at least one utterance")
    }

    /// Utterances joined by single spaces, without separators. Used as the
    /// bag-of-words query for sparse retrieval.
    pub fn joined_text(&self) -> String {
        self.utterances
            .iter()
            .map(|u| u.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Joins the utterances of `context` for dense encoding.
///
/// Every utterance but the last is followed by `[U]`; when the next utterance
/// comes from the other speaker, `[T]` follows the `[U]`.
pub fn concat_context(context: &DialogueContext) -> String {
    let mut out = String::new();
    let utts = &context.utterances;
    for (i, utt) in utts.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&utt.text);
        if let Some(next) = utts.get(i + 1) {
            out.push(' ');
            out.push_str(UTTERANCE_SEP);
            if next.speaker != utt.speaker {
                out.push(' ');
                out.push_str(TURN_SEP);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponsePassage {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub expansions: Vec<String>,
}

impl ResponsePassage {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            expansions: Vec::new(),
        }
    }

    /// Response text followed by every expansion, in order.
    pub fn indexed_text(&self) -> String {
        let mut out = self.text.clone();
        for e in &self.expansions {
            out.push(' ');
            out.push_str(e);
        }
        out
    }
}

/// The document side of retrieval. Iteration order is insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Collection {
    passages: Vec<ResponsePassage>,
    by_id: HashMap<String, usize>,
}

impl Collection {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_passages(passages: impl IntoIterator<Item = ResponsePassage>) -> Result<Self> {
        let mut c = Self::new();
        for p in passages {
            c.insert(p)?;
        }
        Ok(c)
    }

    pub fn insert(&mut self, passage: ResponsePassage) -> Result<()> {
        if self.by_id.contains_key(&passage.id) {
            return Err(Error::DuplicateId(passage.id));
        }
        self.by_id.insert(passage.id.clone(), self.passages.len());
        self.passages.push(passage);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ResponsePassage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub(crate) fn get_mut(&mut self, id: &str) -> Option<&mut ResponsePassage> {
        self.by_id.get(id).map(|&i| &mut self.passages[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Position of `id` in insertion order.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn passages(&self) -> &[ResponsePassage] {
        &self.passages
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ResponsePassage> {
        self.passages.iter()
    }

    /// Union with `other`, prefixing every id of `other` with `namespace`.
    pub fn union_namespaced(&self, other: &Collection, namespace: &str) -> Result<Collection> {
        let mut out = self.clone();
        for p in other.iter() {
            out.insert(ResponsePassage {
                id: format!("{namespace}{}", p.id),
                ..p.clone()
            })?;
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_jsonl(path, self.passages.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub context: DialogueContext,
    pub response_id: String,
}

/// Contexts paired with their single ground-truth response.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub examples: Vec<DialogueExample>,
}

impl DatasetSplit {
    /// Validates id uniqueness and ground-truth links against `collection`.
    pub fn new(examples: Vec<DialogueExample>, collection: &Collection) -> Result<Self> {
        let mut seen = HashSet::new();
        for ex in &examples {
            if !seen.insert(ex.context.id.as_str()) {
                return Err(Error::DuplicateId(ex.context.id.clone()));
            }
            if ex.context.is_empty() {
                return Err(Error::Invalid(format!(
                    "context `{}` has no utterances",
                    ex.context.id
                )));
            }
        }
        let dangling: Vec<String> = examples
            .iter()
            .filter(|ex| !collection.contains(&ex.response_id))
            .map(|ex| ex.response_id.clone())
            .collect();
        if !dangling.is_empty() {
            return Err(Error::DanglingIds(dangling));
        }
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, DialogueExample> {
        self.examples.iter()
    }

    pub fn get(&self, context_id: &str) -> Option<&DialogueExample> {
        self.examples.iter().find(|e| e.context.id == context_id)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let records = self.examples.iter().map(|ex| DialogueRecord {
            id: ex.context.id.clone(),
            utterances: ex
                .context
                .utterances
                .iter()
                .map(|u| UtteranceRecord {
                    text: u.text.clone(),
                    speaker: u.speaker,
                })
                .collect(),
            response_id: ex.response_id.clone(),
        });
        write_jsonl(path, records)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectionFormat {
    /// One `{"id", "text", "expansions"?}` object per line.
    #[default]
    Jsonl,
    /// `id<TAB>text` per line.
    Tsv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyPolicy {
    /// Empty text is an error.
    #[default]
    Reject,
    /// Empty records are dropped.
    Skip,
    /// Empty text is kept.
    Allow,
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    text: String,
    speaker: Speaker,
}

#[derive(Serialize, Deserialize)]
struct DialogueRecord {
    id: String,
    utterances: Vec<UtteranceRecord>,
    response_id: String,
}

pub fn ingest_collection(
    path: &Path,
    format: CollectionFormat,
    empty: EmptyPolicy,
) -> Result<Collection> {
    let mut collection = Collection::new();
    for_each_line(path, |line_no, line| {
        let passage = match format {
            CollectionFormat::Jsonl => serde_json::from_str::<ResponsePassage>(line)
                .map_err(|e| Error::parse(path, line_no, e.to_string()))?,
            CollectionFormat::Tsv => {
                let (id, text) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::parse(path, line_no, "expected `id<TAB>text`"))?;
                ResponsePassage::new(id, text)
            }
        };
        if passage.id.is_empty() {
            return Err(Error::parse(path, line_no, "empty id"));
        }
        if passage.text.trim().is_empty() {
            match empty {
                EmptyPolicy::Reject => {
                    return Err(Error::parse(
                        path,
                        line_no,
                        format!("response `{}` has empty text", passage.id),
                    ))
                }
                EmptyPolicy::Skip => return Ok(()),
                EmptyPolicy::Allow => {}
            }
        }
        collection.insert(passage)
    })?;
    Ok(collection)
}

pub fn ingest_dialogues(
    path: &Path,
    collection: &Collection,
    empty: EmptyPolicy,
) -> Result<DatasetSplit> {
    let mut examples = Vec::new();
    for_each_line(path, |line_no, line| {
        let rec: DialogueRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        if rec.utterances.is_empty() {
            return Err(Error::parse(
                path,
                line_no,
                format!("context `{}` has no utterances", rec.id),
            ));
        }
        let mut utterances = rec.utterances;
        if utterances.iter().any(|u| u.text.trim().is_empty()) {
            match empty {
                EmptyPolicy::Reject => {
                    return Err(Error::parse(
                        path,
                        line_no,
                        format!("context `{}` has an empty utterance", rec.id),
                    ))
                }
                EmptyPolicy::Skip => {
                    utterances.retain(|u| !u.text.trim().is_empty());
                    if utterances.is_empty() {
                        return Ok(());
                    }
                }
                EmptyPolicy::Allow => {}
            }
        }
        let context =
            DialogueContext::new(rec.id, utterances.into_iter().map(|u| (u.text, u.speaker)))?;
        examples.push(DialogueExample {
            context,
            response_id: rec.response_id,
        });
        Ok(())
    })?;
    DatasetSplit::new(examples, collection)
}

/// Calls `f(line_number, line)` for every non-blank line; line numbers are 1-based.
pub(crate) fn for_each_line(
    path: &Path,
    mut f: impl FnMut(usize, &str) -> Result<()>,
) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        f(i + 1, line)?;
    }
    Ok(())
}

pub(crate) fn write_jsonl<T: Serialize>(
    path: &Path,
    items: impl IntoIterator<Item = T>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn three_docs() -> tempfile::NamedTempFile {
        write_tmp(
            r#"{"id":"a","text":"alpha"}
{"id":"b","text":"beta","expansions":["x"]}
{"id":"c","text":"gamma"}
"#,
        )
    }

    #[test]
    fn ingest_counts_records() {
        let f = three_docs();
        let c = ingest_collection(f.path(), CollectionFormat::Jsonl, EmptyPolicy::Reject).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.get("b").unwrap().expansions, vec!["x"]);
        assert_eq!(c.position("c"), Some(2));
    }

    #[test]
    fn ingest_tsv() {
        let f = write_tmp("a\tfirst doc\nb\tsecond\n");
        let c = ingest_collection(f.path(), CollectionFormat::Tsv, EmptyPolicy::Reject).unwrap();
        assert_eq!(c.get("a").unwrap().text, "first doc");
    }

    #[test]
    fn empty_text_rejected_by_default() {
        let f = write_tmp("{\"id\":\"a\",\"text\":\"ok\"}\n{\"id\":\"b\",\"text\":\"\"}\n");
        let err =
            ingest_collection(f.path(), CollectionFormat::Jsonl, EmptyPolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let c = ingest_collection(f.path(), CollectionFormat::Jsonl, EmptyPolicy::Skip).unwrap();
        assert_eq!(c.len(), 1);
        let c = ingest_collection(f.path(), CollectionFormat::Jsonl, EmptyPolicy::Allow).unwrap();
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn malformed_line_is_named() {
        let f = write_tmp("{\"id\":\"a\",\"text\":\"ok\"}\n\n{\"id\":\"b\"\n");
        let err =
            ingest_collection(f.path(), CollectionFormat::Jsonl, EmptyPolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn duplicate_id_rejected() {
        let f = write_tmp("{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n");
        let err =
            ingest_collection(f.path(), CollectionFormat::Jsonl, EmptyPolicy::Reject).unwrap_err();
        assert_eq!(err.to_string(), "duplicate id `a`");
    }

    fn collection() -> Collection {
        let f = three_docs();
        ingest_collection(f.path(), CollectionFormat::Jsonl, EmptyPolicy::Reject).unwrap()
    }

    #[test]
    fn ingest_two_dialogues() {
        let f = write_tmp(
            r#"{"id":"q1","utterances":[{"text":"hi","speaker":"seeker"}],"response_id":"a"}
{"id":"q2","utterances":[{"text":"x","speaker":"seeker"},{"text":"y","speaker":"seeker"},{"text":"z","speaker":"responder"}],"response_id":"c"}
"#,
        );
        let split = ingest_dialogues(f.path(), &collection(), EmptyPolicy::Reject).unwrap();
        assert_eq!(split.len(), 2);
        let turns: Vec<usize> = split.examples[1]
            .context
            .utterances
            .iter()
            .map(|u| u.turn_index)
            .collect();
        assert_eq!(turns, vec![0, 0, 1]);
    }

    #[test]
    fn zero_utterances_rejected() {
        let f = write_tmp(r#"{"id":"q1","utterances":[],"response_id":"a"}"#);
        let err = ingest_dialogues(f.path(), &collection(), EmptyPolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn dangling_response_listed() {
        let f = write_tmp(
            r#"{"id":"q1","utterances":[{"text":"hi","speaker":"seeker"}],"response_id":"x9"}"#,
        );
        let err = ingest_dialogues(f.path(), &collection(), EmptyPolicy::Reject).unwrap_err();
        match err {
            Error::DanglingIds(ids) => assert_eq!(ids, vec!["x9"]),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn concat_single_utterance() {
        let c = DialogueContext::new("c", [("hi", Speaker::Seeker)]).unwrap();
        assert_eq!(concat_context(&c), "hi");
    }

    #[test]
    fn concat_marks_turns() {
        let c = DialogueContext::new(
            "c",
            [
                ("hey... how long until dapper comes out?", Speaker::Seeker),
                ("14 days", Speaker::Responder),
                ("i thought it was coming out tonight", Speaker::Seeker),
            ],
        )
        .unwrap();
        assert_eq!(
            concat_context(&c),
            "hey... how long until dapper comes out? [U] [T] 14 days [U] [T] i thought it was coming out tonight"
        );
    }

    #[test]
    fn concat_same_speaker_has_no_turn_marker() {
        let c =
            DialogueContext::new("c", [("a", Speaker::Seeker), ("b", Speaker::Seeker)]).unwrap();
        assert_eq!(concat_context(&c), "a [U] b");
    }

    fn arb_context() -> impl Strategy<Value = DialogueContext> {
        prop::collection::vec(("[a-z ?.]{0,12}", any::<bool>()), 1..8).prop_map(|utts| {
            DialogueContext::new(
                "c",
                utts.into_iter().map(|(t, s)| {
                    (
                        t,
                        if s {
                            Speaker::Seeker
                        } else {
                            Speaker::Responder
                        },
                    )
                }),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn concat_contains_utterances_in_order(ctx in arb_context()) {
            let joined = concat_context(&ctx);
            let mut from = 0;
            for u in &ctx.utterances {
                let at = joined[from..].find(u.text.as_str());
                prop_assert!(at.is_some());
                from += at.unwrap() + u.text.len();
            }
        }

        #[test]
        fn last_utterance_is_final(ctx in arb_context()) {
            prop_assert_eq!(ctx.last_utterance(), ctx.utterances.last().unwrap());
        }

        #[test]
        fn turn_indices_non_decreasing(ctx in arb_context()) {
            for w in ctx.utterances.windows(2) {
                prop_assert!(w[0].turn_index <= w[1].turn_index);
            }
        }

        #[test]
        fn jsonl_round_trip(texts in prop::collection::vec("[a-z]{1,10}", 1..10)) {
            let passages: Vec<_> = texts
                .iter()
                .enumerate()
                .map(|(i, t)| ResponsePassage {
                    id: format!("r{i}"),
                    text: t.clone(),
                    expansions: if i % 2 == 0 { vec![t.to_uppercase()] } else { vec![] },
                })
                .collect();
            let c = Collection::from_passages(passages).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let cp = dir.path().join("c.jsonl");
            c.write_jsonl(&cp).unwrap();
            let back = ingest_collection(&cp, CollectionFormat::Jsonl, EmptyPolicy::Reject).unwrap();
            prop_assert_eq!(&back, &c);

            let split = DatasetSplit::new(
                texts.iter().enumerate().map(|(i, t)| DialogueExample {
                    context: DialogueContext::new(
                        format!("q{i}"),
                        [(t.clone(), Speaker::Seeker), (t.clone(), Speaker::Responder)],
                    ).unwrap(),
                    response_id: format!("r{i}"),
                }).collect(),
                &c,
            ).unwrap();
            let sp = dir.path().join("s.jsonl");
            split.write_jsonl(&sp).unwrap();
            let back = ingest_dialogues(&sp, &c, EmptyPolicy::Reject).unwrap();
            prop_assert_eq!(back, split);
        }
    }
}
