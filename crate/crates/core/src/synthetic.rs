//! Generated corpora with known structure, for smoke tests and
//! mechanism checks at small scale.
//!
//! Words are made-up syllable strings ending in `x`, which the English
//! stemmer leaves intact, so every generated word is its own token.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    Analyzer, Collection, DatasetSplit, DialogueContext, DialogueExample, ResponsePassage, Speaker,
};
use crate::dense::LexiconEncoder;
use crate::error::Result;
use crate::negatives::SampleSet;
use crate::seeds::rng_for;

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "t", "v"];
const VOWELS: [&str; 4] = ["a", "o", "u", "i"];

/// Distinct pseudo-word number `n` within namespace `ns` (a short letter prefix).
pub fn word(ns: &str, mut n: usize) -> String {
    let mut s = String::from(ns);
    loop {
        let syl = n % (ONSETS.len() * VOWELS.len());
        s.push_str(ONSETS[syl / VOWELS.len()]);
        s.push_str(VOWELS[syl % VOWELS.len()]);
        n /= ONSETS.len() * VOWELS.len();
        if n == 0 {
            break;
        }
    }
    s.push('x');
    s
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &'a [String]) -> &'a str {
    &words[rng.gen_range(0..words.len())]
}

/// A generated dataset: collection, three splits and any planted structure.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub collection: Collection,
    pub train: DatasetSplit,
    pub validation: DatasetSplit,
    pub test: DatasetSplit,
    /// Per context, responses planted as valid alternatives to the ground truth.
    pub planted: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub topics: usize,
    pub responses: usize,
    pub contexts: usize,
    pub words_per_topic: usize,
    pub noise_words: usize,
    pub validation_fraction: f64,
    pub test_fraction: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            topics: 40,
            responses: 1000,
            contexts: 200,
            words_per_topic: 4,
            noise_words: 200,
            validation_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

/// Topic-structured corpus in which contexts and responses of a topic use
/// disjoint vocabularies: a context's words never occur in its response, so
/// the only way to match them is to learn the topic association.
pub fn planted_signal(cfg: &PlantedConfig, seed: u64) -> Result<SyntheticDataset> {
    let mut rng = rng_for(seed, "planted-signal");
    let ctx_vocab: Vec<Vec<String>> = (0..cfg.topics)
        .map(|t| {
            (0..cfg.words_per_topic)
                .map(|j| word("c", t * cfg.words_per_topic + j))
                .collect()
        })
        .collect();
    let resp_vocab: Vec<Vec<String>> = (0..cfg.topics)
        .map(|t| {
            (0..cfg.words_per_topic)
                .map(|j| word("r", t * cfg.words_per_topic + j))
                .collect()
        })
        .collect();
    let noise: Vec<String> = (0..cfg.noise_words).map(|j| word("n", j)).collect();

    let mut collection = Collection::new();
    for i in 0..cfg.responses {
        let topic = i % cfg.topics;
        let mut words: Vec<&str> = (0..rng.gen_range(4..=6))
            .map(|_| pick(&mut rng, &resp_vocab[topic]))
            .collect();
        for _ in 0..rng.gen_range(1..=2) {
            words.push(pick(&mut rng, &noise));
        }
        words.shuffle(&mut rng);
        collection.insert(ResponsePassage::new(format!("r{i:05}"), words.join(" ")))?;
    }

    let chosen = index::sample(&mut rng, cfg.responses, cfg.contexts.min(cfg.responses));
    let mut examples = Vec::with_capacity(chosen.len());
    for (j, r) in chosen.into_iter().enumerate() {
        let topic = r % cfg.topics;
        let turns = rng.gen_range(2..=3);
        let utts: Vec<(String, Speaker)> = (0..turns)
            .map(|u| {
                let mut words: Vec<&str> = (0..rng.gen_range(3..=5))
                    .map(|_| pick(&mut rng, &ctx_vocab[topic]))
                    .collect();
                words.push(pick(&mut rng, &noise));
                words.shuffle(&mut rng);
                let speaker = if u % 2 == 0 {
                    Speaker::Seeker
                } else {
                    Speaker::Responder
                };
                (words.join(" "), speaker)
            })
            .collect();
        examples.push(DialogueExample {
            context: DialogueContext::new(format!("c{j:04}"), utts)?,
            response_id: format!("r{r:05}"),
        });
    }
    split_three(
        examples,
        collection,
        cfg.validation_fraction,
        cfg.test_fraction,
        BTreeMap::new(),
    )
}

fn split_three(
    examples: Vec<DialogueExample>,
    collection: Collection,
    validation_fraction: f64,
    test_fraction: f64,
    planted: BTreeMap<String, Vec<String>>,
) -> Result<SyntheticDataset> {
    let n = examples.len();
    let n_val = (n as f64 * validation_fraction).round() as usize;
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_train = n - n_val - n_test;
    let mut it = examples.into_iter();
    let train: Vec<_> = it.by_ref().take(n_train).collect();
    let validation: Vec<_> = it.by_ref().take(n_val).collect();
    let test: Vec<_> = it.collect();
    Ok(SyntheticDataset {
        train: DatasetSplit::new(train, &collection)?,
        validation: DatasetSplit::new(validation, &collection)?,
        test: DatasetSplit::new(test, &collection)?,
        collection,
        planted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseConfig {
    pub responses: usize,
    pub contexts: usize,
    pub concepts: usize,
    /// Surface forms per concept; form 0 is the one contexts use.
    pub forms: usize,
    pub concepts_per_text: usize,
    pub paraphrases: usize,
    /// Responses sharing all but one concept with a context, in surface form 0.
    pub min_decoys: usize,
    pub max_decoys: usize,
    pub noise_words: usize,
    pub dim: usize,
}

impl Default for ParaphraseConfig {
    fn default() -> Self {
        Self {
            responses: 1000,
            contexts: 50,
            concepts: 300,
            forms: 4,
            concepts_per_text: 4,
            paraphrases: 3,
            min_decoys: 4,
            max_decoys: 10,
            noise_words: 100,
            dim: 64,
        }
    }
}

/// Corpus where each context has `paraphrases` extra responses expressing the
/// same concepts in other surface forms. They are valid responses but not the
/// labelled one, so sampling them as negatives plants false negatives.
///
/// Also returns a lexicon encoder that maps every surface form of a concept to
/// the same vector, standing in for a semantic model. All contexts go to the
/// training split.
pub fn paraphrase_planted(
    cfg: &ParaphraseConfig,
    analyzer: &Analyzer,
    seed: u64,
) -> Result<(SyntheticDataset, LexiconEncoder)> {
    let mut rng = rng_for(seed, "paraphrase");
    let forms: Vec<Vec<String>> = (0..cfg.concepts)
        .map(|c| {
            (0..cfg.forms)
                .map(|f| word("s", c * cfg.forms + f))
                .collect()
        })
        .collect();
    let noise: Vec<String> = (0..cfg.noise_words).map(|j| word("n", j)).collect();
    let k = cfg.concepts_per_text;

    let mut texts: Vec<String> = Vec::with_capacity(cfg.responses);
    let mut examples = Vec::new();
    let mut planted_idx: Vec<(usize, Vec<usize>)> = Vec::new();
    let render = |rng: &mut ChaCha8Rng, parts: Vec<&str>| {
        let mut words: Vec<String> = parts.into_iter().map(str::to_string).collect();
        for _ in 0..2 {
            words.push(pick(rng, &noise).to_string());
        }
        words.shuffle(rng);
        words.join(" ")
    };

    for j in 0..cfg.contexts {
        let concepts = index::sample(&mut rng, cfg.concepts, k).into_vec();
        let context_text = render(
            &mut rng,
            concepts.iter().map(|&c| forms[c][0].as_str()).collect(),
        );
        let truth = texts.len();
        texts.push(render(
            &mut rng,
            concepts.iter().map(|&c| forms[c][0].as_str()).collect(),
        ));
        let mut para = Vec::new();
        for _ in 0..cfg.paraphrases {
            // Half the concepts keep form 0, the rest switch to other forms.
            let parts = concepts
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let f = if i < k / 2 {
                        0
                    } else {
                        rng.gen_range(1..cfg.forms)
                    };
                    forms[c][f].as_str()
                })
                .collect();
            para.push(texts.len());
            texts.push(render(&mut rng, parts));
        }
        for _ in 0..rng.gen_range(cfg.min_decoys..=cfg.max_decoys) {
            let mut parts: Vec<&str> = concepts[..k - 1]
                .iter()
                .map(|&c| forms[c][0].as_str())
                .collect();
            let other = loop {
                let c = rng.gen_range(0..cfg.concepts);
                if !concepts.contains(&c) {
                    break c;
                }
            };
            parts.push(forms[other][rng.gen_range(0..cfg.forms)].as_str());
            texts.push(render(&mut rng, parts));
        }
        let speaker = if j % 2 == 0 {
            Speaker::Seeker
        } else {
            Speaker::Responder
        };
        examples.push((format!("c{j:04}"), context_text, speaker, truth));
        planted_idx.push((truth, para));
    }
    while texts.len() < cfg.responses {
        let parts = (0..k)
            .map(|_| forms[rng.gen_range(0..cfg.concepts)][rng.gen_range(0..cfg.forms)].as_str())
            .collect();
        texts.push(render(&mut rng, parts));
    }

    // Shuffle so that planted responses are not adjacent in id order.
    let mut order: Vec<usize> = (0..texts.len()).collect();
    order.shuffle(&mut rng);
    let mut id_of = vec![String::new(); texts.len()];
    for (pos, &orig) in order.iter().enumerate() {
        id_of[orig] = format!("r{pos:05}");
    }
    let mut collection = Collection::new();
    for (pos, &orig) in order.iter().enumerate() {
        collection.insert(ResponsePassage::new(
            format!("r{pos:05}"),
            texts[orig].clone(),
        ))?;
    }
    let mut planted = BTreeMap::new();
    let mut split_examples = Vec::new();
    for ((id, text, speaker, truth), (_, para)) in examples.into_iter().zip(planted_idx) {
        planted.insert(id.clone(), para.iter().map(|&p| id_of[p].clone()).collect());
        split_examples.push(DialogueExample {
            context: DialogueContext::new(id, [(text, speaker)])?,
            response_id: id_of[truth].clone(),
        });
    }

    let mut lexicon = LexiconEncoder::new(cfg.dim);
    let unit = |rng: &mut ChaCha8Rng, scale: f64| -> Vec<f64> {
        let v: Vec<f64> = (0..cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| scale * x / norm).collect()
    };
    let token = |w: &str| {
        analyzer
            .analyze(w)
            .into_iter()
            .next()
            .unwrap_or_else(|| w.to_string())
    };
    for concept in &forms {
        let v = unit(&mut rng, 1.0);
        for f in concept {
            lexicon.insert(token(f), v.clone())?;
        }
    }
    for w in &noise {
        lexicon.insert(token(w), unit(&mut rng, 0.1))?;
    }

    let dataset = split_three(split_examples, collection, 0.0, 0.0, planted)?;
    Ok((dataset, lexicon))
}

/// Fraction of sampled negatives, over all contexts, that are planted
/// alternatives of their context.
pub fn planted_fraction(set: &SampleSet, planted: &BTreeMap<String, Vec<String>>) -> f64 {
    let mut total = 0usize;
    let mut hits = 0usize;
    for (ctx, entry) in &set.entries {
        let plant: HashSet<&str> = planted
            .get(ctx)
            .map(|v| v.iter().map(String::as_str).collect())
            .unwrap_or_default();
        total += entry.negatives.len();
        hits += entry
            .negatives
            .iter()
            .filter(|n| plant.contains(n.id.as_str()))
            .count();
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
