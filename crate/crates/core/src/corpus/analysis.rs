//! Text analysis shared by the sparse and dense pipelines.
//!
//! The default chain lowercases, splits on runs of word characters, drops a
//! standard English stopword list and applies the Snowball English stemmer.
//! The dialogue separators `[U]` and `[T]` pass through as atomic tokens so
//! the dense encoder can learn representations for them.

use std::collections::BTreeSet;

use rust_stemmers::{Algorithm, Stemmer as SnowballStemmer};
use serde::{Deserialize, Serialize};

/// End-of-utterance separator inserted by [`super::concat_context`].
pub const UTTERANCE_SEP: &str = "[U]";
/// End-of-turn separator inserted by [`super::concat_context`].
pub const TURN_SEP: &str = "[T]";

/// The stopword set of the common search-library English analyzer.
pub const ENGLISH_STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "if", "in", "into", "is", "it",
    "no", "not", "of", "on", "or", "such", "that", "the", "their", "then", "there", "these",
    "they", "this", "to", "was", "will", "with",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stemmer {
    None,
    /// Snowball ("Porter2") English stemmer.
    #[default]
    English,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenPattern {
    /// Maximal runs of alphanumeric characters or `_`.
    #[default]
    WordChars,
    /// Split on Unicode whitespace only.
    Whitespace,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzerConfig {
    pub lowercase: bool,
    pub stopwords: BTreeSet<String>,
    pub stemmer: Stemmer,
    pub token_pattern: TokenPattern,
    /// Tokens emitted verbatim, never lowercased, split, or stemmed.
    pub special_tokens: Vec<String>,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            stopwords: ENGLISH_STOPWORDS.iter().map(|s| s.to_string()).collect(),
            stemmer: Stemmer::English,
            token_pattern: TokenPattern::WordChars,
            special_tokens: vec![UTTERANCE_SEP.to_string(), TURN_SEP.to_string()],
        }
    }
}

impl AnalyzerConfig {
    /// Lowercase + tokenize only.
    pub fn plain() -> Self {
        Self {
            stopwords: BTreeSet::new(),
            stemmer: Stemmer::None,
            ..Self::default()
        }
    }
}

/// A compiled [`AnalyzerConfig`].
pub struct Analyzer {
    config: AnalyzerConfig,
    stemmer: Option<SnowballStemmer>,
}

impl std::fmt::Debug for Analyzer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Analyzer")
            .field("config", &self.config)
            .finish()
    }
}

impl Clone for Analyzer {
    fn clone(&self) -> Self {
        Analyzer::new(self.config.clone())
    }
}

impl Default for Analyzer {
    fn default() -> Self {
        Analyzer::new(AnalyzerConfig::default())
    }
}

impl Analyzer {
    pub fn new(config: AnalyzerConfig) -> Self {
        let stemmer = match config.stemmer {
            Stemmer::None => None,
            Stemmer::English => Some(SnowballStemmer::create(Algorithm::English)),
        };
        Self { config, stemmer }
    }

    pub fn config(&self) -> &AnalyzerConfig {
        &self.config
    }

    pub fn analyze(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            match self.next_special(rest) {
                Some((at, special)) => {
                    self.analyze_plain(&rest[..at], &mut out);
                    out.push(special.to_string());
                    rest = &rest[at + special.len()..];
                }
                None => {
                    self.analyze_plain(rest, &mut out);
                    break;
                }
            }
        }
        out
    }

    fn next_special<'a>(&'a self, text: &str) -> Option<(usize, &'a str)> {
        self.config
            .special_tokens
            .iter()
            .filter(|s| !s.is_empty())
            .filter_map(|s| text.find(s.as_str()).map(|at| (at, s.as_str())))
            .min_by_key(|&(at, s)| (at, std::cmp::Reverse(s.len())))
    }

    fn analyze_plain(&self, text: &str, out: &mut Vec<String>) {
        let lowered;
        let text = if self.config.lowercase {
            lowered = text.to_lowercase();
            lowered.as_str()
        } else {
            text
        };
        let emit = |raw: &str, out: &mut Vec<String>| {
            if raw.is_empty() || self.config.stopwords.contains(raw) {
                return;
            }
            match &self.stemmer {
                Some(stemmer) => out.push(stemmer.stem(raw).into_owned()),
                None => out.push(raw.to_string()),
            }
        };
        match self.config.token_pattern {
            TokenPattern::Whitespace => text.split_whitespace().for_each(|t| emit(t, out)),
            TokenPattern::WordChars => text
                .split(|c: char| !(c.is_alphanumeric() || c == '_'))
                .for_each(|t| emit(t, out)),
        }
    }
}

/// Analyze with a throwaway analyzer built from `config`.
pub fn analyze(text: &str, config: &AnalyzerConfig) -> Vec<String> {
    Analyzer::new(config.clone()).analyze(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_input() {
        assert!(analyze("", &AnalyzerConfig::default()).is_empty());
    }

    #[test]
    fn default_chain() {
        let cfg = AnalyzerConfig::default();
        assert_eq!(analyze("The APT package", &cfg), vec!["apt", "packag"]);
        assert_eq!(analyze("install install", &cfg), vec!["instal", "instal"]);
    }

    // Reference outputs of the Snowball English algorithm, taken from the
    // published voc.txt / output.txt pairs.
    #[test]
    fn stemmer_matches_snowball_reference_pairs() {
        let cfg = AnalyzerConfig {
            stopwords: BTreeSet::new(),
            ..AnalyzerConfig::default()
        };
        let pairs = [
            ("caresses", "caress"),
            ("ponies", "poni"),
            ("running", "run"),
            ("generously", "generous"),
            ("knightly", "knight"),
            ("consign", "consign"),
            ("consigned", "consign"),
            ("package", "packag"),
            ("packages", "packag"),
            ("install", "instal"),
            ("installation", "instal"),
        ];
        for (word, stem) in pairs {
            assert_eq!(analyze(word, &cfg), vec![stem], "{word}");
        }
    }

    #[test]
    fn separators_are_atomic() {
        let cfg = AnalyzerConfig::default();
        assert_eq!(
            analyze("Hello there[U] [T]Running", &cfg),
            vec!["hello", "[U]", "[T]", "run"]
        );
    }

    #[test]
    fn whitespace_pattern_keeps_punctuation() {
        let cfg = AnalyzerConfig {
            token_pattern: TokenPattern::Whitespace,
            ..AnalyzerConfig::plain()
        };
        assert_eq!(
            analyze("libgtk2.0-dev  Foo", &cfg),
            vec!["libgtk2.0-dev", "foo"]
        );
    }

    #[test]
    fn word_chars_split_punctuation() {
        let cfg = AnalyzerConfig::plain();
        assert_eq!(
            analyze("sudo apt-get install libgtk2.0-dev", &cfg),
            vec!["sudo", "apt", "get", "install", "libgtk2", "0", "dev"]
        );
    }

    proptest! {
        #[test]
        fn idempotent_without_stemming(text in "[a-zA-Z0-9 ,.!?\\[\\]UT_-]{0,80}") {
            let cfg = AnalyzerConfig { stemmer: Stemmer::None, ..AnalyzerConfig::default() };
            let analyzer = Analyzer::new(cfg);
            let once = analyzer.analyze(&text);
            let twice = analyzer.analyze(&once.join(" "));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn deterministic(text in "\\PC{0,60}") {
            let analyzer = Analyzer::default();
            prop_assert_eq!(analyzer.analyze(&text), analyzer.analyze(&text));
        }
    }
}
