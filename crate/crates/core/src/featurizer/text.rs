//! Tokenization, stopword removal and suffix-stripping stemming.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Ordered, normalized terms: lowercase, non-empty, stopword-free.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub tokens: Vec<String>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, term: &str) -> bool {
        self.tokens.iter().any(|t| t == term)
    }

    /// True when `seq` occurs as a contiguous run.
    pub fn contains_sequence(&self, seq: &[String]) -> bool {
        if seq.is_empty() {
            return false;
        }
        self.tokens.windows(seq.len()).any(|w| w == seq)
    }
}

const DEFAULT_STOPWORDS: &[&str] = &[
    "a",
    "about",
    "above",
    "after",
    "again",
    "all",
    "am",
    "an",
    "and",
    "any",
    "are",
    "as",
    "at",
    "be",
    "because",
    "been",
    "before",
    "being",
    "below",
    "between",
    "both",
    "but",
    "by",
    "can",
    "could",
    "did",
    "do",
    "does",
    "doing",
    "down",
    "during",
    "each",
    "few",
    "for",
    "from",
    "further",
    "had",
    "has",
    "have",
    "having",
    "he",
    "her",
    "here",
    "hers",
    "herself",
    "him",
    "himself",
    "his",
    "how",
    "i",
    "if",
    "in",
    "into",
    "is",
    "it",
    "its",
    "itself",
    "just",
    "me",
    "more",
    "most",
    "my",
    "myself",
    "no",
    "nor",
    "not",
    "now",
    "of",
    "off",
    "on",
    "once",
    "only",
    "or",
    "other",
    "our",
    "ours",
    "ourselves",
    "out",
    "over",
    "own",
    "please",
    "same",
    "she",
    "should",
    "so",
    "some",
    "such",
    "than",
    "that",
    "the",
    "their",
    "theirs",
    "them",
    "themselves",
    "then",
    "there",
    "these",
    "they",
    "this",
    "those",
    "through",
    "to",
    "too",
    "under",
    "until",
    "up",
    "very",
    "was",
    "we",
    "were",
    "what",
    "when",
    "where",
    "which",
    "while",
    "who",
    "whom",
    "why",
    "will",
    "with",
    "would",
    "you",
    "your",
    "yours",
    "yourself",
    "yourselves",
    "kindly",
    "hi",
    "hello",
    "dear",
    "team",
    "thanks",
    "regards",
];

/// Words removed before stemming.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stopwords {
    words: BTreeSet<String>,
}

impl Default for Stopwords {
    fn default() -> Self {
        Self {
            words: DEFAULT_STOPWORDS.iter().map(|w| w.to_string()).collect(),
        }
    }
}

impl Stopwords {
    pub fn empty() -> Self {
        Self { words: BTreeSet::new() }
    }

    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            words: words
                .into_iter()
                .map(|w| w.as_ref().trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect(),
        }
    }

    /// One token per line, UTF-8. Lines starting with `#` are ignored.
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_words(
            text.lines().filter(|l| !l.trim_start().starts_with('#')),
        ))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

fn is_vowel(c: u8) -> bool {
    matches!(c, b'a' | b'e' | b'i' | b'o' | b'u')
}

fn has_vowel(s: &str) -> bool {
    s.bytes().any(|c| is_vowel(c) || c == b'y')
}

/// Removes one letter of a trailing doubled consonant other than l, s, z.
fn undouble(stem: &str) -> String {
    let b = stem.as_bytes();
    let n = b.len();
    if n >= 2 && b[n - 1] == b[n - 2] && !is_vowel(b[n - 1]) && !matches!(b[n - 1], b'l' | b's' | b'z') {
        stem[..n - 1].to_string()
    } else {
        stem.to_string()
    }
}

/// Deterministic suffix stripping. The first applicable rule wins:
///
/// | suffix | replacement | condition                          |
/// |--------|-------------|------------------------------------|
/// | `sses` | `ss`        |                                    |
/// | `ies`  | `y`         | stem ≥ 2 chars                     |
/// | `ing`  | –           | stem ≥ 3 chars with a vowel; undouble |
/// | `ed`   | –           | stem ≥ 3 chars with a vowel; undouble |
/// | `ly`   | –           | stem ≥ 4 chars                     |
/// | `s`    | –           | not after `s`, `u` or `i`; stem ≥ 3 |
///
/// Words that are not purely ASCII alphabetic (ids, codes, numbers) are
/// returned unchanged.
pub fn stem(word: &str) -> String {
    if !word.bytes().all(|c| c.is_ascii_lowercase()) {
        return word.to_string();
    }
    if let Some(s) = word.strip_suffix("sses") {
        return format!("{s}ss");
    }
    if let Some(s) = word.strip_suffix("ies") {
        if s.len() >= 2 {
            return format!("{s}y");
        }
    }
    for suffix in ["ing", "ed"] {
        if let Some(s) = word.strip_suffix(suffix) {
            if s.len() >= 3 && has_vowel(s) {
                return undouble(s);
            }
        }
    }
    if let Some(s) = word.strip_suffix("ly") {
        if s.len() >= 4 {
            return s.to_string();
        }
    }
    if let Some(s) = word.strip_suffix('s') {
        if s.len() >= 3 && !s.ends_with(['s', 'u', 'i']) {
            return s.to_string();
        }
    }
    word.to_string()
}

/// Lowercases, splits on non-alphanumeric characters, drops stopwords and
/// stems. Stems that collapse onto a stopword are dropped too.
pub fn tokenize(text: &str, stopwords: &Stopwords) -> TokenStream {
    let lower = text.to_lowercase();
    let tokens = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty() && !stopwords.contains(w))
        .map(stem)
        .filter(|t| !t.is_empty() && !stopwords.contains(t))
        .collect();
    TokenStream { tokens }
}

/// All 1..=n_max grams in order: every unigram, then every bigram, ...
/// Grams are the tokens joined by a single space.
pub fn ngrams(ts: &TokenStream, n_max: usize) -> Vec<String> {
    let mut out = Vec::new();
    for n in 1..=n_max.max(1) {
        if ts.tokens.len() < n {
            break;
        }
        out.extend(ts.tokens.windows(n).map(|w| w.join(" ")));
    }
    out
}
