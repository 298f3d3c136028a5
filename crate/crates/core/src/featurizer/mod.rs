//! Text → sparse feature vectors.
//!
//! Each text block (title, body, attachment text) is tokenized, expanded
//! into 1..=n grams, hashed into `hash_dim` buckets, reduced to the
//! `select_k` buckets with the highest chi-squared score against the target
//! label, and weighted by the bucket's inverse document frequency. The
//! region-aware custom indicators are appended as a final block. Sender,
//! recipients and CC never contribute.

pub mod chi2;
pub mod custom;
pub mod hashing;
pub mod text;
pub mod tfidf;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chi2::{chi2_scores, chi2_select, FittedSelector};
pub use custom::{custom_mapping_features, CustomFeatureLayout};
pub use hashing::{fnv1a64, hash_features};
pub use text::{ngrams, stem, tokenize, Stopwords, TokenStream};
pub use tfidf::{tfidf_fit, tfidf_transform, IdfTable};

use crate::ingest::CleanEmail;
use crate::taxonomy::MappingTable;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("labels carry a single class")]
    DegenerateLabels,
    #[error("{features} feature vectors but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("featurizer config does not match the fitted artifacts")]
    ConfigMismatch,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("artifact: {0}")]
    Artifact(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Sparse vector with unique, ascending indices below `dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    dim: usize,
    entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }

    /// `entries` must be sorted by index without duplicates.
    pub fn from_sorted(dim: usize, entries: Vec<(u32, f64)>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        debug_assert!(entries.iter().all(|&(i, w)| (i as usize) < dim && w.is_finite()));
        Self { dim, entries }
    }

    /// Sorts and sums duplicate indices; zero weights are dropped.
    pub fn from_pairs(dim: usize, mut pairs: Vec<(u32, f64)>) -> Self {
        pairs.sort_by_key(|p| p.0);
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(pairs.len());
        for (i, w) in pairs {
            assert!((i as usize) < dim, "index {i} out of range for dim {dim}");
            match entries.last_mut() {
                Some(last) if last.0 == i => last.1 += w,
                _ => entries.push((i, w)),
            }
        }
        entries.retain(|e| e.1 != 0.0);
        Self { dim, entries }
    }

    pub fn from_dense(values: &[f64]) -> Self {
        Self {
            dim: values.len(),
            entries: values
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(i, &v)| (i as u32, v))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries
            .binary_search_by_key(&(index as u32), |e| e.0)
            .map_or(0.0, |p| self.entries[p].1)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &(i, w) in &self.entries {
            v[i as usize] = w;
        }
        v
    }

    /// Concatenates blocks into disjoint, consecutive index ranges.
    pub fn concat(blocks: &[FeatureVector]) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0u32;
        for b in blocks {
            entries.extend(b.entries.iter().map(|&(i, w)| (i + offset, w)));
            offset += b.dim as u32;
        }
        Self {
            dim: offset as usize,
            entries,
        }
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        let (mut a, mut b) = (self.entries.iter().peekable(), other.entries.iter().peekable());
        let mut sum = 0.0;
        while let (Some(&&(i, x)), Some(&&(j, y))) = (a.peek(), b.peek()) {
            match i.cmp(&j) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    sum += x * y;
                    a.next();
                    b.next();
                }
            }
        }
        sum
    }

    /// Cosine similarity; 0 when either vector is all zeros.
    pub fn cosine(&self, other: &FeatureVector) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            (self.dot(other) / denom).clamp(0.0, 1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturizerConfig {
    pub ngram_max: usize,
    pub hash_dim: usize,
    pub select_k: usize,
    pub smooth_idf: bool,
    /// Weight selected buckets by idf; plain counts otherwise.
    pub tfidf: bool,
    pub stopwords_path: Option<PathBuf>,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            ngram_max: 3,
            hash_dim: 12000,
            select_k: 200,
            smooth_idf: true,
            tfidf: true,
            stopwords_path: None,
        }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.ngram_max < 1 {
            return Err(FeatureError::InvalidConfig("ngram_max must be >= 1".into()));
        }
        if self.hash_dim == 0 {
            return Err(FeatureError::InvalidConfig("hash_dim must be > 0".into()));
        }
        if self.select_k > self.hash_dim {
            return Err(FeatureError::InvalidConfig("select_k must be <= hash_dim".into()));
        }
        Ok(())
    }

    pub fn stopwords(&self) -> Result<Stopwords, FeatureError> {
        match &self.stopwords_path {
            Some(p) => Ok(Stopwords::load(p)?),
            None => Ok(Stopwords::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextBlock {
    Title,
    Body,
    Ocr,
}

impl TextBlock {
    pub const ALL: [TextBlock; 3] = [TextBlock::Title, TextBlock::Body, TextBlock::Ocr];

    pub fn text(self, ce: &CleanEmail) -> &str {
        match self {
            TextBlock::Title => &ce.title,
            TextBlock::Body => &ce.body,
            TextBlock::Ocr => &ce.ocr_text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedBlock {
    pub selector: FittedSelector,
    pub idf: Option<IdfTable<u32>>,
}

impl FittedBlock {
    fn transform(&self, text: &str, stopwords: &Stopwords, cfg: &FeaturizerConfig) -> FeatureVector {
        let grams = ngrams(&tokenize(text, stopwords), cfg.ngram_max);
        let selected = self.selector.transform(&hash_features(&grams, cfg.hash_dim));
        match &self.idf {
            None => selected,
            Some(idf) => {
                let entries = selected
                    .entries()
                    .iter()
                    .map(|&(i, w)| (i, w * idf.idf(&i).unwrap_or(1.0)))
                    .collect();
                FeatureVector::from_sorted(selected.dim(), entries)
            }
        }
    }
}

const ARTIFACT_FORMAT: &str = "triage-featurizer";
const ARTIFACT_VERSION: u32 = 1;

/// All fitted state needed to featurize an email.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedFeaturizer {
    pub format: String,
    pub version: u32,
    pub config: FeaturizerConfig,
    pub stopwords: Stopwords,
    pub blocks: Vec<FittedBlock>,
    pub custom: CustomFeatureLayout,
}

impl FittedFeaturizer {
    /// Fits hashing selectors and idf tables against `labels`.
    pub fn fit(
        emails: &[CleanEmail],
        labels: &[usize],
        table: &MappingTable,
        config: &FeaturizerConfig,
    ) -> Result<Self, FeatureError> {
        config.validate()?;
        if emails.is_empty() {
            return Err(FeatureError::EmptyCorpus);
        }
        if emails.len() != labels.len() {
            return Err(FeatureError::LengthMismatch {
                features: emails.len(),
                labels: labels.len(),
            });
        }
        let stopwords = config.stopwords()?;
        let mut blocks = Vec::new();
        for block in TextBlock::ALL {
            let hashed: Vec<FeatureVector> = emails
                .iter()
                .map(|ce| {
                    let grams = ngrams(&tokenize(block.text(ce), &stopwords), config.ngram_max);
                    hash_features(&grams, config.hash_dim)
                })
                .collect();
            let selector = match chi2_select(&hashed, labels, config.select_k) {
                Ok(s) => s,
                Err(FeatureError::DegenerateLabels) => FittedSelector::lowest(config.hash_dim, config.select_k),
                Err(e) => return Err(e),
            };
            let idf = if config.tfidf {
                let docs: Vec<Vec<u32>> = hashed
                    .iter()
                    .map(|h| selector.transform(h).entries().iter().map(|e| e.0).collect())
                    .collect();
                Some(IdfTable::fit(docs.iter(), config.smooth_idf)?)
            } else {
                None
            };
            blocks.push(FittedBlock { selector, idf });
        }
        Ok(Self {
            format: ARTIFACT_FORMAT.into(),
            version: ARTIFACT_VERSION,
            config: config.clone(),
            stopwords,
            blocks,
            custom: CustomFeatureLayout::from_table(table),
        })
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.selector.output_dim()).sum::<usize>() + self.custom.dim()
    }

    /// Index ranges of the title, body, attachment and custom blocks.
    pub fn block_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        let mut out = Vec::new();
        for len in self
            .blocks
            .iter()
            .map(|b| b.selector.output_dim())
            .chain([self.custom.dim()])
        {
            out.push(start..start + len);
            start += len;
        }
        out
    }

    pub fn featurize(&self, ce: &CleanEmail) -> FeatureVector {
        let mut parts: Vec<FeatureVector> = TextBlock::ALL
            .iter()
            .zip(&self.blocks)
            .map(|(b, fitted)| fitted.transform(b.text(ce), &self.stopwords, &self.config))
            .collect();
        let all_tokens = tokenize(&ce.full_text(), &self.stopwords);
        parts.push(self.custom.features(ce.cat1.as_ref(), &all_tokens));
        FeatureVector::concat(&parts)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("featurizer serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, FeatureError> {
        let f: Self = serde_json::from_str(text).map_err(|e| FeatureError::Artifact(e.to_string()))?;
        if f.format != ARTIFACT_FORMAT || f.version != ARTIFACT_VERSION {
            return Err(FeatureError::Artifact(format!(
                "unsupported artifact {} v{}",
                f.format, f.version
            )));
        }
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Featurizes with an explicit config check against the fitted artifacts.
pub fn featurize(
    ce: &CleanEmail,
    fitted: &FittedFeaturizer,
    cfg: &FeaturizerConfig,
) -> Result<FeatureVector, FeatureError> {
    if &fitted.config != cfg {
        return Err(FeatureError::ConfigMismatch);
    }
    Ok(fitted.featurize(ce))
}
