//! End-to-end training and scoring over labeled email rows.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{
    build_cascade, calibrate_thresholds, evaluate, gate, BandConfig, CascadeError, CascadeModel, GateDecision,
    Prediction, Scorer, ThresholdTable,
};
use crate::classifiers::{ClassifierError, Dataset, ModelParams};
use crate::corpus::{stratified_split, CorpusError, LabeledEmail};
use crate::featurizer::{FeatureError, FeatureVector, FeaturizerConfig, FittedFeaturizer};
use crate::ingest::{clean, Attachment, CleanEmail, CleaningRules, PlainTextExtractor, RawEmail};
use crate::metrics::MetricsReport;
use crate::taxonomy::{Category1, MappingTable};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub featurizer: FeaturizerConfig,
    pub model: ModelParams,
    pub bands: BandConfig,
    /// Share of labels kept by the head model; 1.0 trains a flat model.
    pub head_fraction: f64,
    /// Held-out share of the training rows used for head ranking and
    /// threshold calibration.
    pub valid_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            featurizer: FeaturizerConfig::default(),
            model: ModelParams::default(),
            bands: BandConfig::default(),
            head_fraction: 1.0,
            valid_ratio: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn head_count(&self, n_labels: usize) -> usize {
        ((self.head_fraction * n_labels as f64).round() as usize).clamp(1, n_labels.max(1))
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if !(self.head_fraction > 0.0 && self.head_fraction <= 1.0) {
            return Err(PipelineError::InvalidConfig("head_fraction must be in (0, 1]".into()));
        }
        if !(self.valid_ratio > 0.0 && self.valid_ratio < 1.0) {
            return Err(PipelineError::InvalidConfig("valid_ratio must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Rebuilds a raw email from a labeled row; OCR text becomes a plain-text
/// attachment.
pub fn labeled_to_raw(row: &LabeledEmail, id: &str, received_at: DateTime<Utc>) -> RawEmail {
    RawEmail {
        id: id.to_string(),
        sender: row.from.clone(),
        to: split_addresses(&row.to),
        cc: split_addresses(&row.cc),
        subject: row.title.clone(),
        body: row.body.clone(),
        attachments: if row.ocr.is_empty() {
            Vec::new()
        } else {
            vec![Attachment::text("ocr.txt", &row.ocr)]
        },
        in_reply_to: None,
        received_at,
    }
}

/// Turns a labeled row into the same cleaned form the router produces.
pub fn clean_labeled(row: &LabeledEmail, id: &str, rules: &CleaningRules) -> CleanEmail {
    let raw = labeled_to_raw(row, id, DateTime::UNIX_EPOCH);
    let mut ce = clean(&raw, rules, &PlainTextExtractor);
    ce.cat1 = Category1::new(row.cat1.clone());
    ce
}

fn split_addresses(s: &str) -> Vec<String> {
    s.split([',', ';'])
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(String::from)
        .collect()
}

/// The artifacts scoring needs: featurizer, cascade and thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub featurizer: FittedFeaturizer,
    pub cascade: CascadeModel,
    pub thresholds: ThresholdTable,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub training_rows: usize,
    pub n_labels: usize,
    pub head_count: usize,
    pub config: TrainConfig,
}

const FEATURIZER_FILE: &str = "featurizer.json";
const MODEL_FILE: &str = "model.json";
const THRESHOLDS_FILE: &str = "thresholds.csv";
const MANIFEST_FILE: &str = "manifest.json";

fn featurized(rows: &[LabeledEmail], f: &FittedFeaturizer, rules: &CleaningRules) -> Vec<(FeatureVector, String)> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| (f.featurize(&clean_labeled(r, &format!("row{i}"), rules)), r.label()))
        .collect()
}

/// Fits featurizer, cascade and thresholds on `rows`. An inner stratified
/// split holds out `valid_ratio` of rows for pilot ranking and calibration.
pub fn train_model(
    rows: &[LabeledEmail],
    table: &MappingTable,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel, PipelineError> {
    cfg.validate()?;
    let rules = CleaningRules::default();
    let (fit_rows, valid_rows) = stratified_split(rows, LabeledEmail::label, cfg.valid_ratio, seed)?;
    let cleaned: Vec<CleanEmail> = fit_rows
        .iter()
        .enumerate()
        .map(|(i, r)| clean_labeled(r, &format!("row{i}"), &rules))
        .collect();
    let mut label_index: BTreeMap<String, usize> = BTreeMap::new();
    for r in &fit_rows {
        let n = label_index.len();
        label_index.entry(r.label()).or_insert(n);
    }
    let labels: Vec<usize> = fit_rows.iter().map(|r| label_index[&r.label()]).collect();
    let featurizer = FittedFeaturizer::fit(&cleaned, &labels, table, &cfg.featurizer)?;

    let train_ds = Dataset::new(
        cleaned
            .iter()
            .zip(&fit_rows)
            .map(|(ce, r)| (featurizer.featurize(ce), r.label()))
            .collect(),
    )?;
    let valid_ds = Dataset::with_label_set(
        featurized(&valid_rows, &featurizer, &rules),
        train_ds.label_set().to_vec(),
    )?;
    let n_labels = train_ds.n_classes();
    let head_count = cfg.head_count(n_labels);
    let cascade = build_cascade(&train_ds, &valid_ds, head_count, &cfg.model, seed)?;
    let thresholds = calibrate_thresholds(&cascade, &valid_ds, &cfg.bands)?;
    Ok(TrainedModel {
        featurizer,
        cascade,
        thresholds,
        manifest: Manifest {
            seed,
            training_rows: rows.len(),
            n_labels,
            head_count,
            config: cfg.clone(),
        },
    })
}

impl TrainedModel {
    pub fn featurize(&self, ce: &CleanEmail) -> FeatureVector {
        self.featurizer.featurize(ce)
    }

    pub fn predict(&self, ce: &CleanEmail) -> Result<Prediction, ClassifierError> {
        self.cascade.score(&self.featurize(ce))
    }

    pub fn classify(&self, ce: &CleanEmail) -> Result<(Prediction, GateDecision), ClassifierError> {
        let p = self.predict(ce)?;
        let d = gate(&p, &self.thresholds);
        Ok((p, d))
    }

    pub fn dataset(&self, rows: &[LabeledEmail]) -> Result<Dataset, ClassifierError> {
        Dataset::new(featurized(rows, &self.featurizer, &CleaningRules::default()))
    }

    /// Flat (ungated) and gated reports on `rows`.
    pub fn evaluate(&self, rows: &[LabeledEmail]) -> Result<(MetricsReport, MetricsReport), ClassifierError> {
        let ds = self.dataset(rows)?;
        Ok((
            evaluate(&self.cascade, &ds, None)?,
            evaluate(&self.cascade, &ds, Some(&self.thresholds))?,
        ))
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir)?;
        self.featurizer.save(&dir.join(FEATURIZER_FILE))?;
        self.cascade.save(&dir.join(MODEL_FILE))?;
        self.thresholds.save(&dir.join(THRESHOLDS_FILE))?;
        let manifest =
            serde_json::to_string_pretty(&self.manifest).map_err(|e| PipelineError::Artifact(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)
            .map_err(|e| PipelineError::Artifact(format!("{MANIFEST_FILE}: {e}")))?;
        let featurizer = FittedFeaturizer::load(&dir.join(FEATURIZER_FILE))?;
        let cascade = CascadeModel::load(&dir.join(MODEL_FILE))?;
        let thresholds = ThresholdTable::load(&dir.join(THRESHOLDS_FILE), manifest.config.bands.high_value)?;
        if featurizer.dim() != cascade.dim() {
            return Err(PipelineError::Artifact(format!(
                "featurizer dim {} does not match model dim {}",
                featurizer.dim(),
                cascade.dim()
            )));
        }
        Ok(Self {
            featurizer,
            cascade,
            thresholds,
            manifest,
        })
    }
}
