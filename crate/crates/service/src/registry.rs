//! Versioned model artifacts under `<data_dir>/models/vNNNNNN`, with the
//! current version recorded in `<data_dir>/registry.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use triage_core::corpus::{split, LabeledEmail};
use triage_core::pipeline::{train_model, PipelineError, TrainConfig, TrainedModel};
use triage_core::quickfix::{IntentCatalog, IntentMatcher, QuickfixError};
use triage_core::rules::{load_rules, RuleError, RuleSet};
use triage_core::taxonomy::MappingTable;

pub const REGISTRY_FILE: &str = "registry.json";
const RULES_FILE: &str = "rules.txt";
const INTENTS_FILE: &str = "intents.toml";

/// A label needs this many rows to survive both the evaluation and the
/// calibration split.
pub const MIN_ROWS_PER_LABEL: usize = 3;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Rules(#[from] RuleError),
    #[error(transparent)]
    Quickfix(#[from] QuickfixError),
    #[error("registry file: {0}")]
    Parse(String),
    #[error("artifact {0} is missing")]
    Missing(PathBuf),
    #[error("no label has at least {MIN_ROWS_PER_LABEL} training rows")]
    NoTrainableLabels,
    #[error("version {next} does not follow {current}")]
    Version { current: u64, next: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Paths relative to the data directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactPaths {
    pub dir: PathBuf,
    pub featurizer: PathBuf,
    pub model: PathBuf,
    pub thresholds: PathBuf,
    pub manifest: PathBuf,
    pub rules: Option<PathBuf>,
    pub intents: Option<PathBuf>,
}

/// Held-out scores recorded when a version is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub test_rows: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub coverage: f64,
    pub selective_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistry {
    pub version: u64,
    pub artifacts: ArtifactPaths,
    /// Rows the version was built from (base corpus plus manual rows).
    pub training_rows: usize,
    pub manual_rows: usize,
    pub built_at: DateTime<Utc>,
    pub evaluation: Evaluation,
    /// Labels left out for having too few rows.
    pub skipped_labels: Vec<String>,
}

/// Everything a version needs at routing time.
pub struct LoadedVersion {
    pub model: TrainedModel,
    pub rules: RuleSet,
    pub matcher: Option<IntentMatcher>,
}

/// Where to find the optional rule and intent sources for a new build.
#[derive(Debug, Clone, Default)]
pub struct BuildSources<'a> {
    pub rules: Option<&'a Path>,
    pub intents: Option<&'a Path>,
}

fn version_dir(version: u64) -> PathBuf {
    PathBuf::from("models").join(format!("v{version:06}"))
}

impl ModelRegistry {
    /// The current registry, or `None` when nothing was built yet.
    pub fn load(data_dir: &Path) -> Result<Option<Self>, RegistryError> {
        let path = data_dir.join(REGISTRY_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let reg: Self =
            serde_json::from_str(&std::fs::read_to_string(&path)?).map_err(|e| RegistryError::Parse(e.to_string()))?;
        Ok(Some(reg))
    }

    /// Publishes this version by replacing the registry file atomically.
    pub fn publish(&self, data_dir: &Path) -> Result<(), RegistryError> {
        if let Some(current) = Self::load(data_dir)? {
            if self.version <= current.version {
                return Err(RegistryError::Version {
                    current: current.version,
                    next: self.version,
                });
            }
        }
        let tmp = data_dir.join(format!("{REGISTRY_FILE}.tmp"));
        let text = serde_json::to_string_pretty(self).map_err(|e| RegistryError::Parse(e.to_string()))?;
        std::fs::write(&tmp, text)?;
        std::fs::File::open(&tmp)?.sync_all()?;
        std::fs::rename(&tmp, data_dir.join(REGISTRY_FILE))?;
        Ok(())
    }

    /// Loads every artifact the registry references.
    pub fn open(&self, data_dir: &Path) -> Result<LoadedVersion, RegistryError> {
        let a = &self.artifacts;
        for p in [&a.featurizer, &a.model, &a.thresholds, &a.manifest]
            .into_iter()
            .chain(a.rules.iter())
            .chain(a.intents.iter())
        {
            if !data_dir.join(p).exists() {
                return Err(RegistryError::Missing(p.clone()));
            }
        }
        let model = TrainedModel::load(&data_dir.join(&a.dir))?;
        let rules = match &a.rules {
            Some(p) => load_rules(&data_dir.join(p), None)?,
            None => RuleSet::default(),
        };
        let matcher = match &a.intents {
            Some(p) => Some(IntentCatalog::load(&data_dir.join(p))?.publish()?),
            None => None,
        };
        Ok(LoadedVersion { model, rules, matcher })
    }
}

/// Drops labels with fewer than [`MIN_ROWS_PER_LABEL`] rows.
pub fn trainable_rows(rows: Vec<LabeledEmail>) -> (Vec<LabeledEmail>, Vec<String>) {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in &rows {
        *counts.entry(r.label()).or_insert(0) += 1;
    }
    let skipped: Vec<String> = counts
        .iter()
        .filter(|(_, &n)| n < MIN_ROWS_PER_LABEL)
        .map(|(l, _)| l.clone())
        .collect();
    let kept = rows
        .into_iter()
        .filter(|r| counts[&r.label()] >= MIN_ROWS_PER_LABEL)
        .collect();
    (kept, skipped)
}

/// Trains version `version` on the stratified training share of `rows`,
/// scores it on the rest and writes its artifacts. The registry file is
/// left untouched; call [`ModelRegistry::publish`] to make it current.
#[allow(clippy::too_many_arguments)]
pub fn build_version(
    data_dir: &Path,
    version: u64,
    rows: Vec<LabeledEmail>,
    manual_rows: usize,
    table: &MappingTable,
    cfg: &TrainConfig,
    seed: u64,
    sources: &BuildSources<'_>,
) -> Result<(ModelRegistry, LoadedVersion), RegistryError> {
    let (rows, skipped_labels) = trainable_rows(rows);
    if rows.is_empty() {
        return Err(RegistryError::NoTrainableLabels);
    }
    let (train, test) = split(&rows, seed).map_err(PipelineError::from)?;
    let model = train_model(&train, table, cfg, seed)?;
    let (flat, gated) = model.evaluate(&test).map_err(PipelineError::from)?;

    let dir = version_dir(version);
    let abs = data_dir.join(&dir);
    if abs.exists() {
        // Leftover from an interrupted build that never got published.
        std::fs::remove_dir_all(&abs)?;
    }
    model.save(&abs)?;
    let copy = |src: Option<&Path>, name: &str| -> Result<Option<PathBuf>, RegistryError> {
        match src {
            Some(s) => {
                std::fs::copy(s, abs.join(name))?;
                Ok(Some(dir.join(name)))
            }
            None => Ok(None),
        }
    };
    let rules_rel = copy(sources.rules, RULES_FILE)?;
    let intents_rel = copy(sources.intents, INTENTS_FILE)?;
    let rules = match sources.rules {
        Some(p) => load_rules(p, Some(table))?,
        None => RuleSet::default(),
    };
    let matcher = match sources.intents {
        Some(p) => Some(IntentCatalog::load(p)?.publish()?),
        None => None,
    };
    let registry = ModelRegistry {
        version,
        artifacts: ArtifactPaths {
            featurizer: dir.join("featurizer.json"),
            model: dir.join("model.json"),
            thresholds: dir.join("thresholds.csv"),
            manifest: dir.join("manifest.json"),
            dir,
            rules: rules_rel,
            intents: intents_rel,
        },
        training_rows: rows.len(),
        manual_rows,
        built_at: Utc::now(),
        evaluation: Evaluation {
            test_rows: test.len(),
            accuracy: flat.accuracy,
            macro_f1: flat.macro_f1,
            coverage: gated.coverage.unwrap_or(0.0),
            selective_accuracy: gated.selective_accuracy.unwrap_or(0.0),
        },
        skipped_labels,
    };
    Ok((registry, LoadedVersion { model, rules, matcher }))
}
