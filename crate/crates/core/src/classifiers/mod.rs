//! Multi-class probabilistic classifiers over [`FeatureVector`]s.

pub mod boosting;
pub mod forest;
pub mod naive;
pub mod tree;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurizer::FeatureVector;

pub use boosting::{train_boosted, train_boosted_with_history, BoostParams, BoostedModel, BoostingHistory};
pub use forest::{train_forest, ForestModel, ForestParams};
pub use naive::{train_naive, NaiveCountModel, NaiveParams};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training loss became non-finite at round {round}")]
    NonFiniteLoss { round: usize },
    #[error("feature dimension mismatch: model expects {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("model artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn check_dim(expected: usize, fv: &FeatureVector) -> Result<(), ClassifierError> {
    if fv.dim() != expected {
        return Err(ClassifierError::DimensionMismatch {
            expected,
            actual: fv.dim(),
        });
    }
    Ok(())
}

/// Numerically stable softmax.
pub fn softmax(margins: &[f64]) -> Vec<f64> {
    let max = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        let n = margins.len().max(1) as f64;
        return vec![1.0 / n; margins.len()];
    }
    let exps: Vec<f64> = margins.iter().map(|m| (m - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Index of the largest value; the first one wins on ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Rows of features with string labels indexed into a sorted label set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    label_set: Vec<String>,
    features: Vec<FeatureVector>,
    targets: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset whose label set is the sorted distinct labels.
    pub fn new(rows: Vec<(FeatureVector, String)>) -> Result<Self, ClassifierError> {
        let mut labels: Vec<String> = rows.iter().map(|(_, l)| l.clone()).collect();
        labels.sort();
        labels.dedup();
        Self::with_label_set(rows, labels)
    }

    /// Builds a dataset against a fixed label order. Every label must occur.
    pub fn with_label_set(rows: Vec<(FeatureVector, String)>, label_set: Vec<String>) -> Result<Self, ClassifierError> {
        if rows.is_empty() {
            return Err(ClassifierError::EmptyDataset);
        }
        let dim = rows[0].0.dim();
        let index: BTreeMap<&str, usize> = label_set.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        if index.len() != label_set.len() {
            return Err(ClassifierError::InvalidParams("duplicate label in label set".into()));
        }
        let mut seen = vec![false; label_set.len()];
        let mut targets = Vec::with_capacity(rows.len());
        for (fv, label) in &rows {
            check_dim(dim, fv)?;
            let &t = index
                .get(label.as_str())
                .ok_or_else(|| ClassifierError::UnknownLabel(label.clone()))?;
            seen[t] = true;
            targets.push(t);
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(ClassifierError::InvalidParams(format!(
                "label {:?} has no rows",
                label_set[i]
            )));
        }
        let features = rows.into_iter().map(|(fv, _)| fv).collect();
        Ok(Self {
            dim,
            label_set,
            features,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.label_set.len()
    }

    pub fn features(&self) -> &[FeatureVector] {
        &self.features
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    pub fn label_of(&self, row: usize) -> &str {
        &self.label_set[self.targets[row]]
    }

    /// Row pairs with their label strings, for rebuilding subsets.
    pub fn rows(&self) -> impl Iterator<Item = (&FeatureVector, &str)> {
        self.features
            .iter()
            .zip(&self.targets)
            .map(|(f, &t)| (f, self.label_set[t].as_str()))
    }
}

pub trait ProbabilisticClassifier {
    fn labels(&self) -> &[String];
    fn dim(&self) -> usize;
    /// Distribution over [`labels`](Self::labels), summing to 1.
    fn predict_proba(&self, fv: &FeatureVector) -> Result<Vec<f64>, ClassifierError>;

    /// Most probable label and its probability.
    fn predict(&self, fv: &FeatureVector) -> Result<(String, f64), ClassifierError> {
        let probs = self.predict_proba(fv)?;
        let i = argmax(&probs).ok_or(ClassifierError::EmptyDataset)?;
        Ok((self.labels()[i].clone(), probs[i]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Forest,
    #[default]
    Boosted,
    NaiveCount,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub forest: ForestParams,
    pub boosted: BoostParams,
    pub naive: NaiveParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Forest(ForestModel),
    Boosted(BoostedModel),
    NaiveCount(NaiveCountModel),
}

pub fn train(ds: &Dataset, params: &ModelParams, seed: u64) -> Result<Model, ClassifierError> {
    Ok(match params.kind {
        ModelKind::Forest => Model::Forest(train_forest(ds, &params.forest, seed)?),
        ModelKind::Boosted => Model::Boosted(train_boosted(ds, &params.boosted, seed)?),
        ModelKind::NaiveCount => Model::NaiveCount(train_naive(ds, &params.naive)?),
    })
}

impl Model {
    fn inner(&self) -> &dyn ProbabilisticClassifier {
        match self {
            Model::Forest(m) => m,
            Model::Boosted(m) => m,
            Model::NaiveCount(m) => m,
        }
    }
}

impl ProbabilisticClassifier for Model {
    fn labels(&self) -> &[String] {
        self.inner().labels()
    }

    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn predict_proba(&self, fv: &FeatureVector) -> Result<Vec<f64>, ClassifierError> {
        self.inner().predict_proba(fv)
    }
}

pub const MODEL_FORMAT: &str = "triage-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Artifact<T> {
    format: String,
    version: u32,
    labels: Vec<String>,
    dim: usize,
    model: T,
}

/// Versioned JSON artifact with a header of format, version, labels and dim.
pub fn to_artifact<T: Serialize + ProbabilisticClassifier>(model: &T) -> Result<String, ClassifierError> {
    let a = Artifact {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        labels: model.labels().to_vec(),
        dim: model.dim(),
        model,
    };
    serde_json::to_string(&a).map_err(|e| ClassifierError::Artifact(e.to_string()))
}

pub fn from_artifact<T: for<'de> Deserialize<'de> + ProbabilisticClassifier>(text: &str) -> Result<T, ClassifierError> {
    let a: Artifact<T> = serde_json::from_str(text).map_err(|e| ClassifierError::Artifact(e.to_string()))?;
    if a.format != MODEL_FORMAT {
        return Err(ClassifierError::Artifact(format!("unexpected format {:?}", a.format)));
    }
    if a.version != MODEL_VERSION {
        return Err(ClassifierError::Artifact(format!("unsupported version {}", a.version)));
    }
    if a.labels != a.model.labels() || a.dim != a.model.dim() {
        return Err(ClassifierError::Artifact("header does not match payload".into()));
    }
    Ok(a.model)
}

pub fn save_model<T: Serialize + ProbabilisticClassifier>(model: &T, path: &Path) -> Result<(), ClassifierError> {
    std::fs::write(path, to_artifact(model)?)?;
    Ok(())
}

pub fn load_model<T: for<'de> Deserialize<'de> + ProbabilisticClassifier>(path: &Path) -> Result<T, ClassifierError> {
    from_artifact(&std::fs::read_to_string(path)?)
}
