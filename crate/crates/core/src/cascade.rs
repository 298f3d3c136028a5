//! Two-stage head/tail classifier and per-category abstention thresholds.
//!
//! A pilot flat model ranks categories by validation F1. The best
//! `head_count` categories keep their own label in the head model; the rest
//! are folded into [`LOW_ACCU`] and resolved by a tail model trained only on
//! their rows. A tail prediction's probability is
//! `p_head(LOW_ACCU) · p_tail(label)`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifiers::{self, argmax, ClassifierError, Dataset, Model, ModelParams, ProbabilisticClassifier};
use crate::featurizer::FeatureVector;
use crate::metrics::{classification_report, per_class_metrics, MetricsReport};

/// Pseudo-label for categories handed to the tail model.
pub const LOW_ACCU: &str = "LOW_ACCU";

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("head_count {head_count} is invalid for {n_labels} labels")]
    InsufficientClasses { head_count: usize, n_labels: usize },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error("threshold table row {row}: {message}")]
    ThresholdParse { row: u64, message: String },
    #[error("cascade artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Best label, its probability, and every label ranked by probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub prob: f64,
    /// Descending probability; ties keep label-set order.
    pub ranked: Vec<(String, f64)>,
}

impl Prediction {
    pub fn top(&self, k: usize) -> Vec<(String, f64)> {
        self.ranked.iter().take(k).cloned().collect()
    }
}

fn rank(labels: &[String], probs: &[f64]) -> Vec<(String, f64)> {
    let mut ranked: Vec<(String, f64)> = labels.iter().cloned().zip(probs.iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked
}

/// Anything that maps a feature vector to a category prediction.
pub trait Scorer {
    fn categories(&self) -> Vec<String>;
    fn score(&self, fv: &FeatureVector) -> Result<Prediction, ClassifierError>;
}

impl<T: ProbabilisticClassifier> Scorer for T {
    fn categories(&self) -> Vec<String> {
        self.labels().to_vec()
    }

    fn score(&self, fv: &FeatureVector) -> Result<Prediction, ClassifierError> {
        let probs = self.predict_proba(fv)?;
        let i = argmax(&probs).ok_or(ClassifierError::EmptyDataset)?;
        Ok(Prediction {
            label: self.labels()[i].clone(),
            prob: probs[i],
            ranked: rank(self.labels(), &probs),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeModel {
    pub head: Model,
    pub tail: Option<Model>,
    /// Real categories scored by the head (excludes [`LOW_ACCU`]).
    pub head_label_set: Vec<String>,
    pub tail_label_set: Vec<String>,
    /// Pilot validation F1 per category, best first.
    pub pilot_f1: Vec<(String, f64)>,
}

/// Categories ordered by descending F1, ties by label order.
pub fn rank_by_f1(f1: &BTreeMap<String, f64>) -> Vec<(String, f64)> {
    let mut v: Vec<(String, f64)> = f1.iter().map(|(k, &v)| (k.clone(), v)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

fn validation_f1(model: &Model, valid: &Dataset) -> Result<BTreeMap<String, f64>, ClassifierError> {
    let mut pred = Vec::with_capacity(valid.len());
    for fv in valid.features() {
        pred.push(model.predict(fv)?.0);
    }
    let truth: Vec<String> = (0..valid.len()).map(|i| valid.label_of(i).to_string()).collect();
    let per = per_class_metrics(&truth, &pred);
    Ok(model
        .labels()
        .iter()
        .map(|l| (l.clone(), per.get(l).map_or(0.0, |m| m.f1)))
        .collect())
}

fn relabeled(ds: &Dataset, keep: &BTreeSet<&str>) -> Vec<(FeatureVector, String)> {
    ds.rows()
        .map(|(fv, l)| {
            let label = if keep.contains(l) { l } else { LOW_ACCU };
            (fv.clone(), label.to_string())
        })
        .collect()
}

pub fn build_cascade(
    train: &Dataset,
    valid: &Dataset,
    head_count: usize,
    params: &ModelParams,
    seed: u64,
) -> Result<CascadeModel, CascadeError> {
    let n_labels = train.n_classes();
    if head_count == 0 || head_count > n_labels {
        return Err(CascadeError::InsufficientClasses { head_count, n_labels });
    }
    if valid.is_empty() {
        return Err(CascadeError::EmptyValidation);
    }
    let pilot = classifiers::train(train, params, seed)?;
    let pilot_f1 = rank_by_f1(&validation_f1(&pilot, valid)?);
    if head_count == n_labels {
        return Ok(CascadeModel {
            head_label_set: pilot.labels().to_vec(),
            head: pilot,
            tail: None,
            tail_label_set: vec![],
            pilot_f1,
        });
    }
    let head_set: BTreeSet<&str> = pilot_f1[..head_count].iter().map(|(l, _)| l.as_str()).collect();
    let head_ds = Dataset::new(relabeled(train, &head_set))?;
    let tail_rows: Vec<(FeatureVector, String)> = train
        .rows()
        .filter(|(_, l)| !head_set.contains(l))
        .map(|(fv, l)| (fv.clone(), l.to_string()))
        .collect();
    let tail_ds = Dataset::new(tail_rows)?;
    let head = classifiers::train(&head_ds, params, seed)?;
    let tail = classifiers::train(&tail_ds, params, seed.wrapping_add(1))?;
    Ok(CascadeModel {
        head,
        head_label_set: head_set.iter().map(|s| s.to_string()).collect(),
        tail_label_set: tail_ds.label_set().to_vec(),
        tail: Some(tail),
        pilot_f1,
    })
}

impl CascadeModel {
    pub fn dim(&self) -> usize {
        self.head.dim()
    }

    /// Head argmax, or the tail argmax scaled by `p_head(LOW_ACCU)`.
    pub fn cascade_predict(&self, fv: &FeatureVector) -> Result<(String, f64), ClassifierError> {
        let (label, prob) = self.head.predict(fv)?;
        match (&self.tail, label == LOW_ACCU) {
            (Some(tail), true) => {
                let (t, p) = tail.predict(fv)?;
                Ok((t, prob * p))
            }
            _ => Ok((label, prob)),
        }
    }

    /// Joint distribution: head labels keep their head probability, tail
    /// labels get `p_head(LOW_ACCU) · p_tail`.
    pub fn distribution(&self, fv: &FeatureVector) -> Result<Vec<(String, f64)>, ClassifierError> {
        let head = self.head.predict_proba(fv)?;
        let mut out = Vec::with_capacity(head.len() + self.tail_label_set.len());
        let mut low = 0.0;
        for (l, &p) in self.head.labels().iter().zip(&head) {
            if l == LOW_ACCU {
                low = p;
            } else {
                out.push((l.clone(), p));
            }
        }
        if let Some(tail) = &self.tail {
            let tp = tail.predict_proba(fv)?;
            out.extend(tail.labels().iter().cloned().zip(tp.into_iter().map(|p| low * p)));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String, CascadeError> {
        #[derive(Serialize)]
        struct Out<'a> {
            format: &'a str,
            version: u32,
            cascade: &'a CascadeModel,
        }
        serde_json::to_string(&Out {
            format: CASCADE_FORMAT,
            version: 1,
            cascade: self,
        })
        .map_err(|e| CascadeError::Artifact(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, CascadeError> {
        #[derive(Deserialize)]
        struct In {
            format: String,
            version: u32,
            cascade: CascadeModel,
        }
        let a: In = serde_json::from_str(text).map_err(|e| CascadeError::Artifact(e.to_string()))?;
        if a.format != CASCADE_FORMAT || a.version != 1 {
            return Err(CascadeError::Artifact(format!(
                "unsupported artifact {} v{}",
                a.format, a.version
            )));
        }
        Ok(a.cascade)
    }

    pub fn save(&self, path: &Path) -> Result<(), CascadeError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CascadeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

const CASCADE_FORMAT: &str = "triage-cascade";

impl Scorer for CascadeModel {
    fn categories(&self) -> Vec<String> {
        let mut all: Vec<String> = self
            .head_label_set
            .iter()
            .chain(&self.tail_label_set)
            .cloned()
            .collect();
        all.sort();
        all
    }

    fn score(&self, fv: &FeatureVector) -> Result<Prediction, ClassifierError> {
        let (label, prob) = self.cascade_predict(fv)?;
        let mut ranked = self.distribution(fv)?;
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        // The cascade decision leads even if the joint argmax differs.
        if let Some(pos) = ranked.iter().position(|(l, _)| *l == label) {
            let top = ranked.remove(pos);
            ranked.insert(0, top);
        }
        Ok(Prediction { label, prob, ranked })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Band {
    Low,
    Mid,
    High,
}

impl Band {
    pub fn as_str(self) -> &'static str {
        match self {
            Band::Low => "LOW",
            Band::Mid => "MID",
            Band::High => "HIGH",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "LOW" => Some(Band::Low),
            "MID" => Some(Band::Mid),
            "HIGH" => Some(Band::High),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandConfig {
    /// F1 below this is the LOW band.
    pub low_f1: f64,
    /// F1 at or above this is the HIGH band.
    pub high_f1: f64,
    /// Threshold applied to LOW-band and unvalidated categories.
    pub high_value: f64,
}

impl Default for BandConfig {
    fn default() -> Self {
        Self {
            low_f1: 0.75,
            high_f1: 0.90,
            high_value: 0.95,
        }
    }
}

pub fn band_for(f1: f64, cfg: &BandConfig) -> Band {
    if f1 < cfg.low_f1 {
        Band::Low
    } else if f1 < cfg.high_f1 {
        Band::Mid
    } else {
        Band::High
    }
}

/// Threshold for a band given the probabilities of the category's correctly
/// classified validation samples.
pub fn band_threshold(band: Band, correct_probs: &[f64], cfg: &BandConfig) -> f64 {
    match band {
        Band::Low => cfg.high_value,
        Band::Mid => correct_probs
            .iter()
            .copied()
            .reduce(f64::min)
            .unwrap_or(cfg.high_value)
            .clamp(0.0, 1.0),
        Band::High => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub band: Band,
    /// `None` when the category had no validation rows.
    pub f1: Option<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub entries: BTreeMap<String, ThresholdEntry>,
    /// Used for any category missing from the table.
    pub default_threshold: f64,
}

impl ThresholdTable {
    /// Every category at threshold 0, i.e. no gating.
    pub fn open(categories: impl IntoIterator<Item = String>) -> Self {
        Self {
            entries: categories
                .into_iter()
                .map(|c| {
                    (
                        c,
                        ThresholdEntry {
                            band: Band::High,
                            f1: None,
                            threshold: 0.0,
                        },
                    )
                })
                .collect(),
            default_threshold: 0.0,
        }
    }

    pub fn threshold(&self, category: &str) -> f64 {
        self.entries
            .get(category)
            .map_or(self.default_threshold, |e| e.threshold)
    }

    pub fn set_threshold(&mut self, category: &str, threshold: f64) {
        if let Some(e) = self.entries.get_mut(category) {
            e.threshold = threshold.clamp(0.0, 1.0);
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), CascadeError> {
        let mut w = csv::Writer::from_writer(w);
        let io = |e: csv::Error| CascadeError::Io(std::io::Error::other(e));
        w.write_record(["category", "band", "f1", "threshold"]).map_err(io)?;
        for (c, e) in &self.entries {
            let f1 = e.f1.map(|f| f.to_string()).unwrap_or_default();
            w.write_record([c.as_str(), e.band.as_str(), &f1, &e.threshold.to_string()])
                .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the audit CSV. Missing categories fall back to `default_threshold`.
    pub fn read_csv<R: Read>(r: R, default_threshold: f64) -> Result<Self, CascadeError> {
        let mut rd = csv::Reader::from_reader(r);
        let mut entries = BTreeMap::new();
        for rec in rd.records() {
            let perr = |row: u64, message: String| CascadeError::ThresholdParse { row, message };
            let rec = rec.map_err(|e| perr(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let row = rec.position().map_or(0, |p| p.line());
            if rec.len() != 4 {
                return Err(perr(row, format!("expected 4 fields, got {}", rec.len())));
            }
            let band = Band::parse(&rec[1]).ok_or_else(|| perr(row, format!("bad band {:?}", &rec[1])))?;
            let f1 = if rec[2].is_empty() {
                None
            } else {
                Some(rec[2].parse::<f64>().map_err(|e| perr(row, e.to_string()))?)
            };
            let threshold: f64 = rec[3]
                .parse()
                .map_err(|e: std::num::ParseFloatError| perr(row, e.to_string()))?;
            if !(0.0..=1.0).contains(&threshold) {
                return Err(perr(row, format!("threshold {threshold} outside [0,1]")));
            }
            entries.insert(rec[0].to_string(), ThresholdEntry { band, f1, threshold });
        }
        Ok(Self {
            entries,
            default_threshold,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CascadeError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path, default_threshold: f64) -> Result<Self, CascadeError> {
        Self::read_csv(std::fs::File::open(path)?, default_threshold)
    }
}

/// Per category: validation F1 picks the band; MID takes the smallest
/// probability among that category's correctly classified samples.
pub fn calibrate_thresholds(
    model: &dyn Scorer,
    valid: &Dataset,
    cfg: &BandConfig,
) -> Result<ThresholdTable, CascadeError> {
    if valid.is_empty() {
        return Err(CascadeError::EmptyValidation);
    }
    let mut preds = Vec::with_capacity(valid.len());
    for fv in valid.features() {
        preds.push(model.score(fv)?);
    }
    let truth: Vec<&str> = (0..valid.len()).map(|i| valid.label_of(i)).collect();
    Ok(thresholds_from_predictions(&model.categories(), &truth, &preds, cfg))
}

/// Calibration from precomputed predictions.
pub fn thresholds_from_predictions(
    categories: &[String],
    truth: &[&str],
    preds: &[Prediction],
    cfg: &BandConfig,
) -> ThresholdTable {
    let predicted: Vec<&str> = preds.iter().map(|p| p.label.as_str()).collect();
    let per = per_class_metrics(truth, &predicted);
    let mut correct: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (t, p) in truth.iter().zip(preds) {
        if *t == p.label {
            correct.entry(t).or_default().push(p.prob);
        }
    }
    let entries = categories
        .iter()
        .map(|c| {
            let entry = match per.get(c).filter(|m| m.support > 0) {
                None => ThresholdEntry {
                    band: Band::Low,
                    f1: None,
                    threshold: cfg.high_value,
                },
                Some(m) => {
                    let band = band_for(m.f1, cfg);
                    let probs = correct.get(c.as_str()).map_or(&[][..], Vec::as_slice);
                    ThresholdEntry {
                        band,
                        f1: Some(m.f1),
                        threshold: band_threshold(band, probs, cfg),
                    }
                }
            };
            (c.clone(), entry)
        })
        .collect();
    ThresholdTable {
        entries,
        default_threshold: cfg.high_value,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum GateDecision {
    Auto { category: String, prob: f64 },
    Abstain { candidates: Vec<(String, f64)> },
}

impl GateDecision {
    pub fn is_auto(&self) -> bool {
        matches!(self, GateDecision::Auto { .. })
    }
}

pub const ABSTAIN_CANDIDATES: usize = 3;

pub fn gate(pred: &Prediction, tt: &ThresholdTable) -> GateDecision {
    if pred.prob >= tt.threshold(&pred.label) {
        GateDecision::Auto {
            category: pred.label.clone(),
            prob: pred.prob,
        }
    } else {
        GateDecision::Abstain {
            candidates: pred.top(ABSTAIN_CANDIDATES),
        }
    }
}

pub fn gated_classify(
    model: &dyn Scorer,
    tt: &ThresholdTable,
    fv: &FeatureVector,
) -> Result<GateDecision, ClassifierError> {
    Ok(gate(&model.score(fv)?, tt))
}

/// Scores a test set, optionally gated, into a metrics report.
pub fn evaluate(
    model: &dyn Scorer,
    test: &Dataset,
    thresholds: Option<&ThresholdTable>,
) -> Result<MetricsReport, ClassifierError> {
    let mut predicted = Vec::with_capacity(test.len());
    let mut auto = Vec::with_capacity(test.len());
    for fv in test.features() {
        let p = model.score(fv)?;
        if let Some(tt) = thresholds {
            auto.push(gate(&p, tt).is_auto());
        }
        predicted.push(p.label);
    }
    let truth: Vec<String> = (0..test.len()).map(|i| test.label_of(i).to_string()).collect();
    Ok(classification_report(
        &truth,
        &predicted,
        thresholds.map(|_| auto.as_slice()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::{BoostParams, ForestParams, ModelKind};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pred(label: &str, prob: f64) -> Prediction {
        Prediction {
            label: label.into(),
            prob,
            ranked: vec![(label.into(), prob)],
        }
    }

    #[test]
    fn band_boundaries() {
        let cfg = BandConfig::default();
        assert_eq!(band_for(0.74, &cfg), Band::Low);
        assert_eq!(band_for(0.75, &cfg), Band::Mid);
        assert_eq!(band_for(0.89, &cfg), Band::Mid);
        assert_eq!(band_for(0.90, &cfg), Band::High);
        assert_eq!(band_threshold(Band::High, &[0.3], &cfg), 0.0);
        assert_eq!(band_threshold(Band::Low, &[0.3], &cfg), 0.95);
        assert_eq!(band_threshold(Band::Mid, &[0.71, 0.62, 0.88], &cfg), 0.62);
    }

    #[test]
    fn gate_examples() {
        let mut tt = ThresholdTable::open(["X".to_string(), "Y".to_string()]);
        tt.set_threshold("Y", 0.95);
        assert_eq!(
            gate(&pred("X", 0.9), &tt),
            GateDecision::Auto {
                category: "X".into(),
                prob: 0.9
            }
        );
        assert!(!gate(&pred("Y", 0.6), &tt).is_auto());
    }

    #[test]
    fn mid_band_table_from_predictions() {
        // Category m: 6 true rows, 5 correct -> recall 5/6; 1 false positive
        // from n -> precision 5/6; F1 = 0.8333 (MID).
        let mut truth = vec!["m"; 6];
        let mut preds: Vec<Prediction> = [0.62, 0.71, 0.88, 0.9, 0.99].iter().map(|&p| pred("m", p)).collect();
        preds.push(pred("n", 0.4));
        truth.extend(["n"; 6]);
        preds.push(pred("m", 0.3));
        preds.extend((0..5).map(|_| pred("n", 0.8)));
        let cats = vec!["m".to_string(), "n".to_string(), "z".to_string()];
        let tt = thresholds_from_predictions(&cats, &truth, &preds, &BandConfig::default());
        assert_eq!(tt.entries["m"].band, Band::Mid);
        assert_eq!(tt.entries["m"].threshold, 0.62);
        assert_eq!(tt.entries["z"].f1, None);
        assert_eq!(tt.entries["z"].threshold, 0.95);
        // Every correct sample of m passes its own threshold.
        for (t, p) in truth.iter().zip(&preds) {
            if *t == "m" && p.label == "m" {
                assert!(gate(p, &tt).is_auto());
            }
        }
    }

    #[test]
    fn threshold_csv_round_trip() {
        let mut tt = ThresholdTable::open(["a/b".to_string(), "c,d".to_string()]);
        tt.entries.get_mut("a/b").unwrap().f1 = Some(0.8);
        tt.entries.get_mut("a/b").unwrap().band = Band::Mid;
        tt.set_threshold("a/b", 0.61);
        tt.default_threshold = 0.95;
        let mut buf = Vec::new();
        tt.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("category,band,f1,threshold\n"));
        let back = ThresholdTable::read_csv(text.as_bytes(), 0.95).unwrap();
        assert_eq!(back, tt);
        let bad = "category,band,f1,threshold\nx,HUGE,,0.1\n";
        assert!(matches!(
            ThresholdTable::read_csv(bad.as_bytes(), 0.95),
            Err(CascadeError::ThresholdParse { row: 2, .. })
        ));
    }

    /// Clustered toy data where class c lights feature c, plus noise.
    fn clustered(n_classes: usize, per_class: usize, noise: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = n_classes + 4;
        let mut rows = Vec::new();
        for c in 0..n_classes {
            for _ in 0..per_class {
                let mut x = vec![0.0; dim];
                let hit = if rng.random::<f64>() < noise {
                    rng.random_range(0..n_classes)
                } else {
                    c
                };
                x[hit] = 1.0;
                x[n_classes + rng.random_range(0..4)] = rng.random::<f64>();
                rows.push((FeatureVector::from_dense(&x), format!("p/c{c:02}")));
            }
        }
        Dataset::new(rows).unwrap()
    }

    fn params() -> ModelParams {
        ModelParams {
            kind: ModelKind::Boosted,
            boosted: BoostParams {
                n_rounds: 15,
                ..Default::default()
            },
            forest: ForestParams::default(),
            ..Default::default()
        }
    }

    #[test]
    fn head_count_bounds() {
        let ds = clustered(4, 10, 0.1, 1);
        for bad in [0, 5] {
            assert!(matches!(
                build_cascade(&ds, &ds, bad, &params(), 0),
                Err(CascadeError::InsufficientClasses { .. })
            ));
        }
    }

    #[test]
    fn full_head_is_flat() {
        let train = clustered(5, 20, 0.3, 2);
        let valid = clustered(5, 8, 0.3, 3);
        let cm = build_cascade(&train, &valid, 5, &params(), 9).unwrap();
        assert!(cm.tail.is_none() && cm.tail_label_set.is_empty());
        let flat = classifiers::train(&train, &params(), 9).unwrap();
        for fv in valid.features() {
            assert_eq!(cm.cascade_predict(fv).unwrap(), flat.predict(fv).unwrap());
        }
    }

    #[test]
    fn tail_has_remaining_labels_and_head_ranks_by_f1() {
        let train = clustered(6, 20, 0.35, 4);
        let valid = clustered(6, 10, 0.35, 5);
        let cm = build_cascade(&train, &valid, 4, &params(), 1).unwrap();
        assert_eq!(cm.tail_label_set.len(), 2);
        let head: BTreeSet<&String> = cm.head_label_set.iter().collect();
        assert!(cm.tail_label_set.iter().all(|l| !head.contains(l)));
        assert!(cm.head.labels().contains(&LOW_ACCU.to_string()));

        // Independent ranking from the pilot's own validation predictions.
        let pilot = classifiers::train(&train, &params(), 1).unwrap();
        let mut stats: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
        for (fv, t) in valid.rows() {
            let p = pilot.predict(fv).unwrap().0;
            if p == t {
                stats.entry(t.into()).or_default().0 += 1;
            } else {
                stats.entry(p.clone()).or_default().1 += 1;
                stats.entry(t.into()).or_default().2 += 1;
            }
        }
        let mut ranking: Vec<(String, f64)> = pilot
            .labels()
            .iter()
            .map(|l| {
                let (tp, fp, fneg) = stats.get(l).copied().unwrap_or_default();
                let f1 = if tp == 0 {
                    0.0
                } else {
                    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
                };
                (l.clone(), f1)
            })
            .collect();
        ranking.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let expected: BTreeSet<String> = ranking[..4].iter().map(|r| r.0.clone()).collect();
        let got: BTreeSet<String> = cm.head_label_set.iter().cloned().collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn joint_distribution_sums_to_one_and_product_rule() {
        let train = clustered(5, 20, 0.4, 6);
        let valid = clustered(5, 10, 0.4, 7);
        let cm = build_cascade(&train, &valid, 3, &params(), 2).unwrap();
        let tail = cm.tail.as_ref().unwrap();
        for fv in valid.features() {
            let d = cm.distribution(fv).unwrap();
            assert_eq!(d.len(), 5);
            assert!((d.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-9);
            let head = cm.head.predict(fv).unwrap();
            let (label, prob) = cm.cascade_predict(fv).unwrap();
            if head.0 == LOW_ACCU {
                let t = tail.predict(fv).unwrap();
                assert_eq!(label, t.0);
                assert!((prob - head.1 * t.1).abs() < 1e-12);
            } else {
                assert_eq!((label, prob), head);
            }
        }
    }

    #[test]
    fn cascade_artifact_round_trip() {
        let train = clustered(4, 12, 0.3, 8);
        let cm = build_cascade(&train, &train, 2, &params(), 3).unwrap();
        let text = cm.to_json().unwrap();
        let back = CascadeModel::from_json(&text).unwrap();
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn open_gate_equals_plain_predict() {
        let train = clustered(4, 15, 0.3, 10);
        let flat = classifiers::train(&train, &params(), 0).unwrap();
        let tt = ThresholdTable::open(flat.categories());
        for fv in train.features() {
            let (l, p) = flat.predict(fv).unwrap();
            assert_eq!(
                gated_classify(&flat, &tt, fv).unwrap(),
                GateDecision::Auto { category: l, prob: p }
            );
        }
    }

    #[test]
    fn raising_one_threshold_can_lower_selective_accuracy() {
        // Auto set {correct a@0.5, wrong b@0.9}: accuracy 0.5. Raising a's
        // threshold to 0.6 leaves only the wrong one, accuracy 0.
        let truth = ["a", "a"];
        let preds = [pred("a", 0.5), pred("b", 0.9)];
        let acc = |tt: &ThresholdTable| {
            let auto: Vec<bool> = preds.iter().map(|p| gate(p, tt).is_auto()).collect();
            let predicted: Vec<&str> = preds.iter().map(|p| p.label.as_str()).collect();
            classification_report(&truth, &predicted, Some(&auto))
                .selective_accuracy
                .unwrap()
        };
        let mut tt = ThresholdTable::open(["a".to_string(), "b".to_string()]);
        assert_eq!(acc(&tt), 0.5);
        tt.set_threshold("a", 0.6);
        assert_eq!(acc(&tt), 0.0);
    }

    proptest! {
        #[test]
        fn raising_a_threshold_never_increases_coverage(
            rows in prop::collection::vec((0usize..3, 0usize..3, 0.0f64..1.0), 1..80),
            base in prop::collection::vec(0.0f64..1.0, 3),
            cat in 0usize..3,
            bump in 0.0f64..1.0,
        ) {
            let names = ["a", "b", "c"];
            let preds: Vec<Prediction> = rows.iter().map(|r| pred(names[r.1], r.2)).collect();
            let truth: Vec<&str> = rows.iter().map(|r| names[r.0]).collect();
            let measure = |tt: &ThresholdTable| {
                let auto: Vec<bool> = preds.iter().map(|p| gate(p, tt).is_auto()).collect();
                let predicted: Vec<&str> = preds.iter().map(|p| p.label.as_str()).collect();
                let r = classification_report(&truth, &predicted, Some(&auto));
                (r.coverage.unwrap(), r.selective_accuracy.unwrap(), auto.iter().filter(|&&a| a).count())
            };
            let mut tt = ThresholdTable::open(names.iter().map(|s| s.to_string()));
            for (n, &t) in names.iter().zip(&base) {
                tt.set_threshold(n, t);
            }
            let (cov0, _acc0, n0) = measure(&tt);
            let raised = (base[cat] + bump).min(1.0);
            tt.set_threshold(names[cat], raised);
            let (cov1, _acc1, n1) = measure(&tt);
            prop_assert!(cov1 <= cov0);
            prop_assert!(n1 <= n0);
        }
    }
}
