//! Precision/recall/F1, selective-classification coverage, and per-day
//! automation accounting.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub per_category: BTreeMap<String, ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    /// Fraction of rows auto-classified; present when a gate was applied.
    pub coverage: Option<f64>,
    /// Accuracy over the auto-classified rows only.
    pub selective_accuracy: Option<f64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-label metrics over the union of true and predicted labels. Undefined
/// precision or recall counts as 0.
pub fn per_class_metrics<S: AsRef<str>>(truth: &[S], predicted: &[S]) -> BTreeMap<String, ClassMetrics> {
    assert_eq!(truth.len(), predicted.len(), "truth and prediction lengths differ");
    let labels: BTreeSet<&str> = truth.iter().chain(predicted).map(AsRef::as_ref).collect();
    let mut tp: BTreeMap<&str, usize> = BTreeMap::new();
    let mut pred_n: BTreeMap<&str, usize> = BTreeMap::new();
    let mut true_n: BTreeMap<&str, usize> = BTreeMap::new();
    for (t, p) in truth.iter().zip(predicted) {
        let (t, p) = (t.as_ref(), p.as_ref());
        *true_n.entry(t).or_default() += 1;
        *pred_n.entry(p).or_default() += 1;
        if t == p {
            *tp.entry(t).or_default() += 1;
        }
    }
    labels
        .into_iter()
        .map(|l| {
            let tp = tp.get(l).copied().unwrap_or(0);
            let support = true_n.get(l).copied().unwrap_or(0);
            let precision = ratio(tp, pred_n.get(l).copied().unwrap_or(0));
            let recall = ratio(tp, support);
            (
                l.to_string(),
                ClassMetrics {
                    precision,
                    recall,
                    f1: f1_of(precision, recall),
                    support,
                },
            )
        })
        .collect()
}

/// Builds a report from true and predicted labels. `auto` marks which rows
/// the gate accepted; when given, coverage and selective accuracy are set.
/// Precision/recall/F1 always cover every row (the ungated prediction).
pub fn classification_report<S: AsRef<str>>(truth: &[S], predicted: &[S], auto: Option<&[bool]>) -> MetricsReport {
    let n = truth.len();
    let per_category = per_class_metrics(truth, predicted);
    let correct = truth
        .iter()
        .zip(predicted)
        .filter(|(t, p)| t.as_ref() == p.as_ref())
        .count();
    let accuracy = ratio(correct, n);
    let k = per_category.len().max(1) as f64;
    let macro_precision = per_category.values().map(|m| m.precision).sum::<f64>() / k;
    let macro_recall = per_category.values().map(|m| m.recall).sum::<f64>() / k;
    let macro_f1 = per_category.values().map(|m| m.f1).sum::<f64>() / k;
    let (coverage, selective_accuracy) = match auto {
        None => (None, None),
        Some(flags) => {
            assert_eq!(flags.len(), n, "auto flags length differs");
            let accepted = flags.iter().filter(|&&a| a).count();
            let accepted_correct = truth
                .iter()
                .zip(predicted)
                .zip(flags)
                .filter(|((t, p), &a)| a && t.as_ref() == p.as_ref())
                .count();
            (Some(ratio(accepted, n)), Some(ratio(accepted_correct, accepted)))
        }
    };
    MetricsReport {
        n,
        accuracy,
        per_category,
        macro_precision,
        macro_recall,
        macro_f1,
        micro_precision: accuracy,
        micro_recall: accuracy,
        micro_f1: accuracy,
        coverage,
        selective_accuracy,
    }
}

impl MetricsReport {
    /// Per-category rows as CSV `category,precision,recall,f1,support`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["category", "precision", "recall", "f1", "support"])
            .expect("in-memory write");
        for (c, m) in &self.per_category {
            w.write_record([
                c.clone(),
                format!("{:.6}", m.precision),
                format!("{:.6}", m.recall),
                format!("{:.6}", m.f1),
                m.support.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| out.push_str(&format!("{k:<20} {v}\n"));
        line("rows", self.n.to_string());
        line("accuracy", format!("{:.4}", self.accuracy));
        line("macro precision", format!("{:.4}", self.macro_precision));
        line("macro recall", format!("{:.4}", self.macro_recall));
        line("macro f1", format!("{:.4}", self.macro_f1));
        line("micro f1", format!("{:.4}", self.micro_f1));
        if let Some(c) = self.coverage {
            line("coverage", format!("{c:.4}"));
        }
        if let Some(s) = self.selective_accuracy {
            line("selective accuracy", format!("{s:.4}"));
        }
        out
    }
}

/// Terminal outcome class of one routed email.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeOrigin {
    Quickfix,
    Static,
    MlAuto,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DayCounts {
    pub quickfix: usize,
    pub static_rule: usize,
    pub ml_auto: usize,
    pub manual: usize,
}

impl DayCounts {
    pub fn add(&mut self, origin: OutcomeOrigin) {
        match origin {
            OutcomeOrigin::Quickfix => self.quickfix += 1,
            OutcomeOrigin::Static => self.static_rule += 1,
            OutcomeOrigin::MlAuto => self.ml_auto += 1,
            OutcomeOrigin::Manual => self.manual += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.quickfix + self.static_rule + self.ml_auto + self.manual
    }

    pub fn automated(&self) -> usize {
        self.quickfix + self.static_rule + self.ml_auto
    }

    /// (quickfix + static + ml) / total, or 0 for an empty day.
    pub fn automation_share(&self) -> f64 {
        ratio(self.automated(), self.total())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DailyReport {
    pub days: BTreeMap<NaiveDate, DayCounts>,
}

impl DailyReport {
    /// Counts `(day, origin)` outcomes falling in `[from, to]`.
    pub fn from_outcomes(
        outcomes: impl IntoIterator<Item = (NaiveDate, OutcomeOrigin)>,
        from: Option<NaiveDate>,
        to: Option<NaiveDate>,
    ) -> Self {
        let mut days: BTreeMap<NaiveDate, DayCounts> = BTreeMap::new();
        for (d, o) in outcomes {
            if from.is_some_and(|f| d < f) || to.is_some_and(|t| d > t) {
                continue;
            }
            days.entry(d).or_default().add(o);
        }
        Self { days }
    }

    pub fn totals(&self) -> DayCounts {
        let mut t = DayCounts::default();
        for c in self.days.values() {
            t.quickfix += c.quickfix;
            t.static_rule += c.static_rule;
            t.ml_auto += c.ml_auto;
            t.manual += c.manual;
        }
        t
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "date",
            "quickfix",
            "static",
            "ml_auto",
            "manual",
            "total",
            "automation_share",
        ])
        .expect("in-memory write");
        for (d, c) in &self.days {
            w.write_record([
                d.to_string(),
                c.quickfix.to_string(),
                c.static_rule.to_string(),
                c.ml_auto.to_string(),
                c.manual.to_string(),
                c.total().to_string(),
                format!("{:.4}", c.automation_share()),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}
