//! Multinomial naive-count baseline over nonnegative feature weights.

use serde::{Deserialize, Serialize};

use super::{check_dim, softmax, ClassifierError, Dataset, ProbabilisticClassifier};
use crate::featurizer::FeatureVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NaiveParams {
    /// Additive (Laplace) smoothing per feature.
    pub alpha: f64,
}

impl Default for NaiveParams {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveCountModel {
    pub label_set: Vec<String>,
    pub dim: usize,
    pub log_prior: Vec<f64>,
    /// Per class, sparse log-likelihoods of features with nonzero mass.
    pub log_likelihood: Vec<Vec<(u32, f64)>>,
    /// Per class, log-likelihood of a feature never seen with that class.
    pub log_unseen: Vec<f64>,
}

pub fn train_naive(ds: &Dataset, params: &NaiveParams) -> Result<NaiveCountModel, ClassifierError> {
    if ds.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    if params.alpha.is_nan() || params.alpha <= 0.0 {
        return Err(ClassifierError::InvalidParams("alpha must be > 0".into()));
    }
    let k = ds.n_classes();
    let mut counts = vec![std::collections::BTreeMap::<u32, f64>::new(); k];
    let mut class_rows = vec![0usize; k];
    for (fv, &t) in ds.features().iter().zip(ds.targets()) {
        class_rows[t] += 1;
        for &(i, v) in fv.entries() {
            *counts[t].entry(i).or_default() += v.max(0.0);
        }
    }
    let n = ds.len() as f64;
    let dim = ds.dim() as f64;
    let mut log_likelihood = Vec::with_capacity(k);
    let mut log_unseen = Vec::with_capacity(k);
    for c in &counts {
        let total: f64 = c.values().sum::<f64>() + params.alpha * dim;
        log_unseen.push((params.alpha / total).ln());
        log_likelihood.push(
            c.iter()
                .map(|(&i, &v)| (i, ((v + params.alpha) / total).ln()))
                .collect(),
        );
    }
    Ok(NaiveCountModel {
        label_set: ds.label_set().to_vec(),
        dim: ds.dim(),
        log_prior: class_rows.iter().map(|&r| (r as f64 / n).ln()).collect(),
        log_likelihood,
        log_unseen,
    })
}

impl ProbabilisticClassifier for NaiveCountModel {
    fn labels(&self) -> &[String] {
        &self.label_set
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_proba(&self, fv: &FeatureVector) -> Result<Vec<f64>, ClassifierError> {
        check_dim(self.dim, fv)?;
        let scores: Vec<f64> = (0..self.label_set.len())
            .map(|c| {
                let ll = &self.log_likelihood[c];
                let mut s = self.log_prior[c];
                for &(i, v) in fv.entries() {
                    let w = match ll.binary_search_by_key(&i, |e| e.0) {
                        Ok(j) => ll[j].1,
                        Err(_) => self.log_unseen[c],
                    };
                    s += v.max(0.0) * w;
                }
                s
            })
            .collect();
        Ok(softmax(&scores))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_pick_majority_vocabulary() {
        let fv = |x: &[f64]| FeatureVector::from_dense(x);
        let ds = Dataset::new(vec![
            (fv(&[3.0, 0.0]), "x".into()),
            (fv(&[2.0, 1.0]), "x".into()),
            (fv(&[0.0, 4.0]), "y".into()),
        ])
        .unwrap();
        let m = train_naive(&ds, &NaiveParams::default()).unwrap();
        // Class x: counts (5,1)+1 over 8 → ln(6/8), ln(2/8).
        assert!((m.log_likelihood[0][0].1 - (6.0f64 / 8.0).ln()).abs() < 1e-12);
        assert_eq!(m.predict(&fv(&[1.0, 0.0])).unwrap().0, "x");
        assert_eq!(m.predict(&fv(&[0.0, 1.0])).unwrap().0, "y");
    }
}
