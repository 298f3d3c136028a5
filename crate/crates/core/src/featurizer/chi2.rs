//! Chi-squared feature scoring over binarized presence.

use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureVector};

/// The `k` highest-scoring input indices, sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedSelector {
    pub input_dim: usize,
    pub kept_indices: Vec<u32>,
    pub chi2_scores: Vec<f64>,
}

impl FittedSelector {
    /// Keeps the `k` lowest indices; used when labels carry no signal.
    pub fn lowest(input_dim: usize, k: usize) -> Self {
        Self {
            input_dim,
            kept_indices: (0..k.min(input_dim) as u32).collect(),
            chi2_scores: vec![0.0; input_dim],
        }
    }

    pub fn output_dim(&self) -> usize {
        self.kept_indices.len()
    }

    /// Projects onto the kept indices; output index = rank in `kept_indices`.
    pub fn transform(&self, fv: &FeatureVector) -> FeatureVector {
        let entries = fv
            .entries()
            .iter()
            .filter_map(|&(i, w)| self.kept_indices.binary_search(&i).ok().map(|pos| (pos as u32, w)))
            .collect();
        FeatureVector::from_sorted(self.kept_indices.len(), entries)
    }
}

/// Per-feature chi-squared statistic.
///
/// For feature f with presence count `O_c` in class c (class size `N_c`,
/// corpus size `N`, total presence `P = Σ O_c`), the expected count is
/// `E_c = P · N_c / N` and the score is `Σ_c (O_c − E_c)² / E_c`. Features
/// never present score 0.
pub fn chi2_scores(x: &[FeatureVector], y: &[usize], n_classes: usize, dim: usize) -> Vec<f64> {
    let mut present = vec![0u32; dim * n_classes];
    let mut class_size = vec![0u32; n_classes];
    for (fv, &c) in x.iter().zip(y) {
        class_size[c] += 1;
        for &(i, w) in fv.entries() {
            if w != 0.0 {
                present[i as usize * n_classes + c] += 1;
            }
        }
    }
    let n = x.len() as f64;
    (0..dim)
        .map(|f| {
            let row = &present[f * n_classes..(f + 1) * n_classes];
            let total: u32 = row.iter().sum();
            if total == 0 {
                return 0.0;
            }
            row.iter()
                .zip(&class_size)
                .filter(|(_, &nc)| nc > 0)
                .map(|(&o, &nc)| {
                    let e = f64::from(total) * f64::from(nc) / n;
                    let d = f64::from(o) - e;
                    d * d / e
                })
                .sum()
        })
        .collect()
}

/// Keeps the `k` best features; ties go to the lower index.
pub fn chi2_select(x: &[FeatureVector], y: &[usize], k: usize) -> Result<FittedSelector, FeatureError> {
    if x.is_empty() || x.len() != y.len() {
        return Err(FeatureError::LengthMismatch {
            features: x.len(),
            labels: y.len(),
        });
    }
    let dim = x[0].dim();
    if let Some(bad) = x.iter().find(|v| v.dim() != dim) {
        return Err(FeatureError::DimensionMismatch {
            expected: dim,
            got: bad.dim(),
        });
    }
    let n_classes = y.iter().max().map_or(0, |&m| m + 1);
    let distinct = {
        let mut seen = vec![false; n_classes];
        y.iter().for_each(|&c| seen[c] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(FeatureError::DegenerateLabels);
    }
    let scores = chi2_scores(x, y, n_classes, dim);
    let mut order: Vec<u32> = (0..dim as u32).collect();
    order.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
    order.truncate(k.min(dim));
    order.sort_unstable();
    Ok(FittedSelector {
        input_dim: dim,
        kept_indices: order,
        chi2_scores: scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(dim: usize, present: &[u32]) -> FeatureVector {
        FeatureVector::from_sorted(dim, present.iter().map(|&i| (i, 1.0)).collect())
    }

    #[test]
    fn perfectly_separating_feature_scores_highest() {
        // Feature 0 marks class 0 exactly; feature 1 is in half of each
        // class; feature 2 everywhere.
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..20 {
            let class = usize::from(i >= 10);
            let mut p = vec![];
            if class == 0 {
                p.push(0);
            }
            if i % 2 == 0 {
                p.push(1);
            }
            p.push(2);
            x.push(fv(3, &p));
            y.push(class);
        }
        let s = chi2_select(&x, &y, 1).unwrap();
        assert_eq!(s.kept_indices, [0]);
        // O = (10, 0), E = (5, 5) → 25/5 + 25/5
        assert!((s.chi2_scores[0] - 10.0).abs() < 1e-12);
        assert!(s.chi2_scores[1].abs() < 1e-12);
        assert!(s.chi2_scores[2].abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_lower_index_and_k_saturates() {
        let x = vec![fv(4, &[1, 3]), fv(4, &[0, 2])];
        let y = vec![0, 1];
        let s = chi2_select(&x, &y, 2).unwrap();
        assert_eq!(s.kept_indices, [0, 1]);
        let all = chi2_select(&x, &y, 10).unwrap();
        assert_eq!(all.kept_indices, [0, 1, 2, 3]);
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = vec![fv(3, &[0]), fv(3, &[1])];
        assert!(matches!(
            chi2_select(&x, &[0, 0], 2),
            Err(FeatureError::DegenerateLabels)
        ));
        assert_eq!(FittedSelector::lowest(3, 2).kept_indices, [0, 1]);
    }

    #[test]
    fn transform_remaps_indices() {
        let s = FittedSelector {
            input_dim: 10,
            kept_indices: vec![2, 5, 7],
            chi2_scores: vec![0.0; 10],
        };
        let out = s.transform(&FeatureVector::from_sorted(10, vec![(1, 1.0), (5, 2.0), (7, 3.0)]));
        assert_eq!(out, FeatureVector::from_sorted(3, vec![(1, 2.0), (2, 3.0)]));
    }
}
