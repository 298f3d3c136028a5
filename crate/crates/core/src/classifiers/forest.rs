//! Bagged gini trees.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{grow_tree, Criterion, DecisionTree, FeatureSampler, GrowParams};
use super::{check_dim, ClassifierError, Dataset, ProbabilisticClassifier};
use crate::featurizer::FeatureVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Fraction of features considered at each split; `None` = sqrt(dim).
    pub feature_fraction: Option<f64>,
    pub min_samples_leaf: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 64,
            feature_fraction: None,
            min_samples_leaf: 1,
        }
    }
}

/// Leaf payload: sparse class proportions summing to 1.
pub type ClassDistribution = Vec<(u32, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub label_set: Vec<String>,
    pub dim: usize,
    pub params: ForestParams,
    pub seed: u64,
    pub trees: Vec<DecisionTree<ClassDistribution>>,
}

struct Gini<'a> {
    targets: &'a [usize],
    n_classes: usize,
    min_leaf: usize,
}

#[derive(Clone)]
struct ClassCounts {
    counts: Vec<u32>,
    n: u32,
}

impl Criterion for Gini<'_> {
    type Stats = ClassCounts;
    type Leaf = ClassDistribution;

    fn empty(&self) -> ClassCounts {
        ClassCounts {
            counts: vec![0; self.n_classes],
            n: 0,
        }
    }

    fn add(&self, s: &mut ClassCounts, row: u32) {
        s.counts[self.targets[row as usize]] += 1;
        s.n += 1;
    }

    fn merge(&self, s: &mut ClassCounts, o: &ClassCounts) {
        s.counts.iter_mut().zip(&o.counts).for_each(|(a, b)| *a += b);
        s.n += o.n;
    }

    fn subtract(&self, t: &ClassCounts, p: &ClassCounts) -> ClassCounts {
        ClassCounts {
            counts: t.counts.iter().zip(&p.counts).map(|(a, b)| a - b).collect(),
            n: t.n - p.n,
        }
    }

    fn gain(&self, t: &ClassCounts, l: &ClassCounts) -> Option<f64> {
        let nr = t.n - l.n;
        if (l.n as usize) < self.min_leaf || (nr as usize) < self.min_leaf {
            return None;
        }
        // Gini decrease, n-weighted: Σ cL²/nL + Σ cR²/nR − Σ c²/n, over n.
        let (mut sl, mut sr, mut st) = (0.0, 0.0, 0.0);
        for (&c, &cl) in t.counts.iter().zip(&l.counts) {
            let cr = f64::from(c - cl);
            sl += f64::from(cl) * f64::from(cl);
            sr += cr * cr;
            st += f64::from(c) * f64::from(c);
        }
        let n = f64::from(t.n);
        Some((sl / f64::from(l.n) + sr / f64::from(nr) - st / n) / n)
    }

    fn leaf(&self, s: &ClassCounts) -> ClassDistribution {
        let n = f64::from(s.n.max(1));
        s.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (i as u32, f64::from(c) / n))
            .collect()
    }

    fn splittable(&self, s: &ClassCounts) -> bool {
        s.counts.iter().filter(|&&c| c > 0).count() > 1 && s.n as usize >= 2 * self.min_leaf
    }
}

struct RandomSubset<'a> {
    rng: &'a mut ChaCha8Rng,
    k: usize,
}

impl FeatureSampler for RandomSubset<'_> {
    fn candidates(&mut self, eligible: &[u32]) -> Option<Vec<u32>> {
        if self.k >= eligible.len() {
            return None;
        }
        let mut v: Vec<u32> = sample(self.rng, eligible.len(), self.k)
            .iter()
            .map(|i| eligible[i])
            .collect();
        v.sort_unstable();
        Some(v)
    }
}

pub fn train_forest(ds: &Dataset, params: &ForestParams, seed: u64) -> Result<ForestModel, ClassifierError> {
    if ds.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    let dim = ds.dim();
    let k = match params.feature_fraction {
        Some(f) => ((dim as f64 * f).ceil() as usize).clamp(1, dim.max(1)),
        None => ((dim as f64).sqrt().ceil() as usize).clamp(1, dim.max(1)),
    };
    let n = ds.len();
    let criterion = Gini {
        targets: ds.targets(),
        n_classes: ds.n_classes(),
        min_leaf: params.min_samples_leaf.max(1),
    };
    let grow = GrowParams {
        max_depth: params.max_depth,
        min_gain: 1e-12,
    };
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let members: Vec<u32> = (0..n).map(|_| rng.random_range(0..n as u32)).collect();
            let mut sampler = RandomSubset { rng: &mut rng, k };
            grow_tree(ds.features(), dim, members, &criterion, &mut sampler, &grow)
        })
        .collect();
    Ok(ForestModel {
        label_set: ds.label_set().to_vec(),
        dim,
        params: params.clone(),
        seed,
        trees,
    })
}

impl ProbabilisticClassifier for ForestModel {
    fn labels(&self) -> &[String] {
        &self.label_set
    }

    fn dim(&self) -> usize {
        self.dim
    }

    /// Arithmetic mean of the member trees' leaf distributions.
    fn predict_proba(&self, fv: &FeatureVector) -> Result<Vec<f64>, ClassifierError> {
        check_dim(self.dim, fv)?;
        let mut probs = vec![0.0; self.label_set.len()];
        for tree in &self.trees {
            for &(c, p) in tree.leaf(fv) {
                probs[c as usize] += p;
            }
        }
        let n = self.trees.len().max(1) as f64;
        probs.iter_mut().for_each(|p| *p /= n);
        Ok(probs)
    }
}
