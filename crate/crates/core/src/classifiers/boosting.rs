//! One-vs-rest second-order gradient boosting on logistic loss.
//!
//! For each class k the margin is `F_k(x) = base_k + η Σ_t f_kt(x)`. Each
//! round fits a regression tree to the per-row gradient `g = σ(F) − y` and
//! hessian `h = σ(F)(1 − σ(F))`. Splits maximize
//! `½ [G_L²/(H_L+λ) + G_R²/(H_R+λ) − G²/(H+λ)] − γ` and leaves take the
//! Newton weight `−G/(H+λ)`. Class probabilities are the softmax of the
//! margins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{grow_tree, AllFeatures, Criterion, DecisionTree, GrowParams};
use super::{check_dim, softmax, ClassifierError, Dataset, ProbabilisticClassifier};
use crate::featurizer::FeatureVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostParams {
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    /// L2 penalty λ on leaf weights.
    pub l2_reg: f64,
    /// Minimum split gain γ.
    pub min_split_gain: f64,
    /// Minimum hessian sum per child.
    pub min_child_weight: f64,
    /// Row subsampling per round; 1.0 uses every row.
    pub subsample: f64,
    /// Initial margin for every class; `None` = log-odds of the class prior.
    pub base_score: Option<f64>,
}

impl Default for BoostParams {
    fn default() -> Self {
        Self {
            n_rounds: 100,
            learning_rate: 0.3,
            max_depth: 6,
            l2_reg: 1.0,
            min_split_gain: 0.0,
            min_child_weight: 1.0,
            subsample: 1.0,
            base_score: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedModel {
    pub label_set: Vec<String>,
    pub dim: usize,
    pub params: BoostParams,
    pub seed: u64,
    pub base_scores: Vec<f64>,
    /// One tree sequence per label, leaves hold raw (unscaled) weights.
    pub trees: Vec<Vec<DecisionTree<f64>>>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary logistic loss at margin `score` for label `y` ∈ {0, 1}.
pub fn logistic_loss(score: f64, y: f64) -> f64 {
    // log(1 + e^s) − y s, evaluated stably.
    let softplus = if score > 0.0 {
        score + (-score).exp().ln_1p()
    } else {
        score.exp().ln_1p()
    };
    softplus - y * score
}

/// First and second derivative of [`logistic_loss`] in the margin.
pub fn logistic_grad_hess(score: f64, y: f64) -> (f64, f64) {
    let p = sigmoid(score);
    (p - y, p * (1.0 - p))
}

struct SecondOrder<'a> {
    grad: &'a [f64],
    hess: &'a [f64],
    lambda: f64,
    gamma: f64,
    min_child_weight: f64,
}

impl SecondOrder<'_> {
    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.lambda)
    }
}

impl Criterion for SecondOrder<'_> {
    type Stats = (f64, f64);
    type Leaf = f64;

    fn empty(&self) -> (f64, f64) {
        (0.0, 0.0)
    }

    fn add(&self, s: &mut (f64, f64), row: u32) {
        s.0 += self.grad[row as usize];
        s.1 += self.hess[row as usize];
    }

    fn merge(&self, s: &mut (f64, f64), o: &(f64, f64)) {
        s.0 += o.0;
        s.1 += o.1;
    }

    fn subtract(&self, t: &(f64, f64), p: &(f64, f64)) -> (f64, f64) {
        (t.0 - p.0, t.1 - p.1)
    }

    fn gain(&self, t: &(f64, f64), l: &(f64, f64)) -> Option<f64> {
        let r = (t.0 - l.0, t.1 - l.1);
        if l.1 < self.min_child_weight || r.1 < self.min_child_weight {
            return None;
        }
        if l.1 + self.lambda <= 0.0 || r.1 + self.lambda <= 0.0 {
            return None;
        }
        Some(0.5 * (self.score(l.0, l.1) + self.score(r.0, r.1) - self.score(t.0, t.1)) - self.gamma)
    }

    fn leaf(&self, s: &(f64, f64)) -> f64 {
        let denom = s.1 + self.lambda;
        if denom <= 0.0 {
            0.0
        } else {
            -s.0 / denom
        }
    }

    fn splittable(&self, s: &(f64, f64)) -> bool {
        s.1 >= 2.0 * self.min_child_weight
    }
}

/// Per-round training loss, summed over classes and rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BoostingHistory {
    pub initial_loss: f64,
    pub round_loss: Vec<f64>,
}

struct ClassRun {
    base: f64,
    trees: Vec<DecisionTree<f64>>,
    losses: Vec<f64>,
    initial: f64,
}

fn train_one_class(ds: &Dataset, class: usize, params: &BoostParams, seed: u64) -> Result<ClassRun, ClassifierError> {
    let n = ds.len();
    let y: Vec<f64> = ds
        .targets()
        .iter()
        .map(|&t| if t == class { 1.0 } else { 0.0 })
        .collect();
    let base = params.base_score.unwrap_or_else(|| {
        let prior = (y.iter().sum::<f64>() / n as f64).clamp(1e-6, 1.0 - 1e-6);
        (prior / (1.0 - prior)).ln()
    });
    let mut margins = vec![base; n];
    let total_loss = |m: &[f64]| m.iter().zip(&y).map(|(&s, &t)| logistic_loss(s, t)).sum::<f64>();
    let initial = total_loss(&margins);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class as u64);
    let grow = GrowParams {
        max_depth: params.max_depth,
        min_gain: 1e-12_f64.max(0.0),
    };
    let mut trees = Vec::with_capacity(params.n_rounds);
    let mut losses = Vec::with_capacity(params.n_rounds);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for round in 0..params.n_rounds {
        for i in 0..n {
            let (g, h) = logistic_grad_hess(margins[i], y[i]);
            grad[i] = g;
            hess[i] = h;
        }
        let members: Vec<u32> = if params.subsample < 1.0 {
            (0..n as u32)
                .filter(|_| rng.random::<f64>() < params.subsample)
                .collect()
        } else {
            (0..n as u32).collect()
        };
        let criterion = SecondOrder {
            grad: &grad,
            hess: &hess,
            lambda: params.l2_reg,
            gamma: params.min_split_gain,
            min_child_weight: params.min_child_weight,
        };
        let tree = grow_tree(ds.features(), ds.dim(), members, &criterion, &mut AllFeatures, &grow);
        for (m, fv) in margins.iter_mut().zip(ds.features()) {
            *m += params.learning_rate * tree.leaf(fv);
        }
        let loss = total_loss(&margins);
        if !loss.is_finite() {
            return Err(ClassifierError::NonFiniteLoss { round: round + 1 });
        }
        losses.push(loss);
        trees.push(tree);
    }
    Ok(ClassRun {
        base,
        trees,
        losses,
        initial,
    })
}

pub fn train_boosted(ds: &Dataset, params: &BoostParams, seed: u64) -> Result<BoostedModel, ClassifierError> {
    train_boosted_with_history(ds, params, seed).map(|(m, _)| m)
}

pub fn train_boosted_with_history(
    ds: &Dataset,
    params: &BoostParams,
    seed: u64,
) -> Result<(BoostedModel, BoostingHistory), ClassifierError> {
    if ds.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    if params.learning_rate.is_nan() || params.learning_rate <= 0.0 || params.learning_rate.is_infinite() {
        return Err(ClassifierError::InvalidParams("learning_rate must be > 0".into()));
    }
    let runs: Vec<ClassRun> = (0..ds.n_classes())
        .into_par_iter()
        .map(|k| train_one_class(ds, k, params, seed))
        .collect::<Result<_, _>>()?;
    let history = BoostingHistory {
        initial_loss: runs.iter().map(|r| r.initial).sum(),
        round_loss: (0..params.n_rounds)
            .map(|t| runs.iter().map(|r| r.losses[t]).sum())
            .collect(),
    };
    let model = BoostedModel {
        label_set: ds.label_set().to_vec(),
        dim: ds.dim(),
        params: params.clone(),
        seed,
        base_scores: runs.iter().map(|r| r.base).collect(),
        trees: runs.into_iter().map(|r| r.trees).collect(),
    };
    Ok((model, history))
}

impl BoostedModel {
    pub fn margins(&self, fv: &FeatureVector) -> Result<Vec<f64>, ClassifierError> {
        check_dim(self.dim, fv)?;
        Ok(self
            .trees
            .iter()
            .zip(&self.base_scores)
            .map(|(seq, &b)| b + self.params.learning_rate * seq.iter().map(|t| *t.leaf(fv)).sum::<f64>())
            .collect())
    }
}

impl ProbabilisticClassifier for BoostedModel {
    fn labels(&self) -> &[String] {
        &self.label_set
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_proba(&self, fv: &FeatureVector) -> Result<Vec<f64>, ClassifierError> {
        Ok(softmax(&self.margins(fv)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_at_zero() {
        let (g, h) = logistic_grad_hess(0.0, 1.0);
        assert_eq!(g, -0.5);
        assert_eq!(h, 0.25);
    }

    #[test]
    fn loss_is_stable_for_large_margins() {
        assert!(logistic_loss(800.0, 1.0).abs() < 1e-12);
        assert!((logistic_loss(800.0, 0.0) - 800.0).abs() < 1e-9);
        assert!((logistic_loss(-800.0, 1.0) - 800.0).abs() < 1e-9);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }
}
