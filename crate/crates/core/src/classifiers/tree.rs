//! Exact greedy binary decision trees over sparse rows.
//!
//! Absent entries are 0.0. A split sends `x[feature] <= threshold` left.
//! Node search buckets only the nonzero entries of the node's rows by
//! feature; the implicit zero group is inserted at its sorted position.

use serde::{Deserialize, Serialize};

use crate::featurizer::FeatureVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node<L> {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf(L),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree<L> {
    pub nodes: Vec<Node<L>>,
}

impl<L> DecisionTree<L> {
    pub fn leaf_index(&self, fv: &FeatureVector) -> usize {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf(_) => return at,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if fv.get(*feature as usize) <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    pub fn leaf(&self, fv: &FeatureVector) -> &L {
        match &self.nodes[self.leaf_index(fv)] {
            Node::Leaf(l) => l,
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn depth(&self) -> usize {
        fn walk<L>(nodes: &[Node<L>], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left as usize).max(walk(nodes, *right as usize)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }
}

/// Split quality bookkeeping for one tree-growing objective.
pub trait Criterion {
    type Stats: Clone;
    type Leaf;

    fn empty(&self) -> Self::Stats;
    fn add(&self, stats: &mut Self::Stats, row: u32);
    fn merge(&self, stats: &mut Self::Stats, other: &Self::Stats);
    fn subtract(&self, total: &Self::Stats, part: &Self::Stats) -> Self::Stats;
    /// Improvement of splitting `parent` into `left` and `parent − left`,
    /// or `None` when the split violates a child constraint.
    fn gain(&self, parent: &Self::Stats, left: &Self::Stats) -> Option<f64>;
    fn leaf(&self, stats: &Self::Stats) -> Self::Leaf;
    /// Whether the node may be split at all.
    fn splittable(&self, stats: &Self::Stats) -> bool;
}

pub struct GrowParams {
    pub max_depth: usize,
    pub min_gain: f64,
}

/// Chooses candidate features for a node from those that vary within it.
pub trait FeatureSampler {
    /// `eligible` is sorted; `None` keeps all of them.
    fn candidates(&mut self, eligible: &[u32]) -> Option<Vec<u32>>;
}

pub struct AllFeatures;

impl FeatureSampler for AllFeatures {
    fn candidates(&mut self, _eligible: &[u32]) -> Option<Vec<u32>> {
        None
    }
}

struct Best {
    gain: f64,
    feature: u32,
    threshold: f64,
}

struct Grower<'a, C: Criterion, S: FeatureSampler> {
    rows: &'a [FeatureVector],
    criterion: &'a C,
    sampler: &'a mut S,
    params: &'a GrowParams,
    buckets: Vec<Vec<(f64, u32)>>,
    slot: Vec<bool>,
    nodes: Vec<Node<C::Leaf>>,
}

impl<C: Criterion, S: FeatureSampler> Grower<'_, C, S> {
    fn stats_of(&self, members: &[u32]) -> C::Stats {
        let mut s = self.criterion.empty();
        for &r in members {
            self.criterion.add(&mut s, r);
        }
        s
    }

    fn find_split(&mut self, members: &[u32], total: &C::Stats) -> Option<Best> {
        let mut touched: Vec<u32> = Vec::new();
        for &r in members {
            for &(f, v) in self.rows[r as usize].entries() {
                if v != 0.0 {
                    let b = &mut self.buckets[f as usize];
                    if b.is_empty() {
                        touched.push(f);
                    }
                    b.push((v, r));
                }
            }
        }
        touched.sort_unstable();
        let n_members = members.len();
        // Features constant within the node cannot split it.
        let eligible: Vec<u32> = touched
            .iter()
            .copied()
            .filter(|&f| {
                let b = &self.buckets[f as usize];
                b.len() < n_members || b.iter().any(|e| e.0 != b[0].0)
            })
            .collect();
        let candidates = self.sampler.candidates(&eligible);
        if let Some(c) = &candidates {
            c.iter().for_each(|&f| self.slot[f as usize] = true);
        }
        let mut best: Option<Best> = None;
        for &f in &touched {
            let mut bucket = std::mem::take(&mut self.buckets[f as usize]);
            let skip = match &candidates {
                None => false,
                Some(_) => !self.slot[f as usize],
            };
            if skip || !eligible.binary_search(&f).is_ok() {
                bucket.clear();
                self.buckets[f as usize] = bucket;
                continue;
            }
            bucket.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let n_zero = n_members - bucket.len();
            let zero_stats = if n_zero > 0 {
                let mut nz = self.criterion.empty();
                for &(_, r) in &bucket {
                    self.criterion.add(&mut nz, r);
                }
                Some(self.criterion.subtract(total, &nz))
            } else {
                None
            };
            // Walk distinct values in ascending order with the zero group
            // placed between negatives and positives.
            let mut left = self.criterion.empty();
            let mut i = 0usize;
            let mut zero_done = zero_stats.is_none();
            loop {
                let next_nz = bucket.get(i).map(|e| e.0);
                let (value, take_zero) = match (zero_done, next_nz) {
                    (false, Some(v)) if v > 0.0 => (0.0, true),
                    (false, None) => (0.0, true),
                    (_, Some(v)) => (v, false),
                    (true, None) => break,
                };
                if take_zero {
                    self.criterion.merge(&mut left, zero_stats.as_ref().unwrap());
                    zero_done = true;
                } else {
                    while i < bucket.len() && bucket[i].0 == value {
                        self.criterion.add(&mut left, bucket[i].1);
                        i += 1;
                    }
                }
                let upcoming = match (zero_done, bucket.get(i).map(|e| e.0)) {
                    (false, Some(v)) if v > 0.0 => Some(0.0),
                    (false, None) => Some(0.0),
                    (_, Some(v)) => Some(v),
                    (true, None) => None,
                };
                let Some(upcoming) = upcoming else { break };
                if let Some(g) = self.criterion.gain(total, &left) {
                    let better = match &best {
                        None => true,
                        Some(b) => g > b.gain,
                    };
                    if g > self.params.min_gain && better {
                        best = Some(Best {
                            gain: g,
                            feature: f,
                            threshold: value + (upcoming - value) / 2.0,
                        });
                    }
                }
            }
            bucket.clear();
            self.buckets[f as usize] = bucket;
        }
        if let Some(c) = &candidates {
            c.iter().for_each(|&f| self.slot[f as usize] = false);
        }
        best
    }

    fn grow(&mut self, members: Vec<u32>, depth: usize) -> u32 {
        let total = self.stats_of(&members);
        let id = self.nodes.len() as u32;
        if depth >= self.params.max_depth || members.len() < 2 || !self.criterion.splittable(&total) {
            self.nodes.push(Node::Leaf(self.criterion.leaf(&total)));
            return id;
        }
        let Some(best) = self.find_split(&members, &total) else {
            self.nodes.push(Node::Leaf(self.criterion.leaf(&total)));
            return id;
        };
        // Placeholder, patched once both children exist.
        self.nodes.push(Node::Leaf(self.criterion.leaf(&total)));
        let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = members
            .into_iter()
            .partition(|&r| self.rows[r as usize].get(best.feature as usize) <= best.threshold);
        let left = self.grow(left_rows, depth + 1);
        let right = self.grow(right_rows, depth + 1);
        self.nodes[id as usize] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }
}

/// Grows one tree over `members` (indices into `rows`, repeats allowed).
pub fn grow_tree<C: Criterion, S: FeatureSampler>(
    rows: &[FeatureVector],
    dim: usize,
    members: Vec<u32>,
    criterion: &C,
    sampler: &mut S,
    params: &GrowParams,
) -> DecisionTree<C::Leaf> {
    let mut g = Grower {
        rows,
        criterion,
        sampler,
        params,
        buckets: vec![Vec::new(); dim],
        slot: vec![false; dim],
        nodes: Vec::new(),
    };
    g.grow(members, 0);
    DecisionTree { nodes: g.nodes }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Sum of squared error around the mean, for testing the scan.
    struct Sse<'a>(&'a [f64]);

    impl Criterion for Sse<'_> {
        type Stats = (f64, f64, usize);
        type Leaf = f64;
        fn empty(&self) -> Self::Stats {
            (0.0, 0.0, 0)
        }
        fn add(&self, s: &mut Self::Stats, row: u32) {
            let y = self.0[row as usize];
            s.0 += y;
            s.1 += y * y;
            s.2 += 1;
        }
        fn merge(&self, s: &mut Self::Stats, o: &Self::Stats) {
            s.0 += o.0;
            s.1 += o.1;
            s.2 += o.2;
        }
        fn subtract(&self, t: &Self::Stats, p: &Self::Stats) -> Self::Stats {
            (t.0 - p.0, t.1 - p.1, t.2 - p.2)
        }
        fn gain(&self, t: &Self::Stats, l: &Self::Stats) -> Option<f64> {
            let r = self.subtract(t, l);
            if l.2 == 0 || r.2 == 0 {
                return None;
            }
            let sse = |s: &Self::Stats| s.1 - s.0 * s.0 / s.2 as f64;
            Some(sse(t) - sse(l) - sse(&r))
        }
        fn leaf(&self, s: &Self::Stats) -> f64 {
            s.0 / s.2 as f64
        }
        fn splittable(&self, _: &Self::Stats) -> bool {
            true
        }
    }

    #[test]
    fn splits_around_implicit_zero_group() {
        // x: -1, 0, 0, 2 with targets making the best cut between 0 and 2.
        let rows = vec![
            FeatureVector::from_dense(&[-1.0]),
            FeatureVector::zeros(1),
            FeatureVector::zeros(1),
            FeatureVector::from_dense(&[2.0]),
        ];
        let y = [0.0, 0.0, 0.0, 10.0];
        let t = grow_tree(
            &rows,
            1,
            vec![0, 1, 2, 3],
            &Sse(&y),
            &mut AllFeatures,
            &GrowParams {
                max_depth: 1,
                min_gain: 0.0,
            },
        );
        match &t.nodes[0] {
            Node::Split { threshold, .. } => assert_eq!(*threshold, 1.0),
            other => panic!("{other:?}"),
        }
        assert_eq!(*t.leaf(&rows[3]), 10.0);
        assert_eq!(*t.leaf(&rows[0]), 0.0);

        // Best cut between -1 and 0.
        let y = [5.0, 0.0, 0.0, 0.0];
        let t = grow_tree(
            &rows,
            1,
            vec![0, 1, 2, 3],
            &Sse(&y),
            &mut AllFeatures,
            &GrowParams {
                max_depth: 1,
                min_gain: 0.0,
            },
        );
        match &t.nodes[0] {
            Node::Split { threshold, .. } => assert_eq!(*threshold, -0.5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn respects_depth_and_purity() {
        let rows: Vec<_> = (0..8).map(|i| FeatureVector::from_dense(&[i as f64])).collect();
        let y: Vec<f64> = (0..8).map(|i| (i * i) as f64).collect();
        let t = grow_tree(
            &rows,
            1,
            (0..8).collect(),
            &Sse(&y),
            &mut AllFeatures,
            &GrowParams {
                max_depth: 2,
                min_gain: 0.0,
            },
        );
        assert!(t.depth() <= 2);
        assert_eq!(t.n_leaves(), 4);
    }
}
