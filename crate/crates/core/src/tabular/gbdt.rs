//! Least-squares gradient boosting with exact greedy splits.
//!
//! Trees are grown level by level up to `max_depth`, with at most
//! `num_leaves` leaves. A row goes left when `x[feature] <= threshold`.
//! Split candidates sit at midpoints between consecutive distinct values;
//! equal gains resolve to the lowest feature index, then lowest threshold.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::{TabularDataset, TabularError};
use crate::par;

const GAIN_EPS: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub num_leaves: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub min_samples_leaf: usize,
    pub max_rounds: usize,
    pub patience: usize,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            num_leaves: 31,
            max_depth: 6,
            shrinkage: 0.1,
            min_samples_leaf: 20,
            max_rounds: 500,
            patience: 20,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<(), TabularError> {
        let bad = |m: &str| Err(TabularError::InvalidConfig(m.to_string()));
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return bad("shrinkage must be in (0, 1]");
        }
        if self.num_leaves < 2 {
            return bad("num_leaves must be at least 2");
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf must be positive");
        }
        Ok(())
    }
}

/// One node of a regression tree. Leaves have `feature_index == None`;
/// `leaf_value` on internal nodes is the mean target of their samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub feature_index: Option<usize>,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    pub leaf_value: f64,
    /// Number of training rows routed through this node.
    pub cover: f64,
}

impl TreeNode {
    pub fn leaf(value: f64, cover: f64) -> Self {
        Self {
            feature_index: None,
            threshold: 0.0,
            left: 0,
            right: 0,
            leaf_value: value,
            cover,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.feature_index.is_none()
    }
}

/// Flat node array, root at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "NestedNode", try_from = "NestedNode")]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn predict_row(&self, row: ArrayView1<'_, f64>) -> f64 {
        let mut i = 0;
        loop {
            let n = &self.nodes[i];
            match n.feature_index {
                None => return n.leaf_value,
                Some(f) => i = if row[f] <= n.threshold { n.left } else { n.right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &DecisionTree, i: usize) -> usize {
            let n = &t.nodes[i];
            if n.is_leaf() {
                0
            } else {
                1 + go(t, n.left).max(go(t, n.right))
            }
        }
        go(self, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    /// Checks child indices, cover additivity and finite leaves.
    pub fn validate(&self) -> Result<(), String> {
        if self.nodes.is_empty() {
            return Err("tree has no nodes".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.leaf_value.is_finite() || !n.cover.is_finite() {
                return Err(format!("node {i} is not finite"));
            }
            if !n.is_leaf() {
                if n.left >= self.nodes.len() || n.right >= self.nodes.len() || n.left <= i || n.right <= i {
                    return Err(format!("node {i} has invalid children"));
                }
                let sum = self.nodes[n.left].cover + self.nodes[n.right].cover;
                if (sum - n.cover).abs() > 1e-9 * n.cover.abs().max(1.0) {
                    return Err(format!("node {i}: children covers {sum} != {}", n.cover));
                }
            }
        }
        Ok(())
    }
}

/// Serialized tree shape: each node nests its children.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct NestedNode {
    cover: f64,
    leaf_value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    left: Option<Box<NestedNode>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    right: Option<Box<NestedNode>>,
}

impl From<DecisionTree> for NestedNode {
    fn from(t: DecisionTree) -> Self {
        fn nest(t: &DecisionTree, i: usize) -> NestedNode {
            let n = &t.nodes[i];
            match n.feature_index {
                None => NestedNode {
                    cover: n.cover,
                    leaf_value: n.leaf_value,
                    feature_index: None,
                    threshold: None,
                    left: None,
                    right: None,
                },
                Some(f) => NestedNode {
                    cover: n.cover,
                    leaf_value: n.leaf_value,
                    feature_index: Some(f),
                    threshold: Some(n.threshold),
                    left: Some(Box::new(nest(t, n.left))),
                    right: Some(Box::new(nest(t, n.right))),
                },
            }
        }
        nest(&t, 0)
    }
}

impl TryFrom<NestedNode> for DecisionTree {
    type Error = String;

    fn try_from(root: NestedNode) -> Result<Self, String> {
        fn flatten(n: NestedNode, out: &mut Vec<TreeNode>) -> Result<usize, String> {
            let idx = out.len();
            out.push(TreeNode::leaf(n.leaf_value, n.cover));
            if let Some(f) = n.feature_index {
                let (Some(l), Some(r), Some(thr)) = (n.left, n.right, n.threshold) else {
                    return Err("split node needs left, right and threshold".into());
                };
                let li = flatten(*l, out)?;
                let ri = flatten(*r, out)?;
                let node = &mut out[idx];
                node.feature_index = Some(f);
                node.threshold = thr;
                node.left = li;
                node.right = ri;
            }
            Ok(idx)
        }
        let mut nodes = Vec::new();
        flatten(root, &mut nodes)?;
        let t = DecisionTree { nodes };
        t.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    /// Mean of the training targets.
    pub base_score: f64,
    pub shrinkage: f64,
    pub n_features: usize,
    pub trees: Vec<DecisionTree>,
    /// Validation MSE after 0, 1, … rounds.
    #[serde(default)]
    pub val_history: Vec<f64>,
}

impl TreeEnsemble {
    pub fn predict_row(&self, row: ArrayView1<'_, f64>) -> f64 {
        self.base_score + self.trees.iter().map(|t| self.shrinkage * t.predict_row(row)).sum::<f64>()
    }

    /// Rounds actually run before stopping (trees kept may be fewer).
    pub fn rounds_run(&self) -> usize {
        self.val_history.len().saturating_sub(1)
    }
}

/// Tracks validation scores and decides when boosting stops. Round 0 is the
/// base-score-only ensemble.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    history: Vec<f64>,
    best_round: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, initial_score: f64) -> Self {
        Self {
            patience,
            history: vec![initial_score],
            best_round: 0,
        }
    }

    /// Records the score of the next round; returns true when boosting
    /// should stop.
    pub fn record(&mut self, score: f64) -> bool {
        self.history.push(score);
        let round = self.history.len() - 1;
        if score < self.history[self.best_round] {
            self.best_round = round;
        }
        round - self.best_round >= self.patience
    }

    pub fn best_round(&self) -> usize {
        self.best_round
    }

    pub fn rounds_run(&self) -> usize {
        self.history.len() - 1
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }
}

#[derive(Debug, Clone, Copy)]
struct SplitCandidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

fn better(a: &SplitCandidate, b: &Option<SplitCandidate>) -> bool {
    match b {
        None => true,
        Some(b) => a.gain > b.gain,
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct NodeStats {
    count: usize,
    sum: f64,
    sumsq: f64,
}

/// Row indices of `x` sorted by each column.
fn presort(x: &Array2<f64>) -> Vec<Vec<u32>> {
    par::map_range(x.ncols(), |f| {
        let col = x.column(f);
        let mut idx: Vec<u32> = (0..x.nrows() as u32).collect();
        idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]));
        idx
    })
}

fn build_tree(x: &Array2<f64>, sorted: &[Vec<u32>], target: &[f64], cfg: &GbdtConfig) -> DecisionTree {
    let n = x.nrows();
    let mut node_of = vec![0usize; n];
    let mut stats = vec![NodeStats {
        count: n,
        sum: target.iter().sum(),
        sumsq: target.iter().map(|v| v * v).sum(),
    }];
    let mut nodes = vec![TreeNode::leaf(stats[0].sum / n as f64, n as f64)];
    let mut frontier = vec![0usize];
    let mut leaves = 1usize;
    let msl = cfg.min_samples_leaf;

    for _depth in 0..cfg.max_depth {
        if frontier.is_empty() || leaves >= cfg.num_leaves {
            break;
        }
        let mut pos_of = vec![usize::MAX; nodes.len()];
        for (p, &node) in frontier.iter().enumerate() {
            pos_of[node] = p;
        }
        let per_feature: Vec<Vec<Option<SplitCandidate>>> = par::map_range(x.ncols(), |f| {
            let col = x.column(f);
            let k = frontier.len();
            let mut left = vec![NodeStats::default(); k];
            let mut last = vec![f64::NAN; k];
            let mut best: Vec<Option<SplitCandidate>> = vec![None; k];
            for &row in &sorted[f] {
                let row = row as usize;
                let p = pos_of[node_of[row]];
                if p == usize::MAX {
                    continue;
                }
                let v = col[row];
                let l = &mut left[p];
                let tot = &stats[frontier[p]];
                if l.count >= msl && tot.count - l.count >= msl && v > last[p] {
                    let (nl, nr) = (l.count as f64, (tot.count - l.count) as f64);
                    let diff = l.sum / nl - (tot.sum - l.sum) / nr;
                    let gain = nl * nr / (nl + nr) * diff * diff;
                    if gain > GAIN_EPS * (1.0 + tot.sumsq) {
                        let mut threshold = 0.5 * (last[p] + v);
                        if threshold >= v {
                            threshold = last[p];
                        }
                        let cand = SplitCandidate { gain, feature: f, threshold };
                        if better(&cand, &best[p]) {
                            best[p] = Some(cand);
                        }
                    }
                }
                l.count += 1;
                l.sum += target[row];
                last[p] = v;
            }
            best
        });

        // features visited in ascending order, strict improvement keeps the lowest index on ties
        let mut chosen: Vec<Option<SplitCandidate>> = vec![None; frontier.len()];
        for f_best in &per_feature {
            for (p, cand) in f_best.iter().enumerate() {
                if let Some(c) = cand {
                    if better(c, &chosen[p]) {
                        chosen[p] = Some(*c);
                    }
                }
            }
        }

        let mut split_of: Vec<Option<(usize, f64, usize, usize)>> = vec![None; nodes.len()];
        let mut next = Vec::new();
        for (p, &node) in frontier.iter().enumerate() {
            if leaves >= cfg.num_leaves {
                break;
            }
            let Some(c) = chosen[p] else { continue };
            let (li, ri) = (nodes.len(), nodes.len() + 1);
            nodes.push(TreeNode::leaf(0.0, 0.0));
            nodes.push(TreeNode::leaf(0.0, 0.0));
            stats.push(NodeStats::default());
            stats.push(NodeStats::default());
            let nd = &mut nodes[node];
            nd.feature_index = Some(c.feature);
            nd.threshold = c.threshold;
            nd.left = li;
            nd.right = ri;
            split_of[node] = Some((c.feature, c.threshold, li, ri));
            leaves += 1;
            next.push(li);
            next.push(ri);
        }
        split_of.resize(nodes.len(), None);
        for row in 0..n {
            if let Some((f, thr, li, ri)) = split_of[node_of[row]] {
                let child = if x[[row, f]] <= thr { li } else { ri };
                node_of[row] = child;
                let s = &mut stats[child];
                s.count += 1;
                s.sum += target[row];
                s.sumsq += target[row] * target[row];
            }
        }
        for &c in &next {
            nodes[c].cover = stats[c].count as f64;
            nodes[c].leaf_value = stats[c].sum / stats[c].count as f64;
        }
        frontier = next;
    }
    DecisionTree { nodes }
}

fn mse_of(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y.len() as f64
}

/// Boosts on `train`, early-stopping on `val`, and returns the ensemble
/// truncated at the best validation round. Training targets with zero
/// variance yield a base-score-only ensemble.
pub fn gbdt_train(train: &TabularDataset, val: &TabularDataset, cfg: &GbdtConfig) -> Result<TreeEnsemble, TabularError> {
    cfg.validate()?;
    if train.n_rows() == 0 {
        return Err(TabularError::EmptySplit("training set"));
    }
    if val.n_rows() == 0 {
        return Err(TabularError::EmptySplit("validation set"));
    }
    if val.n_features() != train.n_features() {
        return Err(TabularError::FeatureCountMismatch {
            expected: train.n_features(),
            found: val.n_features(),
        });
    }
    let base = train.y.iter().sum::<f64>() / train.n_rows() as f64;
    let mut pred_train = vec![base; train.n_rows()];
    let mut pred_val = vec![base; val.n_rows()];
    let mut stopper = EarlyStopping::new(cfg.patience, mse_of(&pred_val, &val.y));
    let mut trees = Vec::new();

    let constant = train.y.iter().all(|v| *v == train.y[0]);
    if !constant {
        let sorted = presort(&train.x);
        for _round in 0..cfg.max_rounds {
            let residual: Vec<f64> = train.y.iter().zip(&pred_train).map(|(y, p)| y - p).collect();
            let tree = build_tree(&train.x, &sorted, &residual, cfg);
            for (i, p) in pred_train.iter_mut().enumerate() {
                *p += cfg.shrinkage * tree.predict_row(train.x.row(i));
            }
            for (i, p) in pred_val.iter_mut().enumerate() {
                *p += cfg.shrinkage * tree.predict_row(val.x.row(i));
            }
            trees.push(tree);
            let score = mse_of(&pred_val, &val.y);
            log::debug!("gbdt round {}: val mse {score:.6}", trees.len());
            if stopper.record(score) {
                break;
            }
        }
        trees.truncate(stopper.best_round());
    }
    Ok(TreeEnsemble {
        base_score: base,
        shrinkage: cfg.shrinkage,
        n_features: train.n_features(),
        trees,
        val_history: stopper.history().to_vec(),
    })
}

pub fn gbdt_predict(m: &TreeEnsemble, x: &Array2<f64>) -> Result<Vec<f64>, TabularError> {
    if x.ncols() != m.n_features {
        return Err(TabularError::FeatureCountMismatch {
            expected: m.n_features,
            found: x.ncols(),
        });
    }
    Ok(par::map_range(x.nrows(), |i| m.predict_row(x.row(i))))
}
