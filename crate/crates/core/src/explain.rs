//! Shapley attributions for tree ensembles.
//!
//! Both the polynomial-time path algorithm and the exhaustive oracle share
//! one value function: with coalition `S`, a split on a feature in `S`
//! follows the row, and a split on any other feature averages both children
//! weighted by `cover(child) / cover(node)`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::tabular::{DecisionTree, TreeEnsemble};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("feature count mismatch: model expects {expected}, row has {found}")]
    FeatureCountMismatch { expected: usize, found: usize },
    #[error("tree {tree} node {node} has non-positive cover")]
    ZeroCover { tree: usize, node: usize },
    #[error("{0} active features exceed the brute-force limit of 15")]
    TooManyFeatures(usize),
    #[error("row index {index} out of range for {len} explained rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty report")]
    EmptyReport,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

const NO_FEATURE: usize = usize::MAX;

fn check_covers(m: &TreeEnsemble) -> Result<(), ExplainError> {
    for (t, tree) in m.trees.iter().enumerate() {
        for (i, n) in tree.nodes.iter().enumerate() {
            if !n.is_leaf() && !(n.cover > 0.0) {
                return Err(ExplainError::ZeroCover { tree: t, node: i });
            }
        }
    }
    Ok(())
}

fn check_row(m: &TreeEnsemble, row: &[f64]) -> Result<(), ExplainError> {
    if row.len() != m.n_features {
        return Err(ExplainError::FeatureCountMismatch {
            expected: m.n_features,
            found: row.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: usize,
    zero_fraction: f64,
    one_fraction: f64,
    weight: f64,
}

fn extend_path(path: &mut Vec<PathElement>, zero_fraction: f64, one_fraction: f64, feature: usize) {
    let depth = path.len();
    path.push(PathElement {
        feature,
        zero_fraction,
        one_fraction,
        weight: if depth == 0 { 1.0 } else { 0.0 },
    });
    let denom = (depth + 1) as f64;
    for i in (0..depth).rev() {
        path[i + 1].weight += one_fraction * path[i].weight * (i + 1) as f64 / denom;
        path[i].weight = zero_fraction * path[i].weight * (depth - i) as f64 / denom;
    }
}

fn unwind_path(path: &mut Vec<PathElement>, index: usize) {
    let depth = path.len() - 1;
    let PathElement { one_fraction, zero_fraction, .. } = path[index];
    let denom = (depth + 1) as f64;
    let mut next_one = path[depth].weight;
    for i in (0..depth).rev() {
        if one_fraction != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next_one * denom / ((i + 1) as f64 * one_fraction);
            next_one = tmp - path[i].weight * zero_fraction * (depth - i) as f64 / denom;
        } else {
            path[i].weight = path[i].weight * denom / (zero_fraction * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
    path.pop();
}

/// Total permutation weight of the path with element `index` removed.
fn unwound_sum(path: &[PathElement], index: usize) -> f64 {
    let depth = path.len() - 1;
    let PathElement { one_fraction, zero_fraction, .. } = path[index];
    let denom = (depth + 1) as f64;
    let mut next_one = path[depth].weight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        if one_fraction != 0.0 {
            let tmp = next_one * denom / ((i + 1) as f64 * one_fraction);
            total += tmp;
            next_one = path[i].weight - tmp * zero_fraction * (depth - i) as f64 / denom;
        } else if zero_fraction != 0.0 {
            total += path[i].weight / zero_fraction / ((depth - i) as f64 / denom);
        }
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    tree: &DecisionTree,
    row: &[f64],
    phi: &mut [f64],
    node: usize,
    mut path: Vec<PathElement>,
    zero_fraction: f64,
    one_fraction: f64,
    feature: usize,
) {
    extend_path(&mut path, zero_fraction, one_fraction, feature);
    let n = &tree.nodes[node];
    let Some(split) = n.feature_index else {
        for i in 1..path.len() {
            let w = unwound_sum(&path, i);
            let el = path[i];
            phi[el.feature] += w * (el.one_fraction - el.zero_fraction) * n.leaf_value;
        }
        return;
    };
    let (hot, cold) = if row[split] <= n.threshold { (n.left, n.right) } else { (n.right, n.left) };
    let hot_zero = tree.nodes[hot].cover / n.cover;
    let cold_zero = tree.nodes[cold].cover / n.cover;
    let (mut incoming_zero, mut incoming_one) = (1.0, 1.0);
    if let Some(k) = path.iter().position(|e| e.feature == split) {
        incoming_zero = path[k].zero_fraction;
        incoming_one = path[k].one_fraction;
        unwind_path(&mut path, k);
    }
    recurse(tree, row, phi, hot, path.clone(), hot_zero * incoming_zero, incoming_one, split);
    recurse(tree, row, phi, cold, path, cold_zero * incoming_zero, 0.0, split);
}

/// Cover-weighted mean leaf value of a tree (its output with no feature known).
pub fn expected_tree_value(tree: &DecisionTree) -> f64 {
    fn go(t: &DecisionTree, i: usize) -> f64 {
        let n = &t.nodes[i];
        if n.is_leaf() {
            n.leaf_value
        } else {
            (t.nodes[n.left].cover * go(t, n.left) + t.nodes[n.right].cover * go(t, n.right)) / n.cover
        }
    }
    go(tree, 0)
}

/// Expected ensemble output, the attribution baseline.
pub fn ensemble_base_value(m: &TreeEnsemble) -> f64 {
    m.base_score + m.trees.iter().map(|t| m.shrinkage * expected_tree_value(t)).sum::<f64>()
}

/// Exact path-dependent Shapley values of one row: `(base_value, phi)`.
pub fn tree_shap(m: &TreeEnsemble, row: &[f64]) -> Result<(f64, Vec<f64>), ExplainError> {
    check_row(m, row)?;
    check_covers(m)?;
    Ok(tree_shap_unchecked(m, row))
}

fn tree_shap_unchecked(m: &TreeEnsemble, row: &[f64]) -> (f64, Vec<f64>) {
    let mut phi = vec![0.0; m.n_features];
    let mut tree_phi = vec![0.0; m.n_features];
    for tree in &m.trees {
        tree_phi.iter_mut().for_each(|v| *v = 0.0);
        recurse(tree, row, &mut tree_phi, 0, Vec::with_capacity(tree.depth() + 2), 1.0, 1.0, NO_FEATURE);
        for (p, t) in phi.iter_mut().zip(&tree_phi) {
            *p += m.shrinkage * t;
        }
    }
    (ensemble_base_value(m), phi)
}

fn conditional_value(tree: &DecisionTree, node: usize, row: &[f64], known: &[bool]) -> f64 {
    let n = &tree.nodes[node];
    match n.feature_index {
        None => n.leaf_value,
        Some(f) if known[f] => {
            let next = if row[f] <= n.threshold { n.left } else { n.right };
            conditional_value(tree, next, row, known)
        }
        Some(_) => {
            let l = tree.nodes[n.left].cover / n.cover * conditional_value(tree, n.left, row, known);
            let r = tree.nodes[n.right].cover / n.cover * conditional_value(tree, n.right, row, known);
            l + r
        }
    }
}

/// Ensemble output when only the features flagged in `known` are observed.
pub fn coalition_value(m: &TreeEnsemble, row: &[f64], known: &[bool]) -> f64 {
    m.base_score
        + m.trees
            .iter()
            .map(|t| m.shrinkage * conditional_value(t, 0, row, known))
            .sum::<f64>()
}

/// Shapley values by enumerating every coalition of the features the
/// ensemble actually splits on (unused features are dummies with φ = 0).
pub fn shap_brute_force(m: &TreeEnsemble, row: &[f64]) -> Result<Vec<f64>, ExplainError> {
    check_row(m, row)?;
    check_covers(m)?;
    let mut active: Vec<usize> = m
        .trees
        .iter()
        .flat_map(|t| t.nodes.iter().filter_map(|n| n.feature_index))
        .collect();
    active.sort_unstable();
    active.dedup();
    let n = active.len();
    if n > 15 {
        return Err(ExplainError::TooManyFeatures(n));
    }
    let mut known = vec![false; m.n_features];
    let values: Vec<f64> = (0..1usize << n)
        .map(|mask| {
            for (b, &f) in active.iter().enumerate() {
                known[f] = mask & (1 << b) != 0;
            }
            coalition_value(m, row, &known)
        })
        .collect();
    let fact: Vec<f64> = (0..=n).scan(1.0, |acc, i| {
        if i > 0 {
            *acc *= i as f64;
        }
        Some(*acc)
    }).collect();
    let mut phi = vec![0.0; m.n_features];
    for (b, &f) in active.iter().enumerate() {
        let bit = 1usize << b;
        let mut total = 0.0;
        for mask in 0..1usize << n {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let weight = fact[s] * fact[n - s - 1] / fact[n];
            total += weight * (values[mask | bit] - values[mask]);
        }
        phi[f] = total;
    }
    Ok(phi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapReport {
    pub base_value: f64,
    /// K × T_in attributions, mm.
    pub phi: Array2<f64>,
    pub sample_rows: Array2<f64>,
    /// Source row (pixel) index of each explained sample.
    pub row_indices: Vec<usize>,
    /// Model output for each explained sample.
    pub predictions: Vec<f64>,
    pub feature_names: Vec<String>,
}

impl ShapReport {
    pub fn k(&self) -> usize {
        self.phi.nrows()
    }

    /// Largest `|base + Σφ − prediction|` over the explained rows.
    pub fn max_local_accuracy_error(&self) -> f64 {
        self.phi
            .axis_iter(Axis(0))
            .zip(&self.predictions)
            .map(|(p, y)| (self.base_value + p.sum() - y).abs())
            .fold(0.0, f64::max)
    }
}

/// Explains `min(N, k)` rows of `x`: all rows in order when `k >= N`,
/// otherwise a seeded sample without replacement (ascending row order).
pub fn explain_rows(
    m: &TreeEnsemble,
    x: &Array2<f64>,
    feature_names: &[String],
    k: usize,
    seed: u64,
) -> Result<ShapReport, ExplainError> {
    if x.ncols() != m.n_features {
        return Err(ExplainError::FeatureCountMismatch {
            expected: m.n_features,
            found: x.ncols(),
        });
    }
    check_covers(m)?;
    let n = x.nrows();
    let row_indices: Vec<usize> = if k >= n {
        (0..n).collect()
    } else {
        let mut idx = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), n, k).into_vec();
        idx.sort_unstable();
        idx
    };
    let sample_rows = x.select(Axis(0), &row_indices);
    let results = par::map_range(row_indices.len(), |i| {
        let row: Vec<f64> = sample_rows.row(i).to_vec();
        let (_, phi) = tree_shap_unchecked(m, &row);
        (phi, m.predict_row(ArrayView1::from(&row)))
    });
    let mut phi = Array2::zeros((row_indices.len(), m.n_features));
    let mut predictions = Vec::with_capacity(row_indices.len());
    for (i, (p, y)) in results.into_iter().enumerate() {
        phi.row_mut(i).assign(&ArrayView1::from(&p));
        predictions.push(y);
    }
    Ok(ShapReport {
        base_value: ensemble_base_value(m),
        phi,
        sample_rows,
        row_indices,
        predictions,
        feature_names: feature_names.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub feature: String,
    pub feature_index: usize,
    pub mean_abs_phi: f64,
    /// `(phi, feature value)` per explained row.
    pub points: Vec<(f64, f64)>,
}

/// Features ranked by mean |φ|, descending; ties keep column order.
pub fn shap_summary(report: &ShapReport) -> Result<Vec<FeatureSummary>, ExplainError> {
    if report.k() == 0 {
        return Err(ExplainError::EmptyReport);
    }
    let k = report.k() as f64;
    let mut out: Vec<FeatureSummary> = report
        .phi
        .axis_iter(Axis(1))
        .enumerate()
        .map(|(j, col)| FeatureSummary {
            feature: report.feature_names.get(j).cloned().unwrap_or_else(|| format!("f{j}")),
            feature_index: j,
            mean_abs_phi: col.iter().map(|v| v.abs()).sum::<f64>() / k,
            points: col.iter().zip(report.sample_rows.column(j)).map(|(p, v)| (*p, *v)).collect(),
        })
        .collect();
    out.sort_by(|a, b| b.mean_abs_phi.total_cmp(&a.mean_abs_phi));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increase,
    Decrease,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub feature: String,
    pub value: f64,
    pub phi: f64,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceDecomposition {
    pub row_index: usize,
    pub base_value: f64,
    pub prediction: f64,
    pub contributions: Vec<Contribution>,
}

/// Contributions of one explained row, largest |φ| first.
pub fn force_decomposition(report: &ShapReport, row_index: usize) -> Result<ForceDecomposition, ExplainError> {
    if row_index >= report.k() {
        return Err(ExplainError::IndexOutOfRange {
            index: row_index,
            len: report.k(),
        });
    }
    let phi = report.phi.row(row_index);
    let values = report.sample_rows.row(row_index);
    let mut contributions: Vec<Contribution> = phi
        .iter()
        .zip(values)
        .enumerate()
        .map(|(j, (&p, &v))| Contribution {
            feature: report.feature_names.get(j).cloned().unwrap_or_else(|| format!("f{j}")),
            value: v,
            phi: p,
            direction: if p > 0.0 {
                Direction::Increase
            } else if p < 0.0 {
                Direction::Decrease
            } else {
                Direction::Neutral
            },
        })
        .collect();
    contributions.sort_by(|a, b| b.phi.abs().total_cmp(&a.phi.abs()));
    Ok(ForceDecomposition {
        row_index: report.row_indices.get(row_index).copied().unwrap_or(row_index),
        base_value: report.base_value,
        prediction: report.predictions[row_index],
        contributions,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportHeader {
    base_value: f64,
    feature_names: Vec<String>,
    #[serde(rename = "K")]
    k: usize,
    row_indices: Vec<usize>,
}

fn write_matrix(path: &Path, names: &[String], rows: &Array2<f64>) -> Result<(), ExplainError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(names)?;
    for row in rows.axis_iter(Axis(0)) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `shap.json`, `shap_phi.csv` and `shap_features.csv` into `dir`.
pub fn save_report(report: &ShapReport, dir: &Path) -> Result<(), ExplainError> {
    std::fs::create_dir_all(dir)?;
    let header = ReportHeader {
        base_value: report.base_value,
        feature_names: report.feature_names.clone(),
        k: report.k(),
        row_indices: report.row_indices.clone(),
    };
    let mut f = BufWriter::new(File::create(dir.join("shap.json"))?);
    serde_json::to_writer_pretty(&mut f, &header)?;
    f.write_all(b"\n")?;
    f.flush()?;
    write_matrix(&dir.join("shap_phi.csv"), &report.feature_names, &report.phi)?;
    write_matrix(&dir.join("shap_features.csv"), &report.feature_names, &report.sample_rows)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::TreeNode;
    use ndarray::array;

    fn split(feature: usize, threshold: f64, left: usize, right: usize, cover: f64) -> TreeNode {
        TreeNode { feature_index: Some(feature), threshold, left, right, leaf_value: 0.0, cover }
    }

    fn ensemble(trees: Vec<DecisionTree>, n_features: usize, shrinkage: f64) -> TreeEnsemble {
        TreeEnsemble { base_score: 1.5, shrinkage, n_features, trees, val_history: vec![] }
    }

    #[test]
    fn single_leaf_tree() {
        let m = ensemble(vec![DecisionTree { nodes: vec![TreeNode::leaf(4.0, 10.0)] }], 3, 0.5);
        let (base, phi) = tree_shap(&m, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(base, 1.5 + 0.5 * 4.0);
        assert_eq!(phi, vec![0.0; 3]);
    }

    #[test]
    fn depth_one_matches_enumeration() {
        // covers 3 left / 1 right, leaves 10 / -2
        let tree = DecisionTree {
            nodes: vec![split(0, 0.5, 1, 2, 4.0), TreeNode::leaf(10.0, 3.0), TreeNode::leaf(-2.0, 1.0)],
        };
        let m = ensemble(vec![tree], 2, 1.0);
        for row in [[0.0, 7.0], [1.0, -7.0]] {
            let (base, phi) = tree_shap(&m, &row).unwrap();
            let oracle = shap_brute_force(&m, &row).unwrap();
            assert_eq!(base, 1.5 + 7.0);
            let direct = m.predict_row(ArrayView1::from(&row)) - base;
            assert_eq!(phi, oracle);
            assert_eq!(phi[0], direct);
            assert_eq!(phi[1], 0.0);
        }
    }

    #[test]
    fn depth_two_two_features() {
        let tree = DecisionTree {
            nodes: vec![
                split(0, 0.0, 1, 2, 10.0),
                split(1, 1.0, 3, 4, 6.0),
                split(1, -1.0, 5, 6, 4.0),
                TreeNode::leaf(3.0, 2.0),
                TreeNode::leaf(-1.0, 4.0),
                TreeNode::leaf(5.0, 1.0),
                TreeNode::leaf(0.5, 3.0),
            ],
        };
        let m = ensemble(vec![tree], 2, 0.7);
        for row in [[-1.0, 0.0], [-1.0, 2.0], [1.0, -2.0], [1.0, 0.0]] {
            let (base, phi) = tree_shap(&m, &row).unwrap();
            let oracle = shap_brute_force(&m, &row).unwrap();
            for j in 0..2 {
                assert!((phi[j] - oracle[j]).abs() <= 1e-9);
            }
            let pred = m.predict_row(ArrayView1::from(&row));
            assert!((base + phi.iter().sum::<f64>() - pred).abs() <= 1e-12);
        }
    }

    #[test]
    fn oracle_identities() {
        let tree = DecisionTree {
            nodes: vec![split(2, 0.0, 1, 2, 5.0), TreeNode::leaf(1.0, 2.0), TreeNode::leaf(6.0, 3.0)],
        };
        let m = ensemble(vec![tree], 3, 1.0);
        let row = [0.0, 0.0, 2.0];
        assert_eq!(coalition_value(&m, &row, &[false; 3]), ensemble_base_value(&m));
        let phi = shap_brute_force(&m, &row).unwrap();
        assert_eq!(phi[2], m.predict_row(ArrayView1::from(&row)) - ensemble_base_value(&m));

        // features 0 and 1 split identically in mirrored trees
        let a = DecisionTree { nodes: vec![split(0, 0.0, 1, 2, 4.0), TreeNode::leaf(1.0, 2.0), TreeNode::leaf(3.0, 2.0)] };
        let b = DecisionTree { nodes: vec![split(1, 0.0, 1, 2, 4.0), TreeNode::leaf(1.0, 2.0), TreeNode::leaf(3.0, 2.0)] };
        let m = ensemble(vec![a, b], 2, 1.0);
        let row = [1.0, 1.0];
        let bf = shap_brute_force(&m, &row).unwrap();
        let (_, ts) = tree_shap(&m, &row).unwrap();
        assert!((bf[0] - bf[1]).abs() <= 1e-12);
        assert!((ts[0] - ts[1]).abs() <= 1e-12);
    }

    #[test]
    fn errors() {
        let bad = DecisionTree {
            nodes: vec![split(0, 0.0, 1, 2, 0.0), TreeNode::leaf(1.0, 0.0), TreeNode::leaf(2.0, 0.0)],
        };
        let m = ensemble(vec![bad], 1, 1.0);
        assert!(matches!(tree_shap(&m, &[0.0]), Err(ExplainError::ZeroCover { tree: 0, node: 0 })));
        assert!(matches!(tree_shap(&m, &[0.0, 1.0]), Err(ExplainError::FeatureCountMismatch { .. })));

        let trees: Vec<DecisionTree> = (0..16)
            .map(|f| DecisionTree { nodes: vec![split(f, 0.0, 1, 2, 2.0), TreeNode::leaf(0.0, 1.0), TreeNode::leaf(1.0, 1.0)] })
            .collect();
        let wide = ensemble(trees, 16, 1.0);
        assert!(matches!(shap_brute_force(&wide, &[0.0; 16]), Err(ExplainError::TooManyFeatures(16))));
    }

    fn report(phi: Array2<f64>) -> ShapReport {
        let k = phi.nrows();
        let f = phi.ncols();
        let predictions = phi.axis_iter(Axis(0)).map(|r| 2.0 + r.sum()).collect();
        ShapReport {
            base_value: 2.0,
            sample_rows: Array2::from_shape_fn((k, f), |(i, j)| (i * f + j) as f64),
            phi,
            row_indices: (0..k).collect(),
            predictions,
            feature_names: crate::tabular::lag_feature_names(f),
        }
    }

    #[test]
    fn summary_ranking() {
        let s = shap_summary(&report(array![[1.0, -3.0], [-1.0, 3.0]])).unwrap();
        assert_eq!(s[0].feature, "t-1");
        assert_eq!(s[0].mean_abs_phi, 3.0);
        assert_eq!(s[1].mean_abs_phi, 1.0);
        assert_eq!(s[0].points, vec![(-3.0, 1.0), (3.0, 3.0)]);

        let zeros = shap_summary(&report(Array2::zeros((3, 3)))).unwrap();
        assert_eq!(zeros.iter().map(|f| f.feature.as_str()).collect::<Vec<_>>(), vec!["t-3", "t-2", "t-1"]);

        let recent = shap_summary(&report(array![[0.01, 0.02, -0.9], [0.0, -0.05, 1.1]])).unwrap();
        assert_eq!(recent[0].feature, "t-1");
        assert!(shap_summary(&report(Array2::zeros((0, 2)))).is_err());
    }

    #[test]
    fn force_ordering() {
        let r = report(array![[0.1, -0.3]]);
        let f = force_decomposition(&r, 0).unwrap();
        assert_eq!(f.contributions[0].feature, "t-1");
        assert_eq!(f.contributions[0].direction, Direction::Decrease);
        assert_eq!(f.contributions[1].direction, Direction::Increase);
        let total: f64 = f.contributions.iter().map(|c| c.phi).sum();
        assert!((f.base_value + total - f.prediction).abs() <= 1e-6);

        let z = force_decomposition(&report(Array2::zeros((1, 2))), 0).unwrap();
        assert_eq!(z.prediction, z.base_value);
        assert!(matches!(force_decomposition(&r, 1), Err(ExplainError::IndexOutOfRange { index: 1, len: 1 })));
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        save_report(&report(array![[0.1, -0.3], [0.5, 0.25]]), dir.path()).unwrap();
        let phi = std::fs::read_to_string(dir.path().join("shap_phi.csv")).unwrap();
        assert_eq!(phi, "t-2,t-1\n0.1,-0.3\n0.5,0.25\n");
        let header: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("shap.json")).unwrap()).unwrap();
        assert_eq!(header["K"], 2);
        assert_eq!(header["base_value"], 2.0);
        assert!(dir.path().join("shap_features.csv").exists());
    }
}
