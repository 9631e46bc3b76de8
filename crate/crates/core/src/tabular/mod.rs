//! Pixel-wise baselines. The spatio-temporal tensor is flattened into one
//! row per pixel (row-major pixel order) with one column per input step,
//! oldest first.

pub mod gbdt;
pub mod lasso;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{DisplacementMap, GridSpec, SpatioTemporalTensor};

pub use gbdt::{gbdt_predict, gbdt_train, DecisionTree, EarlyStopping, GbdtConfig, TreeEnsemble, TreeNode};
pub use lasso::{lasso_fit, lasso_predict, lasso_train, LassoConfig, LinearModel};

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("grid spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("feature count mismatch: model expects {expected}, input has {found}")]
    FeatureCountMismatch { expected: usize, found: usize },
    #[error("empty split: {0}")]
    EmptySplit(&'static str),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    /// N × T_in, row k is pixel k = r·W + c.
    pub x: Array2<f64>,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
}

impl TabularDataset {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    /// Rows at the given indices, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select(ndarray::Axis(0), idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
        }
    }
}

/// `["t-T", …, "t-1"]`; column j holds the displacement T−j steps before
/// the forecast.
pub fn lag_feature_names(t_in: usize) -> Vec<String> {
    (0..t_in).map(|j| format!("t-{}", t_in - j)).collect()
}

pub fn tensor_to_table(x: &SpatioTemporalTensor, y: &DisplacementMap) -> Result<TabularDataset, TabularError> {
    if x.spec != y.spec {
        return Err(TabularError::SpecMismatch("target map differs from tensor grid".into()));
    }
    let (t, n) = (x.len(), x.spec.len());
    let mut table = Array2::<f64>::zeros((n, t));
    for (j, step) in x.steps.iter().enumerate() {
        if step.spec != x.spec {
            return Err(TabularError::SpecMismatch(format!("step {j}")));
        }
        for (k, v) in step.values.iter().enumerate() {
            table[[k, j]] = *v;
        }
    }
    Ok(TabularDataset {
        x: table,
        y: y.values.clone(),
        feature_names: lag_feature_names(t),
    })
}

/// Inverse of the pixel flattening used by [`tensor_to_table`].
pub fn predictions_to_map(pred: Vec<f64>, spec: GridSpec, epoch_index: usize) -> Result<DisplacementMap, TabularError> {
    if pred.len() != spec.len() {
        return Err(TabularError::SpecMismatch(format!(
            "{} predictions for a {}-pixel grid",
            pred.len(),
            spec.len()
        )));
    }
    Ok(DisplacementMap::from_values(spec, pred, epoch_index))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainValSplit {
    pub train: TabularDataset,
    pub val: TabularDataset,
    /// Row indices into the source dataset, ascending.
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

/// Seeded uniform pixel partition with `floor(N · val_fraction)` validation rows.
pub fn split_train_val(d: &TabularDataset, val_fraction: f64, seed: u64) -> Result<TrainValSplit, TabularError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(TabularError::InvalidConfig(format!(
            "val_fraction {val_fraction} outside (0, 1)"
        )));
    }
    let n = d.n_rows();
    let n_val = (n as f64 * val_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val_idx = order[..n_val].to_vec();
    let mut train_idx = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok(TrainValSplit {
        train: d.select(&train_idx),
        val: d.select(&val_idx),
        train_idx,
        val_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{assemble_tensor, BoundingBox};
    use proptest::prelude::*;

    fn spec(h: usize, w: usize) -> GridSpec {
        GridSpec::new(
            h,
            w,
            BoundingBox { min_easting: 0.0, max_easting: 1.0, min_northing: 0.0, max_northing: 1.0 },
        )
        .unwrap()
    }

    #[test]
    fn two_by_two_unrolled() {
        let s = spec(2, 2);
        let x = assemble_tensor(vec![
            DisplacementMap::from_values(s, vec![1.0, 2.0, 3.0, 4.0], 0),
            DisplacementMap::from_values(s, vec![5.0, 6.0, 7.0, 8.0], 1),
        ])
        .unwrap();
        let y = DisplacementMap::from_values(s, vec![9.0, 10.0, 11.0, 12.0], 2);
        let d = tensor_to_table(&x, &y).unwrap();
        assert_eq!(
            d.x,
            ndarray::array![[1.0, 5.0], [2.0, 6.0], [3.0, 7.0], [4.0, 8.0]]
        );
        assert_eq!(d.y, vec![9.0, 10.0, 11.0, 12.0]);
        assert_eq!(d.feature_names, vec!["t-2", "t-1"]);

        let other = DisplacementMap::from_values(spec(2, 3), vec![0.0; 6], 2);
        assert!(matches!(tensor_to_table(&x, &other), Err(TabularError::SpecMismatch(_))));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let d = TabularDataset {
            x: Array2::from_shape_fn((10, 1), |(i, _)| i as f64),
            y: (0..10).map(|i| i as f64).collect(),
            feature_names: lag_feature_names(1),
        };
        let a = split_train_val(&d, 0.2, 42).unwrap();
        assert_eq!((a.train.n_rows(), a.val.n_rows()), (8, 2));
        let mut all: Vec<usize> = a.train_idx.iter().chain(&a.val_idx).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_train_val(&d, 0.2, 42).unwrap(), a);
        assert!(split_train_val(&d, 1.0, 42).is_err());
        assert!(split_train_val(&d, 0.0, 42).is_err());
    }

    #[test]
    fn split_floor_rule_at_full_scale() {
        let d = TabularDataset {
            x: Array2::zeros((65536, 1)),
            y: vec![0.0; 65536],
            feature_names: lag_feature_names(1),
        };
        let s = split_train_val(&d, 0.2, 7).unwrap();
        assert_eq!(s.val.n_rows(), 13107);
        assert_eq!(s.train.n_rows(), 65536 - 13107);
    }

    #[test]
    fn full_scale_table_shape() {
        let s = spec(256, 256);
        let maps = (0..300).map(|t| DisplacementMap::from_values(s, vec![t as f64; s.len()], t)).collect();
        let x = assemble_tensor(maps).unwrap();
        let y = DisplacementMap::from_values(s, vec![0.0; s.len()], 301);
        let d = tensor_to_table(&x, &y).unwrap();
        assert_eq!(d.x.dim(), (65536, 300));
        assert_eq!(d.feature_names[0], "t-300");
        assert_eq!(d.feature_names[299], "t-1");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn table_round_trip(h in 2usize..6, w in 2usize..6, t in 1usize..4, seed in 0u64..1000) {
            let s = spec(h, w);
            let val = |k: usize| ((k as u64 * 2654435761 + seed) % 1000) as f64;
            let maps = (0..t)
                .map(|i| DisplacementMap::from_values(s, (0..s.len()).map(|k| val(k + i * 97)).collect(), i))
                .collect();
            let x = assemble_tensor(maps).unwrap();
            let y = DisplacementMap::from_values(s, (0..s.len()).map(val).collect(), t);
            let d = tensor_to_table(&x, &y).unwrap();
            for r in 0..h {
                for c in 0..w {
                    for i in 0..t {
                        prop_assert_eq!(d.x[[r * w + c, i]], x.get(i, r, c));
                    }
                }
            }
            let back = predictions_to_map(d.y.clone(), s, t).unwrap();
            prop_assert_eq!(back, y);
        }
    }
}
