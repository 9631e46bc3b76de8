//! L1-regularised linear regression on standardised features, fitted by
//! Adam on the subgradient of `(1/N)·Σ(ŷ−y)² + α·Σ|w|`.
//!
//! Each Adam step on the weights is halved until the objective does not
//! increase (at most [`MAX_HALVINGS`] times, after which the epoch leaves the
//! weights alone). Without this guard a fixed step keeps hopping across zero
//! for weights the penalty should switch off. The bias is unpenalised and is
//! set to its exact minimiser after every step.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TabularDataset, TabularError};
use crate::optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            learning_rate: 0.01,
            epochs: 2000,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// Coefficients in standardised feature space.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_means: Vec<f64>,
    /// Population standard deviations; 1 for constant columns.
    pub feature_stds: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

fn column_scalers(x: &Array2<f64>) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let n = x.nrows() as f64;
    let mut means = Vec::with_capacity(x.ncols());
    let mut stds = Vec::with_capacity(x.ncols());
    let mut constant = Vec::with_capacity(x.ncols());
    for col in x.axis_iter(Axis(1)) {
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let s = var.sqrt();
        let is_const = !(s > 1e-12 * m.abs().max(1.0));
        means.push(m);
        stds.push(if is_const { 1.0 } else { s });
        constant.push(is_const);
    }
    (means, stds, constant)
}

/// Objective `(1/N)·‖Zw + b − t‖² + α‖w‖₁` written through the Gram matrix
/// of the standardised design, so each epoch costs O(T_in²).
struct Quadratic {
    gram: Array2<f64>,
    cross: Vec<f64>,
    col_mean: Vec<f64>,
    target_mean: f64,
    target_sq: f64,
}

impl Quadratic {
    fn new(z: &Array2<f64>, t: &[f64]) -> Self {
        let n = z.nrows() as f64;
        let gram = z.t().dot(z) / n;
        let tv = ndarray::ArrayView1::from(t);
        let cross = (z.t().dot(&tv) / n).to_vec();
        let col_mean = z.mean_axis(Axis(0)).map(|a| a.to_vec()).unwrap_or_default();
        Self {
            gram,
            cross,
            col_mean,
            target_mean: t.iter().sum::<f64>() / n,
            target_sq: t.iter().map(|v| v * v).sum::<f64>() / n,
        }
    }

    fn mse(&self, w: &[f64], b: f64) -> f64 {
        let k = w.len();
        let mut quad = 0.0;
        for i in 0..k {
            let row = self.gram.row(i);
            let gw: f64 = (0..k).map(|j| row[j] * w[j]).sum();
            quad += w[i] * gw;
        }
        let lin: f64 = (0..k).map(|j| (self.cross[j] - b * self.col_mean[j]) * w[j]).sum();
        quad - 2.0 * lin + b * b - 2.0 * b * self.target_mean + self.target_sq
    }

    /// Bias minimising the MSE for fixed weights.
    fn best_bias(&self, w: &[f64]) -> f64 {
        self.target_mean - self.col_mean.iter().zip(w).map(|(m, v)| m * v).sum::<f64>()
    }

    /// Gradient of the MSE term w.r.t. (w, b).
    fn grad(&self, w: &[f64], b: f64, gw: &mut [f64]) -> f64 {
        let k = w.len();
        let mut gb = 2.0 * (b - self.target_mean);
        for i in 0..k {
            let row = self.gram.row(i);
            let s: f64 = (0..k).map(|j| row[j] * w[j]).sum();
            gw[i] = 2.0 * (s + b * self.col_mean[i] - self.cross[i]);
            gb += 2.0 * self.col_mean[i] * w[i];
        }
        gb
    }
}

pub const MAX_HALVINGS: usize = 40;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Trains and returns the model plus the penalised objective (standardised
/// units) after every epoch.
pub fn lasso_fit(d: &TabularDataset, cfg: &LassoConfig) -> Result<(LinearModel, Vec<f64>), TabularError> {
    if !(cfg.alpha >= 0.0) || !cfg.alpha.is_finite() {
        return Err(TabularError::InvalidConfig("alpha must be non-negative".into()));
    }
    if d.n_rows() == 0 {
        return Err(TabularError::EmptySplit("training set"));
    }
    let k = d.n_features();
    let (means, stds, constant) = column_scalers(&d.x);
    let n = d.n_rows() as f64;
    let target_mean = d.y.iter().sum::<f64>() / n;
    let target_std = {
        let s = (d.y.iter().map(|v| (v - target_mean).powi(2)).sum::<f64>() / n).sqrt();
        if s > 1e-12 * target_mean.abs().max(1.0) { s } else { 1.0 }
    };
    let mut z = d.x.clone();
    for (j, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
        col.mapv_inplace(|v| if constant[j] { 0.0 } else { (v - means[j]) / stds[j] });
    }
    let t: Vec<f64> = d.y.iter().map(|v| (v - target_mean) / target_std).collect();
    let q = Quadratic::new(&z, &t);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 0.01 / (k.max(1) as f64).sqrt();
    let mut w: Vec<f64> = (0..k)
        .map(|j| if constant[j] { 0.0 } else { rng.random_range(-scale..=scale) })
        .collect();
    let mut b = q.best_bias(&w);
    let mut grad = vec![0.0; k];
    let mut delta = vec![0.0; k];
    let mut trial = w.clone();
    let mut opt = Adam::new(k, cfg.learning_rate);
    let objective = |w: &[f64], b: f64| q.mse(w, b) + cfg.alpha * w.iter().map(|v| v.abs()).sum::<f64>();
    let mut current = objective(&w, b);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        q.grad(&w, b, &mut grad);
        for j in 0..k {
            grad[j] = if constant[j] { 0.0 } else { grad[j] + cfg.alpha * sign(w[j]) };
        }
        opt.direction(&grad, &mut delta);
        let mut step = 1.0;
        for _ in 0..=MAX_HALVINGS {
            for ((t, v), d) in trial.iter_mut().zip(&w).zip(&delta) {
                *t = v - step * d;
            }
            let tb = q.best_bias(&trial);
            let value = objective(&trial, tb);
            if value <= current {
                w.copy_from_slice(&trial);
                b = tb;
                current = value;
                break;
            }
            step *= 0.5;
        }
        history.push(current);
    }
    Ok((
        LinearModel {
            weights: w,
            bias: b,
            feature_means: means,
            feature_stds: stds,
            target_mean,
            target_std,
        },
        history,
    ))
}

pub fn lasso_train(d: &TabularDataset, cfg: &LassoConfig) -> Result<LinearModel, TabularError> {
    lasso_fit(d, cfg).map(|(m, _)| m)
}

pub fn lasso_predict(m: &LinearModel, x: &Array2<f64>) -> Result<Vec<f64>, TabularError> {
    let k = m.weights.len();
    if x.ncols() != k {
        return Err(TabularError::FeatureCountMismatch {
            expected: k,
            found: x.ncols(),
        });
    }
    Ok(x
        .axis_iter(Axis(0))
        .map(|row| {
            let s: f64 = (0..k)
                .map(|j| m.weights[j] * (row[j] - m.feature_means[j]) / m.feature_stds[j])
                .sum();
            m.target_mean + m.target_std * (s + m.bias)
        })
        .collect())
}
