//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line to
//! the real stdout (bypassing capture) and then asserts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use insar_core::evaluate::{binned_residual_boxstats, mse, r2, rmse, BoxStats};
use insar_core::explain::{explain_rows, shap_summary, tree_shap};
use insar_core::grid::{
    assemble_tensor, build_grid_spec, estimate_memory, fill_missing, grid_point_set, interpolate_linear, BoundingBox,
    DisplacementMap, GridSpec, SpatioTemporalTensor,
};
use insar_core::nn::{self, CnnLstmConfig, NeuralParameters};
use insar_core::pipeline::{run_pipeline, RunConfig};
use insar_core::synth::{generate_scene, Bowl, OnsetShape, SceneConfig};
use insar_core::tabular::{
    gbdt_predict, gbdt_train, lag_feature_names, lasso_predict, lasso_train, split_train_val, tensor_to_table,
    DecisionTree, GbdtConfig, LassoConfig, TabularDataset, TreeEnsemble, TreeNode,
};

// keeps wall-clock budgets meaningful on small machines
static SERIAL: Mutex<()> = Mutex::new(());

fn report(n: usize, ok: bool, elapsed: Duration, budget: Option<Duration>, detail: &str) {
    let within = budget.is_none_or(|b| elapsed < b);
    let status = if ok && within { "PASS" } else { "FAIL" };
    let budget = budget.map(|b| format!(" / {}s", b.as_secs())).unwrap_or_default();
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n}: {status} ({detail}; {:.2}s{budget})", elapsed.as_secs_f64());
    let _ = out.flush();
    assert!(ok, "criterion {n} failed: {detail}");
    assert!(within, "criterion {n} over time budget: {:.2}s", elapsed.as_secs_f64());
}

fn reference_xy() -> (SpatioTemporalTensor, DisplacementMap) {
    scene_xy(&SceneConfig::reference())
}

fn scene_xy(cfg: &SceneConfig) -> (SpatioTemporalTensor, DisplacementMap) {
    let (ps, _) = generate_scene(cfg).unwrap();
    let spec = build_grid_spec(&ps, 32, 32).unwrap();
    grid_point_set(&ps, &spec, 0..24, 24).unwrap()
}

#[test]
fn criterion_01_memory_study() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let got: Vec<f64> = [128, 256, 512].iter().map(|&r| estimate_memory(300, r, r, 4)).collect();
    let ok = got == [18.75, 75.00, 300.00];
    report(1, ok, t0.elapsed(), Some(Duration::from_secs(1)), &format!("{got:?} MiB, 256x256 gives 75.00 not 76.00"));
}

/// Andrew's monotone chain, counter-clockwise, no collinear vertices.
fn convex_hull(pts: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut p = pts.to_vec();
    p.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 { Box::new(p.iter()) } else { Box::new(p.iter().rev()) };
        for &q in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    hull
}

/// Signed distance-like margin: positive inside, negative outside.
fn hull_margin(hull: &[(f64, f64)], q: (f64, f64)) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        m = m.min(((b.0 - a.0) * (q.1 - a.1) - (b.1 - a.1) * (q.0 - a.0)) / len);
    }
    m
}

#[test]
fn criterion_02_interpolation_exactness() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut hull_violations, mut interior_cells, mut exterior_cells) = (0.0f64, 0usize, 0usize, 0usize);
    for _ in 0..50 {
        let n = rng.random_range(4..=100);
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0))).collect();
        let (a, b, c) = (rng.random_range(-5.0..5.0), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        let f = |e: f64, n: f64| a + b * e + c * n;
        let vals: Vec<f64> = pts.iter().map(|&(e, n)| f(e, n)).collect();
        let spec = GridSpec::new(
            rng.random_range(8..40),
            rng.random_range(8..40),
            BoundingBox { min_easting: -50.0, max_easting: 1050.0, min_northing: -50.0, max_northing: 1050.0 },
        )
        .unwrap();
        let raw = interpolate_linear(&pts, &vals, &spec, 0).unwrap();
        let filled = fill_missing(raw.clone());
        let hull = convex_hull(&pts);
        for r in 0..spec.height {
            for col in 0..spec.width {
                let (e, n) = spec.node(r, col);
                let margin = hull_margin(&hull, (e, n));
                let k = r * spec.width + col;
                if margin > 1e-6 {
                    interior_cells += 1;
                    if raw.missing[k] {
                        hull_violations += 1;
                    } else {
                        worst = worst.max((raw.values[k] - f(e, n)).abs());
                    }
                } else if margin < -1e-6 {
                    exterior_cells += 1;
                    if !raw.missing[k] || filled.values[k] != 0.0 {
                        hull_violations += 1;
                    }
                }
            }
        }
    }
    let ok = worst <= 1e-9 && hull_violations == 0 && interior_cells > 0 && exterior_cells > 0;
    report(
        2,
        ok,
        t0.elapsed(),
        Some(Duration::from_secs(10)),
        &format!("max interior error {worst:.2e}, {hull_violations} hull violations over {interior_cells} interior / {exterior_cells} exterior cells"),
    );
}

#[test]
fn criterion_03_gradient_correctness() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let spec = nn::unit_spec(8, 8).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let cfg = CnnLstmConfig { conv_channels: vec![2, 2, 2], lstm_hidden: 4, seed, ..CnnLstmConfig::default() };
        let params = NeuralParameters::init(&cfg, 8, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let maps = (0..2)
            .map(|t| DisplacementMap::from_values(spec, (0..64).map(|_| rng.random_range(-10.0..10.0)).collect(), t))
            .collect();
        let x = assemble_tensor(maps).unwrap();
        let y = DisplacementMap::from_values(spec, (0..64).map(|_| rng.random_range(-1.0..1.0)).collect(), 2);
        worst = worst.max(nn::gradient_check(&params, &x, &y, 1e-5).unwrap());
    }
    report(3, worst <= 1e-4, t0.elapsed(), Some(Duration::from_secs(120)), &format!("max relative error {worst:.2e} over 10 instances"));
}

#[test]
fn criterion_04_headline_fit() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let (x, y) = reference_xy();
    let cfg = CnnLstmConfig::default();
    let (params, history) = nn::train(&cfg, &x, &y).unwrap();
    let pred = nn::forward(&params, &x).unwrap();
    let fit_r2 = r2(&y.values, &pred.values).unwrap();
    let fit_mse = mse(&y.values, &pred.values).unwrap();
    let ok = history.loss.len() <= 500 && fit_r2 >= 0.99 && fit_mse < 1e-3;
    report(
        4,
        ok,
        t0.elapsed(),
        Some(Duration::from_secs(300)),
        &format!("R2 {fit_r2:.6}, MSE {fit_mse:.3e} mm^2 after {} epochs", history.loss.len()),
    );
}

fn trained_gbdt(x: &SpatioTemporalTensor, y: &DisplacementMap) -> (TreeEnsemble, TabularDataset) {
    let d = tensor_to_table(x, y).unwrap();
    let split = split_train_val(&d, 0.2, 42).unwrap();
    (gbdt_train(&split.train, &split.val, &GbdtConfig::default()).unwrap(), d)
}

#[test]
fn criterion_05_shap_local_accuracy() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let (x, y) = reference_xy();
    let (m, d) = trained_gbdt(&x, &y);
    let k = d.n_rows().min(10_000);
    let rep = explain_rows(&m, &d.x, &d.feature_names, 10_000, 42).unwrap();
    let pred = gbdt_predict(&m, &d.x).unwrap();
    let mut worst = 0.0f64;
    for (i, &row) in rep.row_indices.iter().enumerate() {
        let total = rep.base_value + rep.phi.row(i).sum();
        worst = worst.max((total - pred[row]).abs());
    }
    let ok = rep.k() == k && worst <= 1e-6;
    report(5, ok, t0.elapsed(), Some(Duration::from_secs(60)), &format!("{} rows, {} trees, max |base + sum phi - f(x)| {worst:.2e}", rep.k(), m.trees.len()));
}

fn random_tree(rng: &mut ChaCha8Rng, n_features: usize, max_depth: usize) -> DecisionTree {
    fn grow(rng: &mut ChaCha8Rng, nodes: &mut Vec<TreeNode>, n_features: usize, depth_left: usize) -> usize {
        let id = nodes.len();
        nodes.push(TreeNode::leaf(rng.random_range(-5.0..5.0), 0.0));
        if depth_left == 0 || (id > 0 && rng.random_bool(0.25)) {
            nodes[id].cover = rng.random_range(1..50) as f64;
            return id;
        }
        let l = grow(rng, nodes, n_features, depth_left - 1);
        let r = grow(rng, nodes, n_features, depth_left - 1);
        let cover = nodes[l].cover + nodes[r].cover;
        nodes[id] = TreeNode {
            feature_index: Some(rng.random_range(0..n_features)),
            threshold: rng.random_range(-1.0..1.0),
            left: l,
            right: r,
            leaf_value: 0.0,
            cover,
        };
        id
    }
    let mut nodes = Vec::new();
    let depth = rng.random_range(1..=max_depth);
    grow(rng, &mut nodes, n_features, depth);
    DecisionTree { nodes }
}

/// Cover-weighted expectation of one tree with only `known` features fixed.
fn oracle_tree_value(t: &DecisionTree, row: &[f64], known: &[bool], i: usize) -> f64 {
    let n = &t.nodes[i];
    match n.feature_index {
        None => n.leaf_value,
        Some(f) if known[f] => oracle_tree_value(t, row, known, if row[f] <= n.threshold { n.left } else { n.right }),
        Some(_) => {
            let (l, r) = (&t.nodes[n.left], &t.nodes[n.right]);
            (l.cover * oracle_tree_value(t, row, known, n.left) + r.cover * oracle_tree_value(t, row, known, n.right))
                / n.cover
        }
    }
}

/// Shapley values by enumerating every coalition.
fn oracle_shap(m: &TreeEnsemble, row: &[f64]) -> Vec<f64> {
    let n = m.n_features;
    let value = |mask: usize| {
        let known: Vec<bool> = (0..n).map(|j| mask >> j & 1 == 1).collect();
        m.base_score + m.trees.iter().map(|t| m.shrinkage * oracle_tree_value(t, row, &known, 0)).sum::<f64>()
    };
    let values: Vec<f64> = (0..1usize << n).map(value).collect();
    let fact: Vec<f64> = (0..=n).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    })
    .collect();
    (0..n)
        .map(|i| {
            (0..1usize << n)
                .filter(|s| s >> i & 1 == 0)
                .map(|s| {
                    let size = s.count_ones() as usize;
                    fact[size] * fact[n - size - 1] / fact[n] * (values[s | 1 << i] - values[s])
                })
                .sum()
        })
        .collect()
}

#[test]
fn criterion_06_shap_oracle_equivalence() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n_features = rng.random_range(1..=12);
        let n_trees = rng.random_range(1..=5);
        let trees = (0..n_trees).map(|_| random_tree(&mut rng, n_features, 3)).collect();
        let m = TreeEnsemble {
            base_score: rng.random_range(-2.0..2.0),
            shrinkage: rng.random_range(0.05..1.0),
            n_features,
            trees,
            val_history: vec![],
        };
        for _ in 0..3 {
            let row: Vec<f64> = (0..n_features).map(|_| rng.random_range(-1.5..1.5)).collect();
            let (_, phi) = tree_shap(&m, &row).unwrap();
            for (a, b) in phi.iter().zip(oracle_shap(&m, &row)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    report(6, worst <= 1e-9, t0.elapsed(), Some(Duration::from_secs(120)), &format!("max |phi - oracle| {worst:.2e} over 100 ensembles"));
}

fn staggered_scene() -> SceneConfig {
    let bowl = |e, n, radius, final_depth, onset| Bowl {
        center_easting: e,
        center_northing: n,
        radius,
        final_depth,
        onset,
        shape: OnsetShape::Linear,
    };
    SceneConfig {
        bowls: vec![
            bowl(600.0, 600.0, 500.0, -20.0, 2),
            bowl(1400.0, 1300.0, 600.0, -25.0, 10),
            bowl(700.0, 1500.0, 400.0, -15.0, 18),
        ],
        trend: -0.05,
        noise_std: 0.0,
        ..SceneConfig::reference()
    }
}

#[test]
fn criterion_07_persistence_finding() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let (x, y) = scene_xy(&staggered_scene());
    let (m, d) = trained_gbdt(&x, &y);
    let rep = explain_rows(&m, &d.x, &d.feature_names, 10_000, 42).unwrap();
    let summary = shap_summary(&rep).unwrap();
    let ratio = summary[0].mean_abs_phi / summary[1].mean_abs_phi;
    let ok = summary[0].feature == "t-1" && ratio >= 5.0;
    report(
        7,
        ok,
        t0.elapsed(),
        Some(Duration::from_secs(120)),
        &format!("top {} ({:.4}), second {} ({:.4}), ratio {ratio:.1}", summary[0].feature, summary[0].mean_abs_phi, summary[1].feature, summary[1].mean_abs_phi),
    );
}

#[test]
fn criterion_08_metric_identities() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_rel = 0.0f64;
    let mut exact_ok = true;
    for _ in 0..1000 {
        let n = rng.random_range(2..200);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let yhat: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let (a, b) = (rmse(&y, &yhat).unwrap(), mse(&y, &yhat).unwrap());
        worst_rel = worst_rel.max((a * a - b).abs() / b);
        if r2(&y, &y).unwrap() != 1.0 {
            exact_ok = false;
        }
        let mean = y.iter().sum::<f64>() / n as f64;
        if r2(&y, &vec![mean; n]).unwrap() != 0.0 {
            exact_ok = false;
        }
    }
    let b = BoxStats::from_values(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
    let box_ok = b.q1 == 2.0 && b.median == 3.0 && b.q3 == 4.0 && b.outliers == [100.0];
    let y = [0.0, 1.0, 2.0, 3.0, 4.0];
    let yhat: Vec<f64> = y.iter().zip([1.0, 2.0, 3.0, 4.0, 100.0]).map(|(t, r)| t + r).collect();
    let binned = binned_residual_boxstats(&y, &yhat, 1).unwrap();
    let binned_ok = binned.bins[0].box_stats.as_ref() == Some(&b);
    let ok = worst_rel <= 1e-12 && exact_ok && box_ok && binned_ok;
    report(
        8,
        ok,
        t0.elapsed(),
        None,
        &format!("max rel |rmse^2 - mse| {worst_rel:.1e}, r2 exact {exact_ok}, boxplot q1={} median={} q3={} outliers={:?}", b.q1, b.median, b.q3, b.outliers),
    );
}

fn table(x: Array2<f64>, y: Vec<f64>) -> TabularDataset {
    let f = x.ncols();
    TabularDataset { x, y, feature_names: lag_feature_names(f) }
}

/// Least squares with intercept via the normal equations and Gaussian elimination.
fn normal_equations(x: &Array2<f64>, y: &[f64]) -> Vec<f64> {
    let (n, p) = x.dim();
    let q = p + 1;
    let aug = |i: usize, j: usize| if j == p { 1.0 } else { x[[i, j]] };
    let mut a = vec![vec![0.0; q + 1]; q];
    for i in 0..n {
        for r in 0..q {
            for c in 0..q {
                a[r][c] += aug(i, r) * aug(i, c);
            }
            a[r][q] += aug(i, r) * y[i];
        }
    }
    for col in 0..q {
        let piv = (col..q).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..q {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=q {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..q).map(|r| a[r][q] / a[r][r]).collect()
}

#[test]
fn criterion_09_lasso_stationarity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    // standardised x and y perfectly correlated, so c = 1 and w = max(0, 1 - alpha/2)
    let x = Array2::from_shape_fn((120, 1), |(i, _)| ((i * 37) % 101) as f64 / 7.0);
    let y: Vec<f64> = x.column(0).iter().map(|v| 3.0 * v - 2.0).collect();
    let single = table(x, y);
    let w = |alpha: f64| lasso_train(&single, &LassoConfig { alpha, ..LassoConfig::default() }).unwrap().weights[0];
    let cases = [(0.4, 0.8), (2.0, 0.0), (2.5, 0.0), (4.0, 0.0)];
    let threshold_err = cases.iter().map(|&(a, want)| (w(a) - want).abs()).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Array2::from_shape_fn((200, 4), |_| rng.random_range(-3.0..3.0));
    let y: Vec<f64> = (0..200)
        .map(|i| 1.5 * x[[i, 0]] - 0.7 * x[[i, 1]] + 0.2 * x[[i, 3]] + 4.0 + rng.random_range(-0.5..0.5))
        .collect();
    let m = lasso_train(&table(x.clone(), y.clone()), &LassoConfig { alpha: 0.0, ..LassoConfig::default() }).unwrap();
    let beta = normal_equations(&x, &y);
    let mut coef_err = 0.0f64;
    for j in 0..4 {
        coef_err = coef_err.max((m.weights[j] * m.target_std / m.feature_stds[j] - beta[j]).abs());
    }
    let pred = lasso_predict(&m, &x).unwrap();
    let oracle_pred = x.rows().into_iter().map(|r: ArrayView1<f64>| beta[4] + (0..4).map(|j| beta[j] * r[j]).sum::<f64>());
    let pred_err = pred.iter().zip(oracle_pred).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let ok = threshold_err <= 1e-3 && coef_err <= 1e-4 && pred_err <= 1e-4;
    report(
        9,
        ok,
        t0.elapsed(),
        None,
        &format!("soft-threshold error {threshold_err:.1e}, OLS coefficient error {coef_err:.1e}, prediction error {pred_err:.1e}"),
    );
}

fn reference_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json")
}

#[test]
fn criterion_10_end_to_end_determinism() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let set = [("output_dir".to_string(), serde_json::to_string(&out).unwrap())];
        let cfg = RunConfig::load(&reference_config_path(), &set).unwrap();
        run_pipeline(&cfg).unwrap();
        out
    };
    let (a, b) = (run("a"), run("b"));
    let files = ["metrics.json", "shap_phi.csv", "shap_features.csv"];
    let same: Vec<bool> = files
        .iter()
        .map(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap())
        .collect();
    let ok = same.iter().all(|&s| s);
    let detail = files.iter().zip(&same).map(|(f, s)| format!("{f} {}", if *s { "identical" } else { "differs" })).collect::<Vec<_>>().join(", ");
    report(10, ok, t0.elapsed(), None, &detail);
}

#[test]
fn reference_config_matches_builtin() {
    let cfg = RunConfig::load(&reference_config_path(), &[]).unwrap();
    assert_eq!(cfg, RunConfig::reference("out/reference"));
}
