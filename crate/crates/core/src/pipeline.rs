//! End-to-end run driven by one JSON config: ingest, grid, train the enabled
//! models, predict, evaluate and explain the tree ensemble.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::evaluate::{build_report, ModelMetrics, NamedPrediction, ReportOptions};
use crate::explain::{explain_rows, force_decomposition, save_report, shap_summary};
use crate::grid::{build_grid_spec, grid_point_set, save_map, save_tensor};
use crate::ingest::{parse_csv, CsvSchema, PointSet, WindowSelection};
use crate::nn::{self, CnnLstmConfig};
use crate::synth::{generate_scene, SceneConfig};
use crate::tabular::{
    gbdt_predict, gbdt_train, lasso_predict, lasso_train, predictions_to_map, split_train_val, tensor_to_table,
    GbdtConfig, LassoConfig, TabularDataset, TrainValSplit,
};

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: BoxError,
    },
}

impl PipelineError {
    pub fn stage(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Stage { stage, .. } => stage,
        }
    }
}

fn at<E: Into<BoxError>>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, source: e.into() }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputSource {
    Scene(SceneConfig),
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSize {
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(flatten)]
    pub config: CnnLstmConfig,
}

impl Default for CnnSection {
    fn default() -> Self {
        Self { enabled: true, config: CnnLstmConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbdtSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(flatten)]
    pub config: GbdtConfig,
}

impl Default for GbdtSection {
    fn default() -> Self {
        Self { enabled: true, config: GbdtConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(flatten)]
    pub config: LassoConfig,
}

impl Default for LassoSection {
    fn default() -> Self {
        Self { enabled: true, config: LassoConfig::default() }
    }
}

/// Pixel split shared by both tabular models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSection {
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { val_fraction: 0.2, seed: 42 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainSection {
    pub enabled: bool,
    pub k: usize,
    pub seed: u64,
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self { enabled: true, k: 10_000, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: InputSource,
    pub output_dir: PathBuf,
    pub grid: GridSize,
    pub window: WindowSelection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub cnn_lstm: CnnSection,
    #[serde(default)]
    pub gbdt: GbdtSection,
    #[serde(default)]
    pub lasso: LassoSection,
    #[serde(default)]
    pub explain: ExplainSection,
    #[serde(default)]
    pub evaluate: ReportOptions,
}

impl RunConfig {
    /// The synthetic reference run: 32×32 grid, 24 input steps, all models.
    pub fn reference(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            input: InputSource::Scene(SceneConfig::reference()),
            output_dir: output_dir.into(),
            grid: GridSize { height: 32, width: 32 },
            window: WindowSelection { input_start: 0, input_len: 24, target_index: 24 },
            split: SplitSection::default(),
            cnn_lstm: CnnSection::default(),
            gbdt: GbdtSection::default(),
            lasso: LassoSection::default(),
            explain: ExplainSection::default(),
            evaluate: ReportOptions::default(),
        }
    }

    pub fn from_json(text: &str, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        serde_json::from_value(value).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, overrides)
    }

    /// Checks everything that can be checked without reading input data.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if let InputSource::Scene(s) = &self.input {
            if let Err(e) = s.validate() {
                return bad(format!("input.scene: {e}"));
            }
        }
        if self.grid.height < 2 || self.grid.width < 2 {
            return bad(format!("grid {}x{} must be at least 2x2", self.grid.height, self.grid.width));
        }
        let w = &self.window;
        if w.input_len == 0 {
            return bad("window.input_len must be positive".into());
        }
        if w.target_index < w.input_start + w.input_len {
            return bad("window.target_index must follow the input window".into());
        }
        if self.cnn_lstm.enabled {
            if let Err(e) = self.cnn_lstm.config.validate_grid(self.grid.height, self.grid.width) {
                return bad(format!("cnn_lstm: {e}"));
            }
        }
        if self.gbdt.enabled {
            if let Err(e) = self.gbdt.config.validate() {
                return bad(format!("gbdt: {e}"));
            }
        }
        if self.lasso.enabled && !(self.lasso.config.alpha >= 0.0 && self.lasso.config.alpha.is_finite()) {
            return bad("lasso.alpha must be non-negative".into());
        }
        if (self.gbdt.enabled || self.lasso.enabled)
            && !(self.split.val_fraction > 0.0 && self.split.val_fraction < 1.0)
        {
            return bad("split.val_fraction must lie in (0, 1)".into());
        }
        if self.explain.enabled && self.explain.k == 0 {
            return bad("explain.k must be positive".into());
        }
        if self.evaluate.n_bins == 0 {
            return bad("evaluate.n_bins must be positive".into());
        }
        if !(self.cnn_lstm.enabled || self.gbdt.enabled || self.lasso.enabled) {
            return bad("no model is enabled".into());
        }
        Ok(())
    }
}

/// Sets `key` (dot-separated path) in a JSON document. The value is parsed as
/// JSON when possible and kept as a string otherwise.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<(), PipelineError> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Config(format!("bad override key {key:?}")));
    }
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(PipelineError::Config(format!(
                "override {key:?}: {} is not an object",
                parts[..i].join(".")
            )));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(arg: &str) -> Result<(String, String), PipelineError> {
    arg.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .ok_or_else(|| PipelineError::Config(format!("override {arg:?} is not key=value")))
}

pub fn load_points(input: &InputSource) -> Result<PointSet, BoxError> {
    Ok(match input {
        InputSource::Scene(s) => generate_scene(s)?.0,
        InputSource::Csv { path, schema } => parse_csv(path, schema)?,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BoxError> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub metrics: Vec<ModelMetrics>,
    pub output_dir: PathBuf,
}

struct Tabular {
    data: TabularDataset,
    split: TrainValSplit,
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let out = &cfg.output_dir;

    let points = load_points(&cfg.input).map_err(at("ingest"))?;
    cfg.window.validate(points.series_len()).map_err(at("ingest"))?;
    log::info!("ingest: {} points, {} epochs", points.records.len(), points.series_len());

    let w = cfg.window;
    let spec = build_grid_spec(&points, cfg.grid.height, cfg.grid.width).map_err(at("grid"))?;
    let (x, y) = grid_point_set(&points, &spec, w.input_start..w.input_start + w.input_len, w.target_index)
        .map_err(at("grid"))?;
    std::fs::create_dir_all(out).map_err(at("grid"))?;
    let labels = &points.epoch_labels[w.input_start..w.input_start + w.input_len];
    save_tensor(&x, labels, &out.join("tensor.bin")).map_err(at("grid"))?;
    save_map(&y, &points.epoch_labels[w.target_index], &out.join("target.bin")).map_err(at("grid"))?;
    log::info!("grid: tensor {:?}", x.shape_5d());

    let mut predictions = Vec::new();
    if cfg.cnn_lstm.enabled {
        let (params, history) = nn::train(&cfg.cnn_lstm.config, &x, &y).map_err(at("cnn_lstm"))?;
        nn::save_checkpoint(&params, &out.join("model_cnn_lstm")).map_err(at("cnn_lstm"))?;
        write_json(&out.join("history_cnn_lstm.json"), &history).map_err(at("cnn_lstm"))?;
        let pred = nn::forward(&params, &x).map_err(at("cnn_lstm"))?;
        log::info!("cnn_lstm: final loss {:?}", history.loss.last());
        predictions.push(NamedPrediction { name: "cnn_lstm".into(), map: pred, validation_pixels: None });
    }

    let tabular = if cfg.gbdt.enabled || cfg.lasso.enabled {
        let data = tensor_to_table(&x, &y).map_err(at("tabular"))?;
        let split = split_train_val(&data, cfg.split.val_fraction, cfg.split.seed).map_err(at("tabular"))?;
        Some(Tabular { data, split })
    } else {
        None
    };
    let epoch = y.epoch_index;

    let mut ensemble = None;
    if let (true, Some(t)) = (cfg.gbdt.enabled, &tabular) {
        let m = gbdt_train(&t.split.train, &t.split.val, &cfg.gbdt.config).map_err(at("gbdt"))?;
        write_json(&out.join("model_gbdt.json"), &m).map_err(at("gbdt"))?;
        let pred = gbdt_predict(&m, &t.data.x).map_err(at("gbdt"))?;
        let map = predictions_to_map(pred, spec, epoch).map_err(at("gbdt"))?;
        log::info!("gbdt: {} trees after {} rounds", m.trees.len(), m.rounds_run());
        predictions.push(NamedPrediction {
            name: "gbdt".into(),
            map,
            validation_pixels: Some(t.split.val_idx.clone()),
        });
        ensemble = Some(m);
    }
    if let (true, Some(t)) = (cfg.lasso.enabled, &tabular) {
        let m = lasso_train(&t.split.train, &cfg.lasso.config).map_err(at("lasso"))?;
        write_json(&out.join("model_lasso.json"), &m).map_err(at("lasso"))?;
        let pred = lasso_predict(&m, &t.data.x).map_err(at("lasso"))?;
        let map = predictions_to_map(pred, spec, epoch).map_err(at("lasso"))?;
        predictions.push(NamedPrediction {
            name: "lasso".into(),
            map,
            validation_pixels: Some(t.split.val_idx.clone()),
        });
    }

    for p in &predictions {
        save_map(&p.map, &p.name, &out.join(format!("prediction_{}.bin", p.name))).map_err(at("evaluate"))?;
    }
    let metrics = build_report(&y, &predictions, &cfg.evaluate, out).map_err(at("evaluate"))?;
    for m in &metrics {
        log::info!("evaluate: {} rmse {:.4} r2 {:.4}", m.model, m.rmse, m.r2);
    }

    if let (true, Some(m), Some(t)) = (cfg.explain.enabled, &ensemble, &tabular) {
        explain_stage(m, &t.data, cfg, out).map_err(at("explain"))?;
    }

    Ok(RunSummary { metrics, output_dir: out.clone() })
}

fn explain_stage(
    m: &crate::tabular::TreeEnsemble,
    data: &TabularDataset,
    cfg: &RunConfig,
    out: &Path,
) -> Result<(), BoxError> {
    let report = explain_rows(m, &data.x, &data.feature_names, cfg.explain.k, cfg.explain.seed)?;
    save_report(&report, out)?;
    let summary = shap_summary(&report)?;
    write_json(&out.join("shap_summary.json"), &summary)?;
    write_json(&out.join("shap_force.json"), &force_decomposition(&report, 0)?)?;
    log::info!(
        "explain: {} rows, top feature {} (mean |phi| {:.4})",
        report.k(),
        summary[0].feature,
        summary[0].mean_abs_phi
    );
    Ok(())
}
