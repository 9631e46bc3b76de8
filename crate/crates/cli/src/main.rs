use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use insar_core::evaluate::{build_report, NamedPrediction, ReportOptions};
use insar_core::explain::{explain_rows, force_decomposition, save_report, shap_summary};
use insar_core::grid::{self, build_grid_spec, estimate_memory, grid_point_set, load_map, load_tensor, save_map, save_tensor};
use insar_core::ingest::{parse_csv, CsvSchema, WindowSelection};
use insar_core::nn::{self, CnnLstmConfig};
use insar_core::pipeline::{parse_override, run_pipeline, RunConfig};
use insar_core::synth::{generate_scene, SceneConfig};
use insar_core::tabular::{
    gbdt_predict, gbdt_train, lag_feature_names, lasso_predict, lasso_train, predictions_to_map, split_train_val,
    tensor_to_table, GbdtConfig, LassoConfig, LinearModel, TreeEnsemble,
};

#[derive(Parser)]
#[command(name = "insar", version, about = "Gridding, forecasting and attribution for InSAR displacement series")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic point CSV.
    Synth {
        /// Scene config JSON; the built-in reference scene when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpolate a point CSV into an input tensor and a target map.
    Grid {
        #[arg(long)]
        input: PathBuf,
        /// CSV column schema JSON.
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        input_start: usize,
        #[arg(long)]
        input_len: usize,
        #[arg(long)]
        target_index: usize,
        /// Output directory for tensor.bin and target.bin.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the CNN-LSTM on a gridded tensor.
    TrainNn {
        #[arg(long)]
        tensor: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Model config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path stem; writes <stem>.json and <stem>.bin.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the gradient-boosted tree ensemble.
    TrainGbdt {
        #[arg(long)]
        tensor: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the Lasso baseline.
    TrainLasso {
        #[arg(long)]
        tensor: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the next map with a trained model.
    Predict {
        #[arg(long, value_enum)]
        model_type: ModelType,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tensor: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score prediction maps against the truth and write the report files.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        /// name=path, repeatable.
        #[arg(long = "prediction", required = true)]
        predictions: Vec<String>,
        #[arg(long, default_value_t = 10)]
        n_bins: usize,
        #[arg(long)]
        heatmap_range: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shapley attributions for a trained tree ensemble.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tensor: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        k: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tensor memory footprint for a set of square resolutions.
    MemoryStudy {
        #[arg(long, default_value_t = 300)]
        timesteps: usize,
        #[arg(long, value_delimiter = ',', default_value = "128,256,512")]
        resolutions: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        bytes_per_value: usize,
    },
    /// Run the whole workflow from one config file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. --set gbdt.max_rounds=100.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelType {
    CnnLstm,
    Gbdt,
    Lasso,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn check_fraction(f: f64) -> Result<()> {
    ensure!(f > 0.0 && f < 1.0, "val_fraction {f} must lie in (0, 1)");
    Ok(())
}

fn load_xy(tensor: &Path, target: &Path) -> Result<(grid::SpatioTemporalTensor, grid::DisplacementMap)> {
    let (x, _) = load_tensor(tensor).with_context(|| format!("loading tensor {}", tensor.display()))?;
    let y = load_map(target).with_context(|| format!("loading target {}", target.display()))?;
    Ok((x, y))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { config, seed, out } => {
            let mut cfg: SceneConfig = match &config {
                Some(p) => read_json(p).context("config stage")?,
                None => SceneConfig::reference(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate().context("config stage")?;
            let (ps, _) = generate_scene(&cfg).context("synth stage")?;
            ps.save_csv(&out).context("synth stage")?;
            log::info!("wrote {} points to {}", ps.records.len(), out.display());
        }
        Command::Grid { input, schema, height, width, input_start, input_len, target_index, out } => {
            let window = WindowSelection { input_start, input_len, target_index };
            ensure!(height >= 2 && width >= 2, "config stage: grid must be at least 2x2");
            ensure!(input_len > 0, "config stage: input_len must be positive");
            let schema: CsvSchema = match &schema {
                Some(p) => read_json(p).context("config stage")?,
                None => CsvSchema::default(),
            };
            let ps = parse_csv(&input, &schema).context("ingest stage")?;
            window.validate(ps.series_len()).context("ingest stage")?;
            let spec = build_grid_spec(&ps, height, width).context("grid stage")?;
            let (x, y) = grid_point_set(&ps, &spec, input_start..input_start + input_len, target_index)
                .context("grid stage")?;
            std::fs::create_dir_all(&out)?;
            save_tensor(&x, &ps.epoch_labels[input_start..input_start + input_len], &out.join("tensor.bin"))
                .context("grid stage")?;
            save_map(&y, &ps.epoch_labels[target_index], &out.join("target.bin")).context("grid stage")?;
            let [b, t, c, h, w] = x.shape_5d();
            println!("tensor shape ({b}, {t}, {c}, {h}, {w})");
        }
        Command::TrainNn { tensor, target, config, epochs, learning_rate, seed, out } => {
            let mut cfg: CnnLstmConfig = match &config {
                Some(p) => read_json(p).context("config stage")?,
                None => CnnLstmConfig::default(),
            };
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.learning_rate = learning_rate.unwrap_or(cfg.learning_rate);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.validate().context("config stage")?;
            let (x, y) = load_xy(&tensor, &target)?;
            let (params, history) = nn::train(&cfg, &x, &y).context("cnn_lstm stage")?;
            nn::save_checkpoint(&params, &out).context("cnn_lstm stage")?;
            if let Some(last) = history.loss.last() {
                println!("final loss {last:.6e} after {} epochs", history.loss.len());
            }
        }
        Command::TrainGbdt { tensor, target, config, val_fraction, seed, out } => {
            let cfg: GbdtConfig = match &config {
                Some(p) => read_json(p).context("config stage")?,
                None => GbdtConfig::default(),
            };
            cfg.validate().context("config stage")?;
            check_fraction(val_fraction).context("config stage")?;
            let (x, y) = load_xy(&tensor, &target)?;
            let d = tensor_to_table(&x, &y).context("gbdt stage")?;
            let split = split_train_val(&d, val_fraction, seed).context("gbdt stage")?;
            let m = gbdt_train(&split.train, &split.val, &cfg).context("gbdt stage")?;
            write_json(&out, &m)?;
            println!("{} trees kept after {} rounds", m.trees.len(), m.rounds_run());
        }
        Command::TrainLasso { tensor, target, config, alpha, val_fraction, seed, out } => {
            let mut cfg: LassoConfig = match &config {
                Some(p) => read_json(p).context("config stage")?,
                None => LassoConfig::default(),
            };
            cfg.alpha = alpha.unwrap_or(cfg.alpha);
            ensure!(cfg.alpha >= 0.0, "config stage: alpha must be non-negative");
            check_fraction(val_fraction).context("config stage")?;
            let (x, y) = load_xy(&tensor, &target)?;
            let d = tensor_to_table(&x, &y).context("lasso stage")?;
            let split = split_train_val(&d, val_fraction, seed).context("lasso stage")?;
            let m = lasso_train(&split.train, &cfg).context("lasso stage")?;
            write_json(&out, &m)?;
        }
        Command::Predict { model_type, model, tensor, out } => {
            let (x, _) = load_tensor(&tensor).with_context(|| format!("loading tensor {}", tensor.display()))?;
            let epoch = x.len();
            let map = match model_type {
                ModelType::CnnLstm => {
                    let p = nn::load_checkpoint(&model).context("predict stage")?;
                    nn::forward(&p, &x).context("predict stage")?
                }
                ModelType::Gbdt | ModelType::Lasso => {
                    let dummy = grid::DisplacementMap::from_values(x.spec, vec![0.0; x.spec.len()], epoch);
                    let d = tensor_to_table(&x, &dummy).context("predict stage")?;
                    let pred = if matches!(model_type, ModelType::Gbdt) {
                        let m: TreeEnsemble = read_json(&model)?;
                        gbdt_predict(&m, &d.x)
                    } else {
                        let m: LinearModel = read_json(&model)?;
                        lasso_predict(&m, &d.x)
                    }
                    .context("predict stage")?;
                    predictions_to_map(pred, x.spec, epoch).context("predict stage")?
                }
            };
            save_map(&map, "prediction", &out).context("predict stage")?;
        }
        Command::Evaluate { truth, predictions, n_bins, heatmap_range, out } => {
            ensure!(n_bins > 0, "config stage: n_bins must be positive");
            let mut named = Vec::new();
            for p in &predictions {
                let Some((name, path)) = p.split_once('=') else {
                    bail!("config stage: prediction {p:?} is not name=path");
                };
                named.push((name.to_string(), PathBuf::from(path)));
            }
            let truth = load_map(&truth).context("evaluate stage")?;
            let preds = named
                .into_iter()
                .map(|(name, path)| {
                    let map = load_map(&path).with_context(|| format!("evaluate stage: {}", path.display()))?;
                    Ok(NamedPrediction { name, map, validation_pixels: None })
                })
                .collect::<Result<Vec<_>>>()?;
            let opts = ReportOptions { n_bins, heatmap_range };
            std::fs::create_dir_all(&out)?;
            for m in build_report(&truth, &preds, &opts, &out).context("evaluate stage")? {
                println!("{:<10} rmse {:.4}  mse {:.4}  r2 {:.4}", m.model, m.rmse, m.mse, m.r2);
            }
        }
        Command::Explain { model, tensor, k, seed, out } => {
            ensure!(k > 0, "config stage: k must be positive");
            let m: TreeEnsemble = read_json(&model).context("explain stage")?;
            let (x, _) = load_tensor(&tensor).with_context(|| format!("loading tensor {}", tensor.display()))?;
            let dummy = grid::DisplacementMap::from_values(x.spec, vec![0.0; x.spec.len()], x.len());
            let d = tensor_to_table(&x, &dummy).context("explain stage")?;
            let report = explain_rows(&m, &d.x, &lag_feature_names(x.len()), k, seed).context("explain stage")?;
            std::fs::create_dir_all(&out)?;
            save_report(&report, &out).context("explain stage")?;
            let summary = shap_summary(&report).context("explain stage")?;
            write_json(&out.join("shap_summary.json"), &summary)?;
            write_json(&out.join("shap_force.json"), &force_decomposition(&report, 0)?)?;
            for f in summary.iter().take(5) {
                println!("{:<8} mean |phi| {:.6}", f.feature, f.mean_abs_phi);
            }
        }
        Command::MemoryStudy { timesteps, resolutions, bytes_per_value } => {
            ensure!(bytes_per_value > 0, "config stage: bytes_per_value must be positive");
            println!("{:>10}  {:>9}  {:>10}", "resolution", "timesteps", "MiB");
            for r in resolutions {
                let res = format!("{r}x{r}");
                println!("{res:>10}  {timesteps:>9}  {:>10.2}", estimate_memory(timesteps, r, r, bytes_per_value));
            }
        }
        Command::Pipeline { config, overrides } => {
            let overrides = overrides.iter().map(|o| parse_override(o)).collect::<Result<Vec<_>, _>>()?;
            let cfg = RunConfig::load(&config, &overrides)?;
            let summary = run_pipeline(&cfg)?;
            for m in &summary.metrics {
                println!("{:<10} rmse {:.4}  mse {:.4}  r2 {:.4}", m.model, m.rmse, m.mse, m.r2);
            }
            println!("outputs in {}", summary.output_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
