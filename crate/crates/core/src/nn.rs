//! CNN-LSTM forecaster: a shared convolutional encoder per frame, a single
//! LSTM layer over the encoded sequence and a linear head from the final
//! hidden state to the H×W output map. Gradients are computed by a
//! hand-written backward pass.
//!
//! All parameters live in one flat vector. Its order is fixed: for each conv
//! block the kernel `[c_out, c_in, k, k]` then bias `[c_out]`; then the LSTM
//! input weights `[4h, d]`, recurrent weights `[4h, h]` and bias `[4h]` with
//! gate rows in i, f, g, o order; then head weights `[H·W, h]` and bias
//! `[H·W]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{DisplacementMap, GridSpec, SpatioTemporalTensor};
use crate::optim::Adam;
use crate::par;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnLstmConfig {
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub pool_factor: usize,
    pub lstm_hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for CnnLstmConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![32, 64, 128],
            kernel_size: 3,
            pool_factor: 2,
            lstm_hidden: 256,
            learning_rate: 1e-3,
            epochs: 500,
            seed: 42,
        }
    }
}

impl CnnLstmConfig {
    /// Total spatial reduction of the encoder.
    pub fn downsample(&self) -> usize {
        self.pool_factor.pow(self.conv_channels.len() as u32)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidConfig(m.into()));
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("conv_channels must be a non-empty list of positive counts");
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return bad("kernel_size must be odd");
        }
        if self.pool_factor == 0 {
            return bad("pool_factor must be positive");
        }
        if self.lstm_hidden == 0 {
            return bad("lstm_hidden must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        Ok(())
    }

    /// Checks the grid against the pooling divisibility constraint.
    pub fn validate_grid(&self, height: usize, width: usize) -> Result<(), NnError> {
        self.validate()?;
        let d = self.downsample();
        if height % d != 0 || width % d != 0 {
            return Err(NnError::InvalidConfig(format!(
                "grid {height}x{width} is not divisible by {d} (pool_factor^{})",
                self.conv_channels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvBlock {
    c_in: usize,
    c_out: usize,
    height: usize,
    width: usize,
    weight: usize,
    bias: usize,
}

impl ConvBlock {
    fn taps(&self, k: usize) -> usize {
        self.c_in * k * k
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    blocks: Vec<ConvBlock>,
    feature_len: usize,
    hidden: usize,
    lstm_wx: usize,
    lstm_wh: usize,
    lstm_b: usize,
    head_w: usize,
    head_b: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &CnnLstmConfig, height: usize, width: usize) -> Self {
        let k = cfg.kernel_size;
        let mut off = 0;
        let mut blocks = Vec::with_capacity(cfg.conv_channels.len());
        let (mut c_in, mut h, mut w) = (1, height, width);
        for &c_out in &cfg.conv_channels {
            let weight = off;
            off += c_out * c_in * k * k;
            let bias = off;
            off += c_out;
            blocks.push(ConvBlock { c_in, c_out, height: h, width: w, weight, bias });
            c_in = c_out;
            h /= cfg.pool_factor;
            w /= cfg.pool_factor;
        }
        let feature_len = c_in * h * w;
        let hidden = cfg.lstm_hidden;
        let lstm_wx = off;
        off += 4 * hidden * feature_len;
        let lstm_wh = off;
        off += 4 * hidden * hidden;
        let lstm_b = off;
        off += 4 * hidden;
        let head_w = off;
        off += height * width * hidden;
        let head_b = off;
        off += height * width;
        Self { blocks, feature_len, hidden, lstm_wx, lstm_wh, lstm_b, head_w, head_b, total: off }
    }

    fn conv_end(&self) -> usize {
        self.lstm_wx
    }

    /// `(name, shape, offset)` of every tensor in blob order.
    fn tensors(&self, k: usize, pixels: usize) -> Vec<TensorEntry> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(TensorEntry { name: format!("conv{i}.weight"), shape: vec![b.c_out, b.c_in, k, k], offset: b.weight });
            out.push(TensorEntry { name: format!("conv{i}.bias"), shape: vec![b.c_out], offset: b.bias });
        }
        let h4 = 4 * self.hidden;
        out.push(TensorEntry { name: "lstm.weight_input".into(), shape: vec![h4, self.feature_len], offset: self.lstm_wx });
        out.push(TensorEntry { name: "lstm.weight_hidden".into(), shape: vec![h4, self.hidden], offset: self.lstm_wh });
        out.push(TensorEntry { name: "lstm.bias".into(), shape: vec![h4], offset: self.lstm_b });
        out.push(TensorEntry { name: "head.weight".into(), shape: vec![pixels, self.hidden], offset: self.head_w });
        out.push(TensorEntry { name: "head.bias".into(), shape: vec![pixels], offset: self.head_b });
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Model weights for a fixed config and grid size.
///
/// Inputs are divided by `input_scale` before encoding and the head output
/// is multiplied by `output_scale`; [`train`] sets both from the data so the
/// network works on values of order one.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralParameters {
    pub config: CnnLstmConfig,
    pub height: usize,
    pub width: usize,
    pub input_scale: f64,
    pub output_scale: f64,
    pub values: Vec<f64>,
    layout: Layout,
}

impl NeuralParameters {
    /// Seeded initialisation: weights uniform in ±1/√fan_in, biases zero.
    pub fn init(config: &CnnLstmConfig, height: usize, width: usize) -> Result<Self, NnError> {
        let mut p = Self::zeros(config, height, width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = config.kernel_size;
        let l = p.layout.clone();
        let mut fill = |range: Range<usize>, fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p.values[range] {
                *v = rng.random_range(-a..=a);
            }
        };
        for b in &l.blocks {
            fill(b.weight..b.bias, b.taps(k));
        }
        fill(l.lstm_wx..l.lstm_wh, l.feature_len);
        fill(l.lstm_wh..l.lstm_b, l.hidden);
        fill(l.head_w..l.head_b, l.hidden);
        Ok(p)
    }

    pub fn zeros(config: &CnnLstmConfig, height: usize, width: usize) -> Result<Self, NnError> {
        config.validate_grid(height, width)?;
        let layout = Layout::new(config, height, width);
        Ok(Self {
            config: config.clone(),
            height,
            width,
            input_scale: 1.0,
            output_scale: 1.0,
            values: vec![0.0; layout.total],
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Length of the encoded frame vector fed to the LSTM.
    pub fn feature_len(&self) -> usize {
        self.layout.feature_len
    }

    /// Index range of the conv encoder parameters.
    pub fn encoder_range(&self) -> Range<usize> {
        0..self.layout.conv_end()
    }

    pub fn lstm_range(&self) -> Range<usize> {
        self.layout.lstm_wx..self.layout.head_w
    }

    pub fn head_range(&self) -> Range<usize> {
        self.layout.head_w..self.layout.total
    }

    pub fn tensors(&self) -> Vec<TensorEntry> {
        self.layout.tensors(self.config.kernel_size, self.height * self.width)
    }

    fn check_tensor(&self, x: &SpatioTemporalTensor) -> Result<(), NnError> {
        if x.spec.height != self.height || x.spec.width != self.width {
            return Err(NnError::ShapeMismatch(format!(
                "tensor is {}x{}, model expects {}x{}",
                x.spec.height, x.spec.width, self.height, self.width
            )));
        }
        if x.is_empty() {
            return Err(NnError::ShapeMismatch("empty input sequence".into()));
        }
        Ok(())
    }

    fn mat(&self, offset: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.values[offset..offset + rows * cols]).expect("layout")
    }
}

fn mat_mut(values: &mut [f64], offset: usize, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut values[offset..offset + rows * cols]).expect("layout")
}

/// Unfolds `[c, h, w]` into `[c·k·k, h·w]` patches with zero padding.
fn im2col(input: &[f64], c: usize, h: usize, w: usize, k: usize) -> Array2<f64> {
    let pad = k / 2;
    let mut cols = Array2::zeros((c * k * k, h * w));
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let mut row = cols.row_mut((ci * k + ky) * k + kx);
                let row = row.as_slice_mut().expect("contiguous");
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let src = &plane[(sy - pad) * w..(sy - pad + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    for x in 0..w {
                        let sx = x + kx;
                        if sx >= pad && sx - pad < w {
                            dst[x] = src[sx - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ci * k + ky) * k + kx);
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + kx;
                        if sx >= pad && sx - pad < w {
                            plane[(sy - pad) * w + sx - pad] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Non-overlapping `p×p` max-pool of `[c, h, w]`; also returns the flat
/// source index of each maximum (first one wins on ties).
fn max_pool(input: &Array2<f64>, h: usize, w: usize, p: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / p, w / p);
    let c = input.nrows();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        let plane = input.row(ci);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        let idx = (oy * p + dy) * w + ox * p + dx;
                        if plane[idx] > best {
                            best = plane[idx];
                            at = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(ci * h * w + at);
            }
        }
    }
    (out, arg)
}

struct BlockCache {
    cols: Array2<f64>,
    /// Post-ReLU activations `[c_out, h·w]`.
    act: Array2<f64>,
    argmax: Vec<usize>,
}

fn encode(params: &NeuralParameters, frame: &[f64], keep: bool) -> (Vec<f64>, Vec<BlockCache>) {
    let k = params.config.kernel_size;
    let p = params.config.pool_factor;
    let mut x: Vec<f64> = frame.iter().map(|v| v / params.input_scale).collect();
    let mut caches = Vec::new();
    for b in &params.layout.blocks {
        let cols = im2col(&x, b.c_in, b.height, b.width, k);
        let wm = params.mat(b.weight, b.c_out, b.taps(k));
        let bias = &params.values[b.bias..b.bias + b.c_out];
        let mut act = wm.dot(&cols);
        for (mut row, &bv) in act.axis_iter_mut(Axis(0)).zip(bias) {
            row.mapv_inplace(|v| (v + bv).max(0.0));
        }
        let (pooled, argmax) = max_pool(&act, b.height, b.width, p);
        x = pooled;
        if keep {
            caches.push(BlockCache { cols, act, argmax });
        }
    }
    (x, caches)
}

/// Runs the conv encoder on one H×W frame (mm) and flattens the result.
pub fn encode_frame(params: &NeuralParameters, frame: &DisplacementMap) -> Result<Vec<f64>, NnError> {
    if frame.spec.height != params.height || frame.spec.width != params.width {
        return Err(NnError::ShapeMismatch(format!(
            "frame is {}x{}, model expects {}x{}",
            frame.spec.height, frame.spec.width, params.height, params.width
        )));
    }
    Ok(encode(params, &frame.values, false).0)
}

/// Gradient of the loss w.r.t. one frame's encoded features, pushed back
/// through the encoder. Returns the gradient of the encoder parameters.
fn encode_backward(params: &NeuralParameters, caches: &[BlockCache], d_features: &[f64]) -> Vec<f64> {
    let k = params.config.kernel_size;
    let mut grad = vec![0.0; params.layout.conv_end()];
    let mut d_out = d_features.to_vec();
    for (i, (b, cache)) in params.layout.blocks.iter().zip(caches).enumerate().rev() {
        let hw = b.height * b.width;
        let mut d_act = Array2::<f64>::zeros((b.c_out, hw));
        {
            let flat = d_act.as_slice_mut().expect("contiguous");
            for (g, &src) in d_out.iter().zip(&cache.argmax) {
                flat[src] += g;
            }
        }
        ndarray::Zip::from(&mut d_act).and(&cache.act).for_each(|g, &a| {
            if a <= 0.0 {
                *g = 0.0;
            }
        });
        let dw = d_act.dot(&cache.cols.t());
        grad[b.weight..b.bias].copy_from_slice(dw.as_slice().expect("contiguous"));
        for (g, row) in grad[b.bias..b.bias + b.c_out].iter_mut().zip(d_act.axis_iter(Axis(0))) {
            *g = row.sum();
        }
        if i > 0 {
            let wm = params.mat(b.weight, b.c_out, b.taps(k));
            let d_cols = wm.t().dot(&d_act);
            d_out = col2im(&d_cols, b.c_in, b.height, b.width, k);
        }
    }
    grad
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

struct LstmTrace {
    /// Gate activations per step, `[T, 4h]` in i, f, g, o order.
    gates: Array2<f64>,
    /// Cell states `c_0 … c_T` (row 0 is the zero initial state).
    cells: Array2<f64>,
    /// Hidden states `h_0 … h_T`.
    hidden: Array2<f64>,
}

fn lstm_forward(params: &NeuralParameters, features: &Array2<f64>) -> LstmTrace {
    let l = &params.layout;
    let h = l.hidden;
    let t_len = features.nrows();
    let wx = params.mat(l.lstm_wx, 4 * h, l.feature_len);
    let wh = params.mat(l.lstm_wh, 4 * h, h);
    let bias = ArrayView1::from(&params.values[l.lstm_b..l.lstm_b + 4 * h]);
    let input_part = features.dot(&wx.t());
    let mut gates = Array2::zeros((t_len, 4 * h));
    let mut cells = Array2::<f64>::zeros((t_len + 1, h));
    let mut hidden = Array2::<f64>::zeros((t_len + 1, h));
    for t in 0..t_len {
        let z = &input_part.row(t) + &wh.dot(&hidden.row(t)) + bias;
        let mut g = gates.row_mut(t);
        for j in 0..h {
            let (zi, zf, zg, zo) = (z[j], z[h + j], z[2 * h + j], z[3 * h + j]);
            let (i, f, gg, o) = (sigmoid(zi), sigmoid(zf), zg.tanh(), sigmoid(zo));
            g[j] = i;
            g[h + j] = f;
            g[2 * h + j] = gg;
            g[3 * h + j] = o;
            let c = f * cells[[t, j]] + i * gg;
            cells[[t + 1, j]] = c;
            hidden[[t + 1, j]] = o * c.tanh();
        }
    }
    LstmTrace { gates, cells, hidden }
}

fn head_forward(params: &NeuralParameters, last_hidden: ArrayView1<'_, f64>) -> Vec<f64> {
    let l = &params.layout;
    let pixels = params.height * params.width;
    let wy = params.mat(l.head_w, pixels, l.hidden);
    let by = &params.values[l.head_b..l.head_b + pixels];
    wy.dot(&last_hidden)
        .iter()
        .zip(by)
        .map(|(v, b)| (v + b) * params.output_scale)
        .collect()
}

struct ForwardTrace {
    caches: Vec<Vec<BlockCache>>,
    features: Array2<f64>,
    lstm: LstmTrace,
    output: Vec<f64>,
}

fn forward_trace(params: &NeuralParameters, x: &SpatioTemporalTensor, keep: bool) -> ForwardTrace {
    let encoded = par::map_slice(&x.steps, |m| encode(params, &m.values, keep));
    let t_len = encoded.len();
    let mut features = Array2::zeros((t_len, params.layout.feature_len));
    let mut caches = Vec::with_capacity(t_len);
    for (t, (f, c)) in encoded.into_iter().enumerate() {
        features.row_mut(t).assign(&ArrayView1::from(&f));
        caches.push(c);
    }
    let lstm = lstm_forward(params, &features);
    let output = head_forward(params, lstm.hidden.row(t_len));
    ForwardTrace { caches, features, lstm, output }
}

/// Predicts the map following the input sequence.
pub fn forward(params: &NeuralParameters, x: &SpatioTemporalTensor) -> Result<DisplacementMap, NnError> {
    params.check_tensor(x)?;
    let trace = forward_trace(params, x, false);
    let epoch = x.steps.last().map(|m| m.epoch_index + 1).unwrap_or(0);
    Ok(DisplacementMap::from_values(x.spec, trace.output, epoch))
}

fn mse_slices(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

pub fn loss_mse(pred: &DisplacementMap, target: &DisplacementMap) -> Result<f64, NnError> {
    if pred.spec.height != target.spec.height || pred.spec.width != target.spec.width {
        return Err(NnError::ShapeMismatch("prediction and target differ in shape".into()));
    }
    Ok(mse_slices(&pred.values, &target.values))
}

fn check_target(params: &NeuralParameters, y: &DisplacementMap) -> Result<(), NnError> {
    if y.spec.height != params.height || y.spec.width != params.width {
        return Err(NnError::ShapeMismatch(format!(
            "target is {}x{}, model expects {}x{}",
            y.spec.height, y.spec.width, params.height, params.width
        )));
    }
    Ok(())
}

/// MSE loss and its gradient with respect to every parameter.
pub fn loss_and_gradient(
    params: &NeuralParameters,
    x: &SpatioTemporalTensor,
    y: &DisplacementMap,
) -> Result<(f64, Vec<f64>), NnError> {
    params.check_tensor(x)?;
    check_target(params, y)?;
    Ok(loss_and_gradient_unchecked(params, x, &y.values))
}

fn loss_and_gradient_unchecked(params: &NeuralParameters, x: &SpatioTemporalTensor, y: &[f64]) -> (f64, Vec<f64>) {
    let l = &params.layout;
    let h = l.hidden;
    let pixels = params.height * params.width;
    let tr = forward_trace(params, x, true);
    let t_len = tr.features.nrows();
    let loss = mse_slices(&tr.output, y);
    let mut grad = vec![0.0; l.total];

    // head
    let d_head: Vec<f64> = tr
        .output
        .iter()
        .zip(y)
        .map(|(p, t)| 2.0 * (p - t) / pixels as f64 * params.output_scale)
        .collect();
    let d_head = ArrayView1::from(&d_head);
    let h_last = tr.lstm.hidden.row(t_len);
    {
        let mut gw = mat_mut(&mut grad, l.head_w, pixels, h);
        for (mut row, &d) in gw.axis_iter_mut(Axis(0)).zip(d_head) {
            row.assign(&(&h_last * d));
        }
    }
    grad[l.head_b..l.head_b + pixels].copy_from_slice(d_head.as_slice().expect("contiguous"));
    let mut dh = params.mat(l.head_w, pixels, h).t().dot(&d_head);

    // LSTM, backwards through time
    let wh = params.mat(l.lstm_wh, 4 * h, h);
    let mut dz = Array2::<f64>::zeros((t_len, 4 * h));
    let mut dc = vec![0.0; h];
    for t in (0..t_len).rev() {
        let g = tr.lstm.gates.row(t);
        let mut dzt = dz.row_mut(t);
        for j in 0..h {
            let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
            let c = tr.lstm.cells[[t + 1, j]];
            let c_prev = tr.lstm.cells[[t, j]];
            let tc = c.tanh();
            let dct = dc[j] + dh[j] * o * (1.0 - tc * tc);
            dzt[j] = dct * gg * i * (1.0 - i);
            dzt[h + j] = dct * c_prev * f * (1.0 - f);
            dzt[2 * h + j] = dct * i * (1.0 - gg * gg);
            dzt[3 * h + j] = dh[j] * tc * o * (1.0 - o);
            dc[j] = dct * f;
        }
        dh = wh.t().dot(&dzt);
    }
    let h_prev = tr.lstm.hidden.slice(s![..t_len, ..]);
    mat_mut(&mut grad, l.lstm_wx, 4 * h, l.feature_len).assign(&dz.t().dot(&tr.features));
    mat_mut(&mut grad, l.lstm_wh, 4 * h, h).assign(&dz.t().dot(&h_prev));
    for (g, col) in grad[l.lstm_b..l.lstm_b + 4 * h].iter_mut().zip(dz.axis_iter(Axis(1))) {
        *g = col.sum();
    }
    let d_features = dz.dot(&params.mat(l.lstm_wx, 4 * h, l.feature_len));

    // encoder, one frame per task, summed in frame order
    let frame_grads = par::map_range(t_len, |t| {
        let row = d_features.row(t);
        encode_backward(params, &tr.caches[t], row.as_slice().expect("contiguous"))
    });
    for fg in frame_grads {
        for (g, v) in grad[..l.conv_end()].iter_mut().zip(fg) {
            *g += v;
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Loss (mm²) evaluated at the start of each epoch.
    pub loss: Vec<f64>,
}

fn max_abs(v: impl Iterator<Item = f64>) -> f64 {
    let m = v.fold(0.0f64, |a, b| a.max(b.abs()));
    if m > 0.0 && m.is_finite() { m } else { 1.0 }
}

/// Full-batch Adam on the single `(x, y)` sample.
pub fn train(
    config: &CnnLstmConfig,
    x: &SpatioTemporalTensor,
    y: &DisplacementMap,
) -> Result<(NeuralParameters, TrainingHistory), NnError> {
    let mut params = NeuralParameters::init(config, x.spec.height, x.spec.width)?;
    params.check_tensor(x)?;
    check_target(&params, y)?;
    params.input_scale = max_abs(x.steps.iter().flat_map(|m| m.values.iter().copied()));
    params.output_scale = max_abs(y.values.iter().copied());
    let mut opt = Adam::new(params.len(), config.learning_rate);
    let mut history = TrainingHistory { loss: Vec::with_capacity(config.epochs) };
    for epoch in 0..config.epochs {
        let (loss, grad) = loss_and_gradient_unchecked(&params, x, &y.values);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteLoss { epoch });
        }
        history.loss.push(loss);
        opt.update(&mut params.values, &grad);
        log::debug!("cnn-lstm epoch {epoch}: loss {loss:.6e}");
    }
    Ok((params, history))
}

/// Largest relative disagreement between the analytic gradient and central
/// differences over the parameters in `range`.
pub fn gradient_check_range(
    params: &NeuralParameters,
    x: &SpatioTemporalTensor,
    y: &DisplacementMap,
    epsilon: f64,
    range: Range<usize>,
) -> Result<f64, NnError> {
    let (_, analytic) = loss_and_gradient(params, x, y)?;
    let output_at = |p: &NeuralParameters| forward_trace(p, x, false).output;
    let n = y.values.len() as f64;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in range {
        let orig = probe.values[i];
        probe.values[i] = orig + epsilon;
        let up = output_at(&probe);
        probe.values[i] = orig - epsilon;
        let down = output_at(&probe);
        probe.values[i] = orig;
        // L(θ+ε) − L(θ−ε) summed per cell as (u−d)(u+d−2y) to avoid
        // cancelling two nearly equal totals
        let diff: f64 = up
            .iter()
            .zip(&down)
            .zip(&y.values)
            .map(|((u, d), t)| (u - d) * (u + d - 2.0 * t))
            .sum::<f64>()
            / n;
        let numeric = diff / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

pub fn gradient_check(
    params: &NeuralParameters,
    x: &SpatioTemporalTensor,
    y: &DisplacementMap,
    epsilon: f64,
) -> Result<f64, NnError> {
    gradient_check_range(params, x, y, epsilon, 0..params.len())
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: CnnLstmConfig,
    height: usize,
    width: usize,
    input_scale: f64,
    output_scale: f64,
    n_params: usize,
    tensors: Vec<TensorEntry>,
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

/// Writes `<stem>.json` (header) and `<stem>.bin` (little-endian f64 blob).
pub fn save_checkpoint(params: &NeuralParameters, path: &Path) -> Result<(), NnError> {
    let header = CheckpointHeader {
        config: params.config.clone(),
        height: params.height,
        width: params.width,
        input_scale: params.input_scale,
        output_scale: params.output_scale,
        n_params: params.len(),
        tensors: params.tensors(),
    };
    let mut f = BufWriter::new(File::create(sibling(path, "json"))?);
    serde_json::to_writer_pretty(&mut f, &header)?;
    f.write_all(b"\n")?;
    f.flush()?;
    let mut b = BufWriter::new(File::create(sibling(path, "bin"))?);
    for v in &params.values {
        b.write_all(&v.to_le_bytes())?;
    }
    b.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NeuralParameters, NnError> {
    let header: CheckpointHeader = serde_json::from_reader(BufReader::new(File::open(sibling(path, "json"))?))?;
    let mut params = NeuralParameters::zeros(&header.config, header.height, header.width)?;
    if params.len() != header.n_params {
        return Err(NnError::ShapeMismatch(format!(
            "header declares {} parameters, config implies {}",
            header.n_params,
            params.len()
        )));
    }
    let mut bytes = Vec::new();
    BufReader::new(File::open(sibling(path, "bin"))?).read_to_end(&mut bytes)?;
    if bytes.len() != 8 * params.len() {
        return Err(NnError::ShapeMismatch(format!(
            "blob holds {} bytes, expected {}",
            bytes.len(),
            8 * params.len()
        )));
    }
    for (v, chunk) in params.values.iter_mut().zip(bytes.chunks_exact(8)) {
        *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
    }
    if params.values.iter().any(|v| !v.is_finite()) {
        return Err(NnError::ShapeMismatch("non-finite parameter in blob".into()));
    }
    params.input_scale = header.input_scale;
    params.output_scale = header.output_scale;
    Ok(params)
}

/// Grid spec of a model's output when only its size is known.
pub fn unit_spec(height: usize, width: usize) -> Result<GridSpec, NnError> {
    GridSpec::new(
        height,
        width,
        crate::grid::BoundingBox { min_easting: 0.0, max_easting: 1.0, min_northing: 0.0, max_northing: 1.0 },
    )
    .map_err(|e| NnError::ShapeMismatch(e.to_string()))
}
