//! Forecasting ground displacement from InSAR point time series.
//!
//! Points are gridded into displacement maps, stacked into a
//! spatio-temporal tensor, and fed either to a CNN-LSTM or, flattened per
//! pixel, to gradient-boosted trees and a Lasso baseline. Tree models can be
//! explained with exact Shapley values.

pub mod evaluate;
pub mod explain;
pub mod grid;
pub mod nn;
pub mod ingest;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod synth;
pub mod tabular;
