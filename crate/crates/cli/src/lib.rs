//! Command-line pipeline around the `graphmot` library: dataset synthesis,
//! training, tracking, evaluation and ablation grids, all driven by one
//! TOML config resolved against the benchmark preset.

pub mod config;
pub mod pipeline;
pub mod plot;
