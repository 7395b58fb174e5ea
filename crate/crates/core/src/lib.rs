//! Online 3D multi-object tracking with a sparse graph transformer.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`geometry`]: oriented 3D box math (IoU, NMS, constant-velocity prediction)
//! - [`simulator`]: synthetic ground-truth scenes and detection corruption
//! - [`graph`]: detection / track / association graph construction
//! - [`autodiff`]: dense f64 tensors with a recorded-operation tape (reverse mode)
//! - [`model`]: graph transformer encoder, edge-augmented decoder, output heads
//! - [`matching`]: greedy and Hungarian assignment, label generation
//! - [`tracker`]: the online loop with hidden-state carry and track life management
//! - [`training`]: autoregressive clip training with sequence loss and BPTT
//! - [`metrics`]: CLEAR-MOT counts plus AMOTA/AMOTP with recall sweeping
//! - [`baselines`]: non-learned constant-velocity greedy tracker
//! - [`io`]: JSON-lines detection and tracking record formats

pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod simulator;
pub mod tracker;
pub mod training;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
