//! Additive regression-tree ensembles whose posterior predictive is extended,
//! leaf by leaf, with Gaussian-process extrapolation for test points outside
//! the training range of the leaf they fall in.
//!
//! Modules, bottom-up:
//!
//! * [`data`], [`rng`], [`interval`], [`io`]: datasets, seeded streams,
//!   order-statistic intervals and CSV files.
//! * [`tree`]: grow-from-root tree sampling and conjugate leaf draws.
//! * [`ensemble`]: backfitting sweeps, constant-leaf prediction, model files.
//! * [`gpx`]: per-leaf exterior detection and GP extrapolation.
//! * [`conformal`]: Jackknife+ and CV+ baselines.
//! * [`causal`]: the two-forest causal model with overlap-aware extrapolation.
//! * [`bench`]: data-generating processes, metrics and the experiment runner.

pub mod bench;
pub mod causal;
pub mod conformal;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod gpx;
pub mod interval;
pub mod io;
pub mod rng;
pub mod tree;

pub use data::Dataset;
pub use error::{Error, ErrorKind, Result};
pub use interval::{empirical_interval, Interval};
pub use rng::RngStream;
