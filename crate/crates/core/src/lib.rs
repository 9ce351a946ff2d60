//! Conformable time-frequency masks for single-channel speech enhancement.
//!
//! The crate is organised bottom-up:
//!
//! - [`spectral`]: STFT analysis and weighted overlap-add synthesis.
//! - [`masks`]: the suppression-rule family (binary, Wiener, constrained
//!   Wiener, parametric Wiener, conformable), SNR fields and mask application.
//! - [`cost`]: the distortion trade-off cost and an independent numeric
//!   minimizer that checks the conformable mask is its optimum.
//! - [`morphology`]: RMSE between suppression curves and Nelder-Mead
//!   cross-fitting of the parametric Wiener and conformable families.
//! - [`metrics`]: normalized covariance metric (NCM), the quality/intelligibility
//!   composite distance and external quality-score ingestion.
//! - [`harness`]: SNR-controlled mixing, parameter grids, exhaustive search,
//!   median mapping and train/test experiments.
//!
//! ```
//! use maskbench_core::masks::MaskParams;
//!
//! let cm = MaskParams::conformable(1.0, 1.0).unwrap();
//! assert!((cm.gain(3.0) - 0.75).abs() < 1e-12);
//! ```

pub mod cost;
pub mod db;
mod error;
pub mod harness;
pub mod io;
pub mod masks;
pub mod metrics;
pub mod morphology;
pub mod optim;
pub mod spectral;
pub mod synth;

pub use cost::{CostParams, DistortionPair};
pub use error::{Error, Result};
pub use harness::{CorpusManifest, ExperimentPlan, TrialResult};
pub use masks::{GainMask, MaskKind, MaskParams, SnrField};
pub use metrics::MetricScore;
pub use morphology::CurveSpec;
pub use spectral::{AudioBuffer, Spectrogram, StftConfig, Window};
