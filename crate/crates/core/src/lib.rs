//! Post-training quantization with blockwise error compensation.
//!
//! The crate quantizes weights and activations uniformly, fits closed-form
//! compensation modules per block (plain linear, or linear in a bipolar
//! logarithmic space), searches the transform's threshold exponent by
//! feature loss, and ships a small synthetic harness to exercise it all.

pub mod cli;
pub mod compensation;
pub mod error;
pub mod fls;
pub mod format;
pub mod harness;
pub mod numerics;
pub mod quantizer;
pub mod transform;

pub use compensation::{fit_linear, fit_nbc, store_params, CalibrationRecord, CompensationModule, Storage};
pub use error::{ConfigError, FormatError, NbcError, Result};
pub use fls::{compute_feature_loss, fls_search, holdout_split, FlsConfig, FlsResult, Termination};
pub use numerics::{matmul, solve_least_squares, Tensor};
pub use quantizer::{calibrate_params, dequantize, quantize, quantize_per_channel, QuantParams};
pub use transform::{BltTransform, TransformKind};
