//! Interval-group spatial-spectral selective state-space classifier for
//! hyperspectral images.
//!
//! Layers, from the bottom up:
//!
//! - [`tensor`], [`autodiff`], [`params`]: dense tensors and a reverse-mode tape.
//! - [`ssm`]: the selective scan.
//! - [`igsm`]: interval channel grouping and four-directional scanning.
//! - [`network`]: operators, blocks and the full classifier.
//! - [`data`]: scene files, PCA, patches and splits.
//! - [`train`]: optimizer, metrics, training loop and map rendering.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod igsm;
pub mod kernels;
pub mod network;
pub mod params;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, FormatError, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};
