//! Test-time adaptation of batch-normalized CNNs on label-correlated streams.
//!
//! The online loop ([`engine::AdaptationState`]) blends population and
//! first-batch normalization statistics, then updates only the BN affine
//! parameters by aligning per-sample channel statistics with statistics
//! extracted from source data ([`source::compute_source_stats`]), optionally
//! adding a confidence-masked entropy term. [`detector::ShiftDetector`] watches
//! the alignment loss and triggers a reset when the input domain changes.
//!
//! Tensors, kernels and reverse-mode differentiation are implemented in-crate
//! ([`tensor`], [`kernels`], [`autodiff`]); [`experiment`] wires everything into
//! configurable runs with CSV traces.

pub mod autodiff;
pub mod corrupt;
pub mod data;
pub mod detector;
pub mod engine;
pub mod experiment;
pub mod format;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod source;
pub mod stream;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use tensor::{Tensor, TensorError};
