//! Multi-view spatial-temporal graph convolution for sleep stage
//! classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape with a
//!   finite-difference gradient checker.
//! - [`graph`]: adjacency construction (learned functional connectivity,
//!   electrode distance, fixed baselines), scaled Laplacians and Chebyshev
//!   stacks.
//! - [`features`]: the two-branch 1-D CNN turning each channel's epoch into a
//!   node feature vector.
//! - [`stgcn`]: attention, Chebyshev graph convolution, temporal convolution,
//!   view fusion and the full model forward pass.
//! - [`domain`]: gradient reversal, classifier heads and the combined loss.
//! - [`train`] and [`metrics`]: optimizers, the training loop,
//!   subject-independent cross-validation and evaluation metrics.
//! - [`data`]: the binary dataset container, windowing, electrode layouts
//!   and a synthetic data generator.
//! - [`probe`]: a least-squares linear probe for measuring label content of
//!   features.

mod binio;
pub mod data;
pub mod domain;
pub mod features;
pub mod graph;
pub mod metrics;
pub mod params;
pub mod probe;
pub mod stgcn;
pub mod tensor;
pub mod train;

pub use tensor::{Tape, Tensor, TensorError, Var};

/// Whether a forward pass is part of training (batch statistics, dropout,
/// domain head) or inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Number of sleep stages (Wake, N1, N2, N3, REM).
pub const NUM_STAGES: usize = 5;

/// Stage names in label order.
pub const STAGE_NAMES: [&str; NUM_STAGES] = ["Wake", "N1", "N2", "N3", "REM"];
