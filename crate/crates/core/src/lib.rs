//! Forward-stability toolkit for post-activation residual networks.
//!
//! The crate builds two residual-network variants from scratch — one with an
//! elementwise-nonnegative second convolution (`ResNetD`), one with a
//! filter/adjoint pair (`ResNetS`) — and computes certificates for how much
//! their outputs can grow and how sensitive they are to input perturbations.
//! The same residual update is also integrated as a projected continuous-time
//! system, with explicit envelope bounds checked along every trajectory.
//!
//! Layout:
//!
//! - [`tensor`]: dense rank-3 features, rank-4 filters, vectorization, norms.
//! - [`conv`]: channel-wise and 2D convolution, padding, dense materialization,
//!   adjoints, and the filter/matrix norm relation.
//! - [`layer`]: ReLU, batch normalization (with affine folding), channel
//!   zero-padding, 2D and global average pooling.
//! - [`network`]: the full architecture, parameter stores, forward traces, and
//!   model serialization.
//! - [`cert`]: operator-norm estimation and stability certificates.
//! - [`inclusion`]: forward-backward splitting for the projected dynamics and
//!   its growth/sensitivity envelopes.
//! - [`train`]: softmax/cross-entropy objective, hand-written reverse-mode
//!   gradients, mini-batch gradient descent with projections.
//! - [`data`]: IDX ingestion and synthetic dataset generation.
//! - [`robustness`]: noise corruption and accuracy-vs-bound evaluation.
//! - [`oracle`]: brute-force dense-matrix reference suites.
//!
//! The tensor/convolution/layer core is generic over the scalar type; all
//! certificate-grade computation uses `f64` (see the aliases below).

// index-based loops over matrix rows/columns read better than iterator
// chains here, and layer maps genuinely take many tensors
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod cert;
pub mod conv;
pub mod data;
pub mod error;
pub mod inclusion;
pub mod layer;
pub mod network;
pub mod oracle;
pub mod robustness;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision feature; the only precision certificates are issued at.
pub type Feature64 = tensor::Feature<f64>;
/// Double-precision filter.
pub type Filter64 = tensor::Filter<f64>;
/// Single-precision feature, for cheap forward passes and cross-checks.
pub type Feature32 = tensor::Feature<f32>;
/// Single-precision filter.
pub type Filter32 = tensor::Filter<f32>;
