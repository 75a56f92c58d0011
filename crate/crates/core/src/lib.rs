//! Limited-view photoacoustic reconstruction with invertible loop-unrolled
//! networks.
//!
//! - [`wave`]: forward wave operator, its exact adjoint, acquisition and noise.
//! - [`inn`]: invertible coupling stages with constant-memory backpropagation.
//! - [`unroll`]: unrolled reconstruction and greedy per-stage training.
//! - [`baseline`]: matrix-free LSQR.
//! - [`data`]: phantoms, dataset persistence, metrics and image export.

pub mod baseline;
pub mod data;
pub mod inn;
pub mod unroll;
pub mod wave;
