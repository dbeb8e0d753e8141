//! Desk-scale chord-conditioned song-token generation.
//!
//! The crate bundles everything needed to study chord conditioning end to
//! end without audio models: a small autodiff tensor core, a 48-token chord
//! codec, the dual-path fusion mechanism with its concatenation and plain
//! cross-attention baselines, a frame-autoregressive dual-head decoder, a
//! synthetic training harness with controllable chord-label noise, and the
//! key-shift-aware similarity / Fréchet evaluation suite.

pub mod chord;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use tensor::{Dtype, Element, Tape, Tensor, TensorError, Var};
