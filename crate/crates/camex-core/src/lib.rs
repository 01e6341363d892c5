//! Curvature-aware merging of sparse mixture-of-experts layers.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`autodiff`] / [`gradcheck`]: dense `f64` tensors, a
//!   tape-based reverse-mode differentiation graph, and a finite-difference
//!   oracle for checking it.
//! - [`moe`]: experts (two-matrix feed-forward blocks), expert banks, routers,
//!   and the vanilla top-k sparse forward pass.
//! - [`merge`]: expert-merging protocols over domain vectors: plain
//!   score-weighted merging, sign-election (TIES) and random-drop (DARE)
//!   masking, and the diagonal-Fisher baseline.
//! - [`curvature`]: learnable Kronecker-factored curvature transforms applied
//!   to domain vectors, the dense oracle for them, and the gradient and
//!   two-step identities they satisfy.
//! - [`segment`]: causal segment routing; scores for a segment come from the
//!   previous segment so merged weights never peek ahead.
//! - [`model`] / [`data`] / [`train`] / [`sweep`]: a desk-scale training
//!   harness over synthetic tasks that exercises all of the above end to end.
//! - [`io`]: checkpoint serialization and run configuration files.
//! - [`verify`]: runtime verification suites shared by the CLI and the
//!   acceptance tests.

pub mod autodiff;
pub mod curvature;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod merge;
pub mod model;
pub mod moe;
pub mod seeds;
pub mod segment;
pub mod sweep;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Graph, Var};
pub use error::{CamexError, Result};
pub use tensor::Tensor;
