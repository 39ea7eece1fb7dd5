//! Core algorithms for one-template volumetric segmentation.
//!
//! A single annotated template volume is propagated to an unlabeled pool by
//! cosine similarity against class prototypes in a dense feature space. A
//! per-voxel specialist model is then retrained from scratch each round on
//! the current pseudo-labels, and the least certain predictions are replaced
//! by a similarity-weighted vote over their nearest certain neighbours.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, round-state
//! persistence and the command-line surface live in the `protoloop` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod error;
mod math;

pub mod encoder;
pub mod metrics;
pub mod phantom;
pub mod prototype;
pub mod refine;
pub mod specialist;
pub mod uncertainty;
pub mod volume;

pub use error::{Error, Result};
pub use math::{argmax, softmax_in_place};

/// Numerical-stability constant shared by prototype averaging and KNN voting.
pub const EPSILON: f64 = 1e-8;
