//! Deterministic tooling for defect-segmentation datasets.
//!
//! The crate covers the data side of a segmentation project: loading paired
//! image/mask datasets, near-duplicate filtering between splits, joint
//! image/mask augmentation, dynamic label injection (cut-paste and Poisson
//! seamless cloning) for batch balancing, episodic few-shot sampling with a
//! prototype prediction head, losses, evaluation metrics, and closed-form
//! layer cost arithmetic.
//!
//! Every stochastic operation takes an explicit seed and derives per-item RNG
//! streams from it, so results do not depend on thread scheduling.
// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod data;
pub mod dedup;
pub mod dli;
pub mod episodic;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod netcost;
pub mod protohead;
pub mod seed;
pub mod split;

pub use data::{
    class_distribution, normalize_ciw, CiwTable, ClassDistribution, Dataset, ImageBuffer,
    MaskBuffer, Sample,
};
pub use error::{Error, Result};

/// Seed used by every command when none is given.
pub const DEFAULT_SEED: u64 = 42;

/// Number of defect classes in the culvert/sewer label set (background excluded).
pub const DEFAULT_NUM_CLASSES: u8 = 8;
