//! detlab: a desk-scale laboratory for object detection under noisy
//! instance-level supervision.
//!
//! The crate builds synthetic detection worlds whose proposal features are
//! learnable by linear heads, simulates the failure modes of a weak detector
//! (discriminative-part boxes, mislabels, drops, false positives), excavates
//! pseudo ground-truths from the noisy predictions, and then iterates two
//! refinement mechanisms over them:
//!
//! * localization adaptation ([`adapt`]): supervised training with an
//!   EMA-tracked outer-proposal regularizer that counteracts the collapse of
//!   regression targets onto discriminative parts;
//! * small-loss dataset splitting ([`split`]) feeding a tag-gated
//!   teacher-student semi-supervised stage ([`ssod`]).
//!
//! [`pipeline::run`] wires the phases end to end and reports toy mAP, CorLoc
//! and pseudo-label quality per iteration. Everything is deterministic given
//! the resolved configuration, independent of thread count.

pub mod adapt;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod geometry;
pub mod labelgen;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod split;
pub mod ssod;
pub mod synthworld;

pub use config::RunConfig;
pub use geometry::{box_ema, decode, encode, iou, nms, sample_outer_box, BBox, BoxDelta, Detection};
pub use labelgen::{excavate, Instance, PgeConfig};
pub use pipeline::{run, IterationReport, RunOutcome};
pub use synthworld::{generate_world, NoiseModel, World, WorldConfig};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("infeasible world config: {0}")]
    InfeasibleWorld(String),
    #[error("feature dimension mismatch: params expect {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("ground truth required: {0}")]
    GroundTruthRequired(String),
    #[error("no ground-truth boxes in evaluation set")]
    EmptyGroundTruth,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {msg}")]
    InvalidValue { key: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
