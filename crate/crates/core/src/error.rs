//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape violation: {0}")]
    ShapeViolation(String),

    #[error("unknown backbone profile: {0}")]
    UnknownProfile(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("resolution mismatch: expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    ResolutionMismatch {
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },

    #[error("image too small for {needed}x{needed} window: {h}x{w}")]
    ImageTooSmall { h: usize, w: usize, needed: usize },

    #[error("ground truth is empty (no foreground pixels): {id}")]
    EmptyGroundTruth { id: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("mask not found in store: {id}")]
    MaskNotFound { id: String },

    #[error("pseudo-mask epoch regression for {id}: {got} < {have}")]
    EpochRegression { id: String, have: u32, got: u32 },

    #[error("missing directory: {0}")]
    MissingDirectory(PathBuf),

    #[error("orphan image (no mask with same stem): {stem}")]
    OrphanImage { stem: String },

    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("batch size {batch} exceeds dataset size {dataset}")]
    BatchTooLarge { batch: usize, dataset: usize },

    #[error("missing pseudo mask for train image: {id}")]
    MissingPseudoMask { id: String },

    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: usize, what: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dense feature file error: {0}")]
    DenseFeatures(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
