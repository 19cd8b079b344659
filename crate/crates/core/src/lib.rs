//! Engine for turning insect camera-trap imagery into tracked, species-level
//! moth occurrence records.
//!
//! The crate is organised by processing stage:
//!
//! - [`taxonomy`]: regional checklist reconciliation against a taxonomy
//!   backbone, lineage walks and probability rollup to genus/family.
//! - [`dwca`]: Darwin Core Archive parsing, media fetching, cleaning rules and
//!   per-species capped training manifests.
//! - [`synthgen`]: copy-paste synthetic detection scenes with exact boxes.
//! - [`inference`]: detector → moth/non-moth → species stages over pluggable
//!   backends (blob baseline, canned stub fixtures, ONNX).
//! - [`tracking`]: four-factor assignment cost, gated linear sum assignment,
//!   per-session tracks and individual counts.
//! - [`pipeline`]: session discovery and the persistent, lease-based job queue.
//!
//! Batch operations run on rayon when the `parallel` feature is enabled (the
//! default); [`par::Execution`] selects the mode at runtime.

pub mod dwca;
pub mod engine;
pub mod fixtures;
pub mod fsutil;
pub mod hashing;
pub mod inference;
pub mod par;
pub mod pipeline;
pub mod recipe;
pub mod synthgen;
pub mod taxonomy;
pub mod tracking;

pub use hashing::ContentHash;
