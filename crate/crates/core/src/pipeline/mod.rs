//! Session discovery and the persistent job queue that runs the staged
//! pipeline and the tracker over whole nights.

mod jobs;
mod session;
mod store;
mod worker;

use std::path::Path;

pub use jobs::{
    is_legal_transition, job_id_for, Claim, JobSpec, JobState, JobTable, Lease, PipelineJob, Progress,
    TrackingConfig, DEFAULT_FAILURE_THRESHOLD, DEFAULT_TOP_K,
};
pub use session::{
    discover_sessions, night_of, session_id, DiscoverOptions, Discovery, Frame, Session, TimeSource,
    DEFAULT_FILENAME_PATTERN, UNSORTED,
};
pub use store::{
    now_ms, FrameRecord, FrameStatus, JobStore, COUNTS_FILE, DETECTIONS_FILE, OUTPUT_DIR, TRACKS_FILE,
};
pub use worker::{
    run_workers, write_outputs, RunOutcome, SessionCounts, StageLoader, Worker, WorkerEvent, WorkerOptions,
    DEFAULT_FRAME_BATCH, DEFAULT_LEASE_MS, MODEL_LOAD_ERROR,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("lease on job {0} was lost")]
    LeaseLost(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.display().to_string(), source }
    }

    /// Process exit status: 1 usage, 2 data, 3 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 1,
            PipelineError::Backend(_) => 3,
            _ => 2,
        }
    }
}

impl From<crate::tracking::TrackingError> for PipelineError {
    fn from(e: crate::tracking::TrackingError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<crate::inference::InferenceError> for PipelineError {
    fn from(e: crate::inference::InferenceError) -> Self {
        match e {
            crate::inference::InferenceError::Stage { .. } => PipelineError::Backend(e.to_string()),
            crate::inference::InferenceError::Input(m) => PipelineError::Data(m),
            crate::inference::InferenceError::Config(m) => PipelineError::Usage(m),
        }
    }
}

impl From<crate::taxonomy::TaxonomyError> for PipelineError {
    fn from(e: crate::taxonomy::TaxonomyError) -> Self {
        PipelineError::Data(e.to_string())
    }
}
