use std::collections::BTreeSet;
use std::ops::ControlFlow;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::jobs::{Claim, JobState};
use super::store::{FrameRecord, FrameStatus, JobStore, COUNTS_FILE, DETECTIONS_FILE, TRACKS_FILE};
use super::PipelineError;
use crate::fsutil;
use crate::inference::{load_image, Detection, InferenceError, LoadedStages, StageSpecs};
use crate::par::Execution;
use crate::taxonomy::{Backbone, TaxonKey};
use crate::tracking::{count_individuals, track_session, write_tracks_jsonl, SpeciesCounts, Track};

pub const DEFAULT_LEASE_MS: i64 = 60_000;
pub const DEFAULT_FRAME_BATCH: usize = 8;
/// Prefix of the job error recorded when the stage models fail to load.
pub const MODEL_LOAD_ERROR: &str = "loading models";

pub type StageLoader = dyn Fn(&StageSpecs) -> Result<LoadedStages, InferenceError> + Send + Sync;

#[derive(Debug, Clone)]
pub struct WorkerOptions {
    pub owner: String,
    pub lease_ms: i64,
    /// Frames run concurrently per batch; commits stay in frame order.
    pub frame_batch: usize,
    pub exec: Execution,
}

impl Default for WorkerOptions {
    fn default() -> Self {
        WorkerOptions {
            owner: format!("pid{}", std::process::id()),
            lease_ms: DEFAULT_LEASE_MS,
            frame_batch: DEFAULT_FRAME_BATCH,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum WorkerEvent {
    Claimed { job_id: String, takeover: bool },
    FrameCommitted { job_id: String, frame_index: usize, frames_done: usize, frames_total: usize, failed: bool },
    Finished { job_id: String, state: JobState },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunOutcome {
    /// Nothing to claim.
    Idle,
    Finished { job_id: String, state: JobState },
    /// The event callback asked to stop; the lease is left to expire as if
    /// the worker had died.
    Stopped { job_id: String },
    /// Another worker took the job over, or it was cancelled.
    Lost { job_id: String },
}

/// Per-session summary written next to the tracks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCounts {
    pub session_id: String,
    pub frames: usize,
    pub frames_failed: usize,
    pub detections: usize,
    pub moth_detections: usize,
    pub tracks: usize,
    /// Genus and family maps are empty when no backbone is configured.
    pub counts: SpeciesCounts,
}

pub struct Worker {
    store: JobStore,
    options: WorkerOptions,
    loader: Arc<StageLoader>,
    backbone: Option<Arc<Backbone>>,
}

fn default_loader() -> Arc<StageLoader> {
    Arc::new(|specs: &StageSpecs| LoadedStages::load(specs))
}

impl Worker {
    pub fn new(store: JobStore, options: WorkerOptions) -> Self {
        Worker { store, options, loader: default_loader(), backbone: None }
    }

    pub fn with_loader(mut self, loader: Arc<StageLoader>) -> Self {
        self.loader = loader;
        self
    }

    pub fn with_backbone(mut self, backbone: Option<Arc<Backbone>>) -> Self {
        self.backbone = backbone;
        self
    }

    /// Claims and processes at most one job.
    pub fn run_once(&self, on_event: &mut dyn FnMut(&WorkerEvent) -> ControlFlow<()>) -> Result<RunOutcome, PipelineError> {
        let Some(claim) = self.store.claim(&self.options.owner, self.options.lease_ms)? else {
            return Ok(RunOutcome::Idle);
        };
        if on_event(&WorkerEvent::Claimed { job_id: claim.job_id.clone(), takeover: claim.takeover }).is_break() {
            return Ok(RunOutcome::Stopped { job_id: claim.job_id });
        }
        match self.process(&claim, on_event) {
            Err(PipelineError::LeaseLost(_)) => Ok(RunOutcome::Lost { job_id: claim.job_id }),
            Err(PipelineError::Conflict(m)) => {
                // cancelled under us, or a stale finish
                log::info!("job {} stopped: {m}", claim.job_id);
                Ok(RunOutcome::Lost { job_id: claim.job_id })
            }
            other => other,
        }
    }

    /// Processes jobs until the queue has nothing claimable.
    pub fn run_until_idle(
        &self,
        on_event: &mut dyn FnMut(&WorkerEvent) -> ControlFlow<()>,
    ) -> Result<Vec<RunOutcome>, PipelineError> {
        let mut out = Vec::new();
        loop {
            match self.run_once(on_event)? {
                RunOutcome::Idle => return Ok(out),
                o @ RunOutcome::Stopped { .. } => {
                    out.push(o);
                    return Ok(out);
                }
                o => out.push(o),
            }
        }
    }

    fn process(
        &self,
        claim: &Claim,
        on_event: &mut dyn FnMut(&WorkerEvent) -> ControlFlow<()>,
    ) -> Result<RunOutcome, PipelineError> {
        let job = self.store.read_table()?.get(&claim.job_id)?.clone();
        let session = self.store.job_session(&claim.job_id)?;
        let committed: BTreeSet<usize> = self.store.ledger(&claim.job_id)?.iter().map(|r| r.frame_index).collect();
        let pending: Vec<usize> = (0..session.frames.len()).filter(|i| !committed.contains(i)).collect();

        let stages = if pending.is_empty() {
            None
        } else {
            match (self.loader)(&job.spec.stage_specs) {
                Ok(s) => Some(s),
                Err(e) => {
                    self.store.fail(claim, format!("{MODEL_LOAD_ERROR}: {e}"))?;
                    let _ = on_event(&WorkerEvent::Finished { job_id: claim.job_id.clone(), state: JobState::Failed });
                    return Ok(RunOutcome::Finished { job_id: claim.job_id.clone(), state: JobState::Failed });
                }
            }
        };

        let mut done = committed.len();
        for batch in pending.chunks(self.options.frame_batch.max(1)) {
            let stages = stages.as_ref().expect("loaded when frames are pending");
            let records = self.options.exec.map_slice(batch, |&i| {
                run_frame(stages, i, &session.frames[i].path, job.spec.top_k)
            });
            for record in records {
                self.store.commit_frame(claim, &record, self.options.lease_ms)?;
                done += 1;
                let ev = WorkerEvent::FrameCommitted {
                    job_id: claim.job_id.clone(),
                    frame_index: record.frame_index,
                    frames_done: done,
                    frames_total: session.frames.len(),
                    failed: record.status == FrameStatus::Failed,
                };
                if on_event(&ev).is_break() {
                    return Ok(RunOutcome::Stopped { job_id: claim.job_id.clone() });
                }
            }
        }

        let ledger = self.store.ledger(&claim.job_id)?;
        let failed = ledger.iter().filter(|r| r.status == FrameStatus::Failed).count();
        let total = session.frames.len();
        let state = if total > 0 && failed as f64 / total as f64 > job.spec.failure_threshold {
            self.store.fail(claim, format!("{failed} of {total} frames failed"))?;
            JobState::Failed
        } else {
            self.store.renew(claim, self.options.lease_ms)?;
            let out = self.store.output_dir(&claim.job_id);
            write_outputs(&out, &session.session_id, ledger, &job.spec, self.backbone.as_deref(), self.options.exec)?;
            self.store.complete(claim)?;
            JobState::Completed
        };
        let _ = on_event(&WorkerEvent::Finished { job_id: claim.job_id.clone(), state });
        Ok(RunOutcome::Finished { job_id: claim.job_id.clone(), state })
    }
}

fn run_frame(stages: &LoadedStages, frame_index: usize, path: &Path, k: usize) -> FrameRecord {
    let failed = |error: String, w: u32, h: u32| FrameRecord {
        frame_index,
        path: path.to_path_buf(),
        status: FrameStatus::Failed,
        width: w,
        height: h,
        detections: Vec::new(),
        error: Some(error),
    };
    let image = match load_image(path) {
        Ok(img) => img,
        Err(e) => return failed(e.to_string(), 0, 0),
    };
    let (w, h) = image.dimensions();
    match stages.run(&image, k) {
        Ok(detections) => FrameRecord {
            frame_index,
            path: path.to_path_buf(),
            status: FrameStatus::Ok,
            width: w,
            height: h,
            detections,
            error: None,
        },
        Err(e) => failed(e.to_string(), w, h),
    }
}

/// Writes detections, tracks and counts for a finished session. Failed
/// frames are left out of tracking, so tracks may bridge them.
pub fn write_outputs(
    out_dir: &Path,
    session_id: &str,
    mut ledger: Vec<FrameRecord>,
    spec: &super::jobs::JobSpec,
    backbone: Option<&Backbone>,
    exec: Execution,
) -> Result<SessionCounts, PipelineError> {
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    ledger.sort_by_key(|r| r.frame_index);
    let det_path = out_dir.join(DETECTIONS_FILE);
    fsutil::write_jsonl(&det_path, &ledger).map_err(|e| PipelineError::io(&det_path, e))?;

    let ok: Vec<&FrameRecord> = ledger.iter().filter(|r| r.status == FrameStatus::Ok).collect();
    let frames: Vec<Vec<Detection>> =
        ok.iter().map(|r| r.detections.iter().filter(|d| d.is_moth()).cloned().collect()).collect();
    let diag = ok.first().map_or(1.0, |r| (r.width as f64).hypot(r.height as f64).max(1.0));
    let weights = spec.tracking.weights.normalized()?;
    let mut tracks: Vec<Track> = track_session(&frames, &weights, spec.tracking.gate, diag, exec)?;
    for t in &mut tracks {
        for item in &mut t.items {
            item.frame_index = ok[item.frame_index].frame_index;
        }
    }
    write_tracks_jsonl(&out_dir.join(TRACKS_FILE), session_id, &tracks)?;

    let counts = match backbone {
        Some(bb) => count_individuals(&tracks, bb)?,
        None => {
            let mut c = SpeciesCounts::default();
            for t in &tracks {
                let key: TaxonKey = t.consensus.map_or(crate::taxonomy::UNCLASSIFIED_KEY, |c| c.taxon_key);
                *c.species.entry(key).or_default() += 1;
            }
            c
        }
    };
    let summary = SessionCounts {
        session_id: session_id.to_string(),
        frames: ledger.len(),
        frames_failed: ledger.len() - ok.len(),
        detections: ok.iter().map(|r| r.detections.len()).sum(),
        moth_detections: frames.iter().map(Vec::len).sum(),
        tracks: tracks.len(),
        counts,
    };
    let counts_path = out_dir.join(COUNTS_FILE);
    fsutil::write_json_atomic(&counts_path, &summary).map_err(|e| PipelineError::io(&counts_path, e))?;
    Ok(summary)
}

/// Runs `n` workers on their own threads until the queue is drained.
pub fn run_workers(
    store: &JobStore,
    n: usize,
    options: &WorkerOptions,
    loader: Option<Arc<StageLoader>>,
    backbone: Option<Arc<Backbone>>,
    on_event: &(dyn Fn(&WorkerEvent) + Sync),
) -> Result<Vec<RunOutcome>, PipelineError> {
    if n == 0 {
        return Err(PipelineError::Usage("worker count must be positive".into()));
    }
    let results: Vec<Result<Vec<RunOutcome>, PipelineError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|i| {
                let mut opts = options.clone();
                opts.owner = format!("{}-{i}", options.owner);
                let mut w = Worker::new(store.clone(), opts).with_backbone(backbone.clone());
                if let Some(l) = &loader {
                    w = w.with_loader(l.clone());
                }
                s.spawn(move || {
                    w.run_until_idle(&mut |e| {
                        on_event(e);
                        ControlFlow::Continue(())
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
    });
    let mut all = Vec::new();
    for r in results {
        all.extend(r?);
    }
    Ok(all)
}
