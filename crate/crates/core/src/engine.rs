//! Engine home: one directory holding configuration, the discovered session
//! index, the job store, the crop library and the model catalog. The CLI and
//! the HTTP service both go through [`Engine`], so they share one job state
//! machine.
//!
//! ```text
//! <home>/config.json
//! <home>/sessions.json
//! <home>/models.json
//! <home>/jobs/...
//! <home>/crops/...
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{FixedOffset, NaiveDateTime};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::fsutil;
use crate::inference::{BackendKind, ModelSpec, Stage};
use crate::pipeline::{
    discover_sessions, run_workers, DiscoverOptions, Discovery, FrameRecord, JobSpec, JobState, JobStore,
    PipelineError, PipelineJob, RunOutcome, SessionCounts, Session, StageLoader, WorkerEvent, WorkerOptions,
    COUNTS_FILE, DEFAULT_FILENAME_PATTERN, DEFAULT_FRAME_BATCH, DEFAULT_LEASE_MS, DETECTIONS_FILE, TRACKS_FILE,
};
use crate::synthgen::CropStore;
use crate::taxonomy::{Backbone, TaxonKey, UNCLASSIFIED_KEY};
use crate::tracking::{read_tracks_jsonl, TrackLine};

pub const HOME_ENV: &str = "AMI_HOME";
pub const DEFAULT_HOME: &str = ".ami";
const CONFIG_FILE: &str = "config.json";
const SESSIONS_FILE: &str = "sessions.json";
const MODELS_FILE: &str = "models.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Offset of the deployments' local time from UTC.
    pub utc_offset_minutes: i32,
    pub filename_pattern: String,
    pub use_mtime: bool,
    /// Taxonomy backbone CSV used for genus/family counts and lineage.
    pub backbone: Option<PathBuf>,
    pub lease_ms: i64,
    pub frame_batch: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            utc_offset_minutes: 0,
            filename_pattern: DEFAULT_FILENAME_PATTERN.to_string(),
            use_mtime: true,
            backbone: None,
            lease_ms: DEFAULT_LEASE_MS,
            frame_batch: DEFAULT_FRAME_BATCH,
        }
    }
}

impl EngineConfig {
    pub fn discover_options(&self) -> Result<DiscoverOptions, PipelineError> {
        let utc_offset = FixedOffset::east_opt(self.utc_offset_minutes * 60)
            .ok_or_else(|| PipelineError::Usage(format!("utc offset {} minutes out of range", self.utc_offset_minutes)))?;
        let filename_pattern = Regex::new(&self.filename_pattern)
            .map_err(|e| PipelineError::Usage(format!("filename pattern: {e}")))?;
        if filename_pattern.captures_len() < 7 {
            return Err(PipelineError::Usage("filename pattern needs six capture groups".into()));
        }
        Ok(DiscoverOptions { utc_offset, filename_pattern, use_mtime: self.use_mtime })
    }
}

/// Persisted result of the last discovery.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionIndex {
    pub root: PathBuf,
    pub sessions: Vec<Session>,
    pub unsorted: BTreeMap<String, Vec<PathBuf>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentSummary {
    pub deployment_id: String,
    pub sessions: usize,
    pub frames: usize,
    pub unsorted: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Jsonl,
    Csv,
}

impl std::str::FromStr for ExportFormat {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(ExportFormat::Jsonl),
            "csv" => Ok(ExportFormat::Csv),
            _ => Err(PipelineError::Usage(format!("unknown export format {s:?}, expected jsonl or csv"))),
        }
    }
}

/// One individual, as exported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccurrenceRow {
    pub session_id: String,
    pub deployment_id: String,
    pub night_of: String,
    pub track_id: u64,
    pub first_seen: NaiveDateTime,
    pub last_seen: NaiveDateTime,
    pub detections: usize,
    /// 0 when no species prediction is available.
    pub taxon_key: TaxonKey,
    pub scientific_name: String,
    pub probability: Option<f64>,
}

/// Every job-producing and result-reading operation, over one home directory.
#[derive(Clone)]
pub struct Engine {
    home: PathBuf,
    config: EngineConfig,
    store: JobStore,
    backbone: Option<Arc<Backbone>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("home", &self.home).finish_non_exhaustive()
    }
}

/// `--home` if given, else `$AMI_HOME`, else `./.ami`.
pub fn resolve_home(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(HOME_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_HOME))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, PipelineError> {
    match fsutil::read_to_string_opt(path).map_err(|e| PipelineError::io(path, e))? {
        None => Ok(None),
        Some(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display()))),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    fsutil::write_json_atomic(path, value).map_err(|e| PipelineError::io(path, e))
}

impl Engine {
    /// Opens `home`, creating it with a default config when absent.
    pub fn open(home: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let home = home.into();
        fsutil::ensure_writable_dir(&home).map_err(|e| PipelineError::io(&home, e))?;
        let cfg_path = home.join(CONFIG_FILE);
        let config = match read_json::<EngineConfig>(&cfg_path)? {
            Some(c) => c,
            None => {
                let c = EngineConfig::default();
                write_json(&cfg_path, &c)?;
                c
            }
        };
        Self::with_config(home, config)
    }

    pub fn init(home: impl Into<PathBuf>, config: EngineConfig) -> Result<Self, PipelineError> {
        let home = home.into();
        fsutil::ensure_writable_dir(&home).map_err(|e| PipelineError::io(&home, e))?;
        config.discover_options()?;
        write_json(&home.join(CONFIG_FILE), &config)?;
        Self::with_config(home, config)
    }

    fn with_config(home: PathBuf, config: EngineConfig) -> Result<Self, PipelineError> {
        config.discover_options()?;
        let backbone = match &config.backbone {
            Some(p) => {
                let p = if p.is_relative() { home.join(p) } else { p.clone() };
                Some(Arc::new(Backbone::load_csv(&p).map_err(|e| PipelineError::Data(format!("{}: {e}", p.display())))?))
            }
            None => None,
        };
        let store = JobStore::open(home.join("jobs"))?;
        Ok(Engine { home, config, store, backbone })
    }

    pub fn home(&self) -> &Path {
        &self.home
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn store(&self) -> &JobStore {
        &self.store
    }

    pub fn backbone(&self) -> Option<&Backbone> {
        self.backbone.as_deref()
    }

    /// Skips fsync on ledger writes; for tests.
    pub fn without_fsync(mut self) -> Self {
        self.store = self.store.without_fsync();
        self
    }

    // ---- sessions ----

    /// Scans `root` and replaces the stored session index.
    pub fn discover(&self, root: &Path) -> Result<Discovery, PipelineError> {
        let d = discover_sessions(root, &self.config.discover_options()?)?;
        let index = SessionIndex {
            root: root.to_path_buf(),
            sessions: d.sessions.clone(),
            unsorted: d.unsorted.clone(),
        };
        write_json(&self.home.join(SESSIONS_FILE), &index)?;
        Ok(d)
    }

    pub fn session_index(&self) -> Result<SessionIndex, PipelineError> {
        Ok(read_json(&self.home.join(SESSIONS_FILE))?.unwrap_or_default())
    }

    pub fn sessions(&self, deployment: Option<&str>) -> Result<Vec<Session>, PipelineError> {
        let mut s = self.session_index()?.sessions;
        if let Some(dep) = deployment {
            s.retain(|x| x.deployment_id == dep);
        }
        Ok(s)
    }

    pub fn session(&self, session_id: &str) -> Result<Session, PipelineError> {
        self.session_index()?
            .sessions
            .into_iter()
            .find(|s| s.session_id == session_id)
            .ok_or_else(|| PipelineError::NotFound(format!("session {session_id}")))
    }

    pub fn deployments(&self) -> Result<Vec<DeploymentSummary>, PipelineError> {
        let index = self.session_index()?;
        let mut out: BTreeMap<String, DeploymentSummary> = BTreeMap::new();
        let entry = |out: &mut BTreeMap<String, DeploymentSummary>, dep: &str| {
            out.entry(dep.to_string())
                .or_insert_with(|| DeploymentSummary { deployment_id: dep.to_string(), sessions: 0, frames: 0, unsorted: 0 })
                .clone()
        };
        for s in &index.sessions {
            entry(&mut out, &s.deployment_id);
            let d = out.get_mut(&s.deployment_id).expect("inserted");
            d.sessions += 1;
            d.frames += s.frames.len();
        }
        for (dep, files) in &index.unsorted {
            entry(&mut out, dep);
            out.get_mut(dep).expect("inserted").unsorted += files.len();
        }
        Ok(out.into_values().collect())
    }

    // ---- jobs ----

    /// Enqueues a job for a known session; an unknown session is a usage
    /// error. Returns the job id and whether it was newly created.
    pub fn enqueue(&self, session_id: &str, spec: JobSpec) -> Result<(String, bool), PipelineError> {
        let session = self.session(session_id).map_err(|e| match e {
            PipelineError::NotFound(m) => PipelineError::Usage(format!("unknown {m}")),
            other => other,
        })?;
        self.store.enqueue(&session, spec)
    }

    /// Jobs in queue order.
    pub fn jobs(&self) -> Result<Vec<PipelineJob>, PipelineError> {
        let t = self.store.read_table()?;
        let mut jobs: Vec<PipelineJob> = t.jobs.into_values().collect();
        jobs.sort_by_key(|j| j.seq);
        Ok(jobs)
    }

    pub fn job(&self, job_id: &str) -> Result<PipelineJob, PipelineError> {
        Ok(self.store.read_table()?.get(job_id)?.clone())
    }

    pub fn cancel(&self, job_id: &str) -> Result<PipelineJob, PipelineError> {
        self.store.cancel(job_id)?;
        self.job(job_id)
    }

    pub fn retry(&self, job_id: &str) -> Result<PipelineJob, PipelineError> {
        self.store.retry(job_id)?;
        self.job(job_id)
    }

    /// Makes running jobs whose workers died claimable again. With `force`,
    /// live leases are broken too; use it only when no worker is running.
    pub fn resume(&self, force: bool) -> Result<Vec<String>, PipelineError> {
        self.store.resume(force)
    }

    pub fn worker_options(&self) -> WorkerOptions {
        WorkerOptions { lease_ms: self.config.lease_ms, frame_batch: self.config.frame_batch, ..WorkerOptions::default() }
    }

    pub fn run_workers(
        &self,
        n: usize,
        on_event: &(dyn Fn(&WorkerEvent) + Sync),
    ) -> Result<Vec<RunOutcome>, PipelineError> {
        self.run_workers_with(n, None, on_event)
    }

    pub fn run_workers_with(
        &self,
        n: usize,
        loader: Option<Arc<StageLoader>>,
        on_event: &(dyn Fn(&WorkerEvent) + Sync),
    ) -> Result<Vec<RunOutcome>, PipelineError> {
        run_workers(&self.store, n, &self.worker_options(), loader, self.backbone.clone(), on_event)
    }

    // ---- results ----

    /// Most recently completed job for the session.
    pub fn result_job(&self, session_id: &str) -> Result<PipelineJob, PipelineError> {
        self.store
            .read_table()?
            .jobs
            .into_values()
            .filter(|j| j.session_id == session_id && j.state == JobState::Completed)
            .max_by_key(|j| j.completed_seq)
            .ok_or_else(|| PipelineError::NotFound(format!("completed results for session {session_id}")))
    }

    fn output_file(&self, session_id: &str, name: &str) -> Result<PathBuf, PipelineError> {
        Ok(self.store.output_dir(&self.result_job(session_id)?.job_id).join(name))
    }

    pub fn detections(&self, session_id: &str) -> Result<Vec<FrameRecord>, PipelineError> {
        let p = self.output_file(session_id, DETECTIONS_FILE)?;
        fsutil::read_jsonl(&p).map_err(|e| PipelineError::io(&p, e))
    }

    pub fn tracks(&self, session_id: &str) -> Result<Vec<TrackLine>, PipelineError> {
        Ok(read_tracks_jsonl(&self.output_file(session_id, TRACKS_FILE)?)?)
    }

    pub fn counts(&self, session_id: &str) -> Result<SessionCounts, PipelineError> {
        let p = self.output_file(session_id, COUNTS_FILE)?;
        read_json(&p)?.ok_or_else(|| PipelineError::NotFound(format!("{}", p.display())))
    }

    pub fn occurrences(&self, session_id: &str) -> Result<Vec<OccurrenceRow>, PipelineError> {
        let session = self.session(session_id)?;
        let tracks = self.tracks(session_id)?;
        let time = |i: usize| {
            session
                .frames
                .get(i)
                .map(|f| f.capture_time)
                .ok_or_else(|| PipelineError::Data(format!("track refers to frame {i} beyond session {session_id}")))
        };
        let mut rows = Vec::with_capacity(tracks.len());
        for line in tracks {
            let t = line.track;
            let (first, last) = match (t.items.first(), t.items.last()) {
                (Some(a), Some(b)) => (a.frame_index, b.frame_index),
                _ => continue,
            };
            let taxon_key = t.consensus.map_or(UNCLASSIFIED_KEY, |c| c.taxon_key);
            let scientific_name = self
                .backbone()
                .and_then(|b| b.get(taxon_key))
                .map(|r| r.scientific_name.clone())
                .unwrap_or_default();
            rows.push(OccurrenceRow {
                session_id: session.session_id.clone(),
                deployment_id: session.deployment_id.clone(),
                night_of: session.night_of.to_string(),
                track_id: t.track_id,
                first_seen: time(first)?,
                last_seen: time(last)?,
                detections: t.items.len(),
                taxon_key,
                scientific_name,
                probability: t.consensus.map(|c| c.probability),
            });
        }
        Ok(rows)
    }

    pub fn export(&self, session_id: &str, format: ExportFormat) -> Result<Vec<u8>, PipelineError> {
        let rows = self.occurrences(session_id)?;
        match format {
            ExportFormat::Jsonl => {
                let mut out = Vec::new();
                for r in &rows {
                    serde_json::to_writer(&mut out, r).map_err(|e| PipelineError::Data(e.to_string()))?;
                    out.push(b'\n');
                }
                Ok(out)
            }
            ExportFormat::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                for r in &rows {
                    w.serialize(r).map_err(|e| PipelineError::Data(e.to_string()))?;
                }
                w.into_inner().map_err(|e| PipelineError::Data(e.to_string()))
            }
        }
    }

    // ---- models and crops ----

    /// Model catalog; always includes the built-in blob detector.
    pub fn models(&self) -> Result<Vec<ModelSpec>, PipelineError> {
        let mut models: Vec<ModelSpec> = read_json(&self.home.join(MODELS_FILE))?.unwrap_or_default();
        let blob = ModelSpec::new(Stage::Detector, BackendKind::Blob, "blob");
        if !models.iter().any(|m| m.backend == BackendKind::Blob && m.model_uri == "blob") {
            models.insert(0, blob);
        }
        Ok(models)
    }

    /// Adds or replaces (by stage and uri) a catalog entry.
    pub fn register_model(&self, spec: ModelSpec) -> Result<(), PipelineError> {
        spec.validate().map_err(|e| PipelineError::Usage(e.to_string()))?;
        let path = self.home.join(MODELS_FILE);
        let mut models: Vec<ModelSpec> = read_json(&path)?.unwrap_or_default();
        models.retain(|m| !(m.stage == spec.stage && m.model_uri == spec.model_uri));
        models.push(spec);
        write_json(&path, &models)
    }

    pub fn crops_dir(&self) -> PathBuf {
        self.home.join("crops")
    }

    pub fn crops(&self) -> Result<CropStore, PipelineError> {
        let dir = self.crops_dir();
        fsutil::ensure_writable_dir(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        CropStore::open(dir).map_err(|e| PipelineError::Data(e.to_string()))
    }
}
