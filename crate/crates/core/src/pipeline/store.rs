use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime};

use serde::{Deserialize, Serialize};

use super::jobs::{Claim, JobSpec, JobTable};
use super::session::Session;
use super::PipelineError;
use crate::fsutil;
use crate::inference::Detection;

const TABLE: &str = "table.json";
const LOCK: &str = "table.lock";
const LEDGER: &str = "ledger.jsonl";
const SESSION: &str = "session.json";
pub const OUTPUT_DIR: &str = "out";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const TRACKS_FILE: &str = "tracks.jsonl";
pub const COUNTS_FILE: &str = "counts.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStatus {
    Ok,
    Failed,
}

/// One committed frame. Holds nothing time- or worker-dependent so that
/// ledgers from interrupted and uninterrupted runs are identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub path: PathBuf,
    pub status: FrameStatus,
    #[serde(default)]
    pub width: u32,
    #[serde(default)]
    pub height: u32,
    #[serde(default)]
    pub detections: Vec<Detection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Persistent job queue under `<home>/jobs`: an atomically replaced table
/// snapshot guarded by an exclusive lock file, plus one append-only ledger
/// per job.
#[derive(Debug, Clone)]
pub struct JobStore {
    root: PathBuf,
    fsync: bool,
    lock_stale: Duration,
    lock_timeout: Duration,
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

pub fn now_ms() -> i64 {
    SystemTime::now().duration_since(SystemTime::UNIX_EPOCH).map_or(0, |d| d.as_millis() as i64)
}

impl JobStore {
    pub fn open(jobs_dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let root = jobs_dir.into();
        fsutil::ensure_writable_dir(&root).map_err(|e| PipelineError::io(&root, e))?;
        Ok(JobStore { root, fsync: true, lock_stale: Duration::from_secs(30), lock_timeout: Duration::from_secs(60) })
    }

    /// Skips fsync on ledger appends (tests and benchmarks only).
    pub fn without_fsync(mut self) -> Self {
        self.fsync = false;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn job_dir(&self, job_id: &str) -> PathBuf {
        self.root.join(job_id)
    }

    pub fn output_dir(&self, job_id: &str) -> PathBuf {
        self.job_dir(job_id).join(OUTPUT_DIR)
    }

    pub fn ledger_path(&self, job_id: &str) -> PathBuf {
        self.job_dir(job_id).join(LEDGER)
    }

    fn lock(&self) -> Result<LockGuard, PipelineError> {
        let path = self.root.join(LOCK);
        let start = Instant::now();
        loop {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(LockGuard(path));
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    // a holder that died leaves the file behind
                    let stale = std::fs::metadata(&path)
                        .and_then(|m| m.modified())
                        .ok()
                        .and_then(|t| t.elapsed().ok())
                        .is_some_and(|age| age > self.lock_stale);
                    if stale {
                        log::warn!("removing stale job table lock {}", path.display());
                        let _ = std::fs::remove_file(&path);
                        continue;
                    }
                    if start.elapsed() > self.lock_timeout {
                        return Err(PipelineError::Data(format!("timed out waiting for {}", path.display())));
                    }
                    std::thread::sleep(Duration::from_millis(2));
                }
                Err(e) => return Err(PipelineError::io(&path, e)),
            }
        }
    }

    pub fn read_table(&self) -> Result<JobTable, PipelineError> {
        let path = self.root.join(TABLE);
        match fsutil::read_to_string_opt(&path).map_err(|e| PipelineError::io(&path, e))? {
            Some(s) => serde_json::from_str(&s).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display()))),
            None => Ok(JobTable::default()),
        }
    }

    fn write_table(&self, table: &JobTable) -> Result<(), PipelineError> {
        let path = self.root.join(TABLE);
        fsutil::write_json_atomic(&path, table).map_err(|e| PipelineError::io(&path, e))
    }

    /// Applies `f` to the table under the lock; the snapshot is rewritten
    /// only if `f` succeeds and changed something.
    pub fn update<R>(&self, f: impl FnOnce(&mut JobTable) -> Result<R, PipelineError>) -> Result<R, PipelineError> {
        let _guard = self.lock()?;
        let before = self.read_table()?;
        let mut table = before.clone();
        let r = f(&mut table)?;
        if table != before {
            self.write_table(&table)?;
        }
        Ok(r)
    }

    pub fn enqueue(&self, session: &Session, spec: JobSpec) -> Result<(String, bool), PipelineError> {
        self.update(|t| {
            let (id, created) = t.enqueue(&session.session_id, spec, session.frames.len())?;
            if created {
                let dir = self.job_dir(&id);
                std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
                let p = dir.join(SESSION);
                fsutil::write_json_atomic(&p, session).map_err(|e| PipelineError::io(&p, e))?;
            }
            Ok((id, created))
        })
    }

    /// The session as it was when the job was enqueued.
    pub fn job_session(&self, job_id: &str) -> Result<Session, PipelineError> {
        let p = self.job_dir(job_id).join(SESSION);
        let s = std::fs::read_to_string(&p).map_err(|e| PipelineError::io(&p, e))?;
        serde_json::from_str(&s).map_err(|e| PipelineError::Data(format!("{}: {e}", p.display())))
    }

    /// Committed frame records. A trailing line without its newline is an
    /// interrupted append and is ignored.
    pub fn ledger(&self, job_id: &str) -> Result<Vec<FrameRecord>, PipelineError> {
        let path = self.ledger_path(job_id);
        let Some(text) = fsutil::read_to_string_opt(&path).map_err(|e| PipelineError::io(&path, e))? else {
            return Ok(Vec::new());
        };
        let complete = match text.rfind('\n') {
            Some(i) => &text[..=i],
            None => "",
        };
        complete
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| PipelineError::Data(format!("{}:{}: {e}", path.display(), i + 1))))
            .collect()
    }

    /// Cuts an interrupted trailing append off the ledger.
    fn repair_ledger(&self, path: &Path) -> Result<File, PipelineError> {
        let io = |e| PipelineError::io(path, e);
        let mut f = OpenOptions::new().read(true).append(true).create(true).open(path).map_err(io)?;
        let len = f.metadata().map_err(io)?.len();
        if len > 0 {
            let mut last = [0u8];
            f.seek(SeekFrom::Start(len - 1)).map_err(io)?;
            f.read_exact(&mut last).map_err(io)?;
            if last[0] != b'\n' {
                let mut all = Vec::new();
                f.seek(SeekFrom::Start(0)).map_err(io)?;
                f.read_to_end(&mut all).map_err(io)?;
                let keep = all.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                log::warn!("dropping {} bytes of interrupted ledger append in {}", all.len() - keep, path.display());
                f.set_len(keep as u64).map_err(io)?;
                f.sync_all().map_err(io)?;
            }
        }
        Ok(f)
    }

    /// Claims a job and repairs its ledger while still holding the lock.
    pub fn claim(&self, owner: &str, lease_ms: i64) -> Result<Option<Claim>, PipelineError> {
        self.update(|t| {
            let Some(c) = t.claim(owner, now_ms(), lease_ms) else { return Ok(None) };
            let dir = self.job_dir(&c.job_id);
            std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
            self.repair_ledger(&dir.join(LEDGER))?;
            Ok(Some(c))
        })
    }

    /// Appends one frame record (fsynced) and advances progress, both under
    /// the lock and only while the caller's lease is current. This is the
    /// commit point for a frame; the lease is renewed as a side effect.
    pub fn commit_frame(&self, claim: &Claim, record: &FrameRecord, lease_ms: i64) -> Result<(), PipelineError> {
        let mut line = serde_json::to_string(record).map_err(|e| PipelineError::Data(e.to_string()))?;
        line.push('\n');
        self.update(|t| {
            let now = now_ms();
            t.check_lease(&claim.job_id, claim.token, now)?;
            let path = self.ledger_path(&claim.job_id);
            let mut f = self.repair_ledger(&path)?;
            f.write_all(line.as_bytes()).map_err(|e| PipelineError::io(&path, e))?;
            if self.fsync {
                f.sync_data().map_err(|e| PipelineError::io(&path, e))?;
            }
            t.record_frame(&claim.job_id, claim.token, now, record.status == FrameStatus::Failed)?;
            t.renew(&claim.job_id, claim.token, now, lease_ms)
        })
    }

    pub fn renew(&self, claim: &Claim, lease_ms: i64) -> Result<(), PipelineError> {
        self.update(|t| t.renew(&claim.job_id, claim.token, now_ms(), lease_ms))
    }

    pub fn complete(&self, claim: &Claim) -> Result<(), PipelineError> {
        self.update(|t| t.complete(&claim.job_id, claim.token, now_ms()))
    }

    pub fn fail(&self, claim: &Claim, error: String) -> Result<(), PipelineError> {
        self.update(|t| t.fail(&claim.job_id, claim.token, now_ms(), error))
    }

    pub fn cancel(&self, job_id: &str) -> Result<(), PipelineError> {
        self.update(|t| t.cancel(job_id))
    }

    /// Requeues a failed job; its failed frame records are removed so the
    /// frames run again.
    pub fn retry(&self, job_id: &str) -> Result<(), PipelineError> {
        self.update(|t| {
            t.get(job_id)?;
            let kept: Vec<FrameRecord> =
                self.ledger(job_id)?.into_iter().filter(|r| r.status == FrameStatus::Ok).collect();
            let dropped = t.get(job_id)?.progress.frames_failed;
            t.retry(job_id, dropped)?;
            let path = self.ledger_path(job_id);
            fsutil::write_jsonl(&path, &kept).map_err(|e| PipelineError::io(&path, e))?;
            Ok(())
        })
    }

    pub fn resume(&self, force: bool) -> Result<Vec<String>, PipelineError> {
        self.update(|t| Ok(t.resume(now_ms(), force)))
    }
}
