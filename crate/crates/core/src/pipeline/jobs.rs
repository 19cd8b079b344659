use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::inference::StageSpecs;
use crate::tracking::{CostWeights, DEFAULT_GATE};

pub const DEFAULT_FAILURE_THRESHOLD: f64 = 0.1;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Completed,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::Running => "running",
            JobState::Completed => "completed",
            JobState::Failed => "failed",
            JobState::Cancelled => "cancelled",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Completed | JobState::Cancelled)
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The only state changes a job may make.
pub fn is_legal_transition(from: JobState, to: JobState) -> bool {
    use JobState::*;
    matches!(
        (from, to),
        (Queued, Running) | (Running, Completed) | (Running, Failed) | (Running, Cancelled) | (Queued, Cancelled) | (Failed, Queued)
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingConfig {
    pub weights: CostWeights,
    pub gate: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig { weights: CostWeights::default(), gate: DEFAULT_GATE }
    }
}

/// Everything that determines a job's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub stage_specs: StageSpecs,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub tracking: TrackingConfig,
    #[serde(default = "default_failure_threshold")]
    pub failure_threshold: f64,
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

fn default_failure_threshold() -> f64 {
    DEFAULT_FAILURE_THRESHOLD
}

impl JobSpec {
    pub fn new(stage_specs: StageSpecs) -> Self {
        JobSpec {
            stage_specs,
            top_k: DEFAULT_TOP_K,
            tracking: TrackingConfig::default(),
            failure_threshold: DEFAULT_FAILURE_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.stage_specs.validate().map_err(|e| PipelineError::Usage(e.to_string()))?;
        if self.top_k == 0 {
            return Err(PipelineError::Usage("top_k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_threshold) {
            return Err(PipelineError::Usage("failure_threshold must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.tracking.gate) {
            return Err(PipelineError::Usage("tracking gate must lie in [0, 1]".into()));
        }
        self.tracking.weights.normalized().map_err(|e| PipelineError::Usage(e.to_string()))?;
        Ok(())
    }
}

/// Idempotency key: hash of the session id and the canonical JSON of the spec.
pub fn job_id_for(session_id: &str, spec: &JobSpec) -> String {
    // serde_json::Value maps are sorted, so this is canonical
    let canonical = serde_json::to_value(spec).expect("specs serialize");
    let mut h = Sha256::new();
    h.update(session_id.as_bytes());
    h.update([0]);
    h.update(canonical.to_string().as_bytes());
    hex::encode(&h.finalize()[..8])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub frames_done: usize,
    pub frames_total: usize,
    pub frames_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub owner: String,
    /// Fencing token: strictly increasing across all claims in a table.
    pub token: u64,
    pub expires_at_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineJob {
    pub job_id: String,
    pub session_id: String,
    pub spec: JobSpec,
    pub state: JobState,
    pub progress: Progress,
    pub error: Option<String>,
    pub lease: Option<Lease>,
    /// Enqueue order; claims take the oldest queued job first.
    pub seq: u64,
    pub attempts: u32,
    /// Completion order, used to pick the newest results for a session.
    #[serde(default)]
    pub completed_seq: Option<u64>,
}

/// What a worker holds after a successful claim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Claim {
    pub job_id: String,
    pub token: u64,
    /// True when the claim took over an expired lease of a running job.
    pub takeover: bool,
}

/// In-memory job table. All time is passed in as epoch milliseconds so the
/// state machine is deterministic under test; the on-disk store wraps it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobTable {
    pub jobs: BTreeMap<String, PipelineJob>,
    pub next_seq: u64,
    pub next_token: u64,
    #[serde(default)]
    pub next_completed_seq: u64,
}

impl JobTable {
    pub fn get(&self, job_id: &str) -> Result<&PipelineJob, PipelineError> {
        self.jobs.get(job_id).ok_or_else(|| PipelineError::NotFound(format!("job {job_id}")))
    }

    fn get_mut(&mut self, job_id: &str) -> Result<&mut PipelineJob, PipelineError> {
        self.jobs.get_mut(job_id).ok_or_else(|| PipelineError::NotFound(format!("job {job_id}")))
    }

    /// Adds a job, or returns the existing one with the same idempotency key.
    pub fn enqueue(&mut self, session_id: &str, spec: JobSpec, frames_total: usize) -> Result<(String, bool), PipelineError> {
        spec.validate()?;
        let job_id = job_id_for(session_id, &spec);
        if self.jobs.contains_key(&job_id) {
            return Ok((job_id, false));
        }
        let job = PipelineJob {
            job_id: job_id.clone(),
            session_id: session_id.to_string(),
            spec,
            state: JobState::Queued,
            progress: Progress { frames_done: 0, frames_total, frames_failed: 0 },
            error: None,
            lease: None,
            seq: self.next_seq,
            attempts: 0,
            completed_seq: None,
        };
        self.next_seq += 1;
        self.jobs.insert(job_id.clone(), job);
        Ok((job_id, true))
    }

    fn set_state(job: &mut PipelineJob, to: JobState) -> Result<(), PipelineError> {
        if !is_legal_transition(job.state, to) {
            return Err(PipelineError::Conflict(format!("job {} cannot go from {} to {to}", job.job_id, job.state)));
        }
        job.state = to;
        Ok(())
    }

    /// Claims the oldest queued job, or else the oldest running job whose
    /// lease has expired.
    pub fn claim(&mut self, owner: &str, now_ms: i64, lease_ms: i64) -> Option<Claim> {
        let pick = |want: JobState, table: &JobTable| {
            table
                .jobs
                .values()
                .filter(|j| j.state == want)
                .filter(|j| want == JobState::Queued || j.lease.as_ref().map_or(true, |l| l.expires_at_ms <= now_ms))
                .min_by_key(|j| j.seq)
                .map(|j| j.job_id.clone())
        };
        let (job_id, takeover) = match pick(JobState::Queued, self) {
            Some(id) => (id, false),
            None => (pick(JobState::Running, self)?, true),
        };
        let token = self.next_token;
        self.next_token += 1;
        let job = self.jobs.get_mut(&job_id).expect("picked from table");
        if !takeover {
            Self::set_state(job, JobState::Running).expect("queued -> running is legal");
        }
        job.attempts += 1;
        job.lease = Some(Lease { owner: owner.to_string(), token, expires_at_ms: now_ms + lease_ms });
        Some(Claim { job_id, token, takeover })
    }

    /// Fencing check: the caller must hold the job's current, unexpired lease.
    pub fn check_lease(&self, job_id: &str, token: u64, now_ms: i64) -> Result<(), PipelineError> {
        let job = self.get(job_id)?;
        match (&job.state, &job.lease) {
            (JobState::Running, Some(l)) if l.token == token && l.expires_at_ms > now_ms => Ok(()),
            (JobState::Running, _) => Err(PipelineError::LeaseLost(job_id.to_string())),
            (state, _) => Err(PipelineError::Conflict(format!("job {job_id} is {state}"))),
        }
    }

    pub fn renew(&mut self, job_id: &str, token: u64, now_ms: i64, lease_ms: i64) -> Result<(), PipelineError> {
        self.check_lease(job_id, token, now_ms)?;
        let job = self.get_mut(job_id)?;
        job.lease.as_mut().expect("checked").expires_at_ms = now_ms + lease_ms;
        Ok(())
    }

    /// Records one more committed frame.
    pub fn record_frame(&mut self, job_id: &str, token: u64, now_ms: i64, failed: bool) -> Result<(), PipelineError> {
        self.check_lease(job_id, token, now_ms)?;
        let job = self.get_mut(job_id)?;
        if job.progress.frames_done >= job.progress.frames_total {
            return Err(PipelineError::Conflict(format!("job {job_id} has no frames left")));
        }
        job.progress.frames_done += 1;
        if failed {
            job.progress.frames_failed += 1;
        }
        Ok(())
    }

    pub fn complete(&mut self, job_id: &str, token: u64, now_ms: i64) -> Result<(), PipelineError> {
        self.check_lease(job_id, token, now_ms)?;
        let seq = self.next_completed_seq;
        let job = self.get_mut(job_id)?;
        if job.progress.frames_done != job.progress.frames_total {
            return Err(PipelineError::Conflict(format!(
                "job {job_id} has {} of {} frames",
                job.progress.frames_done, job.progress.frames_total
            )));
        }
        Self::set_state(job, JobState::Completed)?;
        job.lease = None;
        job.error = None;
        job.completed_seq = Some(seq);
        self.next_completed_seq += 1;
        Ok(())
    }

    pub fn fail(&mut self, job_id: &str, token: u64, now_ms: i64, error: String) -> Result<(), PipelineError> {
        self.check_lease(job_id, token, now_ms)?;
        let job = self.get_mut(job_id)?;
        Self::set_state(job, JobState::Failed)?;
        job.lease = None;
        job.error = Some(error);
        Ok(())
    }

    /// Cancels a queued or running job. A running worker notices at its
    /// next fencing check.
    pub fn cancel(&mut self, job_id: &str) -> Result<(), PipelineError> {
        let job = self.get_mut(job_id)?;
        Self::set_state(job, JobState::Cancelled)?;
        job.lease = None;
        Ok(())
    }

    /// Puts a failed job back in the queue. `failed_frames_dropped` is the
    /// number of failed frame records the caller removed from the ledger so
    /// they are attempted again.
    pub fn retry(&mut self, job_id: &str, failed_frames_dropped: usize) -> Result<(), PipelineError> {
        let job = self.get_mut(job_id)?;
        Self::set_state(job, JobState::Queued)?;
        let p = &mut job.progress;
        let dropped = failed_frames_dropped.min(p.frames_failed);
        p.frames_done -= dropped;
        p.frames_failed -= dropped;
        job.error = None;
        job.lease = None;
        Ok(())
    }

    /// Expires the leases of running jobs so they can be claimed now. With
    /// `force` every running lease is expired; otherwise only those already
    /// past expiry. Returns the affected job ids.
    pub fn resume(&mut self, now_ms: i64, force: bool) -> Vec<String> {
        let mut out = Vec::new();
        for job in self.jobs.values_mut() {
            if job.state != JobState::Running {
                continue;
            }
            if let Some(l) = job.lease.as_mut() {
                if force || l.expires_at_ms <= now_ms {
                    l.expires_at_ms = l.expires_at_ms.min(now_ms);
                    out.push(job.job_id.clone());
                }
            } else {
                out.push(job.job_id.clone());
            }
        }
        out
    }

    /// Violations of the table invariants; empty when consistent.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for j in self.jobs.values() {
            let p = j.progress;
            if p.frames_done > p.frames_total || p.frames_failed > p.frames_done {
                v.push(format!("{}: progress {p:?}", j.job_id));
            }
            if j.state == JobState::Completed && p.frames_done != p.frames_total {
                v.push(format!("{}: completed with {p:?}", j.job_id));
            }
            if j.state != JobState::Running && j.lease.is_some() {
                v.push(format!("{}: {} job holds a lease", j.job_id, j.state));
            }
            if let Some(l) = &j.lease {
                if l.token >= self.next_token {
                    v.push(format!("{}: token {} not yet issued", j.job_id, l.token));
                }
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{BackendKind, ModelSpec, Stage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(tag: &str) -> JobSpec {
        JobSpec::new(StageSpecs {
            detector: ModelSpec::new(Stage::Detector, BackendKind::Blob, "blob"),
            binary: ModelSpec::new(Stage::Binary, BackendKind::StubFixture, tag),
            species: None,
            life_stage: None,
        })
    }

    #[test]
    fn enqueue_is_idempotent() {
        let mut t = JobTable::default();
        let (a, created) = t.enqueue("s1", spec("f"), 10).unwrap();
        assert!(created);
        let (b, created) = t.enqueue("s1", spec("f"), 10).unwrap();
        assert!(!created);
        assert_eq!(a, b);
        let (c, _) = t.enqueue("s1", spec("g"), 10).unwrap();
        let (d, _) = t.enqueue("s2", spec("f"), 10).unwrap();
        assert!(a != c && a != d && c != d);
        assert_eq!(t.jobs.len(), 3);
    }

    #[test]
    fn happy_path_and_fencing() {
        let mut t = JobTable::default();
        let (id, _) = t.enqueue("s", spec("f"), 2).unwrap();
        let c = t.claim("w1", 0, 100).unwrap();
        assert!(!c.takeover);
        assert!(t.claim("w2", 10, 100).is_none());
        t.record_frame(&id, c.token, 10, false).unwrap();
        // lease expires; w2 takes over and w1 is fenced out
        let c2 = t.claim("w2", 200, 100).unwrap();
        assert!(c2.takeover && c2.token > c.token);
        assert!(matches!(t.record_frame(&id, c.token, 201, false), Err(PipelineError::LeaseLost(_))));
        assert!(matches!(t.complete(&id, c2.token, 201), Err(PipelineError::Conflict(_))));
        t.record_frame(&id, c2.token, 201, true).unwrap();
        t.complete(&id, c2.token, 202).unwrap();
        let j = t.get(&id).unwrap();
        assert_eq!(j.state, JobState::Completed);
        assert_eq!(j.progress, Progress { frames_done: 2, frames_total: 2, frames_failed: 1 });
        assert!(t.cancel(&id).is_err());
    }

    #[test]
    fn cancel_and_retry_rules() {
        let mut t = JobTable::default();
        let (id, _) = t.enqueue("s", spec("f"), 3).unwrap();
        t.cancel(&id).unwrap();
        assert_eq!(t.get(&id).unwrap().state, JobState::Cancelled);
        assert!(t.retry(&id, 0).is_err());
        assert!(t.claim("w", 0, 10).is_none());

        let (id, _) = t.enqueue("s", spec("g"), 3).unwrap();
        let c = t.claim("w", 0, 10).unwrap();
        t.record_frame(&id, c.token, 1, true).unwrap();
        t.fail(&id, c.token, 2, "boom".into()).unwrap();
        t.retry(&id, 1).unwrap();
        let j = t.get(&id).unwrap();
        assert_eq!((j.state, j.progress.frames_done, j.error.clone()), (JobState::Queued, 0, None));
    }

    #[test]
    fn resume_force_expires_live_leases() {
        let mut t = JobTable::default();
        let (id, _) = t.enqueue("s", spec("f"), 3).unwrap();
        t.claim("w", 0, 1_000_000).unwrap();
        assert!(t.resume(5, false).is_empty());
        assert_eq!(t.resume(5, true), vec![id]);
        assert!(t.claim("w2", 5, 10).unwrap().takeover);
    }

    /// Random scheduler over several workers. After every step the table
    /// must satisfy its invariants, every state change must be legal, and at
    /// most one worker may hold a valid lease on any job.
    #[test]
    fn randomized_state_machine() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE);
        let mut t = JobTable::default();
        let mut now = 0i64;
        let workers = ["w0", "w1", "w2", "w3"];
        let mut held: BTreeMap<&str, Claim> = BTreeMap::new();
        let steps = 100_000;
        let mut transitions = 0usize;
        let mut last: BTreeMap<String, JobState> = BTreeMap::new();
        for step in 0..steps {
            now += rng.gen_range(0..40);
            let w = workers[rng.gen_range(0..workers.len())];
            let pick = rng.gen_range(0..t.jobs.len().max(1));
            let any_job = |t: &JobTable| t.jobs.keys().nth(pick).cloned();
            match rng.gen_range(0..100) {
                0..=9 => {
                    let s = format!("s{}", rng.gen_range(0..200));
                    let _ = t.enqueue(&s, spec(&format!("m{}", rng.gen_range(0..3))), rng.gen_range(0..5));
                }
                10..=29 => {
                    if let Some(c) = t.claim(w, now, rng.gen_range(20..200)) {
                        held.insert(w, c);
                    }
                }
                30..=54 => {
                    if let Some(c) = held.get(w) {
                        let _ = t.record_frame(&c.job_id, c.token, now, rng.gen_bool(0.1));
                    }
                }
                55..=64 => {
                    if let Some(c) = held.get(w) {
                        if t.complete(&c.job_id, c.token, now).is_ok() {
                            held.remove(w);
                        }
                    }
                }
                65..=69 => {
                    if let Some(c) = held.get(w) {
                        let _ = t.fail(&c.job_id, c.token, now, "stage error".into());
                    }
                }
                70..=74 => {
                    if let Some(id) = any_job(&t) {
                        let _ = t.cancel(&id);
                    }
                }
                75..=79 => {
                    if let Some(id) = any_job(&t) {
                        let _ = t.retry(&id, rng.gen_range(0..3));
                    }
                }
                80..=84 => {
                    // crash: the worker forgets its claim
                    held.remove(w);
                }
                85..=89 => {
                    t.resume(now, rng.gen_bool(0.3));
                }
                _ => {
                    if let Some(c) = held.get(w) {
                        let _ = t.renew(&c.job_id, c.token, now, rng.gen_range(20..200));
                    }
                }
            }
            for (id, j) in &t.jobs {
                match last.get_mut(id) {
                    Some(prev) if *prev != j.state => {
                        transitions += 1;
                        assert!(is_legal_transition(*prev, j.state), "step {step}: {id} {prev} -> {}", j.state);
                        *prev = j.state;
                    }
                    Some(_) => {}
                    None => {
                        assert_eq!(j.state, JobState::Queued);
                        last.insert(id.clone(), j.state);
                    }
                }
            }
            assert!(t.invariant_violations().is_empty(), "step {step}: {:?}", t.invariant_violations());
            for id in t.jobs.keys() {
                let valid = held.values().filter(|c| &c.job_id == id && t.check_lease(id, c.token, now).is_ok()).count();
                assert!(valid <= 1, "step {step}: job {id} held by {valid} workers");
            }
        }
        assert!(transitions > 1000, "scheduler exercised only {transitions} transitions");
    }
}
