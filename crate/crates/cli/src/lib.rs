//! `ami` command line. [`run`] is the whole program minus process exit, so
//! tests drive it in-process.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use ami_core::engine::{resolve_home, Engine, EngineConfig, ExportFormat, HOME_ENV};
use ami_core::fixtures;
use ami_core::inference::{BackendKind, ModelSpec, Stage, StageSpecs};
use ami_core::pipeline::{
    JobSpec, JobState, PipelineError, PipelineJob, RunOutcome, WorkerEvent, DEFAULT_FAILURE_THRESHOLD, DEFAULT_TOP_K,
    MODEL_LOAD_ERROR,
};
use ami_core::recipe;
use ami_core::tracking::DEFAULT_GATE;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ami", version, about = "Process insect camera-trap nights into tracked moth counts")]
pub struct Cli {
    /// Engine home directory.
    #[arg(long, global = true, env = HOME_ENV)]
    pub home: Option<PathBuf>,
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create or reconfigure the engine home.
    Init(InitArgs),
    /// Group images under ROOT/<deployment>/ into nightly sessions.
    Discover { root: PathBuf },
    /// List discovered sessions.
    Sessions {
        #[arg(long)]
        deployment: Option<String>,
    },
    /// Queue a session for processing.
    Enqueue(EnqueueArgs),
    /// Process queued jobs until the queue is empty.
    Work {
        #[arg(short = 'n', long = "workers", default_value_t = 1)]
        workers: usize,
    },
    /// Make jobs of dead workers claimable again.
    Resume {
        /// Also break live leases. Only safe when no worker is running.
        #[arg(long)]
        force: bool,
    },
    /// Show the queue, or one job.
    Status { job: Option<String> },
    /// Cancel a queued or running job.
    Cancel { job: String },
    /// Requeue a failed job; its failed frames run again.
    Retry { job: String },
    /// Export one row per tracked individual.
    Export {
        #[arg(long)]
        session: String,
        #[arg(long, default_value = "jsonl")]
        format: String,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List or register model specs.
    Models {
        #[command(subcommand)]
        action: Option<ModelsAction>,
    },
    /// Write the classifier training recipe into DIR.
    Recipe { dir: PathBuf },
    /// Write a small synthetic night with matching stub models into DIR.
    Demo {
        dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        frames: usize,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = ami_service::DEFAULT_BIND)]
        bind: String,
    },
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Taxonomy backbone CSV for genus/family rollups.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    pub utc_offset_minutes: i32,
    /// Regex with six groups: year, month, day, hour, minute, second.
    #[arg(long)]
    pub filename_pattern: Option<String>,
    /// Put images without EXIF or filename time in the unsorted bucket
    /// instead of using their modification time.
    #[arg(long)]
    pub no_mtime: bool,
    #[arg(long)]
    pub lease_ms: Option<i64>,
    #[arg(long)]
    pub frame_batch: Option<usize>,
}

/// Model arguments take `blob[:params]`, `stub:<fixture.json>` or
/// `onnx:<model.onnx>`.
#[derive(Debug, Args)]
pub struct EnqueueArgs {
    #[arg(long)]
    pub session: String,
    #[arg(long, default_value = "blob")]
    pub detector: String,
    #[arg(long)]
    pub binary: String,
    #[arg(long)]
    pub species: Option<String>,
    #[arg(long)]
    pub detector_threshold: Option<f64>,
    #[arg(long)]
    pub binary_threshold: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
    #[arg(long, default_value_t = DEFAULT_GATE)]
    pub gate: f64,
    #[arg(long, default_value_t = DEFAULT_FAILURE_THRESHOLD)]
    pub failure_threshold: f64,
}

#[derive(Debug, Subcommand)]
pub enum ModelsAction {
    Add {
        /// detector, binary, species or life_stage
        stage: String,
        model: String,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

pub fn parse_model(stage: Stage, value: &str) -> Result<ModelSpec, PipelineError> {
    let (backend, uri) = if value == "blob" || value.starts_with("blob:") {
        (BackendKind::Blob, value)
    } else if let Some(p) = value.strip_prefix("stub:") {
        (BackendKind::StubFixture, p)
    } else if let Some(p) = value.strip_prefix("onnx:") {
        (BackendKind::ExternalRuntime, p)
    } else {
        return Err(PipelineError::Usage(format!(
            "{stage} model {value:?} must be blob[:params], stub:<fixture.json> or onnx:<model.onnx>"
        )));
    };
    if uri.is_empty() {
        return Err(PipelineError::Usage(format!("{stage} model path is empty")));
    }
    Ok(ModelSpec::new(stage, backend, uri))
}

fn parse_stage(s: &str) -> Result<Stage, PipelineError> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| PipelineError::Usage(format!("unknown stage {s:?}")))
}

impl EnqueueArgs {
    pub fn job_spec(&self) -> Result<JobSpec, PipelineError> {
        let mut detector = parse_model(Stage::Detector, &self.detector)?;
        if let Some(t) = self.detector_threshold {
            detector = detector.with_threshold(t);
        }
        let mut binary = parse_model(Stage::Binary, &self.binary)?;
        if let Some(t) = self.binary_threshold {
            binary = binary.with_threshold(t);
        }
        let species = self.species.as_deref().map(|s| parse_model(Stage::Species, s)).transpose()?;
        let mut spec = JobSpec::new(StageSpecs { detector, binary, species, life_stage: None });
        spec.top_k = self.top_k;
        spec.tracking.gate = self.gate;
        spec.failure_threshold = self.failure_threshold;
        spec.validate()?;
        Ok(spec)
    }
}

struct Ctx<'a> {
    home: PathBuf,
    json: bool,
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

type CmdResult = Result<i32, PipelineError>;

fn io_err(e: std::io::Error) -> PipelineError {
    PipelineError::Io { path: "<stdout>".into(), source: e }
}

impl Ctx<'_> {
    fn engine(&self) -> Result<Engine, PipelineError> {
        Engine::open(&self.home)
    }

    fn print_json<T: serde::Serialize>(&mut self, v: &T) -> Result<(), PipelineError> {
        let s = serde_json::to_string_pretty(v).map_err(|e| PipelineError::Data(e.to_string()))?;
        writeln!(self.out, "{s}").map_err(io_err)
    }

    fn line(&mut self, s: impl AsRef<str>) -> Result<(), PipelineError> {
        writeln!(self.out, "{}", s.as_ref()).map_err(io_err)
    }
}

fn job_line(j: &PipelineJob) -> String {
    let p = j.progress;
    let failed = if p.frames_failed > 0 { format!(" ({} failed)", p.frames_failed) } else { String::new() };
    format!("{}  {:<9}  {}/{}{}  {}", j.job_id, j.state.as_str(), p.frames_done, p.frames_total, failed, j.session_id)
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                EXIT_OK
            } else {
                let _ = write!(err, "{e}");
                EXIT_USAGE
            };
        }
    };
    let mut ctx = Ctx { home: resolve_home(cli.home.as_deref()), json: cli.json, out, err };
    match dispatch(cli.command, &mut ctx) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(ctx.err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, ctx: &mut Ctx<'_>) -> CmdResult {
    match cmd {
        Command::Init(a) => init(a, ctx),
        Command::Discover { root } => discover(&root, ctx),
        Command::Sessions { deployment } => {
            let sessions = ctx.engine()?.sessions(deployment.as_deref())?;
            if ctx.json {
                let rows: Vec<_> = sessions
                    .iter()
                    .map(|s| serde_json::json!({"session_id": s.session_id, "deployment_id": s.deployment_id, "night_of": s.night_of, "frames": s.frames.len()}))
                    .collect();
                ctx.print_json(&rows)?;
            } else {
                for s in &sessions {
                    ctx.line(format!("{}  {} frames", s.session_id, s.frames.len()))?;
                }
            }
            Ok(EXIT_OK)
        }
        Command::Enqueue(a) => {
            let spec = a.job_spec()?;
            let engine = ctx.engine()?;
            let (id, created) = engine.enqueue(&a.session, spec)?;
            if ctx.json {
                ctx.print_json(&serde_json::json!({"job_id": id, "existing": !created}))?;
            } else {
                ctx.line(if created { id } else { format!("{id} (already queued)") })?;
            }
            Ok(EXIT_OK)
        }
        Command::Work { workers } => work(workers, ctx),
        Command::Resume { force } => {
            let ids = ctx.engine()?.resume(force)?;
            if ctx.json {
                ctx.print_json(&ids)?;
            } else if ids.is_empty() {
                ctx.line("no stranded jobs")?;
            } else {
                for id in ids {
                    ctx.line(format!("{id} claimable again"))?;
                }
            }
            Ok(EXIT_OK)
        }
        Command::Status { job } => {
            let engine = ctx.engine()?;
            match job {
                Some(id) => {
                    let j = engine.job(&id)?;
                    if ctx.json {
                        ctx.print_json(&j)?;
                    } else {
                        ctx.line(job_line(&j))?;
                        if let Some(e) = &j.error {
                            ctx.line(format!("error: {e}"))?;
                        }
                    }
                }
                None => {
                    let jobs = engine.jobs()?;
                    if ctx.json {
                        ctx.print_json(&jobs)?;
                    } else {
                        for j in &jobs {
                            ctx.line(job_line(j))?;
                        }
                    }
                }
            }
            Ok(EXIT_OK)
        }
        Command::Cancel { job } => {
            let j = ctx.engine()?.cancel(&job)?;
            ctx.line(job_line(&j))?;
            Ok(EXIT_OK)
        }
        Command::Retry { job } => {
            let j = ctx.engine()?.retry(&job)?;
            ctx.line(job_line(&j))?;
            Ok(EXIT_OK)
        }
        Command::Export { session, format, out } => {
            let format: ExportFormat = format.parse()?;
            let bytes = ctx.engine()?.export(&session, format)?;
            match out {
                Some(p) => ami_core::fsutil::write_atomic(&p, &bytes).map_err(|e| PipelineError::io(&p, e))?,
                None => ctx.out.write_all(&bytes).map_err(io_err)?,
            }
            Ok(EXIT_OK)
        }
        Command::Models { action } => {
            let engine = ctx.engine()?;
            if let Some(ModelsAction::Add { stage, model, threshold }) = action {
                let mut spec = parse_model(parse_stage(&stage)?, &model)?;
                if let Some(t) = threshold {
                    spec = spec.with_threshold(t);
                }
                engine.register_model(spec)?;
            }
            let models = engine.models()?;
            if ctx.json {
                ctx.print_json(&models)?;
            } else {
                for m in &models {
                    ctx.line(format!("{:<10} {:<16} {}  threshold {}", m.stage.to_string(), backend_name(m.backend), m.model_uri, m.threshold))?;
                }
            }
            Ok(EXIT_OK)
        }
        Command::Recipe { dir } => {
            std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
            let p = recipe::write_recipe(&dir).map_err(|e| PipelineError::io(&dir, e))?;
            ctx.line(p.display().to_string())?;
            Ok(EXIT_OK)
        }
        Command::Demo { dir, frames } => {
            let night = fixtures::write_night(&dir, "demo-trap", frames, &[]).map_err(|e| PipelineError::io(&dir, e))?;
            ctx.line(format!("images:   {}", night.root.display()))?;
            ctx.line(format!("backbone: {}", night.backbone_path.display()))?;
            ctx.line(format!("binary:   stub:{}", night.specs.binary.model_uri))?;
            if let Some(s) = &night.specs.species {
                ctx.line(format!("species:  stub:{}", s.model_uri))?;
            }
            Ok(EXIT_OK)
        }
        Command::Serve { bind } => {
            let addr = bind.parse().map_err(|e| PipelineError::Usage(format!("bind address {bind:?}: {e}")))?;
            let state = ami_service::AppState::new(ctx.engine()?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| PipelineError::Backend(e.to_string()))?;
            rt.block_on(ami_service::serve(addr, state)).map_err(|e| PipelineError::Backend(e.to_string()))?;
            Ok(EXIT_OK)
        }
    }
}

fn backend_name(b: BackendKind) -> &'static str {
    match b {
        BackendKind::Blob => "blob",
        BackendKind::StubFixture => "stub_fixture",
        BackendKind::ExternalRuntime => "external_runtime",
    }
}

fn init(a: InitArgs, ctx: &mut Ctx<'_>) -> CmdResult {
    let mut cfg = EngineConfig {
        utc_offset_minutes: a.utc_offset_minutes,
        use_mtime: !a.no_mtime,
        ..EngineConfig::default()
    };
    if let Some(b) = a.backbone {
        if !b.is_file() {
            return Err(PipelineError::Usage(format!("backbone {} does not exist", b.display())));
        }
        cfg.backbone = Some(std::fs::canonicalize(&b).map_err(|e| PipelineError::io(&b, e))?);
    }
    if let Some(p) = a.filename_pattern {
        cfg.filename_pattern = p;
    }
    if let Some(l) = a.lease_ms {
        cfg.lease_ms = l;
    }
    if let Some(n) = a.frame_batch {
        cfg.frame_batch = n;
    }
    if cfg.lease_ms <= 0 || cfg.frame_batch == 0 {
        return Err(PipelineError::Usage("lease_ms and frame_batch must be positive".into()));
    }
    let engine = Engine::init(&ctx.home, cfg)?;
    ctx.line(format!("initialized {}", engine.home().display()))?;
    Ok(EXIT_OK)
}

fn discover(root: &Path, ctx: &mut Ctx<'_>) -> CmdResult {
    if !root.is_dir() {
        return Err(PipelineError::Usage(format!("{} is not a directory", root.display())));
    }
    let d = ctx.engine()?.discover(root)?;
    for w in &d.warnings {
        writeln!(ctx.err, "warning: {w}").map_err(io_err)?;
    }
    if ctx.json {
        ctx.print_json(&d)?;
    } else {
        for s in &d.sessions {
            ctx.line(format!("{}  {} frames", s.session_id, s.frames.len()))?;
        }
        for (dep, files) in &d.unsorted {
            ctx.line(format!("{dep}: {} image(s) without a capture time", files.len()))?;
        }
    }
    Ok(EXIT_OK)
}

fn work(workers: usize, ctx: &mut Ctx<'_>) -> CmdResult {
    if workers == 0 {
        return Err(PipelineError::Usage("-n must be at least 1".into()));
    }
    let engine = ctx.engine()?;
    let quiet = ctx.json;
    let log_event = |e: &WorkerEvent| {
        if !quiet {
            match e {
                WorkerEvent::Claimed { job_id, takeover: true } => eprintln!("{job_id}: taking over from a dead worker"),
                WorkerEvent::Finished { job_id, state } => eprintln!("{job_id}: {state}"),
                _ => {}
            }
        }
    };
    let outcomes = engine.run_workers(workers, &log_event)?;
    let mut code = EXIT_OK;
    let mut finished = Vec::new();
    for o in &outcomes {
        if let RunOutcome::Finished { job_id, state } = o {
            let job = engine.job(job_id)?;
            if *state == JobState::Failed {
                let backend = job.error.as_deref().is_some_and(|e| e.starts_with(MODEL_LOAD_ERROR));
                code = code.max(if backend { EXIT_BACKEND } else { EXIT_DATA });
            }
            finished.push(job);
        }
    }
    if ctx.json {
        ctx.print_json(&finished)?;
    } else {
        for j in &finished {
            ctx.line(job_line(j))?;
            if let Some(e) = &j.error {
                ctx.line(format!("  error: {e}"))?;
            }
        }
    }
    Ok(code)
}
