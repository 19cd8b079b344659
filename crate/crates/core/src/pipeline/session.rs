use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, FixedOffset, NaiveDate, NaiveDateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::PipelineError;

pub const UNSORTED: &str = "unsorted";
pub const DEFAULT_FILENAME_PATTERN: &str = r"(\d{4})(\d{2})(\d{2})[-_T]?(\d{2})(\d{2})(\d{2})";
const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSource {
    Exif,
    Filename,
    Mtime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub path: PathBuf,
    /// Local wall-clock time at the deployment.
    pub capture_time: NaiveDateTime,
    pub time_source: TimeSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub deployment_id: String,
    pub night_of: NaiveDate,
    pub frames: Vec<Frame>,
}

impl Session {
    pub fn frame_id(&self, index: usize) -> String {
        format!("{}:{index}", self.session_id)
    }
}

#[derive(Debug, Clone)]
pub struct DiscoverOptions {
    /// UTC offset of the deployments' local time.
    pub utc_offset: FixedOffset,
    /// Six capture groups: year, month, day, hour, minute, second.
    pub filename_pattern: Regex,
    /// Fall back to file modification time when no other timestamp exists.
    pub use_mtime: bool,
}

impl Default for DiscoverOptions {
    fn default() -> Self {
        DiscoverOptions {
            utc_offset: FixedOffset::east_opt(0).unwrap(),
            filename_pattern: Regex::new(DEFAULT_FILENAME_PATTERN).unwrap(),
            use_mtime: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Discovery {
    pub sessions: Vec<Session>,
    /// Images with no usable timestamp, per deployment.
    pub unsorted: BTreeMap<String, Vec<PathBuf>>,
    pub warnings: Vec<String>,
}

/// Night a local timestamp belongs to: the date of its noon-to-noon window.
pub fn night_of(t: NaiveDateTime) -> NaiveDate {
    (t - Duration::hours(12)).date()
}

pub fn session_id(deployment_id: &str, night: NaiveDate) -> String {
    format!("{deployment_id}_{}", night.format("%Y-%m-%d"))
}

fn exif_time(path: &Path) -> Option<NaiveDateTime> {
    let file = std::fs::File::open(path).ok()?;
    let exif = exif::Reader::new().read_from_container(&mut BufReader::new(file)).ok()?;
    [exif::Tag::DateTimeOriginal, exif::Tag::DateTime].iter().find_map(|&tag| {
        let field = exif.get_field(tag, exif::In::PRIMARY)?;
        let exif::Value::Ascii(ref v) = field.value else { return None };
        let dt = exif::DateTime::from_ascii(v.first()?).ok()?;
        NaiveDate::from_ymd_opt(dt.year as i32, dt.month as u32, dt.day as u32)?
            .and_hms_opt(dt.hour as u32, dt.minute as u32, dt.second as u32)
    })
}

fn filename_time(path: &Path, pattern: &Regex) -> Option<NaiveDateTime> {
    let name = path.file_name()?.to_str()?;
    let caps = pattern.captures(name)?;
    let n = |i: usize| -> Option<u32> { caps.get(i)?.as_str().parse().ok() };
    NaiveDate::from_ymd_opt(n(1)? as i32, n(2)?, n(3)?)?.and_hms_opt(n(4)?, n(5)?, n(6)?)
}

fn mtime(path: &Path, offset: FixedOffset) -> Option<NaiveDateTime> {
    let t = std::fs::metadata(path).ok()?.modified().ok()?;
    Some(DateTime::<Utc>::from(t).with_timezone(&offset).naive_local())
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>, warnings: &mut Vec<String>) {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => {
            warnings.push(format!("skipping unreadable directory {}: {e}", dir.display()));
            return;
        }
    };
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            walk(&p, out, warnings);
        } else if is_image(&p) {
            out.push(p);
        }
    }
}

/// Groups the images under `root/<deployment_id>/...` into noon-to-noon
/// sessions. Capture time comes from EXIF, then the file name, then
/// (optionally, with a warning) the modification time.
pub fn discover_sessions(root: &Path, options: &DiscoverOptions) -> Result<Discovery, PipelineError> {
    let mut out = Discovery::default();
    let mut deployments: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| PipelineError::Data(format!("cannot read {}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    deployments.sort();

    for dep_dir in deployments {
        let Some(deployment_id) = dep_dir.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
            out.warnings.push(format!("skipping non-UTF-8 deployment directory {}", dep_dir.display()));
            continue;
        };
        let mut images = Vec::new();
        walk(&dep_dir, &mut images, &mut out.warnings);
        let mut nights: BTreeMap<NaiveDate, Vec<Frame>> = BTreeMap::new();
        for path in images {
            let found = exif_time(&path)
                .map(|t| (t, TimeSource::Exif))
                .or_else(|| filename_time(&path, &options.filename_pattern).map(|t| (t, TimeSource::Filename)))
                .or_else(|| {
                    if !options.use_mtime {
                        return None;
                    }
                    let t = mtime(&path, options.utc_offset)?;
                    out.warnings.push(format!("{}: no EXIF or filename timestamp, using file mtime", path.display()));
                    Some((t, TimeSource::Mtime))
                });
            match found {
                Some((capture_time, time_source)) => {
                    nights.entry(night_of(capture_time)).or_default().push(Frame { path, capture_time, time_source })
                }
                None => {
                    out.warnings.push(format!("{}: no timestamp, filed as {UNSORTED}", path.display()));
                    out.unsorted.entry(deployment_id.clone()).or_default().push(path);
                }
            }
        }
        for (night, mut frames) in nights {
            frames.sort_by(|a, b| a.capture_time.cmp(&b.capture_time).then_with(|| a.path.cmp(&b.path)));
            out.sessions.push(Session {
                session_id: session_id(&deployment_id, night),
                deployment_id: deployment_id.clone(),
                night_of: night,
                frames,
            });
        }
    }
    Ok(out)
}
