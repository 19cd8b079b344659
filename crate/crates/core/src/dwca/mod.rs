//! Darwin Core Archive ingestion: descriptor and row parsing, media fetching
//! into a content-addressed cache, cleaning verdicts and capped training
//! manifests.

mod archive;
mod clean;
mod export;
mod fetch;
mod meta;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::hashing::ContentHash;
use crate::taxonomy::TaxonKey;

pub use archive::{parse_archive, parse_archive_bytes, write_archive, ParsedArchive, RowWarning, TextFormat};
pub use clean::{clean_media, CleaningRules, CleaningSummary, LifeStageJudge};
pub use export::{
    checklist_keys, export_training_set, export_training_set_with, write_manifest, ExportReport,
    ManifestRow, Reject,
    DEFAULT_CAP_PER_SPECIES,
};
pub use fetch::{fetch_media, FetchError, FetchOptions, FetchReport, HttpSource, MediaCache, MediaSource};
pub use meta::{parse_meta_xml, render_meta_xml};

pub const OCCURRENCE_ROW_TYPE: &str = "http://rs.tdwg.org/dwc/terms/Occurrence";
pub const MULTIMEDIA_ROW_TYPE: &str = "http://rs.gbif.org/terms/1.0/Multimedia";

/// Layout of one delimited data file inside the archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDescriptor {
    pub location: String,
    pub row_type: String,
    pub delimiter: char,
    pub quote: Option<char>,
    pub header_lines: usize,
    /// `<id>` column for the core, `<coreid>` column for extensions.
    pub key_index: usize,
    /// Column index → term URI.
    pub columns: BTreeMap<usize, String>,
    /// Term URI → constant value for fields declared without an index.
    pub defaults: BTreeMap<String, String>,
}

impl FileDescriptor {
    pub fn is_multimedia(&self) -> bool {
        let local = term_local_name(&self.row_type);
        local.eq_ignore_ascii_case("multimedia")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveDescriptor {
    pub core: FileDescriptor,
    pub extensions: Vec<FileDescriptor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccurrenceRecord {
    pub occurrence_id: String,
    pub taxon_key: TaxonKey,
    pub life_stage: Option<String>,
    pub dataset_key: String,
    pub location: Option<GeoPoint>,
    pub publisher: Option<String>,
    /// Unrecognised columns, keyed by term URI.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaVerdict {
    Kept,
    Duplicate,
    Thumbnail,
    NonAdult,
    BlacklistedDataset,
    FetchFailed,
    Unreviewed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediaRecord {
    pub occurrence_id: String,
    pub url: String,
    pub content_hash: Option<ContentHash>,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub verdict: MediaVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

impl MediaRecord {
    pub fn new(occurrence_id: impl Into<String>, url: impl Into<String>) -> Self {
        MediaRecord {
            occurrence_id: occurrence_id.into(),
            url: url.into(),
            content_hash: None,
            width: None,
            height: None,
            verdict: MediaVerdict::Unreviewed,
            note: None,
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DwcaError {
    #[error("meta.xml error at byte {offset}: {message}")]
    Meta { offset: usize, message: String },
    #[error("archive has no meta.xml descriptor")]
    MissingMeta,
    #[error("data file {0:?} named in meta.xml is missing from the archive")]
    MissingFile(String),
    #[error("cache directory {path} is not writable: {source}")]
    CacheUnwritable { path: String, source: std::io::Error },
    #[error("cannot serialise value {value:?} in column {term}: {reason}")]
    Serialize { term: String, value: String, reason: String },
    #[error("zip: {0}")]
    Zip(#[from] zip::result::ZipError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Trailing segment of a term URI (`http://rs.tdwg.org/dwc/terms/lifeStage` → `lifeStage`).
pub fn term_local_name(term: &str) -> &str {
    term.rsplit(['/', '#', ':']).next().unwrap_or(term)
}

/// Orders occurrence ids numerically when both are integers, otherwise
/// lexicographically; integers sort first. Total order.
pub fn occurrence_id_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u128>(), b.parse::<u128>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}
