//! Checklist reconciliation against a taxonomy backbone, lineage walks and
//! confidence rollup to higher ranks.

mod backbone;
mod checklist;
mod lineage;
pub mod names;

use serde::{Deserialize, Serialize};

pub use backbone::Backbone;
pub use checklist::{
    normalize_checklist_with,
    normalize_checklist, read_checklist_names, read_processed_checklist, write_processed_checklist,
    ChecklistEntry, ProcessedRow, Resolution, DEFAULT_FUZZY_THRESHOLD,
};
pub use lineage::{lineage, rollup, rollup_counts, Lineage, RollupLevel};

pub type TaxonKey = u64;

/// Key reserved for individuals without any species prediction. Never a
/// valid backbone key.
pub const UNCLASSIFIED_KEY: TaxonKey = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rank {
    Species,
    Genus,
    Family,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaxonStatus {
    Accepted,
    Synonym,
    Doubtful,
}

/// One backbone taxon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonRecord {
    pub taxon_key: TaxonKey,
    pub scientific_name: String,
    pub rank: Rank,
    pub status: TaxonStatus,
    /// Present iff `status` is `Synonym`.
    pub accepted_key: Option<TaxonKey>,
    /// Genus for species, family for genus, absent for family.
    pub parent_key: Option<TaxonKey>,
}

#[derive(Debug, thiserror::Error)]
pub enum TaxonomyError {
    /// The backbone (or a parameter) violates an invariant.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("taxon {0} not found in backbone")]
    NotFound(TaxonKey),
    #[error("data integrity error at taxon {key}: {reason}")]
    DataIntegrity { key: TaxonKey, reason: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
