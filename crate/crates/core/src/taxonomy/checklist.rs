use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::names::{normalize_name, similarity};
use super::{Backbone, TaxonKey, TaxonStatus, TaxonomyError};
use crate::par::Execution;

pub const DEFAULT_FUZZY_THRESHOLD: f64 = 0.90;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Accepted,
    MergedSynonym,
    DuplicateRemoved,
    Doubtful,
    Fuzzy,
    Unmatched,
}

impl Resolution {
    pub fn as_str(self) -> &'static str {
        match self {
            Resolution::Accepted => "accepted",
            Resolution::MergedSynonym => "merged_synonym",
            Resolution::DuplicateRemoved => "duplicate_removed",
            Resolution::Doubtful => "doubtful",
            Resolution::Fuzzy => "fuzzy",
            Resolution::Unmatched => "unmatched",
        }
    }
}

/// Outcome for one input name.
///
/// `resolved_key` is set only for `Accepted` and `MergedSynonym`. A
/// `DuplicateRemoved` entry points at the earlier entry it duplicates through
/// `duplicate_of` (an index into the same output list).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistEntry {
    pub input_name: String,
    pub resolution: Resolution,
    pub resolved_key: Option<TaxonKey>,
    pub duplicate_of: Option<usize>,
    pub note: String,
}

/// Resolves each raw name against the backbone, in input order.
///
/// Priority: exact accepted → exact synonym (merged into its accepted taxon)
/// → exact doubtful → unique fuzzy candidate (flagged, not resolved) →
/// unmatched. A later name landing on an already-emitted key becomes
/// `DuplicateRemoved`; the first occurrence wins.
pub fn normalize_checklist(
    raw_names: &[String],
    backbone: &Backbone,
    fuzzy_threshold: f64,
) -> Result<Vec<ChecklistEntry>, TaxonomyError> {
    normalize_checklist_with(raw_names, backbone, fuzzy_threshold, Execution::default())
}

pub fn normalize_checklist_with(
    raw_names: &[String],
    backbone: &Backbone,
    fuzzy_threshold: f64,
    exec: Execution,
) -> Result<Vec<ChecklistEntry>, TaxonomyError> {
    if !(0.0..=1.0).contains(&fuzzy_threshold) {
        return Err(TaxonomyError::Config(format!(
            "fuzzy_threshold must lie in [0, 1], got {fuzzy_threshold}"
        )));
    }

    let mut entries = exec.map_slice(raw_names, |name| resolve_one(name, backbone, fuzzy_threshold));

    let mut first_by_key: HashMap<TaxonKey, usize> = HashMap::new();
    for (idx, entry) in entries.iter_mut().enumerate() {
        let Some(key) = entry.resolved_key else { continue };
        match first_by_key.get(&key) {
            Some(&first) => {
                entry.note = format!(
                    "duplicate of entry {first} (key {key} via {})",
                    entry.resolution.as_str()
                );
                entry.resolution = Resolution::DuplicateRemoved;
                entry.resolved_key = None;
                entry.duplicate_of = Some(first);
            }
            None => {
                first_by_key.insert(key, idx);
            }
        }
    }
    Ok(entries)
}

fn resolve_one(raw: &str, backbone: &Backbone, threshold: f64) -> ChecklistEntry {
    let entry = |resolution, resolved_key, note: String| ChecklistEntry {
        input_name: raw.to_string(),
        resolution,
        resolved_key,
        duplicate_of: None,
        note,
    };

    let norm = normalize_name(raw);
    if norm.is_empty() {
        return entry(Resolution::Unmatched, None, "empty name".into());
    }

    let keys = backbone.lookup(&norm);
    let with_status = |status| {
        keys.iter()
            .copied()
            .filter(move |k| backbone.get(*k).map(|r| r.status) == Some(status))
    };
    if let Some(key) = with_status(TaxonStatus::Accepted).next() {
        return entry(Resolution::Accepted, Some(key), String::new());
    }
    if let Some(syn) = with_status(TaxonStatus::Synonym).next() {
        // accepted_key is guaranteed by Backbone validation
        let acc = backbone.get(syn).and_then(|r| r.accepted_key).unwrap_or(syn);
        let acc_name = backbone.get(acc).map(|r| r.scientific_name.as_str()).unwrap_or("");
        return entry(
            Resolution::MergedSynonym,
            Some(acc),
            format!("synonym {syn} of {acc_name}"),
        );
    }
    if let Some(doubtful) = with_status(TaxonStatus::Doubtful).next() {
        return entry(Resolution::Doubtful, None, format!("doubtful taxon {doubtful}"));
    }

    let mut candidates: Vec<(&str, &[TaxonKey])> = backbone
        .normalized_names()
        .filter(|(name, _)| {
            let (a, b) = (norm.chars().count(), name.chars().count());
            let longest = a.max(b).max(1) as f64;
            // cheap upper bound before the quadratic metric
            1.0 - (a.abs_diff(b) as f64) / longest >= threshold && similarity(&norm, name) >= threshold
        })
        .collect();
    candidates.sort_by(|a, b| a.0.cmp(b.0));

    match candidates.as_slice() {
        [] => entry(Resolution::Unmatched, None, String::new()),
        [(_, keys)] => {
            let display = preferred_record_name(backbone, keys);
            entry(Resolution::Fuzzy, None, display)
        }
        many => {
            let names: Vec<String> = many.iter().map(|(_, k)| preferred_record_name(backbone, k)).collect();
            entry(
                Resolution::Unmatched,
                None,
                format!("ambiguous fuzzy candidates: {}", names.join("; ")),
            )
        }
    }
}

fn preferred_record_name(backbone: &Backbone, keys: &[TaxonKey]) -> String {
    let recs = keys.iter().filter_map(|k| backbone.get(*k));
    recs.clone()
        .find(|r| r.status == TaxonStatus::Accepted)
        .or_else(|| recs.clone().next())
        .map(|r| r.scientific_name.clone())
        .unwrap_or_default()
}

/// Reads raw checklist names: either a CSV with a `scientificName` column or
/// plain text with one name per line (blank lines and `#` comments skipped).
pub fn read_checklist_names<R: Read>(mut reader: R) -> Result<Vec<String>, TaxonomyError> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(&text);

    let first = text.lines().next().unwrap_or("");
    let is_csv = first.split([',', '\t']).any(|c| c.trim().trim_matches('"') == "scientificName");
    if is_csv {
        let delim = if first.contains('\t') { b'\t' } else { b',' };
        let mut rdr = csv::ReaderBuilder::new().delimiter(delim).from_reader(text.as_bytes());
        let col = rdr
            .headers()?
            .iter()
            .position(|h| h.trim() == "scientificName")
            .expect("checked above");
        let mut out = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if let Some(name) = rec.get(col) {
                if !name.trim().is_empty() {
                    out.push(name.to_string());
                }
            }
        }
        return Ok(out);
    }

    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// One row of the processed checklist CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedRow {
    pub input_name: String,
    pub resolution: Resolution,
    pub resolved_key: Option<TaxonKey>,
    pub accepted_name: String,
    pub genus: String,
    pub family: String,
    pub note: String,
}

pub fn write_processed_checklist<W: Write>(
    entries: &[ChecklistEntry],
    backbone: &Backbone,
    writer: W,
) -> Result<(), TaxonomyError> {
    let name_of = |k: Option<TaxonKey>| {
        k.and_then(|k| backbone.get(k)).map(|r| r.scientific_name.clone()).unwrap_or_default()
    };
    let mut w = csv::Writer::from_writer(writer);
    for e in entries {
        let lineage = e.resolved_key.and_then(|k| super::lineage::lineage(k, backbone).ok());
        w.serialize(ProcessedRow {
            input_name: e.input_name.clone(),
            resolution: e.resolution,
            resolved_key: e.resolved_key,
            accepted_name: name_of(e.resolved_key),
            genus: name_of(lineage.as_ref().and_then(|l| l.genus)),
            family: name_of(lineage.as_ref().map(|l| l.family)),
            note: e.note.clone(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_processed_checklist<R: Read>(reader: R) -> Result<Vec<ProcessedRow>, TaxonomyError> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(TaxonomyError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{Rank, TaxonRecord};

    fn fixture() -> Backbone {
        let r = |k, n: &str, rank, status, acc, parent| TaxonRecord {
            taxon_key: k,
            scientific_name: n.into(),
            rank,
            status,
            accepted_key: acc,
            parent_key: parent,
        };
        Backbone::new([
            r(30, "Saturniidae", Rank::Family, TaxonStatus::Accepted, None, None),
            r(20, "Actias", Rank::Genus, TaxonStatus::Accepted, None, Some(30)),
            r(1, "Actias luna", Rank::Species, TaxonStatus::Accepted, None, Some(20)),
            r(2, "Phalaena luna", Rank::Species, TaxonStatus::Synonym, Some(1), Some(20)),
            r(3, "Actias dubia", Rank::Species, TaxonStatus::Doubtful, None, Some(20)),
        ])
        .unwrap()
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn empty_input() {
        assert!(normalize_checklist(&[], &fixture(), 0.9).unwrap().is_empty());
    }

    #[test]
    fn synonym_after_accepted_is_duplicate() {
        let out = normalize_checklist(&names(&["Actias luna", "Phalaena luna"]), &fixture(), 0.9).unwrap();
        assert_eq!(out[0].resolution, Resolution::Accepted);
        assert_eq!(out[0].resolved_key, Some(1));
        assert_eq!(out[1].resolution, Resolution::DuplicateRemoved);
        assert_eq!(out[1].resolved_key, None);
        assert_eq!(out[1].duplicate_of, Some(0));
        assert!(out[1].note.contains("key 1 via merged_synonym"), "{}", out[1].note);
    }

    #[test]
    fn synonym_alone_is_merged() {
        let out = normalize_checklist(&names(&["Phalaena luna (Linnaeus, 1758)"]), &fixture(), 0.9).unwrap();
        assert_eq!(out[0].resolution, Resolution::MergedSynonym);
        assert_eq!(out[0].resolved_key, Some(1));
    }

    #[test]
    fn misspelling_is_flagged_fuzzy() {
        let out = normalize_checklist(&names(&["Actias lunna"]), &fixture(), 0.9).unwrap();
        assert_eq!(out[0].resolution, Resolution::Fuzzy);
        assert_eq!(out[0].resolved_key, None);
        assert_eq!(out[0].note, "Actias luna");
    }

    #[test]
    fn doubtful_and_unmatched() {
        let out = normalize_checklist(&names(&["actias DUBIA", "Zzz qqq", "  "]), &fixture(), 0.9).unwrap();
        assert_eq!(out[0].resolution, Resolution::Doubtful);
        assert_eq!(out[0].resolved_key, None);
        assert_eq!(out[1].resolution, Resolution::Unmatched);
        assert_eq!(out[2].resolution, Resolution::Unmatched);
    }

    #[test]
    fn ambiguous_fuzzy_is_unmatched() {
        // both "actias luna" and "actias dubia" sit within 0.5 of "actias lxxx"
        let out = normalize_checklist(&names(&["Actias lxxx"]), &fixture(), 0.5).unwrap();
        assert_eq!(out[0].resolution, Resolution::Unmatched);
        assert!(out[0].note.starts_with("ambiguous"));
    }

    #[test]
    fn threshold_out_of_range_is_config_error() {
        assert!(matches!(
            normalize_checklist(&names(&["x"]), &fixture(), 1.5),
            Err(TaxonomyError::Config(_))
        ));
        assert!(normalize_checklist(&names(&["x"]), &fixture(), f64::NAN).is_err());
    }

    #[test]
    fn reads_text_and_csv_checklists() {
        let txt = "# regional list\nActias luna\n\nHyles lineata\n";
        assert_eq!(read_checklist_names(txt.as_bytes()).unwrap(), names(&["Actias luna", "Hyles lineata"]));
        let csv = "taxonID,scientificName\n1,Actias luna\n2,\"Hyles lineata (Fabricius, 1775)\"\n";
        assert_eq!(
            read_checklist_names(csv.as_bytes()).unwrap(),
            names(&["Actias luna", "Hyles lineata (Fabricius, 1775)"])
        );
    }

    #[test]
    fn processed_csv_has_lineage_columns() {
        let bb = fixture();
        let out = normalize_checklist(&names(&["Phalaena luna", "Nope"]), &bb, 0.9).unwrap();
        let mut buf = Vec::new();
        write_processed_checklist(&out, &bb, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("input_name,resolution,resolved_key,accepted_name,genus,family,note\n"));
        let rows = read_processed_checklist(buf.as_slice()).unwrap();
        assert_eq!(rows[0].accepted_name, "Actias luna");
        assert_eq!(rows[0].genus, "Actias");
        assert_eq!(rows[0].family, "Saturniidae");
        assert_eq!(rows[1].resolution, Resolution::Unmatched);
        assert_eq!(rows[1].resolved_key, None);
    }
}
