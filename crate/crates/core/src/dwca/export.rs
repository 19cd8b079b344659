use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DwcaError, MediaCache, MediaRecord, MediaVerdict, OccurrenceRecord};
use crate::hashing::ContentHash;
use crate::par::Execution;
use crate::taxonomy::{ProcessedRow, Resolution, TaxonKey};

/// Per-species ceiling on training examples.
pub const DEFAULT_CAP_PER_SPECIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub taxon_key: TaxonKey,
    pub content_hash: ContentHash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub occurrence_id: String,
    pub taxon_key: Option<TaxonKey>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportReport {
    pub rows: Vec<ManifestRow>,
    pub rejects: Vec<Reject>,
    /// taxon_key → (kept images available, rows exported)
    pub per_species: BTreeMap<TaxonKey, (usize, usize)>,
}

/// Accepted keys of a processed checklist (accepted and merged synonyms).
pub fn checklist_keys(rows: &[ProcessedRow]) -> BTreeSet<TaxonKey> {
    rows.iter()
        .filter(|r| matches!(r.resolution, Resolution::Accepted | Resolution::MergedSynonym))
        .filter_map(|r| r.resolved_key)
        .collect()
}

fn species_rng(seed: u64, taxon: TaxonKey) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ taxon.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Builds the training manifest from kept media.
///
/// Species above `cap` get a uniform random subsample of exactly `cap`
/// images, drawn from a generator seeded by `seed` and the taxon key over
/// candidates in content-hash order, so the result is independent of input
/// order. `cap = None` keeps everything. Output is sorted by
/// `(taxon_key, content_hash)`.
pub fn export_training_set(
    occurrences: &[OccurrenceRecord],
    media: &[MediaRecord],
    checklist: &BTreeSet<TaxonKey>,
    cap: Option<usize>,
    seed: u64,
    cache: &MediaCache,
) -> ExportReport {
    export_training_set_with(occurrences, media, checklist, cap, seed, cache, Execution::default())
}

pub fn export_training_set_with(
    occurrences: &[OccurrenceRecord],
    media: &[MediaRecord],
    checklist: &BTreeSet<TaxonKey>,
    cap: Option<usize>,
    seed: u64,
    cache: &MediaCache,
    exec: Execution,
) -> ExportReport {
    let taxon_of: HashMap<&str, TaxonKey> =
        occurrences.iter().map(|o| (o.occurrence_id.as_str(), o.taxon_key)).collect();

    let mut report = ExportReport::default();
    let mut by_species: BTreeMap<TaxonKey, Vec<(ContentHash, &str)>> = BTreeMap::new();
    for m in media.iter().filter(|m| m.verdict == MediaVerdict::Kept) {
        let Some(hash) = m.content_hash else { continue };
        match taxon_of.get(m.occurrence_id.as_str()) {
            None => report.rejects.push(Reject {
                occurrence_id: m.occurrence_id.clone(),
                taxon_key: None,
                reason: "media references an unknown occurrence".into(),
            }),
            Some(t) if !checklist.contains(t) => report.rejects.push(Reject {
                occurrence_id: m.occurrence_id.clone(),
                taxon_key: Some(*t),
                reason: "taxon not in processed checklist".into(),
            }),
            Some(t) => by_species.entry(*t).or_default().push((hash, m.occurrence_id.as_str())),
        }
    }

    let species: Vec<(TaxonKey, Vec<(ContentHash, &str)>)> = by_species.into_iter().collect();
    let picked = exec.map_slice(&species, |(taxon, items)| {
        let mut items = items.clone();
        items.sort();
        let chosen: Vec<ContentHash> = match cap {
            Some(cap) if items.len() > cap => {
                let mut rng = species_rng(seed, *taxon);
                let mut idx = rand::seq::index::sample(&mut rng, items.len(), cap).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| items[i].0).collect()
            }
            _ => items.iter().map(|(h, _)| *h).collect(),
        };
        (*taxon, items.len(), chosen)
    });

    for (taxon, available, chosen) in picked {
        report.per_species.insert(taxon, (available, chosen.len()));
        report.rows.extend(chosen.into_iter().map(|h| ManifestRow {
            path: cache.object_path(&h).display().to_string(),
            taxon_key: taxon,
            content_hash: h,
        }));
    }
    report.rows.sort_by(|a, b| (a.taxon_key, a.content_hash).cmp(&(b.taxon_key, b.content_hash)));
    report
}

/// CSV with columns `path,taxon_key,content_hash`.
pub fn write_manifest<W: Write>(rows: &[ManifestRow], writer: W) -> Result<(), DwcaError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
