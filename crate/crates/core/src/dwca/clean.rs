use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{occurrence_id_order, MediaRecord, MediaVerdict, OccurrenceRecord};
use crate::hashing::ContentHash;

/// Removal rules for occurrence media.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningRules {
    /// Images whose shorter side is below this are thumbnails.
    pub thumbnail_min_px: u32,
    /// Datasets known to hold placeholders, habitat shots or descriptive plates.
    pub dataset_blacklist: BTreeSet<String>,
    /// Life-stage values (case-insensitive) that count as adult.
    pub adult_stages: BTreeSet<String>,
}

impl Default for CleaningRules {
    fn default() -> Self {
        CleaningRules {
            thumbnail_min_px: 128,
            dataset_blacklist: BTreeSet::new(),
            adult_stages: ["adult", "imago"].into_iter().map(String::from).collect(),
        }
    }
}

/// Decides adulthood for media whose occurrence carries no life stage.
pub trait LifeStageJudge: Sync {
    fn is_adult(&self, media: &MediaRecord) -> Result<bool, String>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningSummary {
    pub total: usize,
    pub counts: BTreeMap<MediaVerdict, usize>,
    /// Kept records flagged for human review (no life stage available).
    pub needs_review: usize,
}

pub const NEEDS_REVIEW: &str = "needs_review: no life stage metadata";

/// Assigns one verdict per record. Rules run in a fixed order and the first
/// match wins: blacklisted dataset, non-adult, duplicate, thumbnail, else
/// kept. Records are visited in occurrence-id order so the representative of
/// each duplicate group is the one with the smallest id. `fetch_failed`
/// records keep their verdict; unfetched records that pass the metadata rules
/// stay `unreviewed`.
pub fn clean_media(
    occurrences: &[OccurrenceRecord],
    media: &mut [MediaRecord],
    rules: &CleaningRules,
    life_stage: Option<&dyn LifeStageJudge>,
) -> CleaningSummary {
    let by_id: HashMap<&str, &OccurrenceRecord> =
        occurrences.iter().map(|o| (o.occurrence_id.as_str(), o)).collect();
    let adult: HashSet<String> = rules.adult_stages.iter().map(|s| s.trim().to_lowercase()).collect();

    let mut order: Vec<usize> = (0..media.len()).collect();
    order.sort_by(|&a, &b| occurrence_id_order(&media[a].occurrence_id, &media[b].occurrence_id));

    let mut kept_hashes: HashSet<ContentHash> = HashSet::new();
    let mut summary = CleaningSummary { total: media.len(), ..Default::default() };

    for i in order {
        let rec = &mut media[i];
        if rec.verdict == MediaVerdict::FetchFailed {
            *summary.counts.entry(rec.verdict).or_default() += 1;
            continue;
        }
        rec.note = None;
        let occ = by_id.get(rec.occurrence_id.as_str());

        rec.verdict = 'rules: {
            if occ.is_some_and(|o| rules.dataset_blacklist.contains(&o.dataset_key)) {
                break 'rules MediaVerdict::BlacklistedDataset;
            }
            match occ.and_then(|o| o.life_stage.as_deref()).map(|s| s.trim().to_lowercase()) {
                Some(stage) if !stage.is_empty() => {
                    if !adult.contains(&stage) {
                        break 'rules MediaVerdict::NonAdult;
                    }
                }
                _ => match life_stage.map(|j| j.is_adult(rec)) {
                    Some(Ok(false)) => break 'rules MediaVerdict::NonAdult,
                    Some(Ok(true)) => {}
                    Some(Err(e)) => rec.note = Some(format!("{NEEDS_REVIEW} (classifier error: {e})")),
                    None => rec.note = Some(NEEDS_REVIEW.to_string()),
                },
            }
            let Some(hash) = rec.content_hash else {
                break 'rules MediaVerdict::Unreviewed;
            };
            if kept_hashes.contains(&hash) {
                break 'rules MediaVerdict::Duplicate;
            }
            if let (Some(w), Some(h)) = (rec.width, rec.height) {
                if w.min(h) < rules.thumbnail_min_px {
                    break 'rules MediaVerdict::Thumbnail;
                }
            } else {
                break 'rules MediaVerdict::Unreviewed;
            }
            kept_hashes.insert(hash);
            MediaVerdict::Kept
        };
        if rec.verdict != MediaVerdict::Kept && rec.verdict != MediaVerdict::Unreviewed {
            rec.note = None;
        }
        if rec.verdict == MediaVerdict::Kept && rec.note.is_some() {
            summary.needs_review += 1;
        }
        *summary.counts.entry(rec.verdict).or_default() += 1;
    }
    summary
}
