use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{assign, cost_matrix, CostWeights, TrackingError};
use crate::fsutil;
use crate::inference::Detection;
use crate::par::Execution;
use crate::taxonomy::{rollup_counts, Backbone, RollupLevel, TaxonKey, UNCLASSIFIED_KEY};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackItem {
    pub frame_index: usize,
    pub detection_index: usize,
    /// Absent on the first item (track birth).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link_cost: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Consensus {
    pub taxon_key: TaxonKey,
    /// Mean probability of `taxon_key` over the track's detections.
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: u64,
    pub items: Vec<TrackItem>,
    pub consensus: Option<Consensus>,
}

/// One line of the tracks file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackLine {
    pub session_id: String,
    #[serde(flatten)]
    pub track: Track,
}

/// Species with the highest mean probability across `dets`; a detection
/// that does not list a species contributes 0 for it. Ties go to the
/// smaller key. `None` when no detection carries species data.
pub fn consensus(dets: &[&Detection]) -> Option<Consensus> {
    if dets.iter().all(|d| d.species.is_none()) {
        return None;
    }
    let mut sums: BTreeMap<TaxonKey, f64> = BTreeMap::new();
    for d in dets {
        for s in d.species.iter().flatten() {
            *sums.entry(s.taxon_key).or_default() += s.probability;
        }
    }
    let n = dets.len() as f64;
    let mut best: Option<Consensus> = None;
    for (&taxon_key, &sum) in &sums {
        let probability = sum / n;
        if best.map_or(true, |b| probability > b.probability) {
            best = Some(Consensus { taxon_key, probability });
        }
    }
    best
}

/// Greedy frame-to-frame chaining. For each consecutive pair of frames the
/// active tracks (rows, in track-id order) are matched to the new frame's
/// detections by [`assign`]; unmatched detections start tracks and unmatched
/// tracks end for good.
///
/// `frames` holds the moth detections of each frame in capture order; items
/// record each detection's `index`, which must be unique within a frame.
pub fn track_session(
    frames: &[Vec<Detection>],
    weights: &CostWeights,
    gate: f64,
    image_diag: f64,
    exec: Execution,
) -> Result<Vec<Track>, TrackingError> {
    let mut tracks: Vec<Track> = Vec::new();
    // (frame, position) of every item, parallel to tracks[i].items
    let mut members: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut active: Vec<usize> = Vec::new();

    for (f, dets) in frames.iter().enumerate() {
        let mut seen = HashSet::new();
        if let Some(d) = dets.iter().find(|d| !seen.insert(d.index)) {
            return Err(TrackingError::Input(format!("frame {f} repeats detection index {}", d.index)));
        }
        let prev: Vec<&Detection> = active
            .iter()
            .map(|&t| {
                let &(pf, pi) = members[t].last().expect("tracks are never empty");
                &frames[pf][pi]
            })
            .collect();
        let costs = cost_matrix(&prev, dets, weights, image_diag, exec)?;
        let a = assign(&costs, gate)?;

        let mut next_active = Vec::with_capacity(dets.len());
        for &(row, col) in &a.matches {
            let t = active[row];
            tracks[t].items.push(TrackItem { frame_index: f, detection_index: dets[col].index, link_cost: Some(costs.get(row, col)) });
            members[t].push((f, col));
            next_active.push(t);
        }
        for &col in &a.unmatched_cols {
            tracks.push(Track {
                track_id: tracks.len() as u64,
                items: vec![TrackItem { frame_index: f, detection_index: dets[col].index, link_cost: None }],
                consensus: None,
            });
            members.push(vec![(f, col)]);
            next_active.push(tracks.len() - 1);
        }
        next_active.sort_unstable();
        active = next_active;
    }

    for (t, m) in tracks.iter_mut().zip(&members) {
        let dets: Vec<&Detection> = m.iter().map(|&(f, i)| &frames[f][i]).collect();
        t.consensus = consensus(&dets);
    }
    Ok(tracks)
}

/// Individuals per species, with genus and family rollups.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeciesCounts {
    pub species: BTreeMap<TaxonKey, u64>,
    pub genus: BTreeMap<TaxonKey, u64>,
    pub family: BTreeMap<TaxonKey, u64>,
}

impl SpeciesCounts {
    pub fn total(&self) -> u64 {
        self.species.values().sum()
    }
}

/// One count per track under its consensus species; tracks without species
/// data count under the reserved unclassified key.
pub fn count_individuals(tracks: &[Track], backbone: &Backbone) -> Result<SpeciesCounts, TrackingError> {
    let mut species: BTreeMap<TaxonKey, u64> = BTreeMap::new();
    for t in tracks {
        let key = t.consensus.map_or(UNCLASSIFIED_KEY, |c| c.taxon_key);
        *species.entry(key).or_default() += 1;
    }
    Ok(SpeciesCounts {
        genus: rollup_counts(&species, backbone, RollupLevel::Genus)?,
        family: rollup_counts(&species, backbone, RollupLevel::Family)?,
        species,
    })
}

pub fn write_tracks_jsonl(path: &Path, session_id: &str, tracks: &[Track]) -> Result<(), TrackingError> {
    let lines: Vec<TrackLine> =
        tracks.iter().map(|t| TrackLine { session_id: session_id.to_string(), track: t.clone() }).collect();
    fsutil::write_jsonl(path, &lines)?;
    Ok(())
}

pub fn read_tracks_jsonl(path: &Path) -> Result<Vec<TrackLine>, TrackingError> {
    Ok(fsutil::read_jsonl(path)?)
}
