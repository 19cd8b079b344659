use std::collections::BTreeMap;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use super::{Backbone, Rank, TaxonKey, TaxonStatus, TaxonomyError, UNCLASSIFIED_KEY};

/// Accepted keys along a species → genus → family chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub species: Option<TaxonKey>,
    pub genus: Option<TaxonKey>,
    pub family: TaxonKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RollupLevel {
    Genus,
    Family,
}

impl Lineage {
    pub fn at(&self, level: RollupLevel) -> Option<TaxonKey> {
        match level {
            RollupLevel::Genus => self.genus,
            RollupLevel::Family => Some(self.family),
        }
    }
}

/// Walks the parent chain of `key`, mapping a synonym to its accepted taxon
/// first. The chain must be species → genus → family with the family having
/// no parent.
pub fn lineage(key: TaxonKey, backbone: &Backbone) -> Result<Lineage, TaxonomyError> {
    let rec = backbone.get(key).ok_or(TaxonomyError::NotFound(key))?;
    let rec = match (rec.status, rec.accepted_key) {
        (TaxonStatus::Synonym, Some(acc)) => backbone.get(acc).ok_or(TaxonomyError::NotFound(acc))?,
        _ => rec,
    };

    let broken = |at: TaxonKey, reason: &str| TaxonomyError::DataIntegrity { key: at, reason: reason.to_string() };
    let parent_of = |at: TaxonKey, expected: Rank| -> Result<TaxonKey, TaxonomyError> {
        let r = backbone.get(at).ok_or(TaxonomyError::NotFound(at))?;
        let p = r.parent_key.ok_or_else(|| broken(at, "missing parent"))?;
        let pr = backbone.get(p).ok_or_else(|| broken(at, "dangling parent"))?;
        if pr.rank != expected {
            return Err(broken(at, &format!("parent {p} has rank {:?}, expected {expected:?}", pr.rank)));
        }
        Ok(p)
    };
    let check_root = |family: TaxonKey| -> Result<TaxonKey, TaxonomyError> {
        match backbone.get(family).and_then(|r| r.parent_key) {
            Some(_) => Err(broken(family, "family-rank taxon has a parent")),
            None => Ok(family),
        }
    };

    match rec.rank {
        Rank::Family => Ok(Lineage { species: None, genus: None, family: check_root(rec.taxon_key)? }),
        Rank::Genus => {
            let family = check_root(parent_of(rec.taxon_key, Rank::Family)?)?;
            Ok(Lineage { species: None, genus: Some(rec.taxon_key), family })
        }
        Rank::Species => {
            let genus = parent_of(rec.taxon_key, Rank::Genus)?;
            let family = check_root(parent_of(genus, Rank::Family)?)?;
            Ok(Lineage { species: Some(rec.taxon_key), genus: Some(genus), family })
        }
    }
}

/// Sums species-level confidence into genus or family buckets.
///
/// Inputs are visited in ascending key order so the float sums are
/// reproducible; total mass is conserved.
pub fn rollup(
    species_probs: &BTreeMap<TaxonKey, f64>,
    backbone: &Backbone,
    level: RollupLevel,
) -> Result<BTreeMap<TaxonKey, f64>, TaxonomyError> {
    if let Some((k, p)) = species_probs.iter().find(|(_, p)| !(**p >= 0.0) || !p.is_finite()) {
        return Err(TaxonomyError::InvalidInput(format!("probability {p} for taxon {k} is not a finite non-negative value")));
    }
    rollup_generic(species_probs, backbone, level, false)
}

/// Count rollup; the reserved unclassified key is carried through unchanged.
pub fn rollup_counts(
    counts: &BTreeMap<TaxonKey, u64>,
    backbone: &Backbone,
    level: RollupLevel,
) -> Result<BTreeMap<TaxonKey, u64>, TaxonomyError> {
    rollup_generic(counts, backbone, level, true)
}

fn rollup_generic<T: Copy + Default + AddAssign>(
    values: &BTreeMap<TaxonKey, T>,
    backbone: &Backbone,
    level: RollupLevel,
    pass_unclassified: bool,
) -> Result<BTreeMap<TaxonKey, T>, TaxonomyError> {
    let mut out: BTreeMap<TaxonKey, T> = BTreeMap::new();
    for (&key, &v) in values {
        let target = if pass_unclassified && key == UNCLASSIFIED_KEY {
            UNCLASSIFIED_KEY
        } else {
            let lin = lineage(key, backbone).map_err(|e| match e {
                TaxonomyError::NotFound(k) => TaxonomyError::DataIntegrity {
                    key: k,
                    reason: "species key absent from backbone".into(),
                },
                other => other,
            })?;
            lin.at(level).ok_or_else(|| TaxonomyError::DataIntegrity {
                key,
                reason: format!("no {level:?}-level ancestor"),
            })?
        };
        *out.entry(target).or_default() += v;
    }
    Ok(out)
}
