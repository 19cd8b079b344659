use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::names::normalize_name;
use super::{Rank, TaxonKey, TaxonRecord, TaxonStatus, TaxonomyError, UNCLASSIFIED_KEY};

/// Immutable reference taxonomy. Construction validates every invariant, so a
/// `Backbone` value is always internally consistent and can be shared freely
/// between workers.
#[derive(Debug, Clone, Default)]
pub struct Backbone {
    records: BTreeMap<TaxonKey, TaxonRecord>,
    name_index: HashMap<String, Vec<TaxonKey>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    taxon_key: TaxonKey,
    scientific_name: String,
    rank: Rank,
    status: TaxonStatus,
    accepted_key: Option<TaxonKey>,
    parent_key: Option<TaxonKey>,
}

impl Backbone {
    pub fn new(records: impl IntoIterator<Item = TaxonRecord>) -> Result<Self, TaxonomyError> {
        let mut map = BTreeMap::new();
        for rec in records {
            if rec.taxon_key == UNCLASSIFIED_KEY {
                return Err(TaxonomyError::Config(format!(
                    "taxon key {UNCLASSIFIED_KEY} is reserved for unclassified individuals"
                )));
            }
            let key = rec.taxon_key;
            if map.insert(key, rec).is_some() {
                return Err(TaxonomyError::Config(format!("duplicate taxon key {key}")));
            }
        }

        for rec in map.values() {
            match (rec.status, rec.accepted_key) {
                (TaxonStatus::Synonym, None) => {
                    return Err(TaxonomyError::Config(format!(
                        "synonym {} has no accepted_key",
                        rec.taxon_key
                    )))
                }
                (TaxonStatus::Synonym, Some(acc)) => {
                    let target = map.get(&acc).ok_or_else(|| {
                        TaxonomyError::Config(format!(
                            "synonym {} points to missing accepted_key {acc}",
                            rec.taxon_key
                        ))
                    })?;
                    if target.status != TaxonStatus::Accepted || target.rank != rec.rank {
                        return Err(TaxonomyError::Config(format!(
                            "synonym {} must point to an accepted {:?}, got {acc}",
                            rec.taxon_key, rec.rank
                        )));
                    }
                }
                (_, Some(_)) => {
                    return Err(TaxonomyError::Config(format!(
                        "non-synonym {} carries an accepted_key",
                        rec.taxon_key
                    )))
                }
                (_, None) => {}
            }
            if let Some(parent) = rec.parent_key {
                if !map.contains_key(&parent) {
                    return Err(TaxonomyError::Config(format!(
                        "taxon {} points to missing parent_key {parent}",
                        rec.taxon_key
                    )));
                }
            }
        }

        let mut name_index: HashMap<String, Vec<TaxonKey>> = HashMap::new();
        for rec in map.values() {
            // BTreeMap iteration keeps each list sorted by key
            name_index.entry(normalize_name(&rec.scientific_name)).or_default().push(rec.taxon_key);
        }
        Ok(Backbone { records: map, name_index })
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, TaxonomyError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut records = Vec::new();
        for row in rdr.deserialize::<CsvRow>() {
            let row = row?;
            records.push(TaxonRecord {
                taxon_key: row.taxon_key,
                scientific_name: row.scientific_name,
                rank: row.rank,
                status: row.status,
                accepted_key: row.accepted_key,
                parent_key: row.parent_key,
            });
        }
        Self::new(records)
    }

    pub fn load_csv(path: &Path) -> Result<Self, TaxonomyError> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), TaxonomyError> {
        let mut w = csv::Writer::from_writer(writer);
        for r in self.records.values() {
            w.serialize(CsvRow {
                taxon_key: r.taxon_key,
                scientific_name: r.scientific_name.clone(),
                rank: r.rank,
                status: r.status,
                accepted_key: r.accepted_key,
                parent_key: r.parent_key,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn get(&self, key: TaxonKey) -> Option<&TaxonRecord> {
        self.records.get(&key)
    }

    /// Keys whose normalised name equals `normalized` (ascending).
    pub fn lookup(&self, normalized: &str) -> &[TaxonKey] {
        self.name_index.get(normalized).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn normalized_names(&self) -> impl Iterator<Item = (&str, &[TaxonKey])> {
        self.name_index.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn records(&self) -> impl Iterator<Item = &TaxonRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(key: u64, name: &str, rank: Rank, status: TaxonStatus, acc: Option<u64>, parent: Option<u64>) -> TaxonRecord {
        TaxonRecord { taxon_key: key, scientific_name: name.into(), rank, status, accepted_key: acc, parent_key: parent }
    }

    #[test]
    fn rejects_dangling_parent() {
        let err = Backbone::new([rec(1, "A b", Rank::Species, TaxonStatus::Accepted, None, Some(9))]).unwrap_err();
        assert!(matches!(err, TaxonomyError::Config(_)));
    }

    #[test]
    fn rejects_synonym_to_synonym() {
        let err = Backbone::new([
            rec(1, "A b", Rank::Species, TaxonStatus::Accepted, None, None),
            rec(2, "A c", Rank::Species, TaxonStatus::Synonym, Some(1), None),
            rec(3, "A d", Rank::Species, TaxonStatus::Synonym, Some(2), None),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("accepted"));
    }

    #[test]
    fn rejects_synonym_rank_mismatch_and_reserved_key() {
        assert!(Backbone::new([
            rec(1, "A", Rank::Genus, TaxonStatus::Accepted, None, None),
            rec(2, "A c", Rank::Species, TaxonStatus::Synonym, Some(1), None),
        ])
        .is_err());
        assert!(Backbone::new([rec(0, "X", Rank::Family, TaxonStatus::Accepted, None, None)]).is_err());
        assert!(Backbone::new([
            rec(1, "X", Rank::Family, TaxonStatus::Accepted, None, None),
            rec(1, "Y", Rank::Family, TaxonStatus::Accepted, None, None),
        ])
        .is_err());
    }

    #[test]
    fn csv_round_trip() {
        let text = "taxon_key,scientific_name,rank,status,accepted_key,parent_key\n\
                    30,Saturniidae,family,accepted,,\n\
                    20,Actias,genus,accepted,,30\n\
                    1,Actias luna,species,accepted,,20\n\
                    2,Phalaena luna,species,synonym,1,20\n";
        let bb = Backbone::from_csv_reader(text.as_bytes()).unwrap();
        assert_eq!(bb.len(), 4);
        assert_eq!(bb.lookup("actias luna"), &[1]);
        let mut out = Vec::new();
        bb.write_csv(&mut out).unwrap();
        let again = Backbone::from_csv_reader(out.as_slice()).unwrap();
        assert_eq!(again.records().cloned().collect::<Vec<_>>(), bb.records().cloned().collect::<Vec<_>>());
    }
}
