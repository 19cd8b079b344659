use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{Cursor, Read, Seek, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use super::meta::{parse_meta_xml, render_meta_xml};
use super::{
    term_local_name, ArchiveDescriptor, DwcaError, FileDescriptor, GeoPoint, MediaRecord, OccurrenceRecord,
    MULTIMEDIA_ROW_TYPE, OCCURRENCE_ROW_TYPE,
};

const TERM_TAXON_KEY: &str = "http://rs.gbif.org/terms/1.0/taxonKey";
const TERM_LIFE_STAGE: &str = "http://rs.tdwg.org/dwc/terms/lifeStage";
const TERM_DATASET_KEY: &str = "http://rs.gbif.org/terms/1.0/datasetKey";
const TERM_LAT: &str = "http://rs.tdwg.org/dwc/terms/decimalLatitude";
const TERM_LON: &str = "http://rs.tdwg.org/dwc/terms/decimalLongitude";
const TERM_PUBLISHER: &str = "http://purl.org/dc/terms/publisher";
const TERM_IDENTIFIER: &str = "http://purl.org/dc/terms/identifier";

/// A row that was skipped or partially read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowWarning {
    pub file: String,
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedArchive {
    pub descriptor: ArchiveDescriptor,
    pub occurrences: Vec<OccurrenceRecord>,
    pub media: Vec<MediaRecord>,
    pub warnings: Vec<RowWarning>,
    /// Extension rows whose foreign key matched no core row.
    pub unmatched_extension_rows: usize,
    /// Extensions present but not consumed (row types other than multimedia).
    pub ignored_extensions: Vec<String>,
}

enum Source<R> {
    Zip { archive: ZipArchive<R>, prefix: String },
    Dir(PathBuf),
}

impl<R: Read + Seek> Source<R> {
    fn read(&mut self, name: &str) -> Result<Option<Vec<u8>>, DwcaError> {
        match self {
            Source::Zip { archive, prefix } => {
                let full = format!("{prefix}{name}");
                let mut file = match archive.by_name(&full) {
                    Ok(f) => f,
                    Err(zip::result::ZipError::FileNotFound) => return Ok(None),
                    Err(e) => return Err(e.into()),
                };
                let mut buf = Vec::new();
                file.read_to_end(&mut buf)?;
                Ok(Some(buf))
            }
            Source::Dir(root) => match std::fs::read(root.join(name)) {
                Ok(b) => Ok(Some(b)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(e.into()),
            },
        }
    }
}

fn zip_source<R: Read + Seek>(reader: R) -> Result<Source<R>, DwcaError> {
    let archive = ZipArchive::new(reader)?;
    let meta = archive
        .file_names()
        .filter(|n| *n == "meta.xml" || n.ends_with("/meta.xml"))
        .min_by_key(|n| n.len())
        .map(str::to_string)
        .ok_or(DwcaError::MissingMeta)?;
    let prefix = meta.strip_suffix("meta.xml").unwrap_or("").to_string();
    Ok(Source::Zip { archive, prefix })
}

/// Parses a zipped archive, or an already-extracted archive directory.
pub fn parse_archive(path: &Path) -> Result<ParsedArchive, DwcaError> {
    if path.is_dir() {
        parse_from(Source::<File>::Dir(path.to_path_buf()))
    } else {
        parse_from(zip_source(File::open(path)?)?)
    }
}

pub fn parse_archive_bytes(bytes: &[u8]) -> Result<ParsedArchive, DwcaError> {
    parse_from(zip_source(Cursor::new(bytes))?)
}

fn parse_from<R: Read + Seek>(mut src: Source<R>) -> Result<ParsedArchive, DwcaError> {
    let meta = src.read("meta.xml")?.ok_or(DwcaError::MissingMeta)?;
    let meta = String::from_utf8(meta).map_err(|e| DwcaError::Meta {
        offset: e.utf8_error().valid_up_to(),
        message: "meta.xml is not valid UTF-8".into(),
    })?;
    let descriptor = parse_meta_xml(&meta)?;

    let mut warnings = Vec::new();
    let core_bytes = src
        .read(&descriptor.core.location)?
        .ok_or_else(|| DwcaError::MissingFile(descriptor.core.location.clone()))?;

    let mut occurrences = Vec::new();
    let mut seen_ids: HashMap<String, ()> = HashMap::new();
    for (line, key, values) in read_rows(&descriptor.core, &core_bytes, &mut warnings)? {
        let warn = |msg: String| RowWarning { file: descriptor.core.location.clone(), line, message: msg };
        if key.is_empty() {
            warnings.push(warn("empty occurrence id".into()));
            continue;
        }
        if seen_ids.contains_key(&key) {
            warnings.push(warn(format!("duplicate occurrence id {key:?}")));
            continue;
        }
        match occurrence_from(key.clone(), values) {
            Ok((occ, soft)) => {
                if let Some(msg) = soft {
                    warnings.push(warn(msg));
                }
                seen_ids.insert(key, ());
                occurrences.push(occ);
            }
            Err(msg) => warnings.push(warn(msg)),
        }
    }

    let mut media = Vec::new();
    let mut unmatched = 0;
    let mut ignored = Vec::new();
    for ext in &descriptor.extensions {
        if !ext.is_multimedia() {
            ignored.push(ext.row_type.clone());
            continue;
        }
        let bytes = match src.read(&ext.location)? {
            Some(b) => b,
            None => {
                warnings.push(RowWarning { file: ext.location.clone(), line: 0, message: "extension file missing".into() });
                continue;
            }
        };
        for (line, key, mut values) in read_rows(ext, &bytes, &mut warnings)? {
            if !seen_ids.contains_key(&key) {
                unmatched += 1;
                continue;
            }
            let url = take_local(&mut values, &["identifier", "accessURI"]);
            let Some(url) = url.filter(|u| !u.is_empty()) else {
                warnings.push(RowWarning { file: ext.location.clone(), line, message: "media row without identifier".into() });
                continue;
            };
            let mut rec = MediaRecord::new(key, url);
            rec.extra = values;
            media.push(rec);
        }
    }

    Ok(ParsedArchive {
        descriptor,
        occurrences,
        media,
        warnings,
        unmatched_extension_rows: unmatched,
        ignored_extensions: ignored,
    })
}

type Row = (u64, String, BTreeMap<String, String>);

fn read_rows(fd: &FileDescriptor, bytes: &[u8], warnings: &mut Vec<RowWarning>) -> Result<Vec<Row>, DwcaError> {
    let mut builder = csv::ReaderBuilder::new();
    builder.has_headers(false).flexible(true).delimiter(fd.delimiter as u8);
    match fd.quote {
        Some(q) => builder.quote(q as u8),
        None => builder.quoting(false),
    };
    let mut rdr = builder.from_reader(bytes);

    let mut expected = fd.columns.keys().next_back().map(|k| k + 1).unwrap_or(1).max(fd.key_index + 1);
    let mut rows = Vec::new();
    let mut record = csv::ByteRecord::new();
    let mut seen = 0usize;
    while rdr.read_byte_record(&mut record)? {
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        seen += 1;
        if seen <= fd.header_lines {
            if seen == 1 {
                expected = expected.max(record.len());
            }
            continue;
        }
        if record.len() != expected {
            warnings.push(RowWarning {
                file: fd.location.clone(),
                line,
                message: format!("expected {expected} columns, found {}", record.len()),
            });
            continue;
        }
        let field = |i: usize| String::from_utf8_lossy(record.get(i).unwrap_or(b"")).into_owned();
        let key = field(fd.key_index);
        let mut values = BTreeMap::new();
        for (term, value) in &fd.defaults {
            values.insert(term.clone(), value.clone());
        }
        for (&idx, term) in &fd.columns {
            if idx == fd.key_index && (term == "id" || term == "coreid") {
                continue;
            }
            let v = field(idx);
            if !v.is_empty() {
                values.insert(term.clone(), v);
            }
        }
        rows.push((line, key, values));
    }
    Ok(rows)
}

/// Removes and returns the first value whose term local name matches.
fn take_local(values: &mut BTreeMap<String, String>, names: &[&str]) -> Option<String> {
    for name in names {
        let term = values.keys().find(|t| term_local_name(t) == *name).cloned();
        if let Some(t) = term {
            return values.remove(&t);
        }
    }
    None
}

/// Hard failures skip the row; the optional second value is a soft warning.
fn occurrence_from(
    occurrence_id: String,
    mut values: BTreeMap<String, String>,
) -> Result<(OccurrenceRecord, Option<String>), String> {
    let taxon = take_local(&mut values, &["taxonKey"]).ok_or("missing taxonKey")?;
    let taxon_key = taxon.trim().parse().map_err(|_| format!("taxonKey {taxon:?} is not an integer"))?;
    let life_stage = take_local(&mut values, &["lifeStage"]);
    let dataset_key = take_local(&mut values, &["datasetKey"]).unwrap_or_default();
    let publisher = take_local(&mut values, &["publisher"]);
    let lat = take_local(&mut values, &["decimalLatitude"]);
    let lon = take_local(&mut values, &["decimalLongitude"]);

    let mut soft = None;
    let location = match (lat, lon) {
        (Some(la), Some(lo)) => match (la.trim().parse::<f64>(), lo.trim().parse::<f64>()) {
            (Ok(lat), Ok(lon)) if (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon) => {
                Some(GeoPoint { lat, lon })
            }
            _ => {
                soft = Some(format!("coordinates ({la}, {lo}) out of range or unparsable; location dropped"));
                None
            }
        },
        (None, None) => None,
        _ => {
            soft = Some("only one of decimalLatitude/decimalLongitude present; location dropped".into());
            None
        }
    };

    Ok((
        OccurrenceRecord { occurrence_id, taxon_key, life_stage, dataset_key, location, publisher, extra: values },
        soft,
    ))
}

/// Text-file conventions used when writing an archive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextFormat {
    pub delimiter: char,
    pub quote: Option<char>,
    pub header_lines: usize,
}

impl TextFormat {
    pub fn of(fd: &FileDescriptor) -> Self {
        TextFormat { delimiter: fd.delimiter, quote: fd.quote, header_lines: fd.header_lines.min(1) }
    }
}

fn write_table(
    format: TextFormat,
    columns: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<Vec<u8>, DwcaError> {
    let mut builder = csv::WriterBuilder::new();
    builder.delimiter(format.delimiter as u8).terminator(csv::Terminator::Any(b'\n'));
    match format.quote {
        Some(q) => builder.quote(q as u8).quote_style(csv::QuoteStyle::Necessary),
        None => builder.quote_style(csv::QuoteStyle::Never),
    };
    let mut w = builder.from_writer(Vec::new());
    if format.header_lines > 0 {
        w.write_record(columns.iter().map(|c| term_local_name(c)))?;
    }
    for row in rows {
        if format.quote.is_none() {
            for (value, term) in row.iter().zip(columns) {
                if value.contains(format.delimiter) || value.contains('\n') || value.contains('\r') {
                    return Err(DwcaError::Serialize {
                        term: term.to_string(),
                        value: value.clone(),
                        reason: "unquoted format cannot hold delimiter or newline".into(),
                    });
                }
            }
        }
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| DwcaError::Io(e.into_error()))
}

fn descriptor_for(location: &str, row_type: &str, format: TextFormat, columns: &[&str], key_tag: &str) -> FileDescriptor {
    let mut map = BTreeMap::new();
    for (i, c) in columns.iter().enumerate() {
        map.insert(i, if i == 0 { key_tag.to_string() } else { c.to_string() });
    }
    FileDescriptor {
        location: location.into(),
        row_type: row_type.into(),
        delimiter: format.delimiter,
        quote: format.quote,
        header_lines: format.header_lines,
        key_index: 0,
        columns: map,
        defaults: BTreeMap::new(),
    }
}

/// Serialises records into a zip archive (meta.xml, occurrence.txt,
/// multimedia.txt). Unknown columns are written back under their original
/// terms, so parsing the result yields the same records.
pub fn write_archive<W: Write + Seek>(
    out: W,
    occurrences: &[OccurrenceRecord],
    media: &[MediaRecord],
    core_format: TextFormat,
    media_format: TextFormat,
) -> Result<ArchiveDescriptor, DwcaError> {
    let occ_extra: BTreeSet<&str> = occurrences.iter().flat_map(|o| o.extra.keys().map(String::as_str)).collect();
    let mut occ_cols: Vec<&str> =
        vec!["id", TERM_TAXON_KEY, TERM_LIFE_STAGE, TERM_DATASET_KEY, TERM_LAT, TERM_LON, TERM_PUBLISHER];
    occ_cols.extend(occ_extra.iter().copied());
    let occ_rows = occurrences.iter().map(|o| {
        let mut row = vec![
            o.occurrence_id.clone(),
            o.taxon_key.to_string(),
            o.life_stage.clone().unwrap_or_default(),
            o.dataset_key.clone(),
            o.location.map(|p| p.lat.to_string()).unwrap_or_default(),
            o.location.map(|p| p.lon.to_string()).unwrap_or_default(),
            o.publisher.clone().unwrap_or_default(),
        ];
        row.extend(occ_extra.iter().map(|t| o.extra.get(*t).cloned().unwrap_or_default()));
        row
    });
    let core_bytes = write_table(core_format, &occ_cols, occ_rows)?;

    let media_extra: BTreeSet<&str> = media.iter().flat_map(|m| m.extra.keys().map(String::as_str)).collect();
    let mut media_cols: Vec<&str> = vec!["coreid", TERM_IDENTIFIER];
    media_cols.extend(media_extra.iter().copied());
    let media_rows = media.iter().map(|m| {
        let mut row = vec![m.occurrence_id.clone(), m.url.clone()];
        row.extend(media_extra.iter().map(|t| m.extra.get(*t).cloned().unwrap_or_default()));
        row
    });
    let media_bytes = write_table(media_format, &media_cols, media_rows)?;

    let descriptor = ArchiveDescriptor {
        core: descriptor_for("occurrence.txt", OCCURRENCE_ROW_TYPE, core_format, &occ_cols, "id"),
        extensions: vec![descriptor_for("multimedia.txt", MULTIMEDIA_ROW_TYPE, media_format, &media_cols, "coreid")],
    };

    let mut zip = ZipWriter::new(out);
    let opts = SimpleFileOptions::default().compression_method(CompressionMethod::Deflated);
    zip.start_file("meta.xml", opts)?;
    zip.write_all(render_meta_xml(&descriptor).as_bytes())?;
    zip.start_file("occurrence.txt", opts)?;
    zip.write_all(&core_bytes)?;
    zip.start_file("multimedia.txt", opts)?;
    zip.write_all(&media_bytes)?;
    zip.finish()?;
    Ok(descriptor)
}
