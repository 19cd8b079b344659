//! `meta.xml` descriptor parsing and rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use roxmltree::{Document, Node};

use super::{ArchiveDescriptor, DwcaError, FileDescriptor};

fn offset_of(text: &str, pos: roxmltree::TextPos) -> usize {
    // TextPos is 1-based (row, column in chars)
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if i + 1 == pos.row as usize {
            let col = (pos.col as usize).saturating_sub(1);
            return offset + line.char_indices().nth(col).map(|(b, _)| b).unwrap_or(line.len());
        }
        offset += line.len();
    }
    text.len()
}

fn meta_err(node: Node<'_, '_>, message: impl Into<String>) -> DwcaError {
    DwcaError::Meta { offset: node.range().start, message: message.into() }
}

/// Decodes a delimiter / enclosure attribute: literal characters or the
/// escapes `\t`, `\n`, `\r`, `\\`. Empty means "none".
fn decode_char_attr(node: Node<'_, '_>, attr: &str, default: &str) -> Result<Option<char>, DwcaError> {
    let raw = node.attribute(attr).unwrap_or(default);
    let decoded = match raw {
        "\\t" => "\t".to_string(),
        "\\n" => "\n".to_string(),
        "\\r" => "\r".to_string(),
        "\\\\" => "\\".to_string(),
        other => other.to_string(),
    };
    let mut chars = decoded.chars();
    match (chars.next(), chars.next()) {
        (None, _) => Ok(None),
        (Some(c), None) if c.is_ascii() => Ok(Some(c)),
        _ => Err(meta_err(node, format!("{attr}={raw:?} must be a single ASCII character"))),
    }
}

fn parse_file(node: Node<'_, '_>, is_core: bool) -> Result<FileDescriptor, DwcaError> {
    let row_type = node
        .attribute("rowType")
        .ok_or_else(|| meta_err(node, "missing rowType attribute"))?
        .to_string();
    let delimiter = decode_char_attr(node, "fieldsTerminatedBy", ",")?
        .ok_or_else(|| meta_err(node, "fieldsTerminatedBy must not be empty"))?;
    let quote = decode_char_attr(node, "fieldsEnclosedBy", "\"")?;
    let header_lines = match node.attribute("ignoreHeaderLines") {
        None => 0,
        Some(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| meta_err(node, format!("ignoreHeaderLines={v:?} is not a count")))?,
    };

    let location = node
        .children()
        .find(|c| c.has_tag_name("files"))
        .and_then(|f| f.children().find(|c| c.has_tag_name("location")))
        .and_then(|l| l.text())
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .ok_or_else(|| meta_err(node, "missing <files><location>"))?;

    let key_tag = if is_core { "id" } else { "coreid" };
    let key_node = node.children().find(|c| c.has_tag_name(key_tag));
    let key_index = match key_node {
        Some(k) => k
            .attribute("index")
            .and_then(|v| v.trim().parse::<usize>().ok())
            .ok_or_else(|| meta_err(k, format!("<{key_tag}> needs a numeric index")))?,
        None if is_core => 0,
        None => return Err(meta_err(node, "extension lacks a <coreid> foreign-key column")),
    };

    let mut columns = BTreeMap::new();
    let mut defaults = BTreeMap::new();
    for field in node.children().filter(|c| c.has_tag_name("field")) {
        let term = field
            .attribute("term")
            .ok_or_else(|| meta_err(field, "<field> without term"))?
            .to_string();
        match field.attribute("index") {
            Some(idx) => {
                let idx = idx
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| meta_err(field, format!("index {idx:?} is not numeric")))?;
                if columns.insert(idx, term).is_some() {
                    return Err(meta_err(field, format!("column {idx} mapped twice")));
                }
            }
            None => {
                let value = field
                    .attribute("default")
                    .ok_or_else(|| meta_err(field, "<field> needs index or default"))?;
                defaults.insert(term, value.to_string());
            }
        }
    }
    columns.entry(key_index).or_insert_with(|| key_tag.to_string());

    Ok(FileDescriptor { location, row_type, delimiter, quote, header_lines, key_index, columns, defaults })
}

pub fn parse_meta_xml(text: &str) -> Result<ArchiveDescriptor, DwcaError> {
    let doc = Document::parse(text).map_err(|e| DwcaError::Meta {
        offset: offset_of(text, e.pos()),
        message: e.to_string(),
    })?;
    let root = doc.root_element();
    if !root.has_tag_name("archive") {
        return Err(meta_err(root, format!("root element is <{}>, expected <archive>", root.tag_name().name())));
    }

    let mut cores = root.children().filter(|c| c.has_tag_name("core"));
    let core_node = cores.next().ok_or_else(|| meta_err(root, "no <core> element"))?;
    if let Some(extra) = cores.next() {
        return Err(meta_err(extra, "more than one <core> element"));
    }
    let core = parse_file(core_node, true)?;
    let extensions = root
        .children()
        .filter(|c| c.has_tag_name("extension"))
        .map(|n| parse_file(n, false))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ArchiveDescriptor { core, extensions })
}

fn escape_char(c: char) -> String {
    match c {
        '\t' => "\\t".into(),
        '\n' => "\\n".into(),
        '\r' => "\\r".into(),
        '"' => "&quot;".into(),
        '&' => "&amp;".into(),
        '<' => "&lt;".into(),
        '\'' => "&apos;".into(),
        other => other.to_string(),
    }
}

fn escape_text(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn render_file(out: &mut String, tag: &str, fd: &FileDescriptor) {
    let key_tag = if tag == "core" { "id" } else { "coreid" };
    let _ = writeln!(
        out,
        "  <{tag} encoding=\"UTF-8\" fieldsTerminatedBy=\"{}\" linesTerminatedBy=\"\\n\" fieldsEnclosedBy=\"{}\" ignoreHeaderLines=\"{}\" rowType=\"{}\">",
        escape_char(fd.delimiter),
        fd.quote.map(escape_char).unwrap_or_default(),
        fd.header_lines,
        escape_text(&fd.row_type)
    );
    let _ = writeln!(out, "    <files><location>{}</location></files>", escape_text(&fd.location));
    let _ = writeln!(out, "    <{key_tag} index=\"{}\"/>", fd.key_index);
    for (idx, term) in &fd.columns {
        if *idx == fd.key_index && term == key_tag {
            continue;
        }
        let _ = writeln!(out, "    <field index=\"{idx}\" term=\"{}\"/>", escape_text(term));
    }
    for (term, value) in &fd.defaults {
        let _ = writeln!(out, "    <field term=\"{}\" default=\"{}\"/>", escape_text(term), escape_text(value));
    }
    let _ = writeln!(out, "  </{tag}>");
}

pub fn render_meta_xml(desc: &ArchiveDescriptor) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<archive xmlns=\"http://rs.tdwg.org/dwc/text/\">\n");
    render_file(&mut out, "core", &desc.core);
    for ext in &desc.extensions {
        render_file(&mut out, "extension", ext);
    }
    out.push_str("</archive>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const GBIF_META: &str = r#"<?xml version="1.0" encoding="utf-8"?>
<archive xmlns="http://rs.tdwg.org/dwc/text/" metadata="metadata.xml">
  <core encoding="utf-8" fieldsTerminatedBy="\t" linesTerminatedBy="\n" fieldsEnclosedBy="" ignoreHeaderLines="1" rowType="http://rs.tdwg.org/dwc/terms/Occurrence">
    <files><location>occurrence.txt</location></files>
    <id index="0" />
    <field index="0" term="http://rs.gbif.org/terms/1.0/gbifID"/>
    <field index="1" term="http://rs.tdwg.org/dwc/terms/lifeStage"/>
    <field term="http://rs.tdwg.org/dwc/terms/basisOfRecord" default="HUMAN_OBSERVATION"/>
  </core>
  <extension encoding="utf-8" fieldsTerminatedBy="\t" fieldsEnclosedBy="" ignoreHeaderLines="1" rowType="http://rs.gbif.org/terms/1.0/Multimedia">
    <files><location>multimedia.txt</location></files>
    <coreid index="0" />
    <field index="3" term="http://purl.org/dc/terms/identifier"/>
  </extension>
</archive>"#;

    #[test]
    fn parses_gbif_style_descriptor() {
        let d = parse_meta_xml(GBIF_META).unwrap();
        assert_eq!(d.core.delimiter, '\t');
        assert_eq!(d.core.quote, None);
        assert_eq!(d.core.header_lines, 1);
        assert_eq!(d.core.columns[&0], "http://rs.gbif.org/terms/1.0/gbifID");
        assert_eq!(d.core.defaults["http://rs.tdwg.org/dwc/terms/basisOfRecord"], "HUMAN_OBSERVATION");
        assert_eq!(d.extensions.len(), 1);
        let ext = &d.extensions[0];
        assert!(ext.is_multimedia());
        assert_eq!(ext.key_index, 0);
        assert_eq!(ext.columns[&0], "coreid");
    }

    #[test]
    fn render_then_parse_is_stable() {
        let d = parse_meta_xml(GBIF_META).unwrap();
        let again = parse_meta_xml(&render_meta_xml(&d)).unwrap();
        assert_eq!(d, again);

        let mut comma = d.clone();
        comma.core.delimiter = ',';
        comma.core.quote = Some('"');
        assert_eq!(parse_meta_xml(&render_meta_xml(&comma)).unwrap(), comma);
    }

    #[test]
    fn malformed_xml_reports_offset() {
        let text = "<archive>\n  <core rowType=\"x\">\n</archive>";
        match parse_meta_xml(text) {
            Err(DwcaError::Meta { offset, .. }) => assert!(offset > 10 && offset <= text.len(), "{offset}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn structural_errors() {
        let no_core = "<archive></archive>";
        assert!(matches!(parse_meta_xml(no_core), Err(DwcaError::Meta { offset: 0, .. })));

        let two_cores = r#"<archive><core rowType="a"><files><location>a</location></files></core><core rowType="b"><files><location>b</location></files></core></archive>"#;
        match parse_meta_xml(two_cores) {
            Err(DwcaError::Meta { offset, message }) => {
                assert_eq!(offset, two_cores.find("<core rowType=\"b\"").unwrap());
                assert!(message.contains("more than one"));
            }
            other => panic!("{other:?}"),
        }

        let bad_delim = r#"<archive><core rowType="a" fieldsTerminatedBy="||"><files><location>a</location></files></core></archive>"#;
        assert!(parse_meta_xml(bad_delim).unwrap_err().to_string().contains("single"));

        let no_coreid = r#"<archive><core rowType="a"><files><location>a</location></files></core><extension rowType="m"><files><location>m</location></files></extension></archive>"#;
        assert!(parse_meta_xml(no_coreid).unwrap_err().to_string().contains("coreid"));
    }
}
