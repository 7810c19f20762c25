//! Minimal single-sheet XLSX (SpreadsheetML) writer and a reader for the
//! files it produces.
//!
//! Entries are stored uncompressed with a fixed timestamp so the same rows
//! always produce the same bytes. Strings are written inline.

use std::io::{Cursor, Read, Write};

use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Empty,
    Int(i64),
    Real(f64),
    Text(String),
}

impl Cell {
    /// Text form shared by CSV cells and XLSX numeric values.
    pub fn render(&self) -> String {
        match self {
            Cell::Empty => String::new(),
            Cell::Int(i) => i.to_string(),
            Cell::Real(r) => r.to_string(),
            Cell::Text(t) => t.clone(),
        }
    }
}

const CONTENT_TYPES: &str = r#"<?xml version="1.0" encoding="UTF-8" standalone="yes"?>
<Types xmlns="http://schemas.openxmlformats.org/package/2006/content-types"><Default Extension="rels" ContentType="application/vnd.openxmlformats-package.relationships+xml"/><Default Extension="xml" ContentType="application/xml"/><Override PartName="/xl/workbook.xml" ContentType="application/vnd.openxmlformats-officedocument.spreadsheetml.sheet.main+xml"/><Override PartName="/xl/worksheets/sheet1.xml" ContentType="application/vnd.openxmlformats-officedocument.spreadsheetml.worksheet+xml"/></Types>"#;

const ROOT_RELS: &str = r#"<?xml version="1.0" encoding="UTF-8" standalone="yes"?>
<Relationships xmlns="http://schemas.openxmlformats.org/package/2006/relationships"><Relationship Id="rId1" Type="http://schemas.openxmlformats.org/officeDocument/2006/relationships/officeDocument" Target="xl/workbook.xml"/></Relationships>"#;

const WORKBOOK_RELS: &str = r#"<?xml version="1.0" encoding="UTF-8" standalone="yes"?>
<Relationships xmlns="http://schemas.openxmlformats.org/package/2006/relationships"><Relationship Id="rId1" Type="http://schemas.openxmlformats.org/officeDocument/2006/relationships/worksheet" Target="worksheets/sheet1.xml"/></Relationships>"#;

fn workbook(sheet_name: &str) -> String {
    format!(
        r#"<?xml version="1.0" encoding="UTF-8" standalone="yes"?>
<workbook xmlns="http://schemas.openxmlformats.org/spreadsheetml/2006/main" xmlns:r="http://schemas.openxmlformats.org/officeDocument/2006/relationships"><sheets><sheet name="{}" sheetId="1" r:id="rId1"/></sheets></workbook>"#,
        escape(sheet_name)
    )
}

/// `0 -> A`, `25 -> Z`, `26 -> AA`.
pub fn column_name(mut idx: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(b'A' + (idx % 26) as u8);
        if idx < 26 {
            break;
        }
        idx = idx / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).unwrap()
}

fn column_index(name: &str) -> Option<usize> {
    let mut idx = 0usize;
    for b in name.bytes() {
        if !b.is_ascii_uppercase() {
            return None;
        }
        idx = idx * 26 + (b - b'A' + 1) as usize;
    }
    idx.checked_sub(1)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\t' | '\n' | '\r' => out.push(c),
            // not representable in XML 1.0
            c if (c as u32) < 0x20 || c == '\u{FFFE}' || c == '\u{FFFF}' => out.push('\u{FFFD}'),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&apos;", "'")
        .replace("&amp;", "&")
}

fn sheet_xml(rows: &[Vec<Cell>]) -> String {
    let mut xml = String::from(
        r#"<?xml version="1.0" encoding="UTF-8" standalone="yes"?>
<worksheet xmlns="http://schemas.openxmlformats.org/spreadsheetml/2006/main"><sheetData>"#,
    );
    for (r, row) in rows.iter().enumerate() {
        let rn = r + 1;
        xml.push_str(&format!(r#"<row r="{rn}">"#));
        for (c, cell) in row.iter().enumerate() {
            let at = format!("{}{rn}", column_name(c));
            match cell {
                Cell::Empty => {}
                Cell::Int(_) | Cell::Real(_) => {
                    xml.push_str(&format!(r#"<c r="{at}"><v>{}</v></c>"#, cell.render()));
                }
                Cell::Text(t) => xml.push_str(&format!(
                    r#"<c r="{at}" t="inlineStr"><is><t xml:space="preserve">{}</t></is></c>"#,
                    escape(t)
                )),
            }
        }
        xml.push_str("</row>");
    }
    xml.push_str("</sheetData></worksheet>");
    xml
}

pub fn write_workbook(sheet_name: &str, rows: &[Vec<Cell>]) -> Vec<u8> {
    let mut zip = ZipWriter::new(Cursor::new(Vec::new()));
    let opts = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Stored)
        .last_modified_time(DateTime::default())
        .unix_permissions(0o644);
    let parts: [(&str, String); 5] = [
        ("[Content_Types].xml", CONTENT_TYPES.to_owned()),
        ("_rels/.rels", ROOT_RELS.to_owned()),
        ("xl/workbook.xml", workbook(sheet_name)),
        ("xl/_rels/workbook.xml.rels", WORKBOOK_RELS.to_owned()),
        ("xl/worksheets/sheet1.xml", sheet_xml(rows)),
    ];
    for (name, body) in parts {
        zip.start_file(name, opts).expect("in-memory zip");
        zip.write_all(body.as_bytes()).expect("in-memory zip");
    }
    zip.finish().expect("in-memory zip").into_inner()
}

#[derive(Debug, thiserror::Error)]
pub enum ReadError {
    #[error("not a zip archive: {0}")]
    Zip(#[from] zip::result::ZipError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unexpected sheet markup: {0}")]
    Markup(String),
}

fn attr<'a>(tag: &'a str, name: &str) -> Option<&'a str> {
    let key = format!(" {name}=\"");
    let start = tag.find(&key)? + key.len();
    let len = tag[start..].find('"')?;
    Some(&tag[start..start + len])
}

/// Reads the first worksheet back as text cells, one `Vec` per row, padded
/// with empty strings to the widest row.
pub fn read_rows(bytes: &[u8]) -> Result<Vec<Vec<String>>, ReadError> {
    let mut archive = ZipArchive::new(Cursor::new(bytes))?;
    let mut xml = String::new();
    archive
        .by_name("xl/worksheets/sheet1.xml")?
        .read_to_string(&mut xml)?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for row_chunk in xml.split("<row ").skip(1) {
        let row_body = row_chunk
            .split("</row>")
            .next()
            .ok_or_else(|| ReadError::Markup("unterminated row".into()))?;
        let mut row = Vec::new();
        for cell_chunk in row_body.split("<c ").skip(1) {
            let open_end = cell_chunk
                .find('>')
                .ok_or_else(|| ReadError::Markup("bad cell".into()))?;
            let tag = format!(" {}", &cell_chunk[..open_end]);
            let at = attr(&tag, "r").ok_or_else(|| ReadError::Markup("cell without r".into()))?;
            let letters: String = at.chars().take_while(|c| c.is_ascii_uppercase()).collect();
            let col = column_index(&letters).ok_or_else(|| ReadError::Markup(at.into()))?;
            let inner = &cell_chunk[open_end + 1..];
            let value = if let Some(start) = inner.find("<t") {
                let text_start = start + inner[start..].find('>').unwrap_or(0) + 1;
                let end = inner[text_start..].find("</t>").unwrap_or(0);
                unescape(&inner[text_start..text_start + end])
            } else if let Some(start) = inner.find("<v>") {
                let end = inner[start + 3..].find("</v>").unwrap_or(0);
                unescape(&inner[start + 3..start + 3 + end])
            } else {
                String::new()
            };
            if row.len() <= col {
                row.resize(col + 1, String::new());
            }
            row[col] = value;
        }
        rows.push(row);
    }
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    for r in &mut rows {
        r.resize(width, String::new());
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_names() {
        assert_eq!(column_name(0), "A");
        assert_eq!(column_name(25), "Z");
        assert_eq!(column_name(26), "AA");
        assert_eq!(column_name(27), "AB");
        assert_eq!(column_name(701), "ZZ");
        assert_eq!(column_name(702), "AAA");
        for i in 0..800 {
            assert_eq!(column_index(&column_name(i)), Some(i));
        }
    }

    #[test]
    fn round_trip_and_determinism() {
        let rows = vec![
            vec![Cell::Text("a".into()), Cell::Text("b & <c>".into()), Cell::Text("q\"".into())],
            vec![Cell::Int(-3), Cell::Empty, Cell::Real(0.5)],
        ];
        let a = write_workbook("messages", &rows);
        assert_eq!(a, write_workbook("messages", &rows));
        let back = read_rows(&a).unwrap();
        assert_eq!(
            back,
            vec![
                vec!["a".to_string(), "b & <c>".into(), "q\"".into()],
                vec!["-3".to_string(), "".into(), "0.5".into()],
            ]
        );
    }

    #[test]
    fn sheet_is_named() {
        let bytes = write_workbook("messages", &[]);
        let mut archive = ZipArchive::new(Cursor::new(&bytes[..])).unwrap();
        let mut wb = String::new();
        archive.by_name("xl/workbook.xml").unwrap().read_to_string(&mut wb).unwrap();
        assert!(wb.contains(r#"<sheet name="messages""#));
    }
}
