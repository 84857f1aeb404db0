//! Tabular ingest: CSV and OOXML workbooks into a rectangular [`Table`].

mod csv;
mod workbook;

use std::collections::HashSet;
use std::path::Path;

use indexmap::IndexMap;
use serde::Serialize;
use thiserror::Error;

pub use self::csv::parse_csv;
pub use self::workbook::parse_workbook;

/// One row: every column name mapped to its (possibly empty) cell.
pub type Record = IndexMap<String, String>;

/// UTF-8 byte-order mark.
pub const UTF8_BOM: &[u8] = &[0xEF, 0xBB, 0xBF];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("input file is empty")]
    EmptyFile,
    #[error("header row contains no column names")]
    NoColumns,
    #[error("CSV syntax error on line {line}: {message}")]
    CsvSyntax { line: usize, message: String },
    #[error("input is not valid UTF-8 (byte offset {offset})")]
    Encoding { offset: usize },
    #[error("cannot read workbook: {0}")]
    WorkbookFormat(String),
    #[error("unsupported input format: {0}")]
    UnsupportedFormat(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A parsed dataset.
///
/// Column names are unique and every row holds exactly one value per column,
/// in source order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Table {
    source_name: String,
    columns: Vec<String>,
    rows: Vec<Record>,
}

impl Table {
    /// Builds a table from a header row and raw cell rows.
    ///
    /// Header names are trimmed; blank names become `column_<position>` and
    /// repeated names get `_2`, `_3`, ... suffixes. Short rows are padded
    /// with empty strings, long rows are truncated.
    pub fn from_grid(
        source_name: impl Into<String>,
        header: Vec<String>,
        body: Vec<Vec<String>>,
    ) -> Result<Self, IngestError> {
        if header.iter().all(|h| h.trim().is_empty()) {
            return Err(IngestError::NoColumns);
        }
        let named: Vec<String> = header
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let h = h.trim();
                if h.is_empty() {
                    format!("column_{}", i + 1)
                } else {
                    h.to_string()
                }
            })
            .collect();
        let columns = unique_names(&named);
        let width = columns.len();

        let mut truncated = 0usize;
        let rows = body
            .into_iter()
            .map(|mut cells| {
                if cells.len() > width {
                    truncated += 1;
                    cells.truncate(width);
                }
                cells.resize(width, String::new());
                columns.iter().cloned().zip(cells).collect::<Record>()
            })
            .collect();
        if truncated > 0 {
            tracing::warn!(rows = truncated, width, "rows longer than the header were truncated");
        }

        Ok(Self {
            source_name: source_name.into(),
            columns,
            rows,
        })
    }

    pub fn with_source_name(mut self, name: impl Into<String>) -> Self {
        self.source_name = name.into();
        self
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Record] {
        &self.rows
    }

    pub fn row(&self, index: usize) -> Option<&Record> {
        self.rows.get(index)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Cell value; `None` when the row or column does not exist.
    pub fn cell(&self, row: usize, column: &str) -> Option<&str> {
        self.rows.get(row)?.get(column).map(String::as_str)
    }
}

/// Makes names unique by suffixing repeats with `_2`, `_3`, ...
///
/// A generated suffix never collides with a name appearing anywhere in the
/// input or with an earlier assignment.
pub fn unique_names(names: &[String]) -> Vec<String> {
    let originals: HashSet<&str> = names.iter().map(String::as_str).collect();
    let mut taken: HashSet<String> = HashSet::with_capacity(names.len());
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        if taken.insert(name.clone()) {
            out.push(name.clone());
            continue;
        }
        let mut n = 2usize;
        loop {
            let candidate = format!("{name}_{n}");
            if !taken.contains(&candidate) && !originals.contains(candidate.as_str()) {
                taken.insert(candidate.clone());
                out.push(candidate);
                break;
            }
            n += 1;
        }
    }
    out
}

/// Reads a file from disk, choosing the parser from the content.
///
/// Zip archives (`PK\x03\x04`) are parsed as workbooks, everything else as
/// CSV. Legacy binary `.xls` files are rejected.
pub fn load_path(path: impl AsRef<Path>) -> Result<Table, IngestError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_bytes(&name, &bytes)
}

/// Parses uploaded bytes, sniffing the format from magic bytes and name.
pub fn parse_bytes(file_name: &str, bytes: &[u8]) -> Result<Table, IngestError> {
    const ZIP_MAGIC: &[u8] = b"PK\x03\x04";
    const OLE_MAGIC: &[u8] = &[0xD0, 0xCF, 0x11, 0xE0];
    let table = if bytes.starts_with(ZIP_MAGIC) {
        parse_workbook(bytes)?
    } else if bytes.starts_with(OLE_MAGIC) || file_name.to_ascii_lowercase().ends_with(".xls") {
        return Err(IngestError::UnsupportedFormat(
            "legacy binary .xls workbooks are not supported; save as .xlsx or .csv".into(),
        ));
    } else {
        parse_csv(bytes)?
    };
    Ok(table.with_source_name(file_name))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn unique_names_suffixes_repeats() {
        assert_eq!(unique_names(&s(&["t", "t"])), s(&["t", "t_2"]));
        assert_eq!(unique_names(&s(&["t", "t", "t"])), s(&["t", "t_2", "t_3"]));
    }

    #[test]
    fn unique_names_skips_existing_suffix() {
        assert_eq!(unique_names(&s(&["t", "t", "t_2"])), s(&["t", "t_3", "t_2"]));
    }

    #[test]
    fn blank_header_names_get_positional_names() {
        let t = Table::from_grid("x", s(&["a", " ", "b"]), vec![]).unwrap();
        assert_eq!(t.columns(), &s(&["a", "column_2", "b"])[..]);
    }

    #[test]
    fn all_blank_header_is_no_columns() {
        let err = Table::from_grid("x", s(&["", "  "]), vec![]).unwrap_err();
        assert!(matches!(err, IngestError::NoColumns));
    }

    #[test]
    fn rows_are_padded_and_truncated() {
        let t = Table::from_grid("x", s(&["a", "b"]), vec![s(&["1"]), s(&["1", "2", "3"])]).unwrap();
        assert_eq!(t.cell(0, "b"), Some(""));
        assert_eq!(t.row(1).unwrap().len(), 2);
        assert_eq!(t.cell(1, "b"), Some("2"));
    }

    #[test]
    fn legacy_xls_is_rejected() {
        let err = parse_bytes("old.xls", &[0xD0, 0xCF, 0x11, 0xE0, 0, 0]).unwrap_err();
        assert!(matches!(err, IngestError::UnsupportedFormat(_)));
    }
}
