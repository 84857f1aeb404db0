use super::{IngestError, Table, UTF8_BOM};

/// Parses a UTF-8 CSV export (comma delimiter, double-quote quoting).
///
/// A leading byte-order mark is stripped. CRLF, LF and lone CR line endings
/// are accepted; physically blank lines are skipped.
pub fn parse_csv(bytes: &[u8]) -> Result<Table, IngestError> {
    let bytes = bytes.strip_prefix(UTF8_BOM).unwrap_or(bytes);
    let text = std::str::from_utf8(bytes).map_err(|e| IngestError::Encoding {
        offset: e.valid_up_to(),
    })?;
    if text.trim().is_empty() {
        return Err(IngestError::EmptyFile);
    }
    let mut records = read_records(text)?.into_iter();
    let header = records.next().ok_or(IngestError::EmptyFile)?;
    Table::from_grid("", header, records.collect())
}

/// Reads every record, skipping blank lines. Rows may differ in length.
fn read_records(text: &str) -> Result<Vec<Vec<String>>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    reader
        .records()
        .map(|r| {
            r.map(|rec| rec.iter().map(str::to_string).collect())
                .map_err(|e| IngestError::CsvSyntax {
                    line: e.position().map_or(0, |p| p.line() as usize),
                    message: e.to_string(),
                })
        })
        .collect()
}
