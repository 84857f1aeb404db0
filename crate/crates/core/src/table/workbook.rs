use std::io::Cursor;

use calamine::{Data, Reader, Xlsx};

use super::{IngestError, Table};

/// Parses the first worksheet of an OOXML workbook; row 1 is the header.
pub fn parse_workbook(bytes: &[u8]) -> Result<Table, IngestError> {
    if bytes.is_empty() {
        return Err(IngestError::EmptyFile);
    }
    let mut book =
        Xlsx::new(Cursor::new(bytes)).map_err(|e| IngestError::WorkbookFormat(e.to_string()))?;
    let first = book
        .sheet_names()
        .first()
        .cloned()
        .ok_or_else(|| IngestError::WorkbookFormat("workbook has no sheets".into()))?;
    let range = book
        .worksheet_range(&first)
        .map_err(|e| IngestError::WorkbookFormat(e.to_string()))?;

    // Keep column positions stable when the used range starts right of A.
    let lead = range.start().map_or(0, |(_, col)| col as usize);
    let mut rows = range
        .rows()
        .map(|r| {
            std::iter::repeat_n(String::new(), lead)
                .chain(r.iter().map(cell_text))
                .collect::<Vec<String>>()
        })
        .filter(|r| r.iter().any(|c| !c.trim().is_empty()));
    let header = rows.next().ok_or(IngestError::NoColumns)?;
    Table::from_grid(first, header, rows.collect())
}

fn cell_text(cell: &Data) -> String {
    match cell {
        Data::Empty => String::new(),
        Data::String(s) => s.clone(),
        Data::Int(i) => i.to_string(),
        Data::Float(f) => float_text(*f),
        Data::Bool(b) => b.to_string(),
        Data::DateTime(dt) => match dt.as_datetime() {
            Some(ndt) if ndt.time() == chrono::NaiveTime::MIN => ndt.format("%Y-%m-%d").to_string(),
            Some(ndt) => ndt.format("%Y-%m-%d %H:%M:%S").to_string(),
            None => float_text(dt.as_f64()),
        },
        Data::DateTimeIso(s) | Data::DurationIso(s) => s.clone(),
        Data::Error(e) => format!("#{e:?}"),
    }
}

/// Whole numbers print without a fractional part (a year stays `2024`).
fn float_text(f: f64) -> String {
    if f.fract() == 0.0 && f.abs() < 1e15 {
        format!("{}", f as i64)
    } else {
        format!("{f}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rust_xlsxwriter::Workbook;

    fn workbook(build: impl FnOnce(&mut Workbook)) -> Vec<u8> {
        let mut wb = Workbook::new();
        build(&mut wb);
        wb.save_to_buffer().unwrap()
    }

    #[test]
    fn first_sheet_header_and_numbers() {
        let bytes = workbook(|wb| {
            let s = wb.add_worksheet();
            s.write_string(0, 0, "篇名").unwrap();
            s.write_string(0, 1, "年").unwrap();
            s.write_string(1, 0, "A").unwrap();
            s.write_number(1, 1, 2024).unwrap();
            s.write_string(2, 0, "B").unwrap();
            s.write_number(2, 1, 1.5).unwrap();
            wb.add_worksheet().write_string(0, 0, "other").unwrap();
            wb.add_worksheet().write_string(0, 0, "third").unwrap();
        });
        let t = parse_workbook(&bytes).unwrap();
        assert_eq!(t.columns(), ["篇名", "年"]);
        assert_eq!(t.len(), 2);
        assert_eq!(t.cell(0, "年"), Some("2024"));
        assert_eq!(t.cell(1, "年"), Some("1.5"));
    }

    #[test]
    fn missing_trailing_cell_is_empty() {
        let bytes = workbook(|wb| {
            let s = wb.add_worksheet();
            s.write_string(0, 0, "a").unwrap();
            s.write_string(0, 1, "b").unwrap();
            s.write_string(1, 0, "x").unwrap();
            s.write_boolean(2, 1, true).unwrap();
        });
        let t = parse_workbook(&bytes).unwrap();
        assert_eq!(t.cell(0, "b"), Some(""));
        assert_eq!(t.cell(1, "a"), Some(""));
        assert_eq!(t.cell(1, "b"), Some("true"));
    }

    #[test]
    fn empty_sheet_has_no_columns() {
        let bytes = workbook(|wb| {
            wb.add_worksheet();
        });
        assert!(matches!(parse_workbook(&bytes), Err(IngestError::NoColumns)));
    }

    #[test]
    fn garbage_is_a_format_error() {
        assert!(matches!(
            parse_workbook(b"PK\x03\x04 not really"),
            Err(IngestError::WorkbookFormat(_))
        ));
    }
}
