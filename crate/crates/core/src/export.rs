//! Merging extraction results back into the table and writing them out.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::engine::{RecordResult, RecordStatus};
use crate::schema::ExtractionField;
use crate::table::{unique_names, Table, UTF8_BOM};

pub const STATUS_COLUMN: &str = "extraction_status";
pub const ERROR_COLUMN: &str = "extraction_error";

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("no completed results to export")]
    NothingToExport,
    #[error("unknown export {kind} {value:?}")]
    UnknownOption { kind: &'static str, value: String },
    #[error("CSV write failed: {0}")]
    Csv(String),
    #[error("workbook write failed: {0}")]
    Workbook(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportMode {
    AllColumns,
    ExtractedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Xlsx,
    Csv,
    Json,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Xlsx => "xlsx",
            ExportFormat::Csv => "csv",
            ExportFormat::Json => "json",
        }
    }

    pub fn content_type(self) -> &'static str {
        match self {
            ExportFormat::Xlsx => "application/vnd.openxmlformats-officedocument.spreadsheetml.sheet",
            ExportFormat::Csv => "text/csv; charset=utf-8",
            ExportFormat::Json => "application/json",
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

impl FromStr for ExportFormat {
    type Err = ExportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "xlsx" => Ok(ExportFormat::Xlsx),
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            _ => Err(ExportError::UnknownOption {
                kind: "format",
                value: s.to_string(),
            }),
        }
    }
}

impl FromStr for ExportMode {
    type Err = ExportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "all_columns" | "all" => Ok(ExportMode::AllColumns),
            "extracted_only" | "extracted" => Ok(ExportMode::ExtractedOnly),
            _ => Err(ExportError::UnknownOption {
                kind: "mode",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportJob {
    pub mode: ExportMode,
    pub format: ExportFormat,
    #[serde(default)]
    pub include_status: bool,
}

impl ExportJob {
    pub fn new(mode: ExportMode, format: ExportFormat) -> Self {
        Self {
            mode,
            format,
            include_status: false,
        }
    }

    pub fn with_status(mut self, on: bool) -> Self {
        self.include_status = on;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source<'a> {
    Original(&'a str),
    Field(&'a ExtractionField),
    Status,
    Error,
}

/// Header names and where each column's cells come from.
fn layout<'a>(table: &'a Table, fields: &'a [ExtractionField], job: &ExportJob) -> (Vec<String>, Vec<Source<'a>>) {
    let mut sources = Vec::new();
    if job.mode == ExportMode::AllColumns {
        sources.extend(table.columns().iter().map(|c| Source::Original(c)));
    }
    sources.extend(fields.iter().map(Source::Field));
    if job.include_status {
        sources.push(Source::Status);
        sources.push(Source::Error);
    }
    let raw: Vec<String> = sources
        .iter()
        .map(|s| match s {
            Source::Original(c) => c.to_string(),
            Source::Field(f) => f.name.clone(),
            Source::Status => STATUS_COLUMN.to_string(),
            Source::Error => ERROR_COLUMN.to_string(),
        })
        .collect();
    (unique_names(&raw), sources)
}

fn status_str(status: RecordStatus) -> &'static str {
    match status {
        RecordStatus::Pending => "pending",
        RecordStatus::Running => "running",
        RecordStatus::Success => "success",
        RecordStatus::Failed => "failed",
    }
}

/// Flat text form used in CSV and spreadsheet cells.
pub fn cell_text(value: &Value) -> String {
    match value {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(cell_text).collect::<Vec<_>>().join("; "),
        other => other.to_string(),
    }
}

/// Value of a column for one row; `None` means an empty cell.
fn cell<'a>(table: &'a Table, row: usize, result: Option<&'a RecordResult>, src: Source<'a>) -> Option<Value> {
    match src {
        Source::Original(c) => table.cell(row, c).map(|s| Value::String(s.to_string())),
        Source::Field(f) => result
            .filter(|r| r.status.is_terminal())
            .and_then(|r| r.extracted.get(&f.name))
            .cloned(),
        Source::Status => Some(Value::String(
            status_str(result.map_or(RecordStatus::Pending, |r| r.status)).to_string(),
        )),
        Source::Error => result.and_then(|r| r.error.clone()).map(Value::String),
    }
}

/// Serializes the table merged with `results` (matched by row index).
pub fn export(
    table: &Table,
    results: &[RecordResult],
    fields: &[ExtractionField],
    job: &ExportJob,
) -> Result<Vec<u8>, ExportError> {
    let by_row: HashMap<usize, &RecordResult> = results.iter().map(|r| (r.row_index, r)).collect();
    let any_terminal = results
        .iter()
        .any(|r| r.status.is_terminal() && r.row_index < table.len());
    if job.mode == ExportMode::ExtractedOnly && !any_terminal {
        return Err(ExportError::NothingToExport);
    }
    let (header, sources) = layout(table, fields, job);
    let rows = (0..table.len()).map(|row| {
        let result = by_row.get(&row).copied();
        sources
            .iter()
            .map(|s| cell(table, row, result, *s))
            .collect::<Vec<Option<Value>>>()
    });
    match job.format {
        ExportFormat::Csv => write_csv(&header, rows),
        ExportFormat::Json => Ok(write_json(&header, rows)),
        ExportFormat::Xlsx => write_xlsx(&header, rows),
    }
}

fn write_csv(header: &[String], rows: impl Iterator<Item = Vec<Option<Value>>>) -> Result<Vec<u8>, ExportError> {
    let mut out = UTF8_BOM.to_vec();
    {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_writer(&mut out);
        let err = |e: csv::Error| ExportError::Csv(e.to_string());
        w.write_record(header).map_err(err)?;
        for row in rows {
            let cells = row.iter().map(|c| c.as_ref().map(cell_text).unwrap_or_default());
            w.write_record(cells).map_err(err)?;
        }
        w.flush().map_err(|e| ExportError::Csv(e.to_string()))?;
    }
    Ok(out)
}

fn write_json(header: &[String], rows: impl Iterator<Item = Vec<Option<Value>>>) -> Vec<u8> {
    let array: Vec<Value> = rows
        .map(|row| {
            let obj: Map<String, Value> = header
                .iter()
                .cloned()
                .zip(row.into_iter().map(|c| c.unwrap_or(Value::Null)))
                .collect();
            Value::Object(obj)
        })
        .collect();
    let mut out = serde_json::to_vec_pretty(&array).expect("values serialize");
    out.push(b'\n');
    out
}

fn write_xlsx(header: &[String], rows: impl Iterator<Item = Vec<Option<Value>>>) -> Result<Vec<u8>, ExportError> {
    use rust_xlsxwriter::{Format, Workbook};

    let err = |e: rust_xlsxwriter::XlsxError| ExportError::Workbook(e.to_string());
    let mut workbook = Workbook::new();
    let sheet = workbook.add_worksheet();
    sheet.set_name("Results").map_err(err)?;
    let bold = Format::new().set_bold();
    for (c, name) in header.iter().enumerate() {
        sheet.write_string_with_format(0, c as u16, name, &bold).map_err(err)?;
    }
    for (r, row) in rows.enumerate() {
        let r = r as u32 + 1;
        for (c, value) in row.into_iter().enumerate() {
            let c = c as u16;
            match value {
                None | Some(Value::Null) => {}
                Some(Value::Number(n)) if n.as_f64().is_some() => {
                    sheet.write_number(r, c, n.as_f64().unwrap()).map_err(err)?;
                }
                Some(v) => {
                    sheet.write_string(r, c, cell_text(&v)).map_err(err)?;
                }
            }
        }
    }
    workbook.save_to_buffer().map_err(err)
}
