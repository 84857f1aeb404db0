//! Salvaging JSON objects from model replies and validating them against an
//! extraction schema.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::schema::{DataType, ExtractionField, NOT_MENTIONED};

/// Chinese form of [`NOT_MENTIONED`], also accepted as a missing marker.
pub const NOT_MENTIONED_ZH: &str = "未提及";

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no JSON object found in response")]
    NoJsonFound,
    #[error("response JSON is not an object")]
    NotAnObject,
    #[error("required field {0:?} is missing")]
    RequiredFieldMissing(String),
    #[error("field {0:?} has a value that cannot be converted to its declared type")]
    TypeMismatch(String),
}

/// Strips a leading ```` ```lang ```` fence line and a trailing ```` ``` ````.
///
/// Only whole fence lines are removed, so text sharing a line with the
/// fence is kept.
pub fn strip_code_fence(text: &str) -> &str {
    let mut s = text.trim();
    if let Some(rest) = s.strip_prefix("```") {
        if let Some((tag, body)) = rest.split_once('\n') {
            if tag
                .trim()
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                s = body;
            }
        }
    }
    if let Some(body) = s.trim_end().strip_suffix("```") {
        if body.ends_with('\n') {
            s = body;
        }
    }
    s.trim()
}

fn parses_as_object(candidate: &str) -> bool {
    matches!(serde_json::from_str::<Value>(candidate), Ok(Value::Object(_)))
}

/// Greedy strategy: the span from the first `{` to the last `}`.
pub fn greedy_span(text: &str) -> Option<&str> {
    let open = text.find('{')?;
    let close = text.rfind('}')?;
    (close > open).then(|| &text[open..=close])
}

/// Balanced strategy: the first complete top-level object that parses.
///
/// Each `{` is tried as a start in turn; depth counting skips braces inside
/// JSON string literals.
pub fn first_balanced_object(text: &str) -> Option<&str> {
    text.match_indices('{').find_map(|(start, _)| {
        let end = balanced_end(&text[start..])?;
        let candidate = &text[start..start + end];
        parses_as_object(candidate).then_some(candidate)
    })
}

/// Byte length of the balanced `{...}` group at the start of `s`.
fn balanced_end(s: &str) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Returns the JSON object text embedded in a model reply.
///
/// Code fences are stripped first. The greedy first-`{`-to-last-`}` span is
/// returned when it parses; otherwise the first balanced object that parses.
pub fn extract_json_block(text: &str) -> Result<&str, ParseError> {
    let text = strip_code_fence(text);
    if let Some(span) = greedy_span(text) {
        if parses_as_object(span) {
            return Ok(span);
        }
    }
    first_balanced_object(text).ok_or(ParseError::NoJsonFound)
}

/// Schema-checked values from one reply.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedRecord {
    pub values: IndexMap<String, Value>,
    pub missing_fields: Vec<String>,
    pub coerced_fields: Vec<String>,
}

fn is_missing_marker(s: &str) -> bool {
    let s = s.trim();
    s == NOT_MENTIONED || s == NOT_MENTIONED_ZH
}

fn scalar_to_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Splits a list given as one string on ASCII/Chinese semicolons and commas.
pub fn split_list(s: &str) -> Vec<String> {
    s.split([';', '；', ',', '，', '、'])
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(String::from)
        .collect()
}

fn parse_bool(s: &str) -> Option<bool> {
    let t = s.trim();
    if t.eq_ignore_ascii_case("true") || t == "是" {
        Some(true)
    } else if t.eq_ignore_ascii_case("false") || t == "否" {
        Some(false)
    } else {
        None
    }
}

/// Converts a value to a field's declared type.
///
/// Returns the converted value and whether a conversion was needed.
pub fn coerce_value(field: &ExtractionField, value: &Value) -> Result<(Value, bool), ParseError> {
    let mismatch = || ParseError::TypeMismatch(field.name.clone());
    match field.data_type {
        DataType::Text => match value {
            Value::String(_) => Ok((value.clone(), false)),
            Value::Array(items) => {
                let parts: Option<Vec<String>> = items.iter().map(scalar_to_string).collect();
                Ok((Value::String(parts.ok_or_else(mismatch)?.join("; ")), true))
            }
            Value::Object(_) => Ok((Value::String(value.to_string()), true)),
            other => Ok((Value::String(scalar_to_string(other).ok_or_else(mismatch)?), true)),
        },
        DataType::Number => match value {
            Value::Number(n) if n.as_f64().is_some_and(f64::is_finite) => Ok((value.clone(), false)),
            Value::String(s) => {
                let n: f64 = s.trim().parse().map_err(|_| mismatch())?;
                let n = if n.fract() == 0.0 && n.abs() < 9e15 {
                    Value::from(n as i64)
                } else {
                    serde_json::Number::from_f64(n).map(Value::Number).ok_or_else(mismatch)?
                };
                Ok((n, true))
            }
            _ => Err(mismatch()),
        },
        DataType::List => match value {
            Value::Array(items) => {
                let mut coerced = false;
                let mut out = Vec::with_capacity(items.len());
                for item in items {
                    if !item.is_string() {
                        coerced = true;
                    }
                    out.push(Value::String(scalar_to_string(item).ok_or_else(mismatch)?));
                }
                Ok((Value::Array(out), coerced))
            }
            Value::String(s) => Ok((
                Value::Array(split_list(s).into_iter().map(Value::String).collect()),
                true,
            )),
            _ => Err(mismatch()),
        },
        DataType::Boolean => match value {
            Value::Bool(_) => Ok((value.clone(), false)),
            Value::String(s) => parse_bool(s)
                .map(|b| (Value::Bool(b), true))
                .ok_or_else(mismatch),
            _ => Err(mismatch()),
        },
    }
}

/// Validates a parsed object against the schema fields.
///
/// Absent or `null` fields are errors when required; the literal
/// "Not mentioned" (or 未提及) is accepted for any field and recorded as
/// missing. Keys not in the schema are ignored.
pub fn validate(candidate: &Value, fields: &[ExtractionField]) -> Result<ParsedRecord, ParseError> {
    let obj: &Map<String, Value> = candidate.as_object().ok_or(ParseError::NotAnObject)?;
    let mut record = ParsedRecord::default();
    for field in fields {
        let value = obj.get(&field.name).filter(|v| !v.is_null());
        let missing_marker = value
            .and_then(Value::as_str)
            .is_some_and(is_missing_marker);
        match value {
            None if field.required => {
                return Err(ParseError::RequiredFieldMissing(field.name.clone()))
            }
            None => {}
            Some(_) if missing_marker => {}
            Some(v) => {
                let (converted, coerced) = coerce_value(field, v)?;
                if coerced {
                    record.coerced_fields.push(field.name.clone());
                }
                record.values.insert(field.name.clone(), converted);
                continue;
            }
        }
        record.missing_fields.push(field.name.clone());
        record
            .values
            .insert(field.name.clone(), Value::String(NOT_MENTIONED.to_string()));
    }
    Ok(record)
}

/// Extracts and validates a reply in one step.
pub fn parse_response(text: &str, fields: &[ExtractionField]) -> Result<ParsedRecord, ParseError> {
    let block = extract_json_block(text)?;
    let value: Value = serde_json::from_str(block).map_err(|_| ParseError::NoJsonFound)?;
    validate(&value, fields)
}
