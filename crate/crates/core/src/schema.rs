//! Extraction schemas, presets, system-prompt generation and `{{column}}`
//! user-prompt templates.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapping::{Category, FieldMapping};
use crate::table::Record;

/// First line of every generated system prompt.
pub const ROLE_LINE: &str = "You are an academic paper information extraction assistant. \
Read the bibliographic record provided by the user and reply with a single JSON object \
using exactly the keys listed below, without any other text.";

/// Closing instruction of every generated system prompt.
pub const FALLBACK_SENTENCE: &str = "If a field is not mentioned, fill in Not mentioned.";

/// Value the model is told to emit for absent information.
pub const NOT_MENTIONED: &str = "Not mentioned";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("extraction schema has no fields")]
    EmptySchema,
    #[error("field name must not be empty")]
    EmptyFieldName,
    #[error("field name {0:?} may not contain braces or line breaks")]
    InvalidFieldName(String),
    #[error("duplicate field name {0:?}")]
    DuplicateField(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("template references unknown column {0:?}")]
    UnknownPlaceholder(String),
    #[error("unterminated or empty placeholder at byte offset {offset}")]
    TemplateSyntax { offset: usize },
    #[error("invalid schema document: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    #[default]
    Text,
    Number,
    List,
    Boolean,
}

impl DataType {
    /// Annotation used in typed schema blocks.
    pub fn annotation(self) -> &'static str {
        match self {
            DataType::Text => "string",
            DataType::Number => "number",
            DataType::List => "array of strings",
            DataType::Boolean => "boolean",
        }
    }
}

impl FromStr for DataType {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "text" => Ok(DataType::Text),
            "number" => Ok(DataType::Number),
            "list" => Ok(DataType::List),
            "boolean" => Ok(DataType::Boolean),
            other => Err(SchemaError::Json(format!("unknown data type {other:?}"))),
        }
    }
}

fn default_required() -> bool {
    true
}

/// One user-defined output field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionField {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(rename = "type", default)]
    pub data_type: DataType,
    #[serde(default = "default_required")]
    pub required: bool,
}

impl ExtractionField {
    pub fn new(name: impl Into<String>, description: impl Into<String>, data_type: DataType) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            data_type,
            required: true,
        }
    }

    pub fn optional(mut self) -> Self {
        self.required = false;
        self
    }
}

/// Checks names are non-empty, unique and free of braces and line breaks.
pub fn validate_fields(fields: &[ExtractionField]) -> Result<(), SchemaError> {
    if fields.is_empty() {
        return Err(SchemaError::EmptySchema);
    }
    let mut seen = HashSet::new();
    for f in fields {
        if f.name.trim().is_empty() {
            return Err(SchemaError::EmptyFieldName);
        }
        if f.name.contains(['{', '}', '\n', '\r']) {
            return Err(SchemaError::InvalidFieldName(f.name.clone()));
        }
        if !seen.insert(f.name.as_str()) {
            return Err(SchemaError::DuplicateField(f.name.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    PaperInfo,
    LitReview,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::PaperInfo => "paper_info",
            Preset::LitReview => "lit_review",
        }
    }

    pub fn fields(self) -> Vec<ExtractionField> {
        let specs: &[(&str, &str)] = match self {
            Preset::PaperInfo => &[
                ("Research Topic", "What core problem or question does the study address?"),
                ("Methodology", "Study design and methods used."),
                ("Dataset", "Data, samples, or subjects analysed, including size."),
                ("Main Conclusions", "The principal findings reported by the authors."),
                ("Innovation Points", "What is new compared with prior work."),
                ("Research Limitations", "Limitations acknowledged or evident in the study."),
            ],
            Preset::LitReview => &[
                ("Research Domain", "Field or sub-discipline the work belongs to."),
                ("Technical Approach", "Core technique or model proposed or applied."),
                ("Baseline Methods", "Methods the work compares against."),
                ("Evaluation Metrics", "Metrics used to assess results."),
                ("Experimental Results", "Key quantitative or qualitative results."),
                ("Future Directions", "Open problems or future work mentioned."),
            ],
        };
        specs
            .iter()
            .map(|(name, desc)| ExtractionField::new(*name, *desc, DataType::Text))
            .collect()
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "paper_info" => Ok(Preset::PaperInfo),
            "lit_review" => Ok(Preset::LitReview),
            other => Err(SchemaError::UnknownPreset(other.to_string())),
        }
    }
}

/// Returns the fields of a named preset.
pub fn preset(name: &str) -> Result<Vec<ExtractionField>, SchemaError> {
    Ok(name.parse::<Preset>()?.fields())
}

/// Generates the system prompt for `fields`.
///
/// Layout: the role line (followed by per-field instructions when any field
/// has a description), a brace-delimited block with one `  name: annotation`
/// line per field and commas after all but the last line, then the
/// fallback sentence. Without `typed_annotations` every annotation is
/// `string`.
pub fn generate_system_prompt(
    fields: &[ExtractionField],
    typed_annotations: bool,
) -> Result<String, SchemaError> {
    validate_fields(fields)?;
    let mut prompt = String::from(ROLE_LINE);

    let described: Vec<_> = fields
        .iter()
        .filter(|f| !f.description.trim().is_empty())
        .collect();
    if !described.is_empty() {
        prompt.push_str(" Field instructions:");
        for f in described {
            prompt.push_str("\n- ");
            prompt.push_str(&f.name);
            prompt.push_str(": ");
            prompt.push_str(&sanitize_description(&f.description));
        }
    }

    prompt.push_str("\n{");
    let last = fields.len() - 1;
    for (i, f) in fields.iter().enumerate() {
        prompt.push_str("\n  ");
        prompt.push_str(&f.name);
        prompt.push_str(": ");
        prompt.push_str(if typed_annotations {
            f.data_type.annotation()
        } else {
            "string"
        });
        if i < last {
            prompt.push(',');
        }
    }
    prompt.push_str("\n}\n");
    prompt.push_str(FALLBACK_SENTENCE);
    Ok(prompt)
}

// Braces would break the single schema block; line breaks would split the
// instruction list.
fn sanitize_description(desc: &str) -> String {
    desc.trim()
        .chars()
        .map(|c| match c {
            '{' => '(',
            '}' => ')',
            '\n' | '\r' => ' ',
            c => c,
        })
        .collect()
}

/// Recovers `(name, annotation)` pairs from a generated system prompt's
/// schema block.
pub fn schema_block_fields(system_prompt: &str) -> Option<Vec<(String, String)>> {
    let open = system_prompt.find('{')?;
    let close = system_prompt.rfind('}')?;
    if close < open {
        return None;
    }
    system_prompt[open + 1..close]
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let l = l.strip_suffix(',').unwrap_or(l);
            l.rsplit_once(": ")
                .map(|(n, a)| (n.to_string(), a.to_string()))
        })
        .collect()
}

/// A `{{name}}` occurrence in a template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placeholder {
    pub name: String,
    /// Byte range of the whole `{{name}}` token.
    pub span: std::ops::Range<usize>,
}

/// Scans a template for placeholders.
///
/// Grammar: `{{` + one or more characters other than `}` + `}}`. An opening
/// `{{` that is not closed that way is a syntax error at its byte offset.
pub fn scan_placeholders(template: &str) -> Result<Vec<Placeholder>, SchemaError> {
    let mut found = Vec::new();
    let mut pos = 0;
    while let Some(rel) = template[pos..].find("{{") {
        let start = pos + rel;
        let name_start = start + 2;
        let close = template[name_start..]
            .find('}')
            .map(|r| name_start + r)
            .ok_or(SchemaError::TemplateSyntax { offset: start })?;
        if close == name_start || !template[close..].starts_with("}}") {
            return Err(SchemaError::TemplateSyntax { offset: start });
        }
        found.push(Placeholder {
            name: template[name_start..close].to_string(),
            span: start..close + 2,
        });
        pos = close + 2;
    }
    Ok(found)
}

/// Replaces every `{{name}}` with `row[name]` in one left-to-right pass.
///
/// Substituted values are never re-scanned, so braces inside cell values
/// come through literally.
pub fn interpolate(template: &str, row: &Record) -> Result<String, SchemaError> {
    let placeholders = scan_placeholders(template)?;
    let mut out = String::with_capacity(template.len());
    let mut last = 0;
    for p in placeholders {
        let value = row
            .get(&p.name)
            .ok_or_else(|| SchemaError::UnknownPlaceholder(p.name.clone()))?;
        out.push_str(&template[last..p.span.start]);
        out.push_str(value);
        last = p.span.end;
    }
    out.push_str(&template[last..]);
    Ok(out)
}

/// Placeholders found in a template, and which of them name no column.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TemplateReport {
    pub placeholders: Vec<String>,
    pub unknown: Vec<String>,
}

impl TemplateReport {
    pub fn is_valid(&self) -> bool {
        self.unknown.is_empty()
    }
}

pub fn validate_template(template: &str, columns: &[String]) -> Result<TemplateReport, SchemaError> {
    let mut report = TemplateReport::default();
    for p in scan_placeholders(template)? {
        if report.placeholders.contains(&p.name) {
            continue;
        }
        if !columns.contains(&p.name) {
            report.unknown.push(p.name.clone());
        }
        report.placeholders.push(p.name);
    }
    Ok(report)
}

/// A template built from the mapped Title/Abstract/Keywords columns, or
/// from every column when none of those is mapped.
pub fn default_template(mapping: &FieldMapping, columns: &[String]) -> String {
    let mut lines = Vec::new();
    for cat in [Category::Title, Category::Abstract, Category::Keywords] {
        if let Some(col) = mapping.column_for(cat) {
            lines.push(format!("{}: {{{{{col}}}}}", cat.label()));
        }
    }
    if lines.is_empty() {
        lines = columns.iter().map(|c| format!("{c}: {{{{{c}}}}}")).collect();
    }
    format!(
        "Extract the requested information from the following paper.\n\n{}",
        lines.join("\n")
    )
}

/// Generated system prompt plus the user template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_prompt: String,
    pub user_template: String,
}

impl PromptBundle {
    pub fn render(&self, row: &Record) -> Result<String, SchemaError> {
        interpolate(&self.user_template, row)
    }
}

#[derive(Deserialize)]
struct RawSchema {
    #[serde(default)]
    fields: Vec<ExtractionField>,
    #[serde(default)]
    user_template: String,
    #[serde(default)]
    preset: Option<Preset>,
    #[serde(default)]
    typed_annotations: bool,
}

/// A complete schema document: fields, user template and prompt options.
///
/// In JSON form, a document naming a `preset` with no `fields` takes the
/// preset's fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema")]
pub struct Schema {
    fields: Vec<ExtractionField>,
    user_template: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<Preset>,
    typed_annotations: bool,
}

impl TryFrom<RawSchema> for Schema {
    type Error = SchemaError;

    fn try_from(raw: RawSchema) -> Result<Self, Self::Error> {
        let fields = match (raw.fields.is_empty(), raw.preset) {
            (true, Some(p)) => p.fields(),
            _ => raw.fields,
        };
        validate_fields(&fields)?;
        scan_placeholders(&raw.user_template)?;
        Ok(Self {
            fields,
            user_template: raw.user_template,
            preset: raw.preset,
            typed_annotations: raw.typed_annotations,
        })
    }
}

impl Schema {
    pub fn new(fields: Vec<ExtractionField>, user_template: impl Into<String>) -> Result<Self, SchemaError> {
        Self::try_from(RawSchema {
            fields,
            user_template: user_template.into(),
            preset: None,
            typed_annotations: false,
        })
    }

    pub fn from_preset(preset: Preset, user_template: impl Into<String>) -> Self {
        Self {
            fields: preset.fields(),
            user_template: user_template.into(),
            preset: Some(preset),
            typed_annotations: false,
        }
    }

    pub fn from_json(json: &str) -> Result<Self, SchemaError> {
        serde_json::from_str(json).map_err(|e| SchemaError::Json(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn with_typed_annotations(mut self, on: bool) -> Self {
        self.typed_annotations = on;
        self
    }

    pub fn with_user_template(mut self, template: impl Into<String>) -> Result<Self, SchemaError> {
        let template = template.into();
        scan_placeholders(&template)?;
        self.user_template = template;
        Ok(self)
    }

    pub fn fields(&self) -> &[ExtractionField] {
        &self.fields
    }

    pub fn field(&self, name: &str) -> Option<&ExtractionField> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn user_template(&self) -> &str {
        &self.user_template
    }

    pub fn preset(&self) -> Option<Preset> {
        self.preset
    }

    pub fn typed_annotations(&self) -> bool {
        self.typed_annotations
    }

    pub fn bundle(&self) -> Result<PromptBundle, SchemaError> {
        Ok(PromptBundle {
            system_prompt: generate_system_prompt(&self.fields, self.typed_annotations)?,
            user_template: self.user_template.clone(),
        })
    }
}
