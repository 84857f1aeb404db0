//! Schema-guided batch information extraction for academic literature exports.
//!
//! The pipeline runs in five stages:
//!
//! ```text
//! provider config -> upload + column mapping -> schema/prompt -> batch run -> export
//! ```
//!
//! Each stage lives in its own module:
//!
//! - [`table`] parses CSV and `.xlsx` exports into a rectangular [`Table`].
//! - [`mapping`] recognises database column headers (Title, Abstract, ...).
//! - [`schema`] holds extraction fields, presets, system-prompt generation and
//!   `{{column}}` template interpolation.
//! - [`provider`] is the OpenAI-compatible chat client with per-provider
//!   request tweaks.
//! - [`output`] salvages JSON objects from model replies and validates them.
//! - [`engine`] is the concurrent batch runner (retry, pause, cancel,
//!   checkpoints, progress).
//! - [`export`] writes merged results to CSV, JSON or `.xlsx`.
//! - [`store`] is the local configuration store (credentials, settings,
//!   checkpoints).

pub mod engine;
pub mod export;
pub mod mapping;
pub mod output;
pub mod provider;
pub mod schema;
pub mod store;
pub mod table;

pub use engine::{
    BatchEngine, Checkpoint, EngineEvent, RecordResult, RecordStatus, RunOutcome, RunPlan,
    RunState, TaskProgress,
};
pub use export::{ExportFormat, ExportJob, ExportMode};
pub use mapping::{Category, FieldMapping, MappingRule};
pub use provider::{ChatBackend, ChatClient, ChatExchange, ProviderId, ProviderProfile, RequestSettings};
pub use schema::{DataType, ExtractionField, Preset, PromptBundle, Schema};
pub use store::LocalStore;
pub use table::{Record, Table};
