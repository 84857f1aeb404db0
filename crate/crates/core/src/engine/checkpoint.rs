//! Checkpoint files: one JSON document per task.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::RecordResult;
use crate::provider::ProviderId;
use crate::schema::ExtractionField;
use crate::store::{write_atomic, StoreError};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("no checkpoint for task {0}")]
    NotFound(String),
    #[error("checkpoint for task {task_id} was written with a different configuration")]
    StaleCheckpoint { task_id: String },
    #[error("checkpoint file {path} is unreadable: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Completed results of a task, tied to the configuration that produced
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub task_id: String,
    pub config_digest: String,
    pub saved_at: DateTime<Utc>,
    pub results: Vec<RecordResult>,
}

impl Checkpoint {
    /// Keeps only terminal results, one per row, ordered by row.
    pub fn new(task_id: impl Into<String>, config_digest: impl Into<String>, results: impl IntoIterator<Item = RecordResult>) -> Self {
        let mut results: Vec<RecordResult> = results
            .into_iter()
            .filter(|r| r.status.is_terminal())
            .collect();
        results.sort_by_key(|r| r.row_index);
        results.dedup_by_key(|r| r.row_index);
        Self {
            task_id: task_id.into(),
            config_digest: config_digest.into(),
            saved_at: Utc::now(),
            results,
        }
    }
}

/// Digest of everything that shapes a reply: schema fields, user template,
/// model and provider.
pub fn config_digest(
    fields: &[ExtractionField],
    user_template: &str,
    model: &str,
    provider: ProviderId,
) -> String {
    let doc = serde_json::json!({
        "fields": fields,
        "user_template": user_template,
        "model": model,
        "provider": provider,
    });
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))
}

/// Stable task identifier derived from input bytes.
pub fn task_id_for(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

#[derive(Debug, Clone)]
pub struct CheckpointStore {
    dir: PathBuf,
}

impl CheckpointStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, task_id: &str) -> PathBuf {
        let safe: String = task_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        self.dir.join(format!("{safe}.json"))
    }

    pub fn save(&self, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
        let bytes = serde_json::to_vec(checkpoint).expect("checkpoint serializes");
        write_atomic(&self.path_for(&checkpoint.task_id), &bytes)?;
        Ok(())
    }

    /// Reads a checkpoint without checking its digest.
    pub fn read(&self, task_id: &str) -> Result<Checkpoint, CheckpointError> {
        let path = self.path_for(task_id);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(CheckpointError::NotFound(task_id.to_string()))
            }
            Err(e) => return Err(StoreError::io(&path, e).into()),
        };
        serde_json::from_slice(&bytes).map_err(|e| CheckpointError::Corrupt {
            path,
            message: e.to_string(),
        })
    }

    /// Loads the task's checkpoint, refusing one written under another
    /// configuration.
    pub fn load(&self, task_id: &str, expected_digest: &str) -> Result<Checkpoint, CheckpointError> {
        let cp = self.read(task_id)?;
        if cp.config_digest != expected_digest {
            return Err(CheckpointError::StaleCheckpoint {
                task_id: task_id.to_string(),
            });
        }
        Ok(cp)
    }

    pub fn remove(&self, task_id: &str) -> Result<(), CheckpointError> {
        let path = self.path_for(task_id);
        match std::fs::remove_file(&path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(StoreError::io(&path, e).into()),
        }
    }
}
