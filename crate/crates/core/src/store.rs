//! Local configuration store: credentials, cached settings and checkpoints.
//!
//! Everything lives under one directory (`$LITEXTRACT_HOME`, or the platform
//! config directory). API keys are written Base64-encoded behind a `b64:`
//! marker. That is obfuscation against casual inspection of the file, not
//! encryption.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::engine::checkpoint::CheckpointStore;
use crate::provider::ProviderId;

/// Overrides the store directory.
pub const HOME_ENV: &str = "LITEXTRACT_HOME";
const CONFIG_FILE: &str = "config.json";
const CHECKPOINT_DIR: &str = "checkpoints";
const CREDENTIAL_MARKER: &str = "b64:";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no stored credential for provider {0}")]
    NoCredential(ProviderId),
    #[error("credential must not be empty")]
    EmptyCredential,
    #[error("stored credential for {0} is corrupt")]
    CorruptCredential(ProviderId),
    #[error("no configuration directory available; set {HOME_ENV}")]
    NoHome,
    #[error("config file {path} is not valid JSON: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("storage I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ConfigFile {
    #[serde(default)]
    credentials: BTreeMap<ProviderId, String>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    settings: Value,
}

/// Writes `bytes` to `path` via a temporary file and rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    let tmp = path.with_extension("tmp");
    let mut file = std::fs::File::create(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| StoreError::io(&tmp, e))?;
    file.sync_all().map_err(|e| StoreError::io(&tmp, e))?;
    drop(file);
    std::fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))
}

#[derive(Debug)]
pub struct LocalStore {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl LocalStore {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            write_lock: Mutex::new(()),
        }
    }

    /// Opens `$LITEXTRACT_HOME`, falling back to `<config dir>/litextract`.
    pub fn open_default() -> Result<Self, StoreError> {
        if let Some(home) = std::env::var_os(HOME_ENV).filter(|v| !v.is_empty()) {
            return Ok(Self::open(home));
        }
        let base = dirs::config_dir().ok_or(StoreError::NoHome)?;
        Ok(Self::open(base.join("litextract")))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn checkpoints(&self) -> CheckpointStore {
        CheckpointStore::new(self.root.join(CHECKPOINT_DIR))
    }

    fn read_config(&self) -> Result<ConfigFile, StoreError> {
        let path = self.config_path();
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
                path,
                message: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(ConfigFile::default()),
            Err(e) => Err(StoreError::io(&path, e)),
        }
    }

    fn update_config(&self, f: impl FnOnce(&mut ConfigFile)) -> Result<(), StoreError> {
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut cfg = self.read_config()?;
        f(&mut cfg);
        let bytes = serde_json::to_vec_pretty(&cfg).expect("config serializes");
        write_atomic(&self.config_path(), &bytes)
    }

    pub fn store_credential(&self, provider: ProviderId, key: &str) -> Result<(), StoreError> {
        if key.is_empty() {
            return Err(StoreError::EmptyCredential);
        }
        let encoded = format!("{CREDENTIAL_MARKER}{}", STANDARD.encode(key.as_bytes()));
        self.update_config(|cfg| {
            cfg.credentials.insert(provider, encoded);
        })
    }

    pub fn load_credential(&self, provider: ProviderId) -> Result<String, StoreError> {
        let cfg = self.read_config()?;
        let stored = cfg
            .credentials
            .get(&provider)
            .ok_or(StoreError::NoCredential(provider))?;
        let encoded = stored
            .strip_prefix(CREDENTIAL_MARKER)
            .ok_or(StoreError::CorruptCredential(provider))?;
        let bytes = STANDARD
            .decode(encoded)
            .map_err(|_| StoreError::CorruptCredential(provider))?;
        String::from_utf8(bytes).map_err(|_| StoreError::CorruptCredential(provider))
    }

    pub fn remove_credential(&self, provider: ProviderId) -> Result<(), StoreError> {
        self.update_config(|cfg| {
            cfg.credentials.remove(&provider);
        })
    }

    pub fn save_settings(&self, settings: &Value) -> Result<(), StoreError> {
        self.update_config(|cfg| cfg.settings = settings.clone())
    }

    /// Cached settings, `Value::Null` when none are stored.
    pub fn load_settings(&self) -> Result<Value, StoreError> {
        Ok(self.read_config()?.settings)
    }

    /// Removes credentials, cached settings and checkpoints. Idempotent.
    pub fn clear_all_data(&self) -> Result<(), StoreError> {
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        for path in [self.config_path(), self.config_path().with_extension("tmp")] {
            match std::fs::remove_file(&path) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(StoreError::io(&path, e)),
            }
        }
        let dir = self.root.join(CHECKPOINT_DIR);
        match std::fs::remove_dir_all(&dir) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(StoreError::io(&dir, e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store() -> (tempfile::TempDir, LocalStore) {
        let dir = tempfile::tempdir().unwrap();
        let store = LocalStore::open(dir.path().join("home"));
        (dir, store)
    }

    #[test]
    fn credential_round_trip_is_obfuscated() {
        let (_d, s) = store();
        s.store_credential(ProviderId::Deepseek, "sk-abc").unwrap();
        assert_eq!(s.load_credential(ProviderId::Deepseek).unwrap(), "sk-abc");
        let raw = std::fs::read_to_string(s.config_path()).unwrap();
        assert!(!raw.contains("sk-abc"));
        assert!(raw.contains("b64:"));
    }

    #[test]
    fn load_before_store() {
        let (_d, s) = store();
        assert!(matches!(
            s.load_credential(ProviderId::Qwen),
            Err(StoreError::NoCredential(ProviderId::Qwen))
        ));
    }

    #[test]
    fn empty_key_rejected() {
        let (_d, s) = store();
        assert!(matches!(
            s.store_credential(ProviderId::Qwen, ""),
            Err(StoreError::EmptyCredential)
        ));
    }

    #[test]
    fn clear_removes_everything_and_is_idempotent() {
        let (_d, s) = store();
        s.clear_all_data().unwrap();
        s.store_credential(ProviderId::Openai, "sk-1").unwrap();
        s.save_settings(&serde_json::json!({"model": "m"})).unwrap();
        let cp_dir = s.root().join(CHECKPOINT_DIR);
        std::fs::create_dir_all(&cp_dir).unwrap();
        std::fs::write(cp_dir.join("t.json"), "{}").unwrap();

        s.clear_all_data().unwrap();
        assert!(matches!(
            s.load_credential(ProviderId::Openai),
            Err(StoreError::NoCredential(_))
        ));
        assert!(s.load_settings().unwrap().is_null());
        assert!(!cp_dir.exists());
        s.clear_all_data().unwrap();
    }

    #[test]
    fn settings_survive_credential_updates() {
        let (_d, s) = store();
        s.save_settings(&serde_json::json!({"provider": "qwen"})).unwrap();
        s.store_credential(ProviderId::Qwen, "k").unwrap();
        assert_eq!(s.load_settings().unwrap()["provider"], "qwen");
        s.remove_credential(ProviderId::Qwen).unwrap();
        assert!(s.load_credential(ProviderId::Qwen).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn any_utf8_key_round_trips(key in "\\PC{1,40}") {
            let (_d, s) = store();
            s.store_credential(ProviderId::Custom, &key).unwrap();
            prop_assert_eq!(s.load_credential(ProviderId::Custom).unwrap(), key);
        }
    }
}
