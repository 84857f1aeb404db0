use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use litextract_core::mapping::FieldMapping;
use litextract_core::provider::{ChatBackend, ChatClient, ProviderId, ProviderProfile, RequestSettings};
use litextract_core::schema::default_template;
use litextract_core::store::{LocalStore, StoreError};
use litextract_core::{Schema, Table};
use litextract_service::{ServiceConfig, API_KEY_ENV};

use crate::{ProviderArgs, SchemaArgs};

/// Model name sent to `custom` endpoints when none is configured.
const CUSTOM_FALLBACK_MODEL: &str = "default";

pub fn open_store(home: Option<&Path>) -> Result<LocalStore> {
    match home {
        Some(dir) => Ok(LocalStore::open(dir)),
        None => LocalStore::open_default().context("cannot locate a data directory; pass --home"),
    }
}

/// Stored configuration (written by `serve`), or the defaults.
fn stored_config(store: &LocalStore) -> ServiceConfig {
    store
        .load_settings()
        .ok()
        .filter(|v| !v.is_null())
        .and_then(|v| serde_json::from_value(v).ok())
        .unwrap_or_default()
}

/// Merges flags over the stored configuration.
pub fn resolve_provider(store: &LocalStore, args: &ProviderArgs) -> Result<ServiceConfig> {
    let stored = stored_config(store);
    let provider = args.provider.unwrap_or(stored.provider);
    let same_provider = provider == stored.provider;

    let mut settings = if same_provider {
        stored.settings.clone()
    } else {
        let profile = ProviderProfile::builtin(provider);
        RequestSettings::new(profile.default_model().unwrap_or(CUSTOM_FALLBACK_MODEL))
    };
    if let Some(model) = &args.model {
        settings.model = model.clone();
    }
    if let Some(t) = args.temperature {
        settings.temperature = Some(t);
    }
    if let Some(c) = args.concurrency {
        settings.concurrency = c;
    }
    if let Some(i) = args.interval_ms {
        settings.interval_ms = i;
    }
    if let Some(r) = args.retries {
        settings.max_retries = r;
    }
    if let Some(d) = args.retry_delay_ms {
        settings.retry_delay_ms = d;
    }
    if let Some(t) = args.timeout_secs {
        settings.timeout_secs = t;
    }
    settings.validate()?;

    let base_url = args
        .base_url
        .clone()
        .or_else(|| if same_provider { stored.base_url.clone() } else { None });
    let config = ServiceConfig {
        provider,
        base_url,
        settings,
    };
    profile_of(&config)?;
    Ok(config)
}

pub fn profile_of(config: &ServiceConfig) -> Result<ProviderProfile> {
    let profile = ProviderProfile::builtin(config.provider);
    Ok(match &config.base_url {
        Some(url) => profile.with_base_url(url.clone())?,
        None => profile,
    })
}

/// The environment variable wins over the stored key. `custom` endpoints may
/// run without one.
pub fn credential(store: &LocalStore, provider: ProviderId) -> Result<String> {
    if let Ok(key) = std::env::var(API_KEY_ENV) {
        if !key.is_empty() {
            return Ok(key);
        }
    }
    match store.load_credential(provider) {
        Ok(key) => Ok(key),
        Err(StoreError::NoCredential(_)) if provider == ProviderId::Custom => Ok(String::new()),
        Err(StoreError::NoCredential(_)) => {
            bail!("no API key for {provider}; run `litextract set-key --provider {provider}` or set {API_KEY_ENV}")
        }
        Err(e) => Err(e.into()),
    }
}

pub fn backend(store: &LocalStore, config: &ServiceConfig) -> Result<Arc<dyn ChatBackend>> {
    let key = credential(store, config.provider)?;
    let client = ChatClient::new(profile_of(config)?, config.settings.clone(), key)?;
    Ok(Arc::new(client))
}

/// Builds the schema from `--schema`/`--preset`, then applies `--template`.
/// Without any template the default one is derived from the mapping.
pub fn resolve_schema(args: &SchemaArgs, table: Option<(&Table, &FieldMapping)>) -> Result<Schema> {
    let schema = match (&args.schema, args.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            Schema::from_json(&text).with_context(|| format!("invalid schema file {}", path.display()))?
        }
        (None, Some(preset)) => Schema::from_preset(preset, ""),
        (None, None) => bail!("a schema is required: pass --schema FILE or --preset NAME"),
    };
    let typed = args.typed || schema.typed_annotations();
    let mut schema = schema.with_typed_annotations(typed);
    if let Some(template) = &args.template {
        schema = schema.with_user_template(template.clone())?;
    } else if schema.user_template().trim().is_empty() {
        if let Some((table, mapping)) = table {
            schema = schema.with_user_template(default_template(mapping, table.columns()))?;
        }
    }
    Ok(schema)
}
