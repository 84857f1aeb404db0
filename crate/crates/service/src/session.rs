use std::collections::BTreeSet;
use std::sync::{Arc, Mutex, MutexGuard, Weak};

use litextract_core::engine::{
    run_single, task_id_for, Checkpoint, CheckpointError, EngineEvent, RunOutcome, RunPlan, TaskProgress,
};
use litextract_core::export::{export, ExportJob};
use litextract_core::mapping::{default_rules, map_columns, FieldMapping};
use litextract_core::output::coerce_value;
use litextract_core::provider::{ChatBackend, ChatClient, ProviderId, ProviderProfile, RequestSettings};
use litextract_core::schema::{default_template, validate_template, NOT_MENTIONED};
use litextract_core::store::{LocalStore, StoreError};
use litextract_core::table::parse_bytes;
use litextract_core::{BatchEngine, RecordResult, RecordStatus, RunState, Schema, Table};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast;

use crate::error::{ApiError, ApiResult};

/// Environment variable that overrides the stored credential.
pub const API_KEY_ENV: &str = "LITEXTRACT_API_KEY";

/// Provider selection and request settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub provider: ProviderId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    pub settings: RequestSettings,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let profile = ProviderProfile::builtin(ProviderId::Deepseek);
        Self {
            provider: ProviderId::Deepseek,
            base_url: None,
            settings: RequestSettings::new(profile.default_model().unwrap_or("deepseek-v4-flash")),
        }
    }
}

impl ServiceConfig {
    pub fn profile(&self) -> ApiResult<ProviderProfile> {
        let profile = ProviderProfile::builtin(self.provider);
        match &self.base_url {
            Some(url) => profile.with_base_url(url.clone()).map_err(ApiError::bad),
            None => Ok(profile),
        }
    }

    fn validate(&self) -> ApiResult<()> {
        self.settings.validate().map_err(ApiError::bad)?;
        self.profile().map(|_| ())
    }
}

#[derive(Debug, Default)]
struct Session {
    table: Option<Table>,
    task_id: Option<String>,
    mapping: FieldMapping,
    schema: Option<Schema>,
    config: ServiceConfig,
    results: Vec<RecordResult>,
    /// Rows edited by hand since the last run started.
    edited: BTreeSet<usize>,
    engine: Option<BatchEngine>,
    last_progress: Option<TaskProgress>,
    /// Digest of the configuration that produced `results`.
    digest: Option<String>,
}

impl Session {
    fn running(&self) -> bool {
        self.engine.is_some()
    }

    fn ensure_idle(&self) -> ApiResult<()> {
        if self.running() {
            return Err(ApiError::Conflict("a run is in progress".into()));
        }
        Ok(())
    }

    fn table(&self) -> ApiResult<&Table> {
        self.table
            .as_ref()
            .ok_or_else(|| ApiError::BadRequest("no table uploaded".into()))
    }

    fn schema(&self) -> ApiResult<&Schema> {
        self.schema
            .as_ref()
            .ok_or_else(|| ApiError::BadRequest("no schema defined".into()))
    }

    fn plan(&self) -> ApiResult<RunPlan> {
        let table = self.table()?;
        let schema = self.schema()?;
        let task_id = self.task_id.clone().unwrap_or_default();
        RunPlan::build(
            task_id,
            table,
            &self.mapping,
            schema,
            self.config.provider,
            &self.config.settings.model,
        )
        .map_err(ApiError::bad)
    }

    fn row_check(&self, row: usize) -> ApiResult<()> {
        if row >= self.results.len() {
            return Err(ApiError::NotFound(format!("row {row} does not exist")));
        }
        Ok(())
    }
}

/// Shared service state: one session plus the event fan-out.
pub struct AppState {
    session: Mutex<Session>,
    store: LocalStore,
    events: broadcast::Sender<EngineEvent>,
    session_id: String,
    me: Weak<AppState>,
}

impl std::fmt::Debug for AppState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppState")
            .field("session_id", &self.session_id)
            .field("store", &self.store.root())
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Serialize)]
pub struct UploadSummary {
    pub source_name: String,
    pub task_id: String,
    pub columns: Vec<String>,
    pub rows: usize,
    pub mapping: FieldMapping,
    pub preview: Vec<Value>,
}

impl AppState {
    /// Creates the state, restoring cached provider settings when present.
    pub fn new(store: LocalStore) -> Arc<Self> {
        let config = match store.load_settings() {
            Ok(Value::Null) => ServiceConfig::default(),
            Ok(v) => serde_json::from_value(v).unwrap_or_else(|e| {
                tracing::warn!("ignoring unreadable cached settings: {e}");
                ServiceConfig::default()
            }),
            Err(e) => {
                tracing::warn!("cannot read cached settings: {e}");
                ServiceConfig::default()
            }
        };
        let (events, _) = broadcast::channel(4096);
        let session_id = format!("{:016x}", std::process::id() as u64 ^ 0x5eed_0000);
        Arc::new_cyclic(|me| AppState {
            session: Mutex::new(Session {
                config,
                ..Session::default()
            }),
            store,
            events,
            session_id,
            me: me.clone(),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn subscribe(&self) -> broadcast::Receiver<EngineEvent> {
        self.events.subscribe()
    }

    pub fn store(&self) -> &LocalStore {
        &self.store
    }

    pub fn summary(&self) -> Value {
        let s = self.lock();
        json!({
            "session_id": self.session_id,
            "table": s.table.as_ref().map(|t| json!({
                "source_name": t.source_name(),
                "columns": t.columns(),
                "rows": t.len(),
            })),
            "task_id": s.task_id,
            "mapping": s.mapping,
            "schema": s.schema,
            "config": s.config,
            "running": s.running(),
        })
    }

    pub fn upload(&self, file_name: &str, bytes: &[u8]) -> ApiResult<UploadSummary> {
        let table = parse_bytes(file_name, bytes).map_err(ApiError::bad)?;
        let mut s = self.lock();
        s.ensure_idle()?;
        let mapping = map_columns(table.columns(), &default_rules());
        let task_id = task_id_for(bytes);
        let summary = UploadSummary {
            source_name: table.source_name().to_string(),
            task_id: task_id.clone(),
            columns: table.columns().to_vec(),
            rows: table.len(),
            mapping: mapping.clone(),
            preview: table
                .rows()
                .iter()
                .take(5)
                .map(|r| serde_json::to_value(r).expect("record serializes"))
                .collect(),
        };
        s.results = (0..table.len()).map(RecordResult::pending).collect();
        s.edited.clear();
        s.last_progress = None;
        s.digest = None;
        s.mapping = mapping;
        s.task_id = Some(task_id);
        if let Some(schema) = s.schema.take() {
            s.schema = Some(fill_template(schema, &s.mapping, &table, true));
        }
        s.table = Some(table);
        Ok(summary)
    }

    pub fn mapping(&self) -> FieldMapping {
        self.lock().mapping.clone()
    }

    pub fn set_mapping(&self, mapping: FieldMapping) -> ApiResult<FieldMapping> {
        let mut s = self.lock();
        s.ensure_idle()?;
        mapping
            .validate_against(s.table()?.columns())
            .map_err(ApiError::bad)?;
        s.mapping = mapping.clone();
        Ok(mapping)
    }

    pub fn schema(&self) -> ApiResult<Value> {
        let s = self.lock();
        let schema = s
            .schema
            .as_ref()
            .ok_or_else(|| ApiError::NotFound("no schema defined".into()))?;
        schema_view(schema)
    }

    /// Replaces the schema. An empty user template is filled with a default
    /// built from the mapped columns.
    pub fn set_schema(&self, body: Value) -> ApiResult<Value> {
        let schema: Schema = serde_json::from_value(body).map_err(ApiError::bad)?;
        let mut s = self.lock();
        s.ensure_idle()?;
        let schema = match &s.table {
            Some(t) => fill_template(schema, &s.mapping, t, false),
            None => schema,
        };
        let view = schema_view(&schema)?;
        s.schema = Some(schema);
        Ok(view)
    }

    pub fn preview(&self, row: usize) -> ApiResult<Value> {
        let s = self.lock();
        let schema = s.schema()?;
        let bundle = schema.bundle().map_err(ApiError::bad)?;
        let (user_prompt, report) = match &s.table {
            Some(t) => {
                let report = validate_template(&bundle.user_template, t.columns()).map_err(ApiError::bad)?;
                let record = t
                    .row(row)
                    .ok_or_else(|| ApiError::NotFound(format!("row {row} does not exist")))?;
                (Some(bundle.render(record).map_err(ApiError::bad)?), Some(report))
            }
            None => (None, None),
        };
        Ok(json!({
            "system_prompt": bundle.system_prompt,
            "user_template": bundle.user_template,
            "user_prompt": user_prompt,
            "template": report,
        }))
    }

    pub fn config(&self) -> ServiceConfig {
        self.lock().config.clone()
    }

    pub fn set_config(&self, config: ServiceConfig) -> ApiResult<ServiceConfig> {
        config.validate()?;
        {
            let mut s = self.lock();
            s.ensure_idle()?;
            s.config = config.clone();
        }
        let v = serde_json::to_value(&config).expect("config serializes");
        self.store.save_settings(&v).map_err(ApiError::internal)?;
        Ok(config)
    }

    pub fn set_credential(&self, provider: ProviderId, key: &str) -> ApiResult<()> {
        self.store.store_credential(provider, key).map_err(|e| match e {
            StoreError::EmptyCredential => ApiError::bad(e),
            other => ApiError::internal(other),
        })
    }

    /// Clears stored data and resets the session.
    pub fn clear(&self) -> ApiResult<()> {
        let mut s = self.lock();
        s.ensure_idle()?;
        self.store.clear_all_data().map_err(ApiError::internal)?;
        *s = Session::default();
        Ok(())
    }

    fn backend(&self, config: &ServiceConfig) -> ApiResult<Arc<dyn ChatBackend>> {
        let key = match std::env::var(API_KEY_ENV) {
            Ok(k) if !k.is_empty() => k,
            _ => match self.store.load_credential(config.provider) {
                Ok(k) => k,
                Err(StoreError::NoCredential(_)) if config.provider == ProviderId::Custom => String::new(),
                Err(e) => return Err(ApiError::bad(e)),
            },
        };
        let client = ChatClient::new(config.profile()?, config.settings.clone(), key).map_err(ApiError::internal)?;
        Ok(Arc::new(client))
    }

    /// Runs one row end to end without storing the result.
    pub async fn test_prompt(&self, row: usize) -> ApiResult<Value> {
        let (plan, config) = {
            let s = self.lock();
            (s.plan()?, s.config.clone())
        };
        let item = plan
            .items
            .get(row)
            .ok_or_else(|| ApiError::NotFound(format!("row {row} does not exist")))?;
        let backend = self.backend(&config)?;
        let result = run_single(backend.as_ref(), &config.settings, &plan.system_prompt, &plan.fields, item).await;
        Ok(json!({
            "system_prompt": plan.system_prompt,
            "user_prompt": item.user_prompt,
            "result": result,
        }))
    }

    /// Starts a background run. With `resume`, rows in the task's checkpoint
    /// are kept and skipped.
    pub fn start_run(&self, resume: bool) -> ApiResult<Value> {
        let mut s = self.lock();
        s.ensure_idle()?;
        let plan = s.plan()?;
        let checkpoint = if resume {
            Some(self.load_checkpoint_for(&plan)?)
        } else {
            None
        };
        let backend = self.backend(&s.config)?;
        let weak = self.me.clone();
        let engine = BatchEngine::new(backend, s.config.settings.clone())
            .with_checkpoints(self.store.checkpoints())
            .with_observer(move |ev: &EngineEvent| {
                if let Some(state) = weak.upgrade() {
                    state.on_event(ev);
                }
            });

        let mut results: Vec<RecordResult> = (0..plan.total()).map(RecordResult::pending).collect();
        if let Some(cp) = &checkpoint {
            for r in &cp.results {
                if let Some(slot) = results.get_mut(r.row_index) {
                    *slot = r.clone();
                }
            }
        }
        s.results = results;
        s.edited.clear();
        s.digest = Some(plan.config_digest.clone());
        s.last_progress = None;
        s.engine = Some(engine.clone());
        let reply = json!({ "task_id": plan.task_id, "total": plan.total(), "resumed": checkpoint.as_ref().map_or(0, |c| c.results.len()) });
        drop(s);

        let me = self.me.clone();
        tokio::spawn(async move {
            let outcome = engine.run(plan, checkpoint).await;
            if let Some(state) = me.upgrade() {
                state.finish_run(outcome);
            }
        });
        Ok(reply)
    }

    fn load_checkpoint_for(&self, plan: &RunPlan) -> ApiResult<Checkpoint> {
        self.store
            .checkpoints()
            .load(&plan.task_id, &plan.config_digest)
            .map_err(|e| match e {
                CheckpointError::NotFound(_) => ApiError::NotFound(e.to_string()),
                CheckpointError::StaleCheckpoint { .. } => ApiError::Conflict(e.to_string()),
                other => ApiError::internal(other),
            })
    }

    /// Loads the checkpoint of the current task and configuration into the
    /// session without running anything.
    pub fn restore(&self) -> ApiResult<Value> {
        let mut s = self.lock();
        s.ensure_idle()?;
        let plan = s.plan()?;
        let cp = self.load_checkpoint_for(&plan)?;
        let mut results: Vec<RecordResult> = (0..plan.total()).map(RecordResult::pending).collect();
        for r in cp.results {
            if let Some(slot) = results.get_mut(r.row_index) {
                *slot = r;
            }
        }
        let restored = results.iter().filter(|r| r.status.is_terminal()).count();
        s.results = results;
        s.edited.clear();
        s.digest = Some(plan.config_digest);
        s.last_progress = None;
        Ok(json!({ "task_id": plan.task_id, "restored": restored }))
    }

    fn on_event(&self, ev: &EngineEvent) {
        {
            let mut s = self.lock();
            match ev {
                EngineEvent::RecordStarted { row_index, .. } => {
                    if let Some(r) = s.results.get_mut(*row_index) {
                        r.status = RecordStatus::Running;
                    }
                }
                EngineEvent::RecordCompleted { result, .. } => {
                    let row = result.row_index;
                    if let Some(r) = s.results.get_mut(row) {
                        *r = (**result).clone();
                    }
                }
                _ => {}
            }
        }
        let _ = self.events.send(ev.clone());
    }

    fn finish_run(&self, outcome: Result<RunOutcome, litextract_core::engine::EngineError>) {
        let mut s = self.lock();
        s.engine = None;
        match outcome {
            Ok(outcome) => {
                let edited = std::mem::take(&mut s.edited);
                for r in outcome.results {
                    let row = r.row_index;
                    let keep_edit = edited.contains(&row)
                        && s.results.get(row).is_some_and(|cur| cur.status.is_terminal());
                    if !keep_edit {
                        if let Some(slot) = s.results.get_mut(row) {
                            *slot = r;
                        }
                    }
                }
                s.last_progress = Some(outcome.progress);
                if !edited.is_empty() {
                    self.save_checkpoint(&s);
                }
            }
            Err(e) => {
                tracing::error!("run failed: {e}");
                let _ = self.events.send(EngineEvent::Warning {
                    message: format!("run failed: {e}"),
                });
            }
        }
    }

    fn save_checkpoint(&self, s: &Session) {
        let (Some(task_id), Some(digest)) = (&s.task_id, &s.digest) else {
            return;
        };
        let cp = Checkpoint::new(task_id, digest, s.results.iter().cloned());
        if let Err(e) = self.store.checkpoints().save(&cp) {
            tracing::warn!("checkpoint save failed: {e}");
            let _ = self.events.send(EngineEvent::Warning {
                message: format!("checkpoint save failed: {e}"),
            });
        }
    }

    fn with_engine(&self, f: impl FnOnce(&BatchEngine)) -> ApiResult<TaskProgress> {
        // Engine calls emit events, which take the session lock.
        let engine = self
            .lock()
            .engine
            .clone()
            .ok_or_else(|| ApiError::Conflict("no run in progress".into()))?;
        f(&engine);
        Ok(engine.progress())
    }

    pub fn pause(&self) -> ApiResult<TaskProgress> {
        self.with_engine(BatchEngine::pause)
    }

    pub fn resume(&self) -> ApiResult<TaskProgress> {
        self.with_engine(BatchEngine::resume)
    }

    pub fn cancel(&self) -> ApiResult<TaskProgress> {
        self.with_engine(BatchEngine::cancel)
    }

    pub fn progress(&self) -> TaskProgress {
        let s = self.lock();
        if let Some(engine) = &s.engine {
            return engine.progress();
        }
        if let Some(p) = &s.last_progress {
            let mut p = p.clone();
            let fresh = TaskProgress::from_results(&s.results, p.state);
            p.processed = fresh.processed;
            p.succeeded = fresh.succeeded;
            p.failed = fresh.failed;
            p.token_estimate = fresh.token_estimate;
            return p;
        }
        TaskProgress::from_results(&s.results, RunState::Idle)
    }

    pub fn results(&self) -> Vec<RecordResult> {
        self.lock().results.clone()
    }

    /// Re-extracts one row with the current configuration.
    pub async fn retry_row(&self, row: usize) -> ApiResult<RecordResult> {
        let (plan, config) = {
            let s = self.lock();
            s.row_check(row)?;
            s.ensure_idle()?;
            (s.plan()?, s.config.clone())
        };
        let item = plan
            .items
            .get(row)
            .ok_or_else(|| ApiError::NotFound(format!("row {row} does not exist")))?;
        let backend = self.backend(&config)?;
        let result = run_single(backend.as_ref(), &config.settings, &plan.system_prompt, &plan.fields, item).await;
        let mut s = self.lock();
        s.ensure_idle()?;
        s.row_check(row)?;
        s.results[row] = result.clone();
        s.edited.remove(&row);
        s.digest = Some(plan.config_digest);
        self.save_checkpoint(&s);
        Ok(result)
    }

    /// Replaces one extracted value, converting it to the field's type.
    pub fn edit_field(&self, row: usize, name: &str, value: Value) -> ApiResult<RecordResult> {
        let mut s = self.lock();
        s.row_check(row)?;
        let field = s
            .schema()?
            .field(name)
            .cloned()
            .ok_or_else(|| ApiError::BadRequest(format!("unknown field {name:?}")))?;
        if !s.results[row].status.is_terminal() {
            return Err(ApiError::Conflict(format!("row {row} has not been processed")));
        }
        let value = match value {
            Value::String(ref t) if t.trim() == NOT_MENTIONED => value,
            other => coerce_value(&field, &other).map_err(ApiError::bad)?.0,
        };
        let results = &mut s.results;
        results[row].extracted.insert(field.name.clone(), value);
        let updated = results[row].clone();
        s.edited.insert(row);
        if !s.running() {
            self.save_checkpoint(&s);
        }
        Ok(updated)
    }

    pub fn export(&self, job: &ExportJob) -> ApiResult<Vec<u8>> {
        let s = self.lock();
        let table = s.table()?;
        let schema = s.schema()?;
        export(table, &s.results, schema.fields(), job).map_err(|e| match e {
            litextract_core::export::ExportError::NothingToExport => ApiError::Conflict(e.to_string()),
            other => ApiError::internal(other),
        })
    }
}

fn fill_template(schema: Schema, mapping: &FieldMapping, table: &Table, replace_invalid: bool) -> Schema {
    let keep = !schema.user_template().trim().is_empty()
        && !(replace_invalid
            && validate_template(schema.user_template(), table.columns()).map_or(true, |r| !r.is_valid()));
    if keep {
        return schema;
    }
    let template = default_template(mapping, table.columns());
    schema.clone().with_user_template(template).unwrap_or(schema)
}

fn schema_view(schema: &Schema) -> ApiResult<Value> {
    let bundle = schema.bundle().map_err(ApiError::bad)?;
    let mut v = serde_json::to_value(schema).expect("schema serializes");
    v["system_prompt"] = Value::String(bundle.system_prompt);
    Ok(v)
}
