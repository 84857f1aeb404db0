//! Concurrent batch execution over table rows.
//!
//! A launcher admits rows through a semaphore sized to the configured
//! concurrency, spacing launches by the configured interval. Each admitted
//! row runs its retry loop in its own task and reports to a single collector,
//! which owns the result map, progress and checkpoint cadence.

pub mod checkpoint;
pub mod estimate;
pub mod retry;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::sync::{mpsc, Semaphore};
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;

use crate::mapping::{Category, FieldMapping};
use crate::provider::{ChatBackend, ProviderId, RequestSettings};
use crate::schema::{validate_template, ExtractionField, PromptBundle, Schema, SchemaError};
use crate::table::Table;

pub use self::checkpoint::{config_digest, task_id_for, Checkpoint, CheckpointError, CheckpointStore};
pub use self::estimate::{estimate_cost, estimate_eta, estimate_tokens, ModelPrice, PriceTable};
pub use self::retry::{attempt_with_retry, extract_once, AttemptFailure, AttemptSuccess, RetryPolicy};

/// How often paused workers look at the pause flag again.
pub const PAUSE_POLL: Duration = Duration::from_millis(200);

/// Completed records between automatic checkpoint saves.
pub const CHECKPOINT_EVERY: usize = 10;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("this engine has already run; create a new one")]
    AlreadyStarted,
    #[error("user template references unknown columns: {0:?}")]
    UnknownPlaceholders(Vec<String>),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordStatus {
    Pending,
    Running,
    Success,
    Failed,
}

impl RecordStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RecordStatus::Success | RecordStatus::Failed)
    }
}

/// Outcome of one row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordResult {
    pub row_index: usize,
    pub status: RecordStatus,
    #[serde(default)]
    pub extracted: IndexMap<String, Value>,
    #[serde(default)]
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub attempts: u32,
    #[serde(default)]
    pub input_chars: usize,
    #[serde(default)]
    pub output_chars: usize,
}

impl RecordResult {
    pub fn pending(row_index: usize) -> Self {
        Self {
            row_index,
            status: RecordStatus::Pending,
            extracted: IndexMap::new(),
            raw_response: String::new(),
            error: None,
            attempts: 0,
            input_chars: 0,
            output_chars: 0,
        }
    }

    pub fn tokens(&self) -> u64 {
        estimate_tokens(self.input_chars, self.output_chars)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunState {
    Idle,
    Running,
    Paused,
    Cancelled,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskProgress {
    pub total: usize,
    pub processed: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub token_estimate: u64,
    pub eta_seconds: Option<f64>,
    pub current_title: Option<String>,
    pub state: RunState,
}

impl TaskProgress {
    pub fn idle() -> Self {
        Self {
            total: 0,
            processed: 0,
            succeeded: 0,
            failed: 0,
            token_estimate: 0,
            eta_seconds: None,
            current_title: None,
            state: RunState::Idle,
        }
    }

    /// Progress implied by a set of results, with no run attached.
    pub fn from_results(results: &[RecordResult], state: RunState) -> Self {
        let mut p = Self::idle();
        p.total = results.len();
        p.state = state;
        for r in results {
            p.record(r);
        }
        p
    }

    /// Counts one terminal result; other statuses are ignored.
    pub fn record(&mut self, result: &RecordResult) {
        match result.status {
            RecordStatus::Success => self.succeeded += 1,
            RecordStatus::Failed => self.failed += 1,
            _ => return,
        }
        self.processed += 1;
        self.token_estimate += result.tokens();
    }
}

/// Something the engine reports while running.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EngineEvent {
    StateChanged { state: RunState },
    RecordStarted { row_index: usize, title: Option<String> },
    RecordCompleted { result: Box<RecordResult>, progress: TaskProgress },
    CheckpointSaved { completed: usize, terminal: bool },
    Warning { message: String },
}

pub trait EngineObserver: Send + Sync {
    fn on_event(&self, event: &EngineEvent);
}

impl<F> EngineObserver for F
where
    F: Fn(&EngineEvent) + Send + Sync,
{
    fn on_event(&self, event: &EngineEvent) {
        self(event)
    }
}

/// One row ready to send.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkItem {
    pub row_index: usize,
    pub user_prompt: String,
    pub title: Option<String>,
}

/// Everything a run needs, with prompts rendered up front.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub task_id: String,
    pub config_digest: String,
    pub system_prompt: String,
    pub fields: Vec<ExtractionField>,
    pub items: Vec<WorkItem>,
}

impl RunPlan {
    /// Renders every row's user prompt. Fails when the template names a
    /// column the table lacks.
    pub fn build(
        task_id: impl Into<String>,
        table: &Table,
        mapping: &FieldMapping,
        schema: &Schema,
        provider: ProviderId,
        model: &str,
    ) -> Result<Self, EngineError> {
        let bundle: PromptBundle = schema.bundle()?;
        let report = validate_template(&bundle.user_template, table.columns())?;
        if !report.unknown.is_empty() {
            return Err(EngineError::UnknownPlaceholders(report.unknown));
        }
        let title_col = mapping.column_for(Category::Title);
        let items = table
            .rows()
            .iter()
            .enumerate()
            .map(|(row_index, row)| {
                Ok(WorkItem {
                    row_index,
                    user_prompt: bundle.render(row)?,
                    title: title_col
                        .and_then(|c| row.get(c))
                        .map(|t| t.trim().to_string())
                        .filter(|t| !t.is_empty()),
                })
            })
            .collect::<Result<Vec<_>, SchemaError>>()?;
        Ok(Self {
            task_id: task_id.into(),
            config_digest: config_digest(schema.fields(), &bundle.user_template, model, provider),
            system_prompt: bundle.system_prompt,
            fields: schema.fields().to_vec(),
            items,
        })
    }

    pub fn total(&self) -> usize {
        self.items.len()
    }
}

/// What a finished (or cancelled) run leaves behind.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// One entry per row, ordered by row index; rows never completed stay
    /// pending.
    pub results: Vec<RecordResult>,
    pub state: RunState,
    pub progress: TaskProgress,
}

struct Shared {
    backend: Arc<dyn ChatBackend>,
    settings: RequestSettings,
    checkpoints: Option<CheckpointStore>,
    observer: Option<Arc<dyn EngineObserver>>,
    progress: Mutex<TaskProgress>,
    paused: AtomicBool,
    cancel: CancellationToken,
    started: AtomicBool,
}

impl Shared {
    fn emit(&self, event: EngineEvent) {
        if let Some(obs) = &self.observer {
            obs.on_event(&event);
        }
    }

    fn set_state(&self, state: RunState) {
        self.progress.lock().unwrap().state = state;
        self.emit(EngineEvent::StateChanged { state });
    }

    async fn wait_while_paused(&self) {
        while self.paused.load(Ordering::SeqCst) && !self.cancel.is_cancelled() {
            tokio::select! {
                _ = tokio::time::sleep(PAUSE_POLL) => {}
                _ = self.cancel.cancelled() => {}
            }
        }
    }
}

enum WorkerMsg {
    Started { row_index: usize, title: Option<String> },
    Finished(RecordResult),
}

/// Runs one plan against a chat backend. Cheap to clone; clones share
/// control state, so one clone can pause or cancel while another runs.
#[derive(Clone)]
pub struct BatchEngine {
    shared: Arc<Shared>,
}

impl std::fmt::Debug for BatchEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BatchEngine")
            .field("settings", &self.shared.settings)
            .field("progress", &self.progress())
            .finish_non_exhaustive()
    }
}

impl BatchEngine {
    pub fn new(backend: Arc<dyn ChatBackend>, settings: RequestSettings) -> Self {
        Self {
            shared: Arc::new(Shared {
                backend,
                settings,
                checkpoints: None,
                observer: None,
                progress: Mutex::new(TaskProgress::idle()),
                paused: AtomicBool::new(false),
                cancel: CancellationToken::new(),
                started: AtomicBool::new(false),
            }),
        }
    }

    fn configure(self, f: impl FnOnce(&mut Shared)) -> Self {
        let mut shared = Arc::try_unwrap(self.shared)
            .unwrap_or_else(|_| panic!("configure the engine before cloning it"));
        f(&mut shared);
        Self {
            shared: Arc::new(shared),
        }
    }

    pub fn with_checkpoints(self, store: CheckpointStore) -> Self {
        self.configure(|s| s.checkpoints = Some(store))
    }

    pub fn with_observer(self, observer: impl EngineObserver + 'static) -> Self {
        self.configure(|s| s.observer = Some(Arc::new(observer)))
    }

    pub fn settings(&self) -> &RequestSettings {
        &self.shared.settings
    }

    pub fn progress(&self) -> TaskProgress {
        self.shared.progress.lock().unwrap().clone()
    }

    pub fn state(&self) -> RunState {
        self.shared.progress.lock().unwrap().state
    }

    /// Stops new launches; requests already in flight finish normally.
    ///
    /// Pausing before `run` starts makes the run begin paused.
    pub fn pause(&self) {
        if matches!(self.state(), RunState::Idle | RunState::Running) {
            self.shared.paused.store(true, Ordering::SeqCst);
            self.shared.set_state(RunState::Paused);
        }
    }

    /// No-op unless paused.
    pub fn resume(&self) {
        if self.state() == RunState::Paused {
            self.shared.paused.store(false, Ordering::SeqCst);
            self.shared.set_state(RunState::Running);
        }
    }

    /// Abandons in-flight requests and stops launching. Idempotent.
    pub fn cancel(&self) {
        self.shared.cancel.cancel();
        let state = self.state();
        if !matches!(state, RunState::Cancelled | RunState::Done) {
            self.shared.set_state(RunState::Cancelled);
        }
    }

    fn policy(&self) -> RetryPolicy {
        RetryPolicy::new(self.shared.settings.max_retries, self.shared.settings.retry_delay())
    }

    /// Runs every row of `plan` not already present in `resume`.
    ///
    /// Returns when all rows are terminal or the run is cancelled.
    pub async fn run(&self, plan: RunPlan, resume: Option<Checkpoint>) -> Result<RunOutcome, EngineError> {
        if self.shared.started.swap(true, Ordering::SeqCst) {
            return Err(EngineError::AlreadyStarted);
        }
        let shared = &self.shared;
        let total = plan.total();

        let mut results: BTreeMap<usize, RecordResult> = BTreeMap::new();
        if let Some(cp) = resume {
            if cp.config_digest != plan.config_digest {
                return Err(CheckpointError::StaleCheckpoint { task_id: cp.task_id }.into());
            }
            for r in cp.results {
                if r.row_index < total && r.status.is_terminal() {
                    results.insert(r.row_index, r);
                }
            }
        }

        {
            let mut p = shared.progress.lock().unwrap();
            let cancelled = p.state == RunState::Cancelled;
            *p = TaskProgress::idle();
            p.total = total;
            for r in results.values() {
                p.record(r);
            }
            if cancelled || shared.cancel.is_cancelled() {
                p.state = RunState::Cancelled;
            }
        }
        if shared.cancel.is_cancelled() {
            return Ok(self.outcome(results, total, RunState::Cancelled));
        }
        shared.set_state(if shared.paused.load(Ordering::SeqCst) {
            RunState::Paused
        } else {
            RunState::Running
        });

        let todo: Vec<WorkItem> = plan
            .items
            .iter()
            .filter(|it| !results.contains_key(&it.row_index))
            .cloned()
            .collect();
        let system: Arc<str> = Arc::from(plan.system_prompt.as_str());
        let fields: Arc<[ExtractionField]> = Arc::from(plan.fields.clone());

        let (tx, mut rx) = mpsc::unbounded_channel::<WorkerMsg>();
        let launcher = tokio::spawn(launch_all(
            Arc::clone(shared),
            todo,
            system,
            fields,
            self.policy(),
            tx,
        ));

        let started_at = Instant::now();
        let mut session_done = 0usize;
        while let Some(msg) = rx.recv().await {
            match msg {
                WorkerMsg::Started { row_index, title } => {
                    shared.progress.lock().unwrap().current_title = title.clone();
                    shared.emit(EngineEvent::RecordStarted { row_index, title });
                }
                WorkerMsg::Finished(result) => {
                    session_done += 1;
                    let progress = {
                        let mut p = shared.progress.lock().unwrap();
                        p.record(&result);
                        p.eta_seconds = estimate_eta(
                            started_at.elapsed().as_secs_f64(),
                            session_done,
                            session_done + (p.total - p.processed),
                        );
                        p.clone()
                    };
                    results.insert(result.row_index, result.clone());
                    shared.emit(EngineEvent::RecordCompleted {
                        result: Box::new(result),
                        progress: progress.clone(),
                    });
                    if progress.processed.is_multiple_of(CHECKPOINT_EVERY) {
                        self.save_checkpoint(&plan, &results, false);
                    }
                }
            }
        }
        if let Err(e) = launcher.await {
            tracing::error!("launcher task failed: {e}");
        }

        let final_state = if shared.cancel.is_cancelled() {
            RunState::Cancelled
        } else {
            RunState::Done
        };
        self.save_checkpoint(&plan, &results, true);
        {
            let mut p = shared.progress.lock().unwrap();
            p.current_title = None;
            if final_state == RunState::Done {
                p.eta_seconds = Some(0.0);
            }
        }
        if self.state() != final_state {
            shared.set_state(final_state);
        }
        Ok(self.outcome(results, total, final_state))
    }

    fn save_checkpoint(&self, plan: &RunPlan, results: &BTreeMap<usize, RecordResult>, terminal: bool) {
        let Some(store) = &self.shared.checkpoints else {
            return;
        };
        let cp = Checkpoint::new(&plan.task_id, &plan.config_digest, results.values().cloned());
        let completed = cp.results.len();
        match store.save(&cp) {
            Ok(()) => self.shared.emit(EngineEvent::CheckpointSaved { completed, terminal }),
            Err(e) => {
                tracing::warn!("checkpoint save failed: {e}");
                self.shared.emit(EngineEvent::Warning {
                    message: format!("checkpoint save failed: {e}"),
                });
            }
        }
    }

    fn outcome(&self, mut results: BTreeMap<usize, RecordResult>, total: usize, state: RunState) -> RunOutcome {
        for row in 0..total {
            results.entry(row).or_insert_with(|| RecordResult::pending(row));
        }
        RunOutcome {
            results: results.into_values().collect(),
            state,
            progress: self.progress(),
        }
    }
}

async fn launch_all(
    shared: Arc<Shared>,
    todo: Vec<WorkItem>,
    system: Arc<str>,
    fields: Arc<[ExtractionField]>,
    policy: RetryPolicy,
    tx: mpsc::UnboundedSender<WorkerMsg>,
) {
    let semaphore = Arc::new(Semaphore::new(shared.settings.concurrency.max(1)));
    let interval = shared.settings.interval();
    let mut last_launch: Option<Instant> = None;
    let cancel = shared.cancel.clone();

    for item in todo {
        let permit = loop {
            shared.wait_while_paused().await;
            if cancel.is_cancelled() {
                return;
            }
            let permit = tokio::select! {
                p = Arc::clone(&semaphore).acquire_owned() => p.expect("semaphore never closes"),
                _ = cancel.cancelled() => return,
            };
            if let Some(last) = last_launch {
                tokio::select! {
                    _ = tokio::time::sleep_until(last + interval) => {}
                    _ = cancel.cancelled() => return,
                }
            }
            if shared.paused.load(Ordering::SeqCst) {
                drop(permit);
                continue;
            }
            break permit;
        };
        last_launch = Some(Instant::now());

        let _ = tx.send(WorkerMsg::Started {
            row_index: item.row_index,
            title: item.title.clone(),
        });
        let shared = Arc::clone(&shared);
        let system = Arc::clone(&system);
        let fields = Arc::clone(&fields);
        let tx = tx.clone();
        tokio::spawn(async move {
            let _permit = permit;
            let cancel = shared.cancel.clone();
            let backend = Arc::clone(&shared.backend);
            let work = retry::attempt_with_retry_gated(
                item.row_index,
                policy,
                |_| extract_once(backend.as_ref(), &system, &item.user_prompt, &fields),
                || shared.wait_while_paused(),
            );
            tokio::select! {
                result = work => {
                    let _ = tx.send(WorkerMsg::Finished(result));
                }
                _ = cancel.cancelled() => {}
            }
        });
    }
}

/// Extracts a single row outside a batch run, with the usual retries.
pub async fn run_single(
    backend: &dyn ChatBackend,
    settings: &RequestSettings,
    system_prompt: &str,
    fields: &[ExtractionField],
    item: &WorkItem,
) -> RecordResult {
    let policy = RetryPolicy::new(settings.max_retries, settings.retry_delay());
    attempt_with_retry(item.row_index, policy, |_| {
        extract_once(backend, system_prompt, &item.user_prompt, fields)
    })
    .await
}
