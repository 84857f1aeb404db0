use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use litextract_core::engine::EngineEvent;
use litextract_core::export::{ExportFormat, ExportJob, ExportMode};
use litextract_core::mapping::FieldMapping;
use litextract_core::provider::ProviderId;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio_stream::wrappers::BroadcastStream;

use crate::error::{ApiError, ApiResult};
use crate::session::{AppState, ServiceConfig};

type AppStateRef = State<Arc<AppState>>;

const MAX_UPLOAD_BYTES: usize = 200 * 1024 * 1024;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/session", get(session))
        .route("/upload", post(upload).layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES)))
        .route("/mapping", get(get_mapping).put(put_mapping))
        .route("/schema", get(get_schema).put(put_schema))
        .route("/prompt/preview", post(preview))
        .route("/prompt/test", post(test_prompt))
        .route("/config", get(get_config).put(put_config))
        .route("/credential", put(put_credential))
        .route("/clear", post(clear))
        .route("/run", post(run))
        .route("/pause", post(pause))
        .route("/resume", post(resume))
        .route("/cancel", post(cancel))
        .route("/progress", get(progress))
        .route("/events", get(events))
        .route("/checkpoint/restore", post(restore))
        .route("/results", get(results))
        .route("/results/{row}/retry", post(retry_row))
        .route("/results/{row}/field", put(edit_field))
        .route("/export", get(export))
        .with_state(state)
}

async fn session(State(st): AppStateRef) -> Json<Value> {
    Json(st.summary())
}

async fn upload(State(st): AppStateRef, mut form: Multipart) -> ApiResult<Json<Value>> {
    while let Some(field) = form.next_field().await.map_err(ApiError::bad)? {
        if field.name() != Some("file") {
            continue;
        }
        let name = field.file_name().unwrap_or("upload.csv").to_string();
        let bytes = field.bytes().await.map_err(ApiError::bad)?;
        let summary = st.upload(&name, &bytes)?;
        return Ok(Json(serde_json::to_value(summary).expect("summary serializes")));
    }
    Err(ApiError::BadRequest("multipart field \"file\" is required".into()))
}

async fn get_mapping(State(st): AppStateRef) -> Json<FieldMapping> {
    Json(st.mapping())
}

async fn put_mapping(State(st): AppStateRef, Json(mapping): Json<FieldMapping>) -> ApiResult<Json<FieldMapping>> {
    st.set_mapping(mapping).map(Json)
}

async fn get_schema(State(st): AppStateRef) -> ApiResult<Json<Value>> {
    st.schema().map(Json)
}

async fn put_schema(State(st): AppStateRef, Json(body): Json<Value>) -> ApiResult<Json<Value>> {
    st.set_schema(body).map(Json)
}

#[derive(Debug, Default, Deserialize)]
struct RowBody {
    #[serde(default)]
    row: usize,
}

async fn preview(State(st): AppStateRef, body: Option<Json<RowBody>>) -> ApiResult<Json<Value>> {
    let row = body.map(|b| b.row).unwrap_or_default();
    st.preview(row).map(Json)
}

async fn test_prompt(State(st): AppStateRef, body: Option<Json<RowBody>>) -> ApiResult<Json<Value>> {
    let row = body.map(|b| b.row).unwrap_or_default();
    st.test_prompt(row).await.map(Json)
}

async fn get_config(State(st): AppStateRef) -> Json<ServiceConfig> {
    Json(st.config())
}

async fn put_config(State(st): AppStateRef, Json(cfg): Json<ServiceConfig>) -> ApiResult<Json<ServiceConfig>> {
    st.set_config(cfg).map(Json)
}

#[derive(Debug, Deserialize)]
struct CredentialBody {
    provider: ProviderId,
    key: String,
}

async fn put_credential(State(st): AppStateRef, Json(body): Json<CredentialBody>) -> ApiResult<StatusCode> {
    st.set_credential(body.provider, &body.key)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn clear(State(st): AppStateRef) -> ApiResult<StatusCode> {
    st.clear()?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Default, Deserialize)]
struct RunBody {
    #[serde(default)]
    resume: bool,
}

async fn run(State(st): AppStateRef, body: Option<Json<RunBody>>) -> ApiResult<(StatusCode, Json<Value>)> {
    let resume = body.is_some_and(|b| b.resume);
    st.start_run(resume).map(|v| (StatusCode::ACCEPTED, Json(v)))
}

async fn pause(State(st): AppStateRef) -> ApiResult<Json<Value>> {
    st.pause().map(|p| Json(json!(p)))
}

async fn resume(State(st): AppStateRef) -> ApiResult<Json<Value>> {
    st.resume().map(|p| Json(json!(p)))
}

async fn cancel(State(st): AppStateRef) -> ApiResult<Json<Value>> {
    st.cancel().map(|p| Json(json!(p)))
}

async fn progress(State(st): AppStateRef) -> Json<Value> {
    Json(json!(st.progress()))
}

fn event_name(ev: &EngineEvent) -> &'static str {
    match ev {
        EngineEvent::StateChanged { .. } => "state_changed",
        EngineEvent::RecordStarted { .. } => "record_started",
        EngineEvent::RecordCompleted { .. } => "record_completed",
        EngineEvent::CheckpointSaved { .. } => "checkpoint_saved",
        EngineEvent::Warning { .. } => "warning",
    }
}

async fn events(State(st): AppStateRef) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let stream = BroadcastStream::new(st.subscribe()).filter_map(|msg| async move {
        match msg {
            Ok(ev) => Event::default().event(event_name(&ev)).json_data(&ev).ok().map(Ok),
            Err(e) => {
                tracing::warn!("event subscriber lagged: {e}");
                None
            }
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
}

async fn restore(State(st): AppStateRef) -> ApiResult<Json<Value>> {
    st.restore().map(Json)
}

async fn results(State(st): AppStateRef) -> Json<Value> {
    Json(json!(st.results()))
}

async fn retry_row(State(st): AppStateRef, Path(row): Path<usize>) -> ApiResult<Json<Value>> {
    st.retry_row(row).await.map(|r| Json(json!(r)))
}

#[derive(Debug, Deserialize)]
struct EditBody {
    name: String,
    value: Value,
}

async fn edit_field(State(st): AppStateRef, Path(row): Path<usize>, Json(body): Json<EditBody>) -> ApiResult<Json<Value>> {
    st.edit_field(row, &body.name, body.value).map(|r| Json(json!(r)))
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    #[serde(default)]
    mode: Option<String>,
    #[serde(default)]
    format: Option<String>,
    #[serde(default)]
    include_status: bool,
}

async fn export(State(st): AppStateRef, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    let mode: ExportMode = q.mode.as_deref().unwrap_or("all_columns").parse().map_err(ApiError::bad)?;
    let format: ExportFormat = q.format.as_deref().unwrap_or("csv").parse().map_err(ApiError::bad)?;
    let job = ExportJob::new(mode, format).with_status(q.include_status);
    let bytes = st.export(&job)?;
    let disposition = format!("attachment; filename=\"results.{}\"", format.extension());
    Ok((
        [
            (header::CONTENT_TYPE, format.content_type().to_string()),
            (header::CONTENT_DISPOSITION, disposition),
        ],
        bytes,
    )
        .into_response())
}
