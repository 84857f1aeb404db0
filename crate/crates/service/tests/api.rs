use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use futures::StreamExt;
use litextract_core::store::LocalStore;
use litextract_mock::{Latency, MockScript, MockServer};
use litextract_service::{serve, AppState, ServiceError, ServiceHandle};
use reqwest::multipart::{Form, Part};
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};

fn cnki_csv(rows: usize) -> String {
    let mut s = String::from("篇名,作者,摘要,关键词,文献来源,发表时间,DOI\n");
    for i in 0..rows {
        s.push_str(&format!(
            "Paper {i},Author {i},\"Abstract {i}, with a comma\",kw{i};other,Journal {},2024-01-{:02},10.1000/{i}\n",
            i % 3,
            i % 28 + 1
        ));
    }
    s
}

struct Harness {
    http: Client,
    base: String,
    _service: ServiceHandle,
    mock: MockServer,
    _home: tempfile::TempDir,
    home_path: std::path::PathBuf,
}

async fn harness(script: MockScript) -> Harness {
    let home = tempfile::tempdir().unwrap();
    let home_path = home.path().to_path_buf();
    start(script, home, home_path).await
}

async fn start(script: MockScript, home: tempfile::TempDir, home_path: std::path::PathBuf) -> Harness {
    let mock = MockServer::start_local(script).await.unwrap();
    let state = AppState::new(LocalStore::open(&home_path));
    let service = serve(state, SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap();
    Harness {
        http: Client::new(),
        base: service.url(),
        _service: service,
        mock,
        _home: home,
        home_path,
    }
}

impl Harness {
    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    async fn upload(&self, csv: &str) -> Value {
        let part = Part::bytes(csv.as_bytes().to_vec()).file_name("cnki.csv");
        let resp = self
            .http
            .post(self.url("/upload"))
            .multipart(Form::new().part("file", part))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        resp.json().await.unwrap()
    }

    async fn put(&self, path: &str, body: Value) -> reqwest::Response {
        self.http.put(self.url(path)).json(&body).send().await.unwrap()
    }

    async fn post(&self, path: &str) -> reqwest::Response {
        self.http.post(self.url(path)).send().await.unwrap()
    }

    async fn progress(&self) -> Value {
        self.http.get(self.url("/progress")).send().await.unwrap().json().await.unwrap()
    }

    async fn configure(&self) {
        let cfg = json!({
            "provider": "custom",
            "base_url": self.mock.base_url(),
            "settings": {"model": "mock-model", "concurrency": 3, "retry_delay_ms": 0},
        });
        assert_eq!(self.put("/config", cfg).await.status(), StatusCode::OK);
        let schema = self.put("/schema", json!({"preset": "paper_info"})).await;
        assert_eq!(schema.status(), StatusCode::OK);
    }

    async fn wait_for_state(&self, state: &str) -> Value {
        for _ in 0..600 {
            let p = self.progress().await;
            if p["state"] == state && self.summary().await["running"] == false {
                return p;
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
        panic!("state {state} never reached");
    }

    async fn summary(&self) -> Value {
        self.http.get(self.url("/session")).send().await.unwrap().json().await.unwrap()
    }

    async fn export_csv(&self) -> Vec<u8> {
        let resp = self
            .http
            .get(self.url("/export?mode=all_columns&format=csv"))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        resp.bytes().await.unwrap().to_vec()
    }
}

#[tokio::test]
async fn wizard_pass_with_pause_edit_and_export() {
    let h = harness(MockScript::default().with_latency(Latency::Fixed(25))).await;
    let up = h.upload(&cnki_csv(50)).await;
    assert_eq!(up["rows"], 50);
    assert_eq!(up["mapping"]["entries"].as_array().unwrap().len(), 7);
    h.configure().await;

    let events = h.http.get(h.url("/events")).send().await.unwrap();
    let collector = tokio::spawn(async move {
        let mut stream = events.bytes_stream();
        let mut text = String::new();
        while let Some(chunk) = stream.next().await {
            text.push_str(&String::from_utf8_lossy(&chunk.unwrap()));
            if text.contains("\"state\":\"done\"") {
                break;
            }
        }
        text
    });
    tokio::time::sleep(Duration::from_millis(50)).await;

    assert_eq!(h.post("/run").await.status(), StatusCode::ACCEPTED);
    tokio::time::sleep(Duration::from_millis(120)).await;
    assert_eq!(h.post("/pause").await.status(), StatusCode::OK);
    assert_eq!(h.progress().await["state"], "paused");
    tokio::time::sleep(Duration::from_millis(300)).await;
    let frozen = h.progress().await["processed"].clone();
    tokio::time::sleep(Duration::from_millis(450)).await;
    assert_eq!(h.progress().await["processed"], frozen);
    assert!(frozen.as_u64().unwrap() < 50);
    assert_eq!(h.post("/resume").await.status(), StatusCode::OK);

    let done = h.wait_for_state("done").await;
    assert_eq!(done["processed"], 50);
    assert_eq!(done["succeeded"], 50);

    let edit = h
        .put("/results/3/field", json!({"name": "Methodology", "value": "RCT"}))
        .await;
    assert_eq!(edit.status(), StatusCode::OK);

    let csv = h.export_csv().await;
    assert_eq!(&csv[..3], &[0xEF, 0xBB, 0xBF]);
    let table = litextract_core::table::parse_csv(&csv).unwrap();
    assert_eq!(table.len(), 50);
    assert_eq!(table.cell(3, "Methodology"), Some("RCT"));
    assert_ne!(table.cell(4, "Methodology"), Some("RCT"));

    let text = tokio::time::timeout(Duration::from_secs(10), collector).await.unwrap().unwrap();
    assert_eq!(text.matches("event: record_completed").count(), 50);
    assert!(text.contains("event: state_changed"));
}

#[tokio::test]
async fn conflicts_and_missing_rows() {
    let h = harness(MockScript::default().with_latency(Latency::Fixed(40))).await;
    h.upload(&cnki_csv(30)).await;
    h.configure().await;

    assert_eq!(h.post("/pause").await.status(), StatusCode::CONFLICT);
    let pending_edit = h.put("/results/0/field", json!({"name": "Dataset", "value": "x"})).await;
    assert_eq!(pending_edit.status(), StatusCode::CONFLICT);
    let missing = h.put("/results/99/field", json!({"name": "Dataset", "value": "x"})).await;
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);
    assert_eq!(h.post("/results/99/retry").await.status(), StatusCode::NOT_FOUND);

    assert_eq!(h.post("/run").await.status(), StatusCode::ACCEPTED);
    assert_eq!(h.post("/run").await.status(), StatusCode::CONFLICT);
    assert_eq!(h.put("/schema", json!({"preset": "lit_review"})).await.status(), StatusCode::CONFLICT);
    assert_eq!(h.post("/cancel").await.status(), StatusCode::OK);
    let p = h.wait_for_state("cancelled").await;
    assert!(p["processed"].as_u64().unwrap() < 30);

    let export = h
        .http
        .get(h.url("/export?mode=extracted_only&format=json"))
        .send()
        .await
        .unwrap();
    assert!(export.status() == StatusCode::OK || export.status() == StatusCode::CONFLICT);
    let bad_format = h.http.get(h.url("/export?format=pdf")).send().await.unwrap();
    assert_eq!(bad_format.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn run_requires_table_and_schema() {
    let h = harness(MockScript::default()).await;
    assert_eq!(h.post("/run").await.status(), StatusCode::BAD_REQUEST);
    h.upload(&cnki_csv(2)).await;
    assert_eq!(h.post("/run").await.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn preview_and_single_row_test() {
    let h = harness(MockScript::default()).await;
    h.upload(&cnki_csv(3)).await;
    h.configure().await;
    let p: Value = h
        .http
        .post(h.url("/prompt/preview"))
        .json(&json!({"row": 1}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(p["system_prompt"].as_str().unwrap().contains("Research Topic"));
    assert!(p["user_prompt"].as_str().unwrap().contains("Paper 1"));
    assert_eq!(p["template"]["unknown"], json!([]));

    let t: Value = h.post("/prompt/test").await.json().await.unwrap();
    assert_eq!(t["result"]["status"], "success");
    // A prompt test does not touch the session results.
    let results: Value = h.http.get(h.url("/results")).send().await.unwrap().json().await.unwrap();
    assert_eq!(results[0]["status"], "pending");
}

#[tokio::test]
async fn mapping_edits_are_validated() {
    let h = harness(MockScript::default()).await;
    h.upload(&cnki_csv(1)).await;
    let good = h
        .put("/mapping", json!({"entries": [{"column": "摘要", "target": "title"}]}))
        .await;
    assert_eq!(good.status(), StatusCode::OK);
    let bad = h
        .put("/mapping", json!({"entries": [{"column": "nope", "target": "title"}]}))
        .await;
    assert_eq!(bad.status(), StatusCode::BAD_REQUEST);
    let m: Value = h.http.get(h.url("/mapping")).send().await.unwrap().json().await.unwrap();
    assert_eq!(m["entries"][0]["column"], "摘要");
}

#[tokio::test]
async fn retry_a_failed_row() {
    // Every attempt fails, so all rows end failed; retry then succeeds
    // against a healthy server.
    let h = harness(MockScript::new(1.0, 3).unwrap()).await;
    h.upload(&cnki_csv(2)).await;
    h.configure().await;
    h.put(
        "/config",
        json!({"provider": "custom", "base_url": h.mock.base_url(), "settings": {"model": "m", "max_retries": 1, "retry_delay_ms": 0}}),
    )
    .await;
    h.post("/run").await;
    let p = h.wait_for_state("done").await;
    assert_eq!(p["failed"], 2);

    let healthy = MockServer::start_local(MockScript::default()).await.unwrap();
    h.put(
        "/config",
        json!({"provider": "custom", "base_url": healthy.base_url(), "settings": {"model": "m", "max_retries": 1, "retry_delay_ms": 0}}),
    )
    .await;
    let r: Value = h.post("/results/1/retry").await.json().await.unwrap();
    assert_eq!(r["status"], "success");
    assert_eq!(h.progress().await["succeeded"], 1);
}

#[tokio::test]
async fn restart_restores_results_from_checkpoint() {
    let home = tempfile::tempdir().unwrap();
    let home_path = home.path().to_path_buf();
    let csv = cnki_csv(25);
    let before;
    {
        let h = start(MockScript::default(), tempfile::tempdir().unwrap(), home_path.clone()).await;
        h.upload(&csv).await;
        h.configure().await;
        h.post("/run").await;
        h.wait_for_state("done").await;
        h.put("/results/2/field", json!({"name": "Dataset", "value": "edited"})).await;
        before = h.export_csv().await;
    }
    let h = start(MockScript::default(), home, home_path).await;
    h.upload(&csv).await;
    h.configure().await;
    let restored: Value = h.post("/checkpoint/restore").await.json().await.unwrap();
    assert_eq!(restored["restored"], 25);
    assert_eq!(h.export_csv().await, before);
    assert_eq!(h.mock.request_count(), 0);
    assert!(h.home_path.join("checkpoints").exists());
}

#[tokio::test]
async fn clear_and_credentials() {
    let h = harness(MockScript::default()).await;
    let stored = h.put("/credential", json!({"provider": "qwen", "key": "sk-test"})).await;
    assert_eq!(stored.status(), StatusCode::NO_CONTENT);
    let empty = h.put("/credential", json!({"provider": "qwen", "key": ""})).await;
    assert_eq!(empty.status(), StatusCode::BAD_REQUEST);
    let raw = std::fs::read_to_string(h.home_path.join("config.json")).unwrap();
    assert!(!raw.contains("sk-test"));
    assert_eq!(h.post("/clear").await.status(), StatusCode::NO_CONTENT);
    assert!(!h.home_path.join("config.json").exists());
}

#[tokio::test]
async fn refuses_non_loopback_bind() {
    let dir = tempfile::tempdir().unwrap();
    let state: Arc<AppState> = AppState::new(LocalStore::open(dir.path()));
    let err = serve(state, SocketAddr::from(([0, 0, 0, 0], 0))).await.unwrap_err();
    assert!(matches!(err, ServiceError::NotLoopback(_)));
}
