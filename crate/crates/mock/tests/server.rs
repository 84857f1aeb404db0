use std::sync::Arc;

use litextract_core::engine::RunPlan;
use litextract_core::mapping::{default_rules, map_columns};
use litextract_core::output::parse_response;
use litextract_core::provider::{ChatClient, ProviderId, ProviderProfile, RequestSettings};
use litextract_core::schema::{Preset, Schema};
use litextract_core::table::parse_csv;
use litextract_core::{BatchEngine, RecordStatus};
use litextract_mock::{Latency, MockScript, MockServer, NoiseMode, Outcome};
use serde_json::{json, Value};

fn client(server: &MockServer, retries: u32, concurrency: usize) -> ChatClient {
    let profile = ProviderProfile::builtin(ProviderId::Custom)
        .with_base_url(server.base_url())
        .unwrap();
    let mut settings = RequestSettings::new("mock-model");
    settings.max_retries = retries;
    settings.retry_delay_ms = 0;
    settings.concurrency = concurrency;
    ChatClient::new(profile, settings, "test-key").unwrap()
}

fn plan(rows: usize) -> RunPlan {
    let mut csv = String::from("篇名,摘要,关键词\n");
    for i in 0..rows {
        csv.push_str(&format!("Title {i},Abstract {i},kw{i}\n"));
    }
    let t = parse_csv(csv.as_bytes()).unwrap();
    let mapping = map_columns(t.columns(), &default_rules());
    let schema = Schema::from_preset(Preset::PaperInfo, "Title: {{篇名}}\nAbstract: {{摘要}}");
    RunPlan::build("t", &t, &mapping, &schema, ProviderId::Custom, "mock-model").unwrap()
}

#[tokio::test]
async fn clean_replies_parse_against_the_schema() {
    let server = MockServer::start_local(MockScript::default()).await.unwrap();
    let c = client(&server, 0, 1);
    let system = Schema::from_preset(Preset::PaperInfo, "").bundle().unwrap().system_prompt;
    let ex = c.chat(&system, "Title: A").await.unwrap();
    let parsed = parse_response(&ex.response_text, Preset::PaperInfo.fields().as_slice()).unwrap();
    assert_eq!(parsed.values.len(), 6);
    assert!(parsed.missing_fields.is_empty());
    assert_eq!(ex.http_status, 200);
}

#[tokio::test]
async fn every_noise_mode_is_recoverable_end_to_end() {
    for noise in [NoiseMode::PrefixSuffix, NoiseMode::CodeFence, NoiseMode::DoubleObject] {
        let server = MockServer::start_local(MockScript::default().with_noise(noise)).await.unwrap();
        let out = BatchEngine::new(Arc::new(client(&server, 0, 3)), client(&server, 0, 3).settings().clone())
            .run(plan(5), None)
            .await
            .unwrap();
        assert!(
            out.results.iter().all(|r| r.status == RecordStatus::Success),
            "{noise}"
        );
        if noise == NoiseMode::PrefixSuffix {
            assert!(out.results[0].raw_response.starts_with("Result: {"));
            assert!(out.results[0].raw_response.ends_with("} Done."));
        }
    }
}

#[tokio::test]
async fn total_failure_exhausts_four_attempts() {
    let server = MockServer::start_local(MockScript::new(1.0, 1).unwrap()).await.unwrap();
    let c = client(&server, 3, 2);
    let settings = c.settings().clone();
    let out = BatchEngine::new(Arc::new(c), settings).run(plan(3), None).await.unwrap();
    for r in &out.results {
        assert_eq!(r.status, RecordStatus::Failed);
        assert_eq!(r.attempts, 4);
    }
    let log = server.request_log();
    assert_eq!(log.len(), 12);
    let codes: Vec<_> = log
        .iter()
        .map(|r| match r.outcome {
            Outcome::Failure(code) => code,
            other => panic!("unexpected {other:?}"),
        })
        .collect();
    assert_eq!(codes.iter().filter(|&&c| c == 500).count(), 6);
    assert_eq!(codes.iter().filter(|&&c| c == 429).count(), 6);
}

#[tokio::test]
async fn identical_seeds_replay_identically() {
    let mut runs = Vec::new();
    for _ in 0..2 {
        let server = MockServer::start_local(MockScript::new(0.3, 42).unwrap()).await.unwrap();
        let c = client(&server, 3, 4);
        let settings = c.settings().clone();
        let out = BatchEngine::new(Arc::new(c), settings).run(plan(40), None).await.unwrap();
        let mut per_request: Vec<_> = server
            .request_log()
            .into_iter()
            .map(|r| (r.occurrence, r.outcome == Outcome::Success))
            .collect();
        per_request.sort();
        let attempts: Vec<_> = out.results.iter().map(|r| (r.attempts, r.status)).collect();
        runs.push((attempts, per_request, out.results));
    }
    assert_eq!(runs[0], runs[1]);
}

#[tokio::test]
async fn in_flight_counter_tracks_concurrency() {
    let script = MockScript::default().with_latency(Latency::Fixed(30));
    let server = MockServer::start_local(script).await.unwrap();
    let c = client(&server, 0, 4);
    let settings = c.settings().clone();
    BatchEngine::new(Arc::new(c), settings).run(plan(20), None).await.unwrap();
    assert_eq!(server.max_in_flight(), 4);
    assert!(server.request_log().iter().all(|r| r.in_flight <= 4));
    assert_eq!(server.in_flight(), 0);
}

#[tokio::test]
async fn malformed_bodies_and_other_paths() {
    let server = MockServer::start_local(MockScript::default()).await.unwrap();
    let http = reqwest::Client::new();
    let url = format!("{}/chat/completions", server.base_url());
    let bad = http.post(&url).body("not json").send().await.unwrap();
    assert_eq!(bad.status(), 400);
    let no_user = http
        .post(&url)
        .json(&json!({"model": "m", "messages": [{"role": "system", "content": "x"}]}))
        .send()
        .await
        .unwrap();
    assert_eq!(no_user.status(), 400);
    let models = http.get(format!("{}/models", server.base_url())).send().await.unwrap();
    assert_eq!(models.status(), 404);
    let ok = http
        .post(&url)
        .json(&json!({"model": "m", "messages": [{"role": "user", "content": "hi"}]}))
        .send()
        .await
        .unwrap();
    assert_eq!(ok.status(), 200);
    let body: Value = ok.json().await.unwrap();
    assert_eq!(body["object"], "chat.completion");
    assert!(body["choices"][0]["message"]["content"].as_str().unwrap().contains("result"));
    server.shutdown().await;
}
