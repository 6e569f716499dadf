//! Remote chat backend behaviour against the scripted loopback stub:
//! request shape, authentication, retry policy, error taxonomy, and the
//! end-to-end engine path.

use std::time::{Duration, Instant};

use malrag_core::db::build_database;
use malrag_core::flow::FlowRecord;
use malrag_core::llm::{generate, BackendConfig};
use malrag_core::norm::NormConfig;
use malrag_core::pipeline::{Ablation, Engine};
use malrag_core::prompt::{PromptTemplate, RenderedPrompt};
use malrag_core::retrieval::{EvidenceSet, RetrievalConfig};
use malrag_core::LlmError;

mod common;
use common::{chat_body, scripted_stub, StubResponse};

fn prompt_and_evidence() -> (RenderedPrompt, EvidenceSet) {
    let prompt = RenderedPrompt {
        text: "which class is this flow?".into(),
        segments: vec![],
        label_space: vec!["alpha".into(), "beta".into(), "novel".into()],
    };
    (prompt, EvidenceSet::empty())
}

fn remote(stub_url: &str) -> BackendConfig {
    let mut cfg = BackendConfig::remote(stub_url, "stub-model");
    cfg.timeout_seconds = 5.0;
    cfg
}

#[test]
fn success_posts_model_prompt_temperature_and_bearer_key() {
    let (prompt, evidence) = prompt_and_evidence();
    let stub = scripted_stub(vec![StubResponse::new(200, chat_body("ANSWER: beta"))]);
    let mut cfg = remote(&stub.url);
    cfg.api_key = Some("sekret-token".into());
    cfg.temperature = 0.25;

    let raw = generate(&prompt, &evidence, &cfg).unwrap();
    assert_eq!(raw, "ANSWER: beta");
    assert_eq!(stub.hit_count(), 1);

    let requests = stub.requests.lock().unwrap();
    let request = &requests[0];
    let lower = request.to_lowercase();
    assert!(
        lower.contains("authorization: bearer sekret-token"),
        "missing bearer header in:\n{request}"
    );
    let body_start = request.find("\r\n\r\n").unwrap() + 4;
    let body: serde_json::Value = serde_json::from_str(&request[body_start..]).unwrap();
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["temperature"], 0.25);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], prompt.text);
}

#[test]
fn no_key_means_no_authorization_header() {
    let (prompt, evidence) = prompt_and_evidence();
    let stub = scripted_stub(vec![StubResponse::new(200, chat_body("ANSWER: alpha"))]);
    let cfg = remote(&stub.url);
    generate(&prompt, &evidence, &cfg).unwrap();
    let requests = stub.requests.lock().unwrap();
    assert!(!requests[0].to_lowercase().contains("authorization:"));
}

#[test]
fn transient_statuses_are_retried_until_success() {
    let (prompt, evidence) = prompt_and_evidence();
    let stub = scripted_stub(vec![
        StubResponse::new(500, "transient"),
        StubResponse::new(429, "slow down"),
        StubResponse::new(200, chat_body("ANSWER: alpha")),
    ]);
    let mut cfg = remote(&stub.url);
    cfg.max_retries = 3;
    let raw = generate(&prompt, &evidence, &cfg).unwrap();
    assert_eq!(raw, "ANSWER: alpha");
    assert_eq!(stub.hit_count(), 3);
}

#[test]
fn exhausted_retries_count_every_attempt() {
    let (prompt, evidence) = prompt_and_evidence();
    let stub = scripted_stub(vec![
        StubResponse::new(503, "a"),
        StubResponse::new(503, "b"),
    ]);
    let mut cfg = remote(&stub.url);
    cfg.max_retries = 1;
    match generate(&prompt, &evidence, &cfg).unwrap_err() {
        LlmError::Backend { attempts, message } => {
            assert_eq!(attempts, 2);
            assert!(message.contains("503"), "message: {message}");
        }
        other => panic!("expected backend error, got {other}"),
    }
    assert_eq!(stub.hit_count(), 2);
}

#[test]
fn non_retryable_statuses_fail_on_the_first_attempt() {
    let (prompt, evidence) = prompt_and_evidence();
    let stub = scripted_stub(vec![
        StubResponse::new(404, "nope"),
        StubResponse::new(200, chat_body("unused")),
    ]);
    let mut cfg = remote(&stub.url);
    cfg.max_retries = 4;
    match generate(&prompt, &evidence, &cfg).unwrap_err() {
        LlmError::Status { status, message } => {
            assert_eq!(status, 404);
            assert!(message.contains("nope"));
        }
        other => panic!("expected status error, got {other}"),
    }
    assert_eq!(stub.hit_count(), 1);
}

#[test]
fn malformed_success_bodies_are_parse_errors() {
    let (prompt, evidence) = prompt_and_evidence();
    for body in ["not json at all", r#"{"choices": []}"#] {
        let stub = scripted_stub(vec![StubResponse::new(200, body)]);
        let cfg = remote(&stub.url);
        match generate(&prompt, &evidence, &cfg).unwrap_err() {
            LlmError::Parse { .. } => {}
            other => panic!("expected parse error for {body:?}, got {other}"),
        }
        assert_eq!(stub.hit_count(), 1);
    }
}

#[test]
fn slow_responses_trip_the_client_timeout() {
    let (prompt, evidence) = prompt_and_evidence();
    let stub = scripted_stub(vec![StubResponse::delayed(
        200,
        chat_body("too late"),
        Duration::from_secs(3),
    )]);
    let mut cfg = remote(&stub.url);
    cfg.timeout_seconds = 0.3;
    let start = Instant::now();
    match generate(&prompt, &evidence, &cfg).unwrap_err() {
        LlmError::Timeout { seconds } => assert_eq!(seconds, 0.3),
        other => panic!("expected timeout, got {other}"),
    }
    assert!(
        start.elapsed() < Duration::from_secs(2),
        "timeout did not cut the call short"
    );
}

#[test]
fn connection_refused_is_retried_then_reported() {
    let (prompt, evidence) = prompt_and_evidence();
    // Bind-and-drop: the port is now closed, so every attempt is refused.
    let url = {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}/v1/chat/completions", listener.local_addr().unwrap())
    };
    let mut cfg = remote(&url);
    cfg.max_retries = 1;
    match generate(&prompt, &evidence, &cfg).unwrap_err() {
        LlmError::Backend { attempts, .. } => assert_eq!(attempts, 2),
        other => panic!("expected backend error, got {other}"),
    }
}

#[test]
fn engine_round_trips_through_the_remote_backend() {
    let mk_flow = |id: &str, label: &str, fill: u8| {
        FlowRecord::new(
            id,
            Some(label.to_string()),
            "TCP|TLS",
            vec![fill; 16],
            vec![100; 4],
            vec![0.01; 3],
            vec![],
        )
        .unwrap()
    };
    let flows = vec![
        mk_flow("a-0", "alpha", 1),
        mk_flow("a-1", "alpha", 2),
        mk_flow("b-0", "beta", 200),
        mk_flow("b-1", "beta", 201),
    ];
    let cfg = NormConfig {
        l_pay: 16,
        l_len: 4,
        l_time: 4,
        w_seg: 2,
    };
    let db = build_database(&flows, &cfg).unwrap().database;

    let stub = scripted_stub(vec![StubResponse::new(
        200,
        chat_body("The payload view matches alpha closely.\nANSWER: alpha"),
    )]);
    let engine = Engine::new(
        db,
        RetrievalConfig { k: 2, alpha: 2.0 },
        remote(&stub.url),
        PromptTemplate::builtin(),
        true,
        Ablation::Full,
    )
    .unwrap();

    let query = FlowRecord::new(
        "q-0",
        None,
        "TCP|TLS",
        vec![1; 16],
        vec![100; 4],
        vec![0.01; 3],
        vec![],
    )
    .unwrap();
    let got = engine.classify_flow(&query).unwrap();
    assert_eq!(got.verdict.label, "alpha");
    assert_eq!(
        got.verdict.reasoning.as_deref(),
        Some("The payload view matches alpha closely.")
    );
    assert!(got.verdict.provenance.backend.starts_with("remote:stub-model@http://127.0.0.1:"));
    assert!(got
        .verdict
        .provenance
        .raw_response
        .ends_with("ANSWER: alpha"));

    // The prompt that went over the wire is the one recorded in provenance.
    let requests = stub.requests.lock().unwrap();
    let body_start = requests[0].find("\r\n\r\n").unwrap() + 4;
    let body: serde_json::Value = serde_json::from_str(&requests[0][body_start..]).unwrap();
    assert_eq!(body["messages"][0]["content"], got.prompt.text);
}
