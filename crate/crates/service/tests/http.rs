mod common;

use std::sync::Arc;
use std::time::Duration;

use axum::routing::post;
use axum::{Json, Router};
use common::{lifecycle, Server, LAKE};
use imagetalk_core::{Engine, LlmBackendConfig, RemoteLlm};
use serde_json::{json, Value};

#[tokio::test]
async fn full_lifecycle_keeps_every_version() {
    let server = Server::mock().await;
    let out = lifecycle(&server).await;
    assert_eq!(out.stories.len(), 4);
    let modes: Vec<_> = out.stories.iter().map(|s| s["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["kts", "imagetalk_auto", "imagetalk_steered", "imagetalk_steered"]);
    // Amendment touched segment 0 only.
    let (a, b) = (&out.stories[2]["segments"], &out.stories[3]["segments"]);
    assert_ne!(a[0], b[0]);
    assert_eq!(a.as_array().unwrap()[1..], b.as_array().unwrap()[1..]);
    assert_eq!(out.stories[3]["segments"][0]["text"], "I strolled by the lake.");

    let stories = out.metrics["stories"].as_array().unwrap();
    assert_eq!(stories.len(), 4);
    assert!(stories.iter().all(|s| s["keystroke_savings"].as_f64().unwrap() > 0.0));
    assert!(out.metrics["keyword_ratio"].as_f64().unwrap() > 0.0);
    server.shutdown().await;
}

#[tokio::test]
async fn edit_log_and_story_list_track_every_mutation() {
    let server = Server::mock().await;
    let (_, created) = server.post("/sessions", Value::Null).await;
    let id = created["id"].as_str().unwrap();
    server.upload(id, "lake.png", LAKE).await;
    let edits = |v: &Value| v["edits"].as_array().unwrap().len();

    let (_, s0) = server.get(&format!("/sessions/{id}")).await;
    server.post(&format!("/sessions/{id}/recognize"), Value::Null).await;
    let (_, s1) = server.get(&format!("/sessions/{id}")).await;
    assert!(edits(&s1) > edits(&s0));

    server.put(&format!("/sessions/{id}/keywords"), json!({"keywords": ["lake"]})).await;
    let (_, s2) = server.get(&format!("/sessions/{id}")).await;
    assert_eq!(edits(&s2), edits(&s1) + 1);

    server
        .put(&format!("/sessions/{id}/style"), json!({"style_id": "formal", "acceptance_level": "creative"}))
        .await;
    let (_, s3) = server.get(&format!("/sessions/{id}")).await;
    assert_eq!(edits(&s3), edits(&s2) + 1);
    assert_eq!(s3["edits"].as_array().unwrap().last().unwrap()["target"], "style");

    server.post(&format!("/sessions/{id}/generate"), json!({"mode": "auto"})).await;
    let (_, s4) = server.get(&format!("/sessions/{id}")).await;
    assert_eq!(s4["stories"].as_array().unwrap().len(), 1);
    server.shutdown().await;
}

#[tokio::test]
async fn gets_do_not_change_state() {
    let server = Server::mock().await;
    lifecycle(&server).await;
    let (_, list) = server.get("/sessions/does-not-exist").await;
    assert!(list["error"].is_string());

    let (_, created) = server.post("/sessions", json!({})).await;
    let id = created["id"].as_str().unwrap();
    server.upload(id, "lake.png", LAKE).await;
    server.put(&format!("/sessions/{id}/keywords"), json!({"keywords": ["lake"]})).await;
    server.post(&format!("/sessions/{id}/generate"), json!({"mode": "kts"})).await;

    let (_, before) = server.get(&format!("/sessions/{id}")).await;
    let on_disk = std::fs::read(server.store.path().join(format!("{id}.json"))).unwrap();
    for _ in 0..3 {
        server.get(&format!("/sessions/{id}")).await;
        server.get(&format!("/sessions/{id}/stories/1")).await;
        server.get(&format!("/sessions/{id}/metrics")).await;
    }
    let (_, after) = server.get(&format!("/sessions/{id}")).await;
    assert_eq!(before, after);
    assert_eq!(on_disk, std::fs::read(server.store.path().join(format!("{id}.json"))).unwrap());
    server.shutdown().await;
}

#[tokio::test]
async fn unknown_session_and_version_are_404() {
    let server = Server::mock().await;
    for path in ["/sessions/nope", "/sessions/nope/metrics", "/sessions/nope/stories/1", "/sessions/../etc"] {
        let (st, body) = server.get(path).await;
        assert_eq!(st, 404, "{path}: {body}");
    }
    let (st, _) = server.post("/sessions/nope/generate", json!({"mode": "kts"})).await;
    assert_eq!(st, 404);
    let (st, _) = server.put("/sessions/nope/keywords", json!({"keywords": ["a"]})).await;
    assert_eq!(st, 404);

    let (_, created) = server.post("/sessions", Value::Null).await;
    let id = created["id"].as_str().unwrap();
    let (st, body) = server.get(&format!("/sessions/{id}/stories/7")).await;
    assert_eq!(st, 404, "{body}");
    server.shutdown().await;
}

#[tokio::test]
async fn malformed_bodies_name_the_field() {
    let server = Server::mock().await;
    let (_, created) = server.post("/sessions", Value::Null).await;
    let id = created["id"].as_str().unwrap();

    let cases = [
        ("put", "keywords", json!({"keywords": 5}), "keywords"),
        ("put", "keywords", json!({"keywords": ["ok", ""]}), "keywords"),
        ("put", "style", json!({"style_id": "loud", "acceptance_level": "creative"}), "style_id"),
        ("post", "generate", json!({"mode": "sideways"}), "mode"),
        ("post", "generate", json!({"mode": "kts", "params": {"temperature": "hot"}}), "params.temperature"),
        ("post", "steer/amend", json!({"version": 1, "index": -1, "text": "x"}), "index"),
    ];
    for (method, path, body, field) in cases {
        let url = format!("/sessions/{id}/{path}");
        let (st, resp) = match method {
            "put" => server.put(&url, body.clone()).await,
            _ => server.post(&url, body.clone()).await,
        };
        assert_eq!(st, 400, "{path} {body}: {resp}");
        assert!(resp["error"].is_string());
        assert_eq!(resp["field"], field, "{path} {body}: {resp}");
    }

    let r = server
        .client
        .put(server.url(&format!("/sessions/{id}/keywords")))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 400);

    // Out-of-range generation parameters are value errors, not parse errors.
    server.put(&format!("/sessions/{id}/keywords"), json!({"keywords": ["lake"]})).await;
    let (st, resp) = server
        .post(
            &format!("/sessions/{id}/generate"),
            json!({"mode": "kts", "params": {"temperature": -1.0, "max_length": 10}}),
        )
        .await;
    assert_eq!(st, 400, "{resp}");
    assert!(resp["field"].as_str().unwrap().contains("temperature"), "{resp}");

    let (st, resp) = server
        .patch(&format!("/sessions/{id}/context"), json!({"target": "keyword", "action": "remove", "index": 0}))
        .await;
    assert_eq!(st, 400, "{resp}");
    assert_eq!(resp["field"], "target");
    server.shutdown().await;
}

#[tokio::test]
async fn preconditions_and_bad_edits() {
    let server = Server::mock().await;
    let (_, created) = server.post("/sessions", Value::Null).await;
    let id = created["id"].as_str().unwrap();

    let (st, _) = server.post(&format!("/sessions/{id}/recognize"), Value::Null).await;
    assert_eq!(st, 422);
    let (st, _) = server.post(&format!("/sessions/{id}/generate"), json!({"mode": "auto"})).await;
    assert_eq!(st, 422);

    server.upload(id, "lake.png", LAKE).await;
    server.post(&format!("/sessions/{id}/recognize"), Value::Null).await;
    let (st, body) = server
        .patch(&format!("/sessions/{id}/context"), json!({"target": "object", "action": "remove", "index": 40}))
        .await;
    assert_eq!(st, 404, "{body}");
    let (st, body) = server
        .patch(
            &format!("/sessions/{id}/context"),
            json!({"target": "object", "action": "modify", "index": 1, "value": {"text": "bridge"}}),
        )
        .await;
    assert_eq!(st, 400, "{body}");

    server.put(&format!("/sessions/{id}/keywords"), json!({"keywords": ["lake"]})).await;
    server.post(&format!("/sessions/{id}/generate"), json!({"mode": "auto"})).await;
    let (st, body) = server
        .post(&format!("/sessions/{id}/steer/amend"), json!({"version": 1, "index": 99, "text": "x"}))
        .await;
    assert_eq!(st, 400, "{body}");
    let (st, _) = server
        .post(&format!("/sessions/{id}/steer/amend"), json!({"version": 9, "index": 0, "text": "x"}))
        .await;
    assert_eq!(st, 404);

    let (_, s) = server.get(&format!("/sessions/{id}")).await;
    assert_eq!(s["stories"].as_array().unwrap().len(), 1);
    server.shutdown().await;
}

#[tokio::test]
async fn empty_upload_is_rejected() {
    let server = Server::mock().await;
    let (_, created) = server.post("/sessions", Value::Null).await;
    let id = created["id"].as_str().unwrap();
    let (st, body) = server.upload(id, "x.png", b"").await;
    assert_eq!(st, 400, "{body}");
    let (_, s) = server.get(&format!("/sessions/{id}")).await;
    assert!(s["images"].as_array().unwrap().is_empty());
    server.shutdown().await;
}

#[tokio::test]
async fn sessions_survive_restart() {
    let server = Server::mock().await;
    let (_, created) = server.post("/sessions", Value::Null).await;
    let id = created["id"].as_str().unwrap().to_string();
    server.put(&format!("/sessions/{id}/keywords"), json!({"keywords": ["lake"]})).await;
    server.post(&format!("/sessions/{id}/generate"), json!({"mode": "kts"})).await;
    let doc = std::fs::read_to_string(server.store.path().join(format!("{id}.json"))).unwrap();
    let reloaded = imagetalk_core::domain::session_from_document(&doc).unwrap();
    assert_eq!(reloaded.stories.len(), 1);
    assert_eq!(reloaded.keywords.as_slice(), ["lake"]);
    server.shutdown().await;
}

#[tokio::test]
async fn identical_request_sequences_give_identical_results() {
    let a = Server::mock().await;
    let b = Server::mock().await;
    let ra = lifecycle(&a).await;
    let rb = lifecycle(&b).await;
    assert_eq!(ra, rb);
    a.shutdown().await;
    b.shutdown().await;
}

async fn slow_llm_engine(delay: Duration, timeout_ms: u64) -> Engine {
    let router = Router::new().route(
        "/complete",
        post(move || async move {
            tokio::time::sleep(delay).await;
            Json(json!({"text": "I went to the lake. It was calm."}))
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    std::env::set_var("IMAGETALK_SERVICE_TEST_KEY", "k");
    let cfg = LlmBackendConfig {
        timeout_ms,
        retries: 0,
        ..LlmBackendConfig::remote(url, "IMAGETALK_SERVICE_TEST_KEY")
    };
    Engine {
        llm: Arc::new(RemoteLlm::new(&cfg).unwrap()),
        ..Engine::mock(common::fixtures())
    }
}

#[tokio::test]
async fn concurrent_mutation_of_one_session_conflicts() {
    let server = Server::start(slow_llm_engine(Duration::from_millis(600), 5_000).await).await;
    let (_, created) = server.post("/sessions", Value::Null).await;
    let id = created["id"].as_str().unwrap().to_string();
    let (_, other) = server.post("/sessions", Value::Null).await;
    let other = other["id"].as_str().unwrap().to_string();
    server.put(&format!("/sessions/{id}/keywords"), json!({"keywords": ["lake"]})).await;

    let slow = {
        let client = server.client.clone();
        let url = server.url(&format!("/sessions/{id}/generate"));
        tokio::spawn(async move { client.post(url).json(&json!({"mode": "kts"})).send().await.unwrap() })
    };
    tokio::time::sleep(Duration::from_millis(150)).await;
    let (st, body) = server.put(&format!("/sessions/{id}/keywords"), json!({"keywords": ["sea"]})).await;
    assert_eq!(st, 409, "{body}");
    // Other sessions are not blocked.
    let (st, _) = server.put(&format!("/sessions/{other}/keywords"), json!({"keywords": ["sea"]})).await;
    assert_eq!(st, 200);

    assert_eq!(slow.await.unwrap().status().as_u16(), 201);
    let (_, s) = server.get(&format!("/sessions/{id}")).await;
    assert_eq!(s["keywords"], json!(["lake"]));
    assert_eq!(s["stories"].as_array().unwrap().len(), 1);
    server.shutdown().await;
}

#[tokio::test]
async fn backend_timeout_is_504_and_leaves_no_version() {
    let server = Server::start(slow_llm_engine(Duration::from_millis(800), 100).await).await;
    let (_, created) = server.post("/sessions", Value::Null).await;
    let id = created["id"].as_str().unwrap();
    server.put(&format!("/sessions/{id}/keywords"), json!({"keywords": ["lake"]})).await;
    let (st, body) = server.post(&format!("/sessions/{id}/generate"), json!({"mode": "kts"})).await;
    assert_eq!(st, 504, "{body}");
    let (_, s) = server.get(&format!("/sessions/{id}")).await;
    assert!(s["stories"].as_array().unwrap().is_empty());
    server.shutdown().await;
}

#[tokio::test]
async fn graceful_shutdown_completes_in_flight_request() {
    let server = Server::start(slow_llm_engine(Duration::from_millis(300), 5_000).await).await;
    let (_, created) = server.post("/sessions", Value::Null).await;
    let id = created["id"].as_str().unwrap().to_string();
    server.put(&format!("/sessions/{id}/keywords"), json!({"keywords": ["lake"]})).await;
    let pending = {
        let client = server.client.clone();
        let url = server.url(&format!("/sessions/{id}/generate"));
        tokio::spawn(async move { client.post(url).json(&json!({"mode": "kts"})).send().await.unwrap() })
    };
    tokio::time::sleep(Duration::from_millis(100)).await;
    let file = server.store.path().join(format!("{id}.json"));
    let shutdown = tokio::spawn(server.shutdown());
    assert_eq!(pending.await.unwrap().status().as_u16(), 201);
    let _store = shutdown.await.unwrap();
    let doc = std::fs::read_to_string(&file).unwrap();
    let saved = imagetalk_core::domain::session_from_document(&doc).unwrap();
    assert_eq!(saved.stories.len(), 1);
}
