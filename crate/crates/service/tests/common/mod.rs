#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use imagetalk_core::domain::content_hash;
use imagetalk_core::metrics::load_embeddings;
use imagetalk_core::recognition::{FixtureEntry, RawDetection};
use imagetalk_core::{Engine, MockRecognition, SessionStore};
use imagetalk_service::{serve, AppState};
use serde_json::Value;
use tokio::sync::oneshot;

pub const LAKE: &[u8] = b"\x89PNG lake at dusk";
pub const CAT: &[u8] = b"\x89PNG sleeping cat";

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

pub fn fixtures() -> MockRecognition {
    let mut m = MockRecognition::default();
    m.insert(
        content_hash(LAKE),
        FixtureEntry {
            caption: Some("a wooden bridge over a lake".into()),
            objects: vec![
                RawDetection {
                    label: "bridge".into(),
                    score: 0.95,
                    bbox: [0.1, 0.2, 0.6, 0.3],
                },
                RawDetection {
                    label: "boat".into(),
                    score: 0.55,
                    bbox: [0.5, 0.5, 0.2, 0.2],
                },
            ],
        },
    );
    m.insert(
        content_hash(CAT),
        FixtureEntry {
            caption: Some("a cat asleep on a sofa".into()),
            objects: vec![RawDetection {
                label: "cat".into(),
                score: 0.9,
                bbox: [0.0, 0.0, 1.0, 1.0],
            }],
        },
    );
    m
}

pub struct Server {
    pub base: String,
    pub client: reqwest::Client,
    pub store: tempfile::TempDir,
    stop: Option<oneshot::Sender<()>>,
    task: Option<tokio::task::JoinHandle<()>>,
}

impl Server {
    pub async fn start(engine: Engine) -> Server {
        let store = tempfile::tempdir().unwrap();
        let table = load_embeddings(&fixtures_dir().join("embeddings.txt")).unwrap();
        let state = AppState::new(
            engine,
            SessionStore::open(store.path()).unwrap(),
            Some(Arc::new(table)),
            Duration::from_secs(5),
        );
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel();
        let task = tokio::spawn(async move {
            serve(listener, state, async {
                let _ = rx.await;
            })
            .await
            .unwrap();
        });
        Server {
            base,
            client: reqwest::Client::new(),
            store,
            stop: Some(tx),
            task: Some(task),
        }
    }

    pub async fn mock() -> Server {
        Server::start(Engine::mock(fixtures())).await
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    /// POST with a JSON body; `Value::Null` sends no body at all.
    pub async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let req = self.client.post(self.url(path));
        let req = if body.is_null() { req } else { req.json(&body) };
        let r = req.send().await.unwrap();
        decode(r).await
    }

    pub async fn put(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.client.put(self.url(path)).json(&body).send().await.unwrap();
        decode(r).await
    }

    pub async fn patch(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.client.patch(self.url(path)).json(&body).send().await.unwrap();
        decode(r).await
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.client.get(self.url(path)).send().await.unwrap();
        decode(r).await
    }

    pub async fn upload(&self, id: &str, name: &str, bytes: &[u8]) -> (u16, Value) {
        let part = reqwest::multipart::Part::bytes(bytes.to_vec()).file_name(name.to_string());
        let form = reqwest::multipart::Form::new().part("image", part);
        let r = self
            .client
            .post(self.url(&format!("/sessions/{id}/images")))
            .multipart(form)
            .send()
            .await
            .unwrap();
        decode(r).await
    }

    /// Stops the server after in-flight requests finish. The store is
    /// handed back so callers can inspect it.
    pub async fn shutdown(mut self) -> tempfile::TempDir {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.task.take() {
            t.await.unwrap();
        }
        self.store
    }
}

async fn decode(r: reqwest::Response) -> (u16, Value) {
    let status = r.status().as_u16();
    let text = r.text().await.unwrap();
    let body = if text.is_empty() {
        Value::Null
    } else {
        serde_json::from_str(&text).unwrap_or(Value::String(text))
    };
    (status, body)
}

/// What a scripted lifecycle run produced, minus ids and timestamps.
#[derive(Debug, PartialEq)]
pub struct LifecycleOutcome {
    pub stories: Vec<Value>,
    pub metrics: Value,
}

fn strip_volatile(mut v: Value) -> Value {
    if let Some(o) = v.as_object_mut() {
        o.remove("created_at");
        o.remove("session_id");
    }
    v
}

/// create → upload → recognize → edit → keywords/style → generate →
/// regenerate → amend → metrics, asserting every status on the way.
pub async fn lifecycle(server: &Server) -> LifecycleOutcome {
    let (st, created) = server
        .post(
            "/sessions",
            serde_json::json!({"reference_story": "We walked along the lake to the old bridge and watched the boats drift by in the evening light."}),
        )
        .await;
    assert_eq!(st, 201, "{created}");
    let id = created["id"].as_str().unwrap().to_string();

    let (st, img) = server.upload(&id, "lake.png", LAKE).await;
    assert_eq!(st, 201, "{img}");
    assert_eq!(img["id"], "img-1");
    assert_eq!(img["content_hash"], content_hash(LAKE));
    let (st, _) = server.upload(&id, "cat.jpg", CAT).await;
    assert_eq!(st, 201);

    let (st, rec) = server.post(&format!("/sessions/{id}/recognize"), Value::Null).await;
    assert_eq!(st, 200, "{rec}");
    let captions = rec["corpus"]["captions"].as_array().unwrap();
    assert_eq!(captions.len(), 2);
    assert!(rec["flags"].is_array());

    let (st, kw) = server
        .put(&format!("/sessions/{id}/keywords"), serde_json::json!({"keywords": ["lake", "walk", "bridge"]}))
        .await;
    assert_eq!(st, 200, "{kw}");

    // The cat caption shares nothing with the keywords.
    let (_, session) = server.get(&format!("/sessions/{id}")).await;
    let flags = session["corpus"]["flags"].as_array().unwrap();
    let cat_flag = flags
        .iter()
        .find(|f| f["target"]["kind"] == "caption" && f["target"]["index"] == 1);
    assert!(cat_flag.is_some(), "{flags:?}");

    let (st, edited) = server
        .patch(
            &format!("/sessions/{id}/context"),
            serde_json::json!({"target": "caption", "action": "remove", "index": 1}),
        )
        .await;
    assert_eq!(st, 200, "{edited}");
    assert_eq!(edited["corpus"]["captions"][1]["deleted"], true);

    let (st, _) = server
        .put(
            &format!("/sessions/{id}/style"),
            serde_json::json!({"style_id": "vivid", "acceptance_level": "augmented"}),
        )
        .await;
    assert_eq!(st, 200);

    let mut stories = Vec::new();
    let (st, v1) = server
        .post(&format!("/sessions/{id}/generate"), serde_json::json!({"mode": "kts"}))
        .await;
    assert_eq!(st, 201, "{v1}");
    let (st, v2) = server
        .post(
            &format!("/sessions/{id}/generate"),
            serde_json::json!({"mode": "auto", "params": {"temperature": 0.2, "max_length": 200, "seed": 3}}),
        )
        .await;
    assert_eq!(st, 201, "{v2}");
    let text = v2["text"].as_str().unwrap();
    assert!(text.contains("a wooden bridge over a lake"), "{text}");
    assert!(!text.contains("cat asleep"), "{text}");

    let (st, v3) = server.post(&format!("/sessions/{id}/steer/regenerate"), Value::Null).await;
    assert_eq!(st, 201, "{v3}");
    assert_eq!(v3["parent_version"], 2);

    let (st, v4) = server
        .post(
            &format!("/sessions/{id}/steer/amend"),
            serde_json::json!({"version": 3, "index": 0, "text": "I strolled by the lake."}),
        )
        .await;
    assert_eq!(st, 201, "{v4}");

    for v in 1..=4 {
        let (st, story) = server.get(&format!("/sessions/{id}/stories/{v}")).await;
        assert_eq!(st, 200);
        assert_eq!(story["version"], v);
        stories.push(strip_volatile(story));
    }
    let (st, metrics) = server.get(&format!("/sessions/{id}/metrics")).await;
    assert_eq!(st, 200, "{metrics}");
    LifecycleOutcome {
        stories,
        metrics: strip_volatile(metrics),
    }
}
