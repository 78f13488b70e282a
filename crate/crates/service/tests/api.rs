use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use persona_core::corpus::{build_vocab, generate_synthetic};
use persona_core::neural::SequenceModelConfig;
use persona_core::receiver::{persona_pool, Receiver, ReceiverConfig};
use persona_core::transmitter::Transmitter;
use persona_service::api::router;
use persona_service::session::{replay, Engine, SessionStore};

fn engine(with_pool: bool) -> Arc<Engine> {
    let eps = generate_synthetic(6, 2, 5).unwrap();
    let vocab = build_vocab(&eps, 1).unwrap();
    let t = Transmitter::new(vocab.clone(), SequenceModelConfig::tiny(vocab.len(), true), 1).unwrap();
    let r = Receiver::new(vocab.clone(), ReceiverConfig::new(SequenceModelConfig::tiny(vocab.len(), false)), 2).unwrap();
    let pool = if with_pool { persona_pool(&eps) } else { Vec::new() };
    let mut e = Engine::new(t, r, pool);
    e.decode.max_steps = 8;
    Arc::new(e)
}

fn store(log_dir: Option<std::path::PathBuf>) -> Arc<SessionStore> {
    Arc::new(SessionStore::new(engine(true), log_dir, 0).unwrap())
}

async fn call(store: &Arc<SessionStore>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(b) => {
            req = req.header("content-type", "application/json");
            Body::from(b.to_string())
        }
        None => Body::empty(),
    };
    let resp = router(store.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

const PERSONA: [&str; 5] = [
    "i like hiking.",
    "my job is nurse.",
    "i have a dog.",
    "i love eating pizza.",
    "i live in paris.",
];

#[tokio::test]
async fn create_echoes_persona_and_ids_differ() {
    let s = store(None);
    let (st, a) = call(&s, "POST", "/sessions", Some(json!({ "persona": PERSONA }))).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(a["bot_persona"], json!(PERSONA));
    assert_eq!(a["history"], json!([]));
    let (_, b) = call(&s, "POST", "/sessions", None).await;
    assert_ne!(a["id"], b["id"]);
    assert_eq!(b["bot_persona"].as_array().unwrap().len(), 5);
}

#[tokio::test]
async fn no_persona_source_is_an_error() {
    let s = Arc::new(SessionStore::new(engine(false), None, 0).unwrap());
    let (st, body) = call(&s, "POST", "/sessions", None).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("no personas"));
}

#[tokio::test]
async fn exchanges_grow_history_and_perception() {
    let s = store(None);
    let (_, created) = call(&s, "POST", "/sessions", Some(json!({ "persona": PERSONA }))).await;
    let id = created["id"].as_str().unwrap();

    let (st, grid) = call(&s, "GET", &format!("/sessions/{id}/perception"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(grid["grid"], json!([]));

    for msg in ["hi there!", "do you have pets?", "where do you live?"] {
        let (st, ex) = call(&s, "POST", &format!("/sessions/{id}/messages"), Some(json!({ "text": msg }))).await;
        assert_eq!(st, StatusCode::OK);
        let reply = ex["reply"].as_str().unwrap();
        assert!(!reply.trim().is_empty());
        assert!(reply.split_whitespace().count() < 32);
        assert_eq!(ex["rows"].as_array().unwrap().len(), 2);
    }
    let (_, grid) = call(&s, "GET", &format!("/sessions/{id}/perception"), None).await;
    let rows = grid["grid"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    for r in rows {
        assert_eq!(r.as_array().unwrap().len(), PERSONA.len());
    }
    assert_eq!(grid["profiles"], json!(PERSONA));

    let (_, session) = call(&s, "GET", &format!("/sessions/{id}"), None).await;
    let hist = session["history"].as_array().unwrap();
    assert_eq!(hist.len(), 6);
    for (i, t) in hist.iter().enumerate() {
        assert_eq!(t["speaker"], if i % 2 == 0 { "A" } else { "B" });
    }
}

#[tokio::test]
async fn validation_and_not_found() {
    let s = store(None);
    let (_, created) = call(&s, "POST", "/sessions", Some(json!({ "persona": PERSONA }))).await;
    let id = created["id"].as_str().unwrap();
    let (st, _) = call(&s, "POST", &format!("/sessions/{id}/messages"), Some(json!({ "text": "   " }))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, _) = call(&s, "POST", "/sessions/nope/messages", Some(json!({ "text": "hi" }))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&s, "GET", "/sessions/nope/perception", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&s, "GET", "/sessions/nope", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&s, "POST", "/sessions", Some(json!({ "persona": [] }))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn replies_are_deterministic() {
    let s = store(None);
    let mut replies = Vec::new();
    for _ in 0..2 {
        let (_, created) = call(&s, "POST", "/sessions", Some(json!({ "persona": PERSONA }))).await;
        let id = created["id"].as_str().unwrap().to_string();
        let mut r = Vec::new();
        for msg in ["hello!", "i like chess."] {
            let (_, ex) = call(&s, "POST", &format!("/sessions/{id}/messages"), Some(json!({ "text": msg }))).await;
            r.push(ex["reply"].clone());
        }
        replies.push(r);
    }
    assert_eq!(replies[0], replies[1]);
}

#[tokio::test]
async fn human_persona_gets_its_own_scores() {
    let s = store(None);
    let body = json!({ "persona": PERSONA, "human_persona": ["i like chess.", "i have a cat."] });
    let (_, created) = call(&s, "POST", "/sessions", Some(body)).await;
    let id = created["id"].as_str().unwrap();
    let (_, ex) = call(&s, "POST", &format!("/sessions/{id}/messages"), Some(json!({ "text": "i like chess" }))).await;
    for row in ex["rows"].as_array().unwrap() {
        assert_eq!(row["human_relevance"].as_array().unwrap().len(), 2);
        assert!(row["human_score"].is_number());
    }
}

#[tokio::test]
async fn logs_replay_to_the_same_session() {
    let dir = tempfile::tempdir().unwrap();
    let s = store(Some(dir.path().to_path_buf()));
    let (_, created) = call(&s, "POST", "/sessions", Some(json!({ "persona": PERSONA }))).await;
    let id = created["id"].as_str().unwrap().to_string();
    for msg in ["hi!", "what do you do?"] {
        call(&s, "POST", &format!("/sessions/{id}/messages"), Some(json!({ "text": msg }))).await;
    }
    let live = s.get(&id).await.unwrap();
    let path = dir.path().join(format!("{id}.jsonl"));
    assert_eq!(replay(&path).unwrap(), live);

    for line in std::fs::read_to_string(&path).unwrap().lines() {
        let ev: Value = serde_json::from_str(line).unwrap();
        for k in ["ts", "session", "event", "payload"] {
            assert!(ev.get(k).is_some(), "missing {k}");
        }
    }

    let fresh = store(Some(dir.path().to_path_buf()));
    assert_eq!(fresh.restore().await.unwrap(), 1);
    assert_eq!(fresh.get(&id).await.unwrap(), live);
}
