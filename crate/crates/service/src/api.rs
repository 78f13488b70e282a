//! HTTP routes.
//!
//! | method | path                        | body                              |
//! |--------|-----------------------------|-----------------------------------|
//! | POST   | `/sessions`                 | `{persona?, human_persona?}`      |
//! | POST   | `/sessions/{id}/messages`   | `{text}`                          |
//! | GET    | `/sessions/{id}/perception` |                                   |
//! | GET    | `/sessions/{id}`            |                                   |

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::session::{Exchange, PerceptionGrid, Session, SessionStore};

#[derive(Debug, Default, Deserialize, Serialize)]
pub struct CreateSession {
    #[serde(default)]
    pub persona: Option<Vec<String>>,
    #[serde(default)]
    pub human_persona: Option<Vec<String>>,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct PostMessage {
    pub text: String,
}

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/perception", get(get_perception))
        .with_state(store)
}

async fn create_session(
    State(store): State<Arc<SessionStore>>,
    body: Option<Json<CreateSession>>,
) -> Result<(StatusCode, Json<Session>), ServiceError> {
    let Json(req) = body.unwrap_or_default();
    let s = store.create(req.persona, req.human_persona).await?;
    Ok((StatusCode::CREATED, Json(s)))
}

async fn get_session(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> Result<Json<Session>, ServiceError> {
    Ok(Json(store.get(&id).await?))
}

async fn post_message(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
    Json(req): Json<PostMessage>,
) -> Result<Json<Exchange>, ServiceError> {
    Ok(Json(store.post_message(&id, req.text).await?))
}

async fn get_perception(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
) -> Result<Json<PerceptionGrid>, ServiceError> {
    Ok(Json(store.get(&id).await?.grid()))
}
