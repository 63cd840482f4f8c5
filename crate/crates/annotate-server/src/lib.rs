//! HTTP service for the annotation front end.
//!
//! | Method | Path | |
//! |---|---|---|
//! | GET | `/tasks/next?annotator=&style=&supersense=` | next image to label |
//! | POST | `/labels` | submit a label (JSON [`LabelSubmission`]) |
//! | GET | `/stats/agreement` | raw agreement over doubly-labeled images |
//! | GET | `/stats/metonymic-rate?group=overall\|by_pipeline\|by_supersense` | consensus rates |
//! | GET | `/export` | current labels as JSON lines |
//! | GET | `/images/{id}` | PNG bytes |
//! | GET | `/guidelines` | annotation guidelines, plain text |
//!
//! With bearer tokens configured every route needs `Authorization: Bearer
//! <token>`, and the token decides who the annotator is.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use metonymy_core::annotation::{
    metonymic_rate, raw_agreement, AnnotationError, AnnotationRecord, AnnotationStore, AssociationType, Flag,
    Grouping, ImageInfo, Label, TaskFilter,
};
use metonymy_core::catalog::Supersense;
use metonymy_core::pipeline::Style;
use metonymy_core::store::{FieldError, ImageSource, StoreError};

pub struct AppState {
    store: Mutex<AnnotationStore>,
    images: Box<dyn ImageSource>,
    guidelines: String,
    /// token -> annotator id; `None` leaves the service open.
    tokens: Option<HashMap<String, String>>,
}

impl AppState {
    pub fn new(store: AnnotationStore, images: impl ImageSource + 'static, guidelines: impl Into<String>) -> Self {
        AppState {
            store: Mutex::new(store),
            images: Box::new(images),
            guidelines: guidelines.into(),
            tokens: None,
        }
    }

    pub fn with_tokens(mut self, tokens: HashMap<String, String>) -> Self {
        self.tokens = Some(tokens);
        self
    }

    fn store(&self) -> MutexGuard<'_, AnnotationStore> {
        // A panic mid-handler leaves the store consistent (submit appends
        // before mutating), so a poisoned lock is safe to reuse.
        self.store.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Who is calling. `Ok(None)` on an open service.
    fn caller(&self, headers: &HeaderMap) -> Result<Option<String>, ServerError> {
        let Some(tokens) = &self.tokens else {
            return Ok(None);
        };
        let token = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or(ServerError::Unauthorized)?;
        tokens.get(token.trim()).cloned().map(Some).ok_or(ServerError::Unauthorized)
    }
}

/// Parses `token=annotator` pairs, one per line; `#` starts a comment.
pub fn parse_token_file(text: &str) -> Result<HashMap<String, String>, String> {
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (tok, who) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected token=annotator", n + 1))?;
        let (tok, who) = (tok.trim(), who.trim());
        if tok.is_empty() || who.is_empty() {
            return Err(format!("line {}: empty token or annotator", n + 1));
        }
        if out.insert(tok.to_string(), who.to_string()).is_some() {
            return Err(format!("line {}: duplicate token", n + 1));
        }
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("{0}")]
    BadRequest(String),
    #[error("invalid label")]
    Invalid(Vec<FieldError>),
    #[error("missing or unknown bearer token")]
    Unauthorized,
    #[error("{0}")]
    Forbidden(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Internal(String),
}

impl From<AnnotationError> for ServerError {
    fn from(e: AnnotationError) -> Self {
        match e {
            AnnotationError::UnknownImage(id) => ServerError::NotFound(format!("unknown image {id}")),
            AnnotationError::Invalid(fields) => ServerError::Invalid(fields),
            AnnotationError::Store(e) => ServerError::Internal(e.to_string()),
        }
    }
}

impl From<JsonRejection> for ServerError {
    fn from(e: JsonRejection) -> Self {
        ServerError::BadRequest(e.body_text())
    }
}

impl From<QueryRejection> for ServerError {
    fn from(e: QueryRejection) -> Self {
        ServerError::BadRequest(e.body_text())
    }
}

impl IntoResponse for ServerError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServerError::BadRequest(_) | ServerError::Invalid(_) => StatusCode::BAD_REQUEST,
            ServerError::Unauthorized => StatusCode::UNAUTHORIZED,
            ServerError::Forbidden(_) => StatusCode::FORBIDDEN,
            ServerError::NotFound(_) => StatusCode::NOT_FOUND,
            ServerError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{self}");
        }
        let body = match &self {
            ServerError::Invalid(fields) => json!({"error": self.to_string(), "fields": fields}),
            _ => json!({"error": self.to_string()}),
        };
        (status, Json(body)).into_response()
    }
}

type Shared = Arc<AppState>;

/// `cors_origins` empty allows any origin.
pub fn router(state: Shared, cors_origins: &[String]) -> Router {
    let origins: Vec<HeaderValue> = cors_origins.iter().filter_map(|o| o.parse().ok()).collect();
    let cors = CorsLayer::new()
        .allow_methods(Any)
        .allow_headers([header::AUTHORIZATION, header::CONTENT_TYPE]);
    let cors = if origins.is_empty() {
        cors.allow_origin(Any)
    } else {
        cors.allow_origin(AllowOrigin::list(origins))
    };
    Router::new()
        .route("/tasks/next", get(next_task))
        .route("/labels", post(submit_label))
        .route("/stats/agreement", get(agreement))
        .route("/stats/metonymic-rate", get(rate))
        .route("/export", get(export))
        .route("/images/{id}", get(image))
        .route("/guidelines", get(guidelines))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: Shared, cors_origins: &[String]) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, cors_origins)).await
}

/// Resolves the acting annotator from the token and/or an explicit id.
fn acting_annotator(caller: Option<String>, claimed: Option<String>) -> Result<String, ServerError> {
    match (caller, claimed.filter(|c| !c.trim().is_empty())) {
        (Some(c), Some(a)) if c != a => Err(ServerError::Forbidden(format!("token belongs to {c}, not {a}"))),
        (Some(c), _) => Ok(c),
        (None, Some(a)) => Ok(a),
        (None, None) => Err(ServerError::BadRequest("annotator is required".into())),
    }
}

#[derive(Debug, Deserialize)]
pub struct TaskQuery {
    pub annotator: Option<String>,
    pub style: Option<Style>,
    pub supersense: Option<Supersense>,
}

async fn next_task(
    State(st): State<Shared>,
    headers: HeaderMap,
    q: Result<Query<TaskQuery>, QueryRejection>,
) -> Result<Response, ServerError> {
    let caller = st.caller(&headers)?;
    let Query(q) = q?;
    let who = acting_annotator(caller, q.annotator)?;
    let filter = TaskFilter {
        style: q.style,
        supersense: q.supersense,
    };
    Ok(match st.store().next_task(&who, &filter) {
        Some(task) => Json(json!({"status": "task", "task": task})).into_response(),
        None => Json(json!({"status": "done"})).into_response(),
    })
}

/// Body of `POST /labels`. `annotator` may be left out when a bearer token
/// identifies the caller.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSubmission {
    pub image_id: String,
    #[serde(default)]
    pub annotator: Option<String>,
    pub label: Label,
    #[serde(default)]
    pub flags: BTreeSet<Flag>,
    #[serde(default)]
    pub association_type: Option<AssociationType>,
}

async fn submit_label(
    State(st): State<Shared>,
    headers: HeaderMap,
    body: Result<Json<LabelSubmission>, JsonRejection>,
) -> Result<Response, ServerError> {
    let caller = st.caller(&headers)?;
    let Json(sub) = body?;
    let annotator = acting_annotator(caller, sub.annotator)?;
    let ack = st.store().submit(AnnotationRecord {
        image_id: sub.image_id,
        annotator,
        label: sub.label,
        flags: sub.flags,
        association_type: sub.association_type,
        timestamp: String::new(),
    })?;
    Ok(Json(ack).into_response())
}

async fn agreement(State(st): State<Shared>, headers: HeaderMap) -> Result<Response, ServerError> {
    st.caller(&headers)?;
    let a = raw_agreement(&st.store().records());
    Ok(Json(json!({
        "matching": a.matching,
        "doubly_labeled": a.doubly_labeled,
        "agreement": a.value(),
    }))
    .into_response())
}

#[derive(Debug, Deserialize)]
pub struct RateQuery {
    pub group: Option<Grouping>,
}

async fn rate(
    State(st): State<Shared>,
    headers: HeaderMap,
    q: Result<Query<RateQuery>, QueryRejection>,
) -> Result<Response, ServerError> {
    st.caller(&headers)?;
    let Query(q) = q?;
    let group = q.group.unwrap_or(Grouping::Overall);
    let store = st.store();
    let images: BTreeMap<String, ImageInfo> = store.images().map(|i| (i.image_id.clone(), i.clone())).collect();
    let rates = metonymic_rate(&store.records(), &images, group);
    Ok(Json(json!({"group": group, "rates": rates})).into_response())
}

async fn export(State(st): State<Shared>, headers: HeaderMap) -> Result<Response, ServerError> {
    st.caller(&headers)?;
    let body = st.store().export_jsonl();
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn image(State(st): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> Result<Response, ServerError> {
    st.caller(&headers)?;
    // Only ids the store knows about reach the filesystem.
    if st.store().image(&id).is_none() {
        return Err(ServerError::NotFound(format!("unknown image {id}")));
    }
    match st.images.load(&id) {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response()),
        Err(StoreError::MissingImage(id)) => Err(ServerError::NotFound(format!("image {id} has no file"))),
        Err(e) => Err(ServerError::Internal(e.to_string())),
    }
}

async fn guidelines(State(st): State<Shared>, headers: HeaderMap) -> Result<Response, ServerError> {
    st.caller(&headers)?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], st.guidelines.clone()).into_response())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_file() {
        let t = parse_token_file("# tokens\nabc = ann1\n\nxyz=ann2 # second\n").unwrap();
        assert_eq!(t["abc"], "ann1");
        assert_eq!(t["xyz"], "ann2");
        assert!(parse_token_file("abc").is_err());
        assert!(parse_token_file("a=x\na=y").is_err());
    }

    #[test]
    fn annotator_resolution() {
        assert_eq!(acting_annotator(Some("a".into()), None).unwrap(), "a");
        assert_eq!(acting_annotator(Some("a".into()), Some("a".into())).unwrap(), "a");
        assert!(matches!(
            acting_annotator(Some("a".into()), Some("b".into())),
            Err(ServerError::Forbidden(_))
        ));
        assert!(matches!(acting_annotator(None, Some(" ".into())), Err(ServerError::BadRequest(_))));
    }
}
