//! HTTP API over the session lifecycle.
//!
//! One endpoint per steering point: upload, recognize, context edits,
//! keywords, style, generate, regenerate and segment amendment. Mutations
//! of one session are serialized; a second concurrent mutation gets 409.

use std::collections::HashMap;
use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Request, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post, put};
use axum::{Json, Router};
use imagetalk_core::domain::session_to_document;
use imagetalk_core::metrics::{keystroke_savings, keyword_ratio, semantic_similarity};
use imagetalk_core::steering::{self, apply_edit};
use imagetalk_core::{
    ContextCorpus, DecisiveRiskFlag, Edit, EditRecord, EditTarget, EmbeddingTable, Engine, Error, GenerateMode,
    GenerationParams, ImageAsset, KeywordList, LanguageStyle, Session, SessionStore, StoryMode, StoryVersion,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, OwnedMutexGuard, RwLock};

pub struct AppState {
    pub engine: Engine,
    pub store: SessionStore,
    pub embeddings: Option<Arc<EmbeddingTable>>,
    /// Server-side cap on a generation request.
    pub generation_timeout: Duration,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
}

impl AppState {
    pub fn new(
        engine: Engine,
        store: SessionStore,
        embeddings: Option<Arc<EmbeddingTable>>,
        backend_timeout: Duration,
    ) -> Arc<Self> {
        Arc::new(AppState {
            engine,
            store,
            embeddings,
            generation_timeout: backend_timeout + Duration::from_secs(1),
            sessions: RwLock::new(HashMap::new()),
        })
    }

    async fn handle(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        if let Some(h) = self.sessions.read().await.get(id) {
            return Ok(h.clone());
        }
        let loaded = self.store.load(id)?;
        let mut map = self.sessions.write().await;
        Ok(map
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(loaded)))
            .clone())
    }

    /// Exclusive access for a mutation, or 409 if one is already running.
    async fn lock_for_write(&self, id: &str) -> Result<OwnedMutexGuard<Session>, ApiError> {
        self.handle(id)
            .await?
            .try_lock_owned()
            .map_err(|_| ApiError::conflict(format!("session {id} is being modified by another request")))
    }

    async fn lock_for_read(&self, id: &str) -> Result<OwnedMutexGuard<Session>, ApiError> {
        Ok(self.handle(id).await?.lock_owned().await)
    }

    /// Runs `f` on a scratch copy and commits (memory and disk) only if it
    /// succeeds, so a failed request leaves the session untouched.
    async fn mutate<T, F, Fut>(&self, id: &str, f: F) -> Result<T, ApiError>
    where
        F: FnOnce(Session) -> Fut,
        Fut: Future<Output = Result<(Session, T), ApiError>>,
    {
        let mut guard = self.lock_for_write(id).await?;
        let (updated, out) = f(guard.clone()).await?;
        self.store.save(&updated)?;
        *guard = updated;
        Ok(out)
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>, field: Option<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                error: error.into(),
                field,
            },
        }
    }

    fn bad_request(error: impl Into<String>, field: Option<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, error, field)
    }

    fn conflict(error: impl Into<String>) -> Self {
        ApiError::new(StatusCode::CONFLICT, error, None)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        let (status, field) = match &e {
            Error::SessionNotFound(_) | Error::VersionNotFound(_) | Error::UnknownTarget(_) => {
                (StatusCode::NOT_FOUND, None)
            }
            Error::InvalidValue { field, .. } => (StatusCode::BAD_REQUEST, Some(field.clone())),
            Error::BadIndex { .. } => (StatusCode::BAD_REQUEST, Some("index".to_string())),
            Error::Schema(_) => (StatusCode::BAD_REQUEST, None),
            Error::Precondition(_) | Error::NoVector | Error::UndefinedMetric(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, None)
            }
            Error::VersionConflict { .. } => (StatusCode::CONFLICT, None),
            Error::BackendTimeout(_) => (StatusCode::GATEWAY_TIMEOUT, None),
            Error::MalformedResponse(_) | Error::Transport(_) | Error::Backend(_) | Error::EmptyCompletion => {
                (StatusCode::BAD_GATEWAY, None)
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, None),
        };
        if status.is_server_error() {
            tracing::error!(error = %msg, "request failed");
        }
        ApiError::new(status, msg, field)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// JSON body extractor whose rejections name the offending field. An
/// empty body is read as `{}`.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    S: Send + Sync,
    T: DeserializeOwned,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let bytes = Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::bad_request(e.body_text(), None))?;
        let bytes: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) {
            b"{}"
        } else {
            &bytes
        };
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        serde_path_to_error::deserialize(de).map(ApiJson).map_err(|e| {
            let path = e.path().to_string();
            let field = (path != ".").then_some(path);
            ApiError::bad_request(format!("invalid request body: {}", e.inner()), field)
        })
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    #[serde(default)]
    reference_story: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    ApiJson(body): ApiJson<CreateSession>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let mut session = Session::new();
    session.reference_story = body.reference_story.filter(|r| !r.trim().is_empty());
    state.store.save(&session)?;
    let id = session.id.clone();
    state
        .sessions
        .write()
        .await
        .insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(Created { id })))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = state.lock_for_read(&id).await?;
    let doc = session_to_document(&session)?;
    Ok(([(axum::http::header::CONTENT_TYPE, "application/json")], doc).into_response())
}

async fn get_story(
    State(state): State<Arc<AppState>>,
    Path((id, version)): Path<(String, u64)>,
) -> Result<Json<StoryVersion>, ApiError> {
    let session = state.lock_for_read(&id).await?;
    let story = session.story(version).ok_or(Error::VersionNotFound(version))?;
    Ok(Json(story.clone()))
}

fn extension_of(name: &str) -> Option<String> {
    let (_, ext) = name.rsplit_once('.')?;
    let ext = ext.to_ascii_lowercase();
    (!ext.is_empty() && ext.len() <= 8 && ext.chars().all(|c| c.is_ascii_alphanumeric())).then_some(ext)
}

async fn upload_image(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    mut multipart: Multipart,
) -> Result<(StatusCode, Json<ImageAsset>), ApiError> {
    let field = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.body_text(), None))?
        .ok_or_else(|| ApiError::bad_request("multipart body has no file part", Some("image".into())))?;
    let name = field.file_name().unwrap_or("upload").to_string();
    let ext = extension_of(&name).unwrap_or_else(|| "bin".into());
    let payload = field
        .bytes()
        .await
        .map_err(|e| ApiError::bad_request(e.body_text(), Some("image".into())))?;
    if payload.is_empty() {
        return Err(ApiError::bad_request("image payload is empty", Some("image".into())));
    }
    let asset = state
        .mutate(&id, |mut s| {
            let store = state.store.clone();
            async move {
                let asset = s.add_image(name, &ext, &payload);
                store.put_image(&asset, &payload)?;
                Ok((s, asset))
            }
        })
        .await?;
    Ok((StatusCode::CREATED, Json(asset)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CorpusView {
    pub corpus: ContextCorpus,
    pub flags: Vec<DecisiveRiskFlag>,
}

impl CorpusView {
    fn of(s: &Session) -> Self {
        CorpusView {
            corpus: s.corpus.clone(),
            flags: s.corpus.flags.clone(),
        }
    }
}

async fn recognize(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<CorpusView>, ApiError> {
    let view = state
        .mutate(&id, |mut s| {
            let state = state.clone();
            async move {
                let store = state.store.clone();
                state.engine.recognize(&mut s, |img| store.read_image(img)).await?;
                let view = CorpusView::of(&s);
                Ok((s, view))
            }
        })
        .await?;
    Ok(Json(view))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditOutcome {
    pub corpus: ContextCorpus,
    pub flags: Vec<DecisiveRiskFlag>,
    pub edit: EditRecord,
}

async fn edit_context(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ApiJson(edit): ApiJson<Edit>,
) -> Result<Json<EditOutcome>, ApiError> {
    if !matches!(edit.target, EditTarget::Caption | EditTarget::Object) {
        return Err(ApiError::bad_request(
            "context edits target a caption or an object",
            Some("target".into()),
        ));
    }
    let out = state
        .mutate(&id, |mut s| {
            let state = state.clone();
            async move {
                let record = apply_edit(&mut s, &edit)?.clone();
                state.engine.refresh_flags(&mut s);
                let out = EditOutcome {
                    corpus: s.corpus.clone(),
                    flags: s.corpus.flags.clone(),
                    edit: record,
                };
                Ok((s, out))
            }
        })
        .await?;
    Ok(Json(out))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KeywordsBody {
    pub keywords: KeywordList,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KeywordsOutcome {
    pub keywords: KeywordList,
    pub flags: Vec<DecisiveRiskFlag>,
    pub edits_appended: usize,
}

async fn put_keywords(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ApiJson(body): ApiJson<KeywordsBody>,
) -> Result<Json<KeywordsOutcome>, ApiError> {
    let out = state
        .mutate(&id, |mut s| {
            let state = state.clone();
            async move {
                let n = steering::set_keywords(&mut s, &body.keywords)?;
                state.engine.refresh_flags(&mut s);
                let out = KeywordsOutcome {
                    keywords: s.keywords.clone(),
                    flags: s.corpus.flags.clone(),
                    edits_appended: n,
                };
                Ok((s, out))
            }
        })
        .await?;
    Ok(Json(out))
}

async fn put_style(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ApiJson(style): ApiJson<LanguageStyle>,
) -> Result<Json<LanguageStyle>, ApiError> {
    let out = state
        .mutate(&id, |mut s| async move {
            steering::set_style(&mut s, &style)?;
            let out = s.style.clone();
            Ok((s, out))
        })
        .await?;
    Ok(Json(out))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateBody {
    mode: GenerateMode,
    #[serde(default)]
    params: Option<GenerationParams>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegenerateBody {
    #[serde(default)]
    params: Option<GenerationParams>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AmendBody {
    version: u64,
    index: usize,
    text: String,
}

async fn with_deadline<T>(state: &AppState, fut: impl Future<Output = Result<T, ApiError>>) -> Result<T, ApiError> {
    tokio::time::timeout(state.generation_timeout, fut)
        .await
        .unwrap_or_else(|_| {
            Err(ApiError::new(
                StatusCode::GATEWAY_TIMEOUT,
                format!("generation exceeded {} ms", state.generation_timeout.as_millis()),
                None,
            ))
        })
}

async fn generate(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ApiJson(body): ApiJson<GenerateBody>,
) -> Result<(StatusCode, Json<StoryVersion>), ApiError> {
    let params = body.params.unwrap_or_default();
    let story = state
        .mutate(&id, |mut s| {
            let state = state.clone();
            async move {
                let story = with_deadline(&state, async {
                    Ok(state.engine.generate(&mut s, body.mode, &params).await?.clone())
                })
                .await?;
                Ok((s, story))
            }
        })
        .await?;
    Ok((StatusCode::CREATED, Json(story)))
}

async fn regenerate(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ApiJson(body): ApiJson<RegenerateBody>,
) -> Result<(StatusCode, Json<StoryVersion>), ApiError> {
    let params = body.params.unwrap_or_default();
    let story = state
        .mutate(&id, |mut s| {
            let state = state.clone();
            async move {
                let story = with_deadline(&state, async {
                    Ok(state.engine.regenerate(&mut s, &params).await?.clone())
                })
                .await?;
                Ok((s, story))
            }
        })
        .await?;
    Ok((StatusCode::CREATED, Json(story)))
}

async fn amend(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ApiJson(body): ApiJson<AmendBody>,
) -> Result<(StatusCode, Json<StoryVersion>), ApiError> {
    let story = state
        .mutate(&id, |mut s| async move {
            let story = steering::amend_segment(&mut s, body.version, body.index, &body.text)?.clone();
            Ok((s, story))
        })
        .await?;
    Ok((StatusCode::CREATED, Json(story)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StoryMetrics {
    pub version: u64,
    pub mode: StoryMode,
    pub keystroke_savings: Option<f64>,
    pub semantic_similarity: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session_id: String,
    pub keyword_ratio: Option<f64>,
    pub stories: Vec<StoryMetrics>,
}

async fn metrics(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionMetrics>, ApiError> {
    let s = state.lock_for_read(&id).await?;
    let reference = s.reference_story.as_deref();
    let stories = s
        .stories
        .iter()
        .map(|story| StoryMetrics {
            version: story.version,
            mode: story.mode,
            keystroke_savings: keystroke_savings(&story.text, &s.keywords).ok(),
            semantic_similarity: match (reference, &state.embeddings) {
                (Some(r), Some(table)) => semantic_similarity(&story.text, r, table).ok(),
                _ => None,
            },
        })
        .collect();
    Ok(Json(SessionMetrics {
        session_id: s.id.clone(),
        keyword_ratio: reference.and_then(|r| keyword_ratio(&s.keywords, r).ok()),
        stories,
    }))
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such endpoint", None)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/images", post(upload_image))
        .route("/sessions/{id}/recognize", post(recognize))
        .route("/sessions/{id}/context", patch(edit_context))
        .route("/sessions/{id}/keywords", put(put_keywords))
        .route("/sessions/{id}/style", put(put_style))
        .route("/sessions/{id}/generate", post(generate))
        .route("/sessions/{id}/steer/regenerate", post(regenerate))
        .route("/sessions/{id}/steer/amend", post(amend))
        .route("/sessions/{id}/stories/{version}", get(get_story))
        .route("/sessions/{id}/metrics", get(metrics))
        .fallback(fallback)
        .layer(DefaultBodyLimit::max(32 * 1024 * 1024))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
