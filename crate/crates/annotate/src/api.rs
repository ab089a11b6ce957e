//! HTTP routes. Writes go through one mutex-guarded writer that appends to
//! the ledger and then publishes a fresh immutable snapshot; reads only clone
//! the current snapshot pointer.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, put};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::Deserialize;
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

use crate::ledger::{replay, Ledger, LedgerEvent};
use crate::sample::extractive_ratio;
use crate::state::{AnnotationState, SampleStatus};
use crate::AnnotateError;
use vulnforge_core::model::{GradeRecord, StudyRecord};
use vulnforge_core::DatasetManifest;

/// Environment variable holding the bearer token.
pub const TOKEN_ENV: &str = "VULNFORGE_ANNOTATE_TOKEN";

struct Writer {
    ledger: Ledger,
    state: AnnotationState,
}

struct Shared {
    snapshot: RwLock<Arc<AnnotationState>>,
    writer: Mutex<Writer>,
    token: Option<String>,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    /// Replays the ledger over the manifest and opens it for appending.
    pub fn open(
        manifest: DatasetManifest,
        ledger_path: impl Into<PathBuf>,
        token: Option<String>,
    ) -> Result<Self, AnnotateError> {
        let path = ledger_path.into();
        let events = replay(&path)?;
        let state = AnnotationState::replay(manifest, &events)?;
        let ledger = Ledger::open(&path)?;
        Ok(AppState(Arc::new(Shared {
            snapshot: RwLock::new(Arc::new(state.clone())),
            writer: Mutex::new(Writer { ledger, state }),
            token,
        })))
    }

    pub fn snapshot(&self) -> Arc<AnnotationState> {
        self.0.snapshot.read().expect("snapshot lock poisoned").clone()
    }

    async fn write(&self, event: LedgerEvent) -> Result<Arc<AnnotationState>, AnnotateError> {
        let mut w = self.0.writer.lock().await;
        w.state.check(&event)?;
        w.ledger.append(&event)?;
        w.state.apply(event)?;
        let snap = Arc::new(w.state.clone());
        *self.0.snapshot.write().expect("snapshot lock poisoned") = snap.clone();
        Ok(snap)
    }
}

impl IntoResponse for AnnotateError {
    fn into_response(self) -> Response {
        let status = match &self {
            AnnotateError::NotFound(_) => StatusCode::NOT_FOUND,
            AnnotateError::Validation(_) | AnnotateError::SampleSize { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            AnnotateError::Conflict(_) => StatusCode::CONFLICT,
            AnnotateError::Unauthorized => StatusCode::UNAUTHORIZED,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

async fn require_token(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.0.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return AnnotateError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<SampleStatus>,
    limit: Option<usize>,
}

async fn list_samples(State(app): State<AppState>, Query(q): Query<ListQuery>) -> Response {
    let snap = app.snapshot();
    Json(snap.list(q.status.unwrap_or(SampleStatus::All), q.limit)).into_response()
}

async fn get_sample(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, AnnotateError> {
    Ok(Json(app.snapshot().view(&id)?).into_response())
}

#[derive(Debug, Deserialize)]
struct LabelBody {
    summary: String,
    annotator_id: String,
}

async fn put_label(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<LabelBody>,
) -> Result<Response, AnnotateError> {
    let snap = app.snapshot();
    let view = snap.view(&id)?;
    let ratio = extractive_ratio(&body.summary, &view.instance.augmented_text);
    let event = LedgerEvent::Label {
        id: id.clone(),
        annotator_id: body.annotator_id,
        summary: body.summary.trim().to_string(),
        extractive_ratio: ratio,
        at: Utc::now(),
    };
    let snap = app.write(event).await?;
    Ok(Json(snap.view(&id)?).into_response())
}

#[derive(Debug, Deserialize)]
struct GradesBody {
    fluency: u8,
    completeness: u8,
    correctness: u8,
    understanding: u8,
    grader_id: String,
    graded_at: Option<DateTime<Utc>>,
}

async fn put_grades(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(b): Json<GradesBody>,
) -> Result<Response, AnnotateError> {
    let record = GradeRecord {
        fluency: b.fluency,
        completeness: b.completeness,
        correctness: b.correctness,
        understanding: b.understanding,
        grader_id: b.grader_id,
        graded_at: b.graded_at.unwrap_or_else(Utc::now),
    };
    let snap = app.write(LedgerEvent::Grades { id: id.clone(), record }).await?;
    Ok(Json(snap.view(&id)?).into_response())
}

async fn put_study(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(record): Json<StudyRecord>,
) -> Result<Response, AnnotateError> {
    let snap = app.write(LedgerEvent::Study { id: id.clone(), record }).await?;
    Ok(Json(snap.view(&id)?).into_response())
}

async fn aggregates(State(app): State<AppState>) -> Response {
    Json(app.snapshot().aggregates()).into_response()
}

/// The JSON API under `/api`, guarded by the bearer token when one is set,
/// plus the UI bundle from `static_dir` for every other path.
pub fn router(app: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/samples", get(list_samples))
        .route("/samples/{id}", get(get_sample))
        .route("/samples/{id}/label", put(put_label))
        .route("/samples/{id}/grades", put(put_grades))
        .route("/samples/{id}/study", put(put_study))
        .route("/aggregates", get(aggregates))
        .route_layer(middleware::from_fn_with_state(app.clone(), require_token))
        .with_state(app);
    let router = Router::new().nest("/api", api);
    match static_dir {
        Some(dir) => router.fallback_service(ServeDir::new(dir)),
        None => router,
    }
}

/// Binds and serves until the process is stopped.
pub async fn serve(addr: std::net::SocketAddr, router: Router) -> Result<(), AnnotateError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router).await?;
    Ok(())
}
