//! HTTP + JSON interface.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use anytime_core::data::{render_stimulus, NoiseSpec};

use crate::config::ServiceConfig;
use crate::error::{Result, ServiceError};
use crate::export::{aggregate, aggregate_csv, export_csv};
use crate::plan::{key_map, BlockPlan, KeyBinding};
use crate::pool::ImagePool;
use crate::session::{parse_trial_id, Feedback, ResponseInput, Session, Validity};
use crate::store::{resume_all, Event, SessionLog};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::InvalidPlan(_) | ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::UnknownKey { .. } | ServiceError::InvalidResponse(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!("{self}");
        }
        let body = match &self {
            ServiceError::UnknownKey { key_map, .. } => serde_json::json!({
                "error": self.to_string(),
                "key_map": key_map,
            }),
            _ => serde_json::json!({ "error": self.to_string() }),
        };
        (status, Json(body)).into_response()
    }
}

struct Entry {
    session: Session,
    log: Option<SessionLog>,
}

struct Inner {
    sessions: RwLock<HashMap<String, Arc<Mutex<Entry>>>>,
    pool: ImagePool,
    defaults: BlockPlan,
    stimulus_size: usize,
    log_dir: Option<PathBuf>,
}

/// Shared service state. Each session sits behind its own mutex, so
/// responses to one session are serialized while sessions run in parallel.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl AppState {
    /// With `log_dir`, sessions already logged there are resumed and new
    /// ones are persisted; without it everything stays in memory.
    pub fn new(pool: ImagePool, defaults: BlockPlan, stimulus_size: usize, log_dir: Option<PathBuf>) -> Result<Self> {
        defaults.validate()?;
        let mut sessions = HashMap::new();
        if let Some(dir) = &log_dir {
            for (session, log) in resume_all(dir)? {
                let entry = Entry {
                    session,
                    log: Some(log),
                };
                sessions.insert(entry.session.id.clone(), Arc::new(Mutex::new(entry)));
            }
        }
        Ok(AppState {
            inner: Arc::new(Inner {
                sessions: RwLock::new(sessions),
                pool,
                defaults,
                stimulus_size,
                log_dir,
            }),
        })
    }

    fn entry(&self, id: &str) -> Result<Arc<Mutex<Entry>>> {
        self.inner
            .sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    pub fn create_session(&self, observer: &str, plan: Option<BlockPlan>, seed: u64) -> Result<Session> {
        if observer.trim().is_empty() {
            return Err(ServiceError::BadRequest("observer id must not be empty".into()));
        }
        let plan = plan.unwrap_or_else(|| self.inner.defaults.clone());
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = Session::create(&id, observer, &plan, seed, &self.inner.pool)?;
        let log = match &self.inner.log_dir {
            Some(dir) => Some(SessionLog::create(dir, &session)?),
            None => None,
        };
        tracing::info!(session = %id, observer, trials = session.trials.len(), "session created");
        let entry = Entry {
            session: session.clone(),
            log,
        };
        self.inner
            .sessions
            .write()
            .expect("session map lock")
            .insert(id, Arc::new(Mutex::new(entry)));
        Ok(session)
    }

    /// Snapshot of one session.
    pub fn session(&self, id: &str) -> Result<Session> {
        let entry = self.entry(id)?;
        let guard = entry.lock().expect("session lock");
        Ok(guard.session.clone())
    }

    pub fn sessions(&self) -> Vec<Session> {
        let entries: Vec<_> = self
            .inner
            .sessions
            .read()
            .expect("session map lock")
            .values()
            .cloned()
            .collect();
        let mut out: Vec<Session> = entries
            .iter()
            .map(|e| e.lock().expect("session lock").session.clone())
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    pub fn respond(&self, trial_id: &str, input: &ResponseInput) -> Result<ResponseBody> {
        let (session_id, index) =
            parse_trial_id(trial_id).ok_or_else(|| ServiceError::NotFound(format!("trial {trial_id}")))?;
        let entry = self.entry(session_id)?;
        let mut guard = entry.lock().expect("session lock");
        let received = now_ms();
        // apply to a copy so a failed log write leaves state and log in step
        let mut next = guard.session.clone();
        let outcome = next.record_response(index, input, received)?;
        if let Some(log) = guard.log.as_mut() {
            log.append(&Event::Response {
                trial: index,
                input: input.clone(),
                received_at_ms: received,
            })?;
        }
        guard.session = next;
        Ok(ResponseBody {
            trial_id: trial_id.to_string(),
            feedback: outcome.feedback,
            correct: outcome.correct,
            validity: outcome.validity,
            next_url: format!("/api/sessions/{session_id}/next"),
        })
    }

    pub fn next_trial(&self, session_id: &str) -> Result<NextTrial> {
        let session = self.session(session_id)?;
        let Some(t) = session.pending() else {
            return Ok(NextTrial::Complete {
                session_id: session.id.clone(),
                total_trials: session.trials.len(),
            });
        };
        Ok(NextTrial::Active(TrialDescriptor {
            trial_id: t.trial_id.clone(),
            index: t.index,
            block: t.block,
            total_trials: session.trials.len(),
            stimulus_url: format!("/api/stimuli/{}.png", t.trial_id),
            response_url: format!("/api/trials/{}/response", t.trial_id),
            display_ms: t.display_ms,
            beep_at_ms: t.display_ms,
            beep_duration_ms: session.plan.beep_ms,
            tolerance_ms: session.plan.tolerance_ms,
            noise_sd: t.noise_sd,
            stimulus_size: self.inner.stimulus_size,
            key_map: key_map(),
        }))
    }

    /// PNG bytes of a trial's stimulus; identical on every fetch.
    pub fn stimulus(&self, trial_id: &str) -> Result<Vec<u8>> {
        let not_found = || ServiceError::NotFound(format!("stimulus {trial_id}"));
        let (session_id, index) = parse_trial_id(trial_id).ok_or_else(not_found)?;
        let session = self.session(session_id)?;
        let t = session.trials.get(index).ok_or_else(not_found)?;
        let image = self
            .inner
            .pool
            .by_id(t.image_id)
            .ok_or_else(|| ServiceError::NotFound(format!("image {} is not in the stimulus pool", t.image_id)))?;
        let spec = NoiseSpec {
            sd: t.noise_sd,
            seed: t.stimulus_seed,
        };
        Ok(render_stimulus(image, &spec, self.inner.stimulus_size)?)
    }
}

#[derive(Debug, Deserialize)]
pub struct CreateRequest {
    pub observer: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub plan: Option<BlockPlan>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateResponse {
    pub session_id: String,
    pub observer: String,
    pub seed: u64,
    pub total_trials: usize,
    pub plan: BlockPlan,
    pub next_url: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialDescriptor {
    pub trial_id: String,
    pub index: usize,
    pub block: usize,
    pub total_trials: usize,
    pub stimulus_url: String,
    pub response_url: String,
    pub display_ms: u32,
    pub beep_at_ms: u32,
    pub beep_duration_ms: u32,
    pub tolerance_ms: u32,
    pub noise_sd: f32,
    pub stimulus_size: usize,
    pub key_map: Vec<KeyBinding>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextTrial {
    Active(TrialDescriptor),
    Complete { session_id: String, total_trials: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseBody {
    pub trial_id: String,
    pub feedback: Feedback,
    pub correct: bool,
    pub validity: Validity,
    pub next_url: String,
}

async fn create_session(State(state): State<AppState>, Json(req): Json<CreateRequest>) -> Result<Response> {
    let seed = req.seed.unwrap_or_else(rand::random);
    let s = state.create_session(&req.observer, req.plan, seed)?;
    let body = CreateResponse {
        next_url: format!("/api/sessions/{}/next", s.id),
        session_id: s.id,
        observer: s.observer,
        seed,
        total_trials: s.trials.len(),
        plan: s.plan,
    };
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn next_trial(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<NextTrial>> {
    Ok(Json(state.next_trial(&id)?))
}

async fn stimulus(State(state): State<AppState>, UrlPath(file): UrlPath<String>) -> Result<Response> {
    let trial = file
        .strip_suffix(".png")
        .ok_or_else(|| ServiceError::NotFound(format!("stimulus {file}")))?;
    let png = state.stimulus(trial)?;
    Ok((
        [(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")],
        png,
    )
        .into_response())
}

async fn respond(
    State(state): State<AppState>,
    UrlPath(trial): UrlPath<String>,
    Json(input): Json<ResponseInput>,
) -> Result<Json<ResponseBody>> {
    Ok(Json(state.respond(&trial, &input)?))
}

fn csv_response(body: String, filename: &str) -> Response {
    (
        [
            (header::CONTENT_TYPE, "text/csv; charset=utf-8".to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{filename}\"")),
        ],
        body,
    )
        .into_response()
}

async fn export(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response> {
    let session = state.session(&id)?;
    Ok(csv_response(export_csv(&session)?, &format!("{id}.csv")))
}

async fn aggregate_all(State(state): State<AppState>) -> Result<Response> {
    let sessions = state.sessions();
    Ok(csv_response(aggregate_csv(&aggregate(&sessions))?, "aggregate.csv"))
}

async fn keys() -> Json<Vec<KeyBinding>> {
    Json(key_map())
}

/// API routes, plus the UI bundle at `/` when `ui_dir` is given.
pub fn router(state: AppState, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}/next", get(next_trial))
        .route("/api/sessions/{id}/export.csv", get(export))
        .route("/api/stimuli/{file}", get(stimulus))
        .route("/api/trials/{id}/response", post(respond))
        .route("/api/aggregate.csv", get(aggregate_all))
        .route("/api/keymap", get(keys))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

async fn shutdown_signal() {
    let interrupt = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        () = interrupt => {}
        () = terminate => {}
    }
    tracing::info!("shutting down");
}

/// Runs until ctrl-c or SIGTERM.
pub async fn serve(config: &ServiceConfig, pool: ImagePool) -> Result<()> {
    let state = AppState::new(
        pool,
        config.plan.clone(),
        config.stimulus_size,
        Some(config.data_dir.join("sessions")),
    )?;
    let addr: SocketAddr = format!("{}:{}", config.bind, config.port)
        .parse()
        .map_err(|e| ServiceError::Config(format!("bad bind address {}:{}: {e}", config.bind, config.port)))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ServiceError::Config(format!("cannot bind {addr}: {e}")))?;
    tracing::info!("experiment service listening on http://{addr}");
    axum::serve(listener, router(state, config.ui_dir.as_deref()))
        .with_graceful_shutdown(shutdown_signal())
        .await
        .map_err(|e| ServiceError::Config(format!("server error: {e}")))
}
