use std::collections::HashMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use pumpsched_core::{Action, AppConfig};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, watch, Mutex};
use tokio::task::JoinHandle;
use uuid::Uuid;

use crate::protocol::{parse_client, ClientMessage, ClockSpec, ErrorCode, ServerMessage, PROTOCOL_VERSION};
use crate::session::{create_session, Session, SessionSummary};

pub type SessionHandle = Arc<Mutex<Session>>;

struct Entry {
    session: SessionHandle,
    /// Clock ticks and other pushed messages for every stream client.
    events: broadcast::Sender<Arc<str>>,
    ticker: Option<JoinHandle<()>>,
}

/// Shared state behind every route.
pub struct ServiceState {
    pub config: AppConfig,
    sessions: RwLock<HashMap<Uuid, Entry>>,
    shutdown: watch::Sender<bool>,
}

impl ServiceState {
    pub fn new(config: AppConfig) -> Arc<Self> {
        Arc::new(Self {
            config,
            sessions: RwLock::new(HashMap::new()),
            shutdown: watch::channel(false).0,
        })
    }

    pub fn session(&self, id: &Uuid) -> Option<SessionHandle> {
        self.sessions.read().expect("session map").get(id).map(|e| e.session.clone())
    }

    fn events(&self, id: &Uuid) -> Option<broadcast::Sender<Arc<str>>> {
        self.sessions.read().expect("session map").get(id).map(|e| e.events.clone())
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session map").len()
    }

    fn flush_dir(&self) -> PathBuf {
        self.config.service.flush_dir.clone()
    }

    /// Remove a session, stop its clock and write its trajectory to disk.
    pub async fn close(&self, id: &Uuid) -> Option<std::io::Result<Option<PathBuf>>> {
        let entry = self.sessions.write().expect("session map").remove(id)?;
        if let Some(t) = entry.ticker {
            t.abort();
        }
        let session = entry.session.lock().await;
        Some(session.flush_to(&self.flush_dir()))
    }

    /// Expire sessions idle for longer than the configured TTL.
    pub async fn reap(&self) -> Vec<Uuid> {
        let ttl = Duration::from_secs(self.config.service.session_ttl_secs);
        let candidates: Vec<(Uuid, SessionHandle)> = self
            .sessions
            .read()
            .expect("session map")
            .iter()
            .map(|(id, e)| (*id, e.session.clone()))
            .collect();
        let mut expired = Vec::new();
        for (id, handle) in candidates {
            // A locked session is busy, hence not idle.
            let Ok(s) = handle.try_lock() else { continue };
            if s.subscribers == 0 && s.last_active.elapsed() >= ttl {
                expired.push(id);
            }
        }
        for id in &expired {
            match self.close(id).await {
                Some(Ok(path)) => log::info!("session {id} expired; trajectory at {path:?}"),
                Some(Err(e)) => log::error!("session {id} expired but flushing failed: {e}"),
                None => {}
            }
        }
        expired
    }

    /// Flush every open session; used on shutdown.
    pub async fn flush_all(&self) -> Vec<PathBuf> {
        let ids: Vec<Uuid> = self.sessions.read().expect("session map").keys().copied().collect();
        let mut paths = Vec::new();
        for id in ids {
            match self.close(&id).await {
                Some(Ok(Some(p))) => paths.push(p),
                Some(Err(e)) => log::error!("flushing session {id} failed: {e}"),
                _ => {}
            }
        }
        paths
    }

    fn insert(self: &Arc<Self>, session: Session) -> Result<Uuid, ServerMessage> {
        let mut map = self.sessions.write().expect("session map");
        if map.len() >= self.config.service.max_sessions {
            return Err(ServerMessage::error(
                None,
                None,
                ErrorCode::TooManySessions,
                format!("session limit of {} reached", self.config.service.max_sessions),
            ));
        }
        let id = session.id;
        let clock = session.clock;
        let (events, _) = broadcast::channel(256);
        let handle = Arc::new(Mutex::new(session));
        let ticker = match clock {
            ClockSpec::Timed {
                minutes_per_second: Some(rate),
            } => Some(tokio::spawn(run_clock(handle.clone(), events.clone(), rate))),
            _ => None,
        };
        map.insert(
            id,
            Entry {
                session: handle,
                events,
                ticker,
            },
        );
        Ok(id)
    }
}

/// Advance a timed session with its latched action until the trace runs out.
async fn run_clock(handle: SessionHandle, events: broadcast::Sender<Arc<str>>, minutes_per_second: f64) {
    let mut interval = tokio::time::interval(Duration::from_secs_f64(1.0 / minutes_per_second));
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    interval.tick().await;
    loop {
        interval.tick().await;
        let messages = {
            let mut s = handle.lock().await;
            let action = s.latched;
            s.step(action, None)
        };
        let stop = matches!(messages.first(), Some(ServerMessage::Error { .. }));
        for m in messages {
            let _ = events.send(Arc::from(m.to_json()));
        }
        if stop {
            break;
        }
    }
}

fn json_error(status: StatusCode, msg: ServerMessage) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], msg.to_json()).into_response()
}

fn unknown(id: &Uuid) -> Response {
    json_error(
        StatusCode::NOT_FOUND,
        ServerMessage::error(Some(*id), None, ErrorCode::UnknownSession, format!("no session {id}")),
    )
}

async fn health(State(state): State<Arc<ServiceState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "protocol": PROTOCOL_VERSION,
        "sessions": state.session_count(),
    }))
}

async fn create(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    let text = String::from_utf8_lossy(&body);
    let (scenario, clock) = match parse_client(&text) {
        Ok(ClientMessage::Create { scenario, clock }) => (scenario, clock),
        Ok(_) => {
            return json_error(
                StatusCode::BAD_REQUEST,
                ServerMessage::error(None, None, ErrorCode::BadMessage, "expected a `create` message"),
            )
        }
        Err(e) => return json_error(StatusCode::BAD_REQUEST, e),
    };
    let session = match create_session(&state.config, &scenario, clock) {
        Ok(s) => s,
        Err(reason) => {
            return json_error(
                StatusCode::BAD_REQUEST,
                ServerMessage::error(None, None, ErrorCode::InvalidScenario, reason),
            )
        }
    };
    let created = session.created_message();
    match state.insert(session) {
        Ok(id) => {
            log::info!("session {id} created");
            (StatusCode::CREATED, [(header::CONTENT_TYPE, "application/json")], created.to_json()).into_response()
        }
        Err(e) => json_error(StatusCode::SERVICE_UNAVAILABLE, e),
    }
}

async fn list(State(state): State<Arc<ServiceState>>) -> Json<Vec<SessionSummary>> {
    let handles: Vec<SessionHandle> = state
        .sessions
        .read()
        .expect("session map")
        .values()
        .map(|e| e.session.clone())
        .collect();
    let mut out = Vec::with_capacity(handles.len());
    for h in handles {
        out.push(h.lock().await.summary());
    }
    out.sort_by_key(|s| s.created);
    Json(out)
}

async fn export(State(state): State<Arc<ServiceState>>, Path(id): Path<Uuid>) -> Response {
    let Some(handle) = state.session(&id) else { return unknown(&id) };
    let rows = {
        let mut s = handle.lock().await;
        s.touch();
        s.rows().to_vec()
    };
    if rows.is_empty() {
        return json_error(
            StatusCode::CONFLICT,
            ServerMessage::error(Some(id), None, ErrorCode::EmptySession, "session has no steps to export"),
        );
    }
    let csv = Session::export_csv(&rows);
    (
        StatusCode::OK,
        [
            (header::CONTENT_TYPE, "text/csv".to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"session-{id}.csv\"")),
        ],
        csv,
    )
        .into_response()
}

async fn delete(State(state): State<Arc<ServiceState>>, Path(id): Path<Uuid>) -> Response {
    match state.close(&id).await {
        None => unknown(&id),
        Some(Ok(path)) => Json(serde_json::json!({ "session_id": id, "flushed": path })).into_response(),
        Some(Err(e)) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

async fn stream(ws: WebSocketUpgrade, State(state): State<Arc<ServiceState>>, Path(id): Path<Uuid>) -> Response {
    let (Some(handle), Some(events)) = (state.session(&id), state.events(&id)) else {
        return unknown(&id);
    };
    let shutdown = state.shutdown.subscribe();
    ws.on_upgrade(move |socket| stream_loop(socket, id, handle, events.subscribe(), shutdown))
}

/// Answer one client message; the replies go back to the sender only.
async fn handle_text(id: Uuid, handle: &SessionHandle, text: &str) -> Vec<ServerMessage> {
    let msg = match parse_client(text) {
        Ok(m) => m,
        Err(ServerMessage::Error { seq, code, message, .. }) => {
            return vec![ServerMessage::error(Some(id), seq, code, message)];
        }
        Err(other) => return vec![other],
    };
    match msg {
        ClientMessage::Act { action, seq } => {
            let Ok(action) = action.parse::<Action>() else {
                return vec![ServerMessage::error(
                    Some(id),
                    seq,
                    ErrorCode::BadAction,
                    format!("unknown action {action:?}; expected NP1, NP2, NP3, NP4 or NOP"),
                )];
            };
            let mut s = handle.lock().await;
            s.touch();
            match s.clock {
                ClockSpec::Manual => s.step(action, seq),
                ClockSpec::Timed { .. } => vec![s.latch(action, seq)],
            }
        }
        ClientMessage::Export { seq } => {
            let rows = {
                let mut s = handle.lock().await;
                s.touch();
                s.rows().to_vec()
            };
            if rows.is_empty() {
                return vec![ServerMessage::error(
                    Some(id),
                    seq,
                    ErrorCode::EmptySession,
                    "session has no steps to export",
                )];
            }
            vec![ServerMessage::Exported {
                session_id: id,
                seq,
                rows: rows.len(),
                csv: Session::export_csv(&rows),
            }]
        }
        ClientMessage::Create { .. } => vec![ServerMessage::error(
            Some(id),
            None,
            ErrorCode::BadMessage,
            "sessions are created with POST /sessions",
        )],
    }
}

async fn stream_loop(
    mut socket: WebSocket,
    id: Uuid,
    handle: SessionHandle,
    mut events: broadcast::Receiver<Arc<str>>,
    mut shutdown: watch::Receiver<bool>,
) {
    {
        let mut s = handle.lock().await;
        s.subscribers += 1;
        s.touch();
    }
    loop {
        tokio::select! {
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Text(text))) => {
                    for reply in handle_text(id, &handle, text.as_str()).await {
                        if socket.send(Message::Text(reply.to_json().into())).await.is_err() {
                            break;
                        }
                    }
                }
                Some(Ok(Message::Binary(_))) => {
                    let err = ServerMessage::error(Some(id), None, ErrorCode::BadMessage, "binary frames are not supported");
                    if socket.send(Message::Text(err.to_json().into())).await.is_err() {
                        break;
                    }
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
            pushed = events.recv() => match pushed {
                Ok(text) => {
                    if socket.send(Message::Text(text.to_string().into())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => log::warn!("stream for {id} dropped {n} clock messages"),
                Err(broadcast::error::RecvError::Closed) => break,
            },
            _ = shutdown.changed() => {
                let _ = socket.send(Message::Close(None)).await;
                break;
            }
        }
    }
    let mut s = handle.lock().await;
    s.subscribers = s.subscribers.saturating_sub(1);
    s.touch();
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", get(list).post(create))
        .route("/sessions/{id}", axum::routing::delete(delete))
        .route("/sessions/{id}/export", get(export))
        .route("/sessions/{id}/stream", get(stream))
        .with_state(state)
}

/// Periodically expire idle sessions.
pub fn spawn_reaper(state: Arc<ServiceState>) -> JoinHandle<()> {
    let ttl = Duration::from_secs(state.config.service.session_ttl_secs);
    let period = (ttl / 4).clamp(Duration::from_millis(50), Duration::from_secs(30));
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(period);
        loop {
            interval.tick().await;
            state.reap().await;
        }
    })
}

/// Serve until `shutdown` resolves, then close open streams and flush every
/// session's trajectory. Returns the flushed files.
pub async fn serve(
    listener: TcpListener,
    state: Arc<ServiceState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<Vec<PathBuf>> {
    let reaper = spawn_reaper(state.clone());
    let stopper = state.shutdown.clone();
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async move {
            shutdown.await;
            let _ = stopper.send(true);
        })
        .await?;
    reaper.abort();
    let flushed = state.flush_all().await;
    log::info!("flushed {} session trajectories", flushed.len());
    Ok(flushed)
}
