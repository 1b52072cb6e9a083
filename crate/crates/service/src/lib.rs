//! Real-time episode server. A participant drives the human car over a
//! websocket while the planner drives the robot car.
//!
//! Endpoints:
//! * `GET /session?version=N`: websocket, JSON text frames (see [`protocol`]).
//! * `GET /health`: server version, wire version and config hash.
//! * `GET /ticks`: tick-duration summary over all sessions.
//! * everything else: static files from the UI bundle directory, if configured.

pub mod protocol;
pub mod session;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::response::Response;
use axum::routing::get;
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use qlkplan::sim::{ScenarioSpec, Simulator};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;
use tower_http::services::ServeDir;

use protocol::{decode_client, ClientMsg, Decoded, ErrorCode, Phase, ServerMsg, WIRE_VERSION};
use session::Session;

/// Environment tick, equal to the game's dt.
pub const DEFAULT_TICK_MS: u64 = 500;
/// Planner budget inside a tick.
pub const DEFAULT_PLANNER_BUDGET_MS: u64 = 250;

pub struct ServiceConfig {
    /// Game, tables and planner parameters for every session.
    pub sim: Simulator,
    /// Start state, planner choice, episode cap and base seed. The true
    /// human type is ignored: the participant is the human.
    pub scenario: ScenarioSpec,
    pub tick_ms: u64,
    pub static_dir: Option<PathBuf>,
    /// Where finished and aborted episodes are written as JSON-lines traces.
    pub trace_dir: Option<PathBuf>,
    pub max_sessions: usize,
}

impl ServiceConfig {
    pub fn new(sim: Simulator) -> Self {
        Self {
            sim,
            scenario: ScenarioSpec::default(),
            tick_ms: DEFAULT_TICK_MS,
            static_dir: None,
            trace_dir: None,
            max_sessions: 1,
        }
    }
}

struct Shared {
    cfg: Arc<ServiceConfig>,
    active: AtomicUsize,
    next_id: AtomicU64,
    ticks_ms: Mutex<Vec<f64>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn new(cfg: ServiceConfig) -> Self {
        AppState(Arc::new(Shared {
            cfg: Arc::new(cfg),
            active: AtomicUsize::new(0),
            next_id: AtomicU64::new(1),
            ticks_ms: Mutex::new(Vec::new()),
        }))
    }

    /// Every recorded tick duration in milliseconds, in order.
    pub fn tick_durations_ms(&self) -> Vec<f64> {
        self.0.ticks_ms.lock().unwrap().clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub wire_version: u32,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickSummary {
    pub count: usize,
    pub tick_ms: u64,
    pub p50_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub max_ms: Option<f64>,
}

/// Nearest-rank percentile of `xs`.
pub fn percentile(xs: &[f64], q: f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

pub fn router(state: AppState) -> Router {
    let static_dir = state.0.cfg.static_dir.clone();
    let app = Router::new()
        .route("/health", get(health))
        .route("/ticks", get(ticks))
        .route("/session", get(session_ws));
    let app = match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    };
    app.with_state(state)
}

/// Serves on an already bound listener until the process ends.
pub async fn serve(cfg: ServiceConfig, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "interaction service listening");
    axum::serve(listener, router(AppState::new(cfg))).await
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        wire_version: WIRE_VERSION,
        config_hash: state.0.cfg.sim.engine().tables().config_hash.clone(),
    })
}

async fn ticks(State(state): State<AppState>) -> Json<TickSummary> {
    let t = state.tick_durations_ms();
    Json(TickSummary {
        count: t.len(),
        tick_ms: state.0.cfg.tick_ms,
        p50_ms: percentile(&t, 50.0),
        p99_ms: percentile(&t, 99.0),
        max_ms: t.iter().copied().reduce(f64::max),
    })
}

async fn session_ws(ws: WebSocketUpgrade, Query(q): Query<HashMap<String, String>>, State(state): State<AppState>) -> Response {
    let version = q.get("version").and_then(|v| v.parse::<u32>().ok());
    ws.on_upgrade(move |socket| async move {
        if version != Some(WIRE_VERSION) {
            let msg = format!("client wire version {:?} does not match server version {WIRE_VERSION}", q.get("version"));
            refuse(socket, ErrorCode::VersionMismatch, msg).await;
            return;
        }
        let shared = &state.0;
        if shared.active.fetch_add(1, Ordering::SeqCst) >= shared.cfg.max_sessions {
            shared.active.fetch_sub(1, Ordering::SeqCst);
            refuse(socket, ErrorCode::Busy, "another session is active").await;
            return;
        }
        let id = shared.next_id.fetch_add(1, Ordering::SeqCst);
        run_session(socket, state.clone(), id).await;
        state.0.active.fetch_sub(1, Ordering::SeqCst);
    })
}

async fn refuse(mut socket: WebSocket, code: ErrorCode, message: impl Into<String>) {
    let _ = socket.send(Message::Text(ServerMsg::error(code, message).encode().into())).await;
    let _ = socket.send(Message::Close(None)).await;
}

enum Inbound {
    Msg(ClientMsg),
    Closed,
}

async fn run_session(socket: WebSocket, state: AppState, id: u64) {
    let (mut sink, mut stream) = socket.split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<ServerMsg>();
    let (in_tx, mut in_rx) = mpsc::unbounded_channel::<Inbound>();

    let writer = tokio::spawn(async move {
        while let Some(m) = out_rx.recv().await {
            if sink.send(Message::Text(m.encode().into())).await.is_err() {
                break;
            }
        }
        let _ = sink.send(Message::Close(None)).await;
    });

    let err_tx = out_tx.clone();
    let reader = tokio::spawn(async move {
        while let Some(frame) = stream.next().await {
            let text = match frame {
                Ok(Message::Text(t)) => t,
                Ok(Message::Close(_)) | Err(_) => break,
                Ok(Message::Binary(_)) => {
                    let _ = err_tx.send(ServerMsg::error(ErrorCode::Malformed, "binary frames are not supported"));
                    continue;
                }
                Ok(_) => continue,
            };
            match decode_client(text.as_str()) {
                Decoded::Msg(m) => {
                    if in_tx.send(Inbound::Msg(m)).is_err() {
                        break;
                    }
                }
                Decoded::Unknown(ty) => tracing::warn!(session = id, "ignoring unknown message type `{ty}`"),
                Decoded::Malformed(e) => {
                    let _ = err_tx.send(ServerMsg::error(ErrorCode::Malformed, e));
                }
            }
        }
        let _ = in_tx.send(Inbound::Closed);
    });

    let cfg = state.0.cfg.clone();
    let period = Duration::from_millis(cfg.tick_ms);
    let mut session = match Session::new(cfg, id) {
        Ok(s) => s,
        Err(e) => {
            let _ = out_tx.send(ServerMsg::error(ErrorCode::Internal, e.to_string()));
            drop(out_tx);
            let _ = writer.await;
            reader.abort();
            return;
        }
    };
    tracing::info!(session = id, "session opened");
    let _ = out_tx.send(ServerMsg::Config(session.config_msg()));
    let _ = out_tx.send(ServerMsg::Snapshot(session.snapshot()));

    let mut clock = tokio::time::interval_at(tokio::time::Instant::now() + period, period);
    clock.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            _ = clock.tick(), if session.phase() == Phase::Running => {
                let started = Instant::now();
                // Planning is CPU-bound; run it off the async workers.
                let (back, res) = tokio::task::spawn_blocking(move || {
                    let r = session.tick();
                    (session, r)
                })
                .await
                .expect("tick task panicked");
                session = back;
                if let Err(e) = res {
                    let _ = out_tx.send(ServerMsg::error(ErrorCode::Internal, e.to_string()));
                }
                let _ = out_tx.send(ServerMsg::Snapshot(session.snapshot()));
                state.0.ticks_ms.lock().unwrap().push(started.elapsed().as_secs_f64() * 1e3);
            }
            inbound = in_rx.recv() => match inbound {
                Some(Inbound::Msg(ClientMsg::Input { accel })) => session.input(accel),
                Some(Inbound::Msg(ClientMsg::Control(c))) => {
                    let was = session.phase();
                    match session.control(&c) {
                        Ok(()) => {
                            if was != Phase::Running && session.phase() == Phase::Running {
                                clock.reset();
                            }
                            let _ = out_tx.send(ServerMsg::Snapshot(session.snapshot()));
                        }
                        Err(e) => {
                            let _ = out_tx.send(ServerMsg::error(ErrorCode::InvalidControl, e));
                        }
                    }
                }
                Some(Inbound::Closed) | None => {
                    if session.abort_running().is_some() {
                        tracing::warn!(session = id, "client left mid-episode; partial trace kept");
                    }
                    break;
                }
            }
        }
    }
    tracing::info!(session = id, "session closed");
    drop(out_tx);
    reader.abort();
    let _ = writer.await;
}
