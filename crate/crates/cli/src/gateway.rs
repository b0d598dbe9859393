//! Websocket gateway: one live labeling session per connection.
//!
//! `POST /sessions` reserves a session and returns `{"id": ...}`;
//! `GET /sessions/{id}/ws` attaches to it. Attaching to an unknown or
//! already attached session gets an immediate close frame. `GET /ws` opens
//! a fresh session in one step.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{info, warn};
use partsep::harness::{check_live_model, ServerFrame, Session, SessionConfig};
use partsep::neural::Model;

/// Close code sent when a client asks for a session that does not exist.
pub const UNKNOWN_SESSION: u16 = 4404;

pub struct Gateway {
    model: Arc<Model<f32>>,
    config: SessionConfig,
    pending: Mutex<HashMap<String, Session>>,
    next_id: AtomicU64,
}

impl Gateway {
    pub fn new(model: Model<f32>, config: SessionConfig) -> partsep::Result<Arc<Self>> {
        check_live_model(&model)?;
        Ok(Arc::new(Self {
            model: Arc::new(model),
            config,
            pending: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }))
    }

    fn open(&self) -> Session {
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        Session::new(id, self.model.clone(), self.config).expect("model checked at startup")
    }

    pub fn router(self: &Arc<Self>) -> Router {
        Router::new()
            .route("/health", get(|| async { "ok" }))
            .route("/sessions", post(create_session))
            .route("/sessions/{id}/ws", get(attach))
            .route("/ws", get(attach_new))
            .with_state(self.clone())
    }
}

async fn create_session(State(gw): State<Arc<Gateway>>) -> Json<serde_json::Value> {
    let session = gw.open();
    let id = session.id.clone();
    gw.pending.lock().expect("session map").insert(id.clone(), session);
    Json(serde_json::json!({ "id": id }))
}

async fn attach(State(gw): State<Arc<Gateway>>, Path(id): Path<String>, ws: WebSocketUpgrade) -> Response {
    let session = gw.pending.lock().expect("session map").remove(&id);
    ws.on_upgrade(move |socket| async move {
        match session {
            Some(s) => run(socket, s).await,
            None => close_unknown(socket, &id).await,
        }
    })
}

async fn attach_new(State(gw): State<Arc<Gateway>>, ws: WebSocketUpgrade) -> impl IntoResponse {
    let session = gw.open();
    ws.on_upgrade(move |socket| run(socket, session))
}

async fn close_unknown(mut socket: WebSocket, id: &str) {
    warn!("connection for unknown session {id:?}");
    let frame = CloseFrame {
        code: UNKNOWN_SESSION,
        reason: "unknown session".into(),
    };
    let _ = socket.send(Message::Close(Some(frame))).await;
}

/// The session's event loop: every frame is answered before the next one
/// is read.
async fn run(mut socket: WebSocket, mut session: Session) {
    info!("session {} attached", session.id);
    while let Some(Ok(msg)) = socket.recv().await {
        let reply = match msg {
            Message::Text(text) => session.handle_text(text.as_str()),
            Message::Binary(_) => Some(ServerFrame::Err {
                msg: "binary frames are not supported".into(),
            }),
            Message::Close(_) => break,
            _ => None,
        };
        if let Some(frame) = reply {
            if socket.send(Message::Text(frame.to_json().into())).await.is_err() {
                break;
            }
        }
    }
    info!("session {} closed", session.id);
}

/// Serves until the process is stopped.
pub async fn serve(gateway: Arc<Gateway>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, gateway.router()).await
}
