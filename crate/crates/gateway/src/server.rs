use std::future::Future;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use tokio::net::TcpListener;
use tokio::sync::broadcast::error::RecvError;

use crate::protocol::{parse_client_frame, ClientCommand, ErrorCode, FrameError, ServerFrame};
use crate::session::Session;

pub fn router(session: Arc<Session>) -> Router {
    Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/health", get(health))
        .with_state(session)
}

/// Serve `session` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    session: Arc<Session>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(session)).with_graceful_shutdown(shutdown).await
}

async fn health(State(session): State<Arc<Session>>) -> impl IntoResponse {
    Json(session.status())
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(session): State<Arc<Session>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| client(socket, session))
}

struct Guard(Arc<Session>);

impl Drop for Guard {
    fn drop(&mut self) {
        self.0.client_disconnected();
    }
}

async fn client(mut socket: WebSocket, session: Arc<Session>) {
    session.client_connected();
    let _guard = Guard(session.clone());
    let mut frames = session.subscribe();
    let mut decimation = session.default_decimation();
    // frames older than the snapshot are already reflected in it
    let mut floor = match session.snapshot(decimation).await {
        Ok(s) => {
            let tick = s.tick;
            if send(&mut socket, &ServerFrame::Snapshot(Box::new(s))).await.is_err() {
                return;
            }
            tick
        }
        Err(_) => return,
    };
    loop {
        tokio::select! {
            msg = socket.recv() => {
                let text = match msg {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Binary(_))) => {
                        let e = FrameError { id: None, code: ErrorCode::Malformed, message: "binary frames are not accepted".into() };
                        if send(&mut socket, &ServerFrame::error(e)).await.is_err() {
                            return;
                        }
                        continue;
                    }
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                    Some(Ok(_)) => continue,
                };
                let reply = match parse_client_frame(&text) {
                    Err(e) => ServerFrame::error(e),
                    Ok(f) => match f.command {
                        ClientCommand::World(e) => session.world(f.id, e).await,
                        ClientCommand::Pause => session.set_paused(f.id, true).await,
                        ClientCommand::Resume => session.set_paused(f.id, false).await,
                        ClientCommand::SetPace(p) => session.set_pace(f.id, p).await,
                        ClientCommand::Subscribe { decimation: d } => {
                            decimation = d.unwrap_or(decimation);
                            match session.snapshot(decimation).await {
                                Ok(s) => {
                                    floor = floor.max(s.tick);
                                    ServerFrame::Snapshot(Box::new(s))
                                }
                                Err(_) => return,
                            }
                        }
                    },
                };
                if send(&mut socket, &reply).await.is_err() {
                    return;
                }
            }
            out = frames.recv() => {
                match out {
                    Ok(o) => {
                        if o.tick < floor || (o.decimated && o.tick % decimation != 0) {
                            continue;
                        }
                        if socket.send(Message::Text(o.text.to_string())).await.is_err() {
                            return;
                        }
                    }
                    Err(RecvError::Lagged(n)) => tracing::warn!("client lagged, {n} frames skipped"),
                    Err(RecvError::Closed) => return,
                }
            }
        }
    }
}

async fn send(socket: &mut WebSocket, frame: &ServerFrame) -> Result<(), axum::Error> {
    socket.send(Message::Text(frame.to_text())).await
}
