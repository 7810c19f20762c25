//! One WebSocket connection: handshake, then frames bridged to the session
//! actor in both directions.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, Utf8Bytes, WebSocket};
use futures_util::{SinkExt, StreamExt};
use tokio::sync::{mpsc, Notify};

use parley_core::wire::ErrorCode;
use parley_core::{decode_frame, encode_frame, ClientBody, ClientFrame, ServerFrame};

use crate::hub::{error_frame, ConnHandle, Hub, Outbound};

const HELLO_TIMEOUT: Duration = Duration::from_secs(10);

fn text(frame: &ServerFrame) -> Message {
    let bytes = encode_frame(frame);
    Message::Text(Utf8Bytes::from(
        String::from_utf8(bytes).expect("canonical JSON is UTF-8"),
    ))
}

/// Payload of a data message; `None` for control messages.
fn payload(msg: &Message) -> Option<&[u8]> {
    match msg {
        Message::Text(t) => Some(t.as_bytes()),
        Message::Binary(b) => Some(b),
        _ => None,
    }
}

async fn reject(mut socket: WebSocket, frame: ServerFrame) {
    let _ = socket.send(text(&frame)).await;
    let _ = socket.send(Message::Close(None)).await;
}

/// Waits for the first data message and decodes it.
async fn read_hello(socket: &mut WebSocket) -> Result<ClientFrame, ServerFrame> {
    let first = loop {
        match tokio::time::timeout(HELLO_TIMEOUT, socket.recv()).await {
            Err(_) => {
                return Err(error_frame(ErrorCode::ProtocolViolation, "no HELLO received", true))
            }
            Ok(None) | Ok(Some(Err(_))) | Ok(Some(Ok(Message::Close(_)))) => {
                return Err(error_frame(ErrorCode::ProtocolViolation, "closed before HELLO", true))
            }
            Ok(Some(Ok(msg))) => {
                if let Some(p) = payload(&msg) {
                    break p.to_vec();
                }
            }
        }
    };
    let frame = decode_frame::<ClientFrame>(&first)
        .map_err(|e| error_frame((&e).into(), e.to_string(), true))?;
    match frame.body {
        ClientBody::Hello { .. } => Ok(frame),
        _ => Err(error_frame(
            ErrorCode::ProtocolViolation,
            "first frame must be HELLO",
            true,
        )),
    }
}

async fn write_loop(
    mut sink: futures_util::stream::SplitSink<WebSocket, Message>,
    mut rx: mpsc::Receiver<Outbound>,
    kick: Arc<Notify>,
) {
    loop {
        tokio::select! {
            biased;
            _ = kick.notified() => break,
            out = rx.recv() => match out {
                Some(Outbound::Frame(f)) => {
                    if sink.send(text(&f)).await.is_err() {
                        return;
                    }
                }
                Some(Outbound::Close) | None => break,
            },
        }
    }
    let _ = sink.send(Message::Close(None)).await;
    let _ = sink.close().await;
}

pub async fn serve_connection(mut socket: WebSocket, hub: Arc<Hub>) {
    let hello = match read_hello(&mut socket).await {
        Ok(f) => f,
        Err(frame) => return reject(socket, frame).await,
    };
    let ClientBody::Hello {
        session_id,
        token,
        client_ts_ms,
    } = hello.body
    else {
        unreachable!("read_hello only returns HELLO");
    };
    let Some(session) = hub.session(&session_id) else {
        let frame = error_frame(
            ErrorCode::UnknownSession,
            format!("unknown session {session_id}"),
            true,
        );
        return reject(socket, frame).await;
    };
    let conn = hub.next_conn_id();
    let (handle, rx) = ConnHandle::channel(hub.config().queue_capacity);
    let errors = handle.tx.clone();
    let kick = handle.kick.clone();
    let pid = match session.join(conn, token, client_ts_ms, handle).await {
        Ok(Ok(pid)) => pid,
        Ok(Err(e)) => return reject(socket, e.to_frame()).await,
        Err(e) => {
            let frame = error_frame(ErrorCode::Internal, e.to_string(), true);
            return reject(socket, frame).await;
        }
    };
    tracing::debug!(session = %session_id, participant = %pid, conn, "joined");

    let (sink, mut stream) = socket.split();
    let mut writer = tokio::spawn(write_loop(sink, rx, kick));
    let mut last_seq = hello.client_seq;
    let mut said_bye = false;
    let mut writer_done = false;
    loop {
        let msg = tokio::select! {
            msg = stream.next() => msg,
            _ = &mut writer => {
                writer_done = true;
                break;
            }
        };
        let msg = match msg {
            Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
            Some(Ok(m)) => m,
        };
        let Some(bytes) = payload(&msg) else {
            continue;
        };
        let frame = match decode_frame::<ClientFrame>(bytes) {
            Ok(f) => f,
            Err(e) => {
                let _ = errors.try_send(Outbound::Frame(error_frame((&e).into(), e.to_string(), false)));
                continue;
            }
        };
        if frame.client_seq <= last_seq {
            let detail = format!("client_seq {} after {last_seq}", frame.client_seq);
            let _ = errors.try_send(Outbound::Frame(error_frame(ErrorCode::SeqRegression, detail, false)));
            continue;
        }
        last_seq = frame.client_seq;
        let bye = matches!(frame.body, ClientBody::Bye);
        if session.client_frame(conn, pid.clone(), frame.body).await.is_err() {
            break;
        }
        if bye {
            said_bye = true;
            break;
        }
    }
    if !said_bye {
        session.disconnect(conn, pid.clone()).await;
    }
    drop(errors);
    if !writer_done {
        // let the writer flush a pending close or error before the socket drops
        let _ = tokio::time::timeout(Duration::from_secs(5), writer).await;
    }
    tracing::debug!(session = %session_id, participant = %pid, conn, "connection finished");
}
