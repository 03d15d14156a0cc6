//! WebSocket front end: one operator, JSON text messages in and out, PGM
//! frames as binary messages.
//!
//! A single thread owns the session. Each loop iteration drains the socket
//! (the I/O boundary), queues validated commands, then runs the 100 Hz tick
//! and fans the results out.

use std::io::ErrorKind;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use tungstenite::{Message, WebSocket};

use seldinger_core::mechanism::DT;

use crate::log::SessionLog;
use crate::protocol::{ClientMessage, ServerMessage};
use crate::session::Session;

/// Ticks between broadcast frames (20 Hz).
pub const FRAME_EVERY: u64 = 5;
/// Largest backlog of ticks run back to back after a stall.
const MAX_CATCH_UP: u32 = 10;

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub frames: bool,
    /// Pace ticks to wall-clock time; when false ticks run as fast as possible.
    pub realtime: bool,
    /// Stop after this many ticks.
    pub max_ticks: Option<u64>,
    pub log_path: Option<PathBuf>,
    pub stop: Arc<AtomicBool>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions { frames: true, realtime: true, max_ticks: None, log_path: None, stop: Arc::new(AtomicBool::new(false)) }
    }
}

type Socket = WebSocket<TcpStream>;

fn send(ws: &mut Socket, msg: Message) -> bool {
    match ws.send(msg) {
        Ok(()) => true,
        Err(tungstenite::Error::Io(e)) if e.kind() == ErrorKind::WouldBlock => true,
        Err(_) => false,
    }
}

fn send_json(ws: &mut Socket, msg: &ServerMessage) -> bool {
    send(ws, Message::text(msg.to_json()))
}

fn handshake(stream: TcpStream) -> Option<Socket> {
    stream.set_nonblocking(false).ok()?;
    stream.set_nodelay(true).ok()?;
    let ws = tungstenite::accept(stream).ok()?;
    Some(ws)
}

/// Runs the session until `opts.stop` is set or `max_ticks` is reached and
/// returns its log (also written to `opts.log_path`).
pub fn serve(listener: TcpListener, mut session: Session, opts: &ServeOptions) -> std::io::Result<SessionLog> {
    listener.set_nonblocking(true)?;
    let mut operator: Option<Socket> = None;
    let mut next = Instant::now();
    let period = Duration::from_secs_f64(DT);
    while !opts.stop.load(Ordering::Relaxed) && opts.max_ticks.is_none_or(|m| session.tick_count() < m) {
        loop {
            match listener.accept() {
                Ok((stream, addr)) => {
                    let Some(mut ws) = handshake(stream) else { continue };
                    if operator.is_some() {
                        ::log::info!("refusing second operator from {addr}");
                        send_json(&mut ws, &ServerMessage::rejection("another operator is connected", None));
                        let _ = ws.close(None);
                        let _ = ws.flush();
                    } else {
                        ::log::info!("operator connected from {addr}");
                        ws.get_mut().set_nonblocking(true)?;
                        operator = Some(ws);
                    }
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(e) => return Err(e),
            }
        }

        if let Some(ws) = operator.as_mut() {
            let mut alive = true;
            loop {
                match ws.read() {
                    Ok(Message::Text(t)) => match serde_json::from_str::<ClientMessage>(t.as_str()) {
                        Ok(msg) => match session.precheck(&msg) {
                            Ok(()) => session.submit(msg),
                            Err(reason) => {
                                session.note(format!("refused before queueing: {} ({reason})", msg.name()));
                                alive &= send_json(ws, &ServerMessage::rejection(reason, Some(msg.name())));
                            }
                        },
                        Err(e) => alive &= send_json(ws, &ServerMessage::rejection(format!("malformed message: {e}"), None)),
                    },
                    Ok(Message::Binary(_)) => {
                        alive &= send_json(ws, &ServerMessage::rejection("binary messages are not accepted", None))
                    }
                    Ok(Message::Close(_)) => {
                        alive = false;
                        break;
                    }
                    Ok(_) => {}
                    Err(tungstenite::Error::Io(e)) if e.kind() == ErrorKind::WouldBlock => break,
                    Err(_) => {
                        alive = false;
                        break;
                    }
                }
            }
            if !alive {
                ::log::info!("operator disconnected");
                operator = None;
            }
        }

        if opts.realtime {
            let now = Instant::now();
            if now < next {
                std::thread::sleep((next - now).min(Duration::from_millis(2)));
                continue;
            }
            if now > next + period * MAX_CATCH_UP {
                next = now;
            }
            next += period;
        }

        let out = session.tick();
        if let Some(ws) = operator.as_mut() {
            let mut alive = true;
            for m in &out {
                alive &= send_json(ws, m);
            }
            if opts.frames && session.tick_count() % FRAME_EVERY == 0 {
                alive &= send(ws, Message::binary(session.render_frame().to_pgm()));
            }
            if !alive {
                operator = None;
            }
        }
    }
    if let Some(mut ws) = operator {
        let _ = ws.close(None);
        let _ = ws.flush();
    }
    let log = session.into_log();
    if let Some(path) = &opts.log_path {
        std::fs::write(path, log.to_text())?;
    }
    Ok(log)
}
