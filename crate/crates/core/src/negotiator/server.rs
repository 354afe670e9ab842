//! TCP front ends for the resource manager and the history service.
//!
//! Connection threads only parse and forward; every request that touches
//! scheduler state goes through one owner thread, which also runs the
//! liveness check between requests.

use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, error, warn};

use super::history::HistoryStore;
use super::manager::ResourceManager;
use crate::error::{Error, Result};
use crate::protocol::{read_message, write_message, Message};
use crate::util::now_ms;

struct Request {
    msg: Message,
    reply: Sender<Message>,
}

pub struct ServerHandle<T> {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    owner: JoinHandle<T>,
}

impl<T> ServerHandle<T> {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn is_finished(&self) -> bool {
        self.owner.is_finished()
    }

    /// Waits for the server to stop on its own (after a `Shutdown`).
    pub fn join(self) -> T {
        let out = self.owner.join().expect("server owner thread panicked");
        self.stop.store(true, Ordering::SeqCst);
        out
    }
}

fn accept_loop(listener: TcpListener, stop: Arc<AtomicBool>, tx: Sender<Request>) {
    if let Err(e) = listener.set_nonblocking(true) {
        error!("cannot poll listener: {e}");
        return;
    }
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                debug!("connection from {peer}");
                let tx = tx.clone();
                thread::spawn(move || serve_connection(stream, tx));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(10));
            }
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn serve_connection(stream: TcpStream, tx: Sender<Request>) {
    if stream.set_nonblocking(false).is_err() {
        return;
    }
    let _ = stream.set_nodelay(true);
    let Ok(read_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(read_half);
    let mut writer = stream;
    loop {
        let reply = match read_message(&mut reader) {
            Ok(None) => return,
            Ok(Some(msg)) => {
                let (reply_tx, reply_rx) = mpsc::channel();
                if tx.send(Request { msg, reply: reply_tx }).is_err() {
                    Message::error(&Error::Protocol("server stopping".into()))
                } else {
                    reply_rx
                        .recv()
                        .unwrap_or_else(|_| Message::error(&Error::Protocol("server stopping".into())))
                }
            }
            Err(Error::Json(e)) => Message::error(&Error::Protocol(format!("bad message: {e}"))),
            Err(_) => return,
        };
        if write_message(&mut writer, &reply).is_err() {
            return;
        }
    }
}

/// Serves `rm` on `listener` until a shutdown has drained every node.
/// Terminal application records are appended to `history` as they appear.
pub fn spawn_resource_manager(
    listener: TcpListener,
    rm: ResourceManager,
    history: Option<HistoryStore>,
) -> Result<ServerHandle<ResourceManager>> {
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel::<Request>();
    {
        let stop = stop.clone();
        thread::spawn(move || accept_loop(listener, stop, tx));
    }
    let stop_owner = stop.clone();
    let owner = thread::spawn(move || {
        let mut rm = rm;
        let tick = Duration::from_millis(rm.config().heartbeat_interval_ms.max(10));
        loop {
            match rx.recv_timeout(tick) {
                Ok(req) => {
                    let reply = handle(&mut rm, req.msg, now_ms());
                    let _ = req.reply.send(reply);
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            let now = now_ms();
            rm.check_liveness(now);
            for rec in rm.take_history() {
                if let Some(store) = &history {
                    if let Err(e) = store.record_history(&rec) {
                        error!("cannot persist history for {}: {e}", rec.app_id);
                    }
                }
            }
            if rm.drain_complete(now) {
                break;
            }
        }
        stop_owner.store(true, Ordering::SeqCst);
        rm
    });
    Ok(ServerHandle { addr, stop, owner })
}

fn handle(rm: &mut ResourceManager, msg: Message, now: u64) -> Message {
    let result = match msg {
        Message::RegisterNode { host, capacity } => rm
            .register_node(&host, capacity, now)
            .map(|_| Message::RegisterAck {
                heartbeat_interval_ms: rm.config().heartbeat_interval_ms,
            }),
        Message::Heartbeat {
            host,
            containers,
            drained,
            ..
        } => rm
            .heartbeat(&host, &containers, drained, now)
            .map(|directives| Message::HeartbeatReply { directives }),
        Message::ContainerStatus { status } => rm.container_status(&status, now).map(|_| Message::Ack),
        Message::SubmitApplication { name, am_command, env } => rm
            .submit_application(&name, &am_command, env, now)
            .and_then(|id| app_status(rm, &id)),
        Message::GetApplication { app_id } => app_status(rm, &app_id),
        Message::AllocateRequest {
            app_id,
            asks,
            launches,
            releases,
        } => rm
            .allocate(&app_id, &asks, &launches, &releases, now)
            .map(|(allocated, completed, app_state)| Message::AllocateResponse {
                allocated,
                completed,
                app_state,
            }),
        Message::FinishApplication {
            app_id,
            succeeded,
            diagnostics,
            counters,
            phase_ms,
        } => rm
            .finish_application(&app_id, succeeded, diagnostics, counters, phase_ms, now)
            .map(|_| Message::Ack),
        Message::ClusterStatus => Ok(Message::ClusterReport {
            nodes: rm.cluster_report(),
            draining: rm.is_draining(),
            drain_reports: rm.drain_reports().clone(),
        }),
        Message::QueryHistory { app_id } => rm
            .application(&app_id)
            .filter(|(r, _)| r.state.is_terminal())
            .map(|(record, _)| Message::HistoryRecord { record })
            .ok_or_else(|| Error::NotFound(app_id.to_string())),
        Message::Shutdown => {
            rm.begin_shutdown(now);
            Ok(Message::Ack)
        }
        other => Err(Error::Protocol(format!("unexpected message {other:?}"))),
    };
    result.unwrap_or_else(|e| Message::error(&e))
}

fn app_status(rm: &ResourceManager, app_id: &crate::protocol::AppId) -> Result<Message> {
    rm.application(app_id)
        .map(|(record, am_exited)| Message::ApplicationStatus { record, am_exited })
        .ok_or_else(|| Error::NotFound(app_id.to_string()))
}

/// Serves `QueryHistory` from the history file until a `Shutdown` arrives.
pub fn spawn_history_server(listener: TcpListener, store: HistoryStore) -> Result<ServerHandle<()>> {
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel::<Request>();
    {
        let stop = stop.clone();
        thread::spawn(move || accept_loop(listener, stop, tx));
    }
    let stop_owner = stop.clone();
    let owner = thread::spawn(move || {
        while let Ok(req) = rx.recv() {
            let (reply, done) = match req.msg {
                Message::QueryHistory { app_id } => (
                    store
                        .query_history(&app_id)
                        .map(|record| Message::HistoryRecord { record })
                        .unwrap_or_else(|e| Message::error(&e)),
                    false,
                ),
                Message::Shutdown => (Message::Ack, true),
                other => (Message::error(&Error::Protocol(format!("unexpected message {other:?}"))), false),
            };
            let _ = req.reply.send(reply);
            if done {
                break;
            }
        }
        stop_owner.store(true, Ordering::SeqCst);
    });
    Ok(ServerHandle { addr, stop, owner })
}
