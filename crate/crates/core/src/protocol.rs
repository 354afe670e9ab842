//! Newline-delimited JSON messages exchanged between the resource manager,
//! node agents, application masters, the history service and the wrapper.
//!
//! Every message is one JSON object on one line with a `"type"` tag. A client
//! sends a request line and reads exactly one reply line on the same
//! connection. Unknown fields are ignored when decoding.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resource::ResourceProfile;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AppId(pub String);

impl fmt::Display for AppId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Application id plus a per-application monotonic index.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContainerId {
    pub app_id: AppId,
    pub index: u64,
}

impl fmt::Display for ContainerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let app = self.app_id.0.strip_prefix("application_").unwrap_or(&self.app_id.0);
        write!(f, "container_{app}_{:06}", self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerState {
    Requested,
    Allocated,
    Launching,
    Running,
    Completed,
    Failed,
    Killed,
}

impl ContainerState {
    pub fn is_terminal(self) -> bool {
        matches!(self, ContainerState::Completed | ContainerState::Failed | ContainerState::Killed)
    }

    /// Position along requested → allocated → launching → running → terminal.
    fn rank(self) -> u8 {
        match self {
            ContainerState::Requested => 0,
            ContainerState::Allocated => 1,
            ContainerState::Launching => 2,
            ContainerState::Running => 3,
            _ => 4,
        }
    }

    /// Transitions only move forward; a terminal state is final. Any live
    /// state may jump straight to a terminal one (kills, launch failures).
    pub fn can_transition_to(self, next: ContainerState) -> bool {
        !self.is_terminal() && (next.rank() == self.rank() + 1 || (next.is_terminal() && self.rank() >= 1))
    }
}

/// Exit code reported for containers on a node declared lost.
pub const EXIT_NODE_LOST: i32 = -100;
/// Exit code for containers released by their application before launch.
pub const EXIT_RELEASED: i32 = -101;
/// Exit code for containers killed on request of the resource manager.
pub const EXIT_KILLED: i32 = -102;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerStatus {
    pub container_id: ContainerId,
    pub state: ContainerState,
    #[serde(default)]
    pub exit_code: Option<i32>,
    #[serde(default)]
    pub diagnostics: String,
}

/// What a node agent needs to start one container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchSpec {
    pub container_id: ContainerId,
    pub resource: ResourceProfile,
    pub command: String,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "directive", rename_all = "snake_case")]
pub enum Directive {
    Launch { spec: LaunchSpec },
    Kill { container_id: ContainerId },
    Teardown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerGrant {
    pub container_id: ContainerId,
    pub node: String,
    pub resource: ResourceProfile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ask {
    pub resource: ResourceProfile,
    pub count: u32,
}

/// A command line to run in an already granted container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLaunch {
    pub container_id: ContainerId,
    pub command: String,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppState {
    Submitted,
    AmRunning,
    Finished,
    Failed,
}

impl AppState {
    pub fn is_terminal(self) -> bool {
        matches!(self, AppState::Finished | AppState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerHistory {
    pub container_id: ContainerId,
    pub node: String,
    pub resource: ResourceProfile,
    pub exit_code: Option<i32>,
}

/// Lifecycle record of one application; persisted by the history service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplicationRecord {
    pub app_id: AppId,
    pub name: String,
    pub am_container: Option<ContainerId>,
    pub state: AppState,
    pub submit_time: u64,
    #[serde(default)]
    pub finish_time: Option<u64>,
    #[serde(default)]
    pub container_history: Vec<ContainerHistory>,
    #[serde(default)]
    pub diagnostics: String,
    #[serde(default)]
    pub counters: BTreeMap<String, u64>,
    /// Phase durations reported by the application master, in ms.
    #[serde(default)]
    pub phase_ms: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Alive,
    Lost,
    /// Drained and stopped during teardown.
    Decommissioned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeReport {
    pub host: String,
    pub capacity: ResourceProfile,
    pub used: ResourceProfile,
    pub status: NodeStatus,
    pub containers: Vec<ContainerId>,
}

/// Result of draining one node agent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrainSummary {
    pub killed: Vec<ContainerId>,
    pub removed: Vec<String>,
    /// Paths that could not be removed, with the reason.
    pub failures: Vec<(String, String)>,
}

impl DrainSummary {
    pub fn clean(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Message {
    RegisterNode {
        host: String,
        capacity: ResourceProfile,
    },
    RegisterAck {
        heartbeat_interval_ms: u64,
    },
    Heartbeat {
        host: String,
        timestamp_ms: u64,
        #[serde(default)]
        containers: Vec<ContainerStatus>,
        /// Present on the final heartbeat of a draining agent.
        #[serde(default)]
        drained: Option<DrainSummary>,
    },
    HeartbeatReply {
        directives: Vec<Directive>,
    },
    SubmitApplication {
        name: String,
        am_command: String,
        #[serde(default)]
        env: BTreeMap<String, String>,
    },
    GetApplication {
        app_id: AppId,
    },
    ApplicationStatus {
        record: ApplicationRecord,
        /// True once the AM container has also reached a terminal state.
        #[serde(default)]
        am_exited: bool,
    },
    AllocateRequest {
        app_id: AppId,
        #[serde(default)]
        asks: Vec<Ask>,
        #[serde(default)]
        launches: Vec<TaskLaunch>,
        #[serde(default)]
        releases: Vec<ContainerId>,
    },
    AllocateResponse {
        allocated: Vec<ContainerGrant>,
        completed: Vec<ContainerStatus>,
        app_state: AppState,
    },
    ContainerStatus {
        status: ContainerStatus,
    },
    FinishApplication {
        app_id: AppId,
        succeeded: bool,
        #[serde(default)]
        diagnostics: String,
        #[serde(default)]
        counters: BTreeMap<String, u64>,
        #[serde(default)]
        phase_ms: BTreeMap<String, u64>,
    },
    ClusterStatus,
    ClusterReport {
        nodes: Vec<NodeReport>,
        draining: bool,
        #[serde(default)]
        drain_reports: BTreeMap<String, DrainSummary>,
    },
    QueryHistory {
        app_id: AppId,
    },
    HistoryRecord {
        record: ApplicationRecord,
    },
    Shutdown,
    Ack,
    Error {
        kind: String,
        message: String,
    },
}

impl Message {
    pub fn error(err: &Error) -> Message {
        Message::Error {
            kind: err.kind().to_string(),
            message: err.to_string(),
        }
    }

    /// Converts an `Error` reply into a typed error where one exists.
    pub fn into_result(self) -> Result<Message> {
        match self {
            Message::Error { kind, message } => Err(match kind.as_str() {
                "ReRegisterRequired" => Error::ReRegisterRequired(message),
                "NotFound" => Error::NotFound(message),
                "NoWorkers" => Error::NoWorkers,
                "UnknownNode" => Error::UnknownNode(message),
                "AlreadyRegistered" => Error::AlreadyRegistered(message),
                _ => Error::Remote { kind, message },
            }),
            other => Ok(other),
        }
    }

    pub fn to_line(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_line(line: &str) -> Result<Message> {
        Ok(serde_json::from_str(line.trim_end())?)
    }
}

/// Reads one message; `Ok(None)` on a clean end of stream.
pub fn read_message<R: BufRead>(reader: &mut R) -> Result<Option<Message>> {
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(None);
        }
        if !line.trim().is_empty() {
            return Message::from_line(&line).map(Some);
        }
    }
}

pub fn write_message<W: Write>(writer: &mut W, msg: &Message) -> Result<()> {
    writer.write_all(msg.to_line()?.as_bytes())?;
    writer.flush()?;
    Ok(())
}

/// A request/reply connection that reconnects once on a broken stream.
pub struct Client {
    addr: String,
    timeout: Duration,
    conn: Option<(BufReader<TcpStream>, TcpStream)>,
}

impl Client {
    pub fn new(addr: impl Into<String>) -> Client {
        Client {
            addr: addr.into(),
            timeout: Duration::from_secs(30),
            conn: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Client {
        self.timeout = timeout;
        self
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn connect(&self) -> Result<(BufReader<TcpStream>, TcpStream)> {
        let addrs: Vec<SocketAddr> = self.addr.to_socket_addrs()?.collect();
        let mut last = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, self.timeout.min(Duration::from_secs(5))) {
                Ok(s) => {
                    s.set_read_timeout(Some(self.timeout))?;
                    s.set_write_timeout(Some(self.timeout))?;
                    let _ = s.set_nodelay(true);
                    return Ok((BufReader::new(s.try_clone()?), s));
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last
            .map(Error::from)
            .unwrap_or_else(|| Error::Protocol(format!("{} resolves to no address", self.addr))))
    }

    fn exchange(&mut self, msg: &Message) -> Result<Message> {
        if self.conn.is_none() {
            self.conn = Some(self.connect()?);
        }
        let (reader, writer) = self.conn.as_mut().expect("connected above");
        write_message(writer, msg)?;
        read_message(reader)?.ok_or_else(|| Error::Protocol("connection closed".into()))
    }

    /// Sends `msg` and returns the reply, with `Error` replies mapped to `Err`.
    pub fn call(&mut self, msg: &Message) -> Result<Message> {
        let reply = match self.exchange(msg) {
            Ok(r) => r,
            Err(Error::Io(_) | Error::Protocol(_)) => {
                self.conn = None;
                let r = self.exchange(msg);
                if r.is_err() {
                    self.conn = None;
                }
                r?
            }
            Err(e) => {
                self.conn = None;
                return Err(e);
            }
        };
        reply.into_result()
    }
}
