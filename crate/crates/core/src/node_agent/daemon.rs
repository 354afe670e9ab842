//! The agent's heartbeat loop.

use std::fs;
use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant};

use log::{error, info, warn};

use super::{AgentDirs, KillReason, NodeAgent};
use crate::error::{Error, Result};
use crate::protocol::{Client, ContainerStatus, Directive, DrainSummary, Message};
use crate::resource::ResourceProfile;
use crate::util::now_ms;

#[derive(Debug, Clone)]
pub struct AgentOptions {
    pub rm: String,
    pub host: String,
    pub capacity: ResourceProfile,
    pub job_dir: PathBuf,
    pub job_id: Option<String>,
    pub log_dir: Option<PathBuf>,
    pub shared_staging: Option<PathBuf>,
    pub heartbeat_ms: u64,
    pub node_timeout_ms: u64,
    pub kill_grace_ms: u64,
    /// How long to keep retrying the first registration.
    pub register_timeout_ms: u64,
}

impl AgentOptions {
    fn dirs(&self) -> AgentDirs {
        AgentDirs {
            job_dir: self.job_dir.clone(),
            shared_staging: self.shared_staging.clone(),
            log_dir: self.log_dir.clone(),
        }
    }
}

fn register(client: &mut Client, opts: &AgentOptions, deadline: Instant) -> Result<u64> {
    let msg = Message::RegisterNode {
        host: opts.host.clone(),
        capacity: opts.capacity,
    };
    loop {
        match client.call(&msg) {
            Ok(Message::RegisterAck { heartbeat_interval_ms }) => return Ok(heartbeat_interval_ms),
            Ok(other) => return Err(Error::Protocol(format!("unexpected reply {other:?}"))),
            Err(e @ (Error::UnknownNode(_) | Error::Remote { .. })) => return Err(e),
            Err(e) if Instant::now() >= deadline => return Err(e),
            Err(_) => thread::sleep(Duration::from_millis(50)),
        }
    }
}

/// Registers with the resource manager and serves directives until told to
/// tear down or until the manager has been unreachable for three node
/// timeouts. Either way every container is killed and its directory removed.
pub fn run_agent(opts: AgentOptions) -> Result<DrainSummary> {
    fs::create_dir_all(&opts.job_dir).map_err(Error::path_io(&opts.job_dir))?;
    let mut agent = NodeAgent::new(opts.host.clone(), opts.dirs(), Duration::from_millis(opts.kill_grace_ms));
    if let Some(job) = &opts.job_id {
        agent = agent.with_job_id(job.clone());
    }
    let timeout = Duration::from_millis(opts.node_timeout_ms.max(opts.heartbeat_ms * 2));
    let mut client = Client::new(opts.rm.clone()).with_timeout(timeout);
    let deadline = Instant::now() + Duration::from_millis(opts.register_timeout_ms);
    let mut interval = Duration::from_millis(register(&mut client, &opts, deadline)?.max(1));
    info!("{} registered with {}", opts.host, opts.rm);

    let orphan_after = Duration::from_millis(opts.node_timeout_ms.saturating_mul(3));
    let mut outbox: Vec<ContainerStatus> = Vec::new();
    let mut last_contact = Instant::now();
    loop {
        outbox.extend(agent.monitor_tick());
        let beat = Message::Heartbeat {
            host: opts.host.clone(),
            timestamp_ms: now_ms(),
            containers: outbox.clone(),
            drained: None,
        };
        match client.call(&beat) {
            Ok(Message::HeartbeatReply { directives }) => {
                last_contact = Instant::now();
                outbox.clear();
                let mut teardown = false;
                for d in directives {
                    match d {
                        Directive::Launch { spec } => outbox.push(agent.launch_container(spec)),
                        Directive::Kill { container_id } => agent.kill_container(&container_id, KillReason::Requested),
                        Directive::Teardown => teardown = true,
                    }
                }
                if teardown {
                    return Ok(drain(&mut agent, &mut client, &opts));
                }
            }
            Ok(other) => warn!("unexpected heartbeat reply {other:?}"),
            Err(Error::ReRegisterRequired(why)) => {
                // The manager has already written these containers off.
                warn!("re-registering: {why}");
                let (_, _) = agent.drain_and_stop();
                agent = NodeAgent::new(opts.host.clone(), opts.dirs(), Duration::from_millis(opts.kill_grace_ms));
                if let Some(job) = &opts.job_id {
                    agent = agent.with_job_id(job.clone());
                }
                outbox.clear();
                let retry_until = Instant::now() + orphan_after;
                interval = Duration::from_millis(register(&mut client, &opts, retry_until)?.max(1));
                last_contact = Instant::now();
            }
            Err(e) => {
                if last_contact.elapsed() >= orphan_after {
                    error!("resource manager unreachable for {:?}: {e}; stopping", last_contact.elapsed());
                    let (summary, _) = agent.drain_and_stop();
                    return Ok(summary);
                }
                warn!("heartbeat failed: {e}");
            }
        }
        thread::sleep(interval);
    }
}

fn drain(agent: &mut NodeAgent, client: &mut Client, opts: &AgentOptions) -> DrainSummary {
    info!("{} draining", opts.host);
    let (summary, statuses) = agent.drain_and_stop();
    let last = Message::Heartbeat {
        host: opts.host.clone(),
        timestamp_ms: now_ms(),
        containers: statuses,
        drained: Some(summary.clone()),
    };
    for _ in 0..3 {
        match client.call(&last) {
            Ok(_) => break,
            Err(e) => {
                warn!("final heartbeat failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
    summary
}
