//! Resource manager state machine.
//!
//! Everything here is synchronous and time is passed in by the caller, so the
//! same sequence of calls always produces the same result. The TCP server
//! wraps one instance behind a single owner thread.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use log::{debug, info, warn};

use super::scheduler::{self, NodeSlot, PendingAsk};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::protocol::{
    AppId, AppState, ApplicationRecord, Ask, ContainerGrant, ContainerHistory, ContainerId, ContainerState,
    ContainerStatus, Directive, DrainSummary, LaunchSpec, NodeReport, NodeStatus, TaskLaunch, EXIT_KILLED,
    EXIT_NODE_LOST, EXIT_RELEASED,
};
use crate::resource::{normalize_request, ResourceProfile};

/// A granted lease on a node running (or about to run) one command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Container {
    pub id: ContainerId,
    pub node: String,
    pub resource: ResourceProfile,
    pub command: String,
    pub env: BTreeMap<String, String>,
    pub state: ContainerState,
    pub exit_code: Option<i32>,
    pub diagnostics: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeState {
    pub host: String,
    pub capacity: ResourceProfile,
    pub used: ResourceProfile,
    pub live_containers: BTreeSet<ContainerId>,
    pub last_heartbeat: u64,
    pub status: NodeStatus,
}

impl NodeState {
    fn report(&self) -> NodeReport {
        NodeReport {
            host: self.host.clone(),
            capacity: self.capacity,
            used: self.used,
            status: self.status,
            containers: self.live_containers.iter().cloned().collect(),
        }
    }
}

#[derive(Debug)]
struct AppEntry {
    record: ApplicationRecord,
    am_command: String,
    am_env: BTreeMap<String, String>,
    am_ask_seq: u64,
    am_exited: bool,
    next_index: u64,
    live: BTreeSet<ContainerId>,
    new_grants: Vec<ContainerGrant>,
    new_completions: Vec<ContainerStatus>,
    allocated: (u64, u64),
    released: (u64, u64),
}

/// Allocation event, for replay and auditing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub container_id: ContainerId,
    pub host: String,
    pub resource: ResourceProfile,
    pub ask_seq: u64,
}

#[derive(Debug)]
pub struct ResourceManager {
    cfg: Config,
    allowed_hosts: Option<BTreeSet<String>>,
    nodes: Vec<NodeState>,
    queue: VecDeque<PendingAsk>,
    containers: BTreeMap<ContainerId, Container>,
    apps: BTreeMap<AppId, AppEntry>,
    directives: HashMap<String, Vec<Directive>>,
    cluster_stamp: u64,
    next_app: u64,
    next_ask: u64,
    draining_since: Option<u64>,
    history_outbox: Vec<ApplicationRecord>,
    drain_reports: BTreeMap<String, DrainSummary>,
}

impl ResourceManager {
    /// `workers` restricts which hosts may register; `None` accepts any host.
    pub fn new(cfg: Config, workers: Option<Vec<String>>, cluster_stamp: u64) -> ResourceManager {
        ResourceManager {
            cfg,
            allowed_hosts: workers.map(|w| w.into_iter().collect()),
            nodes: Vec::new(),
            queue: VecDeque::new(),
            containers: BTreeMap::new(),
            apps: BTreeMap::new(),
            directives: HashMap::new(),
            cluster_stamp,
            next_app: 1,
            next_ask: 0,
            draining_since: None,
            history_outbox: Vec::new(),
            drain_reports: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn container(&self, id: &ContainerId) -> Option<&Container> {
        self.containers.get(id)
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_draining(&self) -> bool {
        self.draining_since.is_some()
    }

    fn node_index(&self, host: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.host == host)
    }

    pub fn alive_workers(&self) -> usize {
        self.nodes.iter().filter(|n| n.status == NodeStatus::Alive).count()
    }

    pub fn register_node(&mut self, host: &str, capacity: ResourceProfile, now: u64) -> Result<Vec<Assignment>> {
        if let Some(allowed) = &self.allowed_hosts {
            if !allowed.contains(host) {
                return Err(Error::UnknownNode(host.to_string()));
            }
        }
        if self.is_draining() {
            return Err(Error::Protocol("cluster is shutting down".into()));
        }
        let fresh = NodeState {
            host: host.to_string(),
            capacity,
            used: ResourceProfile::ZERO,
            live_containers: BTreeSet::new(),
            last_heartbeat: now,
            status: NodeStatus::Alive,
        };
        match self.node_index(host) {
            Some(i) if self.nodes[i].status == NodeStatus::Alive => {
                return Err(Error::AlreadyRegistered(host.to_string()))
            }
            // A lost node that comes back keeps its registration slot.
            Some(i) => self.nodes[i] = fresh,
            None => self.nodes.push(fresh),
        }
        info!("node {host} registered with {capacity}");
        Ok(self.schedule())
    }

    /// Applies container statuses from `host` and returns the directives
    /// queued for it. Each directive is handed out exactly once.
    pub fn heartbeat(
        &mut self,
        host: &str,
        statuses: &[ContainerStatus],
        drained: Option<DrainSummary>,
        now: u64,
    ) -> Result<Vec<Directive>> {
        let idx = self
            .node_index(host)
            .ok_or_else(|| Error::ReRegisterRequired(format!("{host} is not registered")))?;
        match self.nodes[idx].status {
            NodeStatus::Lost => {
                return Err(Error::ReRegisterRequired(format!("{host} was declared lost")));
            }
            NodeStatus::Decommissioned => return Ok(vec![Directive::Teardown]),
            NodeStatus::Alive => {}
        }
        self.nodes[idx].last_heartbeat = now;
        for status in statuses {
            self.apply_status(host, status, now);
        }
        if let Some(summary) = drained {
            let leftover: Vec<ContainerId> = self.nodes[idx].live_containers.iter().cloned().collect();
            for id in leftover {
                self.terminate(&id, ContainerState::Killed, Some(EXIT_KILLED), "node drained".into(), now);
            }
            self.nodes[idx].status = NodeStatus::Decommissioned;
            self.directives.remove(host);
            self.drain_reports.insert(host.to_string(), summary);
            info!("node {host} drained");
            return Ok(Vec::new());
        }
        if self.is_draining() {
            return Ok(vec![Directive::Teardown]);
        }
        self.schedule();
        Ok(self.directives.remove(host).unwrap_or_default())
    }

    /// Out-of-band status for a single container.
    pub fn container_status(&mut self, status: &ContainerStatus, now: u64) -> Result<()> {
        let host = self
            .containers
            .get(&status.container_id)
            .map(|c| c.node.clone())
            .ok_or_else(|| Error::NotFound(status.container_id.to_string()))?;
        self.apply_status(&host, status, now);
        self.schedule();
        Ok(())
    }

    fn apply_status(&mut self, host: &str, status: &ContainerStatus, now: u64) {
        let Some(c) = self.containers.get_mut(&status.container_id) else {
            debug!("status for unknown container {}", status.container_id);
            return;
        };
        if c.node != host || c.state.is_terminal() {
            return;
        }
        if status.state.is_terminal() {
            let code = status.exit_code.unwrap_or(-1);
            let diag = status.diagnostics.clone();
            self.terminate(&status.container_id, status.state, Some(code), diag, now);
        } else if status.state == ContainerState::Running && c.state.can_transition_to(ContainerState::Running) {
            c.state = ContainerState::Running;
            let app_id = c.id.app_id.clone();
            let id = c.id.clone();
            if let Some(app) = self.apps.get_mut(&app_id) {
                if app.record.am_container.as_ref() == Some(&id) && app.record.state == AppState::Submitted {
                    app.record.state = AppState::AmRunning;
                }
            }
        }
    }

    /// Moves a container to a terminal state and returns its resources to the node.
    fn terminate(&mut self, id: &ContainerId, state: ContainerState, exit_code: Option<i32>, diag: String, now: u64) {
        let Some(c) = self.containers.get_mut(id) else { return };
        if c.state.is_terminal() {
            return;
        }
        c.state = state;
        c.exit_code = exit_code;
        c.diagnostics = diag.clone();
        let (node, resource) = (c.node.clone(), c.resource);
        if let Some(i) = self.node_index(&node) {
            let n = &mut self.nodes[i];
            if n.live_containers.remove(id) {
                n.used = n.used - resource;
            }
        }
        let Some(app) = self.apps.get_mut(&id.app_id) else { return };
        app.live.remove(id);
        app.released.0 += resource.memory_mb;
        app.released.1 += u64::from(resource.vcores);
        app.record.container_history.push(ContainerHistory {
            container_id: id.clone(),
            node,
            resource,
            exit_code,
        });
        let status = ContainerStatus {
            container_id: id.clone(),
            state,
            exit_code,
            diagnostics: diag.clone(),
        };
        let is_am = app.record.am_container.as_ref() == Some(id);
        if is_am {
            app.am_exited = true;
        } else {
            app.new_completions.push(status);
        }
        let app_id = id.app_id.clone();
        if is_am && !self.apps[&app_id].record.state.is_terminal() {
            let reason = if diag.is_empty() {
                format!("AM container exited with code {} before finishing", exit_code.unwrap_or(-1))
            } else {
                format!("AM container exited with code {}: {diag}", exit_code.unwrap_or(-1))
            };
            self.end_application(&app_id, false, reason, false, now);
        } else if self.apps[&app_id].record.state.is_terminal() && self.apps[&app_id].live.is_empty() {
            // final record including every container's exit code
            self.persist(&app_id);
        }
    }

    pub fn submit_application(
        &mut self,
        name: &str,
        am_command: &str,
        env: BTreeMap<String, String>,
        now: u64,
    ) -> Result<AppId> {
        if self.alive_workers() == 0 || self.is_draining() {
            return Err(Error::NoWorkers);
        }
        let resource = normalize_request(ResourceProfile::new(self.cfg.am_resource_mb, 1), &self.cfg)?;
        let app_id = AppId(format!("application_{}_{:04}", self.cluster_stamp, self.next_app));
        self.next_app += 1;
        let seq = self.push_ask(&app_id, resource, 1);
        self.apps.insert(
            app_id.clone(),
            AppEntry {
                record: ApplicationRecord {
                    app_id: app_id.clone(),
                    name: name.to_string(),
                    am_container: None,
                    state: AppState::Submitted,
                    submit_time: now,
                    finish_time: None,
                    container_history: Vec::new(),
                    diagnostics: String::new(),
                    counters: BTreeMap::new(),
                    phase_ms: BTreeMap::new(),
                },
                am_command: am_command.to_string(),
                am_env: env,
                am_ask_seq: seq,
                am_exited: false,
                next_index: 1,
                live: BTreeSet::new(),
                new_grants: Vec::new(),
                new_completions: Vec::new(),
                allocated: (0, 0),
                released: (0, 0),
            },
        );
        info!("submitted {app_id} ({name})");
        self.schedule();
        Ok(app_id)
    }

    fn push_ask(&mut self, app_id: &AppId, resource: ResourceProfile, count: u32) -> u64 {
        let seq = self.next_ask;
        self.next_ask += 1;
        self.queue.push_back(PendingAsk {
            seq,
            app_id: app_id.clone(),
            resource,
            remaining: count,
        });
        seq
    }

    /// One AM round trip: enqueue new asks, start granted containers,
    /// release unwanted ones, then hand back new grants and completions.
    pub fn allocate(
        &mut self,
        app_id: &AppId,
        asks: &[Ask],
        launches: &[TaskLaunch],
        releases: &[ContainerId],
        now: u64,
    ) -> Result<(Vec<ContainerGrant>, Vec<ContainerStatus>, AppState)> {
        let state = self
            .apps
            .get(app_id)
            .map(|a| a.record.state)
            .ok_or_else(|| Error::NotFound(app_id.to_string()))?;
        if !state.is_terminal() {
            let normalized = asks
                .iter()
                .filter(|a| a.count > 0)
                .map(|a| normalize_request(a.resource, &self.cfg).map(|r| (r, a.count)))
                .collect::<Result<Vec<_>>>()?;
            for (resource, count) in normalized {
                self.push_ask(app_id, resource, count);
            }
            for launch in launches {
                self.launch(app_id, launch);
            }
        }
        for id in releases {
            if id.app_id == *app_id {
                self.release(id, now);
            }
        }
        self.schedule();
        let app = self.apps.get_mut(app_id).expect("checked above");
        Ok((
            std::mem::take(&mut app.new_grants),
            std::mem::take(&mut app.new_completions),
            app.record.state,
        ))
    }

    fn launch(&mut self, app_id: &AppId, launch: &TaskLaunch) {
        let Some(c) = self.containers.get_mut(&launch.container_id) else { return };
        if c.id.app_id != *app_id || c.state != ContainerState::Allocated {
            return;
        }
        c.state = ContainerState::Launching;
        c.command = launch.command.clone();
        c.env = launch.env.clone();
        let spec = LaunchSpec {
            container_id: c.id.clone(),
            resource: c.resource,
            command: c.command.clone(),
            env: c.env.clone(),
        };
        self.directives.entry(c.node.clone()).or_default().push(Directive::Launch { spec });
    }

    fn release(&mut self, id: &ContainerId, now: u64) {
        let Some(c) = self.containers.get(id) else { return };
        match c.state {
            ContainerState::Allocated => {
                self.terminate(id, ContainerState::Killed, Some(EXIT_RELEASED), "released".into(), now)
            }
            ContainerState::Launching | ContainerState::Running => {
                let node = c.node.clone();
                self.directives
                    .entry(node)
                    .or_default()
                    .push(Directive::Kill { container_id: id.clone() });
            }
            _ => {}
        }
    }

    /// Final status from the application master.
    pub fn finish_application(
        &mut self,
        app_id: &AppId,
        succeeded: bool,
        diagnostics: String,
        counters: BTreeMap<String, u64>,
        phase_ms: BTreeMap<String, u64>,
        now: u64,
    ) -> Result<()> {
        let app = self
            .apps
            .get_mut(app_id)
            .ok_or_else(|| Error::NotFound(app_id.to_string()))?;
        if app.record.state.is_terminal() {
            return Ok(());
        }
        app.record.counters = counters;
        app.record.phase_ms = phase_ms;
        self.end_application(app_id, succeeded, diagnostics, true, now);
        Ok(())
    }

    /// `from_am` marks a finish reported by the AM itself, which then exits on its own.
    fn end_application(&mut self, app_id: &AppId, succeeded: bool, diagnostics: String, from_am: bool, now: u64) {
        let Some(app) = self.apps.get_mut(app_id) else { return };
        app.record.state = if succeeded { AppState::Finished } else { AppState::Failed };
        app.record.finish_time = Some(now.max(app.record.submit_time));
        app.record.diagnostics = diagnostics;
        let am = app.record.am_container.clone();
        let live: Vec<ContainerId> = app.live.iter().cloned().collect();
        info!("{app_id} ended: {:?} {}", app.record.state, app.record.diagnostics);
        self.queue.retain(|a| a.app_id != *app_id);
        for id in live {
            if from_am && Some(&id) == am.as_ref() {
                continue;
            }
            self.release(&id, now);
        }
        self.persist(app_id);
    }

    fn persist(&mut self, app_id: &AppId) {
        if let Some(app) = self.apps.get(app_id) {
            self.history_outbox.push(app.record.clone());
        }
    }

    /// Records that reached a terminal state (or gained exit codes) since the last call.
    pub fn take_history(&mut self) -> Vec<ApplicationRecord> {
        std::mem::take(&mut self.history_outbox)
    }

    /// Declares nodes silent for longer than the timeout lost and fails their containers.
    pub fn check_liveness(&mut self, now: u64) -> Vec<String> {
        let timeout = self.cfg.node_timeout_ms;
        let lost: Vec<usize> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.status == NodeStatus::Alive && now.saturating_sub(n.last_heartbeat) > timeout)
            .map(|(i, _)| i)
            .collect();
        let mut hosts = Vec::new();
        for i in lost {
            let host = self.nodes[i].host.clone();
            warn!("node {host} lost: no heartbeat for {} ms", now - self.nodes[i].last_heartbeat);
            self.nodes[i].status = NodeStatus::Lost;
            self.directives.remove(&host);
            let ids: Vec<ContainerId> = self.nodes[i].live_containers.iter().cloned().collect();
            for id in ids {
                self.terminate(&id, ContainerState::Failed, Some(EXIT_NODE_LOST), "node lost".into(), now);
            }
            hosts.push(host);
        }
        if !hosts.is_empty() {
            self.schedule();
        }
        hosts
    }

    /// Runs the FIFO first-fit pass and materializes containers for every placement.
    pub fn schedule(&mut self) -> Vec<Assignment> {
        if self.queue.is_empty() {
            return Vec::new();
        }
        let draining = self.is_draining();
        let mut slots: Vec<NodeSlot> = self
            .nodes
            .iter()
            .map(|n| NodeSlot {
                capacity: n.capacity,
                used: n.used,
                schedulable: n.status == NodeStatus::Alive && !draining,
            })
            .collect();
        let placements = scheduler::schedule(&mut self.queue, &mut slots);
        let mut out = Vec::with_capacity(placements.len());
        for p in placements {
            let host = self.nodes[p.node].host.clone();
            let app = self.apps.get_mut(&p.app_id).expect("asks belong to known apps");
            let id = ContainerId {
                app_id: p.app_id.clone(),
                index: app.next_index,
            };
            app.next_index += 1;
            app.live.insert(id.clone());
            app.allocated.0 += p.resource.memory_mb;
            app.allocated.1 += u64::from(p.resource.vcores);
            let node = &mut self.nodes[p.node];
            node.used = node.used + p.resource;
            node.live_containers.insert(id.clone());
            let mut container = Container {
                id: id.clone(),
                node: host.clone(),
                resource: p.resource,
                command: String::new(),
                env: BTreeMap::new(),
                state: ContainerState::Allocated,
                exit_code: None,
                diagnostics: String::new(),
            };
            if p.ask_seq == app.am_ask_seq {
                app.record.am_container = Some(id.clone());
                container.state = ContainerState::Launching;
                container.command = app.am_command.clone();
                container.env = app.am_env.clone();
                container.env.insert("CONTAINER_ROLE".into(), "am".into());
                let spec = LaunchSpec {
                    container_id: id.clone(),
                    resource: p.resource,
                    command: container.command.clone(),
                    env: container.env.clone(),
                };
                self.directives.entry(host.clone()).or_default().push(Directive::Launch { spec });
            } else {
                app.new_grants.push(ContainerGrant {
                    container_id: id.clone(),
                    node: host.clone(),
                    resource: p.resource,
                });
            }
            self.containers.insert(id.clone(), container);
            out.push(Assignment {
                container_id: id,
                host,
                resource: p.resource,
                ask_seq: p.ask_seq,
            });
        }
        out
    }

    pub fn application(&self, app_id: &AppId) -> Option<(ApplicationRecord, bool)> {
        self.apps.get(app_id).map(|a| (a.record.clone(), a.am_exited))
    }

    pub fn applications(&self) -> impl Iterator<Item = &ApplicationRecord> {
        self.apps.values().map(|a| &a.record)
    }

    pub fn cluster_report(&self) -> Vec<NodeReport> {
        self.nodes.iter().map(NodeState::report).collect()
    }

    pub fn drain_reports(&self) -> &BTreeMap<String, DrainSummary> {
        &self.drain_reports
    }

    /// Stops scheduling, fails unfinished applications and asks every node to drain.
    pub fn begin_shutdown(&mut self, now: u64) {
        if self.is_draining() {
            return;
        }
        info!("shutting down");
        self.draining_since = Some(now);
        let open: Vec<AppId> = self
            .apps
            .iter()
            .filter(|(_, a)| !a.record.state.is_terminal())
            .map(|(id, _)| id.clone())
            .collect();
        for id in open {
            self.end_application(&id, false, "cluster torn down".into(), false, now);
        }
        self.queue.clear();
    }

    /// Drain is over once no node is alive, or the grace window has passed.
    pub fn drain_complete(&self, now: u64) -> bool {
        let Some(since) = self.draining_since else { return false };
        let grace = self.cfg.node_timeout_ms + self.cfg.kill_grace_ms + 2000;
        self.nodes.iter().all(|n| n.status != NodeStatus::Alive) || now.saturating_sub(since) > grace
    }

    /// Memory/vcore totals allocated to and released by `app_id`.
    pub fn resource_ledger(&self, app_id: &AppId) -> Option<((u64, u64), (u64, u64))> {
        self.apps.get(app_id).map(|a| (a.allocated, a.released))
    }

    /// Checks the accounting invariants; used by tests and debug assertions.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for n in &self.nodes {
            if !n.capacity.fits(&n.used) {
                return Err(format!("{} oversubscribed: {} > {}", n.host, n.used, n.capacity));
            }
            let sum: ResourceProfile = n
                .live_containers
                .iter()
                .map(|id| self.containers[id].resource)
                .sum();
            if sum != n.used {
                return Err(format!("{} used {} != live sum {}", n.host, n.used, sum));
            }
        }
        for c in self.containers.values() {
            if c.resource.memory_mb == 0 || c.resource.memory_mb % self.cfg.min_alloc_mb != 0 {
                return Err(format!("{} has {} MB", c.id, c.resource.memory_mb));
            }
            if c.state.is_terminal() != c.exit_code.is_some() {
                return Err(format!("{} exit code/terminal mismatch", c.id));
            }
        }
        Ok(())
    }
}
