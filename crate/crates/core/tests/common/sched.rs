//! Random operation sequences against the resource manager, checked against
//! a plain first-fit queue model written without reference to the scheduler.

use std::collections::{BTreeMap, VecDeque};

use ephemyarn::config::Config;
use ephemyarn::negotiator::ResourceManager;
use ephemyarn::protocol::{AppId, Ask, ContainerId};
use ephemyarn::resource::ResourceProfile;
use proptest::prelude::*;

pub const MIN_MB: u64 = 2048;
pub const CEILING_MB: u64 = 16384;
pub const CEILING_VCORES: u32 = 8;
pub const AM_MB: u64 = 2048;

#[derive(Debug, Clone)]
pub enum Op {
    Register { memory_mb: u64, vcores: u32 },
    Submit,
    Ask { app: usize, memory_mb: u64, vcores: u32, count: u32 },
    Release { app: usize, pick: usize },
    Heartbeat { node: usize },
}

pub fn config() -> Config {
    Config {
        node_capacity: ResourceProfile::new(CEILING_MB, CEILING_VCORES),
        min_alloc_mb: MIN_MB,
        min_alloc_vcores: 1,
        am_resource_mb: AM_MB,
        ..Config::default()
    }
}

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        2 => (1u64..=16, 1u32..=8).prop_map(|(k, v)| Op::Register { memory_mb: k * 1024, vcores: v }),
        2 => Just(Op::Submit),
        5 => (0usize..4, 0u64..=20_000, 0u32..=9, 1u32..=4)
            .prop_map(|(app, memory_mb, vcores, count)| Op::Ask { app, memory_mb, vcores, count }),
        3 => (0usize..4, 0usize..8).prop_map(|(app, pick)| Op::Release { app, pick }),
        1 => (0usize..4).prop_map(|node| Op::Heartbeat { node }),
    ]
}

pub fn ops(max: usize) -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(op(), 1..=max)
}

/// Small instances: at most 3 nodes and 10 requests.
pub fn small_ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(op(), 1..=16).prop_map(|v| {
        let mut nodes = 0;
        let mut requests = 0;
        v.into_iter()
            .filter(|o| match o {
                Op::Register { .. } => {
                    nodes += 1;
                    nodes <= 3
                }
                Op::Submit | Op::Ask { .. } => {
                    requests += 1;
                    requests <= 10
                }
                _ => true,
            })
            .collect()
    })
}

/// Live container as seen from outside: (app ordinal, container index) -> (node ordinal, mb, vcores).
pub type Snapshot = (Vec<(u64, u32)>, BTreeMap<(usize, u64), (usize, u64, u32)>);

fn round_up(mb: u64) -> u64 {
    let units = mb.div_ceil(MIN_MB).max(1);
    units * MIN_MB
}

/// Oracle: a queue of (app, mb, vcores) containers placed one at a time on
/// the first node with room, stopping at the first that fits nowhere.
#[derive(Default)]
pub struct Model {
    nodes: Vec<(u64, u32, u64, u32)>,
    apps: usize,
    next_index: Vec<u64>,
    queue: VecDeque<(usize, u64, u32)>,
    live: BTreeMap<(usize, u64), (usize, u64, u32, bool)>,
}

impl Model {
    fn place(&mut self) {
        while let Some(&(app, mb, vc)) = self.queue.front() {
            let Some(n) = self
                .nodes
                .iter()
                .position(|&(cm, cv, um, uv)| cm - um >= mb && cv - uv >= vc)
            else {
                return;
            };
            self.nodes[n].2 += mb;
            self.nodes[n].3 += vc;
            let idx = self.next_index[app];
            self.next_index[app] += 1;
            let is_am = idx == 1;
            self.live.insert((app, idx), (n, mb, vc, is_am));
            self.queue.pop_front();
        }
    }

    pub fn apply(&mut self, op: &Op) {
        match *op {
            Op::Register { memory_mb, vcores } => self.nodes.push((memory_mb, vcores, 0, 0)),
            Op::Submit => {
                if !self.nodes.is_empty() {
                    self.apps += 1;
                    self.next_index.push(1);
                    self.queue.push_back((self.apps - 1, AM_MB, 1));
                }
            }
            Op::Ask { app, memory_mb, vcores, count } => {
                if self.apps > 0 {
                    let app = app % self.apps;
                    let mb = round_up(memory_mb);
                    let vc = vcores.max(1);
                    if mb <= CEILING_MB && vc <= CEILING_VCORES {
                        for _ in 0..count {
                            self.queue.push_back((app, mb, vc));
                        }
                    }
                }
            }
            Op::Release { app, pick } => {
                if self.apps > 0 {
                    let app = app % self.apps;
                    let mine: Vec<(usize, u64)> = self
                        .live
                        .iter()
                        .filter(|(k, v)| k.0 == app && !v.3)
                        .map(|(k, _)| *k)
                        .collect();
                    if !mine.is_empty() {
                        let key = mine[pick % mine.len()];
                        let (n, mb, vc, _) = self.live.remove(&key).unwrap();
                        self.nodes[n].2 -= mb;
                        self.nodes[n].3 -= vc;
                    }
                }
            }
            Op::Heartbeat { .. } => {}
        }
        self.place();
    }

    pub fn snapshot(&self) -> Snapshot {
        (
            self.nodes.iter().map(|&(_, _, um, uv)| (um, uv)).collect(),
            self.live.iter().map(|(k, v)| (*k, (v.0, v.1, v.2))).collect(),
        )
    }
}

/// Drives a real resource manager with the same operations.
pub struct Driver {
    pub rm: ResourceManager,
    apps: Vec<AppId>,
    hosts: Vec<String>,
    live: BTreeMap<(usize, u64), bool>,
    now: u64,
}

impl Driver {
    pub fn new() -> Driver {
        Driver {
            rm: ResourceManager::new(config(), None, 1),
            apps: Vec::new(),
            hosts: Vec::new(),
            live: BTreeMap::new(),
            now: 0,
        }
    }

    pub fn apply(&mut self, op: &Op) -> Result<(), String> {
        self.now += 1;
        match *op {
            Op::Register { memory_mb, vcores } => {
                let host = format!("node{}", self.hosts.len());
                self.rm
                    .register_node(&host, ResourceProfile::new(memory_mb, vcores), self.now)
                    .map_err(|e| e.to_string())?;
                self.hosts.push(host);
            }
            Op::Submit => match self.rm.submit_application("p", "true", BTreeMap::new(), self.now) {
                Ok(id) => self.apps.push(id),
                Err(e) if self.hosts.is_empty() => drop(e),
                Err(e) => return Err(e.to_string()),
            },
            Op::Ask { app, memory_mb, vcores, count } => {
                if !self.apps.is_empty() {
                    let id = self.apps[app % self.apps.len()].clone();
                    let ask = Ask {
                        resource: ResourceProfile::new(memory_mb, vcores),
                        count,
                    };
                    let fits = round_up(memory_mb) <= CEILING_MB && vcores.max(1) <= CEILING_VCORES;
                    match self.rm.allocate(&id, &[ask], &[], &[], self.now) {
                        Ok(_) if fits => {}
                        Err(_) if !fits => {}
                        other => return Err(format!("ask {memory_mb}/{vcores}: {:?}", other.map(|_| ()))),
                    }
                }
            }
            Op::Release { app, pick } => {
                if !self.apps.is_empty() {
                    let a = app % self.apps.len();
                    self.refresh();
                    let mine: Vec<u64> = self.live.iter().filter(|(k, am)| k.0 == a && !**am).map(|(k, _)| k.1).collect();
                    if !mine.is_empty() {
                        let id = ContainerId {
                            app_id: self.apps[a].clone(),
                            index: mine[pick % mine.len()],
                        };
                        self.rm
                            .allocate(&self.apps[a].clone(), &[], &[], &[id], self.now)
                            .map_err(|e| e.to_string())?;
                    }
                }
            }
            Op::Heartbeat { node } => {
                if !self.hosts.is_empty() {
                    let host = self.hosts[node % self.hosts.len()].clone();
                    self.rm.heartbeat(&host, &[], None, self.now).map_err(|e| e.to_string())?;
                }
            }
        }
        Ok(())
    }

    /// Live containers, found by probing indices; the AM is the one the RM records as such.
    fn refresh(&mut self) {
        self.live.clear();
        for (a, id) in self.apps.iter().enumerate() {
            let am = self.rm.application(id).and_then(|(r, _)| r.am_container).map(|c| c.index);
            let mut index = 1;
            loop {
                let cid = ContainerId {
                    app_id: id.clone(),
                    index,
                };
                match self.rm.container(&cid) {
                    Some(c) => {
                        if !c.state.is_terminal() {
                            self.live.insert((a, index), am == Some(index));
                        }
                    }
                    None => break,
                }
                index += 1;
            }
        }
    }

    pub fn snapshot(&mut self) -> Snapshot {
        self.refresh();
        let used = self
            .rm
            .nodes()
            .iter()
            .map(|n| (n.used.memory_mb, n.used.vcores))
            .collect();
        let mut live = BTreeMap::new();
        for &(a, index) in self.live.keys() {
            let c = self
                .rm
                .container(&ContainerId {
                    app_id: self.apps[a].clone(),
                    index,
                })
                .unwrap();
            let node = self.hosts.iter().position(|h| *h == c.node).unwrap();
            live.insert((a, index), (node, c.resource.memory_mb, c.resource.vcores));
        }
        (used, live)
    }
}

/// Safety properties that must hold after every step, independent of the model.
pub fn check_safety(d: &mut Driver) -> Result<(), String> {
    d.rm.check_invariants()?;
    let (used, live) = d.snapshot();
    for (i, n) in d.rm.nodes().iter().enumerate() {
        if used[i].0 > n.capacity.memory_mb || used[i].1 > n.capacity.vcores {
            return Err(format!("{} over capacity: {:?} > {}", n.host, used[i], n.capacity));
        }
    }
    for ((a, i), (_, mb, _)) in &live {
        if *mb == 0 || mb % MIN_MB != 0 {
            return Err(format!("container {a}/{i} holds {mb} MB"));
        }
    }
    Ok(())
}

/// Runs `ops` against the resource manager and the model; any divergence or
/// safety violation is an error. Returns the per-step snapshots.
pub fn check_sequence(ops: &[Op]) -> Result<Vec<Snapshot>, String> {
    let mut d = Driver::new();
    let mut m = Model::default();
    let mut trace = Vec::new();
    for (step, op) in ops.iter().enumerate() {
        d.apply(op).map_err(|e| format!("step {step} {op:?}: {e}"))?;
        m.apply(op);
        check_safety(&mut d).map_err(|e| format!("step {step} {op:?}: {e}"))?;
        let snap = d.snapshot();
        let want = m.snapshot();
        if snap != want {
            return Err(format!("step {step} {op:?}: manager {snap:?} != first-fit oracle {want:?}"));
        }
        trace.push(snap);
    }
    Ok(trace)
}

/// Replaying the same sequence on a fresh manager yields the same trace.
pub fn check_replay(ops: &[Op]) -> Result<(), String> {
    let a = check_sequence(ops)?;
    let b = check_sequence(ops)?;
    if a != b {
        return Err("replay diverged".into());
    }
    Ok(())
}
