use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};

use super::launch::{Launcher, Spawned};
use super::teardown::teardown_state;
use super::{ClusterState, DaemonRecord, Lifecycle, CONFIG_FILE, HISTORY_ADDR_FILE, RM_ADDR_FILE, RM_REPORT_FILE};
use crate::allocation::{assign_roles, default_job_id, parse_hostfile, plan_directories, read_env_allocation, NodeAllocation, SchedulerFlavor};
use crate::config::{Config, CONFIG_ENV};
use crate::error::{Error, Result};
use crate::node_agent::JOB_ENV;
use crate::protocol::{Client, Message, NodeStatus};

#[derive(Debug, Clone)]
pub enum AllocationSource {
    Hostfile(PathBuf),
    Env(SchedulerFlavor),
    /// `n` simulated nodes on this machine with `slots` cores each.
    Local { nodes: usize, slots: u32 },
}

impl AllocationSource {
    pub fn resolve(&self, cfg: &Config) -> Result<NodeAllocation> {
        match self {
            AllocationSource::Hostfile(p) => parse_hostfile(&fs::read_to_string(p).map_err(Error::path_io(p))?),
            AllocationSource::Env(flavor) => {
                let env: HashMap<String, String> = std::env::vars().collect();
                read_env_allocation(&env, *flavor, cfg)
            }
            AllocationSource::Local { nodes, slots } => NodeAllocation::local(*nodes, *slots),
        }
    }

    fn is_local(&self) -> bool {
        matches!(self, AllocationSource::Local { .. })
    }
}

#[derive(Debug, Clone)]
pub struct ProvisionOptions {
    /// The `ephemyarn` executable daemons are started from.
    pub exe: PathBuf,
    pub job_id: Option<String>,
    /// Replaces the node agent command line; used to inject start-up failures.
    pub agent_command: Option<Vec<String>>,
}

impl ProvisionOptions {
    pub fn new(exe: impl Into<PathBuf>) -> ProvisionOptions {
        ProvisionOptions {
            exe: exe.into(),
            job_id: None,
            agent_command: None,
        }
    }
}

fn arg(s: impl AsRef<std::ffi::OsStr>) -> String {
    s.as_ref().to_string_lossy().into_owned()
}

/// Starts the resource manager and history service on the first two hosts
/// and a node agent on every other host, then waits until every agent has
/// registered. On failure whatever was started is torn down again.
pub fn provision(source: &AllocationSource, cfg: &Config, opts: &ProvisionOptions) -> Result<ClusterState> {
    let started = Instant::now();
    cfg.validate()?;
    let alloc = source.resolve(cfg)?;
    let layout = assign_roles(&alloc, cfg)?;
    let job_id = opts.job_id.clone().unwrap_or_else(|| {
        let env: HashMap<String, String> = std::env::vars().collect();
        default_job_id(&env)
    });
    let plan = plan_directories(&layout, cfg, &job_id)?;
    let local = source.is_local();
    if let Ok(prev) = ClusterState::load(&plan.state_file()) {
        if prev.status != Lifecycle::TornDown {
            return Err(Error::InvalidConfig(format!("job {job_id} already has a cluster ({:?})", prev.status)));
        }
    }
    let host_roots: BTreeMap<String, PathBuf> = layout
        .all_hosts()
        .into_iter()
        .map(|h| {
            let root = if local { plan.local_root.join(&h) } else { plan.local_root.clone() };
            (h, root)
        })
        .collect();

    plan.create_shared_dirs()?;
    let staging = plan.shared_dirs.staging.clone();
    for f in [RM_ADDR_FILE, HISTORY_ADDR_FILE, RM_REPORT_FILE] {
        let _ = fs::remove_file(staging.join(f));
    }
    let config_file = staging.join(CONFIG_FILE);
    crate::util::write_atomic(&config_file, cfg.to_text().as_bytes())?;

    let mut state = ClusterState {
        job_id: job_id.clone(),
        status: Lifecycle::Provisioning,
        local_mode: local,
        exe: opts.exe.clone(),
        config_file: config_file.clone(),
        layout: layout.clone(),
        plan: plan.clone(),
        host_roots,
        total_cores: alloc.total_cores(),
        rm_address: None,
        history_address: None,
        daemons: Vec::new(),
        heartbeat_interval_ms: cfg.heartbeat_interval_ms,
        node_timeout_ms: cfg.node_timeout_ms,
        kill_grace_ms: cfg.kill_grace_ms,
        remote_exec: cfg.remote_exec.clone(),
        provision_ms: None,
        teardown_ms: None,
    };
    if local {
        for host in layout.all_hosts() {
            plan.rebase_local(&state.host_roots[&host]).create_local_dirs()?;
        }
    }
    state.save()?;
    info!("provisioning {job_id}: rm {}, history {}, {} worker(s)", layout.rm_host, layout.history_host, layout.worker_hosts.len());

    match start_daemons(&mut state, cfg, opts, started) {
        Ok(()) => {
            state.status = Lifecycle::Ready;
            state.provision_ms = Some(started.elapsed().as_millis() as u64);
            state.save()?;
            info!("cluster {job_id} ready in {} ms", state.provision_ms.unwrap_or(0));
            Ok(state)
        }
        Err(e) => {
            warn!("provisioning {job_id} failed: {e}; rolling back");
            if let Err(te) = teardown_state(&mut state) {
                warn!("rollback incomplete: {te}");
            }
            Err(e)
        }
    }
}

fn start_daemons(state: &mut ClusterState, cfg: &Config, opts: &ProvisionOptions, started: Instant) -> Result<()> {
    let launcher = if state.local_mode {
        Launcher::Local
    } else {
        Launcher::Remote {
            template: cfg.remote_exec.clone(),
        }
    };
    let deadline = started + Duration::from_millis(cfg.ready_timeout_ms);
    let exe = arg(&opts.exe);
    let staging = state.staging().to_path_buf();
    let env = vec![
        (JOB_ENV.to_string(), state.job_id.clone()),
        (CONFIG_ENV.to_string(), arg(&state.config_file)),
        ("RUST_LOG".to_string(), std::env::var("RUST_LOG").unwrap_or_else(|_| "info".into())),
    ];
    let layout = state.layout.clone();
    let listen = |port: u16| {
        if state.local_mode {
            "127.0.0.1:0".to_string()
        } else {
            format!("0.0.0.0:{port}")
        }
    };
    let advertise = |host: &str| -> Vec<String> {
        if state.local_mode {
            Vec::new()
        } else {
            vec!["--advertise".into(), host.to_string()]
        }
    };
    let mut spawned: Vec<(String, Spawned)> = Vec::new();

    let rm_log = state.host_job_dir(&layout.rm_host).join("rm_log/resourcemanager.log");
    let mut rm_argv = vec![
        exe.clone(),
        "daemon".into(),
        "rm".into(),
        "--listen".into(),
        listen(layout.ports.rm_port),
        "--addr-file".into(),
        arg(staging.join(RM_ADDR_FILE)),
        "--history-file".into(),
        arg(state.plan.history_file()),
        "--report-file".into(),
        arg(staging.join(RM_REPORT_FILE)),
        "--workers".into(),
        layout.worker_hosts.join(","),
    ];
    rm_argv.extend(advertise(&layout.rm_host));
    let s = launcher.launch(&layout.rm_host, &rm_argv, &env, &rm_log)?;
    state.daemons.push(DaemonRecord {
        role: "resourcemanager".into(),
        host: layout.rm_host.clone(),
        pid: s.as_ref().map(|s| s.pid),
        log: rm_log,
    });
    if let Some(s) = s {
        spawned.push(("resource manager".into(), s));
    }

    let hs_log = state.host_job_dir(&layout.history_host).join("rm_log/historyserver.log");
    let mut hs_argv = vec![
        exe.clone(),
        "daemon".into(),
        "history".into(),
        "--listen".into(),
        listen(layout.ports.history_port),
        "--addr-file".into(),
        arg(staging.join(HISTORY_ADDR_FILE)),
        "--history-file".into(),
        arg(state.plan.history_file()),
    ];
    hs_argv.extend(advertise(&layout.history_host));
    let s = launcher.launch(&layout.history_host, &hs_argv, &env, &hs_log)?;
    state.daemons.push(DaemonRecord {
        role: "historyserver".into(),
        host: layout.history_host.clone(),
        pid: s.as_ref().map(|s| s.pid),
        log: hs_log,
    });
    if let Some(s) = s {
        spawned.push(("history service".into(), s));
    }
    state.save()?;

    let rm_addr = wait_for_file(&staging.join(RM_ADDR_FILE), deadline, &spawned, cfg)?;
    let hs_addr = wait_for_file(&staging.join(HISTORY_ADDR_FILE), deadline, &spawned, cfg)?;
    state.rm_address = Some(rm_addr.clone());
    state.history_address = Some(hs_addr);
    state.save()?;

    for host in &layout.worker_hosts {
        let root = state.host_roots[host].clone();
        let log = root.join(&state.job_id).join("rm_log/nodemanager.log");
        let argv = match &opts.agent_command {
            Some(cmd) => cmd.clone(),
            None => vec![
                exe.clone(),
                "agent".into(),
                "--rm".into(),
                rm_addr.clone(),
                "--host".into(),
                host.clone(),
                "--local-root".into(),
                arg(&root),
                "--job-id".into(),
                state.job_id.clone(),
                "--log-dir".into(),
                arg(state.logs_dir()),
                "--staging".into(),
                arg(&staging),
            ],
        };
        let s = launcher.launch(host, &argv, &env, &log)?;
        state.daemons.push(DaemonRecord {
            role: "nodemanager".into(),
            host: host.clone(),
            pid: s.as_ref().map(|s| s.pid),
            log,
        });
        if let Some(s) = s {
            spawned.push((format!("node agent on {host}"), s));
        }
    }
    state.save()?;

    let mut client = Client::new(rm_addr).with_timeout(Duration::from_secs(5));
    let want = layout.worker_hosts.len();
    loop {
        check_spawned(&spawned)?;
        if let Ok(Message::ClusterReport { nodes, .. }) = client.call(&Message::ClusterStatus) {
            let alive = nodes.iter().filter(|n| n.status == NodeStatus::Alive).count();
            if alive >= want {
                return Ok(());
            }
        }
        if Instant::now() >= deadline {
            return Err(Error::ReadyTimeout(cfg.ready_timeout_ms));
        }
        thread::sleep(Duration::from_millis(20));
    }
}

fn check_spawned(spawned: &[(String, Spawned)]) -> Result<()> {
    for (what, s) in spawned {
        if let Some(status) = s.exited() {
            return Err(Error::ClusterUnavailable(format!("{what} exited during start-up ({status})")));
        }
    }
    Ok(())
}

fn wait_for_file(path: &Path, deadline: Instant, spawned: &[(String, Spawned)], cfg: &Config) -> Result<String> {
    loop {
        if let Ok(text) = fs::read_to_string(path) {
            if !text.trim().is_empty() {
                return Ok(text.trim().to_string());
            }
        }
        check_spawned(spawned)?;
        if Instant::now() >= deadline {
            return Err(Error::ReadyTimeout(cfg.ready_timeout_ms));
        }
        thread::sleep(Duration::from_millis(10));
    }
}
