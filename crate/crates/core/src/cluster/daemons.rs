//! Entry points of the resource manager and history daemons, and the
//! per-host sweep that removes whatever a job left behind.

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::negotiator::{spawn_history_server, spawn_resource_manager, HistoryStore, ResourceManager};
use crate::node_agent::{procfs, JOB_ENV};
use crate::protocol::{DrainSummary, NodeReport};
use crate::util::{now_ms, write_atomic};

#[derive(Debug, Clone)]
pub struct RmDaemonArgs {
    pub listen: String,
    /// Host name written to the address file in place of the bound IP.
    pub advertise: Option<String>,
    pub addr_file: Option<PathBuf>,
    pub workers: Option<Vec<String>>,
    pub history_file: Option<PathBuf>,
    pub report_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RmFinalReport {
    pub nodes: Vec<NodeReport>,
    pub drain_reports: std::collections::BTreeMap<String, DrainSummary>,
}

fn bind(listen: &str, advertise: Option<&str>, addr_file: Option<&Path>) -> Result<(TcpListener, String)> {
    let listener = TcpListener::bind(listen).map_err(|e| Error::ClusterUnavailable(format!("cannot listen on {listen}: {e}")))?;
    let local = listener.local_addr()?;
    let addr = match advertise {
        Some(host) => format!("{host}:{}", local.port()),
        None => local.to_string(),
    };
    if let Some(f) = addr_file {
        write_atomic(f, addr.as_bytes())?;
    }
    Ok((listener, addr))
}

/// Serves until a shutdown has drained every node, then writes the final node report.
pub fn run_rm_daemon(cfg: Config, args: RmDaemonArgs) -> Result<()> {
    let (listener, addr) = bind(&args.listen, args.advertise.as_deref(), args.addr_file.as_deref())?;
    info!("resource manager listening on {addr}");
    let rm = ResourceManager::new(cfg, args.workers, now_ms() / 1000);
    let store = args.history_file.map(HistoryStore::new);
    let server = spawn_resource_manager(listener, rm, store)?;
    let rm = server.join();
    if let Some(path) = args.report_file {
        let report = RmFinalReport {
            nodes: rm.cluster_report(),
            drain_reports: rm.drain_reports().clone(),
        };
        write_atomic(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    info!("resource manager stopped");
    Ok(())
}

#[derive(Debug, Clone)]
pub struct HistoryDaemonArgs {
    pub listen: String,
    pub advertise: Option<String>,
    pub addr_file: Option<PathBuf>,
    pub history_file: PathBuf,
}

pub fn run_history_daemon(args: HistoryDaemonArgs) -> Result<()> {
    let (listener, addr) = bind(&args.listen, args.advertise.as_deref(), args.addr_file.as_deref())?;
    info!("history service listening on {addr}");
    spawn_history_server(listener, HistoryStore::new(args.history_file))?.join();
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepResult {
    pub killed: Vec<i32>,
    pub removed: Vec<PathBuf>,
    pub copied_logs: Vec<PathBuf>,
    pub failures: Vec<(PathBuf, String)>,
    /// Processes of the job still alive after the sweep.
    pub survivors: Vec<i32>,
}

/// Kills every process tagged with `job_id`, copies daemon logs out of each
/// `<root>/<job_id>` into `log_dest/<host>`, and removes those directories
/// (and the root too when it is left empty and `remove_empty_root` is set).
pub fn sweep(job_id: &str, roots: &[(String, PathBuf)], log_dest: Option<&Path>, grace: Duration, remove_empty_root: bool) -> SweepResult {
    let mut res = SweepResult::default();
    let pids = procfs::pids_with_env(JOB_ENV, job_id);
    for &pid in &pids {
        procfs::signal(pid, libc::SIGTERM);
    }
    let deadline = Instant::now() + grace;
    while pids.iter().any(|&p| procfs::is_alive(p)) && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(20));
    }
    for &pid in &pids {
        if procfs::is_alive(pid) {
            procfs::signal(pid, libc::SIGKILL);
        }
    }
    res.killed = pids;
    // stragglers forked while we were signalling
    for _ in 0..3 {
        let rest = procfs::pids_with_env(JOB_ENV, job_id);
        if rest.is_empty() {
            break;
        }
        for &pid in &rest {
            procfs::signal(pid, libc::SIGKILL);
        }
        thread::sleep(Duration::from_millis(50));
    }
    res.survivors = procfs::pids_with_env(JOB_ENV, job_id);

    for (host, root) in roots {
        let job_dir = root.join(job_id);
        if let Some(dest) = log_dest {
            collect_logs(&job_dir, &dest.join(host), &mut res);
        }
        if fs::symlink_metadata(&job_dir).is_ok() {
            match fs::remove_dir_all(&job_dir) {
                Ok(()) => res.removed.push(job_dir.clone()),
                Err(e) => res.failures.push((job_dir.clone(), e.to_string())),
            }
        }
        if remove_empty_root {
            let _ = fs::remove_dir(root);
        }
    }
    res
}

fn collect_logs(dir: &Path, dest: &Path, res: &mut SweepResult) {
    let Ok(rd) = fs::read_dir(dir) else { return };
    for entry in rd.flatten() {
        let path = entry.path();
        let Ok(ft) = entry.file_type() else { continue };
        if ft.is_dir() && entry.file_name() != "containers" {
            collect_logs(&path, dest, res);
        } else if ft.is_file() && path.extension().and_then(|e| e.to_str()) == Some("log") {
            if let Err(e) = fs::create_dir_all(dest).and_then(|_| fs::copy(&path, dest.join(entry.file_name()))) {
                warn!("cannot collect {}: {e}", path.display());
            } else {
                res.copied_logs.push(dest.join(entry.file_name()));
            }
        }
    }
}
