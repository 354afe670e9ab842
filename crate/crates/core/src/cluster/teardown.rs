use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::daemons::{sweep, RmFinalReport, SweepResult};
use super::launch::run_remote;
use super::{ClusterState, Lifecycle, RM_REPORT_FILE, TEARDOWN_FILE};
use crate::error::Result;
use crate::protocol::{Client, Message, NodeStatus};
use crate::util::{shell_quote, write_atomic};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeardownReport {
    pub job_id: String,
    /// The cluster was already gone; nothing was done.
    pub already_torn_down: bool,
    pub drained: Vec<String>,
    /// Worker hosts that did not confirm a clean drain.
    pub undrained: Vec<String>,
    /// Paths that could not be removed, as (host, path, reason).
    pub cleanup_failures: Vec<(String, String, String)>,
    pub killed_processes: usize,
    pub residual_processes: usize,
    pub removed: Vec<PathBuf>,
    pub wall_ms: u64,
}

impl TeardownReport {
    pub fn ok(&self) -> bool {
        self.undrained.is_empty() && self.cleanup_failures.is_empty() && self.residual_processes == 0
    }
}

/// Tears down the cluster described by the state file at `state_path`.
/// Running it again on a torn-down cluster is a successful no-op.
pub fn teardown(state_path: &Path) -> Result<TeardownReport> {
    let mut state = ClusterState::load(state_path)?;
    teardown_state(&mut state)
}

pub(crate) fn teardown_state(state: &mut ClusterState) -> Result<TeardownReport> {
    let started = Instant::now();
    let mut report = TeardownReport {
        job_id: state.job_id.clone(),
        ..TeardownReport::default()
    };
    if state.status == Lifecycle::TornDown {
        report.already_torn_down = true;
        return Ok(report);
    }
    info!("tearing down {}", state.job_id);
    let staging = state.staging().to_path_buf();
    let final_report = stop_resource_manager(state);
    if let Some(addr) = &state.history_address {
        let _ = Client::new(addr.clone())
            .with_timeout(Duration::from_secs(2))
            .call(&Message::Shutdown);
    }

    let workers: BTreeSet<&String> = state.layout.worker_hosts.iter().collect();
    let fr = final_report.unwrap_or_default();
    for host in workers {
        let node = fr.nodes.iter().find(|n| &n.host == host);
        match (node.map(|n| n.status), fr.drain_reports.get(host)) {
            (Some(NodeStatus::Decommissioned), Some(summary)) => {
                report.drained.push(host.clone());
                for (path, why) in &summary.failures {
                    report.cleanup_failures.push((host.clone(), path.clone(), why.clone()));
                }
            }
            _ => report.undrained.push(host.clone()),
        }
    }

    let grace = Duration::from_millis(state.kill_grace_ms.min(2000));
    let log_dest = state.logs_dir().join("daemons");
    if state.local_mode {
        let roots: Vec<(String, PathBuf)> = state.host_roots.iter().map(|(h, r)| (h.clone(), r.clone())).collect();
        let res = sweep(&state.job_id, &roots, Some(&log_dest), grace, true);
        absorb(&mut report, "localhost", res);
        let _ = fs::remove_dir(&state.plan.local_root);
    } else {
        for host in state.layout.all_hosts() {
            let root = state.host_job_dir(&host).parent().map(Path::to_path_buf).unwrap_or_default();
            let script = format!(
                "{} sweep --job-id {} --host {} --local-root {} --log-dest {}",
                shell_quote(&state.exe.to_string_lossy()),
                shell_quote(&state.job_id),
                shell_quote(&host),
                shell_quote(&root.to_string_lossy()),
                shell_quote(&log_dest.to_string_lossy()),
            );
            match run_remote(&state.remote_exec, &host, &script) {
                Ok(out) => match serde_json::from_str::<SweepResult>(out.trim()) {
                    Ok(res) => absorb(&mut report, &host, res),
                    Err(e) => report.cleanup_failures.push((host.clone(), String::new(), format!("bad sweep reply: {e}"))),
                },
                Err(e) => {
                    warn!("sweep of {host} failed: {e}");
                    if !report.undrained.contains(&host) {
                        report.undrained.push(host.clone());
                    }
                }
            }
        }
    }

    prune_staging(&staging);
    report.wall_ms = started.elapsed().as_millis() as u64;
    state.status = Lifecycle::TornDown;
    state.teardown_ms = Some(report.wall_ms);
    state.save()?;
    write_atomic(&staging.join(TEARDOWN_FILE), serde_json::to_string_pretty(&report)?.as_bytes())?;
    if report.ok() {
        info!("{} torn down in {} ms", state.job_id, report.wall_ms);
    } else {
        warn!(
            "{} torn down with problems: undrained {:?}, cleanup failures {:?}, residual processes {}",
            state.job_id, report.undrained, report.cleanup_failures, report.residual_processes
        );
    }
    Ok(report)
}

fn absorb(report: &mut TeardownReport, host: &str, res: SweepResult) {
    report.killed_processes += res.killed.len();
    report.residual_processes += res.survivors.len();
    report.removed.extend(res.removed);
    for (path, why) in res.failures {
        report.cleanup_failures.push((host.to_string(), path.display().to_string(), why));
    }
}

/// Asks the resource manager to drain every node and waits for it to exit.
fn stop_resource_manager(state: &ClusterState) -> Option<RmFinalReport> {
    let addr = state.rm_address.clone()?;
    let report_file = state.staging().join(RM_REPORT_FILE);
    let mut client = Client::new(addr).with_timeout(Duration::from_secs(2));
    if let Err(e) = client.call(&Message::Shutdown) {
        warn!("resource manager unreachable: {e}");
        return read_final(&report_file);
    }
    let limit = Duration::from_millis(state.node_timeout_ms + state.kill_grace_ms + 5000);
    let deadline = Instant::now() + limit;
    let mut last = None;
    while Instant::now() < deadline {
        if let Some(r) = read_final(&report_file) {
            return Some(r);
        }
        match client.call(&Message::ClusterStatus) {
            Ok(Message::ClusterReport {
                nodes, drain_reports, ..
            }) => last = Some(RmFinalReport { nodes, drain_reports }),
            Ok(_) => {}
            Err(_) => {
                // gone; its final report may still be landing
                thread::sleep(Duration::from_millis(50));
                return read_final(&report_file).or(last);
            }
        }
        thread::sleep(Duration::from_millis(state.heartbeat_interval_ms.clamp(10, 100)));
    }
    warn!("resource manager did not stop within {limit:?}");
    last
}

fn read_final(path: &Path) -> Option<RmFinalReport> {
    serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
}

/// Removes everything from staging except the history, state and teardown files.
fn prune_staging(staging: &Path) {
    let keep = ["history.ndjson", "cluster.json", TEARDOWN_FILE];
    let Ok(rd) = fs::read_dir(staging) else { return };
    for entry in rd.flatten() {
        let name = entry.file_name();
        if keep.iter().any(|k| name == *k) {
            continue;
        }
        let path = entry.path();
        let res = if entry.file_type().map(|t| t.is_dir()).unwrap_or(false) {
            fs::remove_dir_all(&path)
        } else {
            fs::remove_file(&path)
        };
        if let Err(e) = res {
            warn!("cannot prune {}: {e}", path.display());
        }
    }
}
