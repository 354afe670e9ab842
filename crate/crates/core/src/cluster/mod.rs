//! Ephemeral cluster lifecycle: provision daemons inside an allocation, run
//! jobs on them, and tear everything down again.
//!
//! All of it is driven by a state file on the shared filesystem, so any
//! process on any allocated node can run or tear down the cluster.

mod daemons;
mod launch;
mod provision;
mod run;
mod teardown;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocation::{ClusterLayout, DirectoryPlan};
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub use daemons::{run_history_daemon, run_rm_daemon, sweep, HistoryDaemonArgs, RmDaemonArgs, SweepResult};
pub use provision::{provision, AllocationSource, ProvisionOptions};
pub use run::{run_job, RunOutcome};
pub use teardown::{teardown, TeardownReport};

/// Environment variable naming the default state file for `run` and `teardown`.
pub const CLUSTER_ENV: &str = "EPHEMYARN_CLUSTER";
pub const CONFIG_FILE: &str = "ephemyarn.conf";
pub const RM_ADDR_FILE: &str = "rm.addr";
pub const HISTORY_ADDR_FILE: &str = "history.addr";
pub const RM_REPORT_FILE: &str = "rm-final.json";
pub const TEARDOWN_FILE: &str = "teardown.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    Provisioning,
    Ready,
    TornDown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaemonRecord {
    pub role: String,
    pub host: String,
    pub pid: Option<u32>,
    pub log: PathBuf,
}

/// Everything teardown needs, persisted as JSON under shared staging.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterState {
    pub job_id: String,
    pub status: Lifecycle,
    /// Simulated nodes on this machine rather than remote hosts.
    pub local_mode: bool,
    pub exe: PathBuf,
    pub config_file: PathBuf,
    pub layout: ClusterLayout,
    pub plan: DirectoryPlan,
    /// Node-local root of every host.
    pub host_roots: BTreeMap<String, PathBuf>,
    pub total_cores: u64,
    pub rm_address: Option<String>,
    pub history_address: Option<String>,
    pub daemons: Vec<DaemonRecord>,
    pub heartbeat_interval_ms: u64,
    pub node_timeout_ms: u64,
    pub kill_grace_ms: u64,
    pub remote_exec: String,
    pub provision_ms: Option<u64>,
    pub teardown_ms: Option<u64>,
}

impl ClusterState {
    pub fn load(path: &Path) -> Result<ClusterState> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::ClusterUnavailable(format!("no cluster state at {}", path.display())),
            _ => Error::PathIo { path: path.into(), source: e },
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self) -> Result<()> {
        write_atomic(&self.state_file(), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn state_file(&self) -> PathBuf {
        self.plan.state_file()
    }

    pub fn staging(&self) -> &Path {
        &self.plan.shared_dirs.staging
    }

    /// `<root>/<job_id>` on `host`.
    pub fn host_job_dir(&self, host: &str) -> PathBuf {
        self.host_roots
            .get(host)
            .unwrap_or(&self.plan.local_root)
            .join(&self.job_id)
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.plan.logs_dir()
    }
}
