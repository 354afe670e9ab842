//! Cluster configuration.
//!
//! The configuration file is flat `key = value` text. Keys that have a
//! Hadoop/YARN equivalent use the Hadoop name so operators can carry
//! settings over unchanged; the remaining keys live under `ephemyarn.`.
//! Unknown keys are rejected so typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resource::ResourceProfile;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "EPHEMYARN_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    /// Per-node capacity advertised by each node agent.
    pub node_capacity: ResourceProfile,
    pub min_alloc_mb: u64,
    pub min_alloc_vcores: u32,
    pub am_resource_mb: u64,
    pub map_memory_mb: u64,
    /// Carried verbatim into task environments as `MAP_JAVA_OPTS`; never interpreted.
    pub map_heap_opt: String,
    /// Defaults to `map_memory_mb` when unset.
    pub reduce_memory_mb: Option<u64>,
    pub heartbeat_interval_ms: u64,
    pub node_timeout_ms: u64,
    pub ready_timeout_ms: u64,
    /// Grace period between the polite and the hard kill of a container.
    pub kill_grace_ms: u64,
    pub max_attempts: u32,
    pub local_root: PathBuf,
    pub shared_root: PathBuf,
    pub rm_port: u16,
    pub history_port: u16,
    pub nm_base_port: u16,
    /// Also run node agents on the two daemon hosts.
    pub colocate_daemons: bool,
    /// Remote launch template for multi-host mode; `{HOST}` and `{COMMAND}` are substituted.
    pub remote_exec: String,
    pub lsf_hosts_var: String,
    pub slurm_nodelist_var: String,
    pub slurm_tasks_var: String,
    /// In-memory budget of a sorting reducer before it spills runs to local disk.
    pub sort_budget_mb: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            node_capacity: ResourceProfile::new(52 * 1024, 16),
            min_alloc_mb: 2048,
            min_alloc_vcores: 1,
            am_resource_mb: 8192,
            map_memory_mb: 4096,
            map_heap_opt: "-Xmx3072m".to_string(),
            reduce_memory_mb: None,
            heartbeat_interval_ms: 100,
            node_timeout_ms: 2000,
            ready_timeout_ms: 30_000,
            kill_grace_ms: 5000,
            max_attempts: 3,
            local_root: std::env::temp_dir().join("ephemyarn").join("local"),
            shared_root: std::env::temp_dir().join("ephemyarn").join("shared"),
            rm_port: 20050,
            history_port: 20060,
            nm_base_port: 20100,
            colocate_daemons: false,
            remote_exec: "ssh -o BatchMode=yes {HOST} {COMMAND}".to_string(),
            lsf_hosts_var: "LSB_HOSTS".to_string(),
            slurm_nodelist_var: "SLURM_JOB_NODELIST".to_string(),
            slurm_tasks_var: "SLURM_TASKS_PER_NODE".to_string(),
            sort_budget_mb: 256,
        }
    }
}

impl Config {
    pub fn reduce_memory_mb(&self) -> u64 {
        self.reduce_memory_mb.unwrap_or(self.map_memory_mb)
    }

    pub fn validate(&self) -> Result<()> {
        let cap = self.node_capacity.memory_mb;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.min_alloc_mb == 0 {
            return bad("minimum allocation must be positive".into());
        }
        if !(self.min_alloc_mb <= self.am_resource_mb && self.am_resource_mb <= cap) {
            return bad(format!(
                "need min_alloc_mb ({}) <= am_resource_mb ({}) <= node memory ({cap})",
                self.min_alloc_mb, self.am_resource_mb
            ));
        }
        if !(self.min_alloc_mb <= self.map_memory_mb && self.map_memory_mb <= cap) {
            return bad(format!(
                "need min_alloc_mb ({}) <= map_memory_mb ({}) <= node memory ({cap})",
                self.min_alloc_mb, self.map_memory_mb
            ));
        }
        let reduce = self.reduce_memory_mb();
        if !(self.min_alloc_mb <= reduce && reduce <= cap) {
            return bad(format!("reduce memory {reduce} MB out of range"));
        }
        if self.node_timeout_ms <= 3 * self.heartbeat_interval_ms {
            return bad(format!(
                "node timeout ({} ms) must exceed three heartbeat intervals ({} ms)",
                self.node_timeout_ms, self.heartbeat_interval_ms
            ));
        }
        if self.heartbeat_interval_ms == 0 {
            return bad("heartbeat interval must be positive".into());
        }
        if self.max_attempts == 0 {
            return bad("max attempts must be at least 1".into());
        }
        Ok(())
    }

    /// Parses `key = value` text on top of the defaults.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (key, value) in parse_key_values(text)? {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(Error::path_io(path))?;
        Config::parse(&text)
    }

    /// Loads `path`, else the file named by `EPHEMYARN_CONFIG`, else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Config> {
        match path {
            Some(p) => Config::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Config::load(Path::new(&p)),
                _ => Ok(Config::default()),
            },
        }
    }

    /// Renders every setting as `key = value` text that [`Config::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            ("yarn.nodemanager.resource.memory-mb", self.node_capacity.memory_mb.to_string()),
            ("yarn.nodemanager.resource.cpu-vcores", self.node_capacity.vcores.to_string()),
            ("yarn.scheduler.minimum-allocation-mb", self.min_alloc_mb.to_string()),
            ("yarn.scheduler.minimum-allocation-vcores", self.min_alloc_vcores.to_string()),
            ("yarn.app.mapreduce.am.resource.mb", self.am_resource_mb.to_string()),
            ("mapreduce.map.memory.mb", self.map_memory_mb.to_string()),
            ("mapreduce.map.java.opts", self.map_heap_opt.clone()),
            ("mapreduce.map.maxattempts", self.max_attempts.to_string()),
            ("ephemyarn.heartbeat.interval-ms", self.heartbeat_interval_ms.to_string()),
            ("ephemyarn.node.timeout-ms", self.node_timeout_ms.to_string()),
            ("ephemyarn.ready.timeout-ms", self.ready_timeout_ms.to_string()),
            ("ephemyarn.kill.grace-ms", self.kill_grace_ms.to_string()),
            ("ephemyarn.local.root", self.local_root.display().to_string()),
            ("ephemyarn.shared.root", self.shared_root.display().to_string()),
            ("ephemyarn.rm.port", self.rm_port.to_string()),
            ("ephemyarn.history.port", self.history_port.to_string()),
            ("ephemyarn.nm.base-port", self.nm_base_port.to_string()),
            ("ephemyarn.colocate-daemons", self.colocate_daemons.to_string()),
            ("ephemyarn.remote-exec", self.remote_exec.clone()),
            ("ephemyarn.env.lsf-hosts", self.lsf_hosts_var.clone()),
            ("ephemyarn.env.slurm-nodelist", self.slurm_nodelist_var.clone()),
            ("ephemyarn.env.slurm-tasks", self.slurm_tasks_var.clone()),
            ("ephemyarn.sort.budget-mb", self.sort_budget_mb.to_string()),
        ];
        if let Some(mb) = self.reduce_memory_mb {
            lines.push(("mapreduce.reduce.memory.mb", mb.to_string()));
        }
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "yarn.nodemanager.resource.memory-mb" => self.node_capacity.memory_mb = parse_mb(key, v)?,
            "yarn.nodemanager.resource.cpu-vcores" => self.node_capacity.vcores = parse_count(key, v)?,
            "yarn.scheduler.minimum-allocation-mb" => self.min_alloc_mb = parse_mb(key, v)?,
            "yarn.scheduler.minimum-allocation-vcores" => self.min_alloc_vcores = parse_count(key, v)?,
            "yarn.app.mapreduce.am.resource.mb" => self.am_resource_mb = parse_mb(key, v)?,
            "mapreduce.map.memory.mb" => self.map_memory_mb = parse_mb(key, v)?,
            "mapreduce.map.java.opts" => self.map_heap_opt = v.to_string(),
            "mapreduce.reduce.memory.mb" => self.reduce_memory_mb = Some(parse_mb(key, v)?),
            "mapreduce.map.maxattempts" => self.max_attempts = parse_count(key, v)?,
            "ephemyarn.heartbeat.interval-ms" => self.heartbeat_interval_ms = parse_u64(key, v)?,
            "ephemyarn.node.timeout-ms" => self.node_timeout_ms = parse_u64(key, v)?,
            "ephemyarn.ready.timeout-ms" => self.ready_timeout_ms = parse_u64(key, v)?,
            "ephemyarn.kill.grace-ms" => self.kill_grace_ms = parse_u64(key, v)?,
            "ephemyarn.local.root" => self.local_root = PathBuf::from(v),
            "ephemyarn.shared.root" => self.shared_root = PathBuf::from(v),
            "ephemyarn.rm.port" => self.rm_port = parse_u64(key, v)?.try_into().map_err(|_| bad_value(key, v))?,
            "ephemyarn.history.port" => {
                self.history_port = parse_u64(key, v)?.try_into().map_err(|_| bad_value(key, v))?
            }
            "ephemyarn.nm.base-port" => {
                self.nm_base_port = parse_u64(key, v)?.try_into().map_err(|_| bad_value(key, v))?
            }
            "ephemyarn.colocate-daemons" => self.colocate_daemons = parse_bool(key, v)?,
            "ephemyarn.remote-exec" => self.remote_exec = v.to_string(),
            "ephemyarn.env.lsf-hosts" => self.lsf_hosts_var = v.to_string(),
            "ephemyarn.env.slurm-nodelist" => self.slurm_nodelist_var = v.to_string(),
            "ephemyarn.env.slurm-tasks" => self.slurm_tasks_var = v.to_string(),
            "ephemyarn.sort.budget-mb" => self.sort_budget_mb = parse_u64(key, v)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

/// Splits flat `key = value` text. `#` starts a comment line; blank lines are skipped.
pub(crate) fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn bad_value(key: &str, v: &str) -> Error {
    Error::InvalidConfig(format!("{key}: cannot parse {v:?}"))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| bad_value(key, v))
}

/// Accepts a bare count or a count followed by a unit word ("1 core").
fn parse_count(key: &str, v: &str) -> Result<u32> {
    let digits: String = v.chars().take_while(|c| c.is_ascii_digit()).collect();
    let rest = v[digits.len()..].trim().to_ascii_lowercase();
    if digits.is_empty() || !(rest.is_empty() || rest.starts_with("core") || rest.starts_with("vcore")) {
        return Err(bad_value(key, v));
    }
    digits.parse().map_err(|_| bad_value(key, v))
}

/// Memory in MB; bare numbers are MB, `GB`/`G` and `MB`/`M` suffixes are accepted.
fn parse_mb(key: &str, v: &str) -> Result<u64> {
    let lower = v.to_ascii_lowercase().replace(' ', "");
    let (num, mult) = if let Some(n) = lower.strip_suffix("gb").or_else(|| lower.strip_suffix('g')) {
        (n, 1024)
    } else if let Some(n) = lower.strip_suffix("mb").or_else(|| lower.strip_suffix('m')) {
        (n, 1)
    } else {
        (lower.as_str(), 1)
    };
    num.parse::<u64>().map(|n| n * mult).map_err(|_| bad_value(key, v))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(bad_value(key, v)),
    }
}

/// Renders the subset of settings relevant to a running cluster, for logs and state files.
pub fn describe(cfg: &Config) -> BTreeMap<&'static str, String> {
    BTreeMap::from([
        ("yarn.nodemanager.resource.memory-mb", cfg.node_capacity.memory_mb.to_string()),
        ("yarn.nodemanager.resource.cpu-vcores", cfg.node_capacity.vcores.to_string()),
        ("yarn.scheduler.minimum-allocation-mb", cfg.min_alloc_mb.to_string()),
        ("yarn.scheduler.minimum-allocation-vcores", cfg.min_alloc_vcores.to_string()),
        ("yarn.app.mapreduce.am.resource.mb", cfg.am_resource_mb.to_string()),
        ("mapreduce.map.memory.mb", cfg.map_memory_mb.to_string()),
        ("mapreduce.map.java.opts", cfg.map_heap_opt.clone()),
    ])
}
