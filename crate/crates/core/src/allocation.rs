//! Batch-scheduler allocations, daemon role placement and the local/shared
//! directory layout of an ephemeral cluster.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostSlots {
    pub hostname: String,
    pub slots: u32,
}

/// Hosts in scheduler order, one entry per distinct hostname.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeAllocation {
    hosts: Vec<HostSlots>,
    total_cores: u64,
}

impl NodeAllocation {
    /// Builds an allocation from (hostname, slots) pairs, merging repeated
    /// hostnames into their first position.
    pub fn from_entries<I, S>(entries: I) -> Result<NodeAllocation>
    where
        I: IntoIterator<Item = (S, u32)>,
        S: Into<String>,
    {
        let mut hosts: Vec<HostSlots> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        for (name, slots) in entries {
            let hostname = name.into();
            if slots == 0 {
                return Err(Error::MalformedEntry {
                    entry: hostname,
                    reason: "slot count must be positive".into(),
                });
            }
            match index.get(&hostname) {
                Some(&i) => hosts[i].slots += slots,
                None => {
                    index.insert(hostname.clone(), hosts.len());
                    hosts.push(HostSlots { hostname, slots });
                }
            }
        }
        if hosts.is_empty() {
            return Err(Error::EmptyAllocation);
        }
        let total_cores = hosts.iter().map(|h| u64::from(h.slots)).sum();
        Ok(NodeAllocation { hosts, total_cores })
    }

    /// `n` simulated hosts on this machine, named `local0`, `local1`, ...
    pub fn local(n: usize, slots: u32) -> Result<NodeAllocation> {
        NodeAllocation::from_entries((0..n).map(|i| (format!("local{i}"), slots)))
    }

    pub fn hosts(&self) -> &[HostSlots] {
        &self.hosts
    }

    pub fn hostnames(&self) -> impl Iterator<Item = &str> {
        self.hosts.iter().map(|h| h.hostname.as_str())
    }

    pub fn total_cores(&self) -> u64 {
        self.total_cores
    }

    pub fn len(&self) -> usize {
        self.hosts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hosts.is_empty()
    }

    pub fn slots_of(&self, host: &str) -> Option<u32> {
        self.hosts.iter().find(|h| h.hostname == host).map(|h| h.slots)
    }

    /// Hostfile text that [`parse_hostfile`] reads back to an equal allocation.
    pub fn to_hostfile(&self) -> String {
        let mut out = String::new();
        for h in &self.hosts {
            let _ = writeln!(out, "{} {}", h.hostname, h.slots);
        }
        out
    }
}

/// Parses newline-separated `hostname` or `hostname <slots>` entries.
///
/// Bare repeats count one slot each, explicit counts add up, and hosts keep
/// the order in which they first appear. Lines starting with `#` are comments.
pub fn parse_hostfile(text: &str) -> Result<NodeAllocation> {
    let mut entries = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let host = fields.next().unwrap_or_default();
        let slots = match fields.next() {
            None => 1,
            Some(s) => parse_slots(line, s)?,
        };
        if fields.next().is_some() {
            return Err(Error::MalformedEntry {
                entry: line.to_string(),
                reason: "expected `hostname` or `hostname <slots>`".into(),
            });
        }
        entries.push((host.to_string(), slots));
    }
    NodeAllocation::from_entries(entries)
}

fn parse_slots(entry: &str, s: &str) -> Result<u32> {
    match s.parse::<i64>() {
        Ok(n) if n >= 1 && n <= i64::from(u32::MAX) => Ok(n as u32),
        _ => Err(Error::MalformedEntry {
            entry: entry.to_string(),
            reason: format!("slot count {s:?} is not a positive integer"),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerFlavor {
    Lsf,
    Slurm,
}

impl std::str::FromStr for SchedulerFlavor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lsf" => Ok(SchedulerFlavor::Lsf),
            "slurm" => Ok(SchedulerFlavor::Slurm),
            other => Err(Error::InvalidConfig(format!("unknown scheduler flavor {other:?}"))),
        }
    }
}

/// Reads the allocation a batch scheduler exported into the job environment.
pub fn read_env_allocation(
    env: &HashMap<String, String>,
    flavor: SchedulerFlavor,
    cfg: &Config,
) -> Result<NodeAllocation> {
    let get = |name: &str| env.get(name).ok_or_else(|| Error::MissingEnv(name.to_string()));
    match flavor {
        SchedulerFlavor::Lsf => {
            let hosts = get(&cfg.lsf_hosts_var)?;
            NodeAllocation::from_entries(hosts.split_whitespace().map(|h| (h.to_string(), 1)))
        }
        SchedulerFlavor::Slurm => {
            let nodes = expand_nodelist(get(&cfg.slurm_nodelist_var)?)?;
            let tasks = expand_tasks_per_node(get(&cfg.slurm_tasks_var)?, nodes.len())?;
            NodeAllocation::from_entries(nodes.into_iter().zip(tasks))
        }
    }
}

/// Expands a compact nodelist such as `n[01-03,7],gpu[1-2]-ib`.
pub fn expand_nodelist(expr: &str) -> Result<Vec<String>> {
    let malformed = |reason: &str| Error::MalformedEntry {
        entry: expr.to_string(),
        reason: reason.to_string(),
    };
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let bytes = expr.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'[' => depth += 1,
            b']' => depth = depth.checked_sub(1).ok_or_else(|| malformed("unbalanced ']'"))?,
            b',' if depth == 0 => {
                expand_item(&expr[start..i], &mut out).map_err(|r| malformed(&r))?;
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(malformed("unbalanced '['"));
    }
    expand_item(&expr[start..], &mut out).map_err(|r| malformed(&r))?;
    Ok(out)
}

fn expand_item(item: &str, out: &mut Vec<String>) -> std::result::Result<(), String> {
    let item = item.trim();
    if item.is_empty() {
        return Err("empty host name".into());
    }
    let Some(open) = item.find('[') else {
        out.push(item.to_string());
        return Ok(());
    };
    let close = item[open..].find(']').ok_or("unbalanced '['")? + open;
    let prefix = &item[..open];
    let suffix = &item[close + 1..];
    let mut tails = Vec::new();
    if suffix.is_empty() {
        tails.push(String::new());
    } else {
        expand_item_tail(suffix, &mut tails)?;
    }
    for range in item[open + 1..close].split(',') {
        let (lo, hi) = match range.split_once('-') {
            Some((a, b)) => (a.trim(), b.trim()),
            None => (range.trim(), range.trim()),
        };
        let width = lo.len();
        let a: u64 = lo.parse().map_err(|_| format!("bad range bound {lo:?}"))?;
        let b: u64 = hi.parse().map_err(|_| format!("bad range bound {hi:?}"))?;
        if a > b {
            return Err(format!("descending range {range:?}"));
        }
        for n in a..=b {
            for tail in &tails {
                out.push(format!("{prefix}{n:0width$}{tail}"));
            }
        }
    }
    Ok(())
}

// A suffix may contain further bracket groups (`rack[1-2]-n[1-4]`).
fn expand_item_tail(suffix: &str, out: &mut Vec<String>) -> std::result::Result<(), String> {
    if suffix.contains('[') {
        expand_item(suffix, out)
    } else {
        out.push(suffix.to_string());
        Ok(())
    }
}

/// Expands `16(x3),8` style task counts to one count per node.
fn expand_tasks_per_node(expr: &str, nodes: usize) -> Result<Vec<u32>> {
    let malformed = |reason: String| Error::MalformedEntry {
        entry: expr.to_string(),
        reason,
    };
    let mut counts = Vec::new();
    for part in expr.split(',') {
        let part = part.trim();
        let (count, repeat) = match part.split_once("(x") {
            Some((c, r)) => {
                let r = r
                    .strip_suffix(')')
                    .ok_or_else(|| malformed(format!("bad repeat {part:?}")))?;
                (c, r.parse::<usize>().map_err(|_| malformed(format!("bad repeat {part:?}")))?)
            }
            None => (part, 1),
        };
        let n = parse_slots(expr, count)?;
        counts.extend(std::iter::repeat_n(n, repeat));
    }
    match counts.len() {
        1 => Ok(vec![counts[0]; nodes]),
        n if n == nodes => Ok(counts),
        n => Err(malformed(format!("{n} task counts for {nodes} nodes"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ports {
    pub rm_port: u16,
    pub history_port: u16,
    pub nm_base_port: u16,
}

impl Ports {
    pub fn from_config(cfg: &Config) -> Ports {
        Ports {
            rm_port: cfg.rm_port,
            history_port: cfg.history_port,
            nm_base_port: cfg.nm_base_port,
        }
    }

    /// Port reserved for the node agent at `worker_index`.
    pub fn nm_port(&self, worker_index: usize) -> u16 {
        self.nm_base_port.saturating_add(worker_index as u16)
    }
}

/// Where each daemon runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLayout {
    pub rm_host: String,
    pub history_host: String,
    pub worker_hosts: Vec<String>,
    pub ports: Ports,
}

impl ClusterLayout {
    /// Every host of the allocation, daemon hosts first, without duplicates.
    pub fn all_hosts(&self) -> Vec<String> {
        let mut hosts = vec![self.rm_host.clone()];
        if self.history_host != self.rm_host {
            hosts.push(self.history_host.clone());
        }
        for w in &self.worker_hosts {
            if !hosts.contains(w) {
                hosts.push(w.clone());
            }
        }
        hosts
    }
}

/// Resource manager on the first host, history service on the second,
/// node agents on every remaining host.
pub fn assign_roles(alloc: &NodeAllocation, cfg: &Config) -> Result<ClusterLayout> {
    let names: Vec<String> = alloc.hostnames().map(str::to_string).collect();
    let ports = Ports::from_config(cfg);
    if cfg.colocate_daemons {
        // Tiny allocations: daemons share hosts with the node agents.
        let rm_host = names.first().cloned().ok_or(Error::EmptyAllocation)?;
        let history_host = names.get(1).cloned().unwrap_or_else(|| rm_host.clone());
        return Ok(ClusterLayout {
            rm_host,
            history_host,
            worker_hosts: names,
            ports,
        });
    }
    if names.len() < 3 {
        return Err(Error::InsufficientNodes { hosts: names.len(), needed: 3 });
    }
    let mut it = names.into_iter();
    let rm_host = it.next().expect("checked length");
    let history_host = it.next().expect("checked length");
    Ok(ClusterLayout {
        rm_host,
        history_host,
        worker_hosts: it.collect(),
        ports,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalDirs {
    pub am_log: PathBuf,
    pub namenode_log: PathBuf,
    pub rm_log: PathBuf,
    /// Created for layout fidelity only; no HDFS is configured, so nothing writes here.
    pub namenode_data: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedDirs {
    pub staging: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
}

/// Operational directories of one job: daemon logs on node-local storage,
/// staging and job data on the shared filesystem. Every path embeds the job id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectoryPlan {
    pub job_id: String,
    pub hosts: Vec<String>,
    pub local_root: PathBuf,
    pub local_dirs: LocalDirs,
    pub shared_root: PathBuf,
    pub shared_dirs: SharedDirs,
}

impl DirectoryPlan {
    /// `<local_root>/<job_id>`: everything a node owns for this job.
    pub fn local_job_dir(&self) -> PathBuf {
        self.local_root.join(&self.job_id)
    }

    pub fn shared_job_dir(&self) -> PathBuf {
        self.shared_root.join(&self.job_id)
    }

    pub fn history_file(&self) -> PathBuf {
        self.shared_dirs.staging.join("history.ndjson")
    }

    pub fn state_file(&self) -> PathBuf {
        self.shared_dirs.staging.join("cluster.json")
    }

    /// Where container and daemon logs are collected for the user.
    pub fn logs_dir(&self) -> PathBuf {
        self.shared_dirs.output.join("logs")
    }

    pub fn local_paths(&self) -> [&Path; 4] {
        let d = &self.local_dirs;
        [&d.am_log, &d.namenode_log, &d.rm_log, &d.namenode_data]
    }

    pub fn shared_paths(&self) -> [&Path; 3] {
        let d = &self.shared_dirs;
        [&d.staging, &d.input, &d.output]
    }

    /// The same plan with node-local directories moved under `root`; used when
    /// several simulated nodes share one machine.
    pub fn rebase_local(&self, root: &Path) -> DirectoryPlan {
        let job = root.join(&self.job_id);
        DirectoryPlan {
            local_root: root.to_path_buf(),
            local_dirs: local_dirs(&job),
            ..self.clone()
        }
    }

    pub fn create_local_dirs(&self) -> Result<()> {
        for p in self.local_paths() {
            std::fs::create_dir_all(p).map_err(Error::path_io(p))?;
        }
        Ok(())
    }

    pub fn create_shared_dirs(&self) -> Result<()> {
        for p in self.shared_paths() {
            std::fs::create_dir_all(p).map_err(Error::path_io(p))?;
        }
        Ok(())
    }
}

fn local_dirs(job: &Path) -> LocalDirs {
    LocalDirs {
        am_log: job.join("am_log"),
        namenode_log: job.join("namenode_log"),
        rm_log: job.join("rm_log"),
        namenode_data: job.join("namenode_data"),
    }
}

pub fn plan_directories(layout: &ClusterLayout, cfg: &Config, job_id: &str) -> Result<DirectoryPlan> {
    validate_job_id(job_id)?;
    let local_root = lexical_normalize(&cfg.local_root);
    let shared_root = lexical_normalize(&cfg.shared_root);
    if local_root == shared_root {
        return Err(Error::InvalidRoots(format!(
            "local and shared roots are both {}",
            local_root.display()
        )));
    }
    if local_root.starts_with(&shared_root) || shared_root.starts_with(&local_root) {
        return Err(Error::InvalidRoots(format!(
            "{} and {} are nested",
            local_root.display(),
            shared_root.display()
        )));
    }
    let shared_job = shared_root.join(job_id);
    Ok(DirectoryPlan {
        job_id: job_id.to_string(),
        hosts: layout.all_hosts(),
        local_dirs: local_dirs(&local_root.join(job_id)),
        local_root,
        shared_dirs: SharedDirs {
            staging: shared_job.join("staging"),
            input: shared_job.join("input"),
            output: shared_job.join("output"),
        },
        shared_root,
    })
}

fn validate_job_id(job_id: &str) -> Result<()> {
    let ok = !job_id.is_empty()
        && job_id != "."
        && job_id != ".."
        && job_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("job id {job_id:?} is not a safe path component")))
    }
}

fn lexical_normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

/// The scheduler's job id when running inside an allocation, else a
/// timestamp with a random suffix.
pub fn default_job_id(env: &HashMap<String, String>) -> String {
    for var in ["LSB_JOBID", "SLURM_JOB_ID"] {
        if let Some(id) = env.get(var).filter(|v| !v.is_empty()) {
            if validate_job_id(id).is_ok() {
                return id.clone();
            }
        }
    }
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("job{secs}-{:06x}", rand::random::<u32>() & 0xff_ffff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hosts(a: &NodeAllocation) -> Vec<(&str, u32)> {
        a.hosts().iter().map(|h| (h.hostname.as_str(), h.slots)).collect()
    }

    #[test]
    fn hostfile_with_slot_counts() {
        let a = parse_hostfile("n1 16\nn2 16\nn3 16").unwrap();
        assert_eq!(hosts(&a), vec![("n1", 16), ("n2", 16), ("n3", 16)]);
        assert_eq!(a.total_cores(), 48);
    }

    #[test]
    fn hostfile_repeats_aggregate() {
        let a = parse_hostfile("n1\nn1\nn2").unwrap();
        assert_eq!(hosts(&a), vec![("n1", 2), ("n2", 1)]);
        assert_eq!(a.total_cores(), 3);
        let a = parse_hostfile("# lsf\nn2 4\nn1\nn2 4\n\n").unwrap();
        assert_eq!(hosts(&a), vec![("n2", 8), ("n1", 1)]);
    }

    #[test]
    fn hostfile_errors() {
        assert!(matches!(parse_hostfile(""), Err(Error::EmptyAllocation)));
        assert!(matches!(parse_hostfile("  \n\t\n"), Err(Error::EmptyAllocation)));
        assert!(matches!(parse_hostfile("# only\n"), Err(Error::EmptyAllocation)));
        assert!(matches!(parse_hostfile("n1 0"), Err(Error::MalformedEntry { .. })));
        assert!(matches!(parse_hostfile("n1 -4"), Err(Error::MalformedEntry { .. })));
        assert!(matches!(parse_hostfile("n1 x"), Err(Error::MalformedEntry { .. })));
        assert!(matches!(parse_hostfile("n1 2 3"), Err(Error::MalformedEntry { .. })));
    }

    fn env(pairs: &[(&str, &str)]) -> HashMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn lsf_environment() {
        let cfg = Config::default();
        let a = read_env_allocation(&env(&[("LSB_HOSTS", "n1 n1 n2")]), SchedulerFlavor::Lsf, &cfg).unwrap();
        assert_eq!(hosts(&a), vec![("n1", 2), ("n2", 1)]);
        let err = read_env_allocation(&env(&[]), SchedulerFlavor::Lsf, &cfg).unwrap_err();
        assert!(matches!(err, Error::MissingEnv(v) if v == "LSB_HOSTS"));
    }

    #[test]
    fn slurm_environment() {
        let cfg = Config::default();
        let e = env(&[("SLURM_JOB_NODELIST", "n[1-3]"), ("SLURM_TASKS_PER_NODE", "16")]);
        let a = read_env_allocation(&e, SchedulerFlavor::Slurm, &cfg).unwrap();
        assert_eq!(hosts(&a), vec![("n1", 16), ("n2", 16), ("n3", 16)]);

        let e = env(&[("SLURM_JOB_NODELIST", "c[01-02],gpu7"), ("SLURM_TASKS_PER_NODE", "8(x2),4")]);
        let a = read_env_allocation(&e, SchedulerFlavor::Slurm, &cfg).unwrap();
        assert_eq!(hosts(&a), vec![("c01", 8), ("c02", 8), ("gpu7", 4)]);

        let e = env(&[("SLURM_JOB_NODELIST", "n[3-1]"), ("SLURM_TASKS_PER_NODE", "1")]);
        assert!(matches!(
            read_env_allocation(&e, SchedulerFlavor::Slurm, &cfg),
            Err(Error::MalformedEntry { .. })
        ));
        let e = env(&[("SLURM_JOB_NODELIST", "n[1-3]")]);
        assert!(matches!(
            read_env_allocation(&e, SchedulerFlavor::Slurm, &cfg),
            Err(Error::MissingEnv(_))
        ));
    }

    #[test]
    fn nodelist_expansion() {
        assert_eq!(expand_nodelist("a").unwrap(), vec!["a"]);
        assert_eq!(expand_nodelist("n[8-10]").unwrap(), vec!["n8", "n9", "n10"]);
        assert_eq!(expand_nodelist("n[08-10]").unwrap(), vec!["n08", "n09", "n10"]);
        assert_eq!(
            expand_nodelist("r[1-2]-n[1-2]").unwrap(),
            vec!["r1-n1", "r1-n2", "r2-n1", "r2-n2"]
        );
        assert!(expand_nodelist("n[1-2").is_err());
        assert!(expand_nodelist("n1,,n2").is_err());
        assert!(expand_nodelist("n]").is_err());
    }

    #[test]
    fn roles_on_first_two_hosts() {
        let cfg = Config::default();
        let a = parse_hostfile("n1 16\nn2 16\nn3 16\nn4 16").unwrap();
        let l = assign_roles(&a, &cfg).unwrap();
        assert_eq!((l.rm_host.as_str(), l.history_host.as_str()), ("n1", "n2"));
        assert_eq!(l.worker_hosts, vec!["n3", "n4"]);

        let a = parse_hostfile("n1\nn2\nn3").unwrap();
        assert_eq!(assign_roles(&a, &cfg).unwrap().worker_hosts, vec!["n3"]);

        let a = parse_hostfile("n1 16\nn2 16").unwrap();
        assert!(matches!(assign_roles(&a, &cfg), Err(Error::InsufficientNodes { hosts: 2, .. })));
    }

    #[test]
    fn colocated_daemons_for_tiny_allocations() {
        let cfg = Config { colocate_daemons: true, ..Config::default() };
        let a = parse_hostfile("n1\nn2").unwrap();
        let l = assign_roles(&a, &cfg).unwrap();
        assert_eq!(l.worker_hosts, vec!["n1", "n2"]);
        assert_eq!(l.all_hosts(), vec!["n1", "n2"]);
    }

    fn roots(local: &str, shared: &str) -> Config {
        Config {
            local_root: local.into(),
            shared_root: shared.into(),
            ..Config::default()
        }
    }

    fn layout() -> ClusterLayout {
        assign_roles(&parse_hostfile("a\nb\nc").unwrap(), &Config::default()).unwrap()
    }

    #[test]
    fn directory_template() {
        let p = plan_directories(&layout(), &roots("/tmp/fast", "/lustre"), "J7").unwrap();
        assert_eq!(p.shared_dirs.staging, Path::new("/lustre/J7/staging"));
        assert_eq!(p.shared_dirs.input, Path::new("/lustre/J7/input"));
        assert_eq!(p.shared_dirs.output, Path::new("/lustre/J7/output"));
        assert_eq!(p.local_dirs.rm_log, Path::new("/tmp/fast/J7/rm_log"));
        assert_eq!(p.local_dirs.am_log, Path::new("/tmp/fast/J7/am_log"));
        assert_eq!(p.hosts, vec!["a", "b", "c"]);
    }

    #[test]
    fn invalid_roots() {
        for (l, s) in [("/x", "/x"), ("/x/", "/x"), ("/lustre/local", "/lustre"), ("/a", "/a/b")] {
            assert!(
                matches!(plan_directories(&layout(), &roots(l, s), "J"), Err(Error::InvalidRoots(_))),
                "{l} {s}"
            );
        }
        assert!(plan_directories(&layout(), &roots("/a", "/b"), "../x").is_err());
        assert!(plan_directories(&layout(), &roots("/a", "/b"), "").is_err());
    }

    #[test]
    fn rebase_keeps_shared_side() {
        let p = plan_directories(&layout(), &roots("/tmp/fast", "/lustre"), "J7").unwrap();
        let r = p.rebase_local(Path::new("/tmp/fast/local1"));
        assert_eq!(r.local_dirs.rm_log, Path::new("/tmp/fast/local1/J7/rm_log"));
        assert_eq!(r.shared_dirs, p.shared_dirs);
    }

    #[test]
    fn job_id_from_scheduler() {
        assert_eq!(default_job_id(&env(&[("LSB_JOBID", "4242")])), "4242");
        assert_eq!(default_job_id(&env(&[("SLURM_JOB_ID", "77")])), "77");
        let a = default_job_id(&env(&[]));
        assert!(a.starts_with("job"));
    }

    fn hostname() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9-]{0,6}"
    }

    proptest! {
        #[test]
        fn hostfile_roundtrip(entries in proptest::collection::vec((hostname(), 1u32..64), 1..20)) {
            let a = NodeAllocation::from_entries(entries).unwrap();
            prop_assert_eq!(parse_hostfile(&a.to_hostfile()).unwrap(), a);
        }

        #[test]
        fn roles_preserve_host_order(n in 3usize..40) {
            let a = NodeAllocation::local(n, 2).unwrap();
            let l = assign_roles(&a, &Config::default()).unwrap();
            prop_assert_eq!(l.worker_hosts.len(), n - 2);
            let mut order = vec![l.rm_host.clone(), l.history_host.clone()];
            order.extend(l.worker_hosts.iter().cloned());
            prop_assert_eq!(order, a.hostnames().map(str::to_string).collect::<Vec<_>>());
        }

        #[test]
        fn distinct_jobs_get_disjoint_paths(j1 in "[A-Za-z0-9_]{1,8}", j2 in "[A-Za-z0-9_]{1,8}") {
            prop_assume!(j1 != j2);
            let cfg = roots("/tmp/fast", "/lustre");
            let p1 = plan_directories(&layout(), &cfg, &j1).unwrap();
            let p2 = plan_directories(&layout(), &cfg, &j2).unwrap();
            let all = |p: &DirectoryPlan| -> Vec<PathBuf> {
                p.local_paths().iter().chain(p.shared_paths().iter()).map(|x| x.to_path_buf()).collect()
            };
            let (a1, a2) = (all(&p1), all(&p2));
            for x in &a1 {
                prop_assert!(x.to_string_lossy().contains(j1.as_str()));
                for y in &a2 {
                    prop_assert!(!x.starts_with(y) && !y.starts_with(x));
                }
            }
            // local and shared never overlap within one plan
            for l in p1.local_paths() {
                for s in p1.shared_paths() {
                    prop_assert!(!l.starts_with(s) && !s.starts_with(l));
                }
            }
        }
    }
}
