//! Node agent: launches container command lines as child processes in
//! per-container working directories, polls them, enforces the memory lease
//! and reports status changes to the resource manager.

pub mod daemon;
pub mod procfs;

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};

use crate::protocol::{ContainerId, ContainerState, ContainerStatus, DrainSummary, LaunchSpec};

pub use daemon::{run_agent, AgentOptions};

/// Environment variable tagging every process that belongs to one job.
pub const JOB_ENV: &str = "EPHEMYARN_JOB_ID";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KillReason {
    Requested,
    MemoryLimit { rss_mb: u64, limit_mb: u64 },
    Teardown,
}

impl KillReason {
    fn diagnostics(&self) -> String {
        match self {
            KillReason::Requested => "killed on request".into(),
            KillReason::MemoryLimit { rss_mb, limit_mb } => {
                format!("memory limit exceeded: {rss_mb} MB resident, limit {limit_mb} MB")
            }
            KillReason::Teardown => "killed at teardown".into(),
        }
    }
}

#[derive(Debug)]
struct PendingKill {
    reason: KillReason,
    deadline: Instant,
    hard_sent: bool,
}

/// A launched container and its local artifacts.
#[derive(Debug)]
pub struct ContainerRuntime {
    pub spec: LaunchSpec,
    pub state: ContainerState,
    pub exit_code: Option<i32>,
    pub diagnostics: String,
    pub pid: Option<u32>,
    pub workdir: PathBuf,
    pub stdout_path: PathBuf,
    pub stderr_path: PathBuf,
    pub peak_rss_mb: u64,
    child: Option<Child>,
    kill: Option<PendingKill>,
}

impl ContainerRuntime {
    pub fn id(&self) -> &ContainerId {
        &self.spec.container_id
    }

    pub fn status(&self) -> ContainerStatus {
        ContainerStatus {
            container_id: self.spec.container_id.clone(),
            state: self.state,
            exit_code: self.exit_code,
            diagnostics: self.diagnostics.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgentDirs {
    /// `<local_root>/<job_id>` on this node.
    pub job_dir: PathBuf,
    /// Shared staging directory exported to containers as `SHARED_STAGING`.
    pub shared_staging: Option<PathBuf>,
    /// Shared directory receiving a copy of each container's stdout/stderr.
    pub log_dir: Option<PathBuf>,
}

impl AgentDirs {
    pub fn containers_dir(&self) -> PathBuf {
        self.job_dir.join("containers")
    }

    /// Application-master containers run under the AM log directory.
    pub fn am_dir(&self) -> PathBuf {
        self.job_dir.join("am_log")
    }
}

pub struct NodeAgent {
    pub host: String,
    dirs: AgentDirs,
    job_id: Option<String>,
    kill_grace: Duration,
    runtimes: BTreeMap<ContainerId, ContainerRuntime>,
}

impl NodeAgent {
    pub fn new(host: impl Into<String>, dirs: AgentDirs, kill_grace: Duration) -> NodeAgent {
        NodeAgent {
            host: host.into(),
            dirs,
            job_id: None,
            kill_grace,
            runtimes: BTreeMap::new(),
        }
    }

    /// Tags launched containers with the job id so a sweep can find strays.
    pub fn with_job_id(mut self, job_id: impl Into<String>) -> NodeAgent {
        self.job_id = Some(job_id.into());
        self
    }

    pub fn dirs(&self) -> &AgentDirs {
        &self.dirs
    }

    pub fn runtime(&self, id: &ContainerId) -> Option<&ContainerRuntime> {
        self.runtimes.get(id)
    }

    pub fn runtimes(&self) -> impl Iterator<Item = &ContainerRuntime> {
        self.runtimes.values()
    }

    pub fn running(&self) -> usize {
        self.runtimes.values().filter(|r| !r.state.is_terminal()).count()
    }

    /// Starts `spec.command` under `sh -c` in a fresh working directory.
    /// Launch problems do not error: they yield a failed container with diagnostics.
    pub fn launch_container(&mut self, spec: LaunchSpec) -> ContainerStatus {
        let id = spec.container_id.clone();
        if let Some(existing) = self.runtimes.get(&id) {
            return existing.status();
        }
        let is_am = spec.env.get("CONTAINER_ROLE").map(String::as_str) == Some("am");
        let parent = if is_am { self.dirs.am_dir() } else { self.dirs.containers_dir() };
        let workdir = parent.join(id.to_string());
        let stdout_path = workdir.join("stdout");
        let stderr_path = workdir.join("stderr");
        let mut rt = ContainerRuntime {
            spec,
            state: ContainerState::Launching,
            exit_code: None,
            diagnostics: String::new(),
            pid: None,
            workdir,
            stdout_path,
            stderr_path,
            peak_rss_mb: 0,
            child: None,
            kill: None,
        };
        match self.spawn(&rt) {
            Ok(child) => {
                info!("{} started: {}", id, rt.spec.command);
                rt.pid = Some(child.id());
                rt.child = Some(child);
                rt.state = ContainerState::Running;
            }
            Err(e) => {
                warn!("{id} failed to launch: {e}");
                rt.state = ContainerState::Failed;
                rt.exit_code = Some(127);
                rt.diagnostics = format!("launch failed: {e}");
                self.collect_logs(&rt);
            }
        }
        let status = rt.status();
        self.runtimes.insert(id, rt);
        status
    }

    fn spawn(&self, rt: &ContainerRuntime) -> std::io::Result<Child> {
        fs::create_dir_all(&rt.workdir)?;
        let stdout = File::create(&rt.stdout_path)?;
        let stderr = File::create(&rt.stderr_path)?;
        let id = &rt.spec.container_id;
        let mut cmd = Command::new("/bin/sh");
        cmd.arg("-c")
            .arg(&rt.spec.command)
            .current_dir(&rt.workdir)
            .envs(&rt.spec.env)
            .env("CONTAINER_ID", id.to_string())
            .env("APP_ID", id.app_id.to_string())
            .env("LOCAL_DIR", &rt.workdir)
            .env("NM_HOST", &self.host)
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .process_group(0);
        if let Some(staging) = &self.dirs.shared_staging {
            cmd.env("SHARED_STAGING", staging);
        }
        if let Some(job) = &self.job_id {
            cmd.env(JOB_ENV, job);
        }
        // SAFETY: prctl is async-signal-safe; the child dies with the agent thread.
        unsafe {
            cmd.pre_exec(|| {
                libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL);
                Ok(())
            });
        }
        cmd.spawn()
    }

    /// Asks a running container to stop; escalates to a hard kill after the grace period.
    pub fn kill_container(&mut self, id: &ContainerId, reason: KillReason) {
        let grace = self.kill_grace;
        if let Some(rt) = self.runtimes.get_mut(id) {
            request_kill(rt, reason, grace);
        }
    }

    /// Reaps exited children, enforces memory limits and escalates overdue
    /// kills. Returns the containers whose state changed to terminal.
    pub fn monitor_tick(&mut self) -> Vec<ContainerStatus> {
        let groups: HashSet<i32> = self
            .runtimes
            .values()
            .filter(|r| !r.state.is_terminal())
            .filter_map(|r| r.pid.map(|p| p as i32))
            .collect();
        let rss = procfs::group_rss_bytes(&groups);
        let grace = self.kill_grace;
        let mut finished = Vec::new();
        for rt in self.runtimes.values_mut().filter(|r| !r.state.is_terminal()) {
            let Some(child) = rt.child.as_mut() else { continue };
            match child.try_wait() {
                Ok(Some(status)) => {
                    finish(rt, status);
                    finished.push(rt.spec.container_id.clone());
                    continue;
                }
                Ok(None) => {}
                Err(e) => warn!("{}: wait failed: {e}", rt.spec.container_id),
            }
            let pgid = rt.pid.unwrap_or(0) as i32;
            let rss_mb = rss.get(&pgid).copied().unwrap_or(0) / (1024 * 1024);
            rt.peak_rss_mb = rt.peak_rss_mb.max(rss_mb);
            let limit_mb = rt.spec.resource.memory_mb;
            if rt.kill.is_none() && limit_mb > 0 && rss_mb > limit_mb {
                warn!("{} uses {rss_mb} MB, over its {limit_mb} MB lease", rt.spec.container_id);
                request_kill(rt, KillReason::MemoryLimit { rss_mb, limit_mb }, grace);
            }
            if let Some(k) = rt.kill.as_mut() {
                if !k.hard_sent && Instant::now() >= k.deadline {
                    procfs::signal_group(pgid, libc::SIGKILL);
                    k.hard_sent = true;
                }
            }
        }
        let mut out = Vec::with_capacity(finished.len());
        for id in finished {
            let rt = &self.runtimes[&id];
            self.collect_logs(rt);
            out.push(rt.status());
        }
        out
    }

    /// Copies stdout/stderr to the shared log directory, if one is configured.
    fn collect_logs(&self, rt: &ContainerRuntime) {
        let Some(log_dir) = &self.dirs.log_dir else { return };
        let dest = log_dir.join(rt.spec.container_id.app_id.to_string()).join(rt.spec.container_id.to_string());
        if let Err(e) = fs::create_dir_all(&dest) {
            warn!("cannot create {}: {e}", dest.display());
            return;
        }
        for (src, name) in [(&rt.stdout_path, "stdout"), (&rt.stderr_path, "stderr")] {
            if src.exists() {
                if let Err(e) = fs::copy(src, dest.join(name)) {
                    warn!("cannot copy {}: {e}", src.display());
                }
            }
        }
    }

    /// Kills everything still running, waits for it, and removes the
    /// container working directories. Statuses of containers that ended
    /// during the drain are returned alongside the summary.
    pub fn drain_and_stop(&mut self) -> (DrainSummary, Vec<ContainerStatus>) {
        let mut summary = DrainSummary::default();
        let live: Vec<ContainerId> = self
            .runtimes
            .values()
            .filter(|r| !r.state.is_terminal())
            .map(|r| r.spec.container_id.clone())
            .collect();
        for id in &live {
            self.kill_container(id, KillReason::Teardown);
        }
        let mut statuses = Vec::new();
        let give_up = Instant::now() + self.kill_grace + Duration::from_secs(2);
        while self.running() > 0 && Instant::now() < give_up {
            statuses.extend(self.monitor_tick());
            if self.running() > 0 {
                thread::sleep(Duration::from_millis(20));
            }
        }
        for rt in self.runtimes.values_mut().filter(|r| !r.state.is_terminal()) {
            // unreachable in practice: SIGKILL went out at the deadline
            rt.state = ContainerState::Killed;
            rt.exit_code = Some(137);
            rt.diagnostics = "did not exit after SIGKILL".into();
            statuses.push(rt.status());
        }
        summary.killed = live;
        for rt in self.runtimes.values() {
            remove_tree(&rt.workdir, &mut summary);
        }
        for dir in [self.dirs.containers_dir(), self.dirs.am_dir()] {
            if dir.exists() && fs::read_dir(&dir).map(|mut d| d.next().is_none()).unwrap_or(false) {
                let _ = fs::remove_dir(&dir);
            }
        }
        (summary, statuses)
    }
}

fn remove_tree(path: &Path, summary: &mut DrainSummary) {
    if fs::symlink_metadata(path).is_err() {
        return;
    }
    match fs::remove_dir_all(path) {
        Ok(()) => summary.removed.push(path.display().to_string()),
        Err(e) => summary.failures.push((path.display().to_string(), e.to_string())),
    }
}

fn request_kill(rt: &mut ContainerRuntime, reason: KillReason, grace: Duration) {
    if rt.state.is_terminal() || rt.kill.is_some() {
        return;
    }
    if let Some(pid) = rt.pid {
        procfs::signal_group(pid as i32, libc::SIGTERM);
    }
    rt.kill = Some(PendingKill {
        reason,
        deadline: Instant::now() + grace,
        hard_sent: false,
    });
}

fn finish(rt: &mut ContainerRuntime, status: ExitStatus) {
    let code = status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0));
    rt.exit_code = Some(code);
    rt.child = None;
    if let Some(kill) = &rt.kill {
        rt.state = ContainerState::Killed;
        rt.diagnostics = kill.reason.diagnostics();
        return;
    }
    if code == 0 {
        rt.state = ContainerState::Completed;
        return;
    }
    rt.state = ContainerState::Failed;
    let mut diag = match status.signal() {
        Some(sig) => format!("terminated by signal {sig}"),
        None => format!("exited with code {code}"),
    };
    if code == 126 || code == 127 {
        diag.push_str(": command not found or not executable");
    }
    if let Some(tail) = stderr_tail(&rt.stderr_path) {
        diag.push_str("; stderr: ");
        diag.push_str(&tail);
    }
    rt.diagnostics = diag;
}

fn stderr_tail(path: &Path) -> Option<String> {
    let text = fs::read_to_string(path).ok()?;
    let line = text.lines().rev().find(|l| !l.trim().is_empty())?;
    Some(line.chars().take(300).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::AppId;
    use crate::resource::ResourceProfile;

    fn agent(dir: &Path) -> NodeAgent {
        let dirs = AgentDirs {
            job_dir: dir.join("local/J1"),
            shared_staging: Some(dir.join("shared/staging")),
            log_dir: Some(dir.join("shared/logs")),
        };
        NodeAgent::new("n3", dirs, Duration::from_millis(300))
    }

    fn spec(index: u64, command: &str) -> LaunchSpec {
        LaunchSpec {
            container_id: ContainerId {
                app_id: AppId("application_1_0001".into()),
                index,
            },
            resource: ResourceProfile::new(4096, 1),
            command: command.into(),
            env: BTreeMap::new(),
        }
    }

    fn wait_terminal(agent: &mut NodeAgent, n: usize) -> Vec<ContainerStatus> {
        let deadline = Instant::now() + Duration::from_secs(20);
        let mut out = Vec::new();
        while out.len() < n && Instant::now() < deadline {
            out.extend(agent.monitor_tick());
            thread::sleep(Duration::from_millis(10));
        }
        out
    }

    #[test]
    fn exit_codes_map_to_states() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = agent(dir.path());
        assert_eq!(a.launch_container(spec(1, "true")).state, ContainerState::Running);
        a.launch_container(spec(2, "false"));
        a.launch_container(spec(3, "/nonexistent"));
        let mut done = wait_terminal(&mut a, 3);
        done.sort_by_key(|s| s.container_id.index);
        assert_eq!((done[0].state, done[0].exit_code), (ContainerState::Completed, Some(0)));
        assert_eq!((done[1].state, done[1].exit_code), (ContainerState::Failed, Some(1)));
        assert_eq!(done[2].state, ContainerState::Failed);
        assert_eq!(done[2].exit_code, Some(127));
        assert!(done[2].diagnostics.contains("not found"), "{}", done[2].diagnostics);
        // terminal states are reported once
        assert!(a.monitor_tick().is_empty());
    }

    #[test]
    fn output_captured_byte_exact_and_env_set() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = agent(dir.path()).with_job_id("J1");
        let mut s = spec(4, "printf 'hello\\n\\tworld' ; printf '%s|%s|%s' \"$CONTAINER_ID\" \"$APP_ID\" \"$EPHEMYARN_JOB_ID\" >&2");
        s.env.insert("EXTRA".into(), "x".into());
        a.launch_container(s);
        wait_terminal(&mut a, 1);
        let rt = a.runtimes().next().unwrap();
        assert_eq!(fs::read(&rt.stdout_path).unwrap(), b"hello\n\tworld");
        assert_eq!(
            fs::read_to_string(&rt.stderr_path).unwrap(),
            "container_1_0001_000004|application_1_0001|J1"
        );
        // logs outlive the container and are copied to the shared log dir
        let copied = dir
            .path()
            .join("shared/logs/application_1_0001/container_1_0001_000004/stdout");
        assert_eq!(fs::read(copied).unwrap(), b"hello\n\tworld");
        assert!(rt.workdir.exists());
    }

    #[test]
    fn no_children_no_statuses() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = agent(dir.path());
        assert!(a.monitor_tick().is_empty());
        let (summary, statuses) = a.drain_and_stop();
        assert!(summary.clean() && summary.killed.is_empty() && statuses.is_empty());
    }

    #[test]
    fn memory_hog_is_killed() {
        if Command::new("python3").arg("-c").arg("pass").status().is_err() {
            eprintln!("python3 unavailable; skipping");
            return;
        }
        let dir = tempfile::tempdir().unwrap();
        let mut a = agent(dir.path());
        let mut s = spec(5, "python3 -c 'import time; x = bytearray(200 * 1024 * 1024); time.sleep(30)'");
        s.resource.memory_mb = 64;
        a.launch_container(s);
        let done = wait_terminal(&mut a, 1);
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].state, ContainerState::Killed);
        assert!(done[0].diagnostics.contains("memory limit exceeded"), "{}", done[0].diagnostics);
    }

    #[test]
    fn drain_kills_and_removes_workdirs() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = agent(dir.path());
        a.launch_container(spec(6, "sleep 30"));
        a.launch_container(spec(7, "trap '' TERM; sleep 30"));
        let pids: Vec<i32> = a.runtimes().map(|r| r.pid.unwrap() as i32).collect();
        let (summary, statuses) = a.drain_and_stop();
        assert_eq!(summary.killed.len(), 2);
        assert_eq!(statuses.len(), 2);
        assert!(statuses.iter().all(|s| s.state == ContainerState::Killed));
        assert!(summary.clean(), "{:?}", summary.failures);
        assert!(a.runtimes().all(|r| !r.workdir.exists()));
        assert!(!a.dirs().containers_dir().exists());
        thread::sleep(Duration::from_millis(50));
        for pid in pids {
            assert!(!procfs::is_alive(pid));
        }
    }

    #[test]
    fn unremovable_workdir_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = agent(dir.path());
        a.launch_container(spec(8, "true"));
        wait_terminal(&mut a, 1);
        let workdir = a.runtimes().next().unwrap().workdir.clone();
        let parent = workdir.parent().unwrap().to_path_buf();
        let root = unsafe { libc::geteuid() } == 0;
        if root {
            // root ignores permission bits; swap the directory for a dangling
            // entry remove_dir_all refuses instead
            fs::remove_dir_all(&workdir).unwrap();
            fs::write(&workdir, b"not a directory").unwrap();
        } else {
            let mut perm = fs::metadata(&parent).unwrap().permissions();
            std::os::unix::fs::PermissionsExt::set_mode(&mut perm, 0o555);
            fs::set_permissions(&parent, perm).unwrap();
        }
        let (summary, _) = a.drain_and_stop();
        if !root {
            let mut perm = fs::metadata(&parent).unwrap().permissions();
            std::os::unix::fs::PermissionsExt::set_mode(&mut perm, 0o755);
            fs::set_permissions(&parent, perm).unwrap();
        }
        assert!(!summary.clean());
        assert_eq!(summary.failures[0].0, workdir.display().to_string());
    }
}
