//! MapReduce application master.
//!
//! Runs map tasks, then (after every map has succeeded) reduce tasks, each
//! in its own container. Map output reaches reducers through partition
//! files under the shared staging directory. Final output is written to a
//! hidden sibling of the output directory and renamed into place once.

mod jobspec;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};

pub use jobspec::JobSpec;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::protocol::{Ask, AppId, AppState, Client, ContainerId, ContainerState, ContainerStatus, Message, TaskLaunch};
use crate::resource::{normalize_request, ResourceProfile};
use crate::util::{now_ms, shell_quote};

/// Environment variable carrying the resource manager address into the AM container.
pub const RM_ADDRESS_ENV: &str = "EPHEMYARN_RM_ADDRESS";
pub const EVENTS_FILE: &str = "am_events.ndjson";
pub const COUNTERS_DIR: &str = "_counters";
pub const READS_DIR: &str = "_reads";
pub const TEMP_DIR: &str = "_temporary";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Map,
    Reduce,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Map => "map",
            Phase::Reduce => "reduce",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskId {
    pub phase: Phase,
    pub index: u32,
    pub attempt: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptState {
    Pending,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAttempt {
    pub task_id: TaskId,
    pub container: ContainerId,
    pub state: AttemptState,
}

/// One line of the AM event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmEvent {
    pub seq: u64,
    pub t_ms: u64,
    pub event: String,
    #[serde(default)]
    pub phase: Option<Phase>,
    #[serde(default)]
    pub index: Option<u32>,
    #[serde(default)]
    pub attempt: Option<u32>,
    #[serde(default)]
    pub container: Option<String>,
    #[serde(default)]
    pub detail: String,
}

/// Reads an AM event log back.
pub fn read_events(path: &Path) -> Result<Vec<AmEvent>> {
    let text = fs::read_to_string(path).map_err(Error::path_io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

struct EventLog {
    path: Option<PathBuf>,
    seq: u64,
    events: Vec<AmEvent>,
}

impl EventLog {
    fn record(&mut self, event: &str, task: Option<TaskId>, container: Option<&ContainerId>, detail: String) {
        let ev = AmEvent {
            seq: self.seq,
            t_ms: now_ms(),
            event: event.to_string(),
            phase: task.map(|t| t.phase),
            index: task.map(|t| t.index),
            attempt: task.map(|t| t.attempt),
            container: container.map(|c| c.to_string()),
            detail,
        };
        self.seq += 1;
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&ev).expect("event serializes");
            let res = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| writeln!(f, "{line}"));
            if let Err(e) = res {
                warn!("cannot append to {}: {e}", path.display());
            }
        }
        self.events.push(ev);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobResult {
    pub succeeded: bool,
    pub diagnostics: String,
    pub phase_ms: BTreeMap<String, u64>,
    pub counters: BTreeMap<String, u64>,
    pub attempts: Vec<TaskAttempt>,
}

/// Where a job's directories resolve to.
#[derive(Debug, Clone)]
pub struct JobPaths {
    pub staging: PathBuf,
    pub staged_output: PathBuf,
    pub output: PathBuf,
    pub map_inputs: Vec<Option<PathBuf>>,
}

impl JobPaths {
    pub fn resolve(spec: &JobSpec, app_id: &AppId, shared_staging: Option<&Path>) -> Result<JobPaths> {
        let staging = match (&spec.staging_dir, shared_staging) {
            (Some(p), _) => p.clone(),
            (None, Some(s)) => s.join(&app_id.0),
            (None, None) => {
                return Err(Error::InvalidJobSpec(
                    "staging_dir unset and no shared staging directory available".into(),
                ))
            }
        };
        let output = spec.output_dir.clone();
        let base = output.file_name().expect("validated").to_string_lossy().into_owned();
        let staged_output = output.with_file_name(format!(".{base}.{}.staged", app_id.0));
        let map_inputs = match &spec.input_dir {
            None => vec![None; spec.num_mappers as usize],
            Some(dir) => {
                let shards = list_shards(dir)?;
                if shards.len() != spec.num_mappers as usize {
                    return Err(Error::InvalidJobSpec(format!(
                        "{} holds {} shard file(s) but num_mappers = {}",
                        dir.display(),
                        shards.len(),
                        spec.num_mappers
                    )));
                }
                shards.into_iter().map(Some).collect()
            }
        };
        Ok(JobPaths {
            staging,
            staged_output,
            output,
            map_inputs,
        })
    }

    pub fn events_file(&self) -> PathBuf {
        self.staging.join(EVENTS_FILE)
    }
}

/// Data files of `dir` in shard order: hidden and `_`-prefixed entries are
/// skipped, and names are ordered by their trailing number, then by name.
pub fn list_shards(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(dir.into()),
        _ => Error::PathIo { path: dir.into(), source: e },
    })?;
    let mut files = Vec::new();
    for entry in rd {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') || name.starts_with('_') || !entry.file_type()?.is_file() {
            continue;
        }
        files.push((shard_number(&name), name, entry.path()));
    }
    files.sort();
    Ok(files.into_iter().map(|(_, _, p)| p).collect())
}

fn shard_number(name: &str) -> u64 {
    let digits: String = name.chars().rev().take_while(|c| c.is_ascii_digit()).collect();
    digits.chars().rev().collect::<String>().parse().unwrap_or(u64::MAX)
}

/// Renames `staged` to `final_` so the output appears at once or not at all.
/// Refuses when any task failed and never replaces an existing directory.
pub fn commit_output(staged: &Path, final_: &Path, all_tasks_succeeded: bool) -> Result<()> {
    if !all_tasks_succeeded {
        return Err(Error::CommitRefused("not every task succeeded".into()));
    }
    if !staged.is_dir() {
        return Err(Error::CommitRefused(format!("{} does not exist", staged.display())));
    }
    let tmp = staged.join(TEMP_DIR);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(Error::path_io(&tmp))?;
    }
    rename_noreplace(staged, final_)
}

fn rename_noreplace(from: &Path, to: &Path) -> Result<()> {
    use std::ffi::CString;
    use std::os::unix::ffi::OsStrExt;
    let c_from = CString::new(from.as_os_str().as_bytes()).map_err(|_| Error::InvalidJobSpec("NUL in path".into()))?;
    let c_to = CString::new(to.as_os_str().as_bytes()).map_err(|_| Error::InvalidJobSpec("NUL in path".into()))?;
    // SAFETY: both strings are valid NUL-terminated paths.
    let rc = unsafe {
        libc::renameat2(
            libc::AT_FDCWD,
            c_from.as_ptr(),
            libc::AT_FDCWD,
            c_to.as_ptr(),
            libc::RENAME_NOREPLACE,
        )
    };
    if rc == 0 {
        return Ok(());
    }
    let err = std::io::Error::last_os_error();
    match err.raw_os_error() {
        Some(libc::EEXIST) | Some(libc::ENOTEMPTY) => Err(Error::OutputExists(to.into())),
        Some(libc::EINVAL) | Some(libc::ENOSYS) => {
            // filesystem without RENAME_NOREPLACE support
            if to.exists() {
                return Err(Error::OutputExists(to.into()));
            }
            fs::rename(from, to).map_err(Error::path_io(to))
        }
        _ => Err(Error::PathIo { path: to.into(), source: err }),
    }
}

/// Substitutes `{TASK_INDEX}`, `{INPUT}`, `{STAGING}`, `{OUTPUT}` and
/// `{NUM_REDUCERS}`; paths are shell-quoted.
pub fn instantiate(template: &str, index: u32, input: Option<&Path>, staging: &Path, output: &Path, reducers: u32) -> String {
    let q = |p: &Path| shell_quote(&p.to_string_lossy());
    template
        .replace("{TASK_INDEX}", &index.to_string())
        .replace("{INPUT}", &input.map(q).unwrap_or_else(|| "''".into()))
        .replace("{STAGING}", &q(staging))
        .replace("{OUTPUT}", &q(output))
        .replace("{NUM_REDUCERS}", &reducers.to_string())
}

#[derive(Debug, Default, Clone)]
struct TaskSlot {
    attempts: u32,
    running: Option<ContainerId>,
    done: bool,
    last_failure: String,
}

pub struct AppMaster {
    client: Client,
    app_id: AppId,
    cfg: Config,
    spec: JobSpec,
    paths: JobPaths,
    events: EventLog,
    attempts: Vec<TaskAttempt>,
    /// How long the negotiator may stay unreachable before the job fails.
    rm_patience: Duration,
}

impl AppMaster {
    pub fn new(client: Client, app_id: AppId, cfg: Config, spec: JobSpec, paths: JobPaths) -> AppMaster {
        let rm_patience = Duration::from_millis(cfg.node_timeout_ms.saturating_mul(3).max(1000));
        AppMaster {
            client,
            app_id,
            cfg,
            spec,
            paths,
            events: EventLog {
                path: None,
                seq: 0,
                events: Vec::new(),
            },
            attempts: Vec::new(),
            rm_patience,
        }
    }

    pub fn events(&self) -> &[AmEvent] {
        &self.events.events
    }

    fn max_attempts(&self) -> u32 {
        self.spec.max_attempts.unwrap_or(self.cfg.max_attempts).max(1)
    }

    fn resources(&self) -> Result<(ResourceProfile, ResourceProfile)> {
        let map = self
            .spec
            .map_resource
            .unwrap_or(ResourceProfile::new(self.cfg.map_memory_mb, 1));
        let reduce = self
            .spec
            .reduce_resource
            .unwrap_or(ResourceProfile::new(self.cfg.reduce_memory_mb(), 1));
        Ok((normalize_request(map, &self.cfg)?, normalize_request(reduce, &self.cfg)?))
    }

    /// Runs the whole job. Errors are returned before any container is
    /// requested when the output already exists or a resource is unsatisfiable.
    pub fn run(&mut self) -> Result<JobResult> {
        if self.paths.output.exists() {
            return Err(Error::OutputExists(self.paths.output.clone()));
        }
        let (map_res, reduce_res) = self.resources()?;
        fs::create_dir_all(&self.paths.staging).map_err(Error::path_io(&self.paths.staging))?;
        self.events.path = Some(self.paths.events_file());
        if self.paths.staged_output.exists() {
            fs::remove_dir_all(&self.paths.staged_output).map_err(Error::path_io(&self.paths.staged_output))?;
        }
        if let Some(parent) = self.paths.staged_output.parent() {
            fs::create_dir_all(parent).map_err(Error::path_io(parent))?;
        }
        fs::create_dir_all(&self.paths.staged_output).map_err(Error::path_io(&self.paths.staged_output))?;
        for sub in [COUNTERS_DIR, READS_DIR] {
            let d = self.paths.staging.join(sub);
            fs::create_dir_all(&d).map_err(Error::path_io(&d))?;
        }

        let mut phase_ms = BTreeMap::new();
        let result = self.run_phases(map_res, reduce_res, &mut phase_ms);
        let counters = sum_counters(&self.paths.staging.join(COUNTERS_DIR));
        match result {
            Ok(()) => Ok(JobResult {
                succeeded: true,
                diagnostics: String::new(),
                phase_ms,
                counters,
                attempts: self.attempts.clone(),
            }),
            Err(e) => {
                let _ = fs::remove_dir_all(&self.paths.staged_output);
                self.events.record("job_failed", None, None, e.to_string());
                Ok(JobResult {
                    succeeded: false,
                    diagnostics: e.to_string(),
                    phase_ms,
                    counters,
                    attempts: self.attempts.clone(),
                })
            }
        }
    }

    fn run_phases(&mut self, map_res: ResourceProfile, reduce_res: ResourceProfile, phase_ms: &mut BTreeMap<String, u64>) -> Result<()> {
        let t = Instant::now();
        self.run_phase(Phase::Map, self.spec.num_mappers, map_res)?;
        phase_ms.insert("map".to_string(), t.elapsed().as_millis() as u64);
        if self.spec.num_reducers > 0 {
            let t = Instant::now();
            self.run_phase(Phase::Reduce, self.spec.num_reducers, reduce_res)?;
            phase_ms.insert("reduce".to_string(), t.elapsed().as_millis() as u64);
        }
        let t = Instant::now();
        commit_output(&self.paths.staged_output, &self.paths.output, true)?;
        phase_ms.insert("commit".to_string(), t.elapsed().as_millis() as u64);
        self.events.record("commit", None, None, self.paths.output.display().to_string());
        Ok(())
    }

    fn allocate(&mut self, asks: Vec<Ask>, launches: Vec<TaskLaunch>, releases: Vec<ContainerId>) -> Result<(Vec<crate::protocol::ContainerGrant>, Vec<ContainerStatus>, AppState)> {
        let msg = Message::AllocateRequest {
            app_id: self.app_id.clone(),
            asks,
            launches,
            releases,
        };
        let started = Instant::now();
        loop {
            match self.client.call(&msg) {
                Ok(Message::AllocateResponse {
                    allocated,
                    completed,
                    app_state,
                }) => return Ok((allocated, completed, app_state)),
                Ok(other) => return Err(Error::Protocol(format!("unexpected reply {other:?}"))),
                Err(e @ (Error::Io(_) | Error::Protocol(_))) => {
                    if started.elapsed() > self.rm_patience {
                        return Err(Error::JobFailed(format!("resource manager unreachable: {e}")));
                    }
                    thread::sleep(Duration::from_millis(self.cfg.heartbeat_interval_ms.max(10)));
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn task_command(&self, phase: Phase, index: u32) -> String {
        let p = &self.paths;
        match phase {
            Phase::Map => instantiate(
                &self.spec.map_command,
                index,
                p.map_inputs[index as usize].as_deref(),
                &p.staging,
                &p.staged_output,
                self.spec.num_reducers,
            ),
            Phase::Reduce => instantiate(
                &self.spec.reduce_command,
                index,
                Some(&p.staging),
                &p.staging,
                &p.staged_output,
                self.spec.num_reducers,
            ),
        }
    }

    fn task_env(&self, task: TaskId) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("TASK_PHASE".to_string(), task.phase.to_string()),
            ("TASK_INDEX".to_string(), task.index.to_string()),
            ("TASK_ATTEMPT".to_string(), task.attempt.to_string()),
            ("NUM_MAPPERS".to_string(), self.spec.num_mappers.to_string()),
            ("NUM_REDUCERS".to_string(), self.spec.num_reducers.to_string()),
            ("MAP_JAVA_OPTS".to_string(), self.cfg.map_heap_opt.clone()),
            ("JOB_STAGING".to_string(), self.paths.staging.display().to_string()),
            ("JOB_OUTPUT".to_string(), self.paths.staged_output.display().to_string()),
            ("EPHEMYARN_SORT_BUDGET_MB".to_string(), self.cfg.sort_budget_mb.to_string()),
        ])
    }

    /// Requests `count` containers of `resource` and runs one task per
    /// container until every task has succeeded once.
    fn run_phase(&mut self, phase: Phase, count: u32, resource: ResourceProfile) -> Result<()> {
        if count == 0 {
            return Ok(());
        }
        info!("{}: {phase} phase, {count} task(s) of {resource}", self.app_id);
        self.events.record("phase_start", None, None, format!("{phase} {count}"));
        let mut tasks = vec![TaskSlot::default(); count as usize];
        let mut owner: HashMap<ContainerId, u32> = HashMap::new();
        let mut outstanding: u32 = 0;
        let mut launches = Vec::new();
        let mut releases = Vec::new();
        let max_attempts = self.max_attempts();
        let tick = Duration::from_millis(self.cfg.heartbeat_interval_ms.max(10));
        loop {
            let unassigned = tasks.iter().filter(|t| !t.done && t.running.is_none()).count() as u32;
            let mut asks = Vec::new();
            if unassigned > outstanding {
                asks.push(Ask {
                    resource,
                    count: unassigned - outstanding,
                });
                self.events.record("ask", None, None, format!("{phase} {}", unassigned - outstanding));
                outstanding = unassigned;
            }
            let (grants, completed, state) =
                self.allocate(asks, std::mem::take(&mut launches), std::mem::take(&mut releases))?;
            if state.is_terminal() {
                return Err(Error::JobFailed(format!("application is {state:?} at the resource manager")));
            }
            for status in completed {
                let Some(index) = owner.remove(&status.container_id) else { continue };
                let slot = &mut tasks[index as usize];
                slot.running = None;
                let task = TaskId {
                    phase,
                    index,
                    attempt: slot.attempts,
                };
                let ok = status.state == ContainerState::Completed && status.exit_code == Some(0);
                self.set_attempt_state(task, if ok { AttemptState::Succeeded } else { AttemptState::Failed });
                if ok {
                    slot.done = true;
                    self.events.record("success", Some(task), Some(&status.container_id), String::new());
                    continue;
                }
                let why = format!(
                    "{:?} exit {:?}: {}",
                    status.state,
                    status.exit_code,
                    status.diagnostics
                );
                warn!("{phase} task {index} attempt {} failed: {why}", slot.attempts);
                self.events.record("failure", Some(task), Some(&status.container_id), why.clone());
                slot.last_failure = why;
                if slot.attempts >= max_attempts {
                    let diag = format!(
                        "{phase} task {index} failed {} attempt(s); last: {}",
                        slot.attempts, slot.last_failure
                    );
                    releases.extend(owner.keys().cloned());
                    let _ = self.allocate(Vec::new(), Vec::new(), std::mem::take(&mut releases));
                    return Err(Error::JobFailed(diag));
                }
            }
            for grant in grants {
                outstanding = outstanding.saturating_sub(1);
                let Some(index) = tasks.iter().position(|t| !t.done && t.running.is_none()) else {
                    self.events.record("release", None, Some(&grant.container_id), "surplus".into());
                    releases.push(grant.container_id);
                    continue;
                };
                let slot = &mut tasks[index];
                slot.attempts += 1;
                slot.running = Some(grant.container_id.clone());
                let task = TaskId {
                    phase,
                    index: index as u32,
                    attempt: slot.attempts,
                };
                owner.insert(grant.container_id.clone(), index as u32);
                launches.push(TaskLaunch {
                    container_id: grant.container_id.clone(),
                    command: self.task_command(phase, index as u32),
                    env: self.task_env(task),
                });
                self.attempts.push(TaskAttempt {
                    task_id: task,
                    container: grant.container_id.clone(),
                    state: AttemptState::Running,
                });
                self.events
                    .record("launch", Some(task), Some(&grant.container_id), grant.node.clone());
            }
            if tasks.iter().all(|t| t.done) {
                if !releases.is_empty() {
                    self.allocate(Vec::new(), Vec::new(), std::mem::take(&mut releases))?;
                }
                self.events.record("phase_end", None, None, phase.to_string());
                return Ok(());
            }
            if launches.is_empty() && releases.is_empty() {
                thread::sleep(tick);
            }
        }
    }

    fn set_attempt_state(&mut self, task: TaskId, state: AttemptState) {
        if let Some(a) = self.attempts.iter_mut().rev().find(|a| a.task_id == task) {
            a.state = state;
        }
    }

    /// Reports the outcome to the resource manager.
    pub fn finish(&mut self, result: &JobResult) -> Result<()> {
        let msg = Message::FinishApplication {
            app_id: self.app_id.clone(),
            succeeded: result.succeeded,
            diagnostics: result.diagnostics.clone(),
            counters: result.counters.clone(),
            phase_ms: result.phase_ms.clone(),
        };
        self.client.call(&msg).map(|_| ())
    }
}

/// Sums every `<name>.json` counter file in `dir`.
pub fn sum_counters(dir: &Path) -> BTreeMap<String, u64> {
    let mut total = BTreeMap::new();
    let Ok(rd) = fs::read_dir(dir) else { return total };
    for entry in rd.flatten() {
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let Ok(text) = fs::read_to_string(&path) else { continue };
        let Ok(map) = serde_json::from_str::<BTreeMap<String, u64>>(&text) else { continue };
        for (k, v) in map {
            *total.entry(k).or_insert(0) += v;
        }
    }
    total
}

/// Entry point of the AM container: reads the jobspec, runs the job and
/// reports the result. Returns the process exit code.
pub fn am_main(job_file: &Path) -> i32 {
    let env = |k: &str| std::env::var(k).map_err(|_| Error::MissingEnv(k.into()));
    let setup = || -> Result<(Client, AppId, Config, JobSpec)> {
        let rm = env(RM_ADDRESS_ENV)?;
        let app = AppId(env("APP_ID")?);
        let cfg = Config::resolve(None)?;
        let spec = JobSpec::load(job_file)?;
        Ok((Client::new(rm), app, cfg, spec))
    };
    let (client, app_id, cfg, spec) = match setup() {
        Ok(v) => v,
        Err(e) => {
            eprintln!("application master cannot start: {e}");
            return 2;
        }
    };
    let staging = std::env::var_os("SHARED_STAGING").map(PathBuf::from);
    let outcome = JobPaths::resolve(&spec, &app_id, staging.as_deref()).and_then(|paths| {
        let mut am = AppMaster::new(client, app_id.clone(), cfg.clone(), spec.clone(), paths);
        let res = am.run();
        let res = res.unwrap_or_else(|e| JobResult {
            succeeded: false,
            diagnostics: e.to_string(),
            phase_ms: BTreeMap::new(),
            counters: BTreeMap::new(),
            attempts: Vec::new(),
        });
        am.finish(&res)?;
        Ok(res)
    });
    match outcome {
        Ok(res) if res.succeeded => {
            info!("{app_id} succeeded");
            0
        }
        Ok(res) => {
            eprintln!("job failed: {}", res.diagnostics);
            1
        }
        Err(e) => {
            eprintln!("job failed: {e}");
            // still try to tell the resource manager why
            if let Ok(rm) = env(RM_ADDRESS_ENV) {
                let _ = Client::new(rm).call(&Message::FinishApplication {
                    app_id,
                    succeeded: false,
                    diagnostics: e.to_string(),
                    counters: BTreeMap::new(),
                    phase_ms: BTreeMap::new(),
                });
            }
            1
        }
    }
}
