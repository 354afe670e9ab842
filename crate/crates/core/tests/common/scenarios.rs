//! End-to-end scenarios shared by the integration tests and the acceptance runner.
//! Each returns a one-line summary on success and the reason on failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use ephemyarn::allocation::{assign_roles, NodeAllocation};
use ephemyarn::app_master::{read_events, AmEvent, Phase};
use ephemyarn::bench::harness::{scaling_run, Backend, BenchOptions, BenchPhase, JobOutcome, LocalBackend, PlanEntry, Workload};
use ephemyarn::bench::record::{key_hash, KEY_LEN, RECORD_LEN};
use ephemyarn::bench::teragen;
use ephemyarn::cluster::ClusterState;
use ephemyarn::config::Config;
use ephemyarn::protocol::ApplicationRecord;
use ephemyarn::resource::ResourceProfile;
use ephemyarn::app_master::JobSpec;

use super::{exe, identity_job, job_pids, proc_cmdline, proc_env, text_input, tree, wait_until, TestEnv};

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn app_dirs(logs: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(logs)
        .map(|rd| {
            rd.flatten()
                .map(|e| e.path())
                .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("application_"))
                .collect()
        })
        .unwrap_or_default();
    v.sort();
    v
}

fn read_lines(dir: &Path) -> Vec<String> {
    let mut lines = Vec::new();
    let mut files: Vec<PathBuf> = fs::read_dir(dir).unwrap().flatten().map(|e| e.path()).collect();
    files.sort();
    for f in files {
        if f.is_file() && !f.file_name().unwrap().to_string_lossy().starts_with(['.', '_']) {
            lines.extend(fs::read_to_string(&f).unwrap().lines().map(str::to_string));
        }
    }
    lines
}

// ---------------------------------------------------------------------------
// sort correctness

fn records_in(dir: &Path, prefix: &str) -> Vec<u8> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    files.sort();
    let mut all = Vec::new();
    for f in files {
        all.extend(fs::read(f).unwrap());
    }
    all
}

/// `bench full` on `nodes` simulated nodes, checked against a single-process
/// full sort of the generated input.
pub fn sort_end_to_end(rows: u64, nodes: usize, limit: Duration) -> Outcome {
    let env = TestEnv::new(&[]);
    let report = env.path("report");
    let started = Instant::now();
    let out = env.run(&[
        "bench",
        "full",
        "--rows",
        &rows.to_string(),
        "--local",
        &nodes.to_string(),
        "--keep-data",
        "--report-dir",
        report.to_str().unwrap(),
    ]);
    let wall = started.elapsed();
    ensure!(out.status.success(), "bench full failed: {}{}", text(&out.stdout), text(&out.stderr));
    ensure!(wall < limit, "took {wall:?}, limit {limit:?}");

    let csv = fs::read_to_string(report.join("timings.csv")).map_err(|e| e.to_string())?;
    let sort_row = csv.lines().find(|l| l.contains(",terasort_map,")).ok_or("no terasort row")?;
    let cols: Vec<&str> = sort_row.split(',').collect();
    let (mappers, reducers): (u32, u32) = (cols[4].parse().unwrap(), cols[5].parse().unwrap());
    let cores = nodes as u32;
    ensure!(mappers == 2 * cores && reducers == cores, "task counts {mappers}/{reducers} for {cores} cores");

    let validation: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report.join("validation.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let v = &validation[0]["report"];
    ensure!(v["sorted"] == true, "teravalidate says unsorted: {v}");
    ensure!(v["rows"] == rows, "teravalidate counted {} rows", v["rows"]);

    let bench_dir = fs::read_dir(&env.shared_root)
        .unwrap()
        .flatten()
        .map(|e| e.path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("bench-"))
        .ok_or("no bench job dir")?
        .join("bench");
    let input = records_in(&bench_dir.join("input"), "part-m-");
    let output = records_in(&bench_dir.join("sorted"), "part-r-");
    ensure!(input.len() as u64 == rows * RECORD_LEN as u64, "input holds {} bytes", input.len());
    ensure!(output.len() == input.len(), "output holds {} bytes, input {}", output.len(), input.len());

    let mut expected_sum = 0u64;
    for r in input.chunks(RECORD_LEN) {
        expected_sum = expected_sum.wrapping_add(key_hash(&r[..KEY_LEN]));
    }
    ensure!(v["key_checksum"] == expected_sum, "checksum {} != input scan {expected_sum}", v["key_checksum"]);

    // oracle: one in-memory sort of the whole input by key, ties by whole record
    let mut oracle: Vec<&[u8]> = input.chunks(RECORD_LEN).collect();
    oracle.sort_unstable_by(|a, b| a[..KEY_LEN].cmp(&b[..KEY_LEN]).then(a.cmp(b)));
    let got: Vec<&[u8]> = output.chunks(RECORD_LEN).collect();
    ensure!(got.windows(2).all(|w| w[0][..KEY_LEN] <= w[1][..KEY_LEN]), "output keys out of order");
    let unique = oracle.windows(2).all(|w| w[0][..KEY_LEN] != w[1][..KEY_LEN]);
    if unique {
        ensure!(got == oracle, "output differs from the oracle sort");
    } else {
        let mut g = got.clone();
        g.sort_unstable_by(|a, b| a[..KEY_LEN].cmp(&b[..KEY_LEN]).then(a.cmp(b)));
        ensure!(g == oracle, "output record multiset differs from input");
    }
    Ok(format!(
        "{rows} rows, {mappers} mappers, {reducers} reducers, sorted, checksum {expected_sum:#x}, matches oracle, {:.1} s",
        wall.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// teragen

pub fn teragen_resharding(rows: u64, mapper_counts: &[u32]) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let seed = 42;
    let mut reference: Option<Vec<u8>> = None;
    for &m in mapper_counts {
        let out = dir.path().join(format!("m{m}"));
        let shards = teragen(rows, m, seed, &out).map_err(|e| e.to_string())?;
        ensure!(shards.len() == m as usize, "{m} mappers wrote {} shards", shards.len());
        let mut bytes = Vec::new();
        for s in &shards {
            bytes.extend(fs::read(s).unwrap());
        }
        ensure!(bytes.len() as u64 == rows * RECORD_LEN as u64, "M={m}: {} bytes", bytes.len());
        match &reference {
            None => reference = Some(bytes),
            Some(r) => ensure!(*r == bytes, "M={m} differs from M={}", mapper_counts[0]),
        }
    }
    Ok(format!("{rows} rows identical for M in {mapper_counts:?}"))
}

// ---------------------------------------------------------------------------
// scheduler

pub fn scheduler_safety(cases: u32, small_cases: u32) -> Outcome {
    use proptest::test_runner::{Config as RunnerConfig, TestRunner};
    let mut runner = TestRunner::new(RunnerConfig {
        cases,
        failure_persistence: None,
        ..RunnerConfig::default()
    });
    runner
        .run(&super::sched::ops(40), |seq| {
            super::sched::check_sequence(&seq).map(|_| ()).map_err(proptest::test_runner::TestCaseError::fail)
        })
        .map_err(|e| e.to_string())?;
    let mut runner = TestRunner::new(RunnerConfig {
        cases: small_cases,
        failure_persistence: None,
        ..RunnerConfig::default()
    });
    runner
        .run(&super::sched::small_ops(), |seq| {
            super::sched::check_replay(&seq).map_err(proptest::test_runner::TestCaseError::fail)
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} random sequences, {small_cases} small instances matched the first-fit oracle and replayed"))
}

// ---------------------------------------------------------------------------
// roles

pub fn role_placement(max_hosts: usize) -> Outcome {
    let cfg = Config::default();
    for n in 3..=max_hosts {
        let hosts: Vec<String> = (0..n).map(|i| format!("c{:03}n{}", (i * 37) % 101, i)).collect();
        let alloc = NodeAllocation::from_entries(hosts.iter().map(|h| (h.clone(), 16))).map_err(|e| e.to_string())?;
        let layout = assign_roles(&alloc, &cfg).map_err(|e| e.to_string())?;
        ensure!(layout.rm_host == hosts[0], "{n} hosts: rm on {}", layout.rm_host);
        ensure!(layout.history_host == hosts[1], "{n} hosts: history on {}", layout.history_host);
        ensure!(layout.worker_hosts == hosts[2..], "{n} hosts: workers {:?}", layout.worker_hosts);
    }
    for n in 0..3 {
        let hosts: Vec<(String, u32)> = (0..n).map(|i| (format!("h{i}"), 1)).collect();
        if let Ok(alloc) = NodeAllocation::from_entries(hosts) {
            ensure!(assign_roles(&alloc, &cfg).is_err(), "{n} hosts accepted");
        }
    }
    Ok(format!("3..={max_hosts} hosts: rm=host[0], history=host[1], workers=rest"))
}

// ---------------------------------------------------------------------------
// config

pub fn config_defaults() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.conf");
    fs::write(&empty, "").unwrap();
    for (what, cfg) in [
        ("empty file", Config::load(&empty).map_err(|e| e.to_string())?),
        ("empty text", Config::parse("").map_err(|e| e.to_string())?),
    ] {
        ensure!(cfg.node_capacity == ResourceProfile::new(52 * 1024, 16), "{what}: capacity {}", cfg.node_capacity);
        ensure!(cfg.min_alloc_mb == 2048 && cfg.min_alloc_vcores == 1, "{what}: minimums");
        ensure!(cfg.am_resource_mb == 8192, "{what}: am {}", cfg.am_resource_mb);
        ensure!(cfg.map_memory_mb == 4096, "{what}: map {}", cfg.map_memory_mb);
        ensure!(cfg.map_heap_opt == "-Xmx3072m", "{what}: heap opt {:?}", cfg.map_heap_opt);
    }
    Ok("53248 MB / 16 vcores, 2048 MB / 1 vcore minimum, 8192 MB AM, 4096 MB map, -Xmx3072m".into())
}

// ---------------------------------------------------------------------------
// overhead and hygiene

/// Local backend that additionally checks, from outside, that nothing of
/// each run survives its teardown.
struct Audited {
    inner: LocalBackend,
    local_root: PathBuf,
    residue: Vec<String>,
}

impl Backend for Audited {
    type Handle = ClusterState;
    fn provision(&mut self, e: &PlanEntry, run_id: &str) -> ephemyarn::Result<ClusterState> {
        self.inner.provision(e, run_id)
    }
    fn scratch_dir(&self, h: &ClusterState) -> PathBuf {
        self.inner.scratch_dir(h)
    }
    fn run_job(&mut self, h: &ClusterState, spec: &JobSpec) -> ephemyarn::Result<JobOutcome> {
        self.inner.run_job(h, spec)
    }
    fn teardown(&mut self, h: ClusterState) -> ephemyarn::Result<bool> {
        let job = h.job_id.clone();
        let ok = self.inner.teardown(h)?;
        let pids = job_pids(&job);
        if !pids.is_empty() {
            self.residue.push(format!("{job}: processes {pids:?}"));
        }
        let left = tree(&self.local_root);
        if !left.is_empty() {
            self.residue.push(format!("{job}: local paths {left:?}"));
        }
        Ok(ok)
    }
    fn task_program(&self) -> String {
        self.inner.task_program()
    }
    fn default_data_dir(&self, rows: u64) -> PathBuf {
        self.inner.default_data_dir(rows)
    }
}

fn median(v: &mut [u64]) -> u64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

pub fn overhead_trend(node_counts: &[usize], repeat: u32) -> Outcome {
    let env = TestEnv::new(&[]);
    let cfg = Config::load(&env.conf).map_err(|e| e.to_string())?;
    let mut backend = Audited {
        inner: LocalBackend::new(cfg, exe()),
        local_root: env.local_root.clone(),
        residue: Vec::new(),
    };
    let plan = node_counts.iter().map(|&nodes| PlanEntry { nodes, slots: 1, rows: 0 }).collect();
    let mut opts = BenchOptions::new(Workload::Overhead, plan, env.path("report"));
    opts.repeat = repeat;
    let report = scaling_run(&mut backend, &opts).map_err(|e| e.to_string())?;
    ensure!(backend.residue.is_empty(), "residue: {:?}", backend.residue);
    ensure!(report.ok(), "failed rows or errors: {:?}", report.errors);
    ensure!(
        report.rows.len() == node_counts.len() * repeat as usize * 2,
        "{} timing rows",
        report.rows.len()
    );

    let mut per_run: BTreeMap<&str, (usize, u64)> = BTreeMap::new();
    for r in &report.rows {
        ensure!(matches!(r.phase, BenchPhase::Provision | BenchPhase::Teardown), "unexpected phase {:?}", r.phase);
        let e = per_run.entry(&r.run_id).or_insert((r.nodes, 0));
        e.1 += r.wall_ms;
    }
    let mut by_n: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for (run, (n, ms)) in &per_run {
        ensure!(*ms < 10_000, "run {run} took {ms} ms");
        by_n.entry(*n).or_default().push(*ms);
    }
    let medians: BTreeMap<usize, u64> = by_n.iter_mut().map(|(n, v)| (*n, median(v))).collect();
    let (&n0, &m0) = medians.iter().next().unwrap();
    for (&n, &m) in &medians {
        let bound = m0 * n as u64 / n0 as u64 + 500;
        ensure!(m <= bound, "median {m} ms at {n} nodes exceeds linear bound {bound} ms ({medians:?})");
    }
    Ok(format!("median provision+teardown ms by nodes {medians:?}, no residue"))
}

// ---------------------------------------------------------------------------
// full lifecycle

fn app_record(logs: &Path) -> Result<(PathBuf, ApplicationRecord), String> {
    let dir = app_dirs(logs).into_iter().last().ok_or("no application logs")?;
    let rec: ApplicationRecord =
        serde_json::from_str(&fs::read_to_string(dir.join("application.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    Ok((dir, rec))
}

/// provision, run, teardown on `--local 4`, then checks that only output,
/// logs and history remain and nothing is left running.
pub fn lifecycle_hygiene() -> Outcome {
    let env = TestEnv::new(&[]);
    let job = "hyg";
    let input = env.path("input");
    let lines = text_input(&input, 3, 40);
    let output = env.path("output");
    let spec = identity_job(&env, "ident", 3, 2, &input, &output, 0.0);
    let before = tree(env.dir.path());

    let state = env.provision(4, job);
    let st = ClusterState::load(&state).map_err(|e| e.to_string())?;
    ensure!(st.layout.worker_hosts.len() == 2, "workers {:?}", st.layout.worker_hosts);
    ensure!(!job_pids(job).is_empty(), "no daemons running");
    let s = state.to_str().unwrap();

    let run = env.run(&["run", "--cluster", s, "--job", spec.to_str().unwrap()]);
    ensure!(run.status.success(), "run failed: {}", text(&run.stderr));
    let mut got = read_lines(&output);
    got.sort();
    let mut want = lines.clone();
    want.sort();
    ensure!(got == want, "output lines differ");

    let again = env.run(&["run", "--cluster", s, "--job", spec.to_str().unwrap()]);
    ensure!(!again.status.success(), "rerun into existing output succeeded");
    ensure!(text(&again.stderr).contains("already exists"), "rerun error: {}", text(&again.stderr));

    let td = env.run(&["teardown", "--cluster", s]);
    ensure!(td.status.success(), "teardown failed: {}{}", text(&td.stdout), text(&td.stderr));
    ensure!(wait_until(Duration::from_secs(2), || job_pids(job).is_empty()), "processes left: {:?}", job_pids(job));
    ensure!(!env.local_root.exists(), "local root left: {:?}", tree(&env.local_root));

    let td2 = env.run(&["teardown", "--cluster", s]);
    ensure!(td2.status.success(), "second teardown failed");
    ensure!(text(&td2.stdout).contains("\"already_torn_down\": true"), "second teardown was not a no-op");

    let late = env.run(&["run", "--cluster", s, "--job", spec.to_str().unwrap(), "--output", env.path("late").to_str().unwrap()]);
    ensure!(!late.status.success(), "run after teardown succeeded");
    ensure!(text(&late.stderr).contains("cluster unavailable"), "run after teardown: {}", text(&late.stderr));

    let (_, rec) = app_record(&env.logs(job))?;
    let hist = env.run(&["history", "--cluster", s, "--app", &rec.app_id.0]);
    ensure!(hist.status.success(), "history unreadable: {}", text(&hist.stderr));

    // only output, logs, history, state and teardown report are new
    let staging = Path::new("shared").join(job).join("staging");
    let allowed_staging: BTreeSet<PathBuf> = ["history.ndjson", "cluster.json", "teardown.json"]
        .iter()
        .map(|f| staging.join(f))
        .collect();
    let logs = Path::new("shared").join(job).join("output");
    for p in tree(env.dir.path()) {
        if before.contains(&p) || p.starts_with("output") || p.starts_with(&logs) || allowed_staging.contains(&p) {
            continue;
        }
        let is_parent = p.is_relative() && [staging.clone(), logs.clone()].iter().any(|a| a.starts_with(&p));
        let skeleton = p.starts_with(Path::new("shared").join(job).join("input"));
        ensure!(is_parent || skeleton, "unexpected leftover {}", p.display());
    }
    Ok(format!("{} lines through {} and back; no processes or local dirs left", lines.len(), rec.app_id.0))
}

// ---------------------------------------------------------------------------
// failure injection

/// Kills a worker's node agent while its map containers run; the job must
/// finish on the surviving worker and its history must outlive teardown.
pub fn agent_crash() -> Outcome {
    let env = TestEnv::new(&[
        ("ephemyarn.node.timeout-ms", "1000"),
        ("mapreduce.map.maxattempts", "4"),
        // small nodes spread the maps over every worker
        ("yarn.nodemanager.resource.memory-mb", "8192"),
        ("yarn.app.mapreduce.am.resource.mb", "4096"),
    ]);
    let job = "crash";
    let input = env.path("input");
    let lines = text_input(&input, 6, 25);
    let output = env.path("output");
    let spec = identity_job(&env, "victim", 6, 2, &input, &output, 2.5);
    let state = env.provision(5, job);
    let s = state.to_str().unwrap().to_string();

    let mut run = env
        .cmd(&["run", "--cluster", &s, "--job", spec.to_str().unwrap()])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();

    // the AM's host and a different worker with a map container running
    let mut target: Option<(String, i32)> = None;
    let found = wait_until(Duration::from_secs(20), || {
        let pids = job_pids(job);
        let am_host = pids
            .iter()
            .find(|&&p| proc_env(p, "CONTAINER_ROLE").as_deref() == Some("am"))
            .and_then(|&p| proc_env(p, "NM_HOST"));
        let Some(am_host) = am_host else { return false };
        let victim = pids.iter().find_map(|&p| {
            let host = proc_env(p, "NM_HOST")?;
            (proc_env(p, "TASK_PHASE").as_deref() == Some("map") && host != am_host).then_some(host)
        });
        let Some(victim) = victim else { return false };
        let agent = pids.iter().copied().find(|&p| {
            let cmd = proc_cmdline(p);
            cmd.iter().any(|a| a == "agent") && cmd.windows(2).any(|w| w[0] == "--host" && w[1] == victim)
        });
        if let Some(a) = agent {
            target = Some((victim, a));
            true
        } else {
            false
        }
    });
    if !found {
        let _ = run.kill();
        let _ = run.wait();
        let _ = env.run(&["teardown", "--cluster", &s]);
        return Err("never saw a map container on a non-AM worker".into());
    }
    let (victim, agent_pid) = target.unwrap();
    Command::new("kill").args(["-9", &agent_pid.to_string()]).status().unwrap();

    let status = run.wait().unwrap();
    let mut err = String::new();
    if let Some(mut e) = run.stderr.take() {
        use std::io::Read;
        let _ = e.read_to_string(&mut err);
    }
    let td = env.run(&["teardown", "--cluster", &s]);
    ensure!(status.success(), "job failed after losing {victim}: {err}");

    let mut got = read_lines(&output);
    got.sort();
    let mut want = lines;
    want.sort();
    ensure!(got == want, "output lines differ after retry");

    let (dir, rec) = app_record(&env.logs(job))?;
    let lost: Vec<_> = rec
        .container_history
        .iter()
        .filter(|c| c.node == victim && c.exit_code != Some(0))
        .collect();
    ensure!(!lost.is_empty(), "no failed containers recorded on {victim}");
    let events = read_events(&dir.join("am_events.ndjson")).map_err(|e| e.to_string())?;
    let failures = events.iter().filter(|e| e.event == "failure" && e.phase == Some(Phase::Map)).count();
    let retried = events
        .iter()
        .filter(|e| e.event == "success" && e.phase == Some(Phase::Map) && e.attempt.unwrap_or(1) > 1)
        .count();
    ensure!(failures > 0 && retried > 0, "failures {failures}, successful retries {retried}");

    ensure!(!td.status.success(), "teardown reported success despite a dead agent");
    ensure!(text(&td.stdout).contains(&victim), "teardown report does not name {victim}");
    ensure!(wait_until(Duration::from_secs(3), || job_pids(job).is_empty()), "processes left: {:?}", job_pids(job));

    let hist = env.run(&["history", "--cluster", &s, "--app", &rec.app_id.0]);
    ensure!(hist.status.success(), "history unreadable after teardown: {}", text(&hist.stderr));
    ensure!(text(&hist.stdout).contains("\"finished\""), "history record: {}", text(&hist.stdout));
    Ok(format!(
        "killed agent on {victim}: {} container(s) failed there, {failures} map failure(s), {retried} retried elsewhere, job succeeded, history readable"
    , lost.len()))
}

// ---------------------------------------------------------------------------
// barrier and shuffle

fn reduce_success_containers(events: &[AmEvent]) -> BTreeMap<u32, String> {
    events
        .iter()
        .filter(|e| e.event == "success" && e.phase == Some(Phase::Reduce))
        .filter_map(|e| Some((e.index?, e.container.clone()?)))
        .collect()
}

pub fn barrier_and_shuffle() -> Outcome {
    let (mappers, reducers) = (4u32, 2u32);
    let env = TestEnv::new(&[]);
    let job = "shuffle";
    let input = env.path("input");
    text_input(&input, mappers, 30);
    let output = env.path("output");
    let spec = identity_job(&env, "barrier", mappers, reducers, &input, &output, 0.0);
    let state = env.provision(4, job);
    let s = state.to_str().unwrap();
    let run = env.run(&["run", "--cluster", s, "--job", spec.to_str().unwrap()]);
    let td = env.run(&["teardown", "--cluster", s]);
    ensure!(run.status.success(), "job failed: {}", text(&run.stderr));
    ensure!(td.status.success(), "teardown failed");

    let (dir, _) = app_record(&env.logs(job))?;
    let events = read_events(&dir.join("am_events.ndjson")).map_err(|e| e.to_string())?;
    let last_map_success = events
        .iter()
        .filter(|e| e.event == "success" && e.phase == Some(Phase::Map))
        .map(|e| e.seq)
        .max()
        .ok_or("no map successes")?;
    let map_successes: BTreeSet<u32> = events
        .iter()
        .filter(|e| e.event == "success" && e.phase == Some(Phase::Map))
        .filter_map(|e| e.index)
        .collect();
    ensure!(map_successes.len() == mappers as usize, "map successes {map_successes:?}");
    let reduce_launches: Vec<&AmEvent> = events
        .iter()
        .filter(|e| e.event == "launch" && e.phase == Some(Phase::Reduce))
        .collect();
    ensure!(!reduce_launches.is_empty(), "no reduce launches");
    for l in &reduce_launches {
        ensure!(l.seq > last_map_success, "reduce launch {} precedes final map success {last_map_success}", l.seq);
    }

    let winners = reduce_success_containers(&events);
    ensure!(winners.len() == reducers as usize, "reduce successes {winners:?}");
    let mut reads: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (r, cid) in &winners {
        let log = dir.join("_reads").join(format!("reduce_{r}.{cid}"));
        let body = fs::read_to_string(&log).map_err(|e| format!("{}: {e}", log.display()))?;
        for line in body.lines() {
            let p = Path::new(line);
            let part = p.file_name().unwrap().to_string_lossy();
            let map = p.parent().unwrap().file_name().unwrap().to_string_lossy();
            let m: u32 = map.strip_prefix("map_").ok_or(format!("bad read {line}"))?.parse().unwrap();
            let pr: u32 = part.strip_prefix("part_").ok_or(format!("bad read {line}"))?.parse().unwrap();
            ensure!(pr == *r, "reducer {r} read {line}");
            *reads.entry((m, pr)).or_default() += 1;
        }
    }
    for m in 0..mappers {
        for r in 0..reducers {
            let n = reads.get(&(m, r)).copied().unwrap_or(0);
            ensure!(n == 1, "partition ({m}, {r}) read {n} times");
        }
    }
    ensure!(reads.len() == (mappers * reducers) as usize, "extra reads {reads:?}");
    Ok(format!(
        "{} reduce launch(es) after map success #{last_map_success}; all {} partitions read exactly once",
        reduce_launches.len(),
        mappers * reducers
    ))
}
