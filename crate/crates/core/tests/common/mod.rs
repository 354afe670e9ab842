#![allow(dead_code)]

pub mod scenarios;
pub mod sched;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;
use std::time::{Duration, Instant};

use tempfile::TempDir;

pub fn exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_ephemyarn"))
}

/// Scratch local and shared roots plus a config file with fast timers.
pub struct TestEnv {
    pub dir: TempDir,
    pub conf: PathBuf,
    pub local_root: PathBuf,
    pub shared_root: PathBuf,
}

impl TestEnv {
    pub fn new(extra: &[(&str, &str)]) -> TestEnv {
        let dir = tempfile::tempdir().unwrap();
        let local_root = dir.path().join("local");
        let shared_root = dir.path().join("shared");
        let mut text = format!(
            "ephemyarn.local.root = {}\nephemyarn.shared.root = {}\n\
             ephemyarn.heartbeat.interval-ms = 50\nephemyarn.node.timeout-ms = 1500\n\
             ephemyarn.kill.grace-ms = 500\nephemyarn.ready.timeout-ms = 20000\n",
            local_root.display(),
            shared_root.display()
        );
        for (k, v) in extra {
            text.push_str(&format!("{k} = {v}\n"));
        }
        let conf = dir.path().join("test.conf");
        fs::write(&conf, text).unwrap();
        TestEnv {
            dir,
            conf,
            local_root,
            shared_root,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(exe());
        c.args(args)
            .env("EPHEMYARN_CONFIG", &self.conf)
            .env("RUST_LOG", "warn")
            .env_remove("EPHEMYARN_CLUSTER");
        c
    }

    pub fn run(&self, args: &[&str]) -> Output {
        self.cmd(args).output().unwrap()
    }

    /// Provisions `nodes` simulated nodes and returns the state file.
    pub fn provision(&self, nodes: usize, job_id: &str) -> PathBuf {
        let n = nodes.to_string();
        let out = self.run(&["provision", "--local", &n, "--job-id", job_id]);
        assert!(out.status.success(), "provision failed: {}", String::from_utf8_lossy(&out.stderr));
        let state = self.shared_root.join(job_id).join("staging/cluster.json");
        assert!(state.is_file());
        state
    }

    pub fn staging(&self, job_id: &str) -> PathBuf {
        self.shared_root.join(job_id).join("staging")
    }

    pub fn logs(&self, job_id: &str) -> PathBuf {
        self.shared_root.join(job_id).join("output/logs")
    }
}

/// Pids whose environment carries `EPHEMYARN_JOB_ID=<job>`, read straight from /proc.
pub fn job_pids(job: &str) -> Vec<i32> {
    let needle = format!("EPHEMYARN_JOB_ID={job}");
    let mut out = Vec::new();
    for e in fs::read_dir("/proc").unwrap().flatten() {
        let Ok(pid) = e.file_name().to_string_lossy().parse::<i32>() else { continue };
        if let Ok(stat) = fs::read_to_string(format!("/proc/{pid}/stat")) {
            // zombies are waiting for their reaper, not running
            if stat.rsplit(')').next().map(|s| s.trim_start().starts_with('Z')).unwrap_or(false) {
                continue;
            }
        }
        if let Ok(env) = fs::read(format!("/proc/{pid}/environ")) {
            if env.split(|&b| b == 0).any(|kv| kv == needle.as_bytes()) {
                out.push(pid);
            }
        }
    }
    out
}

pub fn proc_env(pid: i32, key: &str) -> Option<String> {
    let env = fs::read(format!("/proc/{pid}/environ")).ok()?;
    let prefix = format!("{key}=");
    env.split(|&b| b == 0)
        .find(|kv| kv.starts_with(prefix.as_bytes()))
        .map(|kv| String::from_utf8_lossy(&kv[prefix.len()..]).into_owned())
}

pub fn proc_cmdline(pid: i32) -> Vec<String> {
    fs::read(format!("/proc/{pid}/cmdline"))
        .unwrap_or_default()
        .split(|&b| b == 0)
        .filter(|s| !s.is_empty())
        .map(|s| String::from_utf8_lossy(s).into_owned())
        .collect()
}

pub fn wait_until(limit: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + limit;
    while Instant::now() < deadline {
        if f() {
            return true;
        }
        thread::sleep(Duration::from_millis(25));
    }
    f()
}

/// Regular files and directories under `root`, relative to it.
pub fn tree(root: &Path) -> Vec<PathBuf> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
        let Ok(rd) = fs::read_dir(dir) else { return };
        for e in rd.flatten() {
            let p = e.path();
            out.push(p.strip_prefix(base).unwrap().to_path_buf());
            if e.file_type().map(|t| t.is_dir()).unwrap_or(false) {
                walk(base, &p, out);
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// Writes a jobspec running the identity tasks, with an optional delay before each map.
pub fn identity_job(env: &TestEnv, name: &str, mappers: u32, reducers: u32, input: &Path, output: &Path, map_delay_s: f64) -> PathBuf {
    let exe = exe();
    let exe = exe.display();
    let delay = if map_delay_s > 0.0 {
        format!("sleep {map_delay_s} && ")
    } else {
        String::new()
    };
    let text = format!(
        "name = {name}\nnum_mappers = {mappers}\nnum_reducers = {reducers}\n\
         map_command = {delay}{exe} task identity-map --input {{INPUT}} --staging {{STAGING}} --output {{OUTPUT}} --reducers {{NUM_REDUCERS}} --index {{TASK_INDEX}}\n\
         reduce_command = {exe} task identity-reduce --staging {{STAGING}} --output {{OUTPUT}} --index {{TASK_INDEX}} --mappers {mappers}\n\
         input_dir = {}\noutput_dir = {}\n\
         map_memory_mb = 2048\nreduce_memory_mb = 2048\n",
        input.display(),
        output.display()
    );
    let path = env.path(&format!("{name}.job"));
    fs::write(&path, text).unwrap();
    path
}

/// `shards` text shards of `per_shard` numbered lines each; returns all lines in order.
pub fn text_input(dir: &Path, shards: u32, per_shard: u32) -> Vec<String> {
    fs::create_dir_all(dir).unwrap();
    let mut all = Vec::new();
    for s in 0..shards {
        let lines: Vec<String> = (0..per_shard).map(|i| format!("line-{s}-{i}")).collect();
        fs::write(dir.join(format!("part-m-{s:05}")), lines.join("\n") + "\n").unwrap();
        all.extend(lines);
    }
    all
}
