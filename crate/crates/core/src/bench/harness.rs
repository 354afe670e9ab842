//! Timing harness: runs plan entries one after another on fresh clusters and
//! reports wall time per lifecycle phase as CSV, with a gnuplot script.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::data::{dataset_checksum, sample_split_points, teravalidate, ValidationReport};
use crate::app_master::{list_shards, JobSpec};
use crate::cluster::{self, AllocationSource, ClusterState, ProvisionOptions};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::node_agent::{procfs, JOB_ENV};
use crate::util::{now_ms, shell_quote};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workload {
    /// Provision and tear down with an empty job body.
    Overhead,
    Teragen,
    Terasort,
    /// Teragen, terasort and teravalidate on one cluster.
    Full,
}

impl FromStr for Workload {
    type Err = Error;
    fn from_str(s: &str) -> Result<Workload> {
        match s {
            "overhead" => Ok(Workload::Overhead),
            "teragen" => Ok(Workload::Teragen),
            "terasort" => Ok(Workload::Terasort),
            "full" => Ok(Workload::Full),
            other => Err(Error::InvalidConfig(format!("unknown workload {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchPhase {
    Provision,
    Teragen,
    TerasortMap,
    TerasortReduce,
    Teravalidate,
    Teardown,
}

impl BenchPhase {
    pub fn name(self) -> &'static str {
        match self {
            BenchPhase::Provision => "provision",
            BenchPhase::Teragen => "teragen",
            BenchPhase::TerasortMap => "terasort_map",
            BenchPhase::TerasortReduce => "terasort_reduce",
            BenchPhase::Teravalidate => "teravalidate",
            BenchPhase::Teardown => "teardown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub nodes: usize,
    pub slots: u32,
    pub rows: u64,
}

impl PlanEntry {
    pub fn cores(&self) -> u64 {
        self.nodes as u64 * self.slots as u64
    }
}

/// Parses a node-count spec: `5`, a range `3..8` (inclusive) or a list `3,4,6,8`.
pub fn parse_node_counts(spec: &str) -> Result<Vec<usize>> {
    let bad = || Error::InvalidConfig(format!("bad node count list {spec:?}"));
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// ⌈ratio · cores⌉, at least one.
pub fn tasks_for(ratio: f64, cores: u64) -> u32 {
    ((ratio * cores as f64) - 1e-9).ceil().max(1.0) as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub run_id: String,
    pub phase: BenchPhase,
    pub nodes: usize,
    pub cores: u64,
    pub mappers: u32,
    pub reducers: u32,
    pub rows: u64,
    pub wall_ms: u64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationOutcome {
    pub run_id: String,
    pub report: ValidationReport,
    pub expected_rows: u64,
    pub expected_checksum: u64,
}

impl ValidationOutcome {
    pub fn ok(&self) -> bool {
        self.report.sorted && self.report.rows == self.expected_rows && self.report.key_checksum == self.expected_checksum
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<TimingRow>,
    pub validations: Vec<ValidationOutcome>,
    /// Paths of the sorted outputs kept on request.
    pub outputs: Vec<PathBuf>,
    pub errors: Vec<String>,
}

impl BenchReport {
    pub fn ok(&self) -> bool {
        self.rows.iter().all(|r| r.ok) && self.validations.iter().all(ValidationOutcome::ok) && self.errors.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub workload: Workload,
    pub plan: Vec<PlanEntry>,
    pub repeat: u32,
    pub map_ratio: f64,
    pub reduce_ratio: f64,
    pub mappers: Option<u32>,
    pub reducers: Option<u32>,
    pub seed: u64,
    /// Dataset directory shared by `teragen` and `terasort` runs.
    pub data_dir: Option<PathBuf>,
    pub report_dir: PathBuf,
    pub sample_size: u64,
    /// Keep generated inputs and sorted outputs of `full` and `terasort` runs.
    pub keep_data: bool,
}

impl BenchOptions {
    pub fn new(workload: Workload, plan: Vec<PlanEntry>, report_dir: impl Into<PathBuf>) -> BenchOptions {
        BenchOptions {
            workload,
            plan,
            repeat: 1,
            map_ratio: 2.0,
            reduce_ratio: 1.0,
            mappers: None,
            reducers: None,
            seed: 0x5eed,
            data_dir: None,
            report_dir: report_dir.into(),
            sample_size: 10_000,
            keep_data: false,
        }
    }

    fn task_counts(&self, entry: &PlanEntry) -> (u32, u32) {
        (
            self.mappers.unwrap_or_else(|| tasks_for(self.map_ratio, entry.cores())),
            self.reducers.unwrap_or_else(|| tasks_for(self.reduce_ratio, entry.cores())),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JobOutcome {
    pub succeeded: bool,
    pub diagnostics: String,
    pub phase_ms: BTreeMap<String, u64>,
    pub wall_ms: u64,
}

/// What the harness needs from a cluster; swapped out in tests.
pub trait Backend {
    type Handle;
    fn provision(&mut self, entry: &PlanEntry, run_id: &str) -> Result<Self::Handle>;
    /// A per-run scratch directory on the shared filesystem.
    fn scratch_dir(&self, handle: &Self::Handle) -> PathBuf;
    fn run_job(&mut self, handle: &Self::Handle, spec: &JobSpec) -> Result<JobOutcome>;
    /// Tears down; `Ok(false)` when the cluster left residue behind.
    fn teardown(&mut self, handle: Self::Handle) -> Result<bool>;
    /// Command prefix that runs `ephemyarn task ...` inside containers.
    fn task_program(&self) -> String;
    fn default_data_dir(&self, rows: u64) -> PathBuf;
}

/// Simulated nodes on this machine.
pub struct LocalBackend {
    pub cfg: Config,
    pub exe: PathBuf,
    /// Job ids provisioned so far.
    pub jobs: Vec<String>,
}

impl LocalBackend {
    pub fn new(cfg: Config, exe: impl Into<PathBuf>) -> LocalBackend {
        LocalBackend {
            cfg,
            exe: exe.into(),
            jobs: Vec::new(),
        }
    }
}

impl Backend for LocalBackend {
    type Handle = ClusterState;

    fn provision(&mut self, entry: &PlanEntry, run_id: &str) -> Result<ClusterState> {
        let mut opts = ProvisionOptions::new(&self.exe);
        let job = format!("bench-{}-{run_id}", now_ms());
        opts.job_id = Some(job.clone());
        self.jobs.push(job);
        cluster::provision(
            &AllocationSource::Local {
                nodes: entry.nodes,
                slots: entry.slots,
            },
            &self.cfg,
            &opts,
        )
    }

    fn scratch_dir(&self, h: &ClusterState) -> PathBuf {
        h.plan.shared_job_dir().join("bench")
    }

    fn run_job(&mut self, h: &ClusterState, spec: &JobSpec) -> Result<JobOutcome> {
        let out = cluster::run_job(&h.state_file(), spec)?;
        Ok(JobOutcome {
            succeeded: out.succeeded(),
            diagnostics: out.record.diagnostics.clone(),
            phase_ms: out.record.phase_ms.clone(),
            wall_ms: out.wall_ms,
        })
    }

    fn teardown(&mut self, mut h: ClusterState) -> Result<bool> {
        let report = cluster::teardown(&h.state_file())?;
        h = ClusterState::load(&h.state_file())?;
        let dirs_left = h.host_roots.values().any(|r| r.join(&h.job_id).exists());
        let procs_left = !procfs::pids_with_env(JOB_ENV, &h.job_id).is_empty();
        if dirs_left || procs_left {
            warn!("{} left residue: dirs {dirs_left}, processes {procs_left}", h.job_id);
        }
        Ok(report.ok() && !dirs_left && !procs_left)
    }

    fn task_program(&self) -> String {
        format!("{} task", shell_quote(&self.exe.to_string_lossy()))
    }

    fn default_data_dir(&self, rows: u64) -> PathBuf {
        self.cfg.shared_root.join("tera-data").join(format!("rows-{rows}"))
    }
}

pub fn teragen_spec(task: &str, rows: u64, mappers: u32, seed: u64, output: &Path) -> JobSpec {
    JobSpec::new(
        "teragen",
        mappers,
        format!(
            "{task} teragen-map --rows {rows} --mappers {mappers} --seed {seed} --index {{TASK_INDEX}} --output {{OUTPUT}} --staging {{STAGING}}"
        ),
        output,
    )
}

pub fn terasort_spec(task: &str, input: &Path, splits: &Path, mappers: u32, reducers: u32, output: &Path) -> JobSpec {
    let mut spec = JobSpec::new(
        "terasort",
        mappers,
        format!(
            "{task} terasort-map --input {{INPUT}} --splits {} --reducers {{NUM_REDUCERS}} --index {{TASK_INDEX}} --staging {{STAGING}}",
            shell_quote(&splits.to_string_lossy())
        ),
        output,
    );
    spec.num_reducers = reducers;
    spec.reduce_command = format!(
        "{task} terasort-reduce --staging {{STAGING}} --output {{OUTPUT}} --index {{TASK_INDEX}} --mappers {mappers}"
    );
    spec.input_dir = Some(input.to_path_buf());
    spec
}

struct RunCtx<'a> {
    run_id: String,
    entry: PlanEntry,
    mappers: u32,
    reducers: u32,
    rows: &'a mut Vec<TimingRow>,
}

impl RunCtx<'_> {
    fn push(&mut self, phase: BenchPhase, wall_ms: u64, ok: bool) {
        self.rows.push(TimingRow {
            run_id: self.run_id.clone(),
            phase,
            nodes: self.entry.nodes,
            cores: self.entry.cores(),
            mappers: self.mappers,
            reducers: self.reducers,
            rows: self.entry.rows,
            wall_ms,
            ok,
        });
    }
}

/// Runs every plan entry `repeat` times, sequentially, and writes
/// `timings.csv`, `summary.csv`, `validation.json` and `plot.gp` into the report directory.
pub fn scaling_run<B: Backend>(backend: &mut B, opts: &BenchOptions) -> Result<BenchReport> {
    if opts.plan.is_empty() {
        return Err(Error::InvalidConfig("empty bench plan".into()));
    }
    if opts.workload == Workload::Terasort {
        for e in &opts.plan {
            let dir = opts.data_dir.clone().unwrap_or_else(|| backend.default_data_dir(e.rows));
            if list_shards(&dir).map(|s| s.is_empty()).unwrap_or(true) {
                return Err(Error::MissingInput(dir));
            }
        }
    }
    fs::create_dir_all(&opts.report_dir).map_err(Error::path_io(&opts.report_dir))?;
    let mut report = BenchReport::default();
    for (ei, entry) in opts.plan.iter().enumerate() {
        for rep in 0..opts.repeat.max(1) {
            let run_id = format!("e{ei:02}n{}r{rep}", entry.nodes);
            let (mappers, reducers) = match opts.workload {
                Workload::Overhead => (0, 0),
                Workload::Teragen => (opts.task_counts(entry).0, 0),
                _ => opts.task_counts(entry),
            };
            info!("bench run {run_id}: {} node(s), {} core(s), {} rows", entry.nodes, entry.cores(), entry.rows);
            let mut ctx = RunCtx {
                run_id,
                entry: *entry,
                mappers,
                reducers,
                rows: &mut report.rows,
            };
            if let Err(e) = run_one(backend, opts, &mut ctx, rep, &mut report.validations, &mut report.outputs) {
                warn!("run {} failed: {e}", ctx.run_id);
                report.errors.push(format!("{}: {e}", ctx.run_id));
            }
        }
    }
    write_reports(&opts.report_dir, &report)?;
    Ok(report)
}

fn run_one<B: Backend>(
    backend: &mut B,
    opts: &BenchOptions,
    ctx: &mut RunCtx<'_>,
    rep: u32,
    validations: &mut Vec<ValidationOutcome>,
    outputs: &mut Vec<PathBuf>,
) -> Result<()> {
    let t = Instant::now();
    let handle = match backend.provision(&ctx.entry, &ctx.run_id) {
        Ok(h) => {
            ctx.push(BenchPhase::Provision, t.elapsed().as_millis() as u64, true);
            h
        }
        Err(e) => {
            ctx.push(BenchPhase::Provision, t.elapsed().as_millis() as u64, false);
            return Err(e);
        }
    };
    let body = run_body(backend, opts, ctx, rep, &handle, validations, outputs);
    let t = Instant::now();
    let td = backend.teardown(handle);
    let td_ok = matches!(td, Ok(true));
    ctx.push(BenchPhase::Teardown, t.elapsed().as_millis() as u64, td_ok);
    body?;
    match td {
        Ok(true) => Ok(()),
        Ok(false) => Err(Error::ClusterUnavailable("teardown left residue".into())),
        Err(e) => Err(e),
    }
}

fn run_body<B: Backend>(
    backend: &mut B,
    opts: &BenchOptions,
    ctx: &mut RunCtx<'_>,
    rep: u32,
    handle: &B::Handle,
    validations: &mut Vec<ValidationOutcome>,
    outputs: &mut Vec<PathBuf>,
) -> Result<()> {
    let task = backend.task_program();
    let scratch = backend.scratch_dir(handle);
    let rows = ctx.entry.rows;
    let data_dir = opts.data_dir.clone().unwrap_or_else(|| backend.default_data_dir(rows));
    let mut cleanup: Vec<PathBuf> = Vec::new();
    let result = (|| -> Result<()> {
        let input = match opts.workload {
            Workload::Overhead => return Ok(()),
            Workload::Terasort => data_dir.clone(),
            Workload::Teragen | Workload::Full => {
                let out = if opts.workload == Workload::Teragen && rep == 0 {
                    data_dir.clone()
                } else {
                    let d = scratch.join("input");
                    if !opts.keep_data {
                        cleanup.push(d.clone());
                    }
                    d
                };
                if let Some(parent) = out.parent() {
                    fs::create_dir_all(parent).map_err(Error::path_io(parent))?;
                }
                let spec = teragen_spec(&task, rows, ctx.mappers, opts.seed, &out);
                let t = Instant::now();
                let res = backend.run_job(handle, &spec);
                let ok = matches!(&res, Ok(o) if o.succeeded);
                ctx.push(BenchPhase::Teragen, t.elapsed().as_millis() as u64, ok);
                let res = res?;
                if !res.succeeded {
                    return Err(Error::JobFailed(format!("teragen: {}", res.diagnostics)));
                }
                out
            }
        };
        if opts.workload == Workload::Teragen {
            return Ok(());
        }
        let shards = list_shards(&input)?.len() as u32;
        if shards != ctx.mappers {
            return Err(Error::InvalidJobSpec(format!(
                "{} has {shards} shard(s) but this run uses {} mapper(s)",
                input.display(),
                ctx.mappers
            )));
        }
        fs::create_dir_all(&scratch).map_err(Error::path_io(&scratch))?;
        let splits = sample_split_points(&input, ctx.reducers, opts.sample_size).or_else(|e| match e {
            // empty input: every split point is irrelevant
            Error::MissingInput(_) => Ok(super::data::SplitPoints {
                keys: vec![[0u8; super::record::KEY_LEN]; ctx.reducers as usize - 1],
                degenerate: true,
            }),
            other => Err(other),
        })?;
        let split_file = scratch.join("partitions.lst");
        fs::write(&split_file, splits.to_bytes()).map_err(Error::path_io(&split_file))?;
        cleanup.push(split_file.clone());
        let output = scratch.join("sorted");
        if opts.keep_data {
            outputs.push(output.clone());
        } else {
            cleanup.push(output.clone());
        }
        let spec = terasort_spec(&task, &input, &split_file, ctx.mappers, ctx.reducers, &output);
        let res = backend.run_job(handle, &spec);
        let (map_ms, reduce_ms, ok) = match &res {
            Ok(o) => (
                o.phase_ms.get("map").copied().unwrap_or(o.wall_ms),
                o.phase_ms.get("reduce").copied().unwrap_or(0),
                o.succeeded,
            ),
            Err(_) => (0, 0, false),
        };
        ctx.push(BenchPhase::TerasortMap, map_ms, ok);
        ctx.push(BenchPhase::TerasortReduce, reduce_ms, ok);
        let res = res?;
        if !res.succeeded {
            return Err(Error::JobFailed(format!("terasort: {}", res.diagnostics)));
        }

        let t = Instant::now();
        let report = teravalidate(&output)?;
        let (expected_rows, expected_checksum) = dataset_checksum(&input)?;
        let outcome = ValidationOutcome {
            run_id: ctx.run_id.clone(),
            report,
            expected_rows,
            expected_checksum,
        };
        ctx.push(BenchPhase::Teravalidate, t.elapsed().as_millis() as u64, outcome.ok());
        let ok = outcome.ok();
        validations.push(outcome);
        if !ok {
            return Err(Error::JobFailed("teravalidate failed".into()));
        }
        Ok(())
    })();
    for p in cleanup {
        let _ = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
    }
    result
}

fn median(sorted: &[u64]) -> u64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2
    }
}

/// (phase, nodes, cores, rows)
pub type SummaryKey = (BenchPhase, usize, u64, u64);
/// (runs, ok runs, min, median, max)
pub type SummaryStats = (usize, usize, u64, u64, u64);

/// Aggregates repeats of each plan entry; min, median and max are over ok runs.
pub fn summarize(rows: &[TimingRow]) -> BTreeMap<SummaryKey, SummaryStats> {
    let mut groups: BTreeMap<SummaryKey, Vec<&TimingRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.phase, r.nodes, r.cores, r.rows)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(k, rs)| {
            let mut ok: Vec<u64> = rs.iter().filter(|r| r.ok).map(|r| r.wall_ms).collect();
            ok.sort_unstable();
            let stats = if ok.is_empty() {
                (rs.len(), 0, 0, 0, 0)
            } else {
                (rs.len(), ok.len(), ok[0], median(&ok), ok[ok.len() - 1])
            };
            (k, stats)
        })
        .collect()
}

fn write_reports(dir: &Path, report: &BenchReport) -> Result<()> {
    let mut csv = String::from("run_id,phase,nodes,cores,mappers,reducers,rows,wall_ms,ok\n");
    for r in &report.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.phase.name(),
            r.nodes,
            r.cores,
            r.mappers,
            r.reducers,
            r.rows,
            r.wall_ms,
            r.ok
        );
    }
    fs::write(dir.join("timings.csv"), csv).map_err(Error::path_io(dir.join("timings.csv")))?;

    let mut sum = String::from("phase,nodes,cores,rows,runs,ok_runs,min_ms,median_ms,max_ms\n");
    let summary = summarize(&report.rows);
    for ((phase, nodes, cores, rows), (runs, ok, min, med, max)) in &summary {
        let _ = writeln!(sum, "{},{nodes},{cores},{rows},{runs},{ok},{min},{med},{max}", phase.name());
    }
    fs::write(dir.join("summary.csv"), sum).map_err(Error::path_io(dir.join("summary.csv")))?;
    fs::write(dir.join("validation.json"), serde_json::to_string_pretty(&report.validations)?)
        .map_err(Error::path_io(dir.join("validation.json")))?;

    let mut phases: Vec<BenchPhase> = summary.keys().map(|k| k.0).collect();
    phases.dedup();
    fs::write(dir.join("plot.gp"), plot_script(&phases)).map_err(Error::path_io(dir.join("plot.gp")))?;
    Ok(())
}

/// Gnuplot script drawing median wall time against cores, one line per phase.
pub fn plot_script(phases: &[BenchPhase]) -> String {
    let mut s = String::new();
    s.push_str("# gnuplot plot.gp  (reads summary.csv from the current directory)\n");
    s.push_str("set datafile separator ','\n");
    s.push_str("set terminal pngcairo size 900,600\n");
    s.push_str("set output 'scaling.png'\n");
    s.push_str("set xlabel 'cores in allocation'\n");
    s.push_str("set ylabel 'wall time (s)'\n");
    s.push_str("set key top left\n");
    s.push_str("set grid\n");
    if phases.is_empty() {
        s.push_str("plot 0 notitle\n");
        return s;
    }
    let lines: Vec<String> = phases
        .iter()
        .map(|p| {
            format!(
                "'summary.csv' using (strcol(1) eq '{0}' ? $3 : 1/0):($8/1000.0):($7/1000.0):($9/1000.0) with yerrorlines title '{0}'",
                p.name()
            )
        })
        .collect();
    s.push_str("plot ");
    s.push_str(&lines.join(", \\\n     "));
    s.push('\n');
    s
}
