//! Command line front end shared by the `ephemyarn` binaries.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::error;

use crate::allocation::SchedulerFlavor;
use crate::app_master::{am_main, JobSpec};
use crate::bench::harness::{parse_node_counts, scaling_run, BenchOptions, LocalBackend, PlanEntry, Workload};
use crate::cluster::{
    self, run_history_daemon, run_rm_daemon, sweep, AllocationSource, ClusterState, HistoryDaemonArgs, ProvisionOptions,
    RmDaemonArgs, CLUSTER_ENV,
};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::negotiator::HistoryStore;
use crate::node_agent::{run_agent, AgentOptions};
use crate::protocol::AppId;
use crate::resource::ResourceProfile;
use crate::tasks;

#[derive(Debug, Parser)]
#[command(name = "ephemyarn", version, about = "Ephemeral MapReduce clusters inside batch allocations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Start a cluster on the nodes of the current allocation.
    Provision(ProvisionArgs),
    /// Run a job on a provisioned cluster and wait for it.
    Run(RunArgs),
    /// Stop the cluster and remove everything but output, logs and history.
    Teardown(ClusterArg),
    /// Time the cluster lifecycle with sort workloads.
    Bench {
        #[command(subcommand)]
        workload: BenchCommand,
    },
    /// Print finished applications from the history file.
    History(HistoryArgs),
    #[command(hide = true)]
    Daemon {
        #[command(subcommand)]
        role: DaemonCommand,
    },
    #[command(hide = true)]
    Agent(AgentArgs),
    #[command(hide = true)]
    Am(AmArgs),
    #[command(hide = true)]
    Task {
        #[command(subcommand)]
        kind: TaskCommand,
    },
    #[command(hide = true)]
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ClusterArg {
    /// Cluster state file written by `provision`.
    #[arg(long, env = CLUSTER_ENV)]
    pub cluster: PathBuf,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false, id = "source")]
pub struct SourceArgs {
    /// File with one `host [slots]` line per node.
    #[arg(long, group = "source")]
    pub hostfile: Option<PathBuf>,
    /// Read the allocation from the scheduler environment (lsf or slurm).
    #[arg(long, group = "source")]
    pub from_env: Option<SchedulerFlavor>,
    /// Simulate this many nodes on the local machine.
    #[arg(long, group = "source")]
    pub local: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ProvisionArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Cores per simulated node.
    #[arg(long, default_value_t = 1)]
    pub slots: u32,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub job_id: Option<String>,
    #[arg(long, hide = true, num_args = 1.., allow_hyphen_values = true)]
    pub agent_command: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub cluster: ClusterArg,
    /// Job description file.
    #[arg(long)]
    pub job: PathBuf,
    /// Overrides the output directory of the job file.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HistoryArgs {
    #[command(flatten)]
    pub cluster: ClusterArg,
    #[arg(long)]
    pub app: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Provision and tear down only.
    Overhead(BenchArgs),
    Teragen(BenchArgs),
    Terasort(BenchArgs),
    /// Teragen, terasort and validation on each cluster.
    Full(BenchArgs),
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Node counts: `5`, `3..8` or `3,4,6,8`.
    #[arg(long, default_value = "3")]
    pub local: String,
    #[arg(long, default_value_t = 1)]
    pub slots: u32,
    #[arg(long, default_value_t = 100_000)]
    pub rows: u64,
    #[arg(long, default_value_t = 1)]
    pub repeat: u32,
    /// Mappers per core.
    #[arg(long, default_value_t = 2.0)]
    pub map_ratio: f64,
    /// Reducers per core.
    #[arg(long, default_value_t = 1.0)]
    pub reduce_ratio: f64,
    #[arg(long)]
    pub mappers: Option<u32>,
    #[arg(long)]
    pub reducers: Option<u32>,
    #[arg(long, default_value_t = 0x5eed)]
    pub seed: u64,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "bench-report")]
    pub report_dir: PathBuf,
    #[arg(long)]
    pub keep_data: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum DaemonCommand {
    Rm {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        advertise: Option<String>,
        #[arg(long)]
        addr_file: Option<PathBuf>,
        #[arg(long)]
        history_file: Option<PathBuf>,
        #[arg(long)]
        report_file: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        workers: Option<Vec<String>>,
    },
    History {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        advertise: Option<String>,
        #[arg(long)]
        addr_file: Option<PathBuf>,
        #[arg(long)]
        history_file: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct AgentArgs {
    #[arg(long)]
    pub rm: String,
    #[arg(long)]
    pub host: String,
    #[arg(long)]
    pub local_root: PathBuf,
    #[arg(long)]
    pub job_id: String,
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    #[arg(long)]
    pub staging: Option<PathBuf>,
    #[arg(long)]
    pub capacity_mb: Option<u64>,
    #[arg(long)]
    pub vcores: Option<u32>,
}

#[derive(Debug, Args)]
pub struct AmArgs {
    #[arg(long)]
    pub job: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum TaskCommand {
    TeragenMap {
        #[arg(long)]
        rows: u64,
        #[arg(long)]
        mappers: u32,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        index: u32,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        staging: Option<PathBuf>,
    },
    TerasortMap {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        reducers: u32,
        #[arg(long)]
        index: u32,
        #[arg(long)]
        staging: PathBuf,
    },
    TerasortReduce {
        #[arg(long)]
        staging: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        index: u32,
        #[arg(long)]
        mappers: u32,
        #[arg(long, env = "EPHEMYARN_SORT_BUDGET_MB", default_value_t = 256)]
        budget_mb: u64,
        #[arg(long, default_value = ".")]
        spill_dir: PathBuf,
    },
    IdentityMap {
        #[arg(long, default_value = "")]
        input: PathBuf,
        #[arg(long)]
        staging: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        reducers: u32,
        #[arg(long)]
        index: u32,
    },
    IdentityReduce {
        #[arg(long)]
        staging: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        index: u32,
        #[arg(long)]
        mappers: u32,
    },
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub job_id: String,
    #[arg(long)]
    pub host: String,
    #[arg(long)]
    pub local_root: PathBuf,
    #[arg(long)]
    pub log_dest: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub grace_ms: u64,
}

pub fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .try_init();
}

fn current_exe() -> Result<PathBuf> {
    Ok(std::env::current_exe()?)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Provision(a) => provision(a),
        Command::Run(a) => run_cmd(a),
        Command::Teardown(a) => {
            let report = cluster::teardown(&a.cluster)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.ok() { 0 } else { 1 })
        }
        Command::Bench { workload } => bench(workload),
        Command::History(a) => history(a),
        Command::Daemon { role } => daemon(role),
        Command::Agent(a) => agent(a),
        Command::Am(a) => Ok(am_main(&a.job)),
        Command::Task { kind } => task(kind).map(|_| 0),
        Command::Sweep(a) => {
            let res = sweep(
                &a.job_id,
                &[(a.host, a.local_root)],
                a.log_dest.as_deref(),
                Duration::from_millis(a.grace_ms),
                false,
            );
            println!("{}", serde_json::to_string(&res)?);
            Ok(0)
        }
    }
}

fn provision(a: ProvisionArgs) -> Result<i32> {
    let cfg = Config::resolve(a.config.as_deref())?;
    let source = match (a.source.hostfile, a.source.from_env, a.source.local) {
        (Some(p), _, _) => AllocationSource::Hostfile(p),
        (_, Some(f), _) => AllocationSource::Env(f),
        (_, _, Some(nodes)) => AllocationSource::Local { nodes, slots: a.slots },
        _ => return Err(Error::InvalidConfig("no allocation source".into())),
    };
    let mut opts = ProvisionOptions::new(current_exe()?);
    opts.job_id = a.job_id;
    opts.agent_command = a.agent_command;
    let state = cluster::provision(&source, &cfg, &opts)?;
    println!("export {CLUSTER_ENV}={}", state.state_file().display());
    Ok(0)
}

fn run_cmd(a: RunArgs) -> Result<i32> {
    let mut spec = JobSpec::load(&a.job)?;
    if let Some(out) = a.output {
        spec.output_dir = out;
    }
    let outcome = cluster::run_job(&a.cluster.cluster, &spec)?;
    println!(
        "{} {:?} in {} ms; logs in {}",
        outcome.app_id.0,
        outcome.record.state,
        outcome.wall_ms,
        outcome.logs.display()
    );
    if !outcome.succeeded() {
        eprintln!("{}", outcome.record.diagnostics);
    }
    Ok(if outcome.succeeded() { 0 } else { 1 })
}

fn bench(cmd: BenchCommand) -> Result<i32> {
    let (workload, a) = match cmd {
        BenchCommand::Overhead(a) => (Workload::Overhead, a),
        BenchCommand::Teragen(a) => (Workload::Teragen, a),
        BenchCommand::Terasort(a) => (Workload::Terasort, a),
        BenchCommand::Full(a) => (Workload::Full, a),
    };
    let cfg = Config::resolve(a.config.as_deref())?;
    let plan: Vec<PlanEntry> = parse_node_counts(&a.local)?
        .into_iter()
        .map(|nodes| PlanEntry {
            nodes,
            slots: a.slots,
            rows: a.rows,
        })
        .collect();
    let mut opts = BenchOptions::new(workload, plan, a.report_dir);
    opts.repeat = a.repeat;
    opts.map_ratio = a.map_ratio;
    opts.reduce_ratio = a.reduce_ratio;
    opts.mappers = a.mappers;
    opts.reducers = a.reducers;
    opts.seed = a.seed;
    opts.data_dir = a.data;
    opts.keep_data = a.keep_data;
    let mut backend = LocalBackend::new(cfg, current_exe()?);
    let report = scaling_run(&mut backend, &opts)?;
    for r in &report.rows {
        println!(
            "{:<10} {:<16} nodes={:<3} cores={:<4} {:>8} ms {}",
            r.run_id,
            r.phase.name(),
            r.nodes,
            r.cores,
            r.wall_ms,
            if r.ok { "ok" } else { "FAILED" }
        );
    }
    for e in &report.errors {
        eprintln!("{e}");
    }
    println!("report written to {}", opts.report_dir.display());
    Ok(if report.ok() { 0 } else { 1 })
}

fn history(a: HistoryArgs) -> Result<i32> {
    let state = ClusterState::load(&a.cluster.cluster)?;
    let store = HistoryStore::new(state.plan.history_file());
    match a.app {
        Some(id) => println!("{}", serde_json::to_string_pretty(&store.query_history(&AppId(id))?)?),
        None => {
            for r in store.all()? {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
    }
    Ok(0)
}

fn daemon(role: DaemonCommand) -> Result<i32> {
    match role {
        DaemonCommand::Rm {
            listen,
            advertise,
            addr_file,
            history_file,
            report_file,
            workers,
        } => run_rm_daemon(
            Config::resolve(None)?,
            RmDaemonArgs {
                listen,
                advertise,
                addr_file,
                workers,
                history_file,
                report_file,
            },
        )?,
        DaemonCommand::History {
            listen,
            advertise,
            addr_file,
            history_file,
        } => run_history_daemon(HistoryDaemonArgs {
            listen,
            advertise,
            addr_file,
            history_file,
        })?,
    }
    Ok(0)
}

/// Entry point of the node agent.
pub fn agent(a: AgentArgs) -> Result<i32> {
    let cfg = Config::resolve(None)?;
    let capacity = ResourceProfile::new(
        a.capacity_mb.unwrap_or(cfg.node_capacity.memory_mb),
        a.vcores.unwrap_or(cfg.node_capacity.vcores),
    );
    let summary = run_agent(AgentOptions {
        rm: a.rm,
        host: a.host,
        capacity,
        job_dir: a.local_root.join(&a.job_id),
        job_id: Some(a.job_id),
        log_dir: a.log_dir,
        shared_staging: a.staging,
        heartbeat_ms: cfg.heartbeat_interval_ms,
        node_timeout_ms: cfg.node_timeout_ms,
        kill_grace_ms: cfg.kill_grace_ms,
        register_timeout_ms: cfg.ready_timeout_ms,
    })?;
    Ok(if summary.failures.is_empty() { 0 } else { 1 })
}

fn opt(p: &Path) -> Option<&Path> {
    (!p.as_os_str().is_empty()).then_some(p)
}

fn task(kind: TaskCommand) -> Result<u64> {
    match kind {
        TaskCommand::TeragenMap {
            rows,
            mappers,
            seed,
            index,
            output,
            staging,
        } => tasks::teragen_map(rows, mappers, seed, index, &output, staging.as_deref()),
        TaskCommand::TerasortMap {
            input,
            splits,
            reducers,
            index,
            staging,
        } => tasks::terasort_map(&input, &splits, reducers, index, &staging),
        TaskCommand::TerasortReduce {
            staging,
            output,
            index,
            mappers,
            budget_mb,
            spill_dir,
        } => tasks::terasort_reduce(&staging, &output, index, mappers, budget_mb, &spill_dir),
        TaskCommand::IdentityMap {
            input,
            staging,
            output,
            reducers,
            index,
        } => tasks::identity_map(opt(&input), &staging, &output, reducers, index),
        TaskCommand::IdentityReduce {
            staging,
            output,
            index,
            mappers,
        } => tasks::identity_reduce(&staging, &output, index, mappers),
    }
}
