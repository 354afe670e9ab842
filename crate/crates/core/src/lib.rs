//! Ephemeral YARN-style clusters inside HPC batch allocations.
//!
//! A batch job hands over a set of nodes; [`cluster::provision`] turns them
//! into a resource manager, a history service and node agents, MapReduce jobs
//! run in containers and shuffle through the shared filesystem, and
//! [`cluster::teardown`] removes everything except job output, logs and
//! history. The [`bench`] module drives Teragen/Terasort/Teravalidate runs
//! over the whole lifecycle.

pub mod allocation;
pub mod app_master;
pub mod bench;
pub mod cli;
pub mod cluster;
pub mod config;
pub mod error;
pub mod negotiator;
pub mod node_agent;
pub mod protocol;
pub mod resource;
pub mod tasks;
pub mod util;

pub use allocation::{assign_roles, parse_hostfile, plan_directories, ClusterLayout, DirectoryPlan, NodeAllocation};
pub use config::Config;
pub use error::{Error, Result};
pub use resource::{normalize_request, ResourceProfile};
