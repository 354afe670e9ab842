//! The resource manager: node registration and liveness, FIFO first-fit
//! container arbitration, application tracking and job history.

pub mod history;
pub mod manager;
pub mod scheduler;
pub mod server;

pub use history::{query_history, HistoryStore};
pub use manager::{Assignment, Container, NodeState, ResourceManager};
pub use scheduler::{schedule, NodeSlot, PendingAsk, Placement};
pub use server::{spawn_history_server, spawn_resource_manager, ServerHandle};
