//! Strict FIFO, first-fit container placement.

use std::collections::VecDeque;

use crate::protocol::AppId;
use crate::resource::ResourceProfile;

/// An outstanding request for `remaining` identical containers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingAsk {
    pub seq: u64,
    pub app_id: AppId,
    pub resource: ResourceProfile,
    pub remaining: u32,
}

/// The scheduler's view of one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSlot {
    pub capacity: ResourceProfile,
    pub used: ResourceProfile,
    pub schedulable: bool,
}

impl NodeSlot {
    fn free(&self) -> ResourceProfile {
        self.capacity.saturating_sub(self.used)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub ask_seq: u64,
    pub app_id: AppId,
    pub node: usize,
    pub resource: ResourceProfile,
}

/// Places containers for the queue head, one at a time, on the first node
/// (in slice order) with room. A head that cannot be placed completely stays
/// at the head and blocks everything behind it. Mutates `used` and the
/// queue; returns placements in the order they were made.
pub fn schedule(queue: &mut VecDeque<PendingAsk>, nodes: &mut [NodeSlot]) -> Vec<Placement> {
    let mut placed = Vec::new();
    while let Some(head) = queue.front_mut() {
        while head.remaining > 0 {
            let Some(idx) = nodes
                .iter()
                .position(|n| n.schedulable && n.free().fits(&head.resource))
            else {
                return placed;
            };
            nodes[idx].used = nodes[idx].used + head.resource;
            head.remaining -= 1;
            placed.push(Placement {
                ask_seq: head.seq,
                app_id: head.app_id.clone(),
                node: idx,
                resource: head.resource,
            });
        }
        queue.pop_front();
    }
    placed
}
