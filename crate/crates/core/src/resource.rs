//! Memory/vcore quantities and request normalization.

use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};

/// A (memory, vcores) quantity: a node capacity, a usage total or a container lease.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceProfile {
    pub memory_mb: u64,
    pub vcores: u32,
}

impl ResourceProfile {
    pub const ZERO: ResourceProfile = ResourceProfile { memory_mb: 0, vcores: 0 };

    pub const fn new(memory_mb: u64, vcores: u32) -> Self {
        ResourceProfile { memory_mb, vcores }
    }

    /// True when `other` fits in both dimensions.
    pub fn fits(&self, other: &ResourceProfile) -> bool {
        other.memory_mb <= self.memory_mb && other.vcores <= self.vcores
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }

    pub fn saturating_sub(self, rhs: ResourceProfile) -> ResourceProfile {
        ResourceProfile {
            memory_mb: self.memory_mb.saturating_sub(rhs.memory_mb),
            vcores: self.vcores.saturating_sub(rhs.vcores),
        }
    }
}

impl Add for ResourceProfile {
    type Output = ResourceProfile;
    fn add(self, rhs: Self) -> Self {
        ResourceProfile {
            memory_mb: self.memory_mb + rhs.memory_mb,
            vcores: self.vcores + rhs.vcores,
        }
    }
}

impl Sub for ResourceProfile {
    type Output = ResourceProfile;
    fn sub(self, rhs: Self) -> Self {
        ResourceProfile {
            memory_mb: self.memory_mb - rhs.memory_mb,
            vcores: self.vcores - rhs.vcores,
        }
    }
}

impl std::iter::Sum for ResourceProfile {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ResourceProfile::ZERO, Add::add)
    }
}

impl fmt::Display for ResourceProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{} MB, {} vcores>", self.memory_mb, self.vcores)
    }
}

/// Rounds memory up to a positive multiple of the minimum allocation and
/// raises vcores to the minimum. Requests that cannot fit on any node are
/// rejected here so the scheduler never has to wait on them forever.
pub fn normalize_request(requested: ResourceProfile, cfg: &Config) -> Result<ResourceProfile> {
    let step = cfg.min_alloc_mb.max(1);
    let units = requested.memory_mb.div_ceil(step).max(1);
    let memory_mb = units * step;
    let vcores = requested.vcores.max(cfg.min_alloc_vcores);
    if memory_mb > cfg.node_capacity.memory_mb || vcores > cfg.node_capacity.vcores {
        return Err(Error::Unsatisfiable {
            memory_mb,
            capacity_mb: cfg.node_capacity.memory_mb,
        });
    }
    Ok(ResourceProfile { memory_mb, vcores })
}
