//! Backend selection policies and health tracking for the load balancer.
//!
//! Pools are slices of [`BackendState`] indexed by position; the position
//! doubles as the backend id for tie-breaking.

use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackendState {
    pub weight: u32,
    pub active_connections: u32,
    pub healthy: bool,
}

impl BackendState {
    pub fn new(weight: u32) -> Self {
        BackendState { weight, active_connections: 0, healthy: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("no healthy backend available")]
pub struct NoBackend;

/// Smooth weighted round robin.
///
/// Each pick adds every healthy backend's weight to its running score,
/// selects the highest score (lowest index on ties) and subtracts the total
/// healthy weight from the winner.
#[derive(Debug, Clone, Default)]
pub struct SmoothWrr {
    current: Vec<i64>,
}

impl SmoothWrr {
    pub fn new() -> Self {
        SmoothWrr::default()
    }

    pub fn next(&mut self, pool: &[BackendState]) -> Result<usize, NoBackend> {
        if self.current.len() != pool.len() {
            self.current.resize(pool.len(), 0);
        }
        let mut total: i64 = 0;
        let mut best: Option<usize> = None;
        for (i, backend) in pool.iter().enumerate() {
            if !backend.healthy || backend.weight == 0 {
                continue;
            }
            let weight = i64::from(backend.weight);
            self.current[i] += weight;
            total += weight;
            if best.is_none_or(|b| self.current[i] > self.current[b]) {
                best = Some(i);
            }
        }
        let chosen = best.ok_or(NoBackend)?;
        self.current[chosen] -= total;
        Ok(chosen)
    }
}

/// Healthy backend with the fewest active connections, lowest index on ties.
pub fn least_conn_next(pool: &[BackendState]) -> Result<usize, NoBackend> {
    least_conn_excluding(pool, None)
}

/// As [`least_conn_next`] but never returns `skip`; used to retry after a
/// failed connect.
pub fn least_conn_excluding(pool: &[BackendState], skip: Option<usize>) -> Result<usize, NoBackend> {
    pool.iter()
        .enumerate()
        .filter(|(i, b)| b.healthy && Some(*i) != skip)
        .min_by_key(|(i, b)| (b.active_connections, *i))
        .map(|(i, _)| i)
        .ok_or(NoBackend)
}

/// Consecutive probe results needed to flip a backend's health.
pub const HEALTH_THRESHOLD: u32 = 2;

/// Two consecutive failures mark a backend down; two consecutive successes
/// bring it back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HealthTracker {
    healthy: bool,
    streak: u32,
}

impl Default for HealthTracker {
    fn default() -> Self {
        HealthTracker { healthy: true, streak: 0 }
    }
}

impl HealthTracker {
    pub fn healthy(&self) -> bool {
        self.healthy
    }

    /// Records one probe result and returns the resulting health.
    pub fn observe(&mut self, probe_ok: bool) -> bool {
        if probe_ok == self.healthy {
            self.streak = 0;
        } else {
            self.streak += 1;
            if self.streak >= HEALTH_THRESHOLD {
                self.healthy = probe_ok;
                self.streak = 0;
            }
        }
        self.healthy
    }
}
