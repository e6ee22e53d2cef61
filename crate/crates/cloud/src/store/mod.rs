//! Slot-store runtime: nodes, the cluster client, manifest and log files.

mod client;
mod logfile;
mod manifest;
mod node;

pub use client::{ClientError, ClusterClient, NodeConn, Routed, RETRY_BUDGET};
pub use logfile::{read_log, LogFile};
pub use manifest::{Manifest, NodeSpec};
pub use node::{start_node, NodeHandle, PING_INTERVAL, PING_MISSES};
