//! Cluster manifest: the static membership, slot intervals and standby pairs.
//!
//! ```toml
//! strict_replication = true
//!
//! [[node]]
//! id = 0
//! addr = "127.0.0.1:7000"
//! log = "node0.log"
//! slots = [0, 8191]
//!
//! [[node]]
//! id = 2
//! addr = "127.0.0.1:7002"
//! standby_of = 0
//! ```
//!
//! When no primary lists `slots`, primaries get equal intervals in id order.
//! Relative log paths resolve against the manifest's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use iotcloud_core::{NodeId, SlotMap, SlotRange};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: u16,
    pub addr: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slots: Option<[u16; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standby_of: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// Acknowledge writes only after the standby has applied them.
    #[serde(default)]
    pub strict_replication: bool,
    #[serde(rename = "node")]
    pub nodes: Vec<NodeSpec>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> anyhow::Result<Manifest> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        let mut manifest: Manifest =
            toml::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        ensure!(self.primaries().next().is_some(), "manifest has no primary nodes");
        let mut ids = BTreeSet::new();
        let mut addrs = BTreeSet::new();
        for n in &self.nodes {
            ensure!(ids.insert(n.id), "node id {} listed twice", n.id);
            ensure!(addrs.insert(&n.addr), "address {} listed twice", n.addr);
        }
        let mut guarded = BTreeSet::new();
        for n in &self.nodes {
            if let Some(primary) = n.standby_of {
                let Some(p) = self.node(NodeId(primary)) else {
                    bail!("node {} is standby of unknown node {primary}", n.id);
                };
                ensure!(p.standby_of.is_none(), "node {} is standby of another standby", n.id);
                ensure!(guarded.insert(primary), "node {primary} has more than one standby");
                if let (Some(s), Some(ps)) = (n.slots, p.slots) {
                    ensure!(s == ps, "standby {} must carry the slot range of node {primary}", n.id);
                }
            }
        }
        let with_slots = self.primaries().filter(|n| n.slots.is_some()).count();
        ensure!(
            with_slots == 0 || with_slots == self.primaries().count(),
            "either every primary lists slots or none does"
        );
        self.slot_map()?;
        Ok(())
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id.0)
    }

    pub fn primaries(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().filter(|n| n.standby_of.is_none())
    }

    pub fn standby_for(&self, primary: NodeId) -> Option<NodeId> {
        self.nodes
            .iter()
            .find(|n| n.standby_of == Some(primary.0))
            .map(|n| NodeId(n.id))
    }

    pub fn slot_map(&self) -> anyhow::Result<SlotMap> {
        let mut primaries: Vec<&NodeSpec> = self.primaries().collect();
        primaries.sort_by_key(|n| n.id);
        if primaries.iter().all(|n| n.slots.is_none()) {
            let ids: Vec<NodeId> = primaries.iter().map(|n| NodeId(n.id)).collect();
            return Ok(SlotMap::equal_intervals(&ids)?);
        }
        let mut intervals = Vec::new();
        for n in primaries {
            let [lo, hi] = n.slots.expect("checked by validate");
            intervals.push((SlotRange::new(lo, hi)?, NodeId(n.id)));
        }
        Ok(SlotMap::new(intervals)?)
    }

    /// Log path of a node; defaults to `node-<id>.log` next to the manifest.
    pub fn log_path(&self, id: NodeId) -> PathBuf {
        let configured = self
            .node(id)
            .and_then(|n| n.log.clone())
            .unwrap_or_else(|| PathBuf::from(format!("node-{}.log", id.0)));
        if configured.is_absolute() {
            configured
        } else {
            self.base_dir.join(configured)
        }
    }
}
