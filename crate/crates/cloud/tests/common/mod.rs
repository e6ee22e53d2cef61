//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::net::TcpListener;
use std::path::Path;
use std::time::{Duration, Instant};

use iotcloud::store::{Manifest, NodeConn, NodeSpec};

/// Reserves `n` distinct loopback ports by binding and releasing them.
pub fn free_ports(n: usize) -> Vec<u16> {
    let held: Vec<TcpListener> = (0..n).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    held.iter().map(|l| l.local_addr().unwrap().port()).collect()
}

/// `primaries` nodes with ids 0.., plus a standby (id 100 + p) for each
/// primary listed in `standbys`.
pub fn manifest(dir: &Path, primaries: u16, standbys: &[u16], strict: bool) -> Manifest {
    let ports = free_ports(primaries as usize + standbys.len());
    let mut nodes: Vec<NodeSpec> = (0..primaries)
        .map(|id| NodeSpec {
            id,
            addr: format!("127.0.0.1:{}", ports[id as usize]),
            slots: None,
            standby_of: None,
            log: None,
        })
        .collect();
    for (i, &p) in standbys.iter().enumerate() {
        nodes.push(NodeSpec {
            id: 100 + p,
            addr: format!("127.0.0.1:{}", ports[primaries as usize + i]),
            slots: None,
            standby_of: Some(p),
            log: None,
        });
    }
    let m = Manifest { strict_replication: strict, nodes, base_dir: dir.to_path_buf() };
    m.validate().unwrap();
    m
}

/// Writes the manifest next to its logs and returns the path.
pub fn write_manifest(m: &Manifest) -> std::path::PathBuf {
    let path = m.base_dir.join("cluster.toml");
    std::fs::write(&path, m.to_toml()).unwrap();
    path
}

/// Waits until every node reports every peer up.
pub async fn wait_meshed(m: &Manifest, timeout: Duration) {
    let start = Instant::now();
    'outer: loop {
        assert!(start.elapsed() < timeout, "cluster did not mesh in {timeout:?}");
        for node in &m.nodes {
            let Ok(mut conn) = NodeConn::connect(&node.addr).await else {
                tokio::time::sleep(Duration::from_millis(100)).await;
                continue 'outer;
            };
            let stats = conn.stats().await.unwrap();
            let peers = stats["peers"].as_object().unwrap();
            if peers.len() != m.nodes.len() - 1 || !peers.values().all(|v| v.as_bool() == Some(true)) {
                tokio::time::sleep(Duration::from_millis(100)).await;
                continue 'outer;
            }
        }
        return;
    }
}

/// Polls `f` every 50 ms until it returns true.
pub async fn eventually<F, Fut>(timeout: Duration, what: &str, mut f: F)
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = bool>,
{
    let start = Instant::now();
    while !f().await {
        assert!(start.elapsed() < timeout, "timed out waiting for {what}");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}
