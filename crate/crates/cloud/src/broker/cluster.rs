//! Master/slave process supervision.
//!
//! The master runs instance 0 itself and launches instances 1..n as child
//! processes of the same executable, each on its own port (base + index).
//! A child that exits abnormally is restarted after a fixed backoff.

use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::process::ExitStatus;
use std::time::Duration;

use anyhow::bail;
use serde_json::json;
use tokio::process::{Child, Command};
use tokio::task::JoinSet;

pub const RESTART_BACKOFF: Duration = Duration::from_millis(500);

pub struct ClusterSpec {
    pub exe: PathBuf,
    pub instances: u32,
    pub base: SocketAddr,
    /// Arguments every child gets in addition to its role, index and port.
    pub child_args: Vec<String>,
}

impl ClusterSpec {
    pub fn addr_of(&self, index: u32) -> SocketAddr {
        SocketAddr::new(self.base.ip(), self.base.port() + index as u16)
    }

    /// Fails naming the first child port that is already bound.
    pub fn check_ports(&self) -> anyhow::Result<()> {
        for index in 1..self.instances {
            let addr = self.addr_of(index);
            if TcpListener::bind(addr).is_err() {
                bail!("port {} is already bound (instance {index})", addr.port());
            }
        }
        Ok(())
    }

    fn spawn(&self, index: u32) -> std::io::Result<Child> {
        Command::new(&self.exe)
            .arg("--role")
            .arg("slave")
            .arg("--index")
            .arg(index.to_string())
            .arg("--listen")
            .arg(self.addr_of(index).to_string())
            .args(&self.child_args)
            .kill_on_drop(true)
            .spawn()
    }
}

/// Supervisor events go to stdout as JSON lines.
pub fn announce(event: &str, fields: serde_json::Value) {
    let mut line = json!({"event": event});
    if let (Some(obj), serde_json::Value::Object(extra)) = (line.as_object_mut(), fields) {
        obj.extend(extra);
    }
    println!("{line}");
}

/// Runs forever, keeping every slave alive.
pub async fn supervise(spec: ClusterSpec) -> anyhow::Result<()> {
    let mut running: JoinSet<(u32, std::io::Result<ExitStatus>)> = JoinSet::new();
    for index in 1..spec.instances {
        let mut child = spec.spawn(index)?;
        announce("spawn", json!({"index": index, "pid": child.id(), "listen": spec.addr_of(index).to_string()}));
        running.spawn(async move { (index, child.wait().await) });
    }
    while let Some(done) = running.join_next().await {
        let (index, status) = done?;
        let clean = matches!(&status, Ok(s) if s.success());
        announce(
            "exit",
            json!({"index": index, "status": status.as_ref().map(|s| s.to_string()).unwrap_or_else(|e| e.to_string())}),
        );
        if clean {
            continue;
        }
        tokio::time::sleep(RESTART_BACKOFF).await;
        match spec.spawn(index) {
            Ok(mut child) => {
                announce("spawn", json!({"index": index, "pid": child.id(), "listen": spec.addr_of(index).to_string(), "restart": true}));
                running.spawn(async move { (index, child.wait().await) });
            }
            Err(e) => {
                tracing::error!(index, error = %e, "respawn failed");
                running.spawn(async move {
                    tokio::time::sleep(RESTART_BACKOFF).await;
                    (index, Err(e))
                });
            }
        }
    }
    Ok(())
}

/// Pins the calling thread to core `index mod cores`. Best effort.
pub fn pin_to_core(index: u32) -> Option<usize> {
    let cores = core_affinity::get_core_ids()?;
    let core = *cores.get(index as usize % cores.len())?;
    core_affinity::set_for_current(core).then_some(core.id)
}

pub fn available_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
