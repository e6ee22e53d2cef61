use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use iotcloud::store::{Manifest, NodeConn};
use iotcloud_core::store::Frame;
use iotcloud_core::NodeId;

/// Inspects and operates a slot-store cluster.
#[derive(Parser)]
#[command(version)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Node to query; defaults to the first one that answers.
    #[arg(long)]
    node: Option<u16>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the slot table.
    Slots,
    /// Declare a node failed and hand its slots to its standby.
    Failover { id: u16 },
    /// Print per-node statistics as JSON lines.
    Stats,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let manifest = Manifest::load(&args.config)?;
    let targets: Vec<_> = manifest
        .nodes
        .iter()
        .filter(|n| args.node.is_none_or(|id| id == n.id))
        .collect();
    anyhow::ensure!(!targets.is_empty(), "no matching node in the manifest");
    match args.command {
        Command::Slots => {
            for node in &targets {
                let Ok(mut conn) = NodeConn::connect(&node.addr).await else { continue };
                let map = conn.slots().await?;
                for (range, owner) in map.intervals() {
                    println!("{range}\t{owner}");
                }
                return Ok(());
            }
            anyhow::bail!("no node answered");
        }
        Command::Failover { id } => {
            let mut told = 0;
            for node in targets.iter().filter(|n| n.id != id) {
                let Ok(mut conn) = NodeConn::connect(&node.addr).await else { continue };
                match conn.call(&Frame::Failover { failed: NodeId(id) }).await? {
                    Frame::Ok => told += 1,
                    other => anyhow::bail!("node {} refused failover: {other:?}", node.id),
                }
            }
            anyhow::ensure!(told > 0, "no node answered");
            println!("failover of node {id} sent to {told} nodes");
            Ok(())
        }
        Command::Stats => {
            for node in &targets {
                match NodeConn::connect(&node.addr).await {
                    Ok(mut conn) => {
                        let stats = conn.stats().await.with_context(|| format!("node {}", node.id))?;
                        println!("{stats}");
                    }
                    Err(e) => println!("{}", serde_json::json!({"node": node.id, "error": e.to_string()})),
                }
            }
            Ok(())
        }
    }
}
