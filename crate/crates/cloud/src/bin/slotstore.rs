use std::path::PathBuf;

use clap::Parser;
use iotcloud::store::{start_node, Manifest};
use iotcloud_core::NodeId;

/// Runs one slot-store node from a cluster manifest.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Cluster manifest (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Id of the node to run.
    #[arg(long)]
    node: u16,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    iotcloud::init_tracing();
    let args = Args::parse();
    let manifest = Manifest::load(&args.config)?;
    let mut node = start_node(manifest, NodeId(args.node)).await?;
    tracing::info!(node = args.node, addr = %node.addr, "slotstore listening");
    tokio::select! {
        _ = node.wait() => anyhow::bail!("node task exited"),
        _ = tokio::signal::ctrl_c() => Ok(()),
    }
}
