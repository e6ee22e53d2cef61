use anyhow::Context;
use clap::Parser;
use iotcloud::httpd::{start_httpd, HttpdConfig, StoreBackend};
use iotcloud::store::Manifest;

/// HTTP resource server with the fixed /bench/page.
#[derive(Parser)]
#[command(version)]
struct Args {
    #[arg(long, default_value = "0.0.0.0:8080")]
    listen: String,
    /// `memory`, or `slot:<manifest.toml>` to keep resources in the slot store.
    #[arg(long, default_value = "memory")]
    store: String,
    #[arg(long, default_value = "/health")]
    health_path: String,
}

fn parse_store(s: &str) -> anyhow::Result<StoreBackend> {
    match s.split_once(':') {
        None if s == "memory" => Ok(StoreBackend::Memory),
        Some(("slot", path)) => Ok(StoreBackend::Slot(
            Manifest::load(std::path::Path::new(path)).with_context(|| format!("loading manifest {path}"))?,
        )),
        _ => anyhow::bail!("--store must be `memory` or `slot:<manifest>`, got {s:?}"),
    }
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    iotcloud::init_tracing();
    let args = Args::parse();
    let mut cfg = HttpdConfig::new(args.listen);
    cfg.store = parse_store(&args.store)?;
    cfg.health_path = args.health_path;
    let mut server = start_httpd(cfg).await?;
    println!("{}", serde_json::json!({"event": "listening", "listen": server.addr.to_string(), "pid": std::process::id()}));
    tokio::select! {
        _ = server.wait() => anyhow::bail!("server stopped"),
        _ = tokio::signal::ctrl_c() => Ok(()),
    }
}
