use std::time::Duration;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use iotcloud::balancer::{start_balancer, BackendSpec, BalancerConfig, Mode};

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Http,
    Tcp,
}

/// HTTP (weighted round robin) or TCP (least connections) load balancer.
#[derive(Parser)]
#[command(version)]
struct Args {
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    listen: String,
    /// `[pool@]host:port[:weight]`; repeat for each backend.
    #[arg(long = "backend", required = true)]
    backends: Vec<BackendSpec>,
    /// `prefix=pool`; first match wins (HTTP mode).
    #[arg(long = "rule", value_parser = parse_rule)]
    rules: Vec<(String, String)>,
    #[arg(long, default_value = "2s", value_parser = humantime::parse_duration)]
    check_interval: Duration,
    #[arg(long, default_value = "/health")]
    health_path: String,
    /// TCP mode: address answering each connection with stats JSON.
    #[arg(long)]
    admin: Option<String>,
}

fn parse_rule(s: &str) -> anyhow::Result<(String, String)> {
    let (prefix, pool) = s.split_once('=').context("rule must be prefix=pool")?;
    Ok((prefix.to_string(), pool.to_string()))
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    iotcloud::init_tracing();
    let args = Args::parse();
    let mode = match args.mode {
        ModeArg::Http => Mode::Http,
        ModeArg::Tcp => Mode::Tcp,
    };
    let mut cfg = BalancerConfig::new(mode, args.listen);
    cfg.backends = args.backends;
    cfg.rules = args.rules;
    cfg.check_interval = args.check_interval;
    cfg.health_path = args.health_path;
    cfg.admin = args.admin;
    let mut lb = start_balancer(cfg).await?;
    println!(
        "{}",
        serde_json::json!({
            "event": "listening",
            "listen": lb.addr.to_string(),
            "admin": lb.admin_addr.map(|a| a.to_string()),
            "pid": std::process::id(),
        })
    );
    tokio::select! {
        _ = lb.wait() => anyhow::bail!("balancer stopped"),
        _ = tokio::signal::ctrl_c() => Ok(()),
    }
}
