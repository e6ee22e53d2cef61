use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use iotcloud::broker::cluster::{announce, available_cores, pin_to_core, supervise, ClusterSpec};
use iotcloud::broker::{start_broker, BrokerConfig, BusMode, EventLog, DEFAULT_KEEPALIVE};
use iotcloud::store::Manifest;
use serde_json::json;

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Role {
    Master,
    Slave,
}

/// MQTT broker instance, or a master that supervises several.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Listen address; slave i of a cluster listens on port + i.
    #[arg(long, default_value = "0.0.0.0:1883")]
    listen: SocketAddr,
    /// Total instances including the master.
    #[arg(long, default_value_t = 1)]
    instances: u32,
    /// Slot-store manifest used as the cross-instance bus.
    #[arg(long)]
    bus: Option<PathBuf>,
    /// Keepalive in seconds applied to clients that send 0.
    #[arg(long, default_value_t = DEFAULT_KEEPALIVE)]
    keepalive_default: u16,
    /// Retransmit unacknowledged QoS 1/2 messages after this long.
    #[arg(long, default_value = "5s", value_parser = humantime::parse_duration)]
    ack_timeout: Duration,
    /// JSON event log: a file path, or - for stdout.
    #[arg(long)]
    event_log: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Role::Master)]
    role: Role,
    /// Instance index (set by the master for its slaves).
    #[arg(long, default_value_t = 0)]
    index: u32,
    /// Do not pin the instance to a CPU core.
    #[arg(long)]
    no_pin: bool,
}

fn main() -> anyhow::Result<()> {
    iotcloud::init_tracing();
    let args = Args::parse();
    anyhow::ensure!(args.instances >= 1, "--instances must be at least 1");
    if !args.no_pin {
        if let Some(core) = pin_to_core(args.index) {
            tracing::info!(index = args.index, core, "pinned");
        }
    }
    // One instance, one core: a single-threaded runtime.
    tokio::runtime::Builder::new_current_thread().enable_all().build()?.block_on(run(args))
}

fn child_args(args: &Args) -> Vec<String> {
    let mut out = vec![
        "--keepalive-default".to_string(),
        args.keepalive_default.to_string(),
        "--ack-timeout".to_string(),
        humantime::format_duration(args.ack_timeout).to_string(),
    ];
    if let Some(bus) = &args.bus {
        out.extend(["--bus".to_string(), bus.display().to_string()]);
    }
    if let Some(log) = &args.event_log {
        out.extend(["--event-log".to_string(), log.display().to_string()]);
    }
    if args.no_pin {
        out.push("--no-pin".to_string());
    }
    out
}

async fn run(args: Args) -> anyhow::Result<()> {
    let bus = match &args.bus {
        Some(path) => BusMode::Store { manifest: Manifest::load(path)?, index: args.index as usize },
        None => BusMode::Local,
    };
    anyhow::ensure!(
        args.instances == 1 || args.bus.is_some(),
        "a multi-instance cluster needs --bus so instances can exchange messages"
    );
    let events = match &args.event_log {
        Some(path) => Some(EventLog::open(path, args.index).with_context(|| format!("opening {}", path.display()))?),
        None => None,
    };
    let mut cfg = BrokerConfig::new(args.listen.to_string());
    cfg.instance = args.index;
    cfg.keepalive_default = args.keepalive_default;
    cfg.ack_timeout = args.ack_timeout;
    cfg.bus = bus;
    cfg.events = events;

    let spec = ClusterSpec {
        exe: std::env::current_exe()?,
        instances: args.instances,
        base: args.listen,
        child_args: child_args(&args),
    };
    if args.role == Role::Master && args.instances > 1 {
        if args.instances as usize > available_cores() {
            tracing::warn!(instances = args.instances, cores = available_cores(), "more instances than CPU cores");
        }
        spec.check_ports()?;
    }
    let mut broker = start_broker(cfg).await?;
    announce("listening", json!({"index": args.index, "pid": std::process::id(), "listen": broker.addr.to_string()}));

    match args.role {
        Role::Master if args.instances > 1 => tokio::select! {
            r = supervise(spec) => r,
            _ = broker.wait() => anyhow::bail!("broker stopped"),
            _ = shutdown_signal() => Ok(()),
        },
        Role::Master => tokio::select! {
            _ = broker.wait() => anyhow::bail!("broker stopped"),
            _ = shutdown_signal() => Ok(()),
        },
        Role::Slave => tokio::select! {
            _ = broker.wait() => anyhow::bail!("broker stopped"),
            _ = orphaned() => Ok(()),
            _ = shutdown_signal() => Ok(()),
        },
    }
}

async fn shutdown_signal() {
    let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()).expect("signal handler");
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = term.recv() => {}
    }
}

/// Resolves once the master that started this slave is gone.
async fn orphaned() {
    let parent = std::os::unix::process::parent_id();
    loop {
        tokio::time::sleep(Duration::from_millis(500)).await;
        if std::os::unix::process::parent_id() != parent {
            return;
        }
    }
}
