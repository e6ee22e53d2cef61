use std::path::PathBuf;
use std::time::Duration;

use clap::{Args as ClapArgs, Parser, Subcommand};
use iotcloud::bench::report::emit_report;
use iotcloud::bench::{run_http_load, run_mqtt_load, BenchConfig, BenchMode};

/// Closed-loop load generator for the HTTP service and the MQTT broker.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    mode: Mode,
}

#[derive(Subcommand)]
enum Mode {
    /// Clients repeatedly GET a page over keep-alive connections.
    Http(Common),
    /// Clients publish to their own topic and time the loopback delivery.
    Mqtt(Common),
}

#[derive(ClapArgs)]
struct Common {
    #[arg(long)]
    target: String,
    #[arg(long, default_value_t = 100)]
    clients: u32,
    /// Run length [default: 180s for http, 120s for mqtt].
    #[arg(long, value_parser = parse_secs)]
    duration: Option<Duration>,
    /// Per-operation timeout.
    #[arg(long, value_parser = parse_secs, default_value = "10")]
    timeout: Duration,
    /// MQTT publish interval.
    #[arg(long, value_parser = parse_secs, default_value = "10")]
    interval: Duration,
    /// Warm-up excluded from the measurement window [default: 10% of duration].
    #[arg(long, value_parser = parse_secs)]
    ramp: Option<Duration>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// MQTT QoS for publish and subscribe.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=2))]
    qos: u8,
    /// HTTP request path.
    #[arg(long, default_value = "/bench/page")]
    path: String,
    /// Curve label in the plots [default: the mode].
    #[arg(long)]
    series: Option<String>,
    /// Process to sample CPU utilisation from; repeatable.
    #[arg(long = "cpu-pid")]
    cpu_pids: Vec<u32>,
    #[arg(long, value_parser = parse_secs, default_value = "500ms")]
    cpu_interval: Duration,
    /// Directory receiving the CSVs and plot.py.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Plain numbers are seconds; otherwise a humantime duration like `500ms`.
fn parse_secs(s: &str) -> Result<Duration, String> {
    match s.parse::<f64>() {
        Ok(secs) => Duration::try_from_secs_f64(secs).map_err(|e| e.to_string()),
        Err(_) => humantime::parse_duration(s).map_err(|e| e.to_string()),
    }
}

fn config(mode: BenchMode, c: Common) -> (BenchConfig, Option<PathBuf>) {
    let mut cfg = BenchConfig::new(mode, c.target, c.clients);
    if let Some(d) = c.duration {
        cfg = cfg.with_duration(d);
    }
    if let Some(r) = c.ramp {
        cfg.ramp = r;
    }
    cfg.timeout = c.timeout;
    cfg.interval = c.interval;
    cfg.seed = c.seed;
    cfg.qos = c.qos;
    cfg.path = c.path;
    if let Some(s) = c.series {
        cfg.series = s;
    }
    cfg.cpu_pids = c.cpu_pids;
    cfg.cpu_interval = c.cpu_interval;
    (cfg, c.out)
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    iotcloud::init_tracing();
    let (cfg, out) = match Cli::parse().mode {
        Mode::Http(c) => config(BenchMode::Http, c),
        Mode::Mqtt(c) => config(BenchMode::Mqtt, c),
    };
    anyhow::ensure!(cfg.clients > 0, "--clients must be positive");
    anyhow::ensure!(cfg.ramp < cfg.duration, "--ramp must be shorter than --duration");
    let report = match cfg.mode {
        BenchMode::Http => run_http_load(&cfg).await?,
        BenchMode::Mqtt => run_mqtt_load(&cfg).await?,
    };
    if let Some(dir) = out {
        emit_report(&report, &dir)?;
    }
    println!("{}", report.summary_json());
    Ok(())
}
