//! Closed-loop load generation against the HTTP service and the broker,
//! with per-process CPU sampling and CSV reporting.

pub mod cpu;
mod http_load;
mod mqtt_load;
pub mod report;
pub mod stats;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use iotcloud_core::metrics::LatencyHistogram;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cpu::{sample_cpu, CpuSample};
pub use http_load::run_http_load;
pub use mqtt_load::run_mqtt_load;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Http,
    Mqtt,
}

impl BenchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::Http => "http",
            BenchMode::Mqtt => "mqtt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub mode: BenchMode,
    pub clients: u32,
    #[serde(with = "secs")]
    pub duration: Duration,
    /// HTTP: a request unanswered this long fails. MQTT: a message not
    /// looped back this long fails.
    #[serde(with = "secs")]
    pub timeout: Duration,
    /// MQTT publish period per client.
    #[serde(with = "secs")]
    pub interval: Duration,
    pub target: String,
    /// Excluded from the measurement window.
    #[serde(with = "secs")]
    pub ramp: Duration,
    pub seed: u64,
    /// MQTT QoS level for publish and subscribe.
    pub qos: u8,
    /// HTTP request path.
    pub path: String,
    /// Label grouping runs into one curve in the plots.
    pub series: String,
    pub cpu_pids: Vec<u32>,
    #[serde(with = "secs")]
    pub cpu_interval: Duration,
}

/// Durations in CSV/JSON as fractional seconds.
mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

impl BenchConfig {
    /// Defaults of the reference experiments: HTTP runs 180 s with a 10 s
    /// request timeout; MQTT runs 120 s publishing every 10 s at QoS 1.
    pub fn new(mode: BenchMode, target: impl Into<String>, clients: u32) -> Self {
        let (duration, interval) = match mode {
            BenchMode::Http => (Duration::from_secs(180), Duration::from_secs(10)),
            BenchMode::Mqtt => (Duration::from_secs(120), Duration::from_secs(10)),
        };
        BenchConfig {
            mode,
            clients,
            duration,
            timeout: Duration::from_secs(10),
            interval,
            target: target.into(),
            ramp: duration / 10,
            seed: 1,
            qos: 1,
            path: iotcloud_core::http::BENCH_PAGE_PATH.to_string(),
            series: mode.as_str().to_string(),
            cpu_pids: Vec::new(),
            cpu_interval: Duration::from_millis(500),
        }
    }

    /// Duration and a ramp of 10% of it.
    pub fn with_duration(mut self, duration: Duration) -> Self {
        self.duration = duration;
        self.ramp = duration / 10;
        self
    }

    pub fn window(&self) -> Duration {
        self.duration.saturating_sub(self.ramp)
    }

    pub fn run_name(&self) -> String {
        format!("{}-c{}", self.series, self.clients)
    }

    /// Per-client start offsets, reproducible from the seed. HTTP clients
    /// spread over the first half of the ramp, MQTT clients over one
    /// publish interval.
    pub fn start_offsets(&self) -> Vec<Duration> {
        let spread = match self.mode {
            BenchMode::Http => self.ramp / 2,
            BenchMode::Mqtt => self.interval,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.clients)
            .map(|_| if spread.is_zero() { Duration::ZERO } else { spread.mul_f64(rng.gen::<f64>()) })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: BenchConfig,
    pub issued: u64,
    pub success: u64,
    pub failure: u64,
    pub inflight_at_end: u64,
    /// Successes completing inside the measurement window.
    pub window_success: u64,
    /// Latencies of window successes, microseconds.
    #[serde(skip)]
    pub histogram: LatencyHistogram,
    /// Window successes per second.
    pub throughput: f64,
    /// All successes over the whole run, per second.
    pub raw_throughput: f64,
    /// Largest outstanding-operation count seen by the 100 ms gauge.
    pub max_outstanding: u64,
    pub connect_failures: u64,
    /// MQTT messages that arrived on another client's topic.
    pub misrouted: u64,
    #[serde(skip)]
    pub cpu: Vec<CpuSample>,
}

impl MetricsReport {
    pub fn empty(config: BenchConfig) -> Self {
        MetricsReport {
            config,
            issued: 0,
            success: 0,
            failure: 0,
            inflight_at_end: 0,
            window_success: 0,
            histogram: LatencyHistogram::new(),
            throughput: 0.0,
            raw_throughput: 0.0,
            max_outstanding: 0,
            connect_failures: 0,
            misrouted: 0,
            cpu: Vec::new(),
        }
    }

    pub fn conserved(&self) -> bool {
        self.issued == self.success + self.failure + self.inflight_at_end
    }

    pub fn mean_latency_ms(&self) -> Option<f64> {
        self.histogram.mean().map(|us| us / 1000.0)
    }

    /// Mean over all live CPU samples.
    pub fn mean_cpu(&self) -> Option<f64> {
        let live: Vec<f64> = self.cpu.iter().filter_map(|s| s.util).collect();
        (!live.is_empty()).then(|| live.iter().sum::<f64>() / live.len() as f64)
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "run": self.config.run_name(),
            "config": self.config,
            "issued": self.issued,
            "success": self.success,
            "failure": self.failure,
            "inflight_at_end": self.inflight_at_end,
            "conserved": self.conserved(),
            "window_success": self.window_success,
            "throughput": self.throughput,
            "raw_throughput": self.raw_throughput,
            "mean_latency_ms": self.mean_latency_ms(),
            "p99_latency_ms": self.histogram.quantile(0.99).map(|us| us as f64 / 1000.0),
            "max_outstanding": self.max_outstanding,
            "connect_failures": self.connect_failures,
            "misrouted": self.misrouted,
            "mean_cpu": self.mean_cpu(),
        })
    }
}

/// Counts of one client, merged into the report after the run.
#[derive(Debug, Default)]
pub(crate) struct ClientTally {
    pub issued: u64,
    pub success: u64,
    pub failure: u64,
    pub inflight_at_end: u64,
    pub window_success: u64,
    pub connect_failures: u64,
    pub histogram: LatencyHistogram,
}

impl ClientTally {
    pub fn merge_into(self, r: &mut MetricsReport) {
        r.issued += self.issued;
        r.success += self.success;
        r.failure += self.failure;
        r.inflight_at_end += self.inflight_at_end;
        r.window_success += self.window_success;
        r.connect_failures += self.connect_failures;
        r.histogram.merge(&self.histogram);
    }
}

/// Outstanding-operation gauge shared by all clients.
#[derive(Default)]
pub(crate) struct Gauge {
    now: AtomicU64,
    max_sampled: AtomicU64,
}

impl Gauge {
    pub fn begin(&self) {
        self.now.fetch_add(1, Ordering::Relaxed);
    }

    pub fn end(&self) {
        self.now.fetch_sub(1, Ordering::Relaxed);
    }

    /// Samples every 100 ms until dropped.
    pub fn spawn_sampler(self: &Arc<Self>) -> tokio::task::JoinHandle<()> {
        let g = self.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_millis(100));
            loop {
                tick.tick().await;
                g.max_sampled.fetch_max(g.now.load(Ordering::Relaxed), Ordering::Relaxed);
            }
        })
    }

    pub fn max_sampled(&self) -> u64 {
        self.max_sampled.load(Ordering::Relaxed)
    }
}

/// Merges client tallies and fills in the derived report fields.
pub(crate) fn finish(
    cfg: &BenchConfig,
    tallies: Vec<ClientTally>,
    gauge: &Gauge,
    cpu: Vec<CpuSample>,
) -> MetricsReport {
    let mut report = MetricsReport::empty(cfg.clone());
    for t in tallies {
        t.merge_into(&mut report);
    }
    let window = cfg.window().as_secs_f64();
    report.throughput = if window > 0.0 { report.window_success as f64 / window } else { 0.0 };
    report.raw_throughput = report.success as f64 / cfg.duration.as_secs_f64().max(f64::MIN_POSITIVE);
    report.max_outstanding = gauge.max_sampled();
    report.cpu = cpu;
    report
}
