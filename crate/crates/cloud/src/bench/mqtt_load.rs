use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use iotcloud_core::mqtt::{QoS, SubscribeReturn};
use tokio::net::TcpStream;
use tokio::time::Instant;

use super::{finish, sample_cpu, BenchConfig, ClientTally, Gauge, MetricsReport};
use crate::mqtt_client::{ClientEvent, ClientOptions, MqttClient};

/// Payload: sequence number and send time in microseconds since the run
/// started, both big-endian u64.
fn encode(seq: u64, sent_us: u64) -> Vec<u8> {
    let mut p = Vec::with_capacity(16);
    p.extend_from_slice(&seq.to_be_bytes());
    p.extend_from_slice(&sent_us.to_be_bytes());
    p
}

fn decode(p: &[u8]) -> Option<(u64, u64)> {
    let seq = u64::from_be_bytes(p.get(..8)?.try_into().ok()?);
    let sent = u64::from_be_bytes(p.get(8..16)?.try_into().ok()?);
    Some((seq, sent))
}

/// Every client publishes to its own topic `bench/<i>` and subscribes to
/// it; an operation is one publish followed by its loopback delivery. A
/// client skips a tick while its previous message is still outstanding.
pub async fn run_mqtt_load(cfg: &BenchConfig) -> anyhow::Result<MetricsReport> {
    anyhow::ensure!(cfg.qos <= 2, "qos must be 0, 1 or 2");
    tokio::time::timeout(cfg.timeout, TcpStream::connect(&cfg.target))
        .await
        .map_err(|_| anyhow::anyhow!("timed out"))
        .and_then(|r| r.map_err(anyhow::Error::from))
        .with_context(|| format!("broker {} is unreachable", cfg.target))?;

    let start = Instant::now();
    let gauge = Arc::new(Gauge::default());
    let sampler = gauge.spawn_sampler();
    let deadline = start + cfg.duration;
    let cpu = tokio::spawn(sample_cpu(cfg.cpu_pids.clone(), cfg.cpu_interval, tokio::time::sleep_until(deadline)));

    let mut clients = tokio::task::JoinSet::new();
    for (i, offset) in cfg.start_offsets().into_iter().enumerate() {
        let cfg = cfg.clone();
        let gauge = gauge.clone();
        clients.spawn(async move { client(cfg, i, start, start + offset, gauge).await });
    }
    let mut tallies = Vec::with_capacity(cfg.clients as usize);
    let mut misrouted = 0;
    while let Some(r) = clients.join_next().await {
        let (t, m) = r?;
        misrouted += m;
        tallies.push(t);
    }
    sampler.abort();
    let cpu = cpu.await?;
    let mut report = finish(cfg, tallies, &gauge, cpu);
    report.misrouted = misrouted;
    Ok(report)
}

struct Outstanding {
    seq: u64,
    sent: Instant,
}

async fn client(cfg: BenchConfig, index: usize, start: Instant, first: Instant, gauge: Arc<Gauge>) -> (ClientTally, u64) {
    let deadline = start + cfg.duration;
    let window_start = start + cfg.ramp;
    let qos = QoS::from_u8(cfg.qos).unwrap_or(QoS::AtLeastOnce);
    let topic = format!("bench/{index}");
    let mut t = ClientTally::default();
    let mut misrouted = 0;
    let mut seq = 0u64;
    let mut next_publish = first;
    let mut outstanding: Option<Outstanding> = None;
    tokio::time::sleep_until(first).await;

    'session: while Instant::now() < deadline {
        let mut opts = ClientOptions::new(format!("bench-{}-{index}", cfg.seed));
        opts.connect_timeout = cfg.timeout;
        let connected = tokio::time::timeout_at(deadline, async {
            let mut c = MqttClient::connect(&cfg.target, opts).await.ok()?;
            match c.subscribe(&[(&topic, qos)]).await.ok()?.first() {
                Some(SubscribeReturn::Granted(_)) => Some(c),
                _ => None,
            }
        })
        .await;
        let mut client = match connected {
            Err(_) => break,
            Ok(Some(c)) => c,
            Ok(None) => {
                t.connect_failures += 1;
                tokio::time::sleep_until(deadline.min(Instant::now() + cfg.interval.max(Duration::from_millis(100)))).await;
                continue;
            }
        };
        loop {
            let now = Instant::now();
            if now >= deadline {
                let _ = client.disconnect().await;
                break 'session;
            }
            if let Some(o) = &outstanding {
                if now >= o.sent + cfg.timeout {
                    t.failure += 1;
                    gauge.end();
                    outstanding = None;
                }
            }
            if outstanding.is_none() && now >= next_publish {
                seq += 1;
                let sent_us = now.duration_since(start).as_micros() as u64;
                t.issued += 1;
                gauge.begin();
                outstanding = Some(Outstanding { seq, sent: now });
                while next_publish <= now {
                    next_publish += cfg.interval;
                }
                if client.publish(&topic, encode(seq, sent_us), qos).await.is_err() {
                    break;
                }
            }
            let mut wake = deadline;
            match &outstanding {
                Some(o) => wake = wake.min(o.sent + cfg.timeout),
                None => wake = wake.min(next_publish),
            }
            match client.next_event(wake).await {
                Ok(Some(ClientEvent::Message(p))) => {
                    if p.topic.as_str() != topic {
                        misrouted += 1;
                        continue;
                    }
                    let Some((got, sent_us)) = decode(&p.payload) else { continue };
                    if outstanding.as_ref().is_some_and(|o| o.seq == got) {
                        outstanding = None;
                        gauge.end();
                        t.success += 1;
                        let done = Instant::now();
                        if done >= window_start {
                            t.window_success += 1;
                            let now_us = done.duration_since(start).as_micros() as u64;
                            t.histogram.record(now_us.saturating_sub(sent_us));
                        }
                    }
                }
                Ok(_) => {}
                Err(e) => {
                    tracing::debug!(client = index, error = %e, "session lost, reconnecting");
                    break;
                }
            }
        }
        // The session broke; an outstanding message may still be delivered
        // after reconnecting, so it keeps its timeout.
    }
    if let Some(o) = outstanding.take() {
        if o.sent + cfg.timeout <= deadline {
            t.failure += 1;
        } else {
            t.inflight_at_end += 1;
        }
        gauge.end();
    }
    (t, misrouted)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_roundtrip() {
        assert_eq!(decode(&encode(7, 123_456)), Some((7, 123_456)));
        assert_eq!(decode(b"short"), None);
    }
}
