use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use bytes::BytesMut;
use iotcloud_core::http::parse_response_head;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::time::Instant;

use super::{finish, sample_cpu, BenchConfig, ClientTally, Gauge, MetricsReport};

/// Closed-loop HTTP clients, each with one keep-alive connection and at
/// most one request outstanding.
pub async fn run_http_load(cfg: &BenchConfig) -> anyhow::Result<MetricsReport> {
    tokio::time::timeout(cfg.timeout, TcpStream::connect(&cfg.target))
        .await
        .map_err(|_| anyhow::anyhow!("timed out"))
        .and_then(|r| r.map_err(anyhow::Error::from))
        .with_context(|| format!("target {} is unreachable", cfg.target))?;

    let start = Instant::now();
    let gauge = Arc::new(Gauge::default());
    let sampler = gauge.spawn_sampler();
    let deadline = start + cfg.duration;
    let cpu = tokio::spawn(sample_cpu(cfg.cpu_pids.clone(), cfg.cpu_interval, tokio::time::sleep_until(deadline)));
    let request = Arc::new(format!("GET {} HTTP/1.1\r\nHost: {}\r\n\r\n", cfg.path, cfg.target).into_bytes());

    let mut clients = tokio::task::JoinSet::new();
    for offset in cfg.start_offsets() {
        let cfg = cfg.clone();
        let gauge = gauge.clone();
        let request = request.clone();
        clients.spawn(async move { client(cfg, start, start + offset, gauge, request).await });
    }
    let mut tallies = Vec::with_capacity(cfg.clients as usize);
    while let Some(t) = clients.join_next().await {
        tallies.push(t?);
    }
    sampler.abort();
    let cpu = cpu.await?;
    Ok(finish(cfg, tallies, &gauge, cpu))
}

async fn client(cfg: BenchConfig, start: Instant, begin: Instant, gauge: Arc<Gauge>, request: Arc<Vec<u8>>) -> ClientTally {
    let deadline = start + cfg.duration;
    let window_start = start + cfg.ramp;
    let mut t = ClientTally::default();
    let mut conn: Option<(TcpStream, BytesMut)> = None;
    tokio::time::sleep_until(begin).await;
    while Instant::now() < deadline {
        if conn.is_none() {
            let connect = tokio::time::timeout(cfg.timeout, TcpStream::connect(&cfg.target));
            match tokio::time::timeout_at(deadline, connect).await {
                Err(_) => break,
                Ok(Ok(Ok(s))) => {
                    let _ = s.set_nodelay(true);
                    conn = Some((s, BytesMut::with_capacity(2048)));
                }
                Ok(_) => {
                    // A failed connect is a failed operation.
                    t.issued += 1;
                    t.failure += 1;
                    t.connect_failures += 1;
                    tokio::time::sleep_until(deadline.min(Instant::now() + Duration::from_millis(100))).await;
                    continue;
                }
            }
        }
        let (stream, buf) = conn.as_mut().expect("connected");
        t.issued += 1;
        gauge.begin();
        let sent = Instant::now();
        let exchange = tokio::time::timeout(cfg.timeout, exchange(stream, buf, &request));
        let outcome = tokio::select! {
            r = exchange => Some(r),
            _ = tokio::time::sleep_until(deadline) => None,
        };
        gauge.end();
        match outcome {
            None => {
                t.inflight_at_end += 1;
                break;
            }
            Some(Ok(Ok(true))) => {
                let done = Instant::now();
                t.success += 1;
                if done >= window_start {
                    t.window_success += 1;
                    t.histogram.record(done.duration_since(sent).as_micros() as u64);
                }
            }
            Some(Ok(Ok(false))) => t.failure += 1,
            Some(_) => {
                t.failure += 1;
                conn = None;
            }
        }
    }
    t
}

/// One request/response; `Ok(true)` for a 200.
async fn exchange(stream: &mut TcpStream, buf: &mut BytesMut, request: &[u8]) -> std::io::Result<bool> {
    stream.write_all(request).await?;
    loop {
        if let Some(head) = parse_response_head(buf).map_err(std::io::Error::other)? {
            if buf.len() >= head.total_len() {
                let _ = buf.split_to(head.total_len());
                if !head.keep_alive {
                    return Err(std::io::ErrorKind::ConnectionReset.into());
                }
                return Ok(head.status == 200);
            }
        }
        if stream.read_buf(buf).await? == 0 {
            return Err(std::io::ErrorKind::UnexpectedEof.into());
        }
    }
}
