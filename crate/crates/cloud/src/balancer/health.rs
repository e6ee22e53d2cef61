use std::sync::Arc;

use iotcloud_core::http::parse_response_head;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

use super::{Mode, Pool, Shared};

/// Probes one backend every check interval, forever.
pub(crate) async fn run(shared: Arc<Shared>, pool: Arc<Pool>, idx: usize) {
    let interval = shared.cfg.check_interval;
    let mut ticker = tokio::time::interval(interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        ticker.tick().await;
        let addr = &pool.addrs[idx];
        let ok = tokio::time::timeout(interval, probe(shared.cfg.mode, addr, &shared.cfg.health_path))
            .await
            .unwrap_or(false);
        let mut st = pool.state.lock().unwrap_or_else(|e| e.into_inner());
        let was = st.states[idx].healthy;
        let now = st.trackers[idx].observe(ok);
        st.states[idx].healthy = now;
        drop(st);
        if was != now {
            tracing::info!(pool = %pool.name, backend = %addr, healthy = now, "backend health changed");
        }
    }
}

async fn probe(mode: Mode, addr: &str, health_path: &str) -> bool {
    let Ok(mut stream) = TcpStream::connect(addr).await else {
        return false;
    };
    if mode == Mode::Tcp {
        return true;
    }
    let req = format!("GET {health_path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n");
    if stream.write_all(req.as_bytes()).await.is_err() {
        return false;
    }
    let mut buf = Vec::with_capacity(512);
    loop {
        match parse_response_head(&buf) {
            Ok(Some(head)) => return head.status == 200,
            Ok(None) => {}
            Err(_) => return false,
        }
        match stream.read_buf(&mut buf).await {
            Ok(0) | Err(_) => return false,
            Ok(_) => {}
        }
    }
}
