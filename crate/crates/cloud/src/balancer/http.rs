use std::collections::HashMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use bytes::{Buf, Bytes, BytesMut};
use iotcloud_core::http::{parse_request, parse_response_head, Method, Request, Response};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

use super::{Lease, Pool, Shared, STATS_PATH};

pub(crate) fn route<'a>(rules: &'a [(String, String)], path: &str) -> Option<&'a str> {
    rules.iter().find(|(prefix, _)| path.starts_with(prefix.as_str())).map(|(_, pool)| pool.as_str())
}

fn acquire(pool: &Arc<Pool>) -> Option<Lease> {
    let mut st = pool.state.lock().unwrap_or_else(|e| e.into_inner());
    let st = &mut *st;
    let idx = st.wrr.next(&st.states).ok()?;
    st.states[idx].active_connections += 1;
    st.assigned[idx] += 1;
    Some(Lease { pool: pool.clone(), idx })
}

/// Keep-alive connection to one backend, reused across client requests.
struct Upstream {
    stream: TcpStream,
    buf: BytesMut,
}

impl Upstream {
    /// Sends one request and returns the raw response bytes and whether the
    /// backend keeps the connection open.
    async fn exchange(&mut self, request: &[u8]) -> std::io::Result<(Bytes, bool)> {
        self.stream.write_all(request).await?;
        loop {
            if let Some(head) = parse_response_head(&self.buf).map_err(std::io::Error::other)? {
                if self.buf.len() >= head.total_len() {
                    let raw = self.buf.split_to(head.total_len()).freeze();
                    return Ok((raw, head.keep_alive));
                }
            }
            if self.stream.read_buf(&mut self.buf).await? == 0 {
                return Err(std::io::ErrorKind::UnexpectedEof.into());
            }
        }
    }
}

pub(crate) async fn serve(mut client: TcpStream, shared: Arc<Shared>) {
    let mut buf = BytesMut::with_capacity(4096);
    let mut upstreams: HashMap<(String, usize), Upstream> = HashMap::new();
    let mut out = Vec::with_capacity(4096);
    loop {
        loop {
            match parse_request(&buf) {
                Ok(Some((request, used))) => {
                    buf.advance(used);
                    shared.totals.requests.fetch_add(1, Ordering::Relaxed);
                    let keep_alive = request.keep_alive();
                    match forward(&request, &shared, &mut upstreams).await {
                        Ok(raw) => out.extend_from_slice(&raw),
                        Err(resp) => resp.encode(keep_alive, &mut out),
                    }
                    if !keep_alive {
                        let _ = client.write_all(&out).await;
                        return;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    shared.totals.bad_requests.fetch_add(1, Ordering::Relaxed);
                    Response::new(e.status()).encode(false, &mut out);
                    let _ = client.write_all(&out).await;
                    return;
                }
            }
        }
        if !out.is_empty() {
            if client.write_all(&out).await.is_err() {
                return;
            }
            out.clear();
        }
        match client.read_buf(&mut buf).await {
            Ok(0) | Err(_) => return,
            Ok(_) => {}
        }
    }
}

/// Balances one request; `Err` carries a locally generated response.
async fn forward(
    request: &Request,
    shared: &Shared,
    upstreams: &mut HashMap<(String, usize), Upstream>,
) -> Result<Bytes, Response> {
    let path = request.target.split('?').next().unwrap_or("");
    if request.method == Method::Get && path == STATS_PATH {
        return Err(Response::with_body(200, "application/json", shared.stats_json().to_string()));
    }
    let pool_name = route(&shared.cfg.rules, path).ok_or_else(|| Response::new(404))?;
    let pool = &shared.pools[pool_name];
    let Some(lease) = acquire(pool) else {
        shared.totals.no_backend.fetch_add(1, Ordering::Relaxed);
        return Err(Response::new(503));
    };
    let key = (pool_name.to_string(), lease.idx);
    let mut encoded = Vec::with_capacity(256 + request.body.len());
    request.encode(&mut encoded);

    // A reused connection may have been closed by the backend while idle;
    // such a request is retried once on a fresh connection.
    let reused = upstreams.contains_key(&key);
    for fresh in [!reused, true] {
        if fresh {
            upstreams.remove(&key);
            let addr = &pool.addrs[lease.idx];
            match tokio::time::timeout(shared.cfg.connect_timeout, TcpStream::connect(addr)).await {
                Ok(Ok(stream)) => {
                    let _ = stream.set_nodelay(true);
                    upstreams.insert(key.clone(), Upstream { stream, buf: BytesMut::with_capacity(4096) });
                }
                _ => break,
            }
        }
        let up = upstreams.get_mut(&key).expect("present");
        match up.exchange(&encoded).await {
            Ok((raw, keep)) => {
                if !keep {
                    upstreams.remove(&key);
                }
                return Ok(raw);
            }
            Err(_) => {
                upstreams.remove(&key);
                if fresh {
                    break;
                }
            }
        }
    }
    shared.totals.backend_errors.fetch_add(1, Ordering::Relaxed);
    Err(Response::new(502))
}
