//! HTTP/1.1 resource server.
//!
//! Each connection reads requests into one buffer and answers them strictly
//! in arrival order, so pipelined requests need no extra bookkeeping.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use anyhow::Context;
use bytes::{Buf, Bytes, BytesMut};
use iotcloud_core::http::{
    execute, parse_request, plan, respond, HttpError, MemoryStore, Method, Plan, Request, Resource, Response, StoreOp,
    StoreOutcome,
};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinSet;

use crate::store::{ClusterClient, Manifest};

pub const IDLE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone)]
pub enum StoreBackend {
    Memory,
    /// Resources live in the slot store under their path.
    Slot(Manifest),
}

#[derive(Clone)]
pub struct HttpdConfig {
    pub listen: String,
    pub store: StoreBackend,
    pub health_path: String,
    pub idle_timeout: Duration,
}

impl HttpdConfig {
    pub fn new(listen: impl Into<String>) -> Self {
        HttpdConfig {
            listen: listen.into(),
            store: StoreBackend::Memory,
            health_path: "/health".to_string(),
            idle_timeout: IDLE_TIMEOUT,
        }
    }
}

#[derive(Default)]
pub struct HttpdStats {
    pub connections: AtomicU64,
    pub requests: AtomicU64,
    pub idle_closes: AtomicU64,
    pub bad_requests: AtomicU64,
}

struct Shared {
    cfg: HttpdConfig,
    memory: RwLock<MemoryStore>,
    stats: HttpdStats,
}

pub struct HttpdHandle {
    pub addr: std::net::SocketAddr,
    shared: Arc<Shared>,
    tasks: JoinSet<()>,
}

impl HttpdHandle {
    pub fn stats(&self) -> &HttpdStats {
        &self.shared.stats
    }

    pub async fn wait(&mut self) {
        self.tasks.join_next().await;
    }

    pub fn shutdown(mut self) {
        self.tasks.abort_all();
    }
}

pub async fn start_httpd(cfg: HttpdConfig) -> anyhow::Result<HttpdHandle> {
    let listener = TcpListener::bind(&cfg.listen)
        .await
        .with_context(|| format!("cannot listen on {}", cfg.listen))?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared { cfg, memory: RwLock::new(MemoryStore::new()), stats: HttpdStats::default() });
    let mut tasks = JoinSet::new();
    let accept_shared = shared.clone();
    tasks.spawn(async move {
        let mut conns = JoinSet::new();
        loop {
            tokio::select! {
                accepted = listener.accept() => match accepted {
                    Ok((stream, _)) => {
                        let _ = stream.set_nodelay(true);
                        accept_shared.stats.connections.fetch_add(1, Ordering::Relaxed);
                        conns.spawn(serve(stream, accept_shared.clone()));
                    }
                    Err(e) => {
                        tracing::warn!(error = %e, "accept failed");
                        tokio::time::sleep(Duration::from_millis(50)).await;
                    }
                },
                Some(_) = conns.join_next(), if !conns.is_empty() => {}
            }
        }
    });
    Ok(HttpdHandle { addr, shared, tasks })
}

/// Store access for one connection. The slot client is opened lazily.
struct ConnStore {
    shared: Arc<Shared>,
    slot: Option<ClusterClient>,
}

impl ConnStore {
    async fn execute(&mut self, op: StoreOp) -> anyhow::Result<StoreOutcome> {
        let manifest = match &self.shared.cfg.store {
            StoreBackend::Memory => {
                let mut store = self.shared.memory.write().unwrap_or_else(|e| e.into_inner());
                return Ok(execute(&mut *store, op));
            }
            StoreBackend::Slot(m) => m,
        };
        if self.slot.is_none() {
            self.slot = Some(ClusterClient::new(manifest)?);
        }
        let client = self.slot.as_mut().expect("just set");
        Ok(match op {
            StoreOp::Get(path) => StoreOutcome::Fetched(client.get(path).await?.map(|v| decode_resource(&v))),
            StoreOp::Put(path, resource) => {
                let replaced = client.get(path.clone()).await?.is_some();
                client.set(path, encode_resource(&resource)).await?;
                StoreOutcome::Stored { replaced }
            }
            StoreOp::Delete(path) => StoreOutcome::Removed { existed: client.del(path).await?.is_some() },
        })
    }
}

/// Slot-store value layout: u16 content-type length, content type, body.
fn encode_resource(r: &Resource) -> Bytes {
    let ct = r.content_type.as_bytes();
    let mut out = Vec::with_capacity(2 + ct.len() + r.body.len());
    out.extend_from_slice(&(ct.len() as u16).to_be_bytes());
    out.extend_from_slice(ct);
    out.extend_from_slice(&r.body);
    out.into()
}

fn decode_resource(v: &Bytes) -> Resource {
    let n = v.get(..2).map_or(0, |b| u16::from_be_bytes([b[0], b[1]]) as usize);
    match v.get(2..2 + n) {
        Some(ct) => Resource { content_type: String::from_utf8_lossy(ct).into_owned(), body: v.slice(2 + n..) },
        None => Resource { content_type: "application/octet-stream".to_string(), body: v.clone() },
    }
}

async fn answer(request: &Request, store: &mut ConnStore) -> Response {
    if request.method == Method::Get && request.target == store.shared.cfg.health_path {
        return Response::with_body(200, "text/plain", Bytes::from_static(b"ok\n"));
    }
    match plan(request) {
        Plan::Respond(r) => r,
        Plan::Store(op) => match store.execute(op).await {
            Ok(outcome) => respond(outcome),
            Err(e) => {
                tracing::warn!(error = %e, "store failure");
                Response::new(503)
            }
        },
    }
}

async fn serve(mut stream: TcpStream, shared: Arc<Shared>) {
    let idle = shared.cfg.idle_timeout;
    let mut store = ConnStore { shared: shared.clone(), slot: None };
    let mut buf = BytesMut::with_capacity(4096);
    let mut out = Vec::with_capacity(4096);
    loop {
        // Answer everything already buffered before reading again.
        loop {
            match parse_request(&buf) {
                Ok(Some((request, used))) => {
                    buf.advance(used);
                    shared.stats.requests.fetch_add(1, Ordering::Relaxed);
                    let keep_alive = request.keep_alive();
                    answer(&request, &mut store).await.encode(keep_alive, &mut out);
                    if !keep_alive {
                        let _ = stream.write_all(&out).await;
                        return;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    shared.stats.bad_requests.fetch_add(1, Ordering::Relaxed);
                    error_response(e).encode(false, &mut out);
                    let _ = stream.write_all(&out).await;
                    return;
                }
            }
        }
        if !out.is_empty() {
            if stream.write_all(&out).await.is_err() {
                return;
            }
            out.clear();
        }
        match tokio::time::timeout(idle, stream.read_buf(&mut buf)).await {
            Ok(Ok(0)) | Ok(Err(_)) => return,
            Ok(Ok(_)) => {}
            Err(_) => {
                shared.stats.idle_closes.fetch_add(1, Ordering::Relaxed);
                return;
            }
        }
    }
}

fn error_response(e: HttpError) -> Response {
    Response::new(e.status())
}
