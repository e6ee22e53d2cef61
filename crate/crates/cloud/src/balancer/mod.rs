//! Layer-7 (HTTP, weighted round robin) and layer-4 (TCP, least
//! connections) load balancer with active health checks.

mod health;
mod http;
mod tcp;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{bail, Context};
use iotcloud_core::balance::{BackendState, HealthTracker, SmoothWrr};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::task::JoinSet;

pub const DEFAULT_POOL: &str = "default";
pub const STATS_PATH: &str = "/_balancer/stats";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Http,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendSpec {
    pub pool: String,
    pub addr: String,
    pub weight: u32,
}

impl std::str::FromStr for BackendSpec {
    type Err = anyhow::Error;

    /// `[pool@]host:port[:weight]`
    fn from_str(s: &str) -> anyhow::Result<BackendSpec> {
        let (pool, rest) = match s.split_once('@') {
            Some((p, r)) => (p.to_string(), r),
            None => (DEFAULT_POOL.to_string(), s),
        };
        let parts: Vec<&str> = rest.rsplitn(3, ':').collect();
        let (addr, weight) = match parts.as_slice() {
            [port, host] => (format!("{host}:{port}"), 1),
            [weight, port, host] => {
                let w: u32 = weight.parse().with_context(|| format!("bad weight in {s:?}"))?;
                (format!("{host}:{port}"), w)
            }
            _ => bail!("backend must be [pool@]host:port[:weight], got {s:?}"),
        };
        if pool.is_empty() || weight == 0 {
            bail!("backend {s:?} needs a pool name and a positive weight");
        }
        Ok(BackendSpec { pool, addr, weight })
    }
}

#[derive(Debug, Clone)]
pub struct BalancerConfig {
    pub mode: Mode,
    pub listen: String,
    pub backends: Vec<BackendSpec>,
    /// (path prefix, pool); first match wins.
    pub rules: Vec<(String, String)>,
    pub check_interval: Duration,
    pub health_path: String,
    /// TCP mode: an extra listener that answers every connection with the
    /// stats JSON.
    pub admin: Option<String>,
    pub connect_timeout: Duration,
}

impl BalancerConfig {
    pub fn new(mode: Mode, listen: impl Into<String>) -> Self {
        BalancerConfig {
            mode,
            listen: listen.into(),
            backends: Vec::new(),
            rules: Vec::new(),
            check_interval: Duration::from_secs(2),
            health_path: "/health".to_string(),
            admin: None,
            connect_timeout: Duration::from_secs(3),
        }
    }
}

#[derive(Debug)]
pub(crate) struct PoolState {
    pub states: Vec<BackendState>,
    pub trackers: Vec<HealthTracker>,
    pub wrr: SmoothWrr,
    pub assigned: Vec<u64>,
}

pub(crate) struct Pool {
    pub name: String,
    pub addrs: Vec<String>,
    pub state: Mutex<PoolState>,
}

impl Pool {
    fn lock(&self) -> std::sync::MutexGuard<'_, PoolState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub(crate) fn release(&self, idx: usize) {
        let mut st = self.lock();
        let b = &mut st.states[idx];
        b.active_connections = b.active_connections.saturating_sub(1);
    }

    fn stats(&self) -> serde_json::Value {
        let st = self.lock();
        let backends: Vec<_> = self
            .addrs
            .iter()
            .enumerate()
            .map(|(i, addr)| {
                json!({
                    "addr": addr,
                    "weight": st.states[i].weight,
                    "healthy": st.states[i].healthy,
                    "active": st.states[i].active_connections,
                    "assigned": st.assigned[i],
                })
            })
            .collect();
        json!(backends)
    }
}

/// Decrements a backend's active count when the connection or request ends.
pub(crate) struct Lease {
    pool: Arc<Pool>,
    pub idx: usize,
}

impl Drop for Lease {
    fn drop(&mut self) {
        self.pool.release(self.idx);
    }
}

#[derive(Default)]
pub struct Totals {
    pub connections: AtomicU64,
    pub requests: AtomicU64,
    pub no_backend: AtomicU64,
    pub backend_errors: AtomicU64,
    pub bad_requests: AtomicU64,
}

pub(crate) struct Shared {
    pub cfg: BalancerConfig,
    pub pools: BTreeMap<String, Arc<Pool>>,
    pub totals: Totals,
}

impl Shared {
    pub(crate) fn stats_json(&self) -> serde_json::Value {
        let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
        let t = &self.totals;
        let pools: serde_json::Map<_, _> = self.pools.iter().map(|(n, p)| (n.clone(), p.stats())).collect();
        let active: u64 = self.pools.values().map(|p| p.lock().states.iter().map(|b| u64::from(b.active_connections)).sum::<u64>()).sum();
        json!({
            "mode": match self.cfg.mode { Mode::Http => "http", Mode::Tcp => "tcp" },
            "pools": pools,
            "totals": {
                "active": active,
                "connections": get(&t.connections),
                "requests": get(&t.requests),
                "no_backend": get(&t.no_backend),
                "backend_errors": get(&t.backend_errors),
                "bad_requests": get(&t.bad_requests),
            },
        })
    }
}

pub struct BalancerHandle {
    pub addr: SocketAddr,
    pub admin_addr: Option<SocketAddr>,
    shared: Arc<Shared>,
    tasks: JoinSet<()>,
}

impl BalancerHandle {
    pub fn stats(&self) -> serde_json::Value {
        self.shared.stats_json()
    }

    pub async fn wait(&mut self) {
        self.tasks.join_next().await;
    }

    pub fn shutdown(mut self) {
        self.tasks.abort_all();
    }
}

fn build_pools(cfg: &BalancerConfig) -> anyhow::Result<BTreeMap<String, Arc<Pool>>> {
    let mut grouped: BTreeMap<String, Vec<&BackendSpec>> = BTreeMap::new();
    for b in &cfg.backends {
        grouped.entry(b.pool.clone()).or_default().push(b);
    }
    Ok(grouped
        .into_iter()
        .map(|(name, specs)| {
            let n = specs.len();
            let pool = Pool {
                name: name.clone(),
                addrs: specs.iter().map(|s| s.addr.clone()).collect(),
                state: Mutex::new(PoolState {
                    states: specs.iter().map(|s| BackendState::new(s.weight)).collect(),
                    trackers: vec![HealthTracker::default(); n],
                    wrr: SmoothWrr::new(),
                    assigned: vec![0; n],
                }),
            };
            (name, Arc::new(pool))
        })
        .collect())
}

fn validate(cfg: &mut BalancerConfig, pools: &BTreeMap<String, Arc<Pool>>) -> anyhow::Result<()> {
    if pools.is_empty() {
        bail!("at least one --backend is required");
    }
    match cfg.mode {
        Mode::Tcp => {
            if !cfg.rules.is_empty() || pools.len() > 1 {
                bail!("TCP mode balances a single pool; rules and named pools are HTTP only");
            }
        }
        Mode::Http => {
            if !cfg.rules.iter().any(|(p, _)| p == "/") {
                let fallback = if pools.contains_key(DEFAULT_POOL) {
                    DEFAULT_POOL.to_string()
                } else if pools.len() == 1 {
                    pools.keys().next().cloned().expect("one pool")
                } else {
                    bail!("no catch-all \"/\" rule and no {DEFAULT_POOL:?} pool to fall back to");
                };
                cfg.rules.push(("/".to_string(), fallback));
            }
            for (prefix, pool) in &cfg.rules {
                if !prefix.starts_with('/') {
                    bail!("rule prefix {prefix:?} must start with /");
                }
                if !pools.contains_key(pool) {
                    bail!("rule {prefix}={pool} names an unknown pool");
                }
            }
        }
    }
    Ok(())
}

pub async fn start_balancer(mut cfg: BalancerConfig) -> anyhow::Result<BalancerHandle> {
    let pools = build_pools(&cfg)?;
    validate(&mut cfg, &pools)?;
    let listener = TcpListener::bind(&cfg.listen).await.with_context(|| format!("cannot listen on {}", cfg.listen))?;
    let addr = listener.local_addr()?;
    let admin = match &cfg.admin {
        Some(a) => Some(TcpListener::bind(a).await.with_context(|| format!("cannot listen on admin {a}"))?),
        None => None,
    };
    let admin_addr = admin.as_ref().map(|l| l.local_addr()).transpose()?;
    let shared = Arc::new(Shared { cfg, pools, totals: Totals::default() });

    let mut tasks = JoinSet::new();
    for pool in shared.pools.values() {
        for idx in 0..pool.addrs.len() {
            tasks.spawn(health::run(shared.clone(), pool.clone(), idx));
        }
    }
    if let Some(admin) = admin {
        let s = shared.clone();
        tasks.spawn(async move {
            loop {
                if let Ok((mut stream, _)) = admin.accept().await {
                    let body = format!("{}\n", s.stats_json());
                    tokio::spawn(async move {
                        let _ = tokio::io::AsyncWriteExt::write_all(&mut stream, body.as_bytes()).await;
                    });
                }
            }
        });
    }
    let s = shared.clone();
    tasks.spawn(async move {
        let mut conns = JoinSet::new();
        loop {
            tokio::select! {
                accepted = listener.accept() => match accepted {
                    Ok((stream, _)) => {
                        let _ = stream.set_nodelay(true);
                        s.totals.connections.fetch_add(1, Ordering::Relaxed);
                        match s.cfg.mode {
                            Mode::Tcp => conns.spawn(tcp::serve(stream, s.clone())),
                            Mode::Http => conns.spawn(http::serve(stream, s.clone())),
                        };
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
    Ok(BalancerHandle { addr, admin_addr, shared, tasks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backend_spec_syntax() {
        let b: BackendSpec = "127.0.0.1:80".parse().unwrap();
        assert_eq!(b, BackendSpec { pool: DEFAULT_POOL.into(), addr: "127.0.0.1:80".into(), weight: 1 });
        let b: BackendSpec = "api@10.0.0.1:8080:3".parse().unwrap();
        assert_eq!(b, BackendSpec { pool: "api".into(), addr: "10.0.0.1:8080".into(), weight: 3 });
        assert!("nope".parse::<BackendSpec>().is_err());
        assert!("h:1:0".parse::<BackendSpec>().is_err());
        assert!("h:1:x".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn catch_all_rule_is_added_or_required() {
        let mut cfg = BalancerConfig::new(Mode::Http, "127.0.0.1:0");
        cfg.backends = vec!["a@h:1".parse().unwrap(), "b@h:2".parse().unwrap()];
        cfg.rules = vec![("/api".into(), "a".into())];
        let pools = build_pools(&cfg).unwrap();
        assert!(validate(&mut cfg.clone(), &pools).is_err());
        cfg.rules.push(("/".into(), "b".into()));
        validate(&mut cfg, &pools).unwrap();

        let mut cfg = BalancerConfig::new(Mode::Http, "127.0.0.1:0");
        cfg.backends = vec!["h:1".parse().unwrap()];
        let pools = build_pools(&cfg).unwrap();
        validate(&mut cfg, &pools).unwrap();
        assert_eq!(cfg.rules, vec![("/".to_string(), DEFAULT_POOL.to_string())]);
    }
}
