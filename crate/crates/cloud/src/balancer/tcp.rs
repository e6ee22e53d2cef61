use std::sync::atomic::Ordering;
use std::sync::Arc;

use iotcloud_core::balance::least_conn_excluding;
use tokio::io::AsyncWriteExt;
use tokio::net::TcpStream;

use super::{Lease, Pool, Shared};

/// Picks the least-connected healthy backend and counts the connection
/// against it in the same critical section.
fn acquire(pool: &Arc<Pool>, skip: Option<usize>) -> Option<Lease> {
    let mut st = pool.state.lock().unwrap_or_else(|e| e.into_inner());
    let idx = least_conn_excluding(&st.states, skip).ok()?;
    st.states[idx].active_connections += 1;
    st.assigned[idx] += 1;
    Some(Lease { pool: pool.clone(), idx })
}

pub(crate) async fn serve(client: TcpStream, shared: Arc<Shared>) {
    let pool = shared.pools.values().next().expect("validated: one pool").clone();
    let timeout = shared.cfg.connect_timeout;
    let mut skip = None;
    for _attempt in 0..2 {
        let Some(lease) = acquire(&pool, skip) else {
            shared.totals.no_backend.fetch_add(1, Ordering::Relaxed);
            return;
        };
        let addr = &pool.addrs[lease.idx];
        match tokio::time::timeout(timeout, TcpStream::connect(addr)).await {
            Ok(Ok(backend)) => {
                let _ = backend.set_nodelay(true);
                relay(client, backend).await;
                return;
            }
            _ => {
                shared.totals.backend_errors.fetch_add(1, Ordering::Relaxed);
                tracing::debug!(backend = %addr, "backend connect failed");
                skip = Some(lease.idx);
            }
        }
    }
}

/// Copies both ways. A client half-close is passed on and the backend may
/// still answer; once the backend side ends, the client is closed.
async fn relay(client: TcpStream, backend: TcpStream) {
    let (mut cr, mut cw) = client.into_split();
    let (mut br, mut bw) = backend.into_split();
    let upstream = async {
        let _ = tokio::io::copy(&mut cr, &mut bw).await;
        let _ = bw.shutdown().await;
        std::future::pending::<()>().await
    };
    let downstream = async {
        let _ = tokio::io::copy(&mut br, &mut cw).await;
        let _ = cw.shutdown().await;
    };
    tokio::select! {
        _ = upstream => {}
        _ = downstream => {}
    }
}
