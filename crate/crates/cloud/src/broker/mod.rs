//! MQTT broker instance and its master/slave process cluster.
//!
//! Instances share nothing but the bus: a publish accepted by any instance
//! goes onto the bus, and every instance subscribed to the topic (the
//! origin included) delivers it to its local subscribers.

mod bus;
pub mod cluster;
mod events;
mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use anyhow::Context;
use bytes::Bytes;
use iotcloud_core::mqtt::{QoS, RetryPolicy, TopicName};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinSet;

pub use events::EventLog;

use crate::store::Manifest;
use bus::BusCmd;

pub const DEFAULT_KEEPALIVE: u16 = 60;
const MAILBOX: usize = 4096;

pub enum BusMode {
    /// Single-instance loopback.
    Local,
    /// Attach to node `index mod primaries` of a slot-store cluster.
    Store { manifest: Manifest, index: usize },
}

pub struct BrokerConfig {
    pub listen: String,
    pub instance: u32,
    /// Used when a client connects with keepalive 0.
    pub keepalive_default: u16,
    pub ack_timeout: Duration,
    pub retry: RetryPolicy,
    pub bus: BusMode,
    pub events: Option<EventLog>,
}

impl BrokerConfig {
    pub fn new(listen: impl Into<String>) -> Self {
        BrokerConfig {
            listen: listen.into(),
            instance: 0,
            keepalive_default: DEFAULT_KEEPALIVE,
            ack_timeout: Duration::from_millis(iotcloud_core::mqtt::DEFAULT_ACK_TIMEOUT_MS),
            retry: RetryPolicy::default(),
            bus: BusMode::Local,
            events: None,
        }
    }
}

#[derive(Default)]
pub(crate) struct Stats {
    pub connections: AtomicU64,
    pub connects: AtomicU64,
    pub publishes_in: AtomicU64,
    pub bus_published: AtomicU64,
    pub bus_reconnects: AtomicU64,
    pub deliveries: AtomicU64,
    pub delivery_drops: AtomicU64,
    pub retransmits: AtomicU64,
    pub keepalive_closes: AtomicU64,
}

/// A message queued for one subscriber connection.
pub(crate) struct Delivery {
    pub topic: TopicName,
    pub payload: Bytes,
    pub qos: QoS,
}

struct Subscriber {
    qos: QoS,
    mailbox: mpsc::Sender<Delivery>,
}

pub(crate) type ConnId = u64;

pub(crate) struct Shared {
    pub instance: u32,
    pub keepalive_default: u16,
    pub ack_timeout: Duration,
    pub retry: RetryPolicy,
    pub stats: Stats,
    pub events: Option<EventLog>,
    subscriptions: RwLock<HashMap<String, HashMap<ConnId, Subscriber>>>,
    sessions: Mutex<HashMap<String, (ConnId, oneshot::Sender<()>)>>,
    bus: Option<mpsc::UnboundedSender<BusCmd>>,
}

impl Shared {
    /// Delivers a bus message to local subscribers at min(publish, granted) QoS.
    pub fn deliver(&self, topic: &str, qos: QoS, payload: Bytes) {
        let subs = self.subscriptions.read().unwrap_or_else(|e| e.into_inner());
        let Some(subscribers) = subs.get(topic) else { return };
        let Ok(name) = TopicName::new(topic) else { return };
        for sub in subscribers.values() {
            let d = Delivery { topic: name.clone(), payload: payload.clone(), qos: qos.min(sub.qos) };
            match sub.mailbox.try_send(d) {
                Ok(()) => self.stats.deliveries.fetch_add(1, Ordering::Relaxed),
                Err(_) => self.stats.delivery_drops.fetch_add(1, Ordering::Relaxed),
            };
        }
    }

    pub fn publish(&self, topic: &TopicName, qos: QoS, payload: Bytes) {
        match &self.bus {
            None => self.deliver(topic.as_str(), qos, payload),
            Some(bus) => {
                let _ = bus.send(BusCmd::Publish(topic.as_str().to_string(), bus::encode_payload(qos, &payload)));
            }
        }
    }

    /// Registers a subscription; resolves once the bus carries the topic.
    pub fn subscribe(&self, topic: &str, conn: ConnId, qos: QoS, mailbox: mpsc::Sender<Delivery>) -> Option<oneshot::Receiver<()>> {
        let mut subs = self.subscriptions.write().unwrap_or_else(|e| e.into_inner());
        let entry = subs.entry(topic.to_string()).or_default();
        let first = entry.is_empty();
        entry.insert(conn, Subscriber { qos, mailbox });
        match (&self.bus, first) {
            (Some(bus), true) => {
                let (tx, rx) = oneshot::channel();
                let _ = bus.send(BusCmd::Subscribe(topic.to_string(), tx));
                Some(rx)
            }
            _ => None,
        }
    }

    pub fn unsubscribe(&self, topic: &str, conn: ConnId) {
        let mut subs = self.subscriptions.write().unwrap_or_else(|e| e.into_inner());
        let Some(entry) = subs.get_mut(topic) else { return };
        if entry.remove(&conn).is_some() && entry.is_empty() {
            subs.remove(topic);
            if let Some(bus) = &self.bus {
                let _ = bus.send(BusCmd::Unsubscribe(topic.to_string()));
            }
        }
    }

    /// Makes `conn` the live session for `client_id`, displacing any other.
    pub fn register_session(&self, client_id: &str, conn: ConnId) -> oneshot::Receiver<()> {
        let (tx, rx) = oneshot::channel();
        let mut sessions = self.sessions.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((_, old)) = sessions.insert(client_id.to_string(), (conn, tx)) {
            let _ = old.send(());
        }
        rx
    }

    pub fn end_session(&self, client_id: &str, conn: ConnId) {
        let mut sessions = self.sessions.lock().unwrap_or_else(|e| e.into_inner());
        if sessions.get(client_id).is_some_and(|(c, _)| *c == conn) {
            sessions.remove(client_id);
        }
    }

    pub fn emit(&self, event: &str, fields: serde_json::Value) {
        if let Some(log) = &self.events {
            log.emit(event, fields);
        }
    }

    pub fn stats_json(&self) -> serde_json::Value {
        let s = &self.stats;
        let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
        let topics = self.subscriptions.read().map(|s| s.len()).unwrap_or(0);
        json!({
            "instance": self.instance,
            "connections": get(&s.connections),
            "connects": get(&s.connects),
            "publishes_in": get(&s.publishes_in),
            "bus_published": get(&s.bus_published),
            "bus_reconnects": get(&s.bus_reconnects),
            "deliveries": get(&s.deliveries),
            "delivery_drops": get(&s.delivery_drops),
            "retransmits": get(&s.retransmits),
            "keepalive_closes": get(&s.keepalive_closes),
            "topics": topics,
        })
    }
}

pub struct BrokerHandle {
    pub addr: SocketAddr,
    shared: Arc<Shared>,
    tasks: JoinSet<()>,
}

impl BrokerHandle {
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

pub async fn start_broker(cfg: BrokerConfig) -> anyhow::Result<BrokerHandle> {
    let listener = TcpListener::bind(&cfg.listen)
        .await
        .with_context(|| format!("cannot listen on {}: port already bound?", cfg.listen))?;
    let addr = listener.local_addr()?;
    let (bus_tx, bus_rx) = match cfg.bus {
        BusMode::Local => (None, None),
        BusMode::Store { .. } => {
            let (tx, rx) = mpsc::unbounded_channel();
            (Some(tx), Some(rx))
        }
    };
    let shared = Arc::new(Shared {
        instance: cfg.instance,
        keepalive_default: cfg.keepalive_default,
        ack_timeout: cfg.ack_timeout,
        retry: cfg.retry,
        stats: Stats::default(),
        events: cfg.events,
        subscriptions: RwLock::new(HashMap::new()),
        sessions: Mutex::new(HashMap::new()),
        bus: bus_tx,
    });
    let mut tasks = JoinSet::new();
    if let (BusMode::Store { manifest, index }, Some(rx)) = (cfg.bus, bus_rx) {
        tasks.spawn(bus::run_store_bus(manifest, index, rx, shared.clone()));
    }
    let accept_shared = shared.clone();
    tasks.spawn(async move {
        let mut conns = JoinSet::new();
        let mut next: ConnId = 1;
        loop {
            tokio::select! {
                accepted = listener.accept() => match accepted {
                    Ok((stream, peer)) => {
                        let _ = stream.set_nodelay(true);
                        conns.spawn(session::serve(stream, peer, next, accept_shared.clone()));
                        next += 1;
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
    tracing::info!(%addr, instance = shared.instance, "broker listening");
    Ok(BrokerHandle { addr, shared, tasks })
}

pub(crate) const fn mailbox_capacity() -> usize {
    MAILBOX
}
