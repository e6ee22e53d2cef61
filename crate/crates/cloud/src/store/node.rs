//! One slot-store node: listener, peer links and the core event loop.
//!
//! All table mutations, log appends and registry updates happen on a single
//! core task. Connection tasks forward frames to it and wait for the reply,
//! so replies on one connection stay in request order.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use bytes::Bytes;
use iotcloud_core::store::{
    ChannelRegistry, Frame, LogRecord, Origin, Replayer, Reply, Request, Shard,
};
use iotcloud_core::NodeId;
use serde_json::json;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinSet;

use super::logfile::{read_log, LogFile};
use super::manifest::Manifest;
use crate::wire::{write_frame, FrameReader};

pub const PING_INTERVAL: Duration = Duration::from_secs(1);
/// Missed pings before a peer is declared failed.
pub const PING_MISSES: u32 = 3;

const PUSH_QUEUE: usize = 8192;
const LINK_QUEUE: usize = 16 * 1024;
const UNACKED_LIMIT: usize = 1 << 20;

type ConnId = u64;

enum CoreMsg {
    Request { conn: ConnId, frame: Frame, reply: oneshot::Sender<Option<Frame>> },
    Attach { conn: ConnId, push: mpsc::Sender<Frame> },
    Detach { conn: ConnId },
    LogAck { sequence: u64 },
    PeerState { peer: NodeId, up: bool },
}

#[derive(Debug, Default, Clone, Copy)]
struct Counters {
    commands: u64,
    publishes: u64,
    deliveries: u64,
    forwards_sent: u64,
    forwards_dropped: u64,
    pushes_dropped: u64,
    shipped: u64,
}

struct Pending {
    sequence: u64,
    reply: oneshot::Sender<Option<Frame>>,
    frame: Frame,
}

struct Core {
    id: NodeId,
    manifest: Arc<Manifest>,
    shard: Shard,
    /// Replica of the primary's table while this node is an unpromoted standby.
    replica: Option<Replayer>,
    log: LogFile,
    registry: ChannelRegistry<ConnId>,
    pushers: HashMap<ConnId, mpsc::Sender<Frame>>,
    links: BTreeMap<NodeId, mpsc::Sender<Frame>>,
    peer_up: BTreeMap<NodeId, bool>,
    my_standby: Option<NodeId>,
    unacked: VecDeque<LogRecord>,
    standby_acked: u64,
    pending: VecDeque<Pending>,
    counters: Counters,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl Core {
    fn handle(&mut self, msg: CoreMsg) {
        match msg {
            CoreMsg::Request { conn, frame, reply } => self.request(conn, frame, reply),
            CoreMsg::Attach { conn, push } => {
                self.pushers.insert(conn, push);
            }
            CoreMsg::Detach { conn } => {
                self.pushers.remove(&conn);
                self.registry.drop_connection(conn);
            }
            CoreMsg::LogAck { sequence } => self.on_log_ack(sequence),
            CoreMsg::PeerState { peer, up } => self.on_peer_state(peer, up),
        }
    }

    fn request(&mut self, conn: ConnId, frame: Frame, reply: oneshot::Sender<Option<Frame>>) {
        let answer = match frame {
            Frame::Set { key, value } => return self.kv(Request::Set { key, value }, reply),
            Frame::Get { key } => return self.kv(Request::Get { key }, reply),
            Frame::Del { key } => return self.kv(Request::Del { key }, reply),
            Frame::Subscribe { channel } => {
                self.registry.subscribe(channel, conn);
                Some(Frame::Ok)
            }
            Frame::Unsubscribe { channel } => {
                self.registry.unsubscribe(&channel, conn);
                Some(Frame::Ok)
            }
            Frame::Publish { channel, payload } => {
                let delivered = self.publish(channel, payload, Origin::Client);
                Some(Frame::Count(delivered))
            }
            Frame::Forward { origin, channel, payload } => {
                self.publish(channel, payload, Origin::Peer(origin));
                None
            }
            Frame::LogShip(record) => Some(self.on_log_ship(record)),
            Frame::Failover { failed } => {
                self.fail(failed);
                Some(Frame::Ok)
            }
            Frame::Slots => Some(Frame::SlotTable(self.shard.map().intervals().to_vec())),
            Frame::Stats => Some(Frame::Info(self.stats().to_string())),
            Frame::Hello { .. } => None,
            other => Some(Frame::Error(format!("unexpected {:?} frame", other.opcode()))),
        };
        let _ = reply.send(answer);
    }

    fn kv(&mut self, request: Request, reply: oneshot::Sender<Option<Frame>>) {
        self.counters.commands += 1;
        let is_set = matches!(request, Request::Set { .. });
        let (result, record) = self.shard.execute(request, now_ms());
        let frame = match result {
            Reply::Ok(_) if is_set => Frame::Ok,
            Reply::Ok(value) => Frame::Value(value),
            Reply::Moved { slot, owner } => Frame::Moved { slot, owner },
            Reply::Unavailable { slot } => Frame::Unavailable { slot },
        };
        let Some(record) = record else {
            let _ = reply.send(Some(frame));
            return;
        };
        if let Err(e) = self.log.append(&record) {
            // The mutation is already applied in memory; refuse to acknowledge it.
            tracing::error!(error = %e, path = %self.log.path().display(), "log append failed");
            let _ = reply.send(Some(Frame::Error(format!("log append failed: {e}"))));
            return;
        }
        let sequence = record.sequence;
        let shipped = self.ship(record);
        if self.manifest.strict_replication && shipped {
            self.pending.push_back(Pending { sequence, reply, frame });
        } else {
            let _ = reply.send(Some(frame));
        }
    }

    /// Sends a record to this node's standby. Returns whether the standby is
    /// live, i.e. whether a strict acknowledgement should wait for it.
    fn ship(&mut self, record: LogRecord) -> bool {
        let Some(standby) = self.my_standby else {
            return false;
        };
        if self.shard.is_down(standby) {
            return false;
        }
        if self.unacked.len() >= UNACKED_LIMIT {
            self.unacked.pop_front();
        }
        self.unacked.push_back(record.clone());
        self.counters.shipped += 1;
        let Some(&up) = self.peer_up.get(&standby) else {
            // Standby not seen yet; nothing to wait for.
            return false;
        };
        if up {
            if let Some(link) = self.links.get(&standby) {
                let _ = link.try_send(Frame::LogShip(record));
            }
        }
        // While the link is reconnecting strict mode still waits: the
        // unacked queue is replayed when it comes back, and pending replies
        // are released if the standby is declared failed.
        true
    }

    fn on_log_ack(&mut self, sequence: u64) {
        self.standby_acked = self.standby_acked.max(sequence);
        while self.unacked.front().is_some_and(|r| r.sequence <= self.standby_acked) {
            self.unacked.pop_front();
        }
        while self.pending.front().is_some_and(|p| p.sequence <= self.standby_acked) {
            let p = self.pending.pop_front().unwrap();
            let _ = p.reply.send(Some(p.frame));
        }
    }

    fn release_pending(&mut self) {
        for p in self.pending.drain(..) {
            let _ = p.reply.send(Some(p.frame));
        }
        self.unacked.clear();
    }

    fn on_log_ship(&mut self, record: LogRecord) -> Frame {
        let Some(replica) = self.replica.as_mut() else {
            return Frame::Error("not a standby".into());
        };
        match replica.apply(&record) {
            Ok(true) => {
                if let Err(e) = self.log.append(&record) {
                    tracing::error!(error = %e, "standby log append failed");
                }
            }
            Ok(false) => {}
            Err(e) => {
                // A gap means shipped records were lost in transit; the
                // primary's unacked queue or its log file fills it later.
                tracing::debug!(error = %e, "log ship gap");
            }
        }
        Frame::LogAck { sequence: replica.applied() }
    }

    fn publish(&mut self, channel: Bytes, payload: Bytes, origin: Origin) -> u32 {
        self.counters.publishes += 1;
        let fanout = self.registry.fanout(&channel, origin);
        let mut delivered = 0;
        for conn in fanout.local {
            let Some(push) = self.pushers.get(&conn) else { continue };
            match push.try_send(Frame::Message { channel: channel.clone(), payload: payload.clone() }) {
                Ok(()) => delivered += 1,
                Err(_) => self.counters.pushes_dropped += 1,
            }
        }
        self.counters.deliveries += u64::from(delivered);
        if fanout.forward_to_peers {
            for (peer, link) in &self.links {
                let up = self.peer_up.get(peer).copied().unwrap_or(false);
                let frame = Frame::Forward { origin: self.id, channel: channel.clone(), payload: payload.clone() };
                if up && !self.shard.is_down(*peer) && link.try_send(frame).is_ok() {
                    self.counters.forwards_sent += 1;
                } else {
                    self.counters.forwards_dropped += 1;
                }
            }
        }
        delivered
    }

    fn on_peer_state(&mut self, peer: NodeId, up: bool) {
        let was = self.peer_up.insert(peer, up).unwrap_or(false);
        if up && !was && Some(peer) == self.my_standby {
            // Replay whatever the standby may have missed while disconnected.
            if let Some(link) = self.links.get(&peer) {
                for record in &self.unacked {
                    let _ = link.try_send(Frame::LogShip(record.clone()));
                }
            }
        }
        if !up && was {
            tracing::warn!(node = %self.id, %peer, "peer failed");
            self.fail(peer);
        }
    }

    /// Reacts to a node failure, promoting this node if it is the standby.
    fn fail(&mut self, failed: NodeId) {
        if failed == self.id || self.shard.is_down(failed) {
            return;
        }
        let standby = self.manifest.standby_for(failed);
        if standby == Some(self.id) {
            self.promote(failed);
        }
        let moved = self.shard.fail_over(failed, standby);
        tracing::info!(node = %self.id, %failed, ?standby, moved, "failover applied");
        if Some(failed) == self.my_standby {
            self.release_pending();
        }
        for (peer, link) in &self.links {
            if *peer != failed && !self.shard.is_down(*peer) {
                let _ = link.try_send(Frame::Failover { failed });
            }
        }
    }

    fn promote(&mut self, primary: NodeId) {
        let Some(mut replica) = self.replica.take() else {
            return;
        };
        let path = self.manifest.log_path(primary);
        match read_log(&path) {
            Ok(records) => {
                let mut replayed = 0;
                for record in &records {
                    match replica.apply(record) {
                        Ok(true) => {
                            let _ = self.log.append(record);
                            replayed += 1;
                        }
                        Ok(false) => {}
                        Err(e) => {
                            tracing::error!(error = %e, "primary log suffix unusable");
                            break;
                        }
                    }
                }
                tracing::info!(node = %self.id, %primary, replayed, "replayed primary log suffix");
            }
            Err(e) => tracing::warn!(error = %e, "primary log unreadable; promoting with replicated state"),
        }
        let (table, applied) = replica.into_parts();
        self.shard.adopt(table, applied);
    }

    fn stats(&self) -> serde_json::Value {
        let role = match (self.manifest.node(self.id).and_then(|n| n.standby_of), &self.replica) {
            (None, _) => "primary",
            (Some(_), Some(_)) => "standby",
            (Some(_), None) => "promoted",
        };
        let keys = match &self.replica {
            Some(r) => r.table().len(),
            None => self.shard.table().len(),
        };
        let slots: Vec<_> = self
            .shard
            .map()
            .intervals()
            .iter()
            .map(|(r, n)| json!({"lo": r.lo, "hi": r.hi, "node": n.0}))
            .collect();
        let peers: BTreeMap<String, bool> = self
            .peer_up
            .iter()
            .map(|(p, up)| (p.to_string(), *up && !self.shard.is_down(*p)))
            .collect();
        json!({
            "node": self.id.0,
            "role": role,
            "keys": keys,
            "last_sequence": self.replica.as_ref().map_or(self.shard.last_sequence(), |r| r.applied()),
            "subscriptions": self.registry.subscription_count(),
            "connections": self.pushers.len(),
            "commands": self.counters.commands,
            "publishes": self.counters.publishes,
            "deliveries": self.counters.deliveries,
            "forwards_sent": self.counters.forwards_sent,
            "forwards_dropped": self.counters.forwards_dropped,
            "pushes_dropped": self.counters.pushes_dropped,
            "shipped": self.counters.shipped,
            "standby_acked": self.standby_acked,
            "peers": peers,
            "slots": slots,
        })
    }
}

/// A running node. Dropping the handle (or calling [`NodeHandle::kill`])
/// aborts every task and closes every socket, like a crash.
pub struct NodeHandle {
    pub id: NodeId,
    pub addr: SocketAddr,
    tasks: JoinSet<()>,
}

impl NodeHandle {
    pub fn kill(mut self) {
        self.tasks.abort_all();
    }

    /// Resolves when any node task exits (normally never).
    pub async fn wait(&mut self) {
        self.tasks.join_next().await;
    }
}

/// Recovers the node's log and starts serving on its manifest address.
pub async fn start_node(manifest: Manifest, id: NodeId) -> anyhow::Result<NodeHandle> {
    let spec = manifest.node(id).with_context(|| format!("node {id} is not in the manifest"))?;
    let listener = TcpListener::bind(&spec.addr)
        .await
        .with_context(|| format!("binding {}", spec.addr))?;
    let addr = listener.local_addr()?;
    let standby_of = spec.standby_of.map(NodeId);

    let (log, recovered) = LogFile::open(&manifest.log_path(id))?;
    let mut replayer = Replayer::new();
    for record in &recovered.records {
        replayer.apply(record)?;
    }
    let map = manifest.slot_map()?;
    let (shard, replica) = if standby_of.is_some() {
        (Shard::new(id, map), Some(replayer))
    } else {
        let (table, applied) = replayer.into_parts();
        (Shard::with_state(id, map, table, applied), None)
    };
    tracing::info!(node = %id, %addr, records = recovered.records.len(), "node recovered");

    let manifest = Arc::new(manifest);
    let (core_tx, mut core_rx) = mpsc::channel::<CoreMsg>(LINK_QUEUE);
    let mut tasks = JoinSet::new();
    let mut links = BTreeMap::new();
    for peer in &manifest.nodes {
        let peer_id = NodeId(peer.id);
        if peer_id == id {
            continue;
        }
        let (tx, rx) = mpsc::channel(LINK_QUEUE);
        links.insert(peer_id, tx);
        tasks.spawn(peer_link(id, peer_id, peer.addr.clone(), rx, core_tx.clone()));
    }

    let mut core = Core {
        id,
        my_standby: manifest.standby_for(id),
        manifest: manifest.clone(),
        shard,
        replica,
        log,
        registry: ChannelRegistry::new(),
        pushers: HashMap::new(),
        links,
        peer_up: BTreeMap::new(),
        unacked: VecDeque::new(),
        standby_acked: 0,
        pending: VecDeque::new(),
        counters: Counters::default(),
    };
    tasks.spawn(async move {
        while let Some(msg) = core_rx.recv().await {
            core.handle(msg);
        }
    });
    tasks.spawn(accept_loop(listener, core_tx));
    Ok(NodeHandle { id, addr, tasks })
}

async fn accept_loop(listener: TcpListener, core: mpsc::Sender<CoreMsg>) {
    let mut conns = JoinSet::new();
    let mut next_id: ConnId = 1;
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, _)) => {
                    let _ = stream.set_nodelay(true);
                    conns.spawn(serve_connection(stream, next_id, core.clone()));
                    next_id += 1;
                }
                Err(e) => {
                    tracing::warn!(error = %e, "accept failed");
                    tokio::time::sleep(Duration::from_millis(50)).await;
                }
            },
            Some(_) = conns.join_next(), if !conns.is_empty() => {}
        }
    }
}

async fn serve_connection(stream: TcpStream, conn: ConnId, core: mpsc::Sender<CoreMsg>) {
    let (rd, mut wr) = stream.into_split();
    let (push_tx, mut push_rx) = mpsc::channel::<Frame>(PUSH_QUEUE);
    if core.send(CoreMsg::Attach { conn, push: push_tx.clone() }).await.is_err() {
        return;
    }
    let writer = tokio::spawn(async move {
        let mut out = Vec::new();
        while let Some(frame) = push_rx.recv().await {
            out.clear();
            iotcloud_core::store::encode_frame(&frame, &mut out);
            while let Ok(more) = push_rx.try_recv() {
                iotcloud_core::store::encode_frame(&more, &mut out);
                if out.len() > 64 * 1024 {
                    break;
                }
            }
            if tokio::io::AsyncWriteExt::write_all(&mut wr, &out).await.is_err() {
                break;
            }
        }
    });
    let mut reader = FrameReader::new(rd);
    loop {
        let frame = match reader.next().await {
            Ok(Some(frame)) => frame,
            Ok(None) => break,
            Err(e) => {
                tracing::debug!(error = %e, conn, "connection read failed");
                break;
            }
        };
        if frame == Frame::Ping {
            if push_tx.send(Frame::Pong).await.is_err() {
                break;
            }
            continue;
        }
        let (reply_tx, reply_rx) = oneshot::channel();
        if core.send(CoreMsg::Request { conn, frame, reply: reply_tx }).await.is_err() {
            break;
        }
        match reply_rx.await {
            Ok(Some(answer)) => {
                if push_tx.send(answer).await.is_err() {
                    break;
                }
            }
            Ok(None) => {}
            Err(_) => break,
        }
    }
    let _ = core.send(CoreMsg::Detach { conn }).await;
    drop(push_tx);
    let _ = writer.await;
}

/// Outbound link to one peer: carries forwards, log shipping and failover
/// notices, and runs the ping-based failure detector.
async fn peer_link(
    me: NodeId,
    peer: NodeId,
    addr: String,
    mut outbound: mpsc::Receiver<Frame>,
    core: mpsc::Sender<CoreMsg>,
) {
    let deadline = PING_INTERVAL * PING_MISSES;
    let mut last_pong = Instant::now();
    let mut reported_up = false;
    loop {
        let stream = tokio::time::timeout(PING_INTERVAL, TcpStream::connect(&addr)).await;
        let stream = match stream {
            Ok(Ok(s)) => s,
            _ => {
                if reported_up && last_pong.elapsed() >= deadline {
                    reported_up = false;
                    let _ = core.send(CoreMsg::PeerState { peer, up: false }).await;
                }
                // Drain queued frames so stale forwards are not replayed late.
                while outbound.try_recv().is_ok() {}
                tokio::time::sleep(PING_INTERVAL).await;
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let (rd, mut wr) = stream.into_split();
        if write_frame(&mut wr, &Frame::Hello { node: me }).await.is_err() {
            continue;
        }
        let (pong_tx, mut pong_rx) = mpsc::unbounded_channel::<()>();
        let reader_core = core.clone();
        let reader = tokio::spawn(async move {
            let mut reader = FrameReader::new(rd);
            while let Ok(Some(frame)) = reader.next().await {
                match frame {
                    Frame::Pong => {
                        if pong_tx.send(()).is_err() {
                            break;
                        }
                    }
                    Frame::LogAck { sequence } => {
                        let _ = reader_core.send(CoreMsg::LogAck { sequence }).await;
                    }
                    _ => {}
                }
            }
        });
        let mut ticker = tokio::time::interval(PING_INTERVAL);
        let mut out = Vec::new();
        loop {
            tokio::select! {
                frame = outbound.recv() => {
                    let Some(frame) = frame else { reader.abort(); return };
                    out.clear();
                    iotcloud_core::store::encode_frame(&frame, &mut out);
                    while let Ok(more) = outbound.try_recv() {
                        iotcloud_core::store::encode_frame(&more, &mut out);
                        if out.len() > 64 * 1024 {
                            break;
                        }
                    }
                    if tokio::io::AsyncWriteExt::write_all(&mut wr, &out).await.is_err() {
                        break;
                    }
                }
                pong = pong_rx.recv() => {
                    if pong.is_none() {
                        break;
                    }
                    last_pong = Instant::now();
                    if !reported_up {
                        reported_up = true;
                        let _ = core.send(CoreMsg::PeerState { peer, up: true }).await;
                    }
                }
                _ = ticker.tick() => {
                    if reported_up && last_pong.elapsed() >= deadline {
                        break;
                    }
                    if write_frame(&mut wr, &Frame::Ping).await.is_err() {
                        break;
                    }
                }
            }
        }
        reader.abort();
        if reported_up && last_pong.elapsed() >= deadline {
            reported_up = false;
            let _ = core.send(CoreMsg::PeerState { peer, up: false }).await;
        }
    }
}
