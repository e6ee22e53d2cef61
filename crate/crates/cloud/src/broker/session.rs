//! One client connection: CONNECT, then the packet loop.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use iotcloud_core::mqtt::{
    ConnAck, ConnectReturn, OutboundMessage, Packet, PacketId, QoS, QosEvent, QosSession, SubAck,
    SubscribeReturn,
};
use serde_json::json;
use tokio::io::AsyncWriteExt;
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::TcpStream;
use tokio::sync::mpsc;
use tokio::time::Instant;

use super::{mailbox_capacity, ConnId, Delivery, Shared};
use crate::wire::{encode_packets, PacketReader};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);
const SUBSCRIBE_BUS_TIMEOUT: Duration = Duration::from_secs(5);

/// Why the packet loop ended.
#[derive(Debug)]
enum Close {
    Disconnect,
    Protocol(String),
    Io,
    Keepalive,
    Displaced,
    RetriesExhausted,
}

struct Conn {
    shared: Arc<Shared>,
    id: ConnId,
    client_id: String,
    writer: OwnedWriteHalf,
    qos: QosSession,
    sent_at: HashMap<PacketId, Instant>,
    subscriptions: HashMap<String, QoS>,
    mailbox: mpsc::Sender<Delivery>,
    out: Vec<u8>,
}

pub(crate) async fn serve(stream: TcpStream, peer: SocketAddr, id: ConnId, shared: Arc<Shared>) {
    let (rd, wr) = stream.into_split();
    let mut reader = PacketReader::new(rd);
    let first = tokio::time::timeout(CONNECT_TIMEOUT, reader.next()).await;
    let Ok(Ok(Some(Packet::Connect(connect)))) = first else {
        return;
    };
    let (mailbox, mut inbox) = mpsc::channel(mailbox_capacity());
    let mut conn = Conn {
        shared: shared.clone(),
        id,
        client_id: connect.client_id.clone(),
        writer: wr,
        qos: QosSession::new(shared.retry),
        sent_at: HashMap::new(),
        subscriptions: HashMap::new(),
        mailbox,
        out: Vec::new(),
    };
    if connect.protocol_level != 4 && connect.protocol_level != 3 {
        let refuse = ConnAck { session_present: false, code: ConnectReturn::UnacceptableProtocolVersion };
        let _ = conn.send(&[Packet::ConnAck(refuse)]).await;
        return;
    }
    if conn.client_id.is_empty() {
        conn.client_id = format!("auto-{}-{id}", shared.instance);
    }
    let mut displaced = shared.register_session(&conn.client_id, id);
    let accept = ConnAck { session_present: false, code: ConnectReturn::Accepted };
    if conn.send(&[Packet::ConnAck(accept)]).await.is_err() {
        shared.end_session(&conn.client_id, id);
        return;
    }
    shared.stats.connects.fetch_add(1, Ordering::Relaxed);
    shared.stats.connections.fetch_add(1, Ordering::Relaxed);
    shared.emit("connect", json!({"client_id": conn.client_id, "conn": id, "peer": peer.to_string(), "keep_alive": connect.keep_alive}));

    let keep_alive = match connect.keep_alive {
        0 => shared.keepalive_default,
        k => k,
    };
    // 1.5 x keepalive, in milliseconds.
    let grace = Duration::from_millis(u64::from(keep_alive) * 1500);
    let mut deadline = Instant::now() + grace;
    let mut ticker = tokio::time::interval(Duration::from_millis(250).min(shared.ack_timeout));

    let reason = loop {
        tokio::select! {
            packet = reader.next() => match packet {
                Ok(Some(p)) => {
                    deadline = Instant::now() + grace;
                    if let Err(close) = conn.on_packet(p).await {
                        break close;
                    }
                }
                Ok(None) => break Close::Io,
                Err(e) => break Close::Protocol(e.to_string()),
            },
            Some(delivery) = inbox.recv() => {
                if let Err(close) = conn.on_delivery(delivery).await {
                    break close;
                }
            }
            _ = ticker.tick() => {
                if let Err(close) = conn.retransmit().await {
                    break close;
                }
            }
            _ = tokio::time::sleep_until(deadline) => break Close::Keepalive,
            _ = &mut displaced => break Close::Displaced,
        }
    };

    match &reason {
        Close::Keepalive => {
            shared.stats.keepalive_closes.fetch_add(1, Ordering::Relaxed);
        }
        Close::Protocol(why) => tracing::debug!(client = %conn.client_id, %why, "closing connection"),
        _ => {}
    }
    for topic in conn.subscriptions.keys() {
        shared.unsubscribe(topic, id);
    }
    shared.end_session(&conn.client_id, id);
    shared.stats.connections.fetch_sub(1, Ordering::Relaxed);
    shared.emit("disconnect", json!({"client_id": conn.client_id, "conn": id, "reason": format!("{reason:?}")}));
    let _ = conn.writer.shutdown().await;
}

impl Conn {
    async fn send(&mut self, packets: &[Packet]) -> Result<(), Close> {
        if packets.is_empty() {
            return Ok(());
        }
        self.out.clear();
        encode_packets(packets, &mut self.out).map_err(|e| Close::Protocol(e.to_string()))?;
        self.writer.write_all(&self.out).await.map_err(|_| Close::Io)?;
        let now = Instant::now();
        for p in packets {
            if let Packet::Publish(iotcloud_core::mqtt::Publish { packet_id: Some(id), .. }) | Packet::PubRel(id) = p {
                self.sent_at.insert(*id, now);
            }
        }
        Ok(())
    }

    fn step(&mut self, event: QosEvent) -> Result<iotcloud_core::mqtt::Step, Close> {
        self.qos.step(event).map_err(|e| Close::Protocol(e.to_string()))
    }

    async fn on_packet(&mut self, packet: Packet) -> Result<(), Close> {
        match packet {
            Packet::Publish(publish) => {
                let step = self.step(QosEvent::Received(Packet::Publish(publish)))?;
                for accepted in step.deliver {
                    self.shared.stats.publishes_in.fetch_add(1, Ordering::Relaxed);
                    self.shared.emit(
                        "publish",
                        json!({"client_id": self.client_id, "topic": accepted.topic.as_str(), "qos": accepted.qos.as_u8(), "bytes": accepted.payload.len()}),
                    );
                    self.shared.publish(&accepted.topic, accepted.qos, accepted.payload);
                }
                self.send(&step.send).await
            }
            p @ (Packet::PubAck(_) | Packet::PubRec(_) | Packet::PubRel(_) | Packet::PubComp(_)) => {
                let completed = match p {
                    Packet::PubAck(id) | Packet::PubComp(id) => Some(id),
                    _ => None,
                };
                let step = self.step(QosEvent::Received(p))?;
                if let Some(id) = completed.filter(|id| self.qos.outbound_stage(*id).is_none()) {
                    self.sent_at.remove(&id);
                }
                self.send(&step.send).await
            }
            Packet::Subscribe(sub) => {
                let mut codes = Vec::with_capacity(sub.topics.len());
                let mut pending = Vec::new();
                for (topic, requested) in &sub.topics {
                    let granted = (*requested).min(QoS::ExactlyOnce);
                    self.subscriptions.insert(topic.as_str().to_string(), granted);
                    if let Some(ready) = self.shared.subscribe(topic.as_str(), self.id, granted, self.mailbox.clone()) {
                        pending.push(ready);
                    }
                    codes.push(SubscribeReturn::Granted(granted));
                    self.shared.emit(
                        "subscribe",
                        json!({"client_id": self.client_id, "topic": topic.as_str(), "qos": granted.as_u8()}),
                    );
                }
                for ready in pending {
                    let _ = tokio::time::timeout(SUBSCRIBE_BUS_TIMEOUT, ready).await;
                }
                self.send(&[Packet::SubAck(SubAck { packet_id: sub.packet_id, codes })]).await
            }
            Packet::Unsubscribe(unsub) => {
                for topic in &unsub.topics {
                    if self.subscriptions.remove(topic.as_str()).is_some() {
                        self.shared.unsubscribe(topic.as_str(), self.id);
                    }
                }
                self.send(&[Packet::UnsubAck(unsub.packet_id)]).await
            }
            Packet::PingReq => self.send(&[Packet::PingResp]).await,
            Packet::Disconnect => Err(Close::Disconnect),
            other => Err(Close::Protocol(format!("unexpected {:?} from client", other.kind()))),
        }
    }

    async fn on_delivery(&mut self, d: Delivery) -> Result<(), Close> {
        // A late delivery for a topic this connection has just left.
        if !self.subscriptions.contains_key(d.topic.as_str()) {
            return Ok(());
        }
        self.shared.emit(
            "deliver",
            json!({"client_id": self.client_id, "topic": d.topic.as_str(), "qos": d.qos.as_u8(), "bytes": d.payload.len()}),
        );
        match self.qos.step(QosEvent::Outbound(OutboundMessage { topic: d.topic, payload: d.payload, qos: d.qos })) {
            Ok(step) => self.send(&step.send).await,
            Err(e) => {
                tracing::warn!(client = %self.client_id, error = %e, "dropping delivery");
                self.shared.stats.delivery_drops.fetch_add(1, Ordering::Relaxed);
                Ok(())
            }
        }
    }

    async fn retransmit(&mut self) -> Result<(), Close> {
        let now = Instant::now();
        let timeout = self.shared.ack_timeout;
        let expired: Vec<PacketId> = self
            .sent_at
            .iter()
            .filter(|(_, t)| now >= **t + timeout)
            .map(|(id, _)| *id)
            .collect();
        for id in expired {
            self.sent_at.remove(&id);
            if self.qos.outbound_stage(id).is_none() {
                continue;
            }
            let step = self.step(QosEvent::AckTimeout(id))?;
            if step.teardown {
                return Err(Close::RetriesExhausted);
            }
            self.shared.stats.retransmits.fetch_add(1, Ordering::Relaxed);
            self.send(&step.send).await?;
        }
        Ok(())
    }
}
