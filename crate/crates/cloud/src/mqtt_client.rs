//! Minimal async MQTT 3.1.1 client over the core codec and QoS machine.
//!
//! The client is driven by its owner: [`MqttClient::next_event`] reads the
//! socket, answers acknowledgements, retransmits on timeout and sends
//! keepalive pings.

use std::collections::{HashMap, VecDeque};
use std::io;
use std::time::Duration;

use bytes::Bytes;
use iotcloud_core::mqtt::{
    Connect, ConnectReturn, OutboundMessage, Packet, PacketId, Publish, QoS, QosEvent, QosSession,
    RetryPolicy, Subscribe, SubscribeReturn, TopicName, Unsubscribe,
};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;
use tokio::time::Instant;

use crate::wire::{encode_packets, write_packet, PacketReader};

#[derive(Debug, thiserror::Error)]
pub enum MqttError {
    #[error("connection refused with return code {0:?}")]
    Refused(ConnectReturn),
    #[error("broker closed the connection")]
    Closed,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("session torn down after repeated ack timeouts")]
    RetriesExhausted,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientEvent {
    /// An application message from the broker (already acknowledged).
    Message(Publish),
    /// An outgoing QoS 1/2 publish finished its handshake.
    Published(PacketId),
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub client_id: String,
    pub keep_alive: u16,
    pub ack_timeout: Duration,
    pub retry: RetryPolicy,
    pub connect_timeout: Duration,
}

impl ClientOptions {
    pub fn new(client_id: impl Into<String>) -> Self {
        ClientOptions {
            client_id: client_id.into(),
            keep_alive: 60,
            ack_timeout: Duration::from_secs(5),
            retry: RetryPolicy::default(),
            connect_timeout: Duration::from_secs(10),
        }
    }
}

pub struct MqttClient {
    reader: PacketReader<OwnedReadHalf>,
    writer: OwnedWriteHalf,
    session: QosSession,
    opts: ClientOptions,
    sent_at: HashMap<PacketId, Instant>,
    last_send: Instant,
    next_control_id: u16,
    events: VecDeque<ClientEvent>,
    out: Vec<u8>,
}

impl MqttClient {
    pub async fn connect(addr: &str, opts: ClientOptions) -> Result<MqttClient, MqttError> {
        let stream = tokio::time::timeout(opts.connect_timeout, TcpStream::connect(addr))
            .await
            .map_err(|_| MqttError::Timeout("tcp connect"))??;
        stream.set_nodelay(true)?;
        let (rd, mut wr) = stream.into_split();
        write_packet(&mut wr, &Packet::Connect(Connect::new(opts.client_id.clone(), opts.keep_alive))).await?;
        let mut reader = PacketReader::new(rd);
        let ack = tokio::time::timeout(opts.connect_timeout, reader.next())
            .await
            .map_err(|_| MqttError::Timeout("CONNACK"))??;
        match ack {
            Some(Packet::ConnAck(a)) if a.code == ConnectReturn::Accepted => {}
            Some(Packet::ConnAck(a)) => return Err(MqttError::Refused(a.code)),
            Some(other) => return Err(MqttError::Protocol(format!("expected CONNACK, got {:?}", other.kind()))),
            None => return Err(MqttError::Closed),
        }
        Ok(MqttClient {
            reader,
            writer: wr,
            session: QosSession::new(opts.retry),
            opts,
            sent_at: HashMap::new(),
            last_send: Instant::now(),
            next_control_id: 0,
            events: VecDeque::new(),
            out: Vec::new(),
        })
    }

    async fn send(&mut self, packets: &[Packet]) -> Result<(), MqttError> {
        if packets.is_empty() {
            return Ok(());
        }
        self.out.clear();
        encode_packets(packets, &mut self.out)?;
        tokio::io::AsyncWriteExt::write_all(&mut self.writer, &self.out).await?;
        let now = Instant::now();
        self.last_send = now;
        for p in packets {
            if let Packet::Publish(Publish { packet_id: Some(id), .. }) | Packet::PubRel(id) = p {
                self.sent_at.insert(*id, now);
            }
        }
        Ok(())
    }

    fn control_id(&mut self) -> PacketId {
        loop {
            self.next_control_id = self.next_control_id.wrapping_add(1).max(1);
            let id = PacketId::new(self.next_control_id).expect("nonzero");
            if self.session.outbound_stage(id).is_none() {
                return id;
            }
        }
    }

    /// Subscribes and waits for the SUBACK. Messages arriving meanwhile are
    /// queued for [`MqttClient::next_event`].
    pub async fn subscribe(&mut self, topics: &[(&str, QoS)]) -> Result<Vec<SubscribeReturn>, MqttError> {
        let packet_id = self.control_id();
        let topics = topics
            .iter()
            .map(|(t, q)| Ok((TopicName::new(*t).map_err(|e| MqttError::Protocol(e.to_string()))?, *q)))
            .collect::<Result<Vec<_>, MqttError>>()?;
        self.send(&[Packet::Subscribe(Subscribe { packet_id, topics })]).await?;
        let deadline = Instant::now() + self.opts.connect_timeout;
        loop {
            match self.read_packet(deadline).await? {
                Some(Packet::SubAck(ack)) if ack.packet_id == packet_id => return Ok(ack.codes),
                Some(p) => self.absorb(p).await?,
                None => return Err(MqttError::Timeout("SUBACK")),
            }
        }
    }

    pub async fn unsubscribe(&mut self, topics: &[&str]) -> Result<(), MqttError> {
        let packet_id = self.control_id();
        let topics = topics
            .iter()
            .map(|t| TopicName::new(*t).map_err(|e| MqttError::Protocol(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        self.send(&[Packet::Unsubscribe(Unsubscribe { packet_id, topics })]).await?;
        let deadline = Instant::now() + self.opts.connect_timeout;
        loop {
            match self.read_packet(deadline).await? {
                Some(Packet::UnsubAck(id)) if id == packet_id => return Ok(()),
                Some(p) => self.absorb(p).await?,
                None => return Err(MqttError::Timeout("UNSUBACK")),
            }
        }
    }

    /// Starts a publish; QoS 1/2 completion is reported as
    /// [`ClientEvent::Published`].
    pub async fn publish(&mut self, topic: &str, payload: impl Into<Bytes>, qos: QoS) -> Result<Option<PacketId>, MqttError> {
        let topic = TopicName::new(topic).map_err(|e| MqttError::Protocol(e.to_string()))?;
        let step = self
            .session
            .step(QosEvent::Outbound(OutboundMessage { topic, payload: payload.into(), qos }))
            .map_err(|e| MqttError::Protocol(e.to_string()))?;
        let id = step.send.first().and_then(Packet::packet_id);
        self.send(&step.send).await?;
        Ok(id)
    }

    /// Outgoing publishes still waiting for their handshake to finish.
    pub fn inflight(&self) -> usize {
        self.session.outbound_len()
    }

    /// Next event before `deadline`, or `None` if the deadline passes.
    pub async fn next_event(&mut self, deadline: Instant) -> Result<Option<ClientEvent>, MqttError> {
        loop {
            if let Some(e) = self.events.pop_front() {
                return Ok(Some(e));
            }
            let Some(packet) = self.read_packet(deadline).await? else {
                return Ok(None);
            };
            self.absorb(packet).await?;
        }
    }

    /// Reads one packet, handling retransmission and keepalive while idle.
    async fn read_packet(&mut self, deadline: Instant) -> Result<Option<Packet>, MqttError> {
        loop {
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            let wake = deadline.min(self.next_timer());
            match tokio::time::timeout_at(wake, self.reader.next()).await {
                Ok(Ok(Some(p))) => return Ok(Some(p)),
                Ok(Ok(None)) => return Err(MqttError::Closed),
                Ok(Err(e)) => return Err(e.into()),
                Err(_) => self.on_timer().await?,
            }
        }
    }

    fn keepalive_due(&self) -> Option<Instant> {
        (self.opts.keep_alive > 0).then(|| self.last_send + Duration::from_secs(u64::from(self.opts.keep_alive)))
    }

    fn next_timer(&self) -> Instant {
        let retry = self.sent_at.values().min().map(|t| *t + self.opts.ack_timeout);
        let far = Instant::now() + Duration::from_secs(3600);
        retry.into_iter().chain(self.keepalive_due()).min().unwrap_or(far)
    }

    async fn on_timer(&mut self) -> Result<(), MqttError> {
        let now = Instant::now();
        let expired: Vec<PacketId> = self
            .sent_at
            .iter()
            .filter(|(_, t)| now >= **t + self.opts.ack_timeout)
            .map(|(id, _)| *id)
            .collect();
        for id in expired {
            self.sent_at.remove(&id);
            if self.session.outbound_stage(id).is_none() {
                continue;
            }
            let step = self
                .session
                .step(QosEvent::AckTimeout(id))
                .map_err(|e| MqttError::Protocol(e.to_string()))?;
            if step.teardown {
                return Err(MqttError::RetriesExhausted);
            }
            self.send(&step.send).await?;
        }
        if self.keepalive_due().is_some_and(|due| now >= due) {
            self.send(&[Packet::PingReq]).await?;
        }
        Ok(())
    }

    async fn absorb(&mut self, packet: Packet) -> Result<(), MqttError> {
        match packet {
            Packet::PingResp => Ok(()),
            p @ (Packet::Publish(_) | Packet::PubAck(_) | Packet::PubRec(_) | Packet::PubRel(_) | Packet::PubComp(_)) => {
                let finished = match &p {
                    Packet::PubAck(id) | Packet::PubComp(id) => Some(*id),
                    _ => None,
                };
                let before = finished.map(|id| self.session.outbound_stage(id).is_some());
                let step = self
                    .session
                    .step(QosEvent::Received(p))
                    .map_err(|e| MqttError::Protocol(e.to_string()))?;
                if let (Some(id), Some(true)) = (finished, before) {
                    if self.session.outbound_stage(id).is_none() {
                        self.sent_at.remove(&id);
                        self.events.push_back(ClientEvent::Published(id));
                    }
                }
                self.events.extend(step.deliver.into_iter().map(ClientEvent::Message));
                self.send(&step.send).await
            }
            other => Err(MqttError::Protocol(format!("unexpected {:?}", other.kind()))),
        }
    }

    pub async fn disconnect(mut self) -> Result<(), MqttError> {
        self.send(&[Packet::Disconnect]).await?;
        tokio::io::AsyncWriteExt::shutdown(&mut self.writer).await?;
        Ok(())
    }
}
