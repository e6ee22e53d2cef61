//! Per-session QoS 0/1/2 handshake state.
//!
//! [`QosSession::step`] consumes one event and reports the packets to put on
//! the wire plus the publishes to hand to the application. Timers are owned
//! by the caller, which raises [`QosEvent::AckTimeout`] for ids listed by
//! [`QosSession::pending_outbound`].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use bytes::Bytes;

use super::packet::{Packet, PacketId, Publish, QoS, TopicName};

pub const DEFAULT_ACK_TIMEOUT_MS: u64 = 5_000;
pub const DEFAULT_MAX_RETRANSMITS: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutboundStage {
    AwaitPubAck,
    AwaitPubRec,
    AwaitPubComp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// `None` retransmits until acknowledged.
    pub max_retransmits: Option<u8>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retransmits: Some(DEFAULT_MAX_RETRANSMITS) }
    }
}

impl RetryPolicy {
    pub fn unbounded() -> Self {
        RetryPolicy { max_retransmits: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutboundMessage {
    pub topic: TopicName,
    pub payload: Bytes,
    pub qos: QoS,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QosEvent {
    /// The application wants to send a publish to the peer.
    Outbound(OutboundMessage),
    /// A packet arrived from the peer.
    Received(Packet),
    /// No acknowledgement arrived in time for an outbound message.
    AckTimeout(PacketId),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Step {
    /// Packets to write to the peer, in order.
    pub send: Vec<Packet>,
    /// Publishes to hand to the application.
    pub deliver: Vec<Publish>,
    /// The retransmission budget ran out; the caller must close the session.
    pub teardown: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum QosError {
    #[error("all 65535 packet ids are awaiting acknowledgement")]
    PacketIdsExhausted,
}

#[derive(Debug, Clone)]
struct Inflight {
    stage: OutboundStage,
    publish: Publish,
    retransmits: u8,
}

#[derive(Debug, Clone)]
pub struct QosSession {
    outbound: BTreeMap<PacketId, Inflight>,
    /// QoS 2 publishes received and delivered, waiting for PUBREL.
    inbound: BTreeSet<PacketId>,
    next_id: PacketId,
    policy: RetryPolicy,
    unknown_acks: u64,
}

impl Default for QosSession {
    fn default() -> Self {
        QosSession::new(RetryPolicy::default())
    }
}

impl QosSession {
    pub fn new(policy: RetryPolicy) -> Self {
        QosSession {
            outbound: BTreeMap::new(),
            inbound: BTreeSet::new(),
            next_id: PacketId::MIN,
            policy,
            unknown_acks: 0,
        }
    }

    pub fn step(&mut self, event: QosEvent) -> Result<Step, QosError> {
        let mut step = Step::default();
        match event {
            QosEvent::Outbound(msg) => self.on_outbound(msg, &mut step)?,
            QosEvent::Received(packet) => self.on_received(packet, &mut step),
            QosEvent::AckTimeout(id) => self.on_timeout(id, &mut step),
        }
        Ok(step)
    }

    pub fn outbound_stage(&self, id: PacketId) -> Option<OutboundStage> {
        self.outbound.get(&id).map(|f| f.stage)
    }

    pub fn awaiting_pubrel(&self, id: PacketId) -> bool {
        self.inbound.contains(&id)
    }

    pub fn pending_outbound(&self) -> impl Iterator<Item = PacketId> + '_ {
        self.outbound.keys().copied()
    }

    pub fn outbound_len(&self) -> usize {
        self.outbound.len()
    }

    pub fn inbound_len(&self) -> usize {
        self.inbound.len()
    }

    /// Acknowledgements that matched no pending handshake.
    pub fn unknown_acks(&self) -> u64 {
        self.unknown_acks
    }

    pub fn is_idle(&self) -> bool {
        self.outbound.is_empty() && self.inbound.is_empty()
    }

    fn allocate_id(&mut self) -> Result<PacketId, QosError> {
        let mut candidate = self.next_id;
        for _ in 0..u16::MAX {
            if !self.outbound.contains_key(&candidate) && !self.inbound.contains(&candidate) {
                self.next_id = candidate.wrapping_next();
                return Ok(candidate);
            }
            candidate = candidate.wrapping_next();
        }
        Err(QosError::PacketIdsExhausted)
    }

    fn on_outbound(&mut self, msg: OutboundMessage, step: &mut Step) -> Result<(), QosError> {
        let stage = match msg.qos {
            QoS::AtMostOnce => {
                step.send.push(Packet::Publish(Publish::at_most_once(msg.topic, msg.payload)));
                return Ok(());
            }
            QoS::AtLeastOnce => OutboundStage::AwaitPubAck,
            QoS::ExactlyOnce => OutboundStage::AwaitPubRec,
        };
        let id = self.allocate_id()?;
        let publish = Publish {
            dup: false,
            qos: msg.qos,
            packet_id: Some(id),
            topic: msg.topic,
            payload: msg.payload,
        };
        step.send.push(Packet::Publish(publish.clone()));
        self.outbound.insert(id, Inflight { stage, publish, retransmits: 0 });
        Ok(())
    }

    fn on_received(&mut self, packet: Packet, step: &mut Step) {
        match packet {
            Packet::Publish(publish) => match (publish.qos, publish.packet_id) {
                (QoS::AtMostOnce, _) => step.deliver.push(publish),
                (QoS::AtLeastOnce, Some(id)) => {
                    step.send.push(Packet::PubAck(id));
                    step.deliver.push(publish);
                }
                (QoS::ExactlyOnce, Some(id)) => {
                    step.send.push(Packet::PubRec(id));
                    if self.inbound.insert(id) {
                        step.deliver.push(publish);
                    }
                }
                // The codec never yields a QoS>0 publish without an id.
                (_, None) => self.unknown_acks += 1,
            },
            Packet::PubAck(id) => self.complete(id, OutboundStage::AwaitPubAck),
            Packet::PubRec(id) => match self.outbound.get_mut(&id) {
                Some(f) if f.stage == OutboundStage::AwaitPubRec => {
                    f.stage = OutboundStage::AwaitPubComp;
                    f.retransmits = 0;
                    step.send.push(Packet::PubRel(id));
                }
                Some(f) if f.stage == OutboundStage::AwaitPubComp => {
                    // Our PUBREL may have been lost; repeat it.
                    step.send.push(Packet::PubRel(id));
                }
                _ => self.unknown_acks += 1,
            },
            Packet::PubRel(id) => {
                if !self.inbound.remove(&id) {
                    self.unknown_acks += 1;
                }
                // Always answered, so a retransmitted PUBREL after completion
                // still lets the sender finish.
                step.send.push(Packet::PubComp(id));
            }
            Packet::PubComp(id) => self.complete(id, OutboundStage::AwaitPubComp),
            _ => {}
        }
    }

    fn complete(&mut self, id: PacketId, expected: OutboundStage) {
        match self.outbound.get(&id) {
            Some(f) if f.stage == expected => {
                self.outbound.remove(&id);
            }
            _ => self.unknown_acks += 1,
        }
    }

    fn on_timeout(&mut self, id: PacketId, step: &mut Step) {
        let Some(f) = self.outbound.get_mut(&id) else {
            return;
        };
        if let Some(max) = self.policy.max_retransmits {
            if f.retransmits >= max {
                step.teardown = true;
                return;
            }
        }
        f.retransmits = f.retransmits.saturating_add(1);
        match f.stage {
            OutboundStage::AwaitPubAck | OutboundStage::AwaitPubRec => {
                let mut again = f.publish.clone();
                again.dup = true;
                step.send.push(Packet::Publish(again));
            }
            OutboundStage::AwaitPubComp => step.send.push(Packet::PubRel(id)),
        }
    }
}
