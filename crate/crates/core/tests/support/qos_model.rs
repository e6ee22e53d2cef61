//! Test-side models that drive two `QosSession`s against each other.
//!
//! `explore_qos2` walks every interleaving of network actions for a single
//! QoS 2 message up to a depth bound; `lossy_transfer` runs a seeded loss
//! simulation for many messages.

use std::collections::{HashMap, VecDeque};

use bytes::Bytes;
use iotcloud_core::mqtt::{
    OutboundMessage, Packet, PacketId, QoS, QosEvent, QosSession, RetryPolicy, TopicName,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone)]
struct World {
    sender: QosSession,
    receiver: QosSession,
    to_receiver: VecDeque<Packet>,
    to_sender: VecDeque<Packet>,
    deliveries: usize,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ExploreStats {
    /// Distinct action sequences walked.
    pub paths: u64,
    /// Paths on which the sender saw the handshake finish.
    pub completed: u64,
    /// Completed paths with exactly one delivery.
    pub completed_exactly_once: u64,
    /// Any path where the receiver delivered more than once.
    pub duplicate_deliveries: u64,
}

fn message(qos: QoS) -> OutboundMessage {
    OutboundMessage {
        topic: TopicName::new("model").unwrap(),
        payload: Bytes::from_static(b"m"),
        qos,
    }
}

/// Every interleaving of: deliver either channel head, drop either channel
/// head, duplicate the sender's head in place, or fire the sender's ack
/// timeout, up to `max_events` actions. Channels are FIFO, as over TCP.
pub fn explore_qos2(max_events: usize) -> ExploreStats {
    let mut sender = QosSession::new(RetryPolicy::unbounded());
    let first = sender.step(QosEvent::Outbound(message(QoS::ExactlyOnce))).unwrap();
    let world = World {
        sender,
        receiver: QosSession::new(RetryPolicy::unbounded()),
        to_receiver: first.send.into_iter().collect(),
        to_sender: VecDeque::new(),
        deliveries: 0,
    };
    let mut stats = ExploreStats::default();
    walk(world, max_events, &mut stats);
    stats
}

fn walk(world: World, budget: usize, stats: &mut ExploreStats) {
    if world.deliveries > 1 {
        stats.duplicate_deliveries += 1;
    }
    let done = world.sender.is_idle();
    if done || budget == 0 {
        stats.paths += 1;
        if done {
            stats.completed += 1;
            if world.deliveries == 1 {
                stats.completed_exactly_once += 1;
            }
        }
        return;
    }

    if let Some(head) = world.to_receiver.front().cloned() {
        let mut w = world.clone();
        w.to_receiver.pop_front();
        let step = w.receiver.step(QosEvent::Received(head)).unwrap();
        w.deliveries += step.deliver.len();
        w.to_sender.extend(step.send);
        walk(w, budget - 1, stats);

        let mut w = world.clone();
        w.to_receiver.pop_front();
        walk(w, budget - 1, stats);

        let mut w = world.clone();
        let dup = w.to_receiver.front().cloned().unwrap();
        w.to_receiver.push_front(dup);
        walk(w, budget - 1, stats);
    }
    if let Some(head) = world.to_sender.front().cloned() {
        let mut w = world.clone();
        w.to_sender.pop_front();
        let step = w.sender.step(QosEvent::Received(head)).unwrap();
        w.to_receiver.extend(step.send);
        walk(w, budget - 1, stats);

        let mut w = world.clone();
        w.to_sender.pop_front();
        walk(w, budget - 1, stats);
    }
    let pending: Vec<PacketId> = world.sender.pending_outbound().collect();
    for id in pending {
        let mut w = world.clone();
        let step = w.sender.step(QosEvent::AckTimeout(id)).unwrap();
        w.to_receiver.extend(step.send);
        walk(w, budget - 1, stats);
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct LossStats {
    pub messages: u64,
    /// Messages delivered at least once.
    pub delivered: u64,
    /// Deliveries beyond the first for a message.
    pub duplicates: u64,
    pub retransmissions: u64,
    pub sessions_torn_down: u64,
}

/// Sends `messages` publishes one at a time over a link that drops each
/// packet independently with probability `loss`, in both directions.
pub fn lossy_transfer(qos: QoS, messages: u64, loss: f64, policy: RetryPolicy, seed: u64) -> LossStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sender = QosSession::new(policy);
    let mut receiver = QosSession::new(RetryPolicy::unbounded());
    let mut stats = LossStats { messages, ..LossStats::default() };
    let mut per_message: HashMap<Bytes, u64> = HashMap::new();

    for n in 0..messages {
        let payload = Bytes::from(n.to_be_bytes().to_vec());
        let msg = OutboundMessage { payload: payload.clone(), ..message(qos) };
        let mut wire: VecDeque<Packet> = sender.step(QosEvent::Outbound(msg)).unwrap().send.into();
        loop {
            while let Some(packet) = wire.pop_front() {
                if rng.gen_bool(loss) {
                    continue;
                }
                let step = receiver.step(QosEvent::Received(packet)).unwrap();
                for d in step.deliver {
                    *per_message.entry(d.payload).or_default() += 1;
                }
                for reply in step.send {
                    if rng.gen_bool(loss) {
                        continue;
                    }
                    let back = sender.step(QosEvent::Received(reply)).unwrap();
                    wire.extend(back.send);
                }
            }
            let Some(id) = sender.pending_outbound().next() else {
                break;
            };
            let step = sender.step(QosEvent::AckTimeout(id)).unwrap();
            if step.teardown {
                stats.sessions_torn_down += 1;
                sender = QosSession::new(policy);
                break;
            }
            stats.retransmissions += step.send.len() as u64;
            wire.extend(step.send);
        }
    }
    for count in per_message.values() {
        stats.delivered += 1;
        stats.duplicates += count - 1;
    }
    stats
}
