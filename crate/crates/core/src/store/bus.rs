//! Channel subscriptions for the cluster-wide message bus.
//!
//! A publish received from a client is delivered to the receiving node's
//! local subscribers and forwarded once to every peer. A publish received
//! from a peer is delivered locally and never forwarded again.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use bytes::Bytes;

use crate::slot::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Client,
    Peer(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fanout<C> {
    pub local: Vec<C>,
    pub forward_to_peers: bool,
}

/// Channel → subscribed connections on one node. A (channel, connection)
/// pair is registered at most once.
#[derive(Debug, Clone)]
pub struct ChannelRegistry<C> {
    channels: BTreeMap<Bytes, BTreeSet<C>>,
    by_connection: BTreeMap<C, BTreeSet<Bytes>>,
}

impl<C> Default for ChannelRegistry<C> {
    fn default() -> Self {
        ChannelRegistry { channels: BTreeMap::new(), by_connection: BTreeMap::new() }
    }
}

impl<C: Ord + Copy> ChannelRegistry<C> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false if the pair was already registered.
    pub fn subscribe(&mut self, channel: Bytes, conn: C) -> bool {
        let added = self.channels.entry(channel.clone()).or_default().insert(conn);
        if added {
            self.by_connection.entry(conn).or_default().insert(channel);
        }
        added
    }

    pub fn unsubscribe(&mut self, channel: &[u8], conn: C) -> bool {
        let Some(subs) = self.channels.get_mut(channel) else {
            return false;
        };
        let removed = subs.remove(&conn);
        if subs.is_empty() {
            self.channels.remove(channel);
        }
        if let Some(chans) = self.by_connection.get_mut(&conn) {
            chans.remove(channel);
            if chans.is_empty() {
                self.by_connection.remove(&conn);
            }
        }
        removed
    }

    /// Forgets every subscription of a closed connection.
    pub fn drop_connection(&mut self, conn: C) -> usize {
        let Some(chans) = self.by_connection.remove(&conn) else {
            return 0;
        };
        for channel in &chans {
            if let Some(subs) = self.channels.get_mut(channel) {
                subs.remove(&conn);
                if subs.is_empty() {
                    self.channels.remove(channel);
                }
            }
        }
        chans.len()
    }

    pub fn subscribers(&self, channel: &[u8]) -> impl Iterator<Item = C> + '_ {
        self.channels.get(channel).into_iter().flatten().copied()
    }

    pub fn subscription_count(&self) -> usize {
        self.by_connection.values().map(BTreeSet::len).sum()
    }

    pub fn fanout(&self, channel: &[u8], origin: Origin) -> Fanout<C> {
        Fanout {
            local: self.subscribers(channel).collect(),
            forward_to_peers: origin == Origin::Client,
        }
    }
}
