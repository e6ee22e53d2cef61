use alloc::collections::{BTreeMap, BTreeSet};
use bytes::Bytes;

use super::log::{Command, LogRecord};
use crate::slot::{hash_slot, NodeId, SlotMap};

/// In-memory key-value table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Table {
    entries: BTreeMap<Bytes, Bytes>,
}

impl Table {
    pub fn get(&self, key: &[u8]) -> Option<&Bytes> {
        self.entries.get(key)
    }

    /// Applies a mutation, returning the previous value.
    pub fn apply(&mut self, command: &Command) -> Option<Bytes> {
        match command {
            Command::Set { key, value } => self.entries.insert(key.clone(), value.clone()),
            Command::Del { key } => self.entries.remove(&key[..]),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Bytes, &Bytes)> {
        self.entries.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Set { key: Bytes, value: Bytes },
    Get { key: Bytes },
    Del { key: Bytes },
}

impl Request {
    pub fn key(&self) -> &Bytes {
        match self {
            Request::Set { key, .. } | Request::Get { key } | Request::Del { key } => key,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    /// Executed here. Carries the value for GET, the removed value for DEL
    /// and nothing for SET.
    Ok(Option<Bytes>),
    /// The slot belongs to another node.
    Moved { slot: u16, owner: NodeId },
    /// The slot's owner is down and has no standby.
    Unavailable { slot: u16 },
}

/// One node's view of the cluster plus the data it owns.
///
/// Every mutation executed here yields the [`LogRecord`] that must be made
/// durable (and shipped to the standby) before the reply is released.
#[derive(Debug, Clone)]
pub struct Shard {
    id: NodeId,
    map: SlotMap,
    down: BTreeSet<NodeId>,
    table: Table,
    last_sequence: u64,
}

impl Shard {
    pub fn new(id: NodeId, map: SlotMap) -> Self {
        Shard { id, map, down: BTreeSet::new(), table: Table::default(), last_sequence: 0 }
    }

    /// Starts from a table recovered from the log.
    pub fn with_state(id: NodeId, map: SlotMap, table: Table, last_sequence: u64) -> Self {
        Shard { id, map, down: BTreeSet::new(), table, last_sequence }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn map(&self) -> &SlotMap {
        &self.map
    }

    pub fn table(&self) -> &Table {
        &self.table
    }

    pub fn last_sequence(&self) -> u64 {
        self.last_sequence
    }

    pub fn is_down(&self, node: NodeId) -> bool {
        self.down.contains(&node)
    }

    pub fn owns(&self, slot: u16) -> bool {
        self.map.owner(slot) == self.id
    }

    pub fn execute(&mut self, request: Request, now_ms: u64) -> (Reply, Option<LogRecord>) {
        let slot = hash_slot(request.key());
        let owner = self.map.owner(slot);
        if owner != self.id {
            if self.down.contains(&owner) {
                return (Reply::Unavailable { slot }, None);
            }
            return (Reply::Moved { slot, owner }, None);
        }
        let command = match request {
            Request::Get { key } => return (Reply::Ok(self.table.get(&key).cloned()), None),
            Request::Set { key, value } => Command::Set { key, value },
            Request::Del { key } => Command::Del { key },
        };
        let previous = self.table.apply(&command);
        self.last_sequence += 1;
        let record = LogRecord { sequence: self.last_sequence, command, timestamp_ms: now_ms };
        let reply = match record.command {
            Command::Set { .. } => Reply::Ok(None),
            Command::Del { .. } => Reply::Ok(previous),
        };
        (reply, Some(record))
    }

    /// Marks `failed` down and hands its slots to `standby` if there is one.
    /// Returns the number of slots moved.
    pub fn fail_over(&mut self, failed: NodeId, standby: Option<NodeId>) -> u32 {
        self.down.insert(failed);
        match standby {
            Some(standby) if !self.down.contains(&standby) => {
                self.map.reassign(failed, standby).unwrap_or(0)
            }
            _ => 0,
        }
    }

    /// Replaces the table with a replica's state at promotion time.
    pub fn adopt(&mut self, table: Table, last_sequence: u64) {
        self.table = table;
        self.last_sequence = last_sequence;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(s: &'static str) -> Bytes {
        Bytes::from_static(s.as_bytes())
    }

    fn key_for(map: &SlotMap, node: NodeId) -> Bytes {
        (0..)
            .map(|i| Bytes::from(alloc::format!("key-{i}")))
            .find(|k| map.route(k) == node)
            .unwrap()
    }

    #[test]
    fn owner_executes_and_logs_mutations() {
        let mut shard = Shard::new(NodeId(1), SlotMap::single(NodeId(1)));
        let (reply, rec) = shard.execute(Request::Set { key: b("k"), value: b("v") }, 5);
        assert_eq!(reply, Reply::Ok(None));
        let rec = rec.unwrap();
        assert_eq!((rec.sequence, rec.timestamp_ms), (1, 5));
        let (reply, rec) = shard.execute(Request::Get { key: b("k") }, 6);
        assert_eq!(reply, Reply::Ok(Some(b("v"))));
        assert!(rec.is_none());
        let (reply, _) = shard.execute(Request::Get { key: b("absent") }, 6);
        assert_eq!(reply, Reply::Ok(None));
        let (reply, rec) = shard.execute(Request::Del { key: b("k") }, 7);
        assert_eq!(reply, Reply::Ok(Some(b("v"))));
        assert_eq!(rec.unwrap().sequence, 2);
    }

    #[test]
    fn non_owner_redirects() {
        let map = SlotMap::equal_intervals(&[NodeId(1), NodeId(2)]).unwrap();
        let mut shard = Shard::new(NodeId(1), map.clone());
        let key = key_for(&map, NodeId(2));
        let slot = hash_slot(&key);
        let (reply, rec) = shard.execute(Request::Get { key }, 0);
        assert_eq!(reply, Reply::Moved { slot, owner: NodeId(2) });
        assert!(rec.is_none());
    }

    #[test]
    fn failover_without_standby_makes_slots_unavailable() {
        let map = SlotMap::equal_intervals(&[NodeId(1), NodeId(2)]).unwrap();
        let mut shard = Shard::new(NodeId(1), map.clone());
        assert_eq!(shard.fail_over(NodeId(2), None), 0);
        let key = key_for(&map, NodeId(2));
        let slot = hash_slot(&key);
        assert_eq!(shard.execute(Request::Get { key }, 0).0, Reply::Unavailable { slot });
        let mine = key_for(&map, NodeId(1));
        assert_eq!(shard.execute(Request::Get { key: mine }, 0).0, Reply::Ok(None));
    }

    #[test]
    fn failover_with_standby_redirects_to_it() {
        let map = SlotMap::equal_intervals(&[NodeId(1), NodeId(2)]).unwrap();
        let mut shard = Shard::new(NodeId(1), map.clone());
        assert_eq!(shard.fail_over(NodeId(2), Some(NodeId(12))), 8192);
        let key = key_for(&map, NodeId(2));
        let slot = hash_slot(&key);
        assert_eq!(shard.execute(Request::Get { key }, 0).0, Reply::Moved { slot, owner: NodeId(12) });
    }
}
