//! CRC16 hash slots and the slot-to-node map.

use alloc::vec::Vec;
use core::fmt;

/// Number of hash slots the key space is divided into.
pub const SLOT_COUNT: u16 = 16384;

const CRC16_POLY: u16 = 0x1021;

const CRC16_TABLE: [u16; 256] = build_crc16_table();

const fn build_crc16_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ CRC16_POLY } else { crc << 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

/// CRC-16/XMODEM: poly 0x1021, init 0, no reflection, no final xor.
pub const fn crc16(data: &[u8]) -> u16 {
    let mut crc: u16 = 0;
    let mut i = 0;
    while i < data.len() {
        let idx = ((crc >> 8) as u8 ^ data[i]) as usize;
        crc = (crc << 8) ^ CRC16_TABLE[idx];
        i += 1;
    }
    crc
}

/// Slot of `key`: CRC16 modulo 16384.
pub fn hash_slot(key: &[u8]) -> u16 {
    crc16(key) % SLOT_COUNT
}

/// Identifier of a store node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u16);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Inclusive interval of slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotRange {
    pub lo: u16,
    pub hi: u16,
}

impl SlotRange {
    pub fn new(lo: u16, hi: u16) -> Result<SlotRange, SlotMapError> {
        if lo > hi || hi >= SLOT_COUNT {
            return Err(SlotMapError::BadRange { lo, hi });
        }
        Ok(SlotRange { lo, hi })
    }

    pub fn contains(&self, slot: u16) -> bool {
        (self.lo..=self.hi).contains(&slot)
    }

    pub fn slot_count(&self) -> u32 {
        u32::from(self.hi - self.lo) + 1
    }
}

impl fmt::Display for SlotRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SlotMapError {
    #[error("slot range {lo}-{hi} is empty or exceeds 16383")]
    BadRange { lo: u16, hi: u16 },
    #[error("slot {0} is not covered")]
    Gap(u16),
    #[error("slot {0} is assigned twice")]
    Overlap(u16),
    #[error("node {0} owns more than one interval")]
    NotContiguous(NodeId),
    #[error("at least one node is required")]
    NoNodes,
}

/// Assignment of every slot to exactly one owning node, stored as sorted
/// intervals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotMap {
    intervals: Vec<(SlotRange, NodeId)>,
}

impl SlotMap {
    /// Validates that `intervals` partition `0..=16383` and that each node
    /// owns a single contiguous interval.
    pub fn new(mut intervals: Vec<(SlotRange, NodeId)>) -> Result<SlotMap, SlotMapError> {
        intervals.sort_by_key(|(r, _)| r.lo);
        let mut expected = 0u32;
        for (range, _) in &intervals {
            let lo = u32::from(range.lo);
            if lo > expected {
                return Err(SlotMapError::Gap(expected as u16));
            }
            if lo < expected {
                return Err(SlotMapError::Overlap(range.lo));
            }
            expected = u32::from(range.hi) + 1;
        }
        if expected != u32::from(SLOT_COUNT) {
            return Err(SlotMapError::Gap(expected as u16));
        }
        let map = SlotMap { intervals };
        map.check_contiguous()?;
        Ok(map)
    }

    /// Equal contiguous intervals in the given node order; the first
    /// `16384 % n` nodes receive one extra slot.
    pub fn equal_intervals(nodes: &[NodeId]) -> Result<SlotMap, SlotMapError> {
        if nodes.is_empty() {
            return Err(SlotMapError::NoNodes);
        }
        let n = nodes.len() as u32;
        let base = u32::from(SLOT_COUNT) / n;
        let extra = u32::from(SLOT_COUNT) % n;
        let mut lo = 0u32;
        let mut intervals = Vec::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            let size = base + u32::from((i as u32) < extra);
            if size == 0 {
                return Err(SlotMapError::BadRange { lo: lo as u16, hi: lo as u16 });
            }
            let hi = lo + size - 1;
            intervals.push((SlotRange { lo: lo as u16, hi: hi as u16 }, *node));
            lo = hi + 1;
        }
        SlotMap::new(intervals)
    }

    pub fn single(node: NodeId) -> SlotMap {
        SlotMap { intervals: alloc::vec![(SlotRange { lo: 0, hi: SLOT_COUNT - 1 }, node)] }
    }

    pub fn owner(&self, slot: u16) -> NodeId {
        let idx = self.intervals.partition_point(|(r, _)| r.hi < slot);
        self.intervals[idx.min(self.intervals.len() - 1)].1
    }

    /// Owner of the slot that `key` hashes to.
    pub fn route(&self, key: &[u8]) -> NodeId {
        self.owner(hash_slot(key))
    }

    pub fn intervals(&self) -> &[(SlotRange, NodeId)] {
        &self.intervals
    }

    pub fn range_of(&self, node: NodeId) -> Option<SlotRange> {
        self.intervals.iter().find(|(_, n)| *n == node).map(|(r, _)| *r)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.intervals.iter().map(|(_, n)| *n)
    }

    /// Hands every interval owned by `from` to `to`. Returns the number of
    /// slots moved. `to` must not already own slots.
    pub fn reassign(&mut self, from: NodeId, to: NodeId) -> Result<u32, SlotMapError> {
        if from == to {
            return Ok(0);
        }
        if self.range_of(to).is_some() && self.range_of(from).is_some() {
            return Err(SlotMapError::NotContiguous(to));
        }
        let mut moved = 0;
        for (range, owner) in &mut self.intervals {
            if *owner == from {
                *owner = to;
                moved += range.slot_count();
            }
        }
        Ok(moved)
    }

    fn check_contiguous(&self) -> Result<(), SlotMapError> {
        for (i, (_, node)) in self.intervals.iter().enumerate() {
            if self.intervals[i + 1..].iter().any(|(_, other)| other == node) {
                return Err(SlotMapError::NotContiguous(*node));
            }
        }
        Ok(())
    }
}
