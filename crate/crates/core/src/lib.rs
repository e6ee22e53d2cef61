//! Sans-IO core of the iotcloud stack.
//!
//! Everything in this crate is a pure function or an explicit state machine
//! driven by its caller: the MQTT 3.1.1-subset codec and per-session QoS
//! handshakes, CRC16 hash-slot routing and the slot map, the store's wire
//! frames and transaction log, the balancer selection policies, a small
//! HTTP/1.1 parser with the resource-service semantics, and a latency
//! histogram. Sockets, timers, files and processes live in the `iotcloud`
//! crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod balance;
pub mod http;
pub mod metrics;
pub mod mqtt;
pub mod slot;
pub mod store;

pub use slot::{hash_slot, NodeId, SlotMap, SlotRange, SLOT_COUNT};
