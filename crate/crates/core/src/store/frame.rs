//! Node wire protocol shared by clients, peers, standbys and the admin tool.
//!
//! Every frame is `u32 len | u8 opcode | body`, big-endian, where `len`
//! counts the opcode and body. Byte-string fields are `u32`-length-prefixed.

use alloc::string::String;
use alloc::vec::Vec;
use bytes::Bytes;

use super::log::{decode_record, encode_record, LogRecord};
use crate::slot::{NodeId, SlotRange};

pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Set = 0x01,
    Get = 0x02,
    Del = 0x03,
    Moved = 0x04,
    Subscribe = 0x05,
    Publish = 0x06,
    Forward = 0x07,
    LogShip = 0x08,
    Ping = 0x09,
    Pong = 0x0A,
    Unsubscribe = 0x0B,
    Hello = 0x0C,
    Failover = 0x0D,
    Slots = 0x0E,
    Stats = 0x0F,
    Ok = 0x10,
    Value = 0x11,
    Error = 0x12,
    Message = 0x13,
    Count = 0x14,
    LogAck = 0x15,
    SlotTable = 0x16,
    Info = 0x17,
    Unavailable = 0x18,
}

impl Opcode {
    fn from_u8(b: u8) -> Option<Opcode> {
        use Opcode::*;
        Some(match b {
            0x01 => Set,
            0x02 => Get,
            0x03 => Del,
            0x04 => Moved,
            0x05 => Subscribe,
            0x06 => Publish,
            0x07 => Forward,
            0x08 => LogShip,
            0x09 => Ping,
            0x0A => Pong,
            0x0B => Unsubscribe,
            0x0C => Hello,
            0x0D => Failover,
            0x0E => Slots,
            0x0F => Stats,
            0x10 => Ok,
            0x11 => Value,
            0x12 => Error,
            0x13 => Message,
            0x14 => Count,
            0x15 => LogAck,
            0x16 => SlotTable,
            0x17 => Info,
            0x18 => Unavailable,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Set { key: Bytes, value: Bytes },
    Get { key: Bytes },
    Del { key: Bytes },
    Moved { slot: u16, owner: NodeId },
    Subscribe { channel: Bytes },
    Unsubscribe { channel: Bytes },
    /// Client publish; the receiving node fans out and forwards to peers.
    Publish { channel: Bytes, payload: Bytes },
    /// Peer-to-peer copy of a publish; delivered locally only.
    Forward { origin: NodeId, channel: Bytes, payload: Bytes },
    LogShip(LogRecord),
    LogAck { sequence: u64 },
    Ping,
    Pong,
    /// First frame on a peer link, naming the dialing node.
    Hello { node: NodeId },
    Failover { failed: NodeId },
    Slots,
    Stats,
    Ok,
    Value(Option<Bytes>),
    Error(String),
    /// Pushed to a subscribed connection.
    Message { channel: Bytes, payload: Bytes },
    Count(u32),
    SlotTable(Vec<(SlotRange, NodeId)>),
    Info(String),
    Unavailable { slot: u16 },
}

impl Frame {
    pub fn opcode(&self) -> Opcode {
        match self {
            Frame::Set { .. } => Opcode::Set,
            Frame::Get { .. } => Opcode::Get,
            Frame::Del { .. } => Opcode::Del,
            Frame::Moved { .. } => Opcode::Moved,
            Frame::Subscribe { .. } => Opcode::Subscribe,
            Frame::Unsubscribe { .. } => Opcode::Unsubscribe,
            Frame::Publish { .. } => Opcode::Publish,
            Frame::Forward { .. } => Opcode::Forward,
            Frame::LogShip(_) => Opcode::LogShip,
            Frame::LogAck { .. } => Opcode::LogAck,
            Frame::Ping => Opcode::Ping,
            Frame::Pong => Opcode::Pong,
            Frame::Hello { .. } => Opcode::Hello,
            Frame::Failover { .. } => Opcode::Failover,
            Frame::Slots => Opcode::Slots,
            Frame::Stats => Opcode::Stats,
            Frame::Ok => Opcode::Ok,
            Frame::Value(_) => Opcode::Value,
            Frame::Error(_) => Opcode::Error,
            Frame::Message { .. } => Opcode::Message,
            Frame::Count(_) => Opcode::Count,
            Frame::SlotTable(_) => Opcode::SlotTable,
            Frame::Info(_) => Opcode::Info,
            Frame::Unavailable { .. } => Opcode::Unavailable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("unknown opcode {0:#04x}")]
    UnknownOpcode(u8),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("malformed {0:?} frame")]
    Malformed(Opcode),
    #[error("empty frame")]
    Empty,
}

pub fn encode_frame(frame: &Frame, out: &mut Vec<u8>) {
    let start = out.len();
    out.extend_from_slice(&[0; 4]);
    out.push(frame.opcode() as u8);
    match frame {
        Frame::Set { key, value } => {
            put(out, key);
            put(out, value);
        }
        Frame::Get { key } | Frame::Del { key } => put(out, key),
        Frame::Moved { slot, owner } => {
            out.extend_from_slice(&slot.to_be_bytes());
            out.extend_from_slice(&owner.0.to_be_bytes());
        }
        Frame::Subscribe { channel } | Frame::Unsubscribe { channel } => put(out, channel),
        Frame::Publish { channel, payload } | Frame::Message { channel, payload } => {
            put(out, channel);
            put(out, payload);
        }
        Frame::Forward { origin, channel, payload } => {
            out.extend_from_slice(&origin.0.to_be_bytes());
            put(out, channel);
            put(out, payload);
        }
        Frame::LogShip(record) => encode_record(record, out),
        Frame::LogAck { sequence } => out.extend_from_slice(&sequence.to_be_bytes()),
        Frame::Hello { node } | Frame::Failover { failed: node } => {
            out.extend_from_slice(&node.0.to_be_bytes())
        }
        Frame::Ping | Frame::Pong | Frame::Slots | Frame::Stats | Frame::Ok => {}
        Frame::Value(value) => match value {
            Some(v) => {
                out.push(1);
                put(out, v);
            }
            None => out.push(0),
        },
        Frame::Error(msg) | Frame::Info(msg) => put(out, msg.as_bytes()),
        Frame::Count(n) => out.extend_from_slice(&n.to_be_bytes()),
        Frame::SlotTable(intervals) => {
            out.extend_from_slice(&(intervals.len() as u16).to_be_bytes());
            for (range, node) in intervals {
                out.extend_from_slice(&range.lo.to_be_bytes());
                out.extend_from_slice(&range.hi.to_be_bytes());
                out.extend_from_slice(&node.0.to_be_bytes());
            }
        }
        Frame::Unavailable { slot } => out.extend_from_slice(&slot.to_be_bytes()),
    }
    let len = (out.len() - start - 4) as u32;
    out[start..start + 4].copy_from_slice(&len.to_be_bytes());
}

fn put(out: &mut Vec<u8>, data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    out.extend_from_slice(data);
}

/// Decodes one frame from the front of `buf`; `Ok(None)` if incomplete.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(Frame, usize)>, FrameError> {
    let Some(len_bytes) = buf.get(..4) else {
        return Ok(None);
    };
    let len = u32::from_be_bytes(len_bytes.try_into().unwrap()) as usize;
    if len == 0 {
        return Err(FrameError::Empty);
    }
    if len > MAX_FRAME_LEN {
        return Err(FrameError::TooLarge(len));
    }
    let Some(body) = buf.get(4..4 + len) else {
        return Ok(None);
    };
    let op = Opcode::from_u8(body[0]).ok_or(FrameError::UnknownOpcode(body[0]))?;
    let frame = parse_body(op, &body[1..]).ok_or(FrameError::Malformed(op))?;
    Ok(Some((frame, 4 + len)))
}

fn parse_body(op: Opcode, body: &[u8]) -> Option<Frame> {
    let mut r = Cursor { buf: body };
    let frame = match op {
        Opcode::Set => Frame::Set { key: r.bytes()?, value: r.bytes()? },
        Opcode::Get => Frame::Get { key: r.bytes()? },
        Opcode::Del => Frame::Del { key: r.bytes()? },
        Opcode::Moved => Frame::Moved { slot: r.u16()?, owner: NodeId(r.u16()?) },
        Opcode::Subscribe => Frame::Subscribe { channel: r.bytes()? },
        Opcode::Unsubscribe => Frame::Unsubscribe { channel: r.bytes()? },
        Opcode::Publish => Frame::Publish { channel: r.bytes()?, payload: r.bytes()? },
        Opcode::Message => Frame::Message { channel: r.bytes()?, payload: r.bytes()? },
        Opcode::Forward => Frame::Forward {
            origin: NodeId(r.u16()?),
            channel: r.bytes()?,
            payload: r.bytes()?,
        },
        Opcode::LogShip => {
            let (record, used) = decode_record(r.buf).ok()??;
            r.buf = &r.buf[used..];
            Frame::LogShip(record)
        }
        Opcode::LogAck => {
            let raw = r.take(8)?;
            Frame::LogAck { sequence: u64::from_be_bytes(raw.try_into().ok()?) }
        }
        Opcode::Ping => Frame::Ping,
        Opcode::Pong => Frame::Pong,
        Opcode::Hello => Frame::Hello { node: NodeId(r.u16()?) },
        Opcode::Failover => Frame::Failover { failed: NodeId(r.u16()?) },
        Opcode::Slots => Frame::Slots,
        Opcode::Stats => Frame::Stats,
        Opcode::Ok => Frame::Ok,
        Opcode::Value => match r.take(1)?[0] {
            0 => Frame::Value(None),
            1 => Frame::Value(Some(r.bytes()?)),
            _ => return None,
        },
        Opcode::Error => Frame::Error(r.string()?),
        Opcode::Info => Frame::Info(r.string()?),
        Opcode::Count => {
            let raw = r.take(4)?;
            Frame::Count(u32::from_be_bytes(raw.try_into().ok()?))
        }
        Opcode::SlotTable => {
            let n = r.u16()?;
            let mut intervals = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let range = SlotRange::new(r.u16()?, r.u16()?).ok()?;
                intervals.push((range, NodeId(r.u16()?)));
            }
            Frame::SlotTable(intervals)
        }
        Opcode::Unavailable => Frame::Unavailable { slot: r.u16()? },
    };
    r.buf.is_empty().then_some(frame)
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let (head, tail) = (self.buf.get(..n)?, self.buf.get(n..)?);
        self.buf = tail;
        Some(head)
    }

    fn u16(&mut self) -> Option<u16> {
        let raw = self.take(2)?;
        Some(u16::from_be_bytes([raw[0], raw[1]]))
    }

    fn bytes(&mut self) -> Option<Bytes> {
        let raw = self.take(4)?;
        let len = u32::from_be_bytes(raw.try_into().ok()?) as usize;
        self.take(len).map(Bytes::copy_from_slice)
    }

    fn string(&mut self) -> Option<String> {
        let raw = self.bytes()?;
        core::str::from_utf8(&raw).ok().map(String::from)
    }
}
