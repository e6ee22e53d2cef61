//! Bit-exact MQTT 3.1.1 framing for the supported packet kinds.
//!
//! Fixed header: packet type in the high nibble, flags in the low nibble,
//! then the remaining length as a base-128 varint (1..=4 bytes). Strings and
//! packet ids are big-endian and 16-bit length-prefixed.

use alloc::string::String;
use alloc::vec::Vec;
use bytes::Bytes;

use super::packet::{
    ConnAck, Connect, ConnectReturn, Packet, PacketId, PacketKind, Publish, QoS, SubAck,
    Subscribe, SubscribeReturn, TopicError, TopicName, Unsubscribe, MAX_PAYLOAD,
};

/// Largest value a four-byte remaining-length varint can carry.
pub const MAX_REMAINING_LENGTH: u32 = 268_435_455;

/// Largest frame body this codec will buffer: a maximal topic plus packet
/// id plus a maximal payload.
pub const MAX_PACKET_BODY: usize = MAX_PAYLOAD + 2 + u16::MAX as usize + 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("remaining length {0} exceeds {MAX_REMAINING_LENGTH}")]
    RemainingLengthOutOfRange(u64),
    #[error("publish qos and packet id disagree")]
    PacketIdMismatch,
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD} byte limit")]
    PayloadTooLarge(usize),
    #[error("subscribe/unsubscribe carries no topics")]
    EmptyTopicList,
    #[error("string field longer than 65535 bytes")]
    StringTooLong,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("remaining length varint longer than four bytes")]
    MalformedRemainingLength,
    #[error("reserved packet type {0}")]
    ReservedPacketType(u8),
    #[error("invalid fixed-header flags {flags:#06b} for {kind:?}")]
    InvalidFlags { kind: PacketKind, flags: u8 },
    #[error("qos value 3 is forbidden")]
    InvalidQos,
    #[error("retained messages are not supported")]
    RetainNotSupported,
    #[error("packet id 0 is not allowed")]
    ZeroPacketId,
    #[error("frame body ends before its declared fields")]
    Truncated,
    #[error("frame body has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("string field is not valid UTF-8")]
    InvalidUtf8,
    #[error("invalid topic: {0}")]
    InvalidTopic(#[from] TopicError),
    #[error("frame body of {0} bytes exceeds the {MAX_PACKET_BODY} byte limit")]
    PacketTooLarge(usize),
    #[error("publish payload exceeds the {MAX_PAYLOAD} byte limit")]
    PayloadTooLarge,
    #[error("subscribe/unsubscribe carries no topics")]
    EmptyTopicList,
    #[error("unknown protocol name")]
    UnknownProtocol,
    #[error("connect flags use the reserved bit or an inconsistent combination")]
    InvalidConnectFlags,
    #[error("will messages are not supported")]
    WillNotSupported,
    #[error("username/password authentication is not supported")]
    CredentialsNotSupported,
    #[error("invalid return code {0}")]
    InvalidReturnCode(u8),
}

/// Encoded remaining-length varint, 1..=4 bytes, stored inline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RemainingLength {
    buf: [u8; 4],
    len: u8,
}

impl RemainingLength {
    pub fn as_bytes(&self) -> &[u8] {
        &self.buf[..self.len as usize]
    }
}

pub fn encode_remaining_length(n: u32) -> Result<RemainingLength, EncodeError> {
    if n > MAX_REMAINING_LENGTH {
        return Err(EncodeError::RemainingLengthOutOfRange(n as u64));
    }
    let mut out = RemainingLength { buf: [0; 4], len: 0 };
    let mut rest = n;
    loop {
        let mut byte = (rest % 128) as u8;
        rest /= 128;
        if rest > 0 {
            byte |= 0x80;
        }
        out.buf[out.len as usize] = byte;
        out.len += 1;
        if rest == 0 {
            return Ok(out);
        }
    }
}

/// Decodes a remaining-length varint from the front of `buf`.
///
/// Returns `Ok(None)` when `buf` ends before the final byte.
pub fn decode_remaining_length(buf: &[u8]) -> Result<Option<(u32, usize)>, DecodeError> {
    let mut value: u32 = 0;
    for (i, &byte) in buf.iter().enumerate() {
        if i == 4 {
            return Err(DecodeError::MalformedRemainingLength);
        }
        value |= u32::from(byte & 0x7F) << (7 * i);
        if byte & 0x80 == 0 {
            return Ok(Some((value, i + 1)));
        }
    }
    if buf.len() >= 4 {
        return Err(DecodeError::MalformedRemainingLength);
    }
    Ok(None)
}

pub fn encode_packet(packet: &Packet) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::new();
    encode_packet_into(packet, &mut out)?;
    Ok(out)
}

/// Appends the encoding of `packet` to `out`. On error `out` is unchanged.
pub fn encode_packet_into(packet: &Packet, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    let mut body = Vec::new();
    let flags = match packet {
        Packet::Connect(c) => {
            let name: &str = if c.protocol_level == 3 { "MQIsdp" } else { "MQTT" };
            put_str(&mut body, name)?;
            body.push(c.protocol_level);
            body.push(if c.clean_session { 0b0000_0010 } else { 0 });
            body.extend_from_slice(&c.keep_alive.to_be_bytes());
            put_str(&mut body, &c.client_id)?;
            0
        }
        Packet::ConnAck(a) => {
            body.push(u8::from(a.session_present));
            body.push(a.code as u8);
            0
        }
        Packet::Publish(p) => {
            match (p.qos, p.packet_id) {
                (QoS::AtMostOnce, None) => {}
                (QoS::AtLeastOnce | QoS::ExactlyOnce, Some(_)) => {}
                _ => return Err(EncodeError::PacketIdMismatch),
            }
            if p.payload.len() > MAX_PAYLOAD {
                return Err(EncodeError::PayloadTooLarge(p.payload.len()));
            }
            put_str(&mut body, p.topic.as_str())?;
            if let Some(id) = p.packet_id {
                body.extend_from_slice(&id.get().to_be_bytes());
            }
            body.extend_from_slice(&p.payload);
            (u8::from(p.dup) << 3) | (p.qos.as_u8() << 1)
        }
        Packet::PubAck(id)
        | Packet::PubRec(id)
        | Packet::PubRel(id)
        | Packet::PubComp(id)
        | Packet::UnsubAck(id) => {
            body.extend_from_slice(&id.get().to_be_bytes());
            packet.kind().required_flags()
        }
        Packet::Subscribe(s) => {
            if s.topics.is_empty() {
                return Err(EncodeError::EmptyTopicList);
            }
            body.extend_from_slice(&s.packet_id.get().to_be_bytes());
            for (topic, qos) in &s.topics {
                put_str(&mut body, topic.as_str())?;
                body.push(qos.as_u8());
            }
            PacketKind::Subscribe.required_flags()
        }
        Packet::SubAck(s) => {
            body.extend_from_slice(&s.packet_id.get().to_be_bytes());
            for code in &s.codes {
                body.push(match code {
                    SubscribeReturn::Granted(q) => q.as_u8(),
                    SubscribeReturn::Failure => 0x80,
                });
            }
            0
        }
        Packet::Unsubscribe(u) => {
            if u.topics.is_empty() {
                return Err(EncodeError::EmptyTopicList);
            }
            body.extend_from_slice(&u.packet_id.get().to_be_bytes());
            for topic in &u.topics {
                put_str(&mut body, topic.as_str())?;
            }
            PacketKind::Unsubscribe.required_flags()
        }
        Packet::PingReq | Packet::PingResp | Packet::Disconnect => 0,
    };
    let len = u32::try_from(body.len())
        .map_err(|_| EncodeError::RemainingLengthOutOfRange(body.len() as u64))?;
    let varint = encode_remaining_length(len)?;
    out.reserve(1 + varint.as_bytes().len() + body.len());
    out.push(((packet.kind() as u8) << 4) | flags);
    out.extend_from_slice(varint.as_bytes());
    out.extend_from_slice(&body);
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), EncodeError> {
    let len = u16::try_from(s.len()).map_err(|_| EncodeError::StringTooLong)?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Decodes one frame from the front of `buf`.
///
/// `Ok(None)` means `buf` does not yet hold a complete frame; nothing is
/// consumed. Any `Err` is a protocol violation and the connection must be
/// closed.
pub fn decode_packet(buf: &[u8]) -> Result<Option<(Packet, usize)>, DecodeError> {
    let Some(&first) = buf.first() else {
        return Ok(None);
    };
    let type_nibble = first >> 4;
    let flags = first & 0x0F;
    let kind =
        PacketKind::from_type_nibble(type_nibble).ok_or(DecodeError::ReservedPacketType(type_nibble))?;
    if kind != PacketKind::Publish && flags != kind.required_flags() {
        return Err(DecodeError::InvalidFlags { kind, flags });
    }
    if kind == PacketKind::Publish {
        if (flags >> 1) & 0b11 == 3 {
            return Err(DecodeError::InvalidQos);
        }
        if flags & 1 != 0 {
            return Err(DecodeError::RetainNotSupported);
        }
    }
    let Some((len, varint_len)) = decode_remaining_length(&buf[1..])? else {
        return Ok(None);
    };
    let len = len as usize;
    if len > MAX_PACKET_BODY {
        return Err(DecodeError::PacketTooLarge(len));
    }
    let header_len = 1 + varint_len;
    let Some(body) = buf.get(header_len..header_len + len) else {
        return Ok(None);
    };
    let packet = decode_body(kind, flags, body)?;
    Ok(Some((packet, header_len + len)))
}

fn decode_body(kind: PacketKind, flags: u8, body: &[u8]) -> Result<Packet, DecodeError> {
    let mut r = Reader { buf: body, pos: 0 };
    let packet = match kind {
        PacketKind::Connect => {
            let name = r.string()?;
            let protocol_level = r.u8()?;
            match (name.as_str(), protocol_level) {
                ("MQTT", _) | ("MQIsdp", 3) => {}
                _ => return Err(DecodeError::UnknownProtocol),
            }
            let connect_flags = r.u8()?;
            if connect_flags & 0x01 != 0 {
                return Err(DecodeError::InvalidConnectFlags);
            }
            if connect_flags & 0b0000_0100 != 0 {
                return Err(DecodeError::WillNotSupported);
            }
            if connect_flags & 0b0011_1000 != 0 {
                return Err(DecodeError::InvalidConnectFlags);
            }
            if connect_flags & 0b1100_0000 != 0 {
                return Err(DecodeError::CredentialsNotSupported);
            }
            let keep_alive = r.u16()?;
            let client_id = r.string()?;
            Packet::Connect(Connect {
                protocol_level,
                clean_session: connect_flags & 0b0000_0010 != 0,
                keep_alive,
                client_id,
            })
        }
        PacketKind::ConnAck => {
            let ack_flags = r.u8()?;
            if ack_flags & !1 != 0 {
                return Err(DecodeError::InvalidFlags { kind, flags: ack_flags });
            }
            let code = r.u8()?;
            Packet::ConnAck(ConnAck {
                session_present: ack_flags & 1 != 0,
                code: ConnectReturn::from_u8(code).ok_or(DecodeError::InvalidReturnCode(code))?,
            })
        }
        PacketKind::Publish => {
            let qos = QoS::from_u8((flags >> 1) & 0b11).ok_or(DecodeError::InvalidQos)?;
            let topic = TopicName::new(r.string()?)?;
            let packet_id = match qos {
                QoS::AtMostOnce => None,
                _ => Some(r.packet_id()?),
            };
            let payload = r.rest();
            if payload.len() > MAX_PAYLOAD {
                return Err(DecodeError::PayloadTooLarge);
            }
            Packet::Publish(Publish {
                dup: flags & 0b1000 != 0,
                qos,
                packet_id,
                topic,
                payload: Bytes::copy_from_slice(payload),
            })
        }
        PacketKind::PubAck => Packet::PubAck(r.packet_id()?),
        PacketKind::PubRec => Packet::PubRec(r.packet_id()?),
        PacketKind::PubRel => Packet::PubRel(r.packet_id()?),
        PacketKind::PubComp => Packet::PubComp(r.packet_id()?),
        PacketKind::UnsubAck => Packet::UnsubAck(r.packet_id()?),
        PacketKind::Subscribe => {
            let packet_id = r.packet_id()?;
            let mut topics = Vec::new();
            while !r.is_empty() {
                let topic = TopicName::new(r.string()?)?;
                let requested = r.u8()?;
                if requested & !0b11 != 0 {
                    return Err(DecodeError::InvalidQos);
                }
                let qos = QoS::from_u8(requested).ok_or(DecodeError::InvalidQos)?;
                topics.push((topic, qos));
            }
            if topics.is_empty() {
                return Err(DecodeError::EmptyTopicList);
            }
            Packet::Subscribe(Subscribe { packet_id, topics })
        }
        PacketKind::SubAck => {
            let packet_id = r.packet_id()?;
            let codes = r
                .rest()
                .iter()
                .map(|&c| match c {
                    0x80 => Ok(SubscribeReturn::Failure),
                    _ => QoS::from_u8(c)
                        .map(SubscribeReturn::Granted)
                        .ok_or(DecodeError::InvalidReturnCode(c)),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Packet::SubAck(SubAck { packet_id, codes })
        }
        PacketKind::Unsubscribe => {
            let packet_id = r.packet_id()?;
            let mut topics = Vec::new();
            while !r.is_empty() {
                topics.push(TopicName::new(r.string()?)?);
            }
            if topics.is_empty() {
                return Err(DecodeError::EmptyTopicList);
            }
            Packet::Unsubscribe(Unsubscribe { packet_id, topics })
        }
        PacketKind::PingReq => Packet::PingReq,
        PacketKind::PingResp => Packet::PingResp,
        PacketKind::Disconnect => Packet::Disconnect,
    };
    match r.buf.len() - r.pos {
        0 => Ok(packet),
        extra => Err(DecodeError::TrailingBytes(extra)),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let slice = self.buf.get(self.pos..self.pos + n).ok_or(DecodeError::Truncated)?;
        self.pos += n;
        Ok(slice)
    }

    fn rest(&mut self) -> &'a [u8] {
        let slice = &self.buf[self.pos..];
        self.pos = self.buf.len();
        slice
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn packet_id(&mut self) -> Result<PacketId, DecodeError> {
        PacketId::new(self.u16()?).ok_or(DecodeError::ZeroPacketId)
    }

    fn string(&mut self) -> Result<String, DecodeError> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        core::str::from_utf8(raw)
            .map(String::from)
            .map_err(|_| DecodeError::InvalidUtf8)
    }
}
