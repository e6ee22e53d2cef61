//! MQTT 3.1.1 subset: packet model, wire codec and QoS session state.
//!
//! Only exact-match topics are supported. Wildcards, retained messages,
//! wills and credentials are rejected while decoding.

mod codec;
mod packet;
mod qos;

pub use codec::{
    decode_packet, decode_remaining_length, encode_packet, encode_packet_into,
    encode_remaining_length, DecodeError, EncodeError, RemainingLength, MAX_PACKET_BODY,
    MAX_REMAINING_LENGTH,
};
pub use packet::{
    ConnAck, Connect, ConnectReturn, Packet, PacketId, PacketKind, Publish, QoS, SubAck,
    Subscribe, SubscribeReturn, TopicError, TopicName, Unsubscribe, MAX_PAYLOAD,
};
pub use qos::{
    OutboundMessage, OutboundStage, QosError, QosEvent, QosSession, RetryPolicy, Step,
    DEFAULT_ACK_TIMEOUT_MS, DEFAULT_MAX_RETRANSMITS,
};
