use bytes::Bytes;
use iotcloud_core::mqtt::*;
use proptest::prelude::*;

/// Base-128 digits by repeated long division, least significant first.
fn long_division_varint(mut n: u32) -> Vec<u8> {
    let mut digits = Vec::new();
    loop {
        digits.push((n % 128) as u8);
        n /= 128;
        if n == 0 {
            break;
        }
    }
    let last = digits.len() - 1;
    for d in &mut digits[..last] {
        *d |= 0x80;
    }
    digits
}

#[test]
fn varint_matches_long_division_over_first_two_million() {
    for n in 0..(1u32 << 21) {
        let enc = encode_remaining_length(n).unwrap();
        assert_eq!(enc.as_bytes(), long_division_varint(n).as_slice(), "n={n}");
        assert_eq!(decode_remaining_length(enc.as_bytes()).unwrap(), Some((n, enc.as_bytes().len())));
    }
}

proptest! {
    #[test]
    fn varint_is_canonical(n in 0u32..=MAX_REMAINING_LENGTH) {
        let enc = encode_remaining_length(n).unwrap();
        let bytes = enc.as_bytes();
        prop_assert_eq!(bytes.last().unwrap() & 0x80, 0);
        let shortest = match n {
            0..=127 => 1,
            128..=16_383 => 2,
            16_384..=2_097_151 => 3,
            _ => 4,
        };
        prop_assert_eq!(bytes.len(), shortest);
        prop_assert_eq!(decode_remaining_length(bytes).unwrap(), Some((n, shortest)));
    }
}

fn topic() -> impl Strategy<Value = TopicName> {
    "[a-zA-Z0-9/_ -]{1,24}".prop_map(|s| TopicName::new(s).unwrap())
}

fn qos() -> impl Strategy<Value = QoS> {
    prop_oneof![Just(QoS::AtMostOnce), Just(QoS::AtLeastOnce), Just(QoS::ExactlyOnce)]
}

fn packet_id() -> impl Strategy<Value = PacketId> {
    (1u16..=u16::MAX).prop_map(|n| PacketId::new(n).unwrap())
}

fn payload() -> impl Strategy<Value = Bytes> {
    prop::collection::vec(any::<u8>(), 0..300).prop_map(Bytes::from)
}

pub fn valid_packet() -> impl Strategy<Value = Packet> {
    prop_oneof![
        ("[a-z0-9]{0,23}", any::<u16>(), any::<bool>(), prop_oneof![Just(3u8), Just(4u8)]).prop_map(
            |(id, ka, clean, level)| Packet::Connect(Connect {
                protocol_level: level,
                clean_session: clean,
                keep_alive: ka,
                client_id: id,
            })
        ),
        (any::<bool>(), 0u8..=5).prop_map(|(sp, code)| Packet::ConnAck(ConnAck {
            session_present: sp,
            code: ConnectReturn::from_u8(code).unwrap(),
        })),
        (any::<bool>(), qos(), packet_id(), topic(), payload()).prop_map(|(dup, qos, id, topic, payload)| {
            Packet::Publish(Publish {
                dup,
                qos,
                packet_id: (qos != QoS::AtMostOnce).then_some(id),
                topic,
                payload,
            })
        }),
        packet_id().prop_map(Packet::PubAck),
        packet_id().prop_map(Packet::PubRec),
        packet_id().prop_map(Packet::PubRel),
        packet_id().prop_map(Packet::PubComp),
        (packet_id(), prop::collection::vec((topic(), qos()), 1..6))
            .prop_map(|(packet_id, topics)| Packet::Subscribe(Subscribe { packet_id, topics })),
        (
            packet_id(),
            prop::collection::vec(
                prop_oneof![qos().prop_map(SubscribeReturn::Granted), Just(SubscribeReturn::Failure)],
                0..6
            )
        )
            .prop_map(|(packet_id, codes)| Packet::SubAck(SubAck { packet_id, codes })),
        (packet_id(), prop::collection::vec(topic(), 1..6))
            .prop_map(|(packet_id, topics)| Packet::Unsubscribe(Unsubscribe { packet_id, topics })),
        packet_id().prop_map(Packet::UnsubAck),
        Just(Packet::PingReq),
        Just(Packet::PingResp),
        Just(Packet::Disconnect),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn decode_inverts_encode(p in valid_packet()) {
        let bytes = encode_packet(&p).unwrap();
        prop_assert_eq!(decode_packet(&bytes).unwrap(), Some((p, bytes.len())));
    }

    #[test]
    fn every_strict_prefix_needs_more_bytes(p in valid_packet()) {
        let bytes = encode_packet(&p).unwrap();
        for cut in 0..bytes.len() {
            prop_assert_eq!(decode_packet(&bytes[..cut]).unwrap(), None);
        }
    }

    #[test]
    fn decoder_never_panics_on_noise(noise in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode_packet(&noise);
    }
}
