mod common;

use std::time::Duration;

use bytes::Bytes;
use iotcloud::broker::{start_broker, BrokerConfig, BrokerHandle, BusMode};
use iotcloud::mqtt_client::{ClientEvent, ClientOptions, MqttClient, MqttError};
use iotcloud::store::start_node;
use iotcloud_core::NodeId;
use iotcloud_core::mqtt::{Packet, PacketId, Publish, QoS, SubscribeReturn, TopicName};
use tokio::io::AsyncWriteExt;
use tokio::net::TcpStream;
use tokio::time::Instant;

async fn local_broker() -> BrokerHandle {
    start_broker(BrokerConfig::new("127.0.0.1:0")).await.unwrap()
}

async fn client(b: &BrokerHandle, id: &str) -> MqttClient {
    MqttClient::connect(&b.addr.to_string(), ClientOptions::new(id)).await.unwrap()
}

async fn next_message(c: &mut MqttClient, within: Duration) -> Option<Publish> {
    let deadline = Instant::now() + within;
    loop {
        match c.next_event(deadline).await.unwrap()? {
            ClientEvent::Message(p) => return Some(p),
            ClientEvent::Published(_) => {}
        }
    }
}

async fn wait_published(c: &mut MqttClient) {
    let deadline = Instant::now() + Duration::from_secs(5);
    while c.inflight() > 0 {
        c.next_event(deadline).await.unwrap().expect("publish handshake timed out");
    }
}

#[tokio::test]
async fn pub_sub_on_one_instance_at_each_qos() {
    let b = local_broker().await;
    let mut sub = client(&b, "sub").await;
    let granted = sub
        .subscribe(&[("a", QoS::AtMostOnce), ("b", QoS::AtLeastOnce), ("c", QoS::ExactlyOnce)])
        .await
        .unwrap();
    assert_eq!(
        granted,
        vec![
            SubscribeReturn::Granted(QoS::AtMostOnce),
            SubscribeReturn::Granted(QoS::AtLeastOnce),
            SubscribeReturn::Granted(QoS::ExactlyOnce)
        ]
    );
    let mut publ = client(&b, "pub").await;
    for (topic, qos) in [("a", QoS::AtMostOnce), ("b", QoS::AtLeastOnce), ("c", QoS::ExactlyOnce)] {
        publ.publish(topic, format!("to {topic}"), qos).await.unwrap();
        wait_published(&mut publ).await;
        let m = next_message(&mut sub, Duration::from_secs(5)).await.expect("delivery");
        assert_eq!(m.topic.as_str(), topic);
        assert_eq!(m.qos, qos);
        assert_eq!(&m.payload[..], format!("to {topic}").as_bytes());
    }
    // Delivery QoS is capped by the granted QoS.
    publ.publish("a", "hi", QoS::ExactlyOnce).await.unwrap();
    wait_published(&mut publ).await;
    assert_eq!(next_message(&mut sub, Duration::from_secs(5)).await.unwrap().qos, QoS::AtMostOnce);
}

#[tokio::test]
async fn fan_out_reaches_every_subscriber_once() {
    let b = local_broker().await;
    let mut subs = Vec::new();
    for i in 0..5 {
        let mut c = client(&b, &format!("s{i}")).await;
        c.subscribe(&[("fan", QoS::AtLeastOnce)]).await.unwrap();
        subs.push(c);
    }
    let mut publ = client(&b, "p").await;
    publ.publish("fan", "x", QoS::AtLeastOnce).await.unwrap();
    wait_published(&mut publ).await;
    for s in &mut subs {
        assert!(next_message(s, Duration::from_secs(5)).await.is_some());
        assert!(next_message(s, Duration::from_millis(300)).await.is_none());
    }
}

#[tokio::test]
async fn unsubscribe_stops_delivery() {
    let b = local_broker().await;
    let mut sub = client(&b, "sub").await;
    sub.subscribe(&[("t", QoS::AtLeastOnce)]).await.unwrap();
    sub.unsubscribe(&["t"]).await.unwrap();
    let mut publ = client(&b, "pub").await;
    publ.publish("t", "late", QoS::AtLeastOnce).await.unwrap();
    wait_published(&mut publ).await;
    assert!(next_message(&mut sub, Duration::from_millis(500)).await.is_none());
}

#[tokio::test]
async fn duplicate_client_id_displaces_the_older_session() {
    let b = local_broker().await;
    let mut first = client(&b, "same").await;
    let _second = client(&b, "same").await;
    let deadline = Instant::now() + Duration::from_secs(5);
    match first.next_event(deadline).await {
        Err(MqttError::Closed) | Err(MqttError::Io(_)) => {}
        other => panic!("old session should be closed, got {other:?}"),
    }
}

#[tokio::test]
async fn idle_client_is_closed_after_one_and_a_half_keepalives() {
    let b = local_broker().await;
    let mut raw = TcpStream::connect(b.addr).await.unwrap();
    let connect = iotcloud_core::mqtt::Connect::new("quiet", 1);
    raw.write_all(&iotcloud_core::mqtt::encode_packet(&Packet::Connect(connect)).unwrap()).await.unwrap();
    let start = Instant::now();
    let mut buf = vec![0u8; 64];
    loop {
        let n = tokio::time::timeout(Duration::from_secs(5), tokio::io::AsyncReadExt::read(&mut raw, &mut buf))
            .await
            .expect("broker never closed the idle connection")
            .unwrap_or(0);
        if n == 0 {
            break;
        }
    }
    let waited = start.elapsed();
    assert!(waited >= Duration::from_millis(1400), "closed early after {waited:?}");
    assert!(waited <= Duration::from_millis(2600), "closed late after {waited:?}");
    assert_eq!(b.stats()["keepalive_closes"], 1);
}

#[tokio::test]
async fn qos2_duplicate_publish_is_forwarded_once() {
    let b = local_broker().await;
    let mut sub = client(&b, "sub").await;
    sub.subscribe(&[("q2", QoS::ExactlyOnce)]).await.unwrap();

    let mut raw = TcpStream::connect(b.addr).await.unwrap();
    let connect = iotcloud_core::mqtt::Connect::new("raw", 30);
    raw.write_all(&iotcloud_core::mqtt::encode_packet(&Packet::Connect(connect)).unwrap()).await.unwrap();
    let publish = |dup| {
        Packet::Publish(Publish {
            dup,
            qos: QoS::ExactlyOnce,
            packet_id: PacketId::new(9),
            topic: TopicName::new("q2").unwrap(),
            payload: Bytes::from_static(b"once"),
        })
    };
    for p in [publish(false), publish(true), publish(true)] {
        raw.write_all(&iotcloud_core::mqtt::encode_packet(&p).unwrap()).await.unwrap();
    }
    let rel = Packet::PubRel(PacketId::new(9).unwrap());
    raw.write_all(&iotcloud_core::mqtt::encode_packet(&rel).unwrap()).await.unwrap();

    assert!(next_message(&mut sub, Duration::from_secs(5)).await.is_some());
    assert!(next_message(&mut sub, Duration::from_millis(500)).await.is_none());
    assert_eq!(b.stats()["publishes_in"], 1);
}

#[tokio::test]
async fn rumqttc_exchanges_qos0_and_qos1() {
    use rumqttc::{AsyncClient, Event, Incoming, MqttOptions, QoS as RQoS};
    let b = local_broker().await;
    let mut opts = MqttOptions::new("interop", "127.0.0.1", b.addr.port());
    opts.set_keep_alive(Duration::from_secs(5));
    let (rc, mut eventloop) = AsyncClient::new(opts, 16);
    rc.subscribe("interop/0", RQoS::AtMostOnce).await.unwrap();
    rc.subscribe("interop/1", RQoS::AtLeastOnce).await.unwrap();

    let mut got = Vec::new();
    let mut subacks = 0;
    let mut own = client(&b, "own").await;
    let deadline = Instant::now() + Duration::from_secs(10);
    let mut sent = false;
    while got.len() < 4 {
        let ev = tokio::time::timeout_at(deadline, eventloop.poll()).await.expect("interop timed out").unwrap();
        match ev {
            Event::Incoming(Incoming::SubAck(_)) => {
                subacks += 1;
                if subacks == 2 && !sent {
                    sent = true;
                    rc.publish("interop/0", RQoS::AtMostOnce, false, "r0").await.unwrap();
                    rc.publish("interop/1", RQoS::AtLeastOnce, false, "r1").await.unwrap();
                    own.publish("interop/0", "o0", QoS::AtMostOnce).await.unwrap();
                    own.publish("interop/1", "o1", QoS::AtLeastOnce).await.unwrap();
                }
            }
            Event::Incoming(Incoming::Publish(p)) => got.push((p.topic.clone(), p.qos as u8, p.payload.to_vec())),
            _ => {}
        }
    }
    got.sort();
    assert_eq!(
        got,
        vec![
            ("interop/0".to_string(), 0, b"o0".to_vec()),
            ("interop/0".to_string(), 0, b"r0".to_vec()),
            ("interop/1".to_string(), 1, b"o1".to_vec()),
            ("interop/1".to_string(), 1, b"r1".to_vec()),
        ]
    );
}

#[tokio::test]
async fn two_instances_exchange_messages_over_the_store_bus() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::manifest(dir.path(), 3, &[], false);
    let mut nodes = Vec::new();
    for n in &m.nodes {
        nodes.push(start_node(m.clone(), NodeId(n.id)).await.unwrap());
    }
    common::wait_meshed(&m, Duration::from_secs(10)).await;

    let mut brokers = Vec::new();
    for index in 0..2u32 {
        let mut cfg = BrokerConfig::new("127.0.0.1:0");
        cfg.instance = index;
        cfg.bus = BusMode::Store { manifest: m.clone(), index: index as usize };
        brokers.push(start_broker(cfg).await.unwrap());
    }
    let mut sub0 = client(&brokers[0], "sub0").await;
    let mut sub1 = client(&brokers[1], "sub1").await;
    sub0.subscribe(&[("room", QoS::AtLeastOnce)]).await.unwrap();
    sub1.subscribe(&[("room", QoS::AtLeastOnce)]).await.unwrap();

    let mut publ = client(&brokers[0], "pub").await;
    for i in 0..20 {
        publ.publish("room", format!("m{i}"), QoS::AtLeastOnce).await.unwrap();
    }
    wait_published(&mut publ).await;
    for sub in [&mut sub0, &mut sub1] {
        let mut seen = Vec::new();
        while let Some(m) = next_message(sub, Duration::from_secs(3)).await {
            seen.push(String::from_utf8(m.payload.to_vec()).unwrap());
        }
        let want: Vec<String> = (0..20).map(|i| format!("m{i}")).collect();
        assert_eq!(seen, want, "each subscriber gets every message once, in order");
    }
    drop(nodes);
}
