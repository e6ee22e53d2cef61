mod common;

use std::collections::BTreeMap;
use std::time::Duration;

use bytes::Bytes;
use common::{eventually, manifest, wait_meshed};
use iotcloud::store::{start_node, ClientError, ClusterClient, NodeConn, NodeHandle};
use iotcloud_core::store::Request;
use iotcloud_core::NodeId;

async fn start_all(m: &iotcloud::store::Manifest) -> Vec<NodeHandle> {
    let mut nodes = Vec::new();
    for n in &m.nodes {
        nodes.push(start_node(m.clone(), NodeId(n.id)).await.unwrap());
    }
    nodes
}

fn key_owned_by(client: &ClusterClient, node: NodeId, tag: &str) -> Bytes {
    (0..)
        .map(|i| Bytes::from(format!("{tag}-{i}")))
        .find(|k| client.slot_map().route(k) == node)
        .unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn every_entry_node_gives_the_owner_result() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 3, &[], false);
    let _nodes = start_all(&m).await;
    wait_meshed(&m, Duration::from_secs(10)).await;
    let mut client = ClusterClient::new(&m).unwrap();
    for owner in 0..3u16 {
        for entry in 0..3u16 {
            let key = key_owned_by(&client, NodeId(owner), &format!("e{entry}"));
            let value = Bytes::from(format!("v{owner}{entry}"));
            let ops = [
                Request::Get { key: key.clone() },
                Request::Set { key: key.clone(), value: value.clone() },
                Request::Get { key: key.clone() },
                Request::Del { key: key.clone() },
                Request::Get { key: key.clone() },
            ];
            let mut model: Option<Bytes> = None;
            for op in ops {
                let expected = match &op {
                    Request::Get { .. } => model.clone(),
                    Request::Set { value, .. } => {
                        model = Some(value.clone());
                        None
                    }
                    Request::Del { .. } => model.take(),
                };
                let routed = client.execute_at(NodeId(entry), op.clone()).await.unwrap();
                assert_eq!(routed.value, expected, "{op:?} via {entry}");
                let hops = if entry == owner { vec![NodeId(entry)] } else { vec![NodeId(entry), NodeId(owner)] };
                assert_eq!(routed.path, hops);
                // Same state observed directly at the owner.
                let direct = client.execute_at(NodeId(owner), Request::Get { key: key.clone() }).await.unwrap();
                assert_eq!(direct.path, vec![NodeId(owner)]);
                assert_eq!(direct.value, model);
            }
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn publish_reaches_each_subscriber_once_for_every_placement() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 3, &[], false);
    let _nodes = start_all(&m).await;
    wait_meshed(&m, Duration::from_secs(10)).await;
    for publisher in 0..3usize {
        for subscriber in 0..3usize {
            let channel = format!("ch-{publisher}-{subscriber}");
            let mut sub = NodeConn::connect(&m.nodes[subscriber].addr).await.unwrap();
            sub.subscribe(channel.clone()).await.unwrap();
            let mut publ = NodeConn::connect(&m.nodes[publisher].addr).await.unwrap();
            let local = publ.publish(channel.clone(), "hello").await.unwrap();
            assert_eq!(local, u32::from(publisher == subscriber));
            let (ch, payload) = tokio::time::timeout(Duration::from_secs(2), sub.next_message())
                .await
                .expect("delivery")
                .unwrap();
            assert_eq!((&ch[..], &payload[..]), (channel.as_bytes(), &b"hello"[..]));
            let dup = tokio::time::timeout(Duration::from_millis(200), sub.next_message()).await;
            assert!(dup.is_err(), "duplicate delivery for {publisher}->{subscriber}");
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn fanout_count_matches_subscriptions() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 3, &[], false);
    let _nodes = start_all(&m).await;
    wait_meshed(&m, Duration::from_secs(10)).await;
    let mut subs = Vec::new();
    for i in 0..6 {
        let mut c = NodeConn::connect(&m.nodes[i % 3].addr).await.unwrap();
        c.subscribe("fan").await.unwrap();
        // Subscribing twice on one connection is still one subscription.
        c.subscribe("fan").await.unwrap();
        subs.push(c);
    }
    let mut publ = NodeConn::connect(&m.nodes[1].addr).await.unwrap();
    assert_eq!(publ.publish("fan", "x").await.unwrap(), 2);
    assert_eq!(publ.publish("nobody", "x").await.unwrap(), 0);
    for s in &mut subs {
        tokio::time::timeout(Duration::from_secs(2), s.next_message()).await.unwrap().unwrap();
        assert!(tokio::time::timeout(Duration::from_millis(100), s.next_message()).await.is_err());
    }
    let mut stats = NodeConn::connect(&m.nodes[1].addr).await.unwrap().stats().await.unwrap();
    assert_eq!(stats["forwards_sent"], 4);
    stats = NodeConn::connect(&m.nodes[0].addr).await.unwrap().stats().await.unwrap();
    assert_eq!(stats["forwards_sent"], 0);
    subs[0].unsubscribe("fan").await.unwrap();
    publ.publish("fan", "y").await.unwrap();
    assert!(tokio::time::timeout(Duration::from_millis(300), subs[0].next_message()).await.is_err());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn strict_failover_keeps_acknowledged_writes() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 2, &[0], true);
    let mut nodes = start_all(&m).await;
    wait_meshed(&m, Duration::from_secs(10)).await;
    let mut client = ClusterClient::new(&m).unwrap();
    let mut acked = BTreeMap::new();
    for i in 0..1000 {
        let key = Bytes::from(format!("key-{i}"));
        let value = Bytes::from(format!("value-{i}"));
        client.set(key.clone(), value.clone()).await.unwrap();
        acked.insert(key, value);
    }
    let primary = nodes.remove(0);
    assert_eq!(primary.id, NodeId(0));
    primary.kill();

    let standby_addr = m.nodes[2].addr.clone();
    eventually(Duration::from_secs(15), "standby promotion", || {
        let addr = standby_addr.clone();
        async move {
            let Ok(mut c) = NodeConn::connect(&addr).await else { return false };
            c.stats().await.map(|s| s["role"] == "promoted").unwrap_or(false)
        }
    })
    .await;
    eventually(Duration::from_secs(15), "slot table update on node 1", || {
        let addr = m.nodes[1].addr.clone();
        async move {
            let mut c = NodeConn::connect(&addr).await.unwrap();
            c.slots().await.unwrap().range_of(NodeId(100)).is_some()
        }
    })
    .await;
    client.refresh_slots().await.unwrap();
    for (key, value) in &acked {
        assert_eq!(client.get(key.clone()).await.unwrap().as_ref(), Some(value), "{key:?}");
    }
    client.set("after", "failover").await.unwrap();
    assert_eq!(client.get("after").await.unwrap(), Some(Bytes::from("failover")));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn failure_without_standby_only_affects_its_slots() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 3, &[], false);
    let mut nodes = start_all(&m).await;
    wait_meshed(&m, Duration::from_secs(10)).await;
    let mut client = ClusterClient::new(&m).unwrap();
    let lost = key_owned_by(&client, NodeId(2), "lost");
    let kept = key_owned_by(&client, NodeId(0), "kept");
    client.set(kept.clone(), "v").await.unwrap();
    nodes.pop().unwrap().kill();
    eventually(Duration::from_secs(15), "node 2 marked down", || {
        let addr = m.nodes[0].addr.clone();
        async move {
            let mut c = NodeConn::connect(&addr).await.unwrap();
            c.stats().await.unwrap()["peers"]["2"] == false
        }
    })
    .await;
    let mut c = NodeConn::connect(&m.nodes[0].addr).await.unwrap();
    let reply = c.call(&iotcloud_core::store::Frame::Get { key: lost.clone() }).await.unwrap();
    assert!(matches!(reply, iotcloud_core::store::Frame::Unavailable { .. }), "{reply:?}");
    assert!(matches!(client.get(lost).await, Err(ClientError::Unavailable { .. } | ClientError::Routing { .. })));
    assert_eq!(client.get(kept).await.unwrap(), Some(Bytes::from("v")));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn restart_replays_own_log() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 1, &[], false);
    let node = start_node(m.clone(), NodeId(0)).await.unwrap();
    let mut client = ClusterClient::new(&m).unwrap();
    for i in 0..100 {
        client.set(format!("k{i}"), format!("v{i}")).await.unwrap();
    }
    client.del("k7").await.unwrap();
    node.kill();
    tokio::time::sleep(Duration::from_millis(100)).await;
    let _node = start_node(m.clone(), NodeId(0)).await.unwrap();
    let mut client = ClusterClient::new(&m).unwrap();
    assert_eq!(client.get("k7").await.unwrap(), None);
    assert_eq!(client.get("k99").await.unwrap(), Some(Bytes::from("v99")));
}
