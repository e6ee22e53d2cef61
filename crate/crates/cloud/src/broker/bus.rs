//! Cross-instance message bus over slot-store channels.
//!
//! Each topic maps to one store channel; the channel payload is the
//! publish QoS byte followed by the application payload. Without a store
//! the bus loops publishes straight back into this instance.

use std::collections::{BTreeSet, VecDeque};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use bytes::{BufMut, Bytes, BytesMut};
use iotcloud_core::mqtt::QoS;
use iotcloud_core::store::Frame;
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot};

use super::Shared;
use crate::store::Manifest;
use crate::wire::{write_frame, FrameReader};

pub(crate) enum BusCmd {
    Subscribe(String, oneshot::Sender<()>),
    Unsubscribe(String),
    Publish(String, Bytes),
}

pub(crate) fn encode_payload(qos: QoS, payload: &[u8]) -> Bytes {
    let mut buf = BytesMut::with_capacity(payload.len() + 1);
    buf.put_u8(qos.as_u8());
    buf.put_slice(payload);
    buf.freeze()
}

pub(crate) fn decode_payload(data: &Bytes) -> Option<(QoS, Bytes)> {
    let qos = QoS::from_u8(*data.first()?)?;
    Some((qos, data.slice(1..)))
}

/// Store nodes this instance may attach to, preferred one first.
fn candidates(manifest: &Manifest, index: usize) -> Vec<String> {
    let primaries: Vec<&str> = manifest.primaries().map(|n| n.addr.as_str()).collect();
    let first = index % primaries.len();
    let mut out: Vec<String> = primaries[first..].iter().chain(&primaries[..first]).map(|s| s.to_string()).collect();
    out.extend(manifest.nodes.iter().filter(|n| n.standby_of.is_some()).map(|n| n.addr.clone()));
    out
}

pub(crate) async fn run_store_bus(
    manifest: Manifest,
    index: usize,
    mut commands: mpsc::UnboundedReceiver<BusCmd>,
    shared: Arc<Shared>,
) {
    let addrs = candidates(&manifest, index);
    let mut channels: BTreeSet<String> = BTreeSet::new();
    let mut attempt = 0usize;
    loop {
        let addr = &addrs[attempt % addrs.len()];
        attempt += 1;
        let stream = match tokio::time::timeout(Duration::from_secs(1), TcpStream::connect(addr)).await {
            Ok(Ok(s)) => s,
            _ => {
                if attempt % addrs.len() == 0 {
                    tokio::time::sleep(Duration::from_millis(500)).await;
                }
                continue;
            }
        };
        // Prefer the home node again after a successful reconnect elsewhere.
        attempt = 0;
        let _ = stream.set_nodelay(true);
        tracing::info!(node = %addr, "bus attached");
        let (rd, mut wr) = stream.into_split();
        let mut reader = FrameReader::new(rd);
        let mut waiters: VecDeque<Option<oneshot::Sender<()>>> = VecDeque::new();
        let mut ok = true;
        for ch in &channels {
            if write_frame(&mut wr, &Frame::Subscribe { channel: Bytes::from(ch.clone()) }).await.is_err() {
                ok = false;
                break;
            }
            waiters.push_back(None);
        }
        while ok {
            tokio::select! {
                cmd = commands.recv() => {
                    let Some(cmd) = cmd else { return };
                    let (frame, waiter) = match cmd {
                        BusCmd::Subscribe(ch, ack) => {
                            channels.insert(ch.clone());
                            (Frame::Subscribe { channel: Bytes::from(ch) }, Some(ack))
                        }
                        BusCmd::Unsubscribe(ch) => {
                            channels.remove(&ch);
                            (Frame::Unsubscribe { channel: Bytes::from(ch) }, None)
                        }
                        BusCmd::Publish(ch, payload) => {
                            shared.stats.bus_published.fetch_add(1, Ordering::Relaxed);
                            (Frame::Publish { channel: Bytes::from(ch), payload }, None)
                        }
                    };
                    waiters.push_back(waiter);
                    ok = write_frame(&mut wr, &frame).await.is_ok();
                }
                frame = reader.next() => match frame {
                    Ok(Some(Frame::Message { channel, payload })) => {
                        let (Ok(topic), Some((qos, body))) = (std::str::from_utf8(&channel), decode_payload(&payload)) else {
                            continue;
                        };
                        shared.deliver(topic, qos, body);
                    }
                    Ok(Some(_reply)) => {
                        if let Some(Some(ack)) = waiters.pop_front() {
                            let _ = ack.send(());
                        }
                    }
                    _ => ok = false,
                }
            }
        }
        shared.stats.bus_reconnects.fetch_add(1, Ordering::Relaxed);
        tracing::warn!(node = %addr, "bus connection lost");
    }
}
