//! Client side of the node protocol: single-node connections and a
//! cluster client that follows MOVED redirects.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io;
use std::time::Duration;

use bytes::Bytes;
use iotcloud_core::store::{Frame, Request};
use iotcloud_core::{hash_slot, NodeId, SlotMap};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;

use super::manifest::Manifest;
use crate::wire::{write_frame, FrameReader};

/// Retries after the first attempt, for redirects and unreachable owners.
pub const RETRY_BUDGET: u32 = 2;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("slot {slot} has no live owner")]
    Unavailable { slot: u16 },
    #[error("slot {slot}: gave up after {attempts} attempts ({last})")]
    Routing { slot: u16, attempts: u32, last: String },
    #[error("node {0} is not in the manifest")]
    UnknownNode(NodeId),
    #[error("node replied with an error: {0}")]
    Remote(String),
    #[error("unexpected reply {0:?}")]
    Protocol(Frame),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One connection to one node. Pushed `Message` frames that arrive while
/// waiting for a reply are buffered for [`NodeConn::next_message`].
pub struct NodeConn {
    reader: FrameReader<OwnedReadHalf>,
    writer: OwnedWriteHalf,
    pushed: VecDeque<(Bytes, Bytes)>,
}

impl NodeConn {
    pub async fn connect(addr: &str) -> io::Result<NodeConn> {
        let stream = tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(addr))
            .await
            .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, format!("connecting to {addr}")))??;
        stream.set_nodelay(true)?;
        let (rd, wr) = stream.into_split();
        Ok(NodeConn { reader: FrameReader::new(rd), writer: wr, pushed: VecDeque::new() })
    }

    pub async fn send(&mut self, frame: &Frame) -> io::Result<()> {
        write_frame(&mut self.writer, frame).await
    }

    /// Sends a frame and waits for the first non-push reply.
    pub async fn call(&mut self, frame: &Frame) -> io::Result<Frame> {
        self.send(frame).await?;
        self.reply().await
    }

    pub async fn reply(&mut self) -> io::Result<Frame> {
        loop {
            match self.reader.next().await? {
                Some(Frame::Message { channel, payload }) => self.pushed.push_back((channel, payload)),
                Some(frame) => return Ok(frame),
                None => return Err(io::ErrorKind::UnexpectedEof.into()),
            }
        }
    }

    /// Next pushed `(channel, payload)`.
    pub async fn next_message(&mut self) -> io::Result<(Bytes, Bytes)> {
        if let Some(m) = self.pushed.pop_front() {
            return Ok(m);
        }
        loop {
            match self.reader.next().await? {
                Some(Frame::Message { channel, payload }) => return Ok((channel, payload)),
                Some(_) => continue,
                None => return Err(io::ErrorKind::UnexpectedEof.into()),
            }
        }
    }

    pub async fn subscribe(&mut self, channel: impl Into<Bytes>) -> Result<(), ClientError> {
        expect_ok(self.call(&Frame::Subscribe { channel: channel.into() }).await?)
    }

    pub async fn unsubscribe(&mut self, channel: impl Into<Bytes>) -> Result<(), ClientError> {
        expect_ok(self.call(&Frame::Unsubscribe { channel: channel.into() }).await?)
    }

    /// Publishes and returns the receiving node's local delivery count.
    pub async fn publish(&mut self, channel: impl Into<Bytes>, payload: impl Into<Bytes>) -> Result<u32, ClientError> {
        let frame = Frame::Publish { channel: channel.into(), payload: payload.into() };
        match self.call(&frame).await? {
            Frame::Count(n) => Ok(n),
            other => Err(unexpected(other)),
        }
    }

    pub async fn slots(&mut self) -> Result<SlotMap, ClientError> {
        match self.call(&Frame::Slots).await? {
            Frame::SlotTable(intervals) => {
                SlotMap::new(intervals).map_err(|e| ClientError::Remote(e.to_string()))
            }
            other => Err(unexpected(other)),
        }
    }

    pub async fn stats(&mut self) -> Result<serde_json::Value, ClientError> {
        match self.call(&Frame::Stats).await? {
            Frame::Info(text) => serde_json::from_str(&text).map_err(|e| ClientError::Remote(e.to_string())),
            other => Err(unexpected(other)),
        }
    }
}

fn unexpected(frame: Frame) -> ClientError {
    match frame {
        Frame::Error(msg) => ClientError::Remote(msg),
        other => ClientError::Protocol(other),
    }
}

fn expect_ok(frame: Frame) -> Result<(), ClientError> {
    match frame {
        Frame::Ok => Ok(()),
        other => Err(unexpected(other)),
    }
}

fn request_frame(request: &Request) -> Frame {
    match request.clone() {
        Request::Set { key, value } => Frame::Set { key, value },
        Request::Get { key } => Frame::Get { key },
        Request::Del { key } => Frame::Del { key },
    }
}

/// Outcome of a routed command plus the path it took.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Routed {
    /// Value for GET, previous value for DEL, `None` for SET.
    pub value: Option<Bytes>,
    /// Nodes contacted, in order; the last one executed the command.
    pub path: Vec<NodeId>,
}

/// Location-transparent access to the whole cluster.
pub struct ClusterClient {
    addrs: BTreeMap<NodeId, String>,
    map: SlotMap,
    conns: HashMap<NodeId, NodeConn>,
}

impl ClusterClient {
    pub fn new(manifest: &Manifest) -> anyhow::Result<ClusterClient> {
        Ok(ClusterClient {
            addrs: manifest.nodes.iter().map(|n| (NodeId(n.id), n.addr.clone())).collect(),
            map: manifest.slot_map()?,
            conns: HashMap::new(),
        })
    }

    pub fn slot_map(&self) -> &SlotMap {
        &self.map
    }

    async fn conn(&mut self, node: NodeId) -> Result<&mut NodeConn, ClientError> {
        if !self.conns.contains_key(&node) {
            let addr = self.addrs.get(&node).ok_or(ClientError::UnknownNode(node))?;
            let conn = NodeConn::connect(addr).await?;
            self.conns.insert(node, conn);
        }
        Ok(self.conns.get_mut(&node).expect("inserted above"))
    }

    /// Reloads the slot table from the first node that answers.
    pub async fn refresh_slots(&mut self) -> Result<(), ClientError> {
        let nodes: Vec<NodeId> = self.addrs.keys().copied().collect();
        let mut last = None;
        for node in nodes {
            let result = match self.conn(node).await {
                Ok(conn) => conn.slots().await,
                Err(e) => Err(e),
            };
            match result {
                Ok(map) => {
                    self.map = map;
                    return Ok(());
                }
                Err(e) => {
                    self.conns.remove(&node);
                    last = Some(e);
                }
            }
        }
        Err(last.unwrap_or(ClientError::Unavailable { slot: 0 }))
    }

    pub async fn execute(&mut self, request: Request) -> Result<Option<Bytes>, ClientError> {
        let entry = self.map.route(request.key());
        Ok(self.execute_at(entry, request).await?.value)
    }

    /// Sends `request` to `entry` first and follows redirects from there.
    pub async fn execute_at(&mut self, entry: NodeId, request: Request) -> Result<Routed, ClientError> {
        let slot = hash_slot(request.key());
        let frame = request_frame(&request);
        let mut target = entry;
        let mut path = Vec::new();
        let mut last = String::new();
        for _attempt in 0..=RETRY_BUDGET {
            path.push(target);
            let reply = match self.conn(target).await {
                Ok(conn) => conn.call(&frame).await.map_err(ClientError::from),
                Err(e) => Err(e),
            };
            match reply {
                Ok(Frame::Ok) => return Ok(Routed { value: None, path }),
                Ok(Frame::Value(value)) => return Ok(Routed { value, path }),
                Ok(Frame::Moved { owner, .. }) => {
                    last = format!("moved to node {owner}");
                    target = owner;
                }
                Ok(Frame::Unavailable { slot }) => return Err(ClientError::Unavailable { slot }),
                Ok(other) => return Err(unexpected(other)),
                Err(e) => {
                    last = e.to_string();
                    self.conns.remove(&target);
                    if self.refresh_slots().await.is_ok() {
                        target = self.map.owner(slot);
                    }
                }
            }
        }
        Err(ClientError::Routing { slot, attempts: RETRY_BUDGET + 1, last })
    }

    pub async fn set(&mut self, key: impl Into<Bytes>, value: impl Into<Bytes>) -> Result<(), ClientError> {
        self.execute(Request::Set { key: key.into(), value: value.into() }).await.map(|_| ())
    }

    pub async fn get(&mut self, key: impl Into<Bytes>) -> Result<Option<Bytes>, ClientError> {
        self.execute(Request::Get { key: key.into() }).await
    }

    pub async fn del(&mut self, key: impl Into<Bytes>) -> Result<Option<Bytes>, ClientError> {
        self.execute(Request::Del { key: key.into() }).await
    }
}
