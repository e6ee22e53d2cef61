//! Buffered frame readers over tokio streams for the two binary protocols.

use std::io;

use bytes::{Buf, BytesMut};
use iotcloud_core::mqtt::{decode_packet, encode_packet_into, Packet};
use iotcloud_core::store::{decode_frame, encode_frame, Frame};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

fn invalid(e: impl std::error::Error + Send + Sync + 'static) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e)
}

/// Reads length-prefixed store frames.
pub struct FrameReader<R> {
    inner: R,
    buf: BytesMut,
}

impl<R: AsyncRead + Unpin> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader { inner, buf: BytesMut::with_capacity(8 * 1024) }
    }

    /// Next frame, or `None` on a clean end of stream.
    pub async fn next(&mut self) -> io::Result<Option<Frame>> {
        loop {
            if let Some((frame, used)) = decode_frame(&self.buf).map_err(invalid)? {
                self.buf.advance(used);
                return Ok(Some(frame));
            }
            if self.inner.read_buf(&mut self.buf).await? == 0 {
                if self.buf.is_empty() {
                    return Ok(None);
                }
                return Err(io::ErrorKind::UnexpectedEof.into());
            }
        }
    }
}

pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, frame: &Frame) -> io::Result<()> {
    let mut out = Vec::new();
    encode_frame(frame, &mut out);
    w.write_all(&out).await
}

/// Reads MQTT control packets.
pub struct PacketReader<R> {
    inner: R,
    buf: BytesMut,
}

impl<R: AsyncRead + Unpin> PacketReader<R> {
    pub fn new(inner: R) -> Self {
        PacketReader { inner, buf: BytesMut::with_capacity(4 * 1024) }
    }

    pub async fn next(&mut self) -> io::Result<Option<Packet>> {
        loop {
            if let Some((packet, used)) = decode_packet(&self.buf).map_err(invalid)? {
                self.buf.advance(used);
                return Ok(Some(packet));
            }
            if self.inner.read_buf(&mut self.buf).await? == 0 {
                if self.buf.is_empty() {
                    return Ok(None);
                }
                return Err(io::ErrorKind::UnexpectedEof.into());
            }
        }
    }
}

pub fn encode_packets(packets: &[Packet], out: &mut Vec<u8>) -> io::Result<()> {
    for p in packets {
        encode_packet_into(p, out).map_err(invalid)?;
    }
    Ok(())
}

pub async fn write_packet<W: AsyncWrite + Unpin>(w: &mut W, packet: &Packet) -> io::Result<()> {
    let mut out = Vec::new();
    encode_packets(std::slice::from_ref(packet), &mut out)?;
    w.write_all(&out).await
}
