//! Control-path handshake frames.
//!
//! Establishment runs over the ordinary socket: the connector sends `Hello`,
//! the acceptor answers `Ack` (carrying the channel id and local record ids)
//! or `Nak`, and the connector confirms with `Ready`. Peers that never send a
//! valid magic are plain sockets; both sides detect that by peeking and fall
//! back without consuming foreign bytes.
//!
//! The decoder operates on untrusted bytes and must never panic: all lengths
//! are bounded and checked before any allocation.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::{ChannelId, PrincipalId, RecordId, WorkerId};

pub const MAGIC: [u8; 4] = *b"ESH1";
pub const PROTOCOL_VERSION: u16 = 1;

/// Frame header: magic + type + version + body length.
pub const HEADER_LEN: usize = 4 + 1 + 2 + 4;
pub const MAX_BODY_LEN: u32 = 4096;
const MAX_NAME_LEN: usize = 255;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HandshakeError {
    #[error("not a handshake frame")]
    BadMagic,
    #[error("unknown frame type {0}")]
    BadType(u8),
    #[error("malformed frame body")]
    Malformed,
    #[error("frame body length {0} over limit")]
    Oversized(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NakReason {
    Denied,
    VersionMismatch,
    SegmentMismatch,
    Unavailable,
}

impl NakReason {
    fn raw(self) -> u8 {
        match self {
            NakReason::Denied => 1,
            NakReason::VersionMismatch => 2,
            NakReason::SegmentMismatch => 3,
            NakReason::Unavailable => 4,
        }
    }

    fn from_raw(raw: u8) -> Option<NakReason> {
        match raw {
            1 => Some(NakReason::Denied),
            2 => Some(NakReason::VersionMismatch),
            3 => Some(NakReason::SegmentMismatch),
            4 => Some(NakReason::Unavailable),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Hello {
        version: u16,
        segment: String,
        principal: PrincipalId,
        worker: WorkerId,
        /// Pre-rewrite destination recorded by the namespace plane, if the
        /// connection was redirected.
        orig_dst: Option<SocketAddr>,
    },
    Ack {
        channel: ChannelId,
        principal: PrincipalId,
        worker: WorkerId,
        tx_local: RecordId,
        rx_local: RecordId,
    },
    Nak {
        reason: NakReason,
    },
    Ready {
        channel: ChannelId,
    },
}

impl Frame {
    fn type_byte(&self) -> u8 {
        match self {
            Frame::Hello { .. } => 1,
            Frame::Ack { .. } => 2,
            Frame::Nak { .. } => 3,
            Frame::Ready { .. } => 4,
        }
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    let bytes = s.as_bytes();
    debug_assert!(bytes.len() <= MAX_NAME_LEN);
    out.push(bytes.len() as u8);
    out.extend_from_slice(bytes);
}

pub fn encode(frame: &Frame) -> Vec<u8> {
    let mut body = Vec::new();
    match frame {
        Frame::Hello {
            version,
            segment,
            principal,
            worker,
            orig_dst,
        } => {
            body.extend_from_slice(&version.to_le_bytes());
            put_str(&mut body, segment);
            body.extend_from_slice(&principal.0.to_le_bytes());
            body.extend_from_slice(&worker.0.to_le_bytes());
            match orig_dst {
                Some(addr) => {
                    body.push(1);
                    put_str(&mut body, &addr.to_string());
                }
                None => body.push(0),
            }
        }
        Frame::Ack {
            channel,
            principal,
            worker,
            tx_local,
            rx_local,
        } => {
            body.extend_from_slice(&channel.0.to_le_bytes());
            body.extend_from_slice(&principal.0.to_le_bytes());
            body.extend_from_slice(&worker.0.to_le_bytes());
            body.extend_from_slice(&tx_local.0.to_le_bytes());
            body.extend_from_slice(&rx_local.0.to_le_bytes());
        }
        Frame::Nak { reason } => body.push(reason.raw()),
        Frame::Ready { channel } => body.extend_from_slice(&channel.0.to_le_bytes()),
    }

    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&MAGIC);
    out.push(frame.type_byte());
    out.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HandshakeError> {
        if self.at + n > self.buf.len() {
            return Err(HandshakeError::Malformed);
        }
        let out = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, HandshakeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, HandshakeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, HandshakeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, HandshakeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String, HandshakeError> {
        let len = self.u8()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| HandshakeError::Malformed)
    }

    fn done(&self) -> Result<(), HandshakeError> {
        if self.at == self.buf.len() {
            Ok(())
        } else {
            Err(HandshakeError::Malformed)
        }
    }
}

/// Decode one frame from the front of `buf`. `Ok(None)` means more bytes are
/// needed; `Ok(Some((frame, consumed)))` on success.
pub fn decode(buf: &[u8]) -> Result<Option<(Frame, usize)>, HandshakeError> {
    if buf.len() < 4 {
        if !MAGIC.starts_with(&buf[..buf.len().min(4)]) {
            return Err(HandshakeError::BadMagic);
        }
        return Ok(None);
    }
    if buf[..4] != MAGIC {
        return Err(HandshakeError::BadMagic);
    }
    if buf.len() < HEADER_LEN {
        return Ok(None);
    }
    let frame_type = buf[4];
    let _version = u16::from_le_bytes([buf[5], buf[6]]);
    let body_len = u32::from_le_bytes([buf[7], buf[8], buf[9], buf[10]]);
    if body_len > MAX_BODY_LEN {
        return Err(HandshakeError::Oversized(body_len));
    }
    let total = HEADER_LEN + body_len as usize;
    if buf.len() < total {
        return Ok(None);
    }
    let mut c = Cursor {
        buf: &buf[HEADER_LEN..total],
        at: 0,
    };
    let frame = match frame_type {
        1 => {
            let version = c.u16()?;
            let segment = c.str()?;
            let principal = PrincipalId(c.u32()?);
            let worker = WorkerId(c.u32()?);
            let orig_dst = match c.u8()? {
                0 => None,
                1 => {
                    let s = c.str()?;
                    Some(s.parse().map_err(|_| HandshakeError::Malformed)?)
                }
                _ => return Err(HandshakeError::Malformed),
            };
            Frame::Hello {
                version,
                segment,
                principal,
                worker,
                orig_dst,
            }
        }
        2 => Frame::Ack {
            channel: ChannelId(c.u64()?),
            principal: PrincipalId(c.u32()?),
            worker: WorkerId(c.u32()?),
            tx_local: RecordId(c.u32()?),
            rx_local: RecordId(c.u32()?),
        },
        3 => Frame::Nak {
            reason: NakReason::from_raw(c.u8()?).ok_or(HandshakeError::Malformed)?,
        },
        4 => Frame::Ready {
            channel: ChannelId(c.u64()?),
        },
        t => return Err(HandshakeError::BadType(t)),
    };
    c.done()?;
    Ok(Some((frame, total)))
}

pub fn send_frame(stream: &mut TcpStream, frame: &Frame) -> std::io::Result<()> {
    stream.write_all(&encode(frame))
}

/// Outcome of peeking at a stream for a handshake frame.
pub enum PeekOutcome {
    Frame(Frame),
    /// The peer sent bytes that are not a handshake frame; nothing consumed.
    NotHandshake,
    /// Nothing (or not enough) arrived before the deadline.
    TimedOut,
}

/// Wait up to `deadline` for a handshake frame, consuming it from the stream
/// only if the magic matches. Foreign bytes are left unread for the caller.
pub fn peek_frame(stream: &mut TcpStream, timeout: Duration) -> std::io::Result<PeekOutcome> {
    let deadline = Instant::now() + timeout;
    let mut probe = [0u8; HEADER_LEN];
    loop {
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            return Ok(PeekOutcome::TimedOut);
        }
        stream.set_read_timeout(Some(remaining.min(Duration::from_millis(20))))?;
        match stream.peek(&mut probe) {
            Ok(0) => return Ok(PeekOutcome::NotHandshake), // peer closed
            Ok(n) => {
                match decode(&probe[..n]) {
                    Err(HandshakeError::BadMagic) => return Ok(PeekOutcome::NotHandshake),
                    Err(_) => return Ok(PeekOutcome::NotHandshake),
                    Ok(_) if n < HEADER_LEN => continue, // need full header
                    Ok(_) => {
                        let body_len =
                            u32::from_le_bytes([probe[7], probe[8], probe[9], probe[10]]);
                        if body_len > MAX_BODY_LEN {
                            return Ok(PeekOutcome::NotHandshake);
                        }
                        let total = HEADER_LEN + body_len as usize;
                        let mut frame_buf = vec![0u8; total];
                        read_exact_deadline(stream, &mut frame_buf, deadline)?;
                        match decode(&frame_buf) {
                            Ok(Some((frame, _))) => return Ok(PeekOutcome::Frame(frame)),
                            _ => return Ok(PeekOutcome::NotHandshake),
                        }
                    }
                }
            }
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                continue;
            }
            Err(e) => return Err(e),
        }
    }
}

fn read_exact_deadline(
    stream: &mut TcpStream,
    buf: &mut [u8],
    deadline: Instant,
) -> std::io::Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::TimedOut,
                "handshake read deadline",
            ));
        }
        stream.set_read_timeout(Some(remaining))?;
        match stream.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "peer closed during handshake",
                ))
            }
            Ok(n) => filled += n,
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                continue;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}
