//! Control-plane protocol between the orchestrator and its workers.
//!
//! Every message travels inside an [`Envelope`] carrying a per-session
//! sequence number, framed as a 4-byte big-endian length prefix
//! followed by a self-describing JSON body. Frames over 16 MiB are
//! refused in both directions; a malformed or oversize frame is a
//! session-fatal error for the peer that produced it.
//!
//! The transport underneath is any ordered reliable byte stream. Both
//! the TCP sockets used in live deployments and the in-process channel
//! pairs used by the simulator carry these same frames.

use std::collections::VecDeque;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::domain::{MeasurementSpec, ProbeReply, TargetAddress, WorkerId};

/// Bumped on any incompatible change to the message set or framing.
pub const PROTOCOL_VERSION: u8 = 1;

/// Hard cap on a frame body. Anything larger closes the session.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

/// How often each side sends a heartbeat.
pub const HEARTBEAT_INTERVAL_US: u64 = 5_000_000;

/// Missed heartbeats before a worker is declared dead (3 * 5 s).
pub const HEARTBEAT_DEAD_AFTER: u32 = 3;

/// Workers whose clock disagrees with the orchestrator by more than
/// this are flagged; absolute fire times are meaningless beyond it.
pub const SKEW_FLAG_THRESHOLD_US: i64 = 500_000;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN} byte limit")]
    FrameTooLarge(usize),
    #[error("frame truncated")]
    Truncated,
    #[error("{0} bytes after the frame body")]
    TrailingBytes(usize),
    #[error("malformed frame body: {0}")]
    Malformed(String),
    #[error("target batch entries not sorted by fire time")]
    UnsortedTargets,
    #[error("session state cannot move {from:?} -> {to:?}")]
    BadTransition { from: SessionState, to: SessionState },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlMessage {
    /// First message on every connection, worker to orchestrator.
    Hello {
        worker_id: WorkerId,
        auth_token: String,
        capabilities: Vec<String>,
        protocol_version: u8,
    },
    StartMeasurement { spec: MeasurementSpec },
    /// Targets with absolute fire times, sorted ascending, so the
    /// worker-side schedule does not depend on stream latency.
    TargetBatch {
        measurement_id: u32,
        entries: Vec<(TargetAddress, u64)>,
    },
    ResultBatch {
        measurement_id: u32,
        replies: Vec<ProbeReply>,
    },
    EndMeasurement { measurement_id: u32 },
    Heartbeat { sent_at_us: u64 },
    /// Highest contiguous sequence number the sender has durably
    /// accepted from its peer.
    Ack { seq: u64 },
}

impl ControlMessage {
    /// Invariants that hold for every frame on the wire, checked at
    /// both ends so a violation is caught no matter who produced it.
    pub fn validate(&self) -> Result<(), WireError> {
        if let ControlMessage::TargetBatch { entries, .. } = self {
            if entries.windows(2).any(|w| w[0].1 > w[1].1) {
                return Err(WireError::UnsortedTargets);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub seq: u64,
    pub msg: ControlMessage,
}

/// Per-session outbound sequence numbers.
#[derive(Debug, Default)]
pub struct Sequencer {
    next: u64,
}

impl Sequencer {
    pub fn new() -> Self {
        Sequencer::default()
    }

    pub fn wrap(&mut self, msg: ControlMessage) -> Envelope {
        let seq = self.next;
        self.next += 1;
        Envelope { seq, msg }
    }
}

pub fn frame(envelope: &Envelope) -> Result<Vec<u8>, WireError> {
    envelope.msg.validate()?;
    let body = serde_json::to_vec(envelope).map_err(|e| WireError::Malformed(e.to_string()))?;
    if body.len() > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decodes exactly one frame. Streams should use [`FrameBuffer`],
/// which tolerates partial and concatenated input.
pub fn unframe(bytes: &[u8]) -> Result<Envelope, WireError> {
    let (envelope, used) = unframe_prefix(bytes)?.ok_or(WireError::Truncated)?;
    if used != bytes.len() {
        return Err(WireError::TrailingBytes(bytes.len() - used));
    }
    Ok(envelope)
}

/// Decodes the first frame of `bytes` if complete, returning it and
/// the byte count consumed. `Ok(None)` means more bytes are needed.
fn unframe_prefix(bytes: &[u8]) -> Result<Option<(Envelope, usize)>, WireError> {
    if bytes.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    let Some(body) = bytes.get(4..4 + len) else {
        return Ok(None);
    };
    let envelope: Envelope =
        serde_json::from_slice(body).map_err(|e| WireError::Malformed(e.to_string()))?;
    envelope.msg.validate()?;
    Ok(Some((envelope, 4 + len)))
}

/// Incremental decoder for one direction of a stream. Push raw bytes
/// in, pop complete envelopes out. Any error is session-fatal: the
/// buffer contents are undefined afterwards and the connection should
/// be dropped.
#[derive(Debug, Default)]
pub struct FrameBuffer {
    buf: VecDeque<u8>,
}

impl FrameBuffer {
    pub fn new() -> Self {
        FrameBuffer::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend(bytes);
    }

    pub fn next_frame(&mut self) -> Result<Option<Envelope>, WireError> {
        self.buf.make_contiguous();
        let (head, _) = self.buf.as_slices();
        match unframe_prefix(head)? {
            None => Ok(None),
            Some((envelope, used)) => {
                self.buf.drain(..used);
                Ok(Some(envelope))
            }
        }
    }
}

/// Blocking read of one frame. `Ok(None)` is a clean EOF on a frame
/// boundary; EOF mid-frame is an error.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Envelope>, WireError> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut prefix[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(WireError::Truncated),
            n => got += n,
        }
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            WireError::Truncated
        } else {
            WireError::Io(e)
        }
    })?;
    let envelope: Envelope =
        serde_json::from_slice(&body).map_err(|e| WireError::Malformed(e.to_string()))?;
    envelope.msg.validate()?;
    Ok(Some(envelope))
}

pub fn write_frame(w: &mut impl Write, envelope: &Envelope) -> Result<(), WireError> {
    let bytes = frame(envelope)?;
    w.write_all(&bytes)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Connected,
    Measuring,
    Disconnected,
}

/// One worker's session as the orchestrator sees it.
#[derive(Debug, Clone)]
pub struct Session {
    pub worker_id: WorkerId,
    pub state: SessionState,
    pub last_heartbeat_us: u64,
    pub outstanding_targets: u64,
}

impl Session {
    pub fn new(worker_id: WorkerId, now_us: u64) -> Self {
        Session {
            worker_id,
            state: SessionState::Connected,
            last_heartbeat_us: now_us,
            outstanding_targets: 0,
        }
    }

    /// Legal moves: Connected -> Measuring -> Connected, and anything
    /// -> Disconnected. A disconnected session never comes back; a
    /// reconnecting worker gets a fresh one.
    pub fn transition(&mut self, to: SessionState) -> Result<(), WireError> {
        use SessionState::*;
        let ok = matches!(
            (self.state, to),
            (Connected, Measuring) | (Measuring, Connected) | (_, Disconnected)
        );
        if !ok {
            return Err(WireError::BadTransition { from: self.state, to });
        }
        self.state = to;
        Ok(())
    }

    /// Dead when 3 heartbeat intervals have passed in silence.
    pub fn is_dead(&self, now_us: u64) -> bool {
        now_us.saturating_sub(self.last_heartbeat_us)
            > u64::from(HEARTBEAT_DEAD_AFTER) * HEARTBEAT_INTERVAL_US
    }
}

/// Clock skew from one heartbeat exchange: the peer's reported clock
/// against the local midpoint of the round trip. Positive means the
/// peer's clock runs ahead. Exact when the path is symmetric; within
/// RTT/2 otherwise.
pub fn estimate_skew_us(local_send_us: u64, peer_clock_us: u64, local_recv_us: u64) -> i64 {
    let midpoint = (local_send_us + local_recv_us) / 2;
    peer_clock_us as i64 - midpoint as i64
}
