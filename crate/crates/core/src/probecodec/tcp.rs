//! TCP probes: an unsolicited SYN+ACK that elicits an RST.
//!
//! A host receiving a SYN+ACK for a connection it never opened answers
//! with an RST whose sequence number equals the acknowledgement number
//! it was sent. That 32-bit field is the only thing echoed, so the
//! probe identity is packed into it:
//!
//! ```text
//! ack = worker_id(6 bits) || (tx_time_us / 1000) mod 2^26
//! ```
//!
//! 6 bits of worker id caps TCP deployments at 63 workers; 26 bits of
//! milliseconds wrap every ~18.6 hours and are re-expanded against the
//! capture clock. The segment is a bare 20-byte header; the source
//! port is the worker's fixed port, so the flow identity never moves
//! between probes.

use crate::domain::{MeasurementSpec, Protocol, TargetAddress, WorkerId};

use super::{worker_src_port, CodecError, DecodedReply, EncodedProbe, TCP_MAX_WORKER_ID};

const HEADER_LEN: usize = 20;
const FLAG_FIN: u8 = 0x01;
const FLAG_SYN: u8 = 0x02;
const FLAG_RST: u8 = 0x04;
const FLAG_ACK: u8 = 0x10;

/// Milliseconds field width in the acknowledgement encoding.
const MS_BITS: u32 = 26;
const MS_MASK: u32 = (1 << MS_BITS) - 1;

/// Packs worker id and send time into the acknowledgement number.
pub fn pack_ack(worker: WorkerId, tx_time_us: u64) -> Result<u32, CodecError> {
    if worker.is_unknown() {
        return Err(CodecError::ReservedWorkerId);
    }
    if worker.0 > TCP_MAX_WORKER_ID {
        return Err(CodecError::WorkerIdOverflow(worker.0));
    }
    let ms = ((tx_time_us / 1000) as u32) & MS_MASK;
    Ok((u32::from(worker.0) << MS_BITS) | ms)
}

/// Splits an echoed acknowledgement back into (worker, ms mod 2^26).
pub fn unpack_ack(ack: u32) -> (u16, u32) {
    ((ack >> MS_BITS) as u16, ack & MS_MASK)
}

/// Re-expands a truncated millisecond timestamp to absolute
/// microseconds: the latest time at or before `now_us` whose
/// millisecond value is congruent to `ms26` mod 2^26.
pub fn expand_tx_time(ms26: u32, now_us: u64) -> u64 {
    let now_ms = now_us / 1000;
    let delta = (now_ms.wrapping_sub(u64::from(ms26))) & u64::from(MS_MASK);
    // A claimed send time later than now (hostile or skewed) would
    // reach before the epoch; saturate rather than trust it.
    now_ms.saturating_sub(delta) * 1000
}

pub fn encode_tcp(
    spec: &MeasurementSpec,
    target: TargetAddress,
    worker: WorkerId,
    tx_time_us: u64,
) -> Result<EncodedProbe, CodecError> {
    let ack = pack_ack(worker, tx_time_us)?;
    let src_port = worker_src_port(worker)?;

    let mut seg = Vec::with_capacity(HEADER_LEN);
    seg.extend_from_slice(&src_port.to_be_bytes());
    seg.extend_from_slice(&spec.tcp_dst_port.to_be_bytes());
    seg.extend_from_slice(&0u32.to_be_bytes()); // sequence: no data follows
    seg.extend_from_slice(&ack.to_be_bytes());
    seg.push(5 << 4); // data offset 5 words, no options
    seg.push(FLAG_SYN | FLAG_ACK);
    seg.extend_from_slice(&1024u16.to_be_bytes()); // window
    seg.extend_from_slice(&[0, 0]); // checksum: pseudo-header is the transport's
    seg.extend_from_slice(&[0, 0]); // urgent pointer

    Ok(EncodedProbe {
        measurement_id: spec.measurement_id,
        protocol: Protocol::Tcp,
        target,
        tx_worker: worker,
        tx_time_us,
        wire_bytes: seg,
        flow_src_port: src_port,
        flow_dst_port: spec.tcp_dst_port,
    })
}

pub fn decode_tcp_reply(spec: &MeasurementSpec, payload: &[u8], now_us: u64) -> Option<DecodedReply> {
    if payload.len() < HEADER_LEN {
        return None;
    }
    let src_port = u16::from_be_bytes(payload[0..2].try_into().unwrap());
    let dst_port = u16::from_be_bytes(payload[2..4].try_into().unwrap());
    let seq = u32::from_be_bytes(payload[4..8].try_into().unwrap());
    let flags = payload[13];
    if flags & FLAG_RST == 0 || flags & (FLAG_SYN | FLAG_FIN) != 0 {
        return None;
    }
    // The RST answers our SYN+ACK: it originates at the probed port
    // and lands on the sending worker's fixed source port.
    if src_port != spec.tcp_dst_port {
        return None;
    }
    let (worker, ms26) = unpack_ack(seq);
    if worker == 0 || worker > TCP_MAX_WORKER_ID {
        return None;
    }
    // The port the RST arrived on must belong to the worker the
    // sequence number claims; anything else is not our probe.
    if dst_port != worker_src_port(WorkerId(worker)).ok()? {
        return None;
    }
    Some(DecodedReply {
        measurement_id: spec.measurement_id,
        src_worker: WorkerId(worker),
        tx_time_us: expand_tx_time(ms26, now_us),
        chaos_value: None,
    })
}

/// The RST a host with no matching connection sends back.
pub fn synthesize_rst(request: &[u8]) -> Vec<u8> {
    if request.len() < HEADER_LEN {
        return Vec::new();
    }
    let src_port = &request[0..2];
    let dst_port = &request[2..4];
    let ack = &request[8..12];

    let mut rst = Vec::with_capacity(HEADER_LEN);
    rst.extend_from_slice(dst_port); // swap the ports
    rst.extend_from_slice(src_port);
    rst.extend_from_slice(ack); // seq := incoming ack
    rst.extend_from_slice(&0u32.to_be_bytes());
    rst.push(5 << 4);
    rst.push(FLAG_RST);
    rst.extend_from_slice(&0u16.to_be_bytes());
    rst.extend_from_slice(&[0, 0]);
    rst.extend_from_slice(&[0, 0]);
    rst
}
