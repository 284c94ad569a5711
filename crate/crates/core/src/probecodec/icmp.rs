//! ICMP echo probes.
//!
//! Message layout (network byte order):
//!
//! ```text
//! type(1) code(1) checksum(2) identifier(2) sequence(2)
//! magic(4) measurement_id(4) worker_id(2) tx_time_us(8)
//! ```
//!
//! The 18-byte payload is echoed verbatim by the target, so any worker
//! that captures the reply recovers the full probe identity. The
//! identifier doubles as the flow discriminator and stays fixed per
//! worker; only the sequence, timestamp field and checksum vary
//! between probes.

use crate::domain::{IpVersion, MeasurementSpec, Protocol, TargetAddress, WorkerId};

use super::{check_worker, internet_checksum, CodecError, DecodedReply, EncodedProbe, PROBE_MAGIC};

pub const ICMP_V4_ECHO_REQUEST: u8 = 8;
pub const ICMP_V4_ECHO_REPLY: u8 = 0;
pub const ICMP_V6_ECHO_REQUEST: u8 = 128;
pub const ICMP_V6_ECHO_REPLY: u8 = 129;

const HEADER_LEN: usize = 8;
const PAYLOAD_LEN: usize = 18;
const MESSAGE_LEN: usize = HEADER_LEN + PAYLOAD_LEN;

pub fn encode_icmp(
    spec: &MeasurementSpec,
    target: TargetAddress,
    worker: WorkerId,
    seq: u16,
    tx_time_us: u64,
) -> Result<EncodedProbe, CodecError> {
    let id = check_worker(worker)?;

    let mut msg = Vec::with_capacity(MESSAGE_LEN);
    let request_type = match spec.ip_version {
        IpVersion::V4 => ICMP_V4_ECHO_REQUEST,
        IpVersion::V6 => ICMP_V6_ECHO_REQUEST,
    };
    msg.push(request_type);
    msg.push(0); // code
    msg.extend_from_slice(&[0, 0]); // checksum, patched below
    msg.extend_from_slice(&id.to_be_bytes());
    msg.extend_from_slice(&seq.to_be_bytes());
    msg.extend_from_slice(&PROBE_MAGIC);
    msg.extend_from_slice(&spec.measurement_id.to_be_bytes());
    msg.extend_from_slice(&id.to_be_bytes());
    msg.extend_from_slice(&tx_time_us.to_be_bytes());

    // For IPv4 the checksum covers only the message. The IPv6 variant
    // also covers a pseudo-header with addresses the codec does not
    // know; the sending transport owns it there (the kernel fills it
    // on raw ICMPv6 sockets).
    if spec.ip_version == IpVersion::V4 {
        let ck = internet_checksum(&msg);
        msg[2..4].copy_from_slice(&ck.to_be_bytes());
    }

    Ok(EncodedProbe {
        measurement_id: spec.measurement_id,
        protocol: Protocol::Icmp,
        target,
        tx_worker: worker,
        tx_time_us,
        wire_bytes: msg,
        flow_src_port: id,
        flow_dst_port: 0,
    })
}

pub fn decode_icmp_reply(spec: &MeasurementSpec, payload: &[u8]) -> Option<DecodedReply> {
    if payload.len() < MESSAGE_LEN {
        return None;
    }
    let reply_type = match spec.ip_version {
        IpVersion::V4 => ICMP_V4_ECHO_REPLY,
        IpVersion::V6 => ICMP_V6_ECHO_REPLY,
    };
    if payload[0] != reply_type || payload[1] != 0 {
        return None;
    }
    let body = &payload[HEADER_LEN..];
    if body[0..4] != PROBE_MAGIC {
        return None;
    }
    let measurement_id = u32::from_be_bytes(body[4..8].try_into().unwrap());
    if measurement_id != spec.measurement_id {
        return None;
    }
    let worker = u16::from_be_bytes(body[8..10].try_into().unwrap());
    if worker == 0 {
        return None;
    }
    // The echoed identifier must agree with the payload's worker id;
    // a mismatch means the payload was tampered with or re-used.
    let identifier = u16::from_be_bytes(payload[4..6].try_into().unwrap());
    if identifier != worker {
        return None;
    }
    let tx_time_us = u64::from_be_bytes(body[10..18].try_into().unwrap());
    Some(DecodedReply {
        measurement_id,
        src_worker: WorkerId(worker),
        tx_time_us,
        chaos_value: None,
    })
}

/// What a conformant target sends back: the same message with the type
/// flipped to echo-reply and the checksum redone.
pub fn synthesize_echo_reply(request: &[u8]) -> Vec<u8> {
    let mut reply = request.to_vec();
    if reply.is_empty() {
        return reply;
    }
    reply[0] = match reply[0] {
        ICMP_V6_ECHO_REQUEST => ICMP_V6_ECHO_REPLY,
        _ => ICMP_V4_ECHO_REPLY,
    };
    if reply.len() >= 4 {
        reply[2..4].copy_from_slice(&[0, 0]);
        if reply[0] == ICMP_V4_ECHO_REPLY {
            let ck = internet_checksum(&reply);
            reply[2..4].copy_from_slice(&ck.to_be_bytes());
        }
    }
    reply
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probecodec::tests::{spec, target};
    use crate::probecodec::PendingTable;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_wire_bytes() {
        // measurement 1, worker 5, t=0: the exact 26-byte message.
        let mut s = spec(Protocol::Icmp);
        s.measurement_id = 1;
        let p = encode_icmp(&s, target(), WorkerId(5), 1, 0).unwrap();
        let expected_payload: &[u8] = &[
            0x4c, 0x41, 0x43, 0x53, // magic
            0x00, 0x00, 0x00, 0x01, // measurement id
            0x00, 0x05, // worker id
            0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, // tx time
        ];
        assert_eq!(p.wire_bytes.len(), 26);
        assert_eq!(&p.wire_bytes[8..], expected_payload);
        assert_eq!(p.wire_bytes[0], 8); // echo request
        assert_eq!(&p.wire_bytes[4..6], &[0x00, 0x05]); // identifier
        assert_eq!(&p.wire_bytes[6..8], &[0x00, 0x01]); // sequence
    }

    #[test]
    fn v4_checksum_verifies() {
        let p = encode_icmp(&spec(Protocol::Icmp), target(), WorkerId(5), 9, 123_456).unwrap();
        assert_eq!(internet_checksum(&p.wire_bytes), 0);
    }

    #[test]
    fn roundtrip_through_echo() {
        let s = spec(Protocol::Icmp);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut pending = PendingTable::new();
        for _ in 0..2_000 {
            let worker = WorkerId(rng.gen_range(1..=u16::MAX));
            let t: u64 = rng.gen();
            let seq: u16 = rng.gen();
            let probe = encode_icmp(&s, target(), worker, seq, t).unwrap();
            let reply = synthesize_echo_reply(&probe.wire_bytes);
            let decoded = crate::probecodec::decode_reply(
                &s,
                &reply,
                target().address(),
                &mut pending,
                t + 1,
            )
            .unwrap();
            assert_eq!(decoded.src_worker, worker);
            assert_eq!(decoded.tx_time_us, t);
            assert_eq!(decoded.measurement_id, s.measurement_id);
        }
    }

    #[test]
    fn v6_uses_icmpv6_types() {
        let mut s = spec(Protocol::Icmp);
        s.ip_version = crate::domain::IpVersion::V6;
        let t6 = TargetAddress::of_address("2001:db8::9".parse().unwrap());
        let probe = encode_icmp(&s, t6, WorkerId(3), 0, 77).unwrap();
        assert_eq!(probe.wire_bytes[0], 128);
        let reply = synthesize_echo_reply(&probe.wire_bytes);
        assert_eq!(reply[0], 129);
        let mut pending = PendingTable::new();
        let decoded =
            crate::probecodec::decode_reply(&s, &reply, t6.address(), &mut pending, 100).unwrap();
        assert_eq!(decoded.src_worker, WorkerId(3));
    }

    #[test]
    fn request_type_is_not_a_reply() {
        // Our own outgoing probe must never decode as a reply.
        let s = spec(Protocol::Icmp);
        let probe = encode_icmp(&s, target(), WorkerId(5), 0, 10).unwrap();
        assert!(decode_icmp_reply(&s, &probe.wire_bytes).is_none());
    }

    #[test]
    fn wrong_magic_or_measurement_is_rejected() {
        let s = spec(Protocol::Icmp);
        let probe = encode_icmp(&s, target(), WorkerId(5), 0, 10).unwrap();
        let reply = synthesize_echo_reply(&probe.wire_bytes);

        let mut bad_magic = reply.clone();
        bad_magic[8] ^= 0xff;
        assert!(decode_icmp_reply(&s, &bad_magic).is_none());

        let mut bad_mid = reply.clone();
        bad_mid[12..16].copy_from_slice(&9_999u32.to_be_bytes());
        assert!(decode_icmp_reply(&s, &bad_mid).is_none());

        let mut bad_ident = reply;
        bad_ident[4..6].copy_from_slice(&0x1234u16.to_be_bytes());
        assert!(decode_icmp_reply(&s, &bad_ident).is_none());
    }

    #[test]
    fn truncated_reply_is_rejected() {
        let s = spec(Protocol::Icmp);
        let probe = encode_icmp(&s, target(), WorkerId(5), 0, 10).unwrap();
        let reply = synthesize_echo_reply(&probe.wire_bytes);
        for cut in 0..reply.len() {
            assert!(decode_icmp_reply(&s, &reply[..cut]).is_none());
        }
    }
}
