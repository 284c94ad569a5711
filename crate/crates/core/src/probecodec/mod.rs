//! Probe identity encoding and reply decoding.
//!
//! Every probe carries enough identity for ANY worker to attribute the
//! reply: the measurement id, the sending worker, and the send time.
//! Where the identity rides depends on the protocol, constrained by
//! what targets echo back:
//!
//! * ICMP echo - an 18-byte payload, echoed verbatim.
//! * TCP - the acknowledgement number of a SYN+ACK, echoed as the
//!   sequence number of the elicited RST.
//! * DNS A/AAAA - the query name, echoed in the response question.
//! * DNS CHAOS - nothing echoable beyond the transaction id; identity
//!   is completed from a pending-probe table at the sending worker.
//!
//! Across probes from one worker to one target only payload-level
//! fields vary; the flow 5-tuple stays fixed so per-flow load
//! balancing cannot smear one worker's replies over several paths.
//!
//! Exact wire layouts are documented in `docs/wire-probes.md`.

pub mod dns;
pub mod icmp;
pub mod pending;
pub mod tcp;

use std::net::IpAddr;

use thiserror::Error;

use crate::domain::{MeasurementSpec, Protocol, TargetAddress, WorkerId};

pub use pending::{PendingEntry, PendingTable, PENDING_TTL_US};

/// Fixed magic prefix that marks census probe payloads, so unrelated
/// traffic and self-replies can never be confused with a reply.
pub const PROBE_MAGIC: [u8; 4] = [0x4c, 0x41, 0x43, 0x53];

/// Base of the per-worker source-port range: port = BASE + worker_id.
pub const SRC_PORT_BASE: u16 = 49152;

/// Workers that fit the 6-bit field of the TCP acknowledgement
/// encoding: ids 1 through 63.
pub const TCP_MAX_WORKER_ID: u16 = 63;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("worker id {0} does not fit the 6-bit TCP identity field (max 63)")]
    WorkerIdOverflow(u16),
    #[error("worker id {0} does not fit the source-port range")]
    SrcPortOverflow(u16),
    #[error("worker id 0 is reserved and cannot probe")]
    ReservedWorkerId,
    #[error("query name would be {0} bytes, limit 253")]
    QnameTooLong(usize),
    #[error("dns_probe_domain required to encode DNS_A probes")]
    MissingProbeDomain,
}

/// One encoded probe: the transport payload (above the IP layer) plus
/// the flow identity the transports and the simulator route by.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedProbe {
    pub protocol: Protocol,
    pub target: TargetAddress,
    pub measurement_id: u32,
    pub tx_worker: WorkerId,
    pub tx_time_us: u64,
    /// ICMP message, TCP header, or DNS message, network byte order.
    pub wire_bytes: Vec<u8>,
    /// Flow 5-tuple ports. For ICMP the identifier stands in for the
    /// source port, as per-flow hashers commonly treat it.
    pub flow_src_port: u16,
    pub flow_dst_port: u16,
}

/// Identity recovered from one reply.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedReply {
    pub measurement_id: u32,
    pub src_worker: WorkerId,
    /// Send time in microseconds. TCP only encodes milliseconds mod
    /// 2^26; it is re-expanded against the capture time.
    pub tx_time_us: u64,
    /// TXT value carried by a CHAOS answer, when present.
    pub chaos_value: Option<String>,
}

fn check_worker(worker: WorkerId) -> Result<u16, CodecError> {
    if worker.is_unknown() {
        return Err(CodecError::ReservedWorkerId);
    }
    Ok(worker.0)
}

/// The source port a worker owns for TCP and DNS probes.
pub fn worker_src_port(worker: WorkerId) -> Result<u16, CodecError> {
    let id = check_worker(worker)?;
    SRC_PORT_BASE
        .checked_add(id)
        .ok_or(CodecError::SrcPortOverflow(id))
}

/// Encodes one probe for the spec's protocol. `icmp_seq` is the low 16
/// bits of the worker's per-probe counter; other protocols ignore it.
pub fn encode_probe(
    spec: &MeasurementSpec,
    target: TargetAddress,
    worker: WorkerId,
    icmp_seq: u16,
    tx_time_us: u64,
) -> Result<EncodedProbe, CodecError> {
    match spec.protocol {
        Protocol::Icmp => icmp::encode_icmp(spec, target, worker, icmp_seq, tx_time_us),
        Protocol::Tcp => tcp::encode_tcp(spec, target, worker, tx_time_us),
        Protocol::DnsA => dns::encode_dns_a(spec, target, worker, tx_time_us),
        Protocol::DnsChaos => dns::encode_dns_chaos(spec, target, worker, tx_time_us),
    }
}

/// Attributes a captured transport payload to a probe of the ongoing
/// measurement. Returns `None` for anything that is not a valid reply
/// to this measurement: wrong magic, wrong measurement id, malformed
/// packets, unrelated traffic. Never panics, whatever the bytes.
///
/// `src` is the address the payload arrived from (the probed target,
/// for a genuine reply); `now_us` is the capture time on the local
/// clock, used for TCP timestamp expansion and pending-table expiry.
pub fn decode_reply(
    spec: &MeasurementSpec,
    payload: &[u8],
    src: IpAddr,
    pending: &mut PendingTable,
    now_us: u64,
) -> Option<DecodedReply> {
    match spec.protocol {
        Protocol::Icmp => icmp::decode_icmp_reply(spec, payload),
        Protocol::Tcp => tcp::decode_tcp_reply(spec, payload, now_us),
        Protocol::DnsA => dns::decode_dns_a_reply(spec, payload),
        Protocol::DnsChaos => dns::decode_dns_chaos_reply(spec, payload, src, pending, now_us),
    }
}

/// Records sender-side state for protocols whose replies carry no
/// identity of their own. Only CHAOS needs it: the response echoes
/// nothing but the transaction id, so attribution goes through this
/// table. Echo-identified protocols are a no-op.
pub fn register_pending(pending: &mut PendingTable, probe: &EncodedProbe, now_us: u64) {
    if probe.protocol == Protocol::DnsChaos {
        pending.insert(
            probe.target.address(),
            u32::from(probe.tx_worker.0),
            PendingEntry {
                measurement_id: probe.measurement_id,
                worker: probe.tx_worker,
                tx_time_us: probe.tx_time_us,
            },
            now_us,
        );
    }
}

/// Builds the payload a well-behaved target would send back for a
/// probe: an echo reply, an RST, or a DNS response. The simulator and
/// loopback tests stand on this; it is also the executable statement
/// of what each protocol echoes.
pub fn synthesize_reply(probe: &EncodedProbe, chaos_value: Option<&str>) -> Vec<u8> {
    match probe.protocol {
        Protocol::Icmp => icmp::synthesize_echo_reply(&probe.wire_bytes),
        Protocol::Tcp => tcp::synthesize_rst(&probe.wire_bytes),
        Protocol::DnsA => dns::synthesize_a_response(&probe.wire_bytes, probe.target.address()),
        Protocol::DnsChaos => dns::synthesize_chaos_response(&probe.wire_bytes, chaos_value),
    }
}

/// RFC 1071 internet checksum.
pub(crate) fn internet_checksum(bytes: &[u8]) -> u16 {
    let mut sum: u32 = 0;
    let mut chunks = bytes.chunks_exact(2);
    for c in &mut chunks {
        sum += u32::from(u16::from_be_bytes([c[0], c[1]]));
    }
    if let [last] = chunks.remainder() {
        sum += u32::from(u16::from_be_bytes([*last, 0]));
    }
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}
