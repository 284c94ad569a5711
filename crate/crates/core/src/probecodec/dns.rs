//! DNS probes, two modes.
//!
//! A/AAAA mode encodes the probe identity into the query name itself:
//!
//! ```text
//! <measurement_id hex>-<worker_id hex>-<tx_time_us hex>.<probe domain>
//! ```
//!
//! Resolvers echo the question in their response, so identity survives
//! a cross-site capture. The transaction id additionally carries the
//! worker id.
//!
//! CHAOS mode asks `hostname.bind TXT` in class CH (the classic
//! server-instance identity query). The name is fixed, so the only
//! identity on the wire is the transaction id; attribution goes
//! through the sender's pending-probe table keyed (target, txid), and
//! the TXT value of the answer is recorded for site fingerprinting.

use std::net::IpAddr;

use crate::domain::{IpVersion, MeasurementSpec, Protocol, TargetAddress, WorkerId};

use super::{
    check_worker, worker_src_port, CodecError, DecodedReply, EncodedProbe, PendingTable,
};

pub const DNS_PORT: u16 = 53;

const QTYPE_A: u16 = 1;
const QTYPE_TXT: u16 = 16;
const QTYPE_AAAA: u16 = 28;
const QCLASS_IN: u16 = 1;
const QCLASS_CH: u16 = 3;

const FLAG_RESPONSE: u16 = 0x8000;
const FLAG_RD: u16 = 0x0100;

/// Longest query name on the wire, per the DNS specification.
const MAX_QNAME: usize = 253;

pub const CHAOS_QNAME: &str = "hostname.bind";

/// The identity-bearing query name for A/AAAA probes.
pub fn probe_qname(
    measurement_id: u32,
    worker: WorkerId,
    tx_time_us: u64,
    domain: &str,
) -> Result<String, CodecError> {
    let name = format!("{measurement_id:x}-{:x}-{tx_time_us:x}.{domain}", worker.0);
    if name.len() > MAX_QNAME {
        return Err(CodecError::QnameTooLong(name.len()));
    }
    Ok(name)
}

fn parse_probe_qname(qname: &str, domain: &str) -> Option<(u32, u16, u64)> {
    let rest = qname
        .strip_suffix(domain)
        .or_else(|| {
            // Domains compare case-insensitively.
            if qname.len() > domain.len()
                && qname[qname.len() - domain.len()..].eq_ignore_ascii_case(domain)
            {
                Some(&qname[..qname.len() - domain.len()])
            } else {
                None
            }
        })?
        .strip_suffix('.')?;
    let mut parts = rest.split('-');
    let mid = u32::from_str_radix(parts.next()?, 16).ok()?;
    let worker = u16::from_str_radix(parts.next()?, 16).ok()?;
    let tx = u64::from_str_radix(parts.next()?, 16).ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some((mid, worker, tx))
}

fn encode_name(name: &str, out: &mut Vec<u8>) -> Result<(), CodecError> {
    if name.len() > MAX_QNAME {
        return Err(CodecError::QnameTooLong(name.len()));
    }
    for label in name.split('.') {
        if label.is_empty() || label.len() > 63 {
            return Err(CodecError::QnameTooLong(name.len()));
        }
        out.push(label.len() as u8);
        out.extend_from_slice(label.as_bytes());
    }
    out.push(0);
    Ok(())
}

fn build_query(txid: u16, qname: &str, qtype: u16, qclass: u16) -> Result<Vec<u8>, CodecError> {
    let mut msg = Vec::with_capacity(12 + qname.len() + 6);
    msg.extend_from_slice(&txid.to_be_bytes());
    msg.extend_from_slice(&FLAG_RD.to_be_bytes());
    msg.extend_from_slice(&1u16.to_be_bytes()); // qdcount
    msg.extend_from_slice(&[0, 0, 0, 0, 0, 0]); // an/ns/ar counts
    encode_name(qname, &mut msg)?;
    msg.extend_from_slice(&qtype.to_be_bytes());
    msg.extend_from_slice(&qclass.to_be_bytes());
    Ok(msg)
}

pub fn encode_dns_a(
    spec: &MeasurementSpec,
    target: TargetAddress,
    worker: WorkerId,
    tx_time_us: u64,
) -> Result<EncodedProbe, CodecError> {
    let id = check_worker(worker)?;
    let domain = spec
        .dns_probe_domain
        .as_deref()
        .ok_or(CodecError::MissingProbeDomain)?;
    let qname = probe_qname(spec.measurement_id, worker, tx_time_us, domain)?;
    let qtype = match spec.ip_version {
        IpVersion::V4 => QTYPE_A,
        IpVersion::V6 => QTYPE_AAAA,
    };
    let msg = build_query(id, &qname, qtype, QCLASS_IN)?;
    Ok(EncodedProbe {
        measurement_id: spec.measurement_id,
        protocol: Protocol::DnsA,
        target,
        tx_worker: worker,
        tx_time_us,
        wire_bytes: msg,
        flow_src_port: worker_src_port(worker)?,
        flow_dst_port: DNS_PORT,
    })
}

pub fn encode_dns_chaos(
    spec: &MeasurementSpec,
    target: TargetAddress,
    worker: WorkerId,
    tx_time_us: u64,
) -> Result<EncodedProbe, CodecError> {
    let id = check_worker(worker)?;
    let msg = build_query(id, CHAOS_QNAME, QTYPE_TXT, QCLASS_CH)?;
    Ok(EncodedProbe {
        measurement_id: spec.measurement_id,
        protocol: Protocol::DnsChaos,
        target,
        tx_worker: worker,
        tx_time_us,
        wire_bytes: msg,
        flow_src_port: worker_src_port(worker)?,
        flow_dst_port: DNS_PORT,
    })
}

/// Minimal bounds-checked DNS message view. Parsing failures are
/// `None`; nothing here can panic on arbitrary bytes.
struct DnsMessage<'a> {
    bytes: &'a [u8],
}

struct Question {
    qname: String,
    qtype: u16,
    qclass: u16,
    /// Offset just past the question section.
    end: usize,
}

impl<'a> DnsMessage<'a> {
    fn new(bytes: &'a [u8]) -> Option<Self> {
        if bytes.len() < 12 {
            return None;
        }
        Some(DnsMessage { bytes })
    }

    fn txid(&self) -> u16 {
        u16::from_be_bytes([self.bytes[0], self.bytes[1]])
    }

    fn flags(&self) -> u16 {
        u16::from_be_bytes([self.bytes[2], self.bytes[3]])
    }

    fn is_response(&self) -> bool {
        self.flags() & FLAG_RESPONSE != 0
    }

    fn qdcount(&self) -> u16 {
        u16::from_be_bytes([self.bytes[4], self.bytes[5]])
    }

    fn ancount(&self) -> u16 {
        u16::from_be_bytes([self.bytes[6], self.bytes[7]])
    }

    /// Reads the (dot-joined, lowercased) name at `offset`. Follows
    /// compression pointers with a hop budget so crafted loops
    /// terminate. Returns the name and the offset just past it in the
    /// original (unjumped) stream.
    fn read_name(&self, offset: usize) -> Option<(String, usize)> {
        let mut name = String::new();
        let mut pos = offset;
        let mut end_before_jump: Option<usize> = None;
        let mut hops = 0;
        loop {
            let len = *self.bytes.get(pos)?;
            if len & 0xc0 == 0xc0 {
                let lo = *self.bytes.get(pos + 1)?;
                if end_before_jump.is_none() {
                    end_before_jump = Some(pos + 2);
                }
                pos = usize::from(u16::from_be_bytes([len & 0x3f, lo]));
                hops += 1;
                if hops > 8 {
                    return None;
                }
                continue;
            }
            if len & 0xc0 != 0 {
                return None;
            }
            if len == 0 {
                pos += 1;
                break;
            }
            let label = self.bytes.get(pos + 1..pos + 1 + usize::from(len))?;
            if !name.is_empty() {
                name.push('.');
            }
            for b in label {
                name.push(b.to_ascii_lowercase() as char);
            }
            if name.len() > MAX_QNAME {
                return None;
            }
            pos += 1 + usize::from(len);
        }
        Some((name, end_before_jump.unwrap_or(pos)))
    }

    fn question(&self) -> Option<Question> {
        if self.qdcount() != 1 {
            return None;
        }
        let (qname, after_name) = self.read_name(12)?;
        let qtype_bytes = self.bytes.get(after_name..after_name + 2)?;
        let qclass_bytes = self.bytes.get(after_name + 2..after_name + 4)?;
        Some(Question {
            qname,
            qtype: u16::from_be_bytes([qtype_bytes[0], qtype_bytes[1]]),
            qclass: u16::from_be_bytes([qclass_bytes[0], qclass_bytes[1]]),
            end: after_name + 4,
        })
    }

    /// First TXT string in the answer section, if any.
    fn first_txt(&self, answers_start: usize) -> Option<String> {
        let mut pos = answers_start;
        for _ in 0..self.ancount() {
            let (_, after_name) = self.read_name(pos)?;
            let fixed = self.bytes.get(after_name..after_name + 10)?;
            let rtype = u16::from_be_bytes([fixed[0], fixed[1]]);
            let rdlength = usize::from(u16::from_be_bytes([fixed[8], fixed[9]]));
            let rdata = self.bytes.get(after_name + 10..after_name + 10 + rdlength)?;
            if rtype == QTYPE_TXT && !rdata.is_empty() {
                let txt_len = usize::from(rdata[0]);
                let txt = rdata.get(1..1 + txt_len)?;
                return Some(String::from_utf8_lossy(txt).into_owned());
            }
            pos = after_name + 10 + rdlength;
        }
        None
    }
}

pub fn decode_dns_a_reply(spec: &MeasurementSpec, payload: &[u8]) -> Option<DecodedReply> {
    let msg = DnsMessage::new(payload)?;
    if !msg.is_response() {
        return None;
    }
    let q = msg.question()?;
    let want_qtype = match spec.ip_version {
        IpVersion::V4 => QTYPE_A,
        IpVersion::V6 => QTYPE_AAAA,
    };
    if q.qtype != want_qtype || q.qclass != QCLASS_IN {
        return None;
    }
    let domain = spec.dns_probe_domain.as_deref()?;
    let (mid, worker, tx_time_us) =
        parse_probe_qname(&q.qname, &domain.to_ascii_lowercase())?;
    if mid != spec.measurement_id || worker == 0 {
        return None;
    }
    // The transaction id must agree with the name's worker field.
    if msg.txid() != worker {
        return None;
    }
    Some(DecodedReply {
        measurement_id: mid,
        src_worker: WorkerId(worker),
        tx_time_us,
        chaos_value: None,
    })
}

pub fn decode_dns_chaos_reply(
    spec: &MeasurementSpec,
    payload: &[u8],
    src: IpAddr,
    pending: &mut PendingTable,
    now_us: u64,
) -> Option<DecodedReply> {
    let msg = DnsMessage::new(payload)?;
    if !msg.is_response() {
        return None;
    }
    let q = msg.question()?;
    if q.qtype != QTYPE_TXT || q.qclass != QCLASS_CH || q.qname != CHAOS_QNAME {
        return None;
    }
    // All identity lives in the pending entry registered at send time.
    let entry = pending.take(src, u32::from(msg.txid()), now_us)?;
    if entry.measurement_id != spec.measurement_id {
        return None;
    }
    Some(DecodedReply {
        measurement_id: entry.measurement_id,
        src_worker: entry.worker,
        tx_time_us: entry.tx_time_us,
        chaos_value: msg.first_txt(q.end),
    })
}

/// A response echoing the question, with one A/AAAA answer pointing
/// back at the answering address.
pub fn synthesize_a_response(query: &[u8], answer_addr: IpAddr) -> Vec<u8> {
    let Some(msg) = DnsMessage::new(query) else {
        return Vec::new();
    };
    let Some(q) = msg.question() else {
        return Vec::new();
    };
    let mut out = query[..q.end].to_vec();
    out[2..4].copy_from_slice(&(FLAG_RESPONSE | FLAG_RD).to_be_bytes());
    out[6..8].copy_from_slice(&1u16.to_be_bytes()); // ancount
    out.extend_from_slice(&[0xc0, 0x0c]); // name: pointer to the question
    let (rtype, rdata): (u16, Vec<u8>) = match answer_addr {
        IpAddr::V4(a) => (QTYPE_A, a.octets().to_vec()),
        IpAddr::V6(a) => (QTYPE_AAAA, a.octets().to_vec()),
    };
    out.extend_from_slice(&rtype.to_be_bytes());
    out.extend_from_slice(&QCLASS_IN.to_be_bytes());
    out.extend_from_slice(&60u32.to_be_bytes()); // ttl
    out.extend_from_slice(&(rdata.len() as u16).to_be_bytes());
    out.extend_from_slice(&rdata);
    out
}

/// A CHAOS response carrying the server's identity as a TXT answer,
/// or an answerless response when the server declines to say.
pub fn synthesize_chaos_response(query: &[u8], chaos_value: Option<&str>) -> Vec<u8> {
    let Some(msg) = DnsMessage::new(query) else {
        return Vec::new();
    };
    let Some(q) = msg.question() else {
        return Vec::new();
    };
    let mut out = query[..q.end].to_vec();
    out[2..4].copy_from_slice(&FLAG_RESPONSE.to_be_bytes());
    match chaos_value {
        None => out,
        Some(value) => {
            out[6..8].copy_from_slice(&1u16.to_be_bytes());
            out.extend_from_slice(&[0xc0, 0x0c]);
            out.extend_from_slice(&QTYPE_TXT.to_be_bytes());
            out.extend_from_slice(&QCLASS_CH.to_be_bytes());
            out.extend_from_slice(&0u32.to_be_bytes());
            let txt = value.as_bytes();
            let txt = &txt[..txt.len().min(255)];
            out.extend_from_slice(&((txt.len() + 1) as u16).to_be_bytes());
            out.push(txt.len() as u8);
            out.extend_from_slice(txt);
            out
        }
    }
}
