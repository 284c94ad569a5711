//! Core measurement-plane types: prefixes, targets, worker identity,
//! measurement specifications, probe replies, and RTT extraction.
//!
//! All timestamps in this crate are microseconds since the Unix epoch
//! carried as `u64`. In simulation the epoch is virtual (starts at 0);
//! the arithmetic is identical either way.

use std::collections::BTreeMap;
use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Census granularity for IPv4: one representative address per /24.
pub const DEFAULT_V4_PREFIX_LEN: u8 = 24;
/// Census granularity for IPv6: one representative address per /48.
pub const DEFAULT_V6_PREFIX_LEN: u8 = 48;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("prefix length {len} out of range [{min}, {max}] for {family}")]
    PrefixLenOutOfRange {
        len: u8,
        min: u8,
        max: u8,
        family: &'static str,
    },
    #[error("invalid prefix {0:?}, expected address/length")]
    PrefixSyntax(String),
    #[error("address {addr} is outside prefix {prefix}")]
    AddressOutsidePrefix { addr: IpAddr, prefix: Prefix },
    #[error("latitude {0} out of range [-90, 90]")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} out of range [-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("rate_pps must be positive")]
    ZeroRate,
    #[error("worker list must not be empty")]
    NoWorkers,
    #[error("worker id 0 is reserved")]
    ReservedWorkerId,
    #[error("duplicate worker id {0} in worker list")]
    DuplicateWorker(WorkerId),
    #[error("dns_probe_domain is required for DNS_A measurements")]
    MissingProbeDomain,
    #[error("rtt must be positive")]
    NonPositiveRtt,
    #[error("rtt samples require a same-worker reply")]
    CrossSiteRtt,
}

/// IP version of a prefix, address, or measurement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum IpVersion {
    V4,
    V6,
}

impl IpVersion {
    pub fn of(addr: IpAddr) -> Self {
        match addr {
            IpAddr::V4(_) => IpVersion::V4,
            IpAddr::V6(_) => IpVersion::V6,
        }
    }
}

impl From<IpVersion> for u8 {
    fn from(v: IpVersion) -> u8 {
        match v {
            IpVersion::V4 => 4,
            IpVersion::V6 => 6,
        }
    }
}

impl TryFrom<u8> for IpVersion {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            4 => Ok(IpVersion::V4),
            6 => Ok(IpVersion::V6),
            other => Err(format!("ip version must be 4 or 6, got {other}")),
        }
    }
}

impl fmt::Display for IpVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

/// Probe protocol of a measurement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Protocol {
    Icmp,
    Tcp,
    DnsA,
    DnsChaos,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::Icmp,
        Protocol::Tcp,
        Protocol::DnsA,
        Protocol::DnsChaos,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Icmp => "ICMP",
            Protocol::Tcp => "TCP",
            Protocol::DnsA => "DNS_A",
            Protocol::DnsChaos => "DNS_CHAOS",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "ICMP" => Ok(Protocol::Icmp),
            "TCP" => Ok(Protocol::Tcp),
            "DNS_A" => Ok(Protocol::DnsA),
            "DNS_CHAOS" => Ok(Protocol::DnsChaos),
            other => Err(format!(
                "unknown protocol {other:?}, expected icmp, tcp, dns-a, or dns-chaos"
            )),
        }
    }
}

/// Whether probes are emitted from the shared anycast address or the
/// worker's own unicast address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SourceMode {
    Anycast,
    Unicast,
}

impl fmt::Display for SourceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceMode::Anycast => write!(f, "ANYCAST"),
            SourceMode::Unicast => write!(f, "UNICAST"),
        }
    }
}

impl FromStr for SourceMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "anycast" => Ok(SourceMode::Anycast),
            "unicast" => Ok(SourceMode::Unicast),
            other => Err(format!("unknown source mode {other:?}")),
        }
    }
}

/// A census prefix: the unit of measurement and publication.
///
/// The base address is always the network address; construction masks
/// any host bits, so normalisation is idempotent by definition.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Prefix {
    base: IpAddr,
    len: u8,
}

fn mask_v4(addr: Ipv4Addr, len: u8) -> Ipv4Addr {
    let mask = if len == 0 { 0 } else { u32::MAX << (32 - u32::from(len)) };
    Ipv4Addr::from(u32::from(addr) & mask)
}

fn mask_v6(addr: Ipv6Addr, len: u8) -> Ipv6Addr {
    let mask = if len == 0 { 0 } else { u128::MAX << (128 - u32::from(len)) };
    Ipv6Addr::from(u128::from(addr) & mask)
}

impl Prefix {
    /// Builds a prefix from any covered address; host bits are masked off.
    ///
    /// Lengths are confined to [8, 32] for IPv4 and [16, 64] for IPv6:
    /// shorter would aggregate unrelated networks, longer is finer than
    /// anything the census emits.
    pub fn new(addr: IpAddr, len: u8) -> Result<Self, DomainError> {
        match addr {
            IpAddr::V4(a) => {
                if !(8..=32).contains(&len) {
                    return Err(DomainError::PrefixLenOutOfRange {
                        len,
                        min: 8,
                        max: 32,
                        family: "IPv4",
                    });
                }
                Ok(Prefix {
                    base: IpAddr::V4(mask_v4(a, len)),
                    len,
                })
            }
            IpAddr::V6(a) => {
                if !(16..=64).contains(&len) {
                    return Err(DomainError::PrefixLenOutOfRange {
                        len,
                        min: 16,
                        max: 64,
                        family: "IPv6",
                    });
                }
                Ok(Prefix {
                    base: IpAddr::V6(mask_v6(a, len)),
                    len,
                })
            }
        }
    }

    /// The census prefix covering `addr` at the default granularity
    /// (/24 for IPv4, /48 for IPv6).
    pub fn of_address(addr: IpAddr) -> Self {
        let len = match addr {
            IpAddr::V4(_) => DEFAULT_V4_PREFIX_LEN,
            IpAddr::V6(_) => DEFAULT_V6_PREFIX_LEN,
        };
        Prefix::new(addr, len).expect("default lengths are always in range")
    }

    pub fn base(&self) -> IpAddr {
        self.base
    }

    pub fn len(&self) -> u8 {
        self.len
    }

    pub fn ip_version(&self) -> IpVersion {
        IpVersion::of(self.base)
    }

    pub fn contains(&self, addr: IpAddr) -> bool {
        match (self.base, addr) {
            (IpAddr::V4(_), IpAddr::V4(a)) => IpAddr::V4(mask_v4(a, self.len)) == self.base,
            (IpAddr::V6(_), IpAddr::V6(a)) => IpAddr::V6(mask_v6(a, self.len)) == self.base,
            _ => false,
        }
    }

    /// Every address covered by an IPv4 prefix, in order. IPv6 prefixes
    /// are not enumerable at census granularity; callers sweep those
    /// from explicit address lists.
    pub fn v4_addresses(&self) -> Option<impl Iterator<Item = IpAddr>> {
        match self.base {
            IpAddr::V4(base) => {
                let start = u32::from(base);
                let count = 1u64 << (32 - u32::from(self.len));
                Some((0..count).map(move |i| IpAddr::V4(Ipv4Addr::from(start + i as u32))))
            }
            IpAddr::V6(_) => None,
        }
    }
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.base, self.len)
    }
}

impl fmt::Debug for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl FromStr for Prefix {
    type Err = DomainError;
    fn from_str(s: &str) -> Result<Self, DomainError> {
        let (addr_s, len_s) = s
            .split_once('/')
            .ok_or_else(|| DomainError::PrefixSyntax(s.to_string()))?;
        let addr: IpAddr = addr_s
            .parse()
            .map_err(|_| DomainError::PrefixSyntax(s.to_string()))?;
        let len: u8 = len_s
            .parse()
            .map_err(|_| DomainError::PrefixSyntax(s.to_string()))?;
        Prefix::new(addr, len)
    }
}

impl Serialize for Prefix {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Prefix {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A probe destination: a concrete address together with the census
/// prefix it represents. The address is always inside the prefix.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawTargetAddress", into = "RawTargetAddress")]
pub struct TargetAddress {
    prefix: Prefix,
    address: IpAddr,
}

#[derive(Serialize, Deserialize)]
struct RawTargetAddress {
    prefix: Prefix,
    address: IpAddr,
}

impl From<TargetAddress> for RawTargetAddress {
    fn from(t: TargetAddress) -> Self {
        RawTargetAddress {
            prefix: t.prefix,
            address: t.address,
        }
    }
}

impl TryFrom<RawTargetAddress> for TargetAddress {
    type Error = DomainError;
    fn try_from(raw: RawTargetAddress) -> Result<Self, DomainError> {
        TargetAddress::new(raw.prefix, raw.address)
    }
}

impl TargetAddress {
    pub fn new(prefix: Prefix, address: IpAddr) -> Result<Self, DomainError> {
        if !prefix.contains(address) {
            return Err(DomainError::AddressOutsidePrefix {
                addr: address,
                prefix,
            });
        }
        Ok(TargetAddress { prefix, address })
    }

    /// Target at the default census granularity for the address family.
    pub fn of_address(address: IpAddr) -> Self {
        TargetAddress {
            prefix: Prefix::of_address(address),
            address,
        }
    }

    pub fn prefix(&self) -> Prefix {
        self.prefix
    }

    pub fn address(&self) -> IpAddr {
        self.address
    }
}

impl fmt::Display for TargetAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.address)
    }
}

impl fmt::Debug for TargetAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} in {}", self.address, self.prefix)
    }
}

/// Identifies one worker in the deployment. Id 0 is reserved for
/// "unknown" (e.g. a reply whose origin could not be decoded).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct WorkerId(pub u16);

// Hand-rolled so a WorkerId also parses from a string: JSON map keys
// are always strings, and buffered deserializers (tagged enums,
// Value) hand them over verbatim instead of converting.
impl<'de> serde::Deserialize<'de> for WorkerId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct IdVisitor;
        impl serde::de::Visitor<'_> for IdVisitor {
            type Value = WorkerId;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a worker id (u16, possibly as a map-key string)")
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<WorkerId, E> {
                u16::try_from(v)
                    .map(WorkerId)
                    .map_err(|_| E::custom(format!("worker id {v} out of range")))
            }

            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<WorkerId, E> {
                u16::try_from(v)
                    .map(WorkerId)
                    .map_err(|_| E::custom(format!("worker id {v} out of range")))
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<WorkerId, E> {
                v.parse::<u16>()
                    .map(WorkerId)
                    .map_err(|_| E::custom(format!("worker id {v:?} is not a u16")))
            }
        }
        deserializer.deserialize_any(IdVisitor)
    }
}

impl WorkerId {
    pub const UNKNOWN: WorkerId = WorkerId(0);

    pub fn is_unknown(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One deployed worker: where it sits and which addresses it probes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VantagePoint {
    pub worker_id: WorkerId,
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    pub unicast_address: IpAddr,
    pub anycast_address: IpAddr,
}

impl VantagePoint {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.worker_id.is_unknown() {
            return Err(DomainError::ReservedWorkerId);
        }
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(DomainError::LatitudeOutOfRange(self.lat));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(DomainError::LongitudeOutOfRange(self.lon));
        }
        Ok(())
    }

    pub fn location(&self) -> crate::gcd::geo::GeoPoint {
        crate::gcd::geo::GeoPoint { lat: self.lat, lon: self.lon }
    }
}

/// Destination port TCP probes aim at: high and unassigned, so probes
/// are overwhelmingly answered with RST rather than SYN-ACK.
pub const DEFAULT_TCP_DST_PORT: u16 = 62222;

fn default_offset_ms() -> u32 {
    1000
}

fn default_tcp_dst_port() -> u16 {
    DEFAULT_TCP_DST_PORT
}

/// Everything a worker needs to know to probe: what, how fast, from
/// which source, and in which per-worker stagger.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementSpec {
    pub measurement_id: u32,
    pub protocol: Protocol,
    pub ip_version: IpVersion,
    pub source_mode: SourceMode,
    /// Aggregate probing rate across the hitlist, in probes per second
    /// per worker stream.
    pub rate_pps: u32,
    /// Stagger between consecutive workers probing the same target.
    #[serde(default = "default_offset_ms")]
    pub worker_offset_ms: u32,
    /// Participating workers, in stagger order.
    pub workers: Vec<WorkerId>,
    /// Zone the census controls; required for DNS_A probes.
    #[serde(default)]
    pub dns_probe_domain: Option<String>,
    #[serde(default = "default_tcp_dst_port")]
    pub tcp_dst_port: u16,
}

impl MeasurementSpec {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.rate_pps == 0 {
            return Err(DomainError::ZeroRate);
        }
        if self.workers.is_empty() {
            return Err(DomainError::NoWorkers);
        }
        let mut seen = std::collections::BTreeSet::new();
        for w in &self.workers {
            if w.is_unknown() {
                return Err(DomainError::ReservedWorkerId);
            }
            if !seen.insert(*w) {
                return Err(DomainError::DuplicateWorker(*w));
            }
        }
        if self.protocol == Protocol::DnsA && self.dns_probe_domain.is_none() {
            return Err(DomainError::MissingProbeDomain);
        }
        Ok(())
    }

    /// Position of a worker in the stagger order, if it participates.
    pub fn worker_index(&self, worker: WorkerId) -> Option<usize> {
        self.workers.iter().position(|w| *w == worker)
    }
}

/// One decoded reply, as aggregated by the orchestrator.
///
/// `tx_worker` is recovered from the probe identity echoed in the
/// reply; `rx_worker` is whoever captured it. The two differ exactly
/// when the reply crossed sites, which is the anycast signal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeReply {
    pub measurement_id: u32,
    pub target: TargetAddress,
    pub protocol: Protocol,
    pub tx_worker: WorkerId,
    pub rx_worker: WorkerId,
    pub tx_time_us: u64,
    pub rx_time_us: u64,
    /// TXT value from a CHAOS reply, when the probe asked for one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chaos_value: Option<String>,
}

impl ProbeReply {
    pub fn cross_site(&self) -> bool {
        self.tx_worker != self.rx_worker
    }
}

/// A usable round-trip time: same-worker reply with positive delta.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RttSample {
    pub vp: VantagePoint,
    pub target: TargetAddress,
    pub rtt_us: u64,
}

impl RttSample {
    pub fn new(vp: VantagePoint, target: TargetAddress, rtt_us: u64) -> Result<Self, DomainError> {
        if rtt_us == 0 {
            return Err(DomainError::NonPositiveRtt);
        }
        Ok(RttSample { vp, target, rtt_us })
    }
}

/// What a single reply contributes to RTT estimation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RttOutcome {
    /// Same-worker reply with rx after tx: a valid sample.
    Rtt(u64),
    /// Reply captured at a different worker than the sender; wall time
    /// across two clocks is not an RTT.
    CrossSite,
    /// rx at or before tx on the same worker; a clock anomaly, dropped.
    ClockAnomaly,
}

pub fn rtt_from_reply(reply: &ProbeReply) -> RttOutcome {
    if reply.cross_site() {
        return RttOutcome::CrossSite;
    }
    if reply.rx_time_us <= reply.tx_time_us {
        return RttOutcome::ClockAnomaly;
    }
    RttOutcome::Rtt(reply.rx_time_us - reply.tx_time_us)
}

/// Folds replies into RTT samples against a worker roster, counting
/// what had to be discarded along the way.
pub struct RttCollector<'a> {
    roster: &'a BTreeMap<WorkerId, VantagePoint>,
    pub samples: Vec<RttSample>,
    pub cross_site: u64,
    pub clock_anomalies: u64,
    pub unknown_worker: u64,
}

impl<'a> RttCollector<'a> {
    pub fn new(roster: &'a BTreeMap<WorkerId, VantagePoint>) -> Self {
        RttCollector {
            roster,
            samples: Vec::new(),
            cross_site: 0,
            clock_anomalies: 0,
            unknown_worker: 0,
        }
    }

    pub fn ingest(&mut self, reply: &ProbeReply) {
        match rtt_from_reply(reply) {
            RttOutcome::CrossSite => self.cross_site += 1,
            RttOutcome::ClockAnomaly => self.clock_anomalies += 1,
            RttOutcome::Rtt(rtt_us) => match self.roster.get(&reply.rx_worker) {
                None => self.unknown_worker += 1,
                Some(vp) => self.samples.push(RttSample {
                    vp: vp.clone(),
                    target: reply.target,
                    rtt_us,
                }),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v4(s: &str) -> IpAddr {
        s.parse().unwrap()
    }

    #[test]
    fn prefix_masks_host_bits() {
        let p = Prefix::new(v4("192.0.2.77"), 24).unwrap();
        assert_eq!(p.to_string(), "192.0.2.0/24");
        assert_eq!(p.len(), 24);
    }

    #[test]
    fn prefix_new_is_idempotent() {
        let p = Prefix::new(v4("10.20.30.40"), 20).unwrap();
        let again = Prefix::new(p.base(), p.len()).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn prefix_default_granularity() {
        assert_eq!(
            Prefix::of_address(v4("192.0.2.77")).to_string(),
            "192.0.2.0/24"
        );
        assert_eq!(
            Prefix::of_address("2001:db8:12:34::1".parse().unwrap()).to_string(),
            "2001:db8:12::/48"
        );
    }

    #[test]
    fn prefix_length_bounds() {
        assert!(Prefix::new(v4("10.0.0.0"), 7).is_err());
        assert!(Prefix::new(v4("10.0.0.0"), 33).is_err());
        assert!(Prefix::new(v4("10.0.0.0"), 8).is_ok());
        assert!(Prefix::new(v4("10.0.0.0"), 32).is_ok());
        let v6 = "2001:db8::".parse().unwrap();
        assert!(Prefix::new(v6, 15).is_err());
        assert!(Prefix::new(v6, 65).is_err());
        assert!(Prefix::new(v6, 16).is_ok());
        assert!(Prefix::new(v6, 64).is_ok());
    }

    #[test]
    fn prefix_contains() {
        let p: Prefix = "192.0.2.0/24".parse().unwrap();
        assert!(p.contains(v4("192.0.2.0")));
        assert!(p.contains(v4("192.0.2.255")));
        assert!(!p.contains(v4("192.0.3.0")));
        assert!(!p.contains("2001:db8::1".parse().unwrap()));
    }

    #[test]
    fn prefix_parse_roundtrip() {
        for s in ["192.0.2.0/24", "10.0.0.0/8", "2001:db8::/32", "2001:db8:1:2::/64"] {
            let p: Prefix = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
            let back: Prefix = p.to_string().parse().unwrap();
            assert_eq!(p, back);
        }
    }

    #[test]
    fn prefix_parse_rejects_garbage() {
        for s in ["", "10.0.0.0", "10.0.0.0/", "/24", "banana/24", "10.0.0.0/x", "10.0.0.0/24/7"] {
            assert!(s.parse::<Prefix>().is_err(), "{s:?} parsed");
        }
    }

    #[test]
    fn prefix_serde_as_string() {
        let p: Prefix = "192.0.2.0/24".parse().unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, "\"192.0.2.0/24\"");
        let back: Prefix = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
        assert!(serde_json::from_str::<Prefix>("\"10.0.0.0/33\"").is_err());
    }

    #[test]
    fn v4_hosts_enumerate_in_order() {
        let p: Prefix = "192.0.2.0/30".parse().unwrap();
        let hosts: Vec<IpAddr> = p.v4_addresses().unwrap().collect();
        assert_eq!(
            hosts,
            vec![v4("192.0.2.0"), v4("192.0.2.1"), v4("192.0.2.2"), v4("192.0.2.3")]
        );
        let p6: Prefix = "2001:db8::/48".parse().unwrap();
        assert!(p6.v4_addresses().is_none());
    }

    #[test]
    fn target_must_sit_inside_prefix() {
        let p: Prefix = "192.0.2.0/24".parse().unwrap();
        assert!(TargetAddress::new(p, v4("192.0.2.9")).is_ok());
        assert!(TargetAddress::new(p, v4("192.0.3.9")).is_err());
    }

    #[test]
    fn target_serde_revalidates() {
        let t = TargetAddress::of_address(v4("192.0.2.9"));
        let json = serde_json::to_string(&t).unwrap();
        let back: TargetAddress = serde_json::from_str(&json).unwrap();
        assert_eq!(t, back);
        let bad = r#"{"prefix":"192.0.2.0/24","address":"192.0.9.9"}"#;
        assert!(serde_json::from_str::<TargetAddress>(bad).is_err());
    }

    fn spec() -> MeasurementSpec {
        MeasurementSpec {
            measurement_id: 7,
            protocol: Protocol::Icmp,
            ip_version: IpVersion::V4,
            source_mode: SourceMode::Anycast,
            rate_pps: 100,
            worker_offset_ms: 1000,
            workers: vec![WorkerId(1), WorkerId(2), WorkerId(3)],
            dns_probe_domain: None,
            tcp_dst_port: 62222,
        }
    }

    #[test]
    fn spec_validation() {
        assert!(spec().validate().is_ok());

        let mut s = spec();
        s.rate_pps = 0;
        assert_eq!(s.validate(), Err(DomainError::ZeroRate));

        let mut s = spec();
        s.workers.clear();
        assert_eq!(s.validate(), Err(DomainError::NoWorkers));

        let mut s = spec();
        s.workers.push(WorkerId(2));
        assert_eq!(s.validate(), Err(DomainError::DuplicateWorker(WorkerId(2))));

        let mut s = spec();
        s.workers.push(WorkerId::UNKNOWN);
        assert_eq!(s.validate(), Err(DomainError::ReservedWorkerId));

        let mut s = spec();
        s.protocol = Protocol::DnsA;
        assert_eq!(s.validate(), Err(DomainError::MissingProbeDomain));
        s.dns_probe_domain = Some("census.example".into());
        assert!(s.validate().is_ok());

        // CHAOS asks for a fixed name, no zone needed.
        let mut s = spec();
        s.protocol = Protocol::DnsChaos;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn spec_serde_fills_defaults() {
        let json = r#"{
            "measurement_id": 1, "protocol": "ICMP", "ip_version": 4,
            "source_mode": "ANYCAST", "rate_pps": 10, "workers": [1, 2]
        }"#;
        let s: MeasurementSpec = serde_json::from_str(json).unwrap();
        assert_eq!(s.worker_offset_ms, 1000);
        assert_eq!(s.tcp_dst_port, 62222);
        assert_eq!(s.protocol, Protocol::Icmp);
    }

    fn reply(tx_worker: u16, rx_worker: u16, tx: u64, rx: u64) -> ProbeReply {
        ProbeReply {
            measurement_id: 1,
            target: TargetAddress::of_address(v4("192.0.2.9")),
            protocol: Protocol::Icmp,
            tx_worker: WorkerId(tx_worker),
            rx_worker: WorkerId(rx_worker),
            tx_time_us: tx,
            rx_time_us: rx,
            chaos_value: None,
        }
    }

    #[test]
    fn rtt_same_worker() {
        assert_eq!(rtt_from_reply(&reply(3, 3, 100, 40_100)), RttOutcome::Rtt(40_000));
    }

    #[test]
    fn rtt_cross_site_has_no_sample() {
        assert_eq!(rtt_from_reply(&reply(3, 5, 100, 90)), RttOutcome::CrossSite);
    }

    #[test]
    fn rtt_clock_anomaly_is_counted_not_crashed() {
        assert_eq!(rtt_from_reply(&reply(3, 3, 500, 400)), RttOutcome::ClockAnomaly);
        assert_eq!(rtt_from_reply(&reply(3, 3, 500, 500)), RttOutcome::ClockAnomaly);

        let mut roster = BTreeMap::new();
        roster.insert(
            WorkerId(3),
            VantagePoint {
                worker_id: WorkerId(3),
                name: "ams".into(),
                lat: 52.37,
                lon: 4.9,
                unicast_address: v4("198.51.100.3"),
                anycast_address: v4("203.0.113.1"),
            },
        );
        let mut coll = RttCollector::new(&roster);
        coll.ingest(&reply(3, 3, 500, 400));
        coll.ingest(&reply(3, 5, 100, 200));
        coll.ingest(&reply(3, 3, 100, 40_100));
        coll.ingest(&reply(7, 7, 100, 200)); // not in roster
        assert_eq!(coll.clock_anomalies, 1);
        assert_eq!(coll.cross_site, 1);
        assert_eq!(coll.unknown_worker, 1);
        assert_eq!(coll.samples.len(), 1);
        assert_eq!(coll.samples[0].rtt_us, 40_000);
    }

    #[test]
    fn rtt_sample_rejects_zero() {
        let vp = VantagePoint {
            worker_id: WorkerId(1),
            name: "x".into(),
            lat: 0.0,
            lon: 0.0,
            unicast_address: v4("198.51.100.1"),
            anycast_address: v4("203.0.113.1"),
        };
        let t = TargetAddress::of_address(v4("192.0.2.9"));
        assert!(RttSample::new(vp.clone(), t, 0).is_err());
        assert!(RttSample::new(vp, t, 1).is_ok());
    }

    #[test]
    fn vantage_point_bounds() {
        let mut vp = VantagePoint {
            worker_id: WorkerId(1),
            name: "x".into(),
            lat: 91.0,
            lon: 0.0,
            unicast_address: v4("198.51.100.1"),
            anycast_address: v4("203.0.113.1"),
        };
        assert!(vp.validate().is_err());
        vp.lat = 45.0;
        vp.lon = -181.0;
        assert!(vp.validate().is_err());
        vp.lon = -180.0;
        assert!(vp.validate().is_ok());
        vp.worker_id = WorkerId::UNKNOWN;
        assert!(vp.validate().is_err());
    }

    #[test]
    fn worker_id_zero_is_unknown() {
        assert!(WorkerId::UNKNOWN.is_unknown());
        assert!(!WorkerId(1).is_unknown());
    }
}
