//! Deterministic geographic network model used in place of the real
//! Internet for simulated measurements.
//!
//! The model is intentionally small: sites and vantage points are
//! points on a sphere, probes reach the geographically nearest serving
//! site, and replies to anycast sources follow a per-site preference
//! order over vantage points (geographic distance plus seeded noise).
//! Route flaps re-draw that noise, per-flow multipath hashes the flow
//! tuple over the top few preferences, and jitter stretches round
//! trips. That is enough to reproduce every qualitative behaviour the
//! higher layers are tested against: single-VP unicast responses,
//! multi-VP anycast responses, flap- and multipath-induced false
//! candidates, and anycast missed because every site prefers the same
//! vantage point.
//!
//! Everything is a pure function of the world seed and the probe
//! stream: identical configs and probe sequences produce identical
//! delivery sequences, byte for byte.
//!
//! Latency never undershoots geography: a reply's round trip is at
//! least the great-circle time to the serving site, so a latency disk
//! computed from any same-worker sample always contains that site.

use std::collections::BTreeMap;
use std::net::IpAddr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{IpVersion, Prefix, VantagePoint, WorkerId};
use crate::gcd::geo::{haversine_km, GeoPoint};
use crate::probecodec::EncodedProbe;

pub mod config;
pub mod harness;
pub mod simnet;

pub use config::{load_world, WorldConfig};
pub use harness::{FaultKind, SimHarness};
pub use simnet::{SimFabric, SimNet};

/// Reply paths per flow on a multipath-afflicted unicast target.
pub const ECMP_WAYS: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("world config: {0}")]
    Config(String),
    #[error("world config is not valid TOML: {0}")]
    Toml(String),
    #[error("cannot read world config: {0}")]
    Io(#[from] std::io::Error),
}

/// One physical service location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSite {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
}

impl SimSite {
    pub fn location(&self) -> GeoPoint {
        GeoPoint { lat: self.lat, lon: self.lon }
    }
}

#[derive(Debug, Clone)]
pub enum SimTargetKind {
    /// One site; every probed address in the prefix behaves the same.
    Unicast { site: SimSite },
    /// Two or more sites; probes land on the nearest one.
    Anycast { sites: Vec<SimSite> },
    /// A prefix whose listed addresses split between an anycast
    /// service and a single-site service; unlisted addresses are dead.
    Partial {
        anycast_sites: Vec<SimSite>,
        unicast_site: SimSite,
        anycast_addresses: Vec<IpAddr>,
        unicast_addresses: Vec<IpAddr>,
    },
    Unresponsive,
}

impl SimTargetKind {
    pub fn label(&self) -> TargetKindLabel {
        match self {
            SimTargetKind::Unicast { .. } => TargetKindLabel::Unicast,
            SimTargetKind::Anycast { .. } => TargetKindLabel::Anycast,
            SimTargetKind::Partial { .. } => TargetKindLabel::Partial,
            SimTargetKind::Unresponsive => TargetKindLabel::Unresponsive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TargetKindLabel {
    Unicast,
    Anycast,
    Partial,
    Unresponsive,
}

#[derive(Debug, Clone)]
pub struct SimTarget {
    pub prefix: Prefix,
    pub kind: SimTargetKind,
    /// Scripted route-change times; when set, the seeded flap process
    /// is replaced entirely.
    pub flap_times_us: Option<Vec<u64>>,
}

/// Lazily generated route-change times for one target.
#[derive(Debug)]
struct FlapClock {
    rng: ChaCha8Rng,
    /// Ascending change times, extended on demand.
    times: Vec<u64>,
}

impl FlapClock {
    fn new(seed: u64, prefix: &Prefix) -> Self {
        FlapClock {
            rng: ChaCha8Rng::seed_from_u64(mix(seed, &[b"flaps", prefix.to_string().as_bytes()])),
            times: Vec::new(),
        }
    }

    /// Route epoch at `at_us`: how many changes have happened. The
    /// generated sequence depends only on the seed, so interleaved
    /// queries across targets cannot perturb it.
    fn epoch_at(&mut self, at_us: u64, rate_per_s: f64, scripted: Option<&[u64]>) -> u64 {
        if let Some(times) = scripted {
            return times.iter().filter(|t| **t <= at_us).count() as u64;
        }
        if rate_per_s <= 0.0 {
            return 0;
        }
        while self.times.last().copied().unwrap_or(0) <= at_us {
            let last = self.times.last().copied().unwrap_or(0);
            let u: f64 = self.rng.gen();
            let gap_s = -(1.0 - u).ln() / rate_per_s;
            let gap_us = (gap_s * 1e6).ceil().max(1.0) as u64;
            self.times.push(last.saturating_add(gap_us));
        }
        self.times.partition_point(|t| *t <= at_us) as u64
    }
}

/// What the model hands back for one probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    /// Raw reply bytes, exactly what a capture socket would see.
    pub payload: Vec<u8>,
    /// The probed address; replies come from the address probed.
    pub src: IpAddr,
    pub arrives_at: WorkerId,
    pub rx_time_us: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SimStats {
    pub probes: u64,
    pub replies: u64,
    pub dropped_unresponsive: u64,
    pub dropped_unknown_target: u64,
    pub dropped_unknown_source: u64,
}

#[derive(Debug)]
pub struct SimWorld {
    seed: u64,
    flap_rate: f64,
    ecmp_fraction: f64,
    jitter_ms: f64,
    catchment_noise_km: f64,
    vps: BTreeMap<WorkerId, VantagePoint>,
    targets: Vec<SimTarget>,
    /// Prefix range start -> target index, per IP version.
    lookup_v4: BTreeMap<u32, usize>,
    lookup_v6: BTreeMap<u128, usize>,
    flap_clocks: Vec<FlapClock>,
    pub stats: SimStats,
}

/// 64-bit FNV-1a over the seed and a part list. Stable across
/// platforms and releases, unlike the std hasher, which matters
/// because simulated traces must replay identically forever.
fn mix(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in seed.to_be_bytes() {
        h = (h ^ u64::from(byte)).wrapping_mul(0x100_0000_01b3);
    }
    for part in parts {
        for byte in *part {
            h = (h ^ u64::from(*byte)).wrapping_mul(0x100_0000_01b3);
        }
        // Length marker so part boundaries cannot alias.
        for byte in (part.len() as u64).to_be_bytes() {
            h = (h ^ u64::from(byte)).wrapping_mul(0x100_0000_01b3);
        }
    }
    h
}

/// Uniform [0, 1) from a hash.
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn addr_bits(addr: &IpAddr) -> (IpVersion, u128) {
    match addr {
        IpAddr::V4(a) => (IpVersion::V4, u128::from(u32::from_be_bytes(a.octets()))),
        IpAddr::V6(a) => (IpVersion::V6, u128::from_be_bytes(a.octets())),
    }
}

fn prefix_span(prefix: &Prefix) -> (IpVersion, u128, u128) {
    let (version, base) = addr_bits(&prefix.base());
    let host_bits = match version {
        IpVersion::V4 => 32 - u32::from(prefix.len()),
        IpVersion::V6 => 128 - u32::from(prefix.len()),
    };
    let size = 1u128 << host_bits;
    (version, base, base + size - 1)
}

impl SimWorld {
    pub fn new(
        seed: u64,
        flap_rate: f64,
        ecmp_fraction: f64,
        jitter_ms: f64,
        catchment_noise_km: f64,
        vps: Vec<VantagePoint>,
        targets: Vec<SimTarget>,
    ) -> Result<SimWorld, SimError> {
        if !(0.0..=1.0).contains(&ecmp_fraction) {
            return Err(SimError::Config("ecmp_fraction must be within [0, 1]".into()));
        }
        for bad in [flap_rate, jitter_ms, catchment_noise_km] {
            if !bad.is_finite() || bad < 0.0 {
                return Err(SimError::Config(
                    "flap_rate, jitter_ms and catchment_noise_km must be finite and >= 0".into(),
                ));
            }
        }
        let mut roster = BTreeMap::new();
        for vp in vps {
            vp.validate().map_err(|e| SimError::Config(e.to_string()))?;
            if roster.insert(vp.worker_id, vp.clone()).is_some() {
                return Err(SimError::Config(format!(
                    "worker {} appears twice in the vantage point list",
                    vp.worker_id.0
                )));
            }
        }
        if roster.is_empty() {
            return Err(SimError::Config("a world needs at least one vantage point".into()));
        }

        let mut lookup_v4 = BTreeMap::new();
        let mut lookup_v6 = BTreeMap::new();
        let mut spans: Vec<(IpVersion, u128, u128)> = Vec::new();
        for (idx, target) in targets.iter().enumerate() {
            validate_target(target)?;
            let (version, start, end) = prefix_span(&target.prefix);
            for (v, s, e) in &spans {
                if *v == version && start <= *e && *s <= end {
                    return Err(SimError::Config(format!(
                        "target prefixes overlap near {}",
                        target.prefix
                    )));
                }
            }
            spans.push((version, start, end));
            match version {
                IpVersion::V4 => lookup_v4.insert(start as u32, idx),
                IpVersion::V6 => lookup_v6.insert(start, idx),
            };
        }

        let flap_clocks = targets.iter().map(|t| FlapClock::new(seed, &t.prefix)).collect();
        Ok(SimWorld {
            seed,
            flap_rate,
            ecmp_fraction,
            jitter_ms,
            catchment_noise_km,
            vps: roster,
            targets,
            lookup_v4,
            lookup_v6,
            flap_clocks,
            stats: SimStats::default(),
        })
    }

    pub fn vantage_points(&self) -> impl Iterator<Item = &VantagePoint> {
        self.vps.values()
    }

    pub fn vp(&self, worker: WorkerId) -> Option<&VantagePoint> {
        self.vps.get(&worker)
    }

    pub fn targets(&self) -> &[SimTarget] {
        &self.targets
    }

    /// One probe-worthy address per target: the first host address,
    /// except partial prefixes, which contribute every listed address
    /// so both halves of the split are visible.
    pub fn default_hitlist(&self) -> Vec<IpAddr> {
        let mut out = Vec::new();
        for target in &self.targets {
            match &target.kind {
                SimTargetKind::Partial { anycast_addresses, unicast_addresses, .. } => {
                    out.extend(anycast_addresses.iter().copied());
                    out.extend(unicast_addresses.iter().copied());
                }
                _ => out.push(first_host(&target.prefix)),
            }
        }
        out
    }

    fn target_of(&self, addr: &IpAddr) -> Option<usize> {
        let (version, bits) = addr_bits(addr);
        let idx = match version {
            IpVersion::V4 => {
                let bits = bits as u32;
                self.lookup_v4.range(..=bits).next_back().map(|(_, i)| *i)?
            }
            IpVersion::V6 => self.lookup_v6.range(..=bits).next_back().map(|(_, i)| *i)?,
        };
        self.targets[idx].prefix.contains(*addr).then_some(idx)
    }

    /// The site that serves `addr` for a probe sent by `sender`:
    /// geographically nearest for anycast, fixed otherwise. `None`
    /// means the address does not answer at all.
    fn serving_site<'a>(
        &'a self,
        target: &'a SimTarget,
        addr: &IpAddr,
        sender: &VantagePoint,
    ) -> Option<(usize, &'a SimSite)> {
        match &target.kind {
            SimTargetKind::Unicast { site } => Some((0, site)),
            SimTargetKind::Anycast { sites } => Some(nearest_site(sites, sender)),
            SimTargetKind::Partial {
                anycast_sites,
                unicast_site,
                anycast_addresses,
                unicast_addresses,
            } => {
                if anycast_addresses.contains(addr) {
                    Some(nearest_site(anycast_sites, sender))
                } else if unicast_addresses.contains(addr) {
                    // Index past the anycast sites keeps noise draws
                    // distinct between the two halves.
                    Some((anycast_sites.len(), unicast_site))
                } else {
                    None
                }
            }
            SimTargetKind::Unresponsive => None,
        }
    }

    /// The reply path preference of one site: every vantage point,
    /// most preferred first. Geographic distance plus seeded per-epoch
    /// noise; a route change (epoch bump) redraws the noise.
    fn catchment_order(
        &self,
        target: &SimTarget,
        site_idx: usize,
        site: &SimSite,
        epoch: u64,
    ) -> Vec<WorkerId> {
        let prefix = target.prefix.to_string();
        let mut keyed: Vec<(f64, WorkerId)> = self
            .vps
            .values()
            .map(|vp| {
                let noise = unit(mix(
                    self.seed,
                    &[
                        b"catchment",
                        prefix.as_bytes(),
                        &(site_idx as u32).to_be_bytes(),
                        &vp.worker_id.0.to_be_bytes(),
                        &epoch.to_be_bytes(),
                    ],
                )) * self.catchment_noise_km;
                (haversine_km(site.location(), vp.location()) + noise, vp.worker_id)
            })
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        keyed.into_iter().map(|(_, w)| w).collect()
    }

    /// Whether a unicast target spreads reply flows across paths.
    fn is_ecmp(&self, target: &SimTarget) -> bool {
        matches!(target.kind, SimTargetKind::Unicast { .. })
            && unit(mix(self.seed, &[b"ecmp", target.prefix.to_string().as_bytes()]))
                < self.ecmp_fraction
    }

    /// Carries one probe to its target and routes the reply.
    ///
    /// A probe sent from the worker's unicast address comes straight
    /// back to that worker. A probe sent from the shared anycast
    /// address returns wherever the serving site's current preference
    /// (or, on multipath targets, the flow hash over its top
    /// preferences) points. The flow hash covers addresses, ports and
    /// protocol only, so payload variation never moves a reply.
    pub fn deliver(
        &mut self,
        probe: &EncodedProbe,
        sent_from: WorkerId,
        source_addr: IpAddr,
        at_us: u64,
    ) -> Option<Delivery> {
        self.stats.probes += 1;
        let Some(sender) = self.vps.get(&sent_from).cloned() else {
            self.stats.dropped_unknown_source += 1;
            return None;
        };
        let anycast_source = if source_addr == sender.anycast_address {
            true
        } else if source_addr == sender.unicast_address {
            false
        } else {
            self.stats.dropped_unknown_source += 1;
            return None;
        };

        let addr = probe.target.address();
        let Some(target_idx) = self.target_of(&addr) else {
            self.stats.dropped_unknown_target += 1;
            return None;
        };
        let target = self.targets[target_idx].clone();
        let Some((site_idx, site)) = self.serving_site(&target, &addr, &sender) else {
            self.stats.dropped_unresponsive += 1;
            return None;
        };
        let site = site.clone();

        let arrives_at = if anycast_source {
            let epoch = self.flap_clocks[target_idx].epoch_at(
                at_us,
                self.flap_rate,
                target.flap_times_us.as_deref(),
            );
            let order = self.catchment_order(&target, site_idx, &site, epoch);
            if self.is_ecmp(&target) {
                let ways = ECMP_WAYS.min(order.len());
                let h = mix(
                    self.seed,
                    &[
                        b"flow",
                        target.prefix.to_string().as_bytes(),
                        source_addr.to_string().as_bytes(),
                        addr.to_string().as_bytes(),
                        &probe.flow_src_port.to_be_bytes(),
                        &probe.flow_dst_port.to_be_bytes(),
                        probe.protocol.as_str().as_bytes(),
                    ],
                );
                order[(h % ways as u64) as usize]
            } else {
                order[0]
            }
        } else {
            sent_from
        };

        // Round trip: great-circle to the serving site and back, from
        // the receiving vantage point's perspective, plus jitter.
        // Never less than geography, and never zero.
        let rx_vp = &self.vps[&arrives_at];
        let distance_km = haversine_km(site.location(), rx_vp.location());
        let jitter_us = unit(mix(
            self.seed,
            &[
                b"jitter",
                target.prefix.to_string().as_bytes(),
                &sent_from.0.to_be_bytes(),
                &probe.tx_time_us.to_be_bytes(),
                addr.to_string().as_bytes(),
            ],
        )) * self.jitter_ms
            * 1_000.0;
        let rtt_us = (10.0 * distance_km + jitter_us).ceil().max(1.0) as u64;

        let chaos = site.name.clone();
        let payload = crate::probecodec::synthesize_reply(probe, Some(&chaos));
        self.stats.replies += 1;
        Some(Delivery { payload, src: addr, arrives_at, rx_time_us: at_us + rtt_us })
    }

    /// Per-prefix oracle labels: what each target really is, and what
    /// a candidate classifier fed by this world is expected to say
    /// under stable routing (epoch zero, no multipath).
    pub fn ground_truth(&self) -> Vec<GroundTruthRecord> {
        self.targets
            .iter()
            .map(|target| {
                let (sites, anycast_addresses, unicast_addresses) = match &target.kind {
                    SimTargetKind::Unicast { site } => (vec![site.clone()], vec![], vec![]),
                    SimTargetKind::Anycast { sites } => (sites.clone(), vec![], vec![]),
                    SimTargetKind::Partial {
                        anycast_sites,
                        unicast_site,
                        anycast_addresses,
                        unicast_addresses,
                    } => {
                        let mut all = anycast_sites.clone();
                        all.push(unicast_site.clone());
                        (all, anycast_addresses.clone(), unicast_addresses.clone())
                    }
                    SimTargetKind::Unresponsive => (vec![], vec![], vec![]),
                };
                let expected_rx_vps = self.expected_rx_vps(target);
                let expected_classifier_verdict = match &target.kind {
                    SimTargetKind::Unresponsive => ExpectedVerdict::Unresponsive,
                    _ if expected_rx_vps.len() >= 2 => ExpectedVerdict::Candidate,
                    _ => ExpectedVerdict::Unicast,
                };
                GroundTruthRecord {
                    prefix: target.prefix,
                    kind: target.kind.label(),
                    site_count: sites.len(),
                    sites,
                    anycast_addresses,
                    unicast_addresses,
                    expected_rx_vps,
                    expected_classifier_verdict,
                }
            })
            .collect()
    }

    /// Where replies land when every vantage point probes from the
    /// anycast source under stable routing: the top preference of each
    /// serving site actually reached. Anycast whose sites all prefer
    /// the same vantage point collapses to one entry — the known
    /// false-negative shape.
    fn expected_rx_vps(&self, target: &SimTarget) -> Vec<WorkerId> {
        let mut out = std::collections::BTreeSet::new();
        for sender in self.vps.values() {
            let reached: Vec<(usize, &SimSite)> = match &target.kind {
                SimTargetKind::Unicast { site } => vec![(0, site)],
                SimTargetKind::Anycast { sites } => vec![nearest_site(sites, sender)],
                SimTargetKind::Partial { anycast_sites, unicast_site, .. } => vec![
                    nearest_site(anycast_sites, sender),
                    (anycast_sites.len(), unicast_site),
                ],
                SimTargetKind::Unresponsive => vec![],
            };
            for (site_idx, site) in reached {
                out.insert(self.catchment_order(target, site_idx, site, 0)[0]);
            }
        }
        out.into_iter().collect()
    }
}

fn nearest_site<'a>(sites: &'a [SimSite], sender: &VantagePoint) -> (usize, &'a SimSite) {
    let (idx, site) = sites
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            haversine_km(a.location(), sender.location())
                .total_cmp(&haversine_km(b.location(), sender.location()))
        })
        .expect("validated target has at least one site");
    (idx, site)
}

fn validate_target(target: &SimTarget) -> Result<(), SimError> {
    let check_site = |s: &SimSite| {
        if !(-90.0..=90.0).contains(&s.lat) || !(-180.0..=180.0).contains(&s.lon) {
            return Err(SimError::Config(format!("site {} has out-of-range coordinates", s.name)));
        }
        Ok(())
    };
    match &target.kind {
        SimTargetKind::Unicast { site } => check_site(site),
        SimTargetKind::Anycast { sites } => {
            if sites.len() < 2 {
                return Err(SimError::Config(format!(
                    "anycast target {} needs at least two sites",
                    target.prefix
                )));
            }
            for site in sites {
                check_site(site)?;
            }
            for (i, a) in sites.iter().enumerate() {
                for b in &sites[i + 1..] {
                    if a.lat == b.lat && a.lon == b.lon {
                        return Err(SimError::Config(format!(
                            "anycast target {} has two sites at the same location",
                            target.prefix
                        )));
                    }
                }
            }
            Ok(())
        }
        SimTargetKind::Partial {
            anycast_sites,
            unicast_site,
            anycast_addresses,
            unicast_addresses,
        } => {
            if anycast_sites.len() < 2 {
                return Err(SimError::Config(format!(
                    "partial target {} needs at least two anycast sites",
                    target.prefix
                )));
            }
            for site in anycast_sites.iter().chain([unicast_site]) {
                check_site(site)?;
            }
            if anycast_addresses.is_empty() || unicast_addresses.is_empty() {
                return Err(SimError::Config(format!(
                    "partial target {} needs addresses on both sides of the split",
                    target.prefix
                )));
            }
            for addr in anycast_addresses.iter().chain(unicast_addresses) {
                if !target.prefix.contains(*addr) {
                    return Err(SimError::Config(format!(
                        "address {addr} listed for partial target {} is outside the prefix",
                        target.prefix
                    )));
                }
            }
            if anycast_addresses.iter().any(|a| unicast_addresses.contains(a)) {
                return Err(SimError::Config(format!(
                    "partial target {} lists an address as both anycast and unicast",
                    target.prefix
                )));
            }
            Ok(())
        }
        SimTargetKind::Unresponsive => Ok(()),
    }
}

fn first_host(prefix: &Prefix) -> IpAddr {
    let (version, base, _) = prefix_span(prefix);
    match version {
        IpVersion::V4 => IpAddr::V4(std::net::Ipv4Addr::from((base as u32) + 1)),
        IpVersion::V6 => IpAddr::V6(std::net::Ipv6Addr::from(base + 1)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExpectedVerdict {
    Unresponsive,
    Unicast,
    Candidate,
}

/// The oracle view of one prefix, exported for offline assertions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub prefix: Prefix,
    pub kind: TargetKindLabel,
    pub site_count: usize,
    pub sites: Vec<SimSite>,
    pub anycast_addresses: Vec<IpAddr>,
    pub unicast_addresses: Vec<IpAddr>,
    /// Distinct vantage points expected to capture replies under
    /// stable routing with every worker probing from anycast.
    pub expected_rx_vps: Vec<WorkerId>,
    pub expected_classifier_verdict: ExpectedVerdict,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{MeasurementSpec, Protocol, SourceMode, TargetAddress};
    use crate::probecodec::encode_probe;

    fn vp(id: u16, name: &str, lat: f64, lon: f64) -> VantagePoint {
        VantagePoint {
            worker_id: WorkerId(id),
            name: name.into(),
            lat,
            lon,
            unicast_address: format!("10.0.{id}.1").parse().unwrap(),
            anycast_address: format!("198.51.100.{id}").parse().unwrap(),
        }
    }

    fn global_vps() -> Vec<VantagePoint> {
        vec![
            vp(1, "ams", 52.37, 4.90),
            vp(2, "nyc", 40.71, -74.01),
            vp(3, "syd", -33.87, 151.21),
            vp(4, "nrt", 35.68, 139.65),
        ]
    }

    fn site(name: &str, lat: f64, lon: f64) -> SimSite {
        SimSite { name: name.into(), lat, lon }
    }

    fn unicast_target(prefix: &str, s: SimSite) -> SimTarget {
        SimTarget {
            prefix: prefix.parse().unwrap(),
            kind: SimTargetKind::Unicast { site: s },
            flap_times_us: None,
        }
    }

    fn spec() -> MeasurementSpec {
        MeasurementSpec {
            measurement_id: 1,
            protocol: Protocol::Icmp,
            ip_version: crate::domain::IpVersion::V4,
            source_mode: SourceMode::Anycast,
            rate_pps: 100,
            worker_offset_ms: 1000,
            workers: vec![WorkerId(1), WorkerId(2), WorkerId(3), WorkerId(4)],
            dns_probe_domain: Some("census.example".into()),
            tcp_dst_port: 62222,
        }
    }

    fn probe_from(world: &mut SimWorld, worker: u16, addr: &str, at: u64) -> Option<Delivery> {
        let target = TargetAddress::of_address(addr.parse().unwrap());
        let probe = encode_probe(&spec(), target, WorkerId(worker), 1, at).unwrap();
        let src = world.vp(WorkerId(worker)).unwrap().anycast_address;
        world.deliver(&probe, WorkerId(worker), src, at)
    }

    fn probe_from_unicast(world: &mut SimWorld, worker: u16, addr: &str, at: u64) -> Option<Delivery> {
        let target = TargetAddress::of_address(addr.parse().unwrap());
        let probe = encode_probe(&spec(), target, WorkerId(worker), 1, at).unwrap();
        let src = world.vp(WorkerId(worker)).unwrap().unicast_address;
        world.deliver(&probe, WorkerId(worker), src, at)
    }

    #[test]
    fn unicast_replies_converge_on_one_vantage_point() {
        let mut world = SimWorld::new(
            7,
            0.0,
            0.0,
            0.0,
            0.0,
            global_vps(),
            vec![unicast_target("192.0.2.0/24", site("par", 48.86, 2.35))],
        )
        .unwrap();
        let mut rx = std::collections::BTreeSet::new();
        for w in 1..=4 {
            rx.insert(probe_from(&mut world, w, "192.0.2.1", 1_000).unwrap().arrives_at);
        }
        assert_eq!(rx.len(), 1);
        // Paris is nearest Amsterdam of the four.
        assert_eq!(rx.into_iter().next().unwrap(), WorkerId(1));
    }

    #[test]
    fn distinct_catchment_anycast_shows_at_multiple_vantage_points() {
        let target = SimTarget {
            prefix: "203.0.113.0/24".parse().unwrap(),
            kind: SimTargetKind::Anycast {
                sites: vec![site("fra", 50.11, 8.68), site("hnd", 35.55, 139.78)],
            },
            flap_times_us: None,
        };
        let mut world =
            SimWorld::new(7, 0.0, 0.0, 0.0, 0.0, global_vps(), vec![target]).unwrap();
        let mut rx = std::collections::BTreeSet::new();
        for w in 1..=4 {
            rx.insert(probe_from(&mut world, w, "203.0.113.1", 1_000).unwrap().arrives_at);
        }
        assert!(rx.len() >= 2, "got {rx:?}");
    }

    #[test]
    fn scripted_route_change_splits_a_unicast_target() {
        // Two vantage points nearly equidistant from the site, noise
        // wide enough that a redraw can reorder them.
        let vps = vec![vp(1, "lhr", 51.51, -0.13), vp(2, "cdg", 49.01, 2.55)];
        let mut target = unicast_target("192.0.2.0/24", site("bru", 50.85, 4.35));
        target.flap_times_us = Some((1..=20).map(|k| k * 1_000_000).collect());
        let mut world = SimWorld::new(3, 0.0, 0.0, 0.0, 400.0, vps, vec![target]).unwrap();
        let mut rx = std::collections::BTreeSet::new();
        for k in 0..=20u64 {
            // Probe in the middle of each epoch.
            rx.insert(
                probe_from(&mut world, 1, "192.0.2.1", k * 1_000_000 + 500_000)
                    .unwrap()
                    .arrives_at,
            );
        }
        assert_eq!(rx.len(), 2, "a redraw across 21 epochs must flip the preference");
    }

    #[test]
    fn no_route_changes_without_flaps() {
        let vps = vec![vp(1, "lhr", 51.51, -0.13), vp(2, "cdg", 49.01, 2.55)];
        let target = unicast_target("192.0.2.0/24", site("bru", 50.85, 4.35));
        let mut world = SimWorld::new(3, 0.0, 0.0, 0.0, 400.0, vps, vec![target]).unwrap();
        let mut rx = std::collections::BTreeSet::new();
        for k in 0..=20u64 {
            rx.insert(
                probe_from(&mut world, 1, "192.0.2.1", k * 1_000_000 + 500_000)
                    .unwrap()
                    .arrives_at,
            );
        }
        assert_eq!(rx.len(), 1);
    }

    #[test]
    fn multipath_ignores_payload_but_not_flow() {
        let mut world = SimWorld::new(
            11,
            0.0,
            1.0, // every unicast target is multipath
            0.0,
            0.0,
            global_vps(),
            vec![unicast_target("192.0.2.0/24", site("par", 48.86, 2.35))],
        )
        .unwrap();
        let target = TargetAddress::of_address("192.0.2.1".parse().unwrap());
        // Same worker, same flow, wildly different payload times.
        let mut rx = std::collections::BTreeSet::new();
        for t in [1_000u64, 2_000, 900_000_000] {
            let probe = encode_probe(&spec(), target, WorkerId(2), 1, t).unwrap();
            let src = world.vp(WorkerId(2)).unwrap().anycast_address;
            rx.insert(world.deliver(&probe, WorkerId(2), src, t).unwrap().arrives_at);
        }
        assert_eq!(rx.len(), 1, "payload variation must never move a flow");

        // Distinct workers are distinct flows and may spread.
        let mut all = std::collections::BTreeSet::new();
        for w in 1..=4 {
            all.insert(probe_from(&mut world, w, "192.0.2.1", 5_000).unwrap().arrives_at);
        }
        assert!(all.len() >= 2, "flow spreading expected with this seed, got {all:?}");
    }

    #[test]
    fn unresponsive_targets_never_answer() {
        let target = SimTarget {
            prefix: "192.0.2.0/24".parse().unwrap(),
            kind: SimTargetKind::Unresponsive,
            flap_times_us: None,
        };
        let mut world = SimWorld::new(7, 0.0, 0.0, 0.0, 0.0, global_vps(), vec![target]).unwrap();
        assert!(probe_from(&mut world, 1, "192.0.2.1", 1_000).is_none());
        assert_eq!(world.stats.dropped_unresponsive, 1);
        // Addresses outside every target prefix are equally dead.
        assert!(probe_from(&mut world, 1, "8.8.8.8", 1_000).is_none());
        assert_eq!(world.stats.dropped_unknown_target, 1);
    }

    #[test]
    fn partial_prefix_splits_by_address() {
        let target = SimTarget {
            prefix: "198.18.0.0/24".parse().unwrap(),
            kind: SimTargetKind::Partial {
                anycast_sites: vec![site("fra", 50.11, 8.68), site("hnd", 35.55, 139.78)],
                unicast_site: site("dal", 32.78, -96.80),
                anycast_addresses: vec!["198.18.0.1".parse().unwrap()],
                unicast_addresses: vec!["198.18.0.50".parse().unwrap()],
            },
            flap_times_us: None,
        };
        let mut world =
            SimWorld::new(7, 0.0, 0.0, 0.0, 0.0, global_vps(), vec![target]).unwrap();
        let mut anycast_rx = std::collections::BTreeSet::new();
        let mut unicast_rx = std::collections::BTreeSet::new();
        for w in 1..=4 {
            anycast_rx.insert(probe_from(&mut world, w, "198.18.0.1", 1_000).unwrap().arrives_at);
            unicast_rx.insert(probe_from(&mut world, w, "198.18.0.50", 1_000).unwrap().arrives_at);
        }
        assert!(anycast_rx.len() >= 2);
        assert_eq!(unicast_rx.len(), 1);
        // Unlisted addresses of the prefix are dead.
        assert!(probe_from(&mut world, 1, "198.18.0.200", 1_000).is_none());
    }

    #[test]
    fn round_trips_never_undershoot_geography() {
        let sites = vec![site("fra", 50.11, 8.68), site("hnd", 35.55, 139.78)];
        let target = SimTarget {
            prefix: "203.0.113.0/24".parse().unwrap(),
            kind: SimTargetKind::Anycast { sites: sites.clone() },
            flap_times_us: None,
        };
        let mut world =
            SimWorld::new(9, 0.0, 0.0, 5.0, 0.0, global_vps(), vec![target]).unwrap();
        for w in 1..=4u16 {
            let sender = world.vp(WorkerId(w)).unwrap().clone();
            // Independent oracle: nearest site by linear scan.
            let served = sites
                .iter()
                .map(|s| haversine_km(s.location(), sender.location()))
                .fold(f64::INFINITY, f64::min);
            let d = probe_from_unicast(&mut world, w, "203.0.113.1", 10_000).unwrap();
            assert_eq!(d.arrives_at, WorkerId(w), "unicast-source replies come home");
            let rtt = d.rx_time_us - 10_000;
            assert!(rtt as f64 >= 10.0 * served, "rtt {rtt} vs distance {served}");
            // Jitter is bounded by 5 ms.
            assert!((rtt as f64) <= 10.0 * served + 5_000.0 + 1.0);
        }
    }

    #[test]
    fn identical_seeds_replay_identical_deliveries() {
        let build = || {
            SimWorld::new(
                21,
                0.05,
                0.5,
                3.0,
                800.0,
                global_vps(),
                vec![
                    unicast_target("192.0.2.0/24", site("par", 48.86, 2.35)),
                    unicast_target("198.18.0.0/24", site("dal", 32.78, -96.80)),
                    SimTarget {
                        prefix: "203.0.113.0/24".parse().unwrap(),
                        kind: SimTargetKind::Anycast {
                            sites: vec![site("fra", 50.11, 8.68), site("hnd", 35.55, 139.78)],
                        },
                        flap_times_us: None,
                    },
                ],
            )
            .unwrap()
        };
        let run = |world: &mut SimWorld| {
            let mut log = Vec::new();
            for t in 0..200u64 {
                let at = t * 50_000;
                let w = (t % 4 + 1) as u16;
                for addr in ["192.0.2.1", "198.18.0.1", "203.0.113.1"] {
                    log.push(probe_from(world, w, addr, at));
                }
            }
            log
        };
        let (mut a, mut b) = (build(), build());
        assert_eq!(run(&mut a), run(&mut b));
        assert_eq!(a.stats, b.stats);
    }

    #[test]
    fn ground_truth_labels_and_expected_verdicts() {
        let far = SimTarget {
            prefix: "203.0.113.0/24".parse().unwrap(),
            kind: SimTargetKind::Anycast {
                sites: vec![site("fra", 50.11, 8.68), site("hnd", 35.55, 139.78)],
            },
            flap_times_us: None,
        };
        // Both sites in western Europe: every vantage point reaches a
        // site whose preference tops out at Amsterdam.
        let clustered = SimTarget {
            prefix: "198.18.0.0/24".parse().unwrap(),
            kind: SimTargetKind::Anycast {
                sites: vec![site("bru", 50.85, 4.35), site("ant", 51.22, 4.40)],
            },
            flap_times_us: None,
        };
        let world = SimWorld::new(
            7,
            0.0,
            0.0,
            0.0,
            0.0,
            global_vps(),
            vec![far, clustered],
        )
        .unwrap();
        let truth = world.ground_truth();

        assert_eq!(truth[0].kind, TargetKindLabel::Anycast);
        assert_eq!(truth[0].site_count, 2);
        assert_eq!(truth[0].expected_classifier_verdict, ExpectedVerdict::Candidate);

        assert_eq!(truth[1].site_count, 2);
        assert_eq!(truth[1].expected_rx_vps, vec![WorkerId(1)]);
        assert_eq!(
            truth[1].expected_classifier_verdict,
            ExpectedVerdict::Unicast,
            "single-catchment anycast is the expected miss"
        );
    }

    #[test]
    fn overlapping_prefixes_are_refused() {
        let err = SimWorld::new(
            7,
            0.0,
            0.0,
            0.0,
            0.0,
            global_vps(),
            vec![
                unicast_target("192.0.2.0/24", site("a", 1.0, 1.0)),
                unicast_target("192.0.2.0/25", site("b", 2.0, 2.0)),
            ],
        )
        .unwrap_err();
        assert!(err.to_string().contains("overlap"));
    }
}
