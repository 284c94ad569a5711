//! Daily census assembly.
//!
//! A census day is five sequential stages: (1) anycast-source
//! measurements over the full hitlist, one per configured protocol and
//! IP version; (2) candidate selection, folding in every prefix the
//! latency analysis has ever confirmed (the feedback loop, which
//! covers prefixes the candidate method misses on a given day);
//! (3) unicast-source latency measurements toward the candidate set
//! only, for ICMP and TCP but never DNS, whose resolution is too
//! coarse for distance bounds; (4) the per-prefix merge into census
//! records; (5) artifact writes: the dated census file, a stats file,
//! a run log, and the updated feedback store.
//!
//! Probing cost is structural: stage 3 targets exactly one address per
//! candidate prefix, never the whole hitlist. The candidate stage is
//! the cheap wide net; the latency stage is the expensive confirmation
//! reserved for what the net caught.
//!
//! Everything is deterministic in simulation: the same config, world
//! and seed produce byte-identical census files on every rerun.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::classifier::{classify, Verdict};
use crate::domain::{
    IpVersion, MeasurementSpec, Prefix, ProbeReply, Protocol, RttCollector, RttSample, SourceMode,
    TargetAddress, VantagePoint, WorkerId, DEFAULT_TCP_DST_PORT,
};
use crate::files::{self, FilesError, HitlistEntry};
use crate::gcd::cities::CityTable;
use crate::gcd::{infer, GcdInference, GcdVerdict};
use crate::netsim::{load_world, SimError, SimHarness, SimWorld};
use crate::orchestrator::{OrchestratorError, RunSummary};

pub const DEFAULT_BASELINE_THRESHOLD: f64 = 0.30;
/// Trailing days of stats that form the baseline.
pub const BASELINE_WINDOW_DAYS: usize = 7;

/// Shared secret between the in-process orchestrator and workers of a
/// simulated plane; meaningless outside the process.
const SIM_AUTH_TOKEN: &str = "sim-local";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("census config: {0}")]
    Config(String),
    #[error(transparent)]
    Files(#[from] FilesError),
    #[error("world: {0}")]
    Sim(#[from] SimError),
    #[error("cities: {0}")]
    Cities(#[from] crate::gcd::GcdError),
    #[error("measurement: {0}")]
    Run(#[from] OrchestratorError),
}

/// Census run configuration, loaded from a TOML file. Relative paths
/// inside are resolved against the config file's own directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CensusConfig {
    /// Census date, `YYYY-MM-DD`. Part of every artifact name and
    /// record; deliberately an input, not the wall clock, so a run is
    /// reproducible after the fact.
    pub census_date: String,
    #[serde(default = "default_transport")]
    pub transport: String,
    /// Simulated world description.
    pub world: PathBuf,
    /// City table for geolocating confirmed sites.
    pub cities: PathBuf,
    pub out_dir: PathBuf,
    pub feedback_store: PathBuf,
    pub rate_pps: u32,
    #[serde(default = "default_offset_ms")]
    pub worker_offset_ms: u32,
    #[serde(default)]
    pub dns_probe_domain: Option<String>,
    #[serde(default = "default_threshold")]
    pub baseline_threshold: f64,
    /// Partial-anycast flags from the most recent per-address sweep;
    /// optional because sweeps run on a much slower cadence.
    #[serde(default)]
    pub partial_flags: Option<PathBuf>,
    pub measurements: Vec<MeasurementEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementEntry {
    pub protocol: Protocol,
    pub ip_version: IpVersion,
    pub hitlist: PathBuf,
}

fn default_transport() -> String {
    "sim".into()
}

fn default_offset_ms() -> u32 {
    1000
}

fn default_threshold() -> f64 {
    DEFAULT_BASELINE_THRESHOLD
}

impl CensusConfig {
    pub fn load(path: &Path) -> Result<CensusConfig, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        CensusConfig::from_toml_str(&text, base)
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<CensusConfig, PipelineError> {
        let mut config: CensusConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.resolve_paths(base_dir);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        resolve(&mut self.world);
        resolve(&mut self.cities);
        resolve(&mut self.out_dir);
        resolve(&mut self.feedback_store);
        if let Some(p) = &mut self.partial_flags {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
        for entry in &mut self.measurements {
            resolve(&mut entry.hitlist);
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        validate_census_date(&self.census_date)?;
        if self.transport != "sim" {
            return Err(PipelineError::Config(format!(
                "transport {:?} is not available for census runs; only \"sim\" is wired up",
                self.transport
            )));
        }
        if self.rate_pps == 0 {
            return Err(PipelineError::Config("rate_pps must be at least 1".into()));
        }
        if self.measurements.is_empty() {
            return Err(PipelineError::Config(
                "at least one [[measurements]] entry is required".into(),
            ));
        }
        if !(0.0..=10.0).contains(&self.baseline_threshold) {
            return Err(PipelineError::Config(
                "baseline_threshold must be a fraction within [0, 10]".into(),
            ));
        }
        Ok(())
    }
}

fn validate_census_date(date: &str) -> Result<(), PipelineError> {
    let bad = || PipelineError::Config(format!("census_date {date:?} is not YYYY-MM-DD"));
    let bytes = date.as_bytes();
    if bytes.len() != 10 || bytes[4] != b'-' || bytes[7] != b'-' {
        return Err(bad());
    }
    for (i, b) in bytes.iter().enumerate() {
        if i != 4 && i != 7 && !b.is_ascii_digit() {
            return Err(bad());
        }
    }
    let month: u32 = date[5..7].parse().map_err(|_| bad())?;
    let day: u32 = date[8..10].parse().map_err(|_| bad())?;
    if !(1..=12).contains(&month) || !(1..=31).contains(&day) {
        return Err(bad());
    }
    Ok(())
}

/// One matched site location in a census record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geolocation {
    /// Nearest plausible city, when one fits inside the latency disk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub city: Option<String>,
    pub lat: f64,
    pub lon: f64,
}

/// One census line: everything the day learned about one prefix.
///
/// The two confirmation labels partition the published set: a prefix
/// is either confirmed by latency analysis (`gcd_confirmed`) or it
/// remains a multi-VP candidate without latency confirmation
/// (`manycast_confirmed`), never both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusRecord {
    pub date: String,
    pub prefix: Prefix,
    pub candidate_icmp_v4: bool,
    pub candidate_icmp_v6: bool,
    pub candidate_tcp_v4: bool,
    pub candidate_tcp_v6: bool,
    pub candidate_dns_v4: bool,
    pub candidate_dns_v6: bool,
    /// Candidate at two or more vantage points, not latency-confirmed.
    pub manycast_confirmed: bool,
    /// Confirmed anycast by disjoint latency disks.
    pub gcd_confirmed: bool,
    /// Distinct vantage points that captured replies; a lower bound on
    /// the site count as seen by the candidate method.
    pub manycast_site_count: usize,
    /// Provably distinct sites from latency analysis.
    pub gcd_site_count: usize,
    pub geolocations: Vec<Geolocation>,
    /// Vantage points that contributed usable latency samples.
    pub vp_count: usize,
    pub partial_anycast: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chaos_values: Option<Vec<String>>,
}

impl CensusRecord {
    /// Whether the record makes it into the census file.
    pub fn published(&self) -> bool {
        self.manycast_confirmed || self.gcd_confirmed
    }

    pub fn candidate_any(&self) -> bool {
        self.candidate_icmp_v4
            || self.candidate_icmp_v6
            || self.candidate_tcp_v4
            || self.candidate_tcp_v6
            || self.candidate_dns_v4
            || self.candidate_dns_v6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeedbackProvenance {
    Daily,
    LargeScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub prefix: Prefix,
    pub last_confirmed: String,
    pub provenance: FeedbackProvenance,
}

/// Persistent set of every prefix latency analysis has ever confirmed.
///
/// Entries never expire on their own: a prefix stays probed daily even
/// when the candidate stage misses it, and staleness is bounded by the
/// periodic full-hitlist sweep, which rewrites provenance. The set is
/// deliberately protocol-agnostic: confirmation under any protocol
/// keeps the prefix in the loop for all of them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeedbackStore {
    entries: BTreeMap<Prefix, FeedbackEntry>,
}

impl FeedbackStore {
    /// Loads the store; a missing file is an empty store, since the
    /// first census ever has no history.
    pub fn load(path: &Path) -> Result<FeedbackStore, FilesError> {
        if !path.exists() {
            return Ok(FeedbackStore::default());
        }
        let rows: Vec<FeedbackEntry> = files::read_json_lines(path)?;
        let mut entries = BTreeMap::new();
        for row in rows {
            entries.insert(row.prefix, row);
        }
        Ok(FeedbackStore { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), FilesError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|source| FilesError::Write {
                    path: parent.display().to_string(),
                    source,
                })?;
            }
        }
        let rows: Vec<&FeedbackEntry> = self.entries.values().collect();
        files::write_json_lines(path, &rows)
    }

    pub fn confirmed(&self) -> BTreeSet<Prefix> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, prefix: &Prefix) -> Option<&FeedbackEntry> {
        self.entries.get(prefix)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn record(&mut self, prefix: Prefix, date: &str, provenance: FeedbackProvenance) {
        self.entries.insert(
            prefix,
            FeedbackEntry { prefix, last_confirmed: date.to_string(), provenance },
        );
    }
}

/// Headline counts of one census day, kept for baseline monitoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusStats {
    pub date: String,
    /// Candidate prefixes per protocol family (ICMP / TCP / DNS).
    /// Every configured family is present, so a day that collected
    /// nothing shows an explicit zero rather than a missing key.
    pub candidates: BTreeMap<String, u64>,
    pub gcd_confirmed: u64,
    pub published: u64,
    /// Distinct vantage points that captured any candidate-stage
    /// reply; tracks VP outages.
    pub vp_count: u64,
}

/// Protocol family used for candidate accounting: the DNS variants
/// count as one family.
pub fn protocol_family(protocol: Protocol) -> &'static str {
    match protocol {
        Protocol::Icmp => "ICMP",
        Protocol::Tcp => "TCP",
        Protocol::DnsA | Protocol::DnsChaos => "DNS",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "alert", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Alert {
    /// A protocol that historically produces results produced none:
    /// the signature of a broken collection path, not of the Internet
    /// changing shape overnight.
    ZeroResults { metric: String, median: f64 },
    Drift { metric: String, today: f64, median: f64, fraction: f64 },
    VpDrop { today: f64, median: f64, fraction: f64 },
}

fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Compares one day against the trailing medians. With no history at
/// all there is nothing to deviate from and no alerts fire.
pub fn compare_to_baseline(
    today: &CensusStats,
    history: &[CensusStats],
    threshold: f64,
) -> Vec<Alert> {
    let mut alerts = Vec::new();
    if history.is_empty() {
        return alerts;
    }

    let mut families: BTreeSet<&String> = today.candidates.keys().collect();
    for day in history {
        families.extend(day.candidates.keys());
    }
    for family in families {
        let today_v = today.candidates.get(family).copied().unwrap_or(0) as f64;
        let med = median(
            history
                .iter()
                .map(|d| d.candidates.get(family).copied().unwrap_or(0) as f64)
                .collect(),
        );
        let metric = format!("candidates.{family}");
        if today_v == 0.0 && med > 0.0 {
            alerts.push(Alert::ZeroResults { metric, median: med });
        } else if med > 0.0 {
            let fraction = (today_v - med).abs() / med;
            if fraction > threshold {
                alerts.push(Alert::Drift { metric, today: today_v, median: med, fraction });
            }
        }
    }

    let today_gcd = today.gcd_confirmed as f64;
    let med_gcd = median(history.iter().map(|d| d.gcd_confirmed as f64).collect());
    if med_gcd > 0.0 {
        let fraction = (today_gcd - med_gcd).abs() / med_gcd;
        if fraction > threshold {
            alerts.push(Alert::Drift {
                metric: "gcd_confirmed".into(),
                today: today_gcd,
                median: med_gcd,
                fraction,
            });
        }
    }

    // Vantage points: only a drop is alarming. Growth is a deploy.
    let today_vp = today.vp_count as f64;
    let med_vp = median(history.iter().map(|d| d.vp_count as f64).collect());
    if med_vp > 0.0 && today_vp < med_vp {
        let fraction = (med_vp - today_vp) / med_vp;
        if fraction > threshold {
            alerts.push(Alert::VpDrop { today: today_vp, median: med_vp, fraction });
        }
    }
    alerts
}

/// One probing request against the measurement plane.
#[derive(Debug, Clone)]
pub struct ProbePlan {
    pub protocol: Protocol,
    pub ip_version: IpVersion,
    pub source_mode: SourceMode,
    pub rate_pps: u32,
    pub worker_offset_ms: u32,
    pub dns_probe_domain: Option<String>,
    pub targets: Vec<TargetAddress>,
}

#[derive(Debug)]
pub struct MeasurementOutcome {
    pub measurement_id: u32,
    pub spec: MeasurementSpec,
    pub summary: RunSummary,
    pub replies: Vec<ProbeReply>,
}

/// A simulated measurement plane that stays up across stages: one
/// orchestrator, one worker per vantage point, sessions surviving from
/// measurement to measurement the way a real deployment's would.
pub struct SimPlane {
    harness: SimHarness,
    roster: BTreeMap<WorkerId, VantagePoint>,
    next_measurement_id: u32,
}

impl SimPlane {
    pub fn new(world: SimWorld) -> SimPlane {
        let roster = world
            .vantage_points()
            .map(|vp| (vp.worker_id, vp.clone()))
            .collect();
        SimPlane {
            harness: SimHarness::new(world, SIM_AUTH_TOKEN),
            roster,
            next_measurement_id: 1,
        }
    }

    pub fn roster(&self) -> &BTreeMap<WorkerId, VantagePoint> {
        &self.roster
    }

    pub fn harness(&mut self) -> &mut SimHarness {
        &mut self.harness
    }

    /// Runs one measurement to completion and returns its replies.
    /// Targets outside the plan's IP version are refused rather than
    /// silently dropped: a mixed hitlist on a single-version
    /// measurement is a config mistake.
    pub fn measure(&mut self, plan: &ProbePlan) -> Result<MeasurementOutcome, PipelineError> {
        let mut targets: Vec<TargetAddress> = plan.targets.clone();
        targets.sort();
        targets.dedup();
        if targets.is_empty() {
            return Err(PipelineError::Config(format!(
                "no targets for the {} IPv{} measurement",
                plan.protocol,
                u8::from(plan.ip_version == IpVersion::V6) * 2 + 4
            )));
        }
        if let Some(bad) = targets
            .iter()
            .find(|t| IpVersion::of_addr(&t.address()) != plan.ip_version)
        {
            return Err(PipelineError::Config(format!(
                "target {} does not match the measurement's IP version",
                bad.address()
            )));
        }

        let measurement_id = self.next_measurement_id;
        self.next_measurement_id += 1;
        let spec = MeasurementSpec {
            measurement_id,
            protocol: plan.protocol,
            ip_version: plan.ip_version,
            source_mode: plan.source_mode,
            rate_pps: plan.rate_pps,
            worker_offset_ms: plan.worker_offset_ms,
            workers: self.roster.keys().copied().collect(),
            dns_probe_domain: plan.dns_probe_domain.clone(),
            tcp_dst_port: DEFAULT_TCP_DST_PORT,
        };
        let summary = self.harness.run(spec.clone(), targets)?;
        let replies = self
            .harness
            .replies()
            .into_iter()
            .filter(|r| r.measurement_id == measurement_id)
            .collect();
        Ok(MeasurementOutcome { measurement_id, spec, summary, replies })
    }
}

/// Per-prefix accumulation over the candidate stage.
#[derive(Debug, Clone, Default)]
struct PrefixObservation {
    candidate_icmp_v4: bool,
    candidate_icmp_v6: bool,
    candidate_tcp_v4: bool,
    candidate_tcp_v6: bool,
    candidate_dns_v4: bool,
    candidate_dns_v6: bool,
    max_rx_vps: usize,
    chaos: BTreeSet<String>,
}

impl PrefixObservation {
    fn set_candidate(&mut self, protocol: Protocol, version: IpVersion) {
        use IpVersion::{V4, V6};
        match (protocol, version) {
            (Protocol::Icmp, V4) => self.candidate_icmp_v4 = true,
            (Protocol::Icmp, V6) => self.candidate_icmp_v6 = true,
            (Protocol::Tcp, V4) => self.candidate_tcp_v4 = true,
            (Protocol::Tcp, V6) => self.candidate_tcp_v6 = true,
            (Protocol::DnsA | Protocol::DnsChaos, V4) => self.candidate_dns_v4 = true,
            (Protocol::DnsA | Protocol::DnsChaos, V6) => self.candidate_dns_v6 = true,
        }
    }

    fn is_candidate(&self) -> bool {
        self.candidate_icmp_v4
            || self.candidate_icmp_v6
            || self.candidate_tcp_v4
            || self.candidate_tcp_v6
            || self.candidate_dns_v4
            || self.candidate_dns_v6
    }
}

struct AnycastStage {
    observations: BTreeMap<Prefix, PrefixObservation>,
    /// First hitlist address per prefix: the representative the
    /// latency stage probes.
    representatives: BTreeMap<Prefix, TargetAddress>,
    all_prefixes: BTreeSet<Prefix>,
    rx_workers: BTreeSet<WorkerId>,
}

fn run_anycast_stage(
    plane: &mut SimPlane,
    config: &CensusConfig,
    hitlists: &[(MeasurementEntry, Vec<HitlistEntry>)],
    log: &mut Vec<serde_json::Value>,
) -> Result<AnycastStage, PipelineError> {
    let mut stage = AnycastStage {
        observations: BTreeMap::new(),
        representatives: BTreeMap::new(),
        all_prefixes: BTreeSet::new(),
        rx_workers: BTreeSet::new(),
    };
    let mut addr_prefix: BTreeMap<TargetAddress, Prefix> = BTreeMap::new();

    for (entry, hitlist) in hitlists {
        for h in hitlist {
            stage.all_prefixes.insert(h.prefix);
            stage.representatives.entry(h.prefix).or_insert(h.address);
            addr_prefix.insert(h.address, h.prefix);
        }
        let prefixes = files::hitlist_prefixes(hitlist);
        let outcome = plane.measure(&ProbePlan {
            protocol: entry.protocol,
            ip_version: entry.ip_version,
            source_mode: SourceMode::Anycast,
            rate_pps: config.rate_pps,
            worker_offset_ms: config.worker_offset_ms,
            dns_probe_domain: config.dns_probe_domain.clone(),
            targets: files::hitlist_addresses(hitlist),
        })?;
        for reply in &outcome.replies {
            stage.rx_workers.insert(reply.rx_worker);
        }
        let classifications = classify(&prefixes, &outcome.replies, &outcome.spec);
        let mut candidates = 0u64;
        for (prefix, c) in &classifications {
            let obs = stage.observations.entry(*prefix).or_default();
            if c.verdict == Verdict::Candidate {
                obs.set_candidate(entry.protocol, entry.ip_version);
                candidates += 1;
            }
            obs.max_rx_vps = obs.max_rx_vps.max(c.rx_vp_count);
        }
        if entry.protocol == Protocol::DnsChaos {
            for reply in &outcome.replies {
                if let (Some(value), Some(prefix)) =
                    (&reply.chaos_value, addr_prefix.get(&reply.target))
                {
                    stage
                        .observations
                        .entry(*prefix)
                        .or_default()
                        .chaos
                        .insert(value.clone());
                }
            }
        }
        log.push(json!({
            "event": "candidate_measurement",
            "protocol": entry.protocol,
            "ip_version": entry.ip_version,
            "candidates": candidates,
            "summary": outcome.summary,
        }));
    }
    Ok(stage)
}

/// Unicast-source latency probing: ICMP and TCP over the given
/// addresses, all usable round trips pooled. DNS is deliberately
/// excluded from this stage.
fn run_latency_probes(
    plane: &mut SimPlane,
    config: &CensusConfig,
    addresses: &[TargetAddress],
    log: &mut Vec<serde_json::Value>,
) -> Result<Vec<RttSample>, PipelineError> {
    let mut samples: Vec<RttSample> = Vec::new();
    for version in [IpVersion::V4, IpVersion::V6] {
        let subset: Vec<TargetAddress> = addresses
            .iter()
            .filter(|a| IpVersion::of_addr(&a.address()) == version)
            .copied()
            .collect();
        if subset.is_empty() {
            continue;
        }
        for protocol in [Protocol::Icmp, Protocol::Tcp] {
            let outcome = plane.measure(&ProbePlan {
                protocol,
                ip_version: version,
                source_mode: SourceMode::Unicast,
                rate_pps: config.rate_pps,
                worker_offset_ms: config.worker_offset_ms,
                dns_probe_domain: None,
                targets: subset.clone(),
            })?;
            let mut collector = RttCollector::new(plane.roster());
            for reply in &outcome.replies {
                collector.ingest(reply);
            }
            log.push(json!({
                "event": "latency_measurement",
                "protocol": protocol,
                "ip_version": version,
                "samples": collector.samples.len(),
                "cross_site": collector.cross_site,
                "clock_anomalies": collector.clock_anomalies,
                "summary": outcome.summary,
            }));
            samples.append(&mut collector.samples);
        }
    }
    Ok(samples)
}

/// First host of a prefix: the probe target of last resort for
/// feedback prefixes that fell out of today's hitlist.
fn first_host(prefix: &Prefix) -> TargetAddress {
    let addr = match prefix.base() {
        IpAddr::V4(base) => IpAddr::V4((u32::from_be_bytes(base.octets()) + 1).into()),
        IpAddr::V6(base) => IpAddr::V6((u128::from_be_bytes(base.octets()) + 1).into()),
    };
    TargetAddress::of_address(addr)
}

fn read_prefix_set(path: &Path) -> Result<BTreeSet<Prefix>, PipelineError> {
    let text = fs::read_to_string(path)
        .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut set = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let prefix: Prefix = line.parse().map_err(|e| {
            PipelineError::Config(format!("{}:{}: {e}", path.display(), idx + 1))
        })?;
        set.insert(prefix);
    }
    Ok(set)
}

/// Everything a finished census run produced.
#[derive(Debug)]
pub struct CensusOutcome {
    pub census_path: PathBuf,
    pub stats_path: PathBuf,
    pub log_path: PathBuf,
    /// Every record built, published or not, in prefix order.
    pub records: Vec<CensusRecord>,
    pub stats: CensusStats,
    pub alerts: Vec<Alert>,
    /// Prefixes the latency stage probed (candidates plus feedback).
    pub gcd_targets: usize,
    /// Total hitlist prefixes, for cost comparison.
    pub hitlist_prefixes: usize,
}

impl CensusOutcome {
    pub fn published(&self) -> Vec<&CensusRecord> {
        self.records.iter().filter(|r| r.published()).collect()
    }
}

/// Runs one census day end to end. On failure a clearly non-final
/// abort marker lands in the output directory next to whatever partial
/// artifacts exist.
pub fn run_daily_census(config: &CensusConfig) -> Result<CensusOutcome, PipelineError> {
    match run_census_inner(config) {
        Ok(outcome) => Ok(outcome),
        Err(error) => {
            // Best effort: the original error matters more than the
            // marker write.
            let _ = write_abort_marker(config, &error);
            Err(error)
        }
    }
}

fn write_abort_marker(config: &CensusConfig, error: &PipelineError) -> std::io::Result<()> {
    fs::create_dir_all(&config.out_dir)?;
    let marker = config
        .out_dir
        .join(format!("census-{}.aborted.json", config.census_date));
    let body = serde_json::to_string_pretty(&json!({
        "census_date": config.census_date,
        "final": false,
        "error": error.to_string(),
    }))
    .expect("marker serializes");
    fs::write(marker, body)
}

fn run_census_inner(config: &CensusConfig) -> Result<CensusOutcome, PipelineError> {
    let mut log: Vec<serde_json::Value> = Vec::new();
    let date = &config.census_date;

    // Inputs first, so a bad path fails before any probing.
    let world = load_world(&config.world)?;
    let cities = CityTable::load(&config.cities)?;
    let mut feedback = FeedbackStore::load(&config.feedback_store)?;
    let mut hitlists: Vec<(MeasurementEntry, Vec<HitlistEntry>)> = Vec::new();
    for entry in &config.measurements {
        hitlists.push((entry.clone(), files::read_hitlist(&entry.hitlist)?));
    }
    let partial_flags = match &config.partial_flags {
        None => BTreeSet::new(),
        Some(path) => read_prefix_set(path)?,
    };

    let mut plane = SimPlane::new(world);
    log.push(json!({
        "event": "census_start",
        "census_date": date,
        "vps": plane.roster().len(),
        "measurements": config.measurements.len(),
    }));

    // Stage 1: anycast-source candidate measurements over the full
    // hitlists.
    let stage = run_anycast_stage(&mut plane, config, &hitlists, &mut log)?;

    // Stage 2: candidate set, union across protocols, plus every
    // previously confirmed prefix via the feedback store.
    let mut gcd_targets: BTreeMap<Prefix, TargetAddress> = BTreeMap::new();
    for (prefix, obs) in &stage.observations {
        if obs.is_candidate() {
            gcd_targets.insert(*prefix, stage.representatives[prefix]);
        }
    }
    let candidates_today = gcd_targets.len();
    for prefix in feedback.confirmed() {
        let rep = stage
            .representatives
            .get(&prefix)
            .copied()
            .unwrap_or_else(|| first_host(&prefix));
        gcd_targets.entry(prefix).or_insert(rep);
    }
    log.push(json!({
        "event": "candidate_set",
        "candidates": candidates_today,
        "from_feedback": gcd_targets.len() - candidates_today,
        "gcd_targets": gcd_targets.len(),
        "hitlist_prefixes": stage.all_prefixes.len(),
    }));

    // Stage 3: latency confirmation toward the candidate set only.
    let addresses: Vec<TargetAddress> = gcd_targets.values().copied().collect();
    let samples = if addresses.is_empty() {
        Vec::new()
    } else {
        run_latency_probes(&mut plane, config, &addresses, &mut log)?
    };
    let rep_prefix: BTreeMap<TargetAddress, Prefix> =
        gcd_targets.iter().map(|(p, a)| (*a, *p)).collect();
    let mut samples_by_prefix: BTreeMap<Prefix, Vec<RttSample>> = BTreeMap::new();
    for sample in samples {
        if let Some(prefix) = rep_prefix.get(&sample.target) {
            samples_by_prefix.entry(*prefix).or_default().push(sample);
        }
    }
    let mut inferences: BTreeMap<Prefix, GcdInference> = BTreeMap::new();
    for prefix in gcd_targets.keys() {
        let prefix_samples = samples_by_prefix.get(prefix).map_or(&[][..], |v| v.as_slice());
        inferences.insert(*prefix, infer(prefix_samples, &cities));
    }

    // Stage 4: merge into per-prefix records.
    let empty = PrefixObservation::default();
    let mut universe: BTreeSet<Prefix> = stage.all_prefixes.clone();
    universe.extend(gcd_targets.keys().copied());
    let mut records = Vec::with_capacity(universe.len());
    for prefix in universe {
        let obs = stage.observations.get(&prefix).unwrap_or(&empty);
        let inference = inferences.get(&prefix);
        let gcd_confirmed =
            inference.is_some_and(|i| i.verdict == GcdVerdict::Anycast);
        let geolocations = inference
            .map(|i| {
                i.sites
                    .iter()
                    .map(|s| match &s.city {
                        Some(city) => Geolocation {
                            city: Some(city.name.clone()),
                            lat: city.lat,
                            lon: city.lon,
                        },
                        None => Geolocation { city: None, lat: s.lat, lon: s.lon },
                    })
                    .collect()
            })
            .unwrap_or_default();
        records.push(CensusRecord {
            date: date.clone(),
            prefix,
            candidate_icmp_v4: obs.candidate_icmp_v4,
            candidate_icmp_v6: obs.candidate_icmp_v6,
            candidate_tcp_v4: obs.candidate_tcp_v4,
            candidate_tcp_v6: obs.candidate_tcp_v6,
            candidate_dns_v4: obs.candidate_dns_v4,
            candidate_dns_v6: obs.candidate_dns_v6,
            manycast_confirmed: obs.is_candidate() && !gcd_confirmed,
            gcd_confirmed,
            manycast_site_count: obs.max_rx_vps,
            gcd_site_count: inference.map_or(0, |i| i.site_count()),
            geolocations,
            vp_count: inference.map_or(0, |i| i.vp_count_used),
            partial_anycast: partial_flags.contains(&prefix),
            chaos_values: (!obs.chaos.is_empty())
                .then(|| obs.chaos.iter().cloned().collect()),
        });
    }

    // Stage 5: artifacts.
    fs::create_dir_all(&config.out_dir).map_err(|source| FilesError::Write {
        path: config.out_dir.display().to_string(),
        source,
    })?;

    let mut candidates: BTreeMap<String, u64> = config
        .measurements
        .iter()
        .map(|m| (protocol_family(m.protocol).to_string(), 0))
        .collect();
    for record in &records {
        if record.candidate_icmp_v4 || record.candidate_icmp_v6 {
            *candidates.entry("ICMP".into()).or_insert(0) += 1;
        }
        if record.candidate_tcp_v4 || record.candidate_tcp_v6 {
            *candidates.entry("TCP".into()).or_insert(0) += 1;
        }
        if record.candidate_dns_v4 || record.candidate_dns_v6 {
            *candidates.entry("DNS".into()).or_insert(0) += 1;
        }
    }
    let published: Vec<&CensusRecord> = records.iter().filter(|r| r.published()).collect();
    let stats = CensusStats {
        date: date.clone(),
        candidates,
        gcd_confirmed: published.iter().filter(|r| r.gcd_confirmed).count() as u64,
        published: published.len() as u64,
        vp_count: stage.rx_workers.len() as u64,
    };

    let history = load_recent_stats(&config.out_dir, date)?;
    let alerts = compare_to_baseline(&stats, &history, config.baseline_threshold);
    for alert in &alerts {
        log.push(json!({ "event": "baseline_alert", "detail": alert }));
    }

    let census_path = config.out_dir.join(format!("census-{date}.jsonl"));
    let header = [
        ("census_date", date.clone()),
        ("tool_version", crate::TOOL_VERSION.to_string()),
        ("vp_roster_sha256", files::roster_sha256(plane.roster())),
    ];
    files::write_commented(
        &census_path,
        &header,
        published
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes")),
    )?;

    let stats_path = config.out_dir.join(format!("stats-{date}.json"));
    files::write_file(
        &stats_path,
        &format!("{}\n", serde_json::to_string_pretty(&stats).expect("stats serialize")),
    )?;

    for record in &published {
        if record.gcd_confirmed {
            feedback.record(record.prefix, date, FeedbackProvenance::Daily);
        }
    }
    feedback.save(&config.feedback_store)?;

    log.push(json!({
        "event": "census_done",
        "published": stats.published,
        "gcd_confirmed": stats.gcd_confirmed,
        "alerts": alerts.len(),
    }));
    let log_path = config.out_dir.join(format!("log-{date}.jsonl"));
    files::write_json_lines(&log_path, &log)?;

    Ok(CensusOutcome {
        census_path,
        stats_path,
        log_path,
        records,
        stats,
        alerts,
        gcd_targets: gcd_targets.len(),
        hitlist_prefixes: stage.all_prefixes.len(),
    })
}

fn load_recent_stats(out_dir: &Path, today: &str) -> Result<Vec<CensusStats>, PipelineError> {
    let mut dated: Vec<(String, PathBuf)> = Vec::new();
    let entries = match fs::read_dir(out_dir) {
        Err(_) => return Ok(Vec::new()),
        Ok(entries) => entries,
    };
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(date) = name.strip_prefix("stats-").and_then(|n| n.strip_suffix(".json")) {
            // ISO dates order lexicographically.
            if date < today {
                dated.push((date.to_string(), entry.path()));
            }
        }
    }
    dated.sort();
    let recent = dated.split_off(dated.len().saturating_sub(BASELINE_WINDOW_DAYS));
    let mut history = Vec::with_capacity(recent.len());
    for (_, path) in recent {
        let text = fs::read_to_string(&path).map_err(|source| FilesError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let stats: CensusStats = serde_json::from_str(&text).map_err(|e| {
            PipelineError::Config(format!("{} is not a stats file: {e}", path.display()))
        })?;
        history.push(stats);
    }
    Ok(history)
}

/// Flags prefixes that demonstrably contain both anycast and unicast
/// addresses. The map holds per-address latency verdicts for
/// responsive addresses only; addresses that never answered contribute
/// no evidence either way.
pub fn flag_partial_anycast(
    per_address: &BTreeMap<TargetAddress, bool>,
    prefixes: &[Prefix],
) -> BTreeSet<Prefix> {
    let mut flagged = BTreeSet::new();
    for prefix in prefixes {
        let mut saw_anycast = false;
        let mut saw_unicast = false;
        for (addr, is_anycast) in per_address {
            if prefix.contains(addr.address()) {
                if *is_anycast {
                    saw_anycast = true;
                } else {
                    saw_unicast = true;
                }
            }
        }
        if saw_anycast && saw_unicast {
            flagged.insert(*prefix);
        }
    }
    flagged
}

/// One per-address latency verdict from a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddressVerdict {
    pub address: TargetAddress,
    pub anycast: bool,
    pub site_count: usize,
    pub vp_count: usize,
}

#[derive(Debug)]
pub struct SweepOutcome {
    /// Responsive addresses with a usable latency verdict.
    pub per_address: BTreeMap<TargetAddress, bool>,
    pub verdicts: Vec<AddressVerdict>,
    pub partial: BTreeSet<Prefix>,
    /// Prefixes with at least one latency-confirmed anycast address.
    pub confirmed: BTreeSet<Prefix>,
    pub flags_path: PathBuf,
    pub verdicts_path: PathBuf,
}

/// Large-scale per-address latency sweep. `full` probes every hitlist
/// address; otherwise the sweep restricts itself to addresses inside
/// today's candidate prefixes. Either way the analysis runs at host
/// granularity, which is what exposes prefixes that are only partly
/// anycast, and confirmed prefixes top up the feedback store.
pub fn run_sweep(config: &CensusConfig, full: bool) -> Result<SweepOutcome, PipelineError> {
    let mut log: Vec<serde_json::Value> = Vec::new();
    let date = &config.census_date;

    let world = load_world(&config.world)?;
    let cities = CityTable::load(&config.cities)?;
    let mut feedback = FeedbackStore::load(&config.feedback_store)?;
    let mut hitlists: Vec<(MeasurementEntry, Vec<HitlistEntry>)> = Vec::new();
    for entry in &config.measurements {
        hitlists.push((entry.clone(), files::read_hitlist(&entry.hitlist)?));
    }
    let mut plane = SimPlane::new(world);
    log.push(json!({
        "event": "sweep_start",
        "census_date": date,
        "full": full,
        "vps": plane.roster().len(),
    }));

    let mut addr_prefix: BTreeMap<TargetAddress, Prefix> = BTreeMap::new();
    let mut prefixes: BTreeSet<Prefix> = BTreeSet::new();
    for (_, hitlist) in &hitlists {
        for h in hitlist {
            addr_prefix.insert(h.address, h.prefix);
            prefixes.insert(h.prefix);
        }
    }

    let addresses: Vec<TargetAddress> = if full {
        addr_prefix.keys().copied().collect()
    } else {
        let stage = run_anycast_stage(&mut plane, config, &hitlists, &mut log)?;
        let candidates: BTreeSet<Prefix> = stage
            .observations
            .iter()
            .filter(|(_, o)| o.is_candidate())
            .map(|(p, _)| *p)
            .collect();
        addr_prefix
            .iter()
            .filter(|(_, p)| candidates.contains(p))
            .map(|(a, _)| *a)
            .collect()
    };
    if addresses.is_empty() {
        return Err(PipelineError::Config(
            "the sweep has no addresses to probe".into(),
        ));
    }

    let samples = run_latency_probes(&mut plane, config, &addresses, &mut log)?;
    let mut by_address: BTreeMap<TargetAddress, Vec<RttSample>> = BTreeMap::new();
    for sample in samples {
        by_address.entry(sample.target).or_default().push(sample);
    }

    let mut per_address: BTreeMap<TargetAddress, bool> = BTreeMap::new();
    let mut verdicts: Vec<AddressVerdict> = Vec::new();
    for (address, address_samples) in &by_address {
        let inference = infer(address_samples, &cities);
        if inference.verdict == GcdVerdict::InsufficientData {
            // Responded, but to too few vantage points to say anything.
            continue;
        }
        let anycast = inference.verdict == GcdVerdict::Anycast;
        per_address.insert(*address, anycast);
        verdicts.push(AddressVerdict {
            address: *address,
            anycast,
            site_count: inference.site_count(),
            vp_count: inference.vp_count_used,
        });
    }

    let prefix_list: Vec<Prefix> = prefixes.iter().copied().collect();
    let partial = flag_partial_anycast(&per_address, &prefix_list);
    let mut confirmed: BTreeSet<Prefix> = BTreeSet::new();
    for (address, anycast) in &per_address {
        if *anycast {
            if let Some(prefix) = addr_prefix.get(address) {
                confirmed.insert(*prefix);
            }
        }
    }
    for prefix in &confirmed {
        feedback.record(*prefix, date, FeedbackProvenance::LargeScale);
    }
    feedback.save(&config.feedback_store)?;

    fs::create_dir_all(&config.out_dir).map_err(|source| FilesError::Write {
        path: config.out_dir.display().to_string(),
        source,
    })?;
    let flags_path = config.out_dir.join(format!("sweep-{date}-partial.txt"));
    let header = [
        ("census_date", date.clone()),
        ("tool_version", crate::TOOL_VERSION.to_string()),
        ("kind", "partial_anycast_prefixes".to_string()),
    ];
    files::write_commented(&flags_path, &header, partial.iter().map(|p| p.to_string()))?;
    let verdicts_path = config.out_dir.join(format!("sweep-{date}-verdicts.jsonl"));
    files::write_json_lines(&verdicts_path, &verdicts)?;

    log.push(json!({
        "event": "sweep_done",
        "addresses_probed": addresses.len(),
        "responsive_with_verdict": per_address.len(),
        "partial": partial.len(),
        "confirmed_prefixes": confirmed.len(),
    }));
    let log_path = config.out_dir.join(format!("sweep-log-{date}.jsonl"));
    files::write_json_lines(&log_path, &log)?;

    Ok(SweepOutcome { per_address, verdicts, partial, confirmed, flags_path, verdicts_path })
}
