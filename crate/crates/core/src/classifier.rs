//! Anycast candidate detection from receiving vantage points.
//!
//! Probes carry an anycast source address, so a reply comes back to
//! whichever vantage point the target's network routes that address
//! to. A prefix whose replies land at one VP looks unicast; replies
//! landing at two or more VPs mean distinct catchments answered, and
//! the prefix becomes an anycast candidate. Candidates are cheap to
//! produce and deliberately err toward inclusion: route flaps and
//! load-balanced paths inflate the receiving set, and anycast
//! deployments whose sites all sit in one catchment deflate it, so
//! the verdicts here feed a latency-based confirmation stage rather
//! than the published census directly.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::domain::{MeasurementSpec, Prefix, ProbeReply, Protocol, WorkerId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Unresponsive,
    Unicast,
    Candidate,
}

impl Verdict {
    /// The verdict is a pure function of how many VPs heard back.
    pub fn of_count(rx_vp_count: usize) -> Verdict {
        match rx_vp_count {
            0 => Verdict::Unresponsive,
            1 => Verdict::Unicast,
            _ => Verdict::Candidate,
        }
    }
}

/// Per-prefix outcome of one measurement's reply stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnycastClassification {
    pub prefix: Prefix,
    pub protocol: Protocol,
    pub rx_vps: BTreeSet<WorkerId>,
    pub rx_vp_count: usize,
    pub verdict: Verdict,
}

impl AnycastClassification {
    fn new(prefix: Prefix, protocol: Protocol) -> AnycastClassification {
        AnycastClassification {
            prefix,
            protocol,
            rx_vps: BTreeSet::new(),
            rx_vp_count: 0,
            verdict: Verdict::Unresponsive,
        }
    }

    fn absorb(&mut self, rx: WorkerId) {
        self.rx_vps.insert(rx);
        self.rx_vp_count = self.rx_vps.len();
        self.verdict = Verdict::of_count(self.rx_vp_count);
    }
}

/// Folds a measurement's replies into one classification per hitlist
/// prefix. Replies from other measurements or protocols, and replies
/// for addresses outside the hitlist, are ignored. Every hitlist
/// prefix gets a record even when nothing answered.
pub fn classify<'a>(
    prefixes: &[Prefix],
    replies: impl IntoIterator<Item = &'a ProbeReply>,
    spec: &MeasurementSpec,
) -> BTreeMap<Prefix, AnycastClassification> {
    let mut out: BTreeMap<Prefix, AnycastClassification> = prefixes
        .iter()
        .map(|p| (*p, AnycastClassification::new(*p, spec.protocol)))
        .collect();
    for reply in replies {
        if reply.measurement_id != spec.measurement_id || reply.protocol != spec.protocol {
            continue;
        }
        let addr = reply.target.address();
        // Census-granularity prefixes hit directly; anything coarser
        // or finer falls back to a containment scan.
        let key = {
            let canonical = Prefix::of_address(addr);
            if out.contains_key(&canonical) {
                Some(canonical)
            } else {
                out.keys().find(|p| p.contains(addr)).copied()
            }
        };
        if let Some(key) = key {
            out.get_mut(&key).expect("key came from the map").absorb(reply.rx_worker);
        }
    }
    out
}

/// The set of prefixes the confirmation stage should probe: current
/// candidates plus everything previously confirmed, so prefixes this
/// stage structurally misses stay covered once found.
pub fn candidate_set(
    classifications: &BTreeMap<Prefix, AnycastClassification>,
    prior_confirmed: &BTreeSet<Prefix>,
) -> Vec<Prefix> {
    let mut set: BTreeSet<Prefix> = classifications
        .values()
        .filter(|c| c.verdict == Verdict::Candidate)
        .map(|c| c.prefix)
        .collect();
    set.extend(prior_confirmed.iter().copied());
    set.into_iter().collect()
}

/// Writes classifications as one JSON object per line, in prefix
/// order: prefix, protocol, verdict, rx_vp_count, rx_vps.
pub fn write_classifications(
    w: &mut impl Write,
    classifications: &BTreeMap<Prefix, AnycastClassification>,
) -> io::Result<()> {
    for classification in classifications.values() {
        let line = serde_json::to_string(classification).expect("classification serializes");
        writeln!(w, "{line}")?;
    }
    Ok(())
}
