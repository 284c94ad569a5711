//! The vantage-point agent.
//!
//! A worker holds no hitlist and no results: the orchestrator streams
//! targets in with absolute fire times, the worker fires each probe at
//! its time through a pluggable transport, decodes whatever comes back
//! (its own echoes and, on anycast sources, other workers' echoes),
//! and streams the decoded rows out again immediately. Memory use is
//! bounded by probing rate, not hitlist size.
//!
//! [`WorkerCore`] is a pure state machine: control envelopes and
//! captured packets in, control envelopes and probe emissions out,
//! with every time taken as an argument. [`Worker`] binds a core to a
//! [`ProbeTransport`] — the real raw-socket implementation or the
//! simulator — and the two are interchangeable under the same tests.

use std::collections::BinaryHeap;
use std::net::IpAddr;

use serde::Serialize;

use crate::domain::{MeasurementSpec, ProbeReply, SourceMode, TargetAddress, WorkerId};
use crate::probecodec::{self, EncodedProbe, PendingTable};
use crate::wire::{ControlMessage, Envelope, Sequencer, PROTOCOL_VERSION};

pub mod raw;

/// A worker drops targets whose fire time is further in the past than
/// this; anything younger still fires (late, but counted on time by
/// the schedule's own clock).
pub const MAX_FIRE_LAG_US: u64 = 1_000_000;

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("transport refused: {0}")]
    Refused(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One captured packet, as raw as the transport can keep it.
#[derive(Debug, Clone)]
pub struct Capture {
    pub payload: Vec<u8>,
    pub src: IpAddr,
    pub rx_time_us: u64,
}

/// Where probes go out and captures come in. Implementations must be
/// interchangeable: the raw-socket transport and the simulator pass
/// the same conformance tests.
pub trait ProbeTransport {
    fn send(&mut self, probe: &EncodedProbe, source: IpAddr) -> Result<(), TransportError>;

    /// Everything captured up to `now_us`, in arrival order. Never
    /// blocks.
    fn recv_ready(&mut self, now_us: u64) -> Vec<Capture>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct WorkerCounters {
    pub fired: u64,
    pub stale_targets: u64,
    pub cancelled_targets: u64,
    pub send_failures: u64,
    pub replies_decoded: u64,
    pub unmatched: u64,
    pub foreign_batches: u64,
}

/// Scheduled fire, min-ordered by time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Fire {
    at_us: u64,
    target: TargetAddress,
}

impl Ord for Fire {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Reversed: BinaryHeap is a max-heap, we want the earliest.
        other.at_us.cmp(&self.at_us).then_with(|| other.target.cmp(&self.target))
    }
}

impl PartialOrd for Fire {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug)]
pub enum WorkerAction {
    /// Put this probe on the wire from the given source address.
    EmitProbe { probe: EncodedProbe, source: IpAddr },
    /// Ship this envelope to the orchestrator.
    Send(Envelope),
}

#[derive(Debug)]
pub struct WorkerCore {
    vp: crate::domain::VantagePoint,
    auth_token: String,
    spec: Option<MeasurementSpec>,
    schedule: BinaryHeap<Fire>,
    pending: PendingTable,
    seq: Sequencer,
    /// Result batches not yet covered by an orchestrator Ack, with the
    /// envelope seq they were last sent under. Survives reconnects;
    /// cleared when the measurement ends.
    unacked: Vec<(u64, ControlMessage)>,
    icmp_seq: u16,
    pub counters: WorkerCounters,
}

impl WorkerCore {
    pub fn new(vp: crate::domain::VantagePoint, auth_token: String) -> WorkerCore {
        WorkerCore {
            vp,
            auth_token,
            spec: None,
            schedule: BinaryHeap::new(),
            pending: PendingTable::new(),
            seq: Sequencer::new(),
            unacked: Vec::new(),
            icmp_seq: 0,
            counters: WorkerCounters::default(),
        }
    }

    pub fn id(&self) -> WorkerId {
        self.vp.worker_id
    }

    pub fn measuring(&self) -> Option<&MeasurementSpec> {
        self.spec.as_ref()
    }

    /// Opens a session: fresh sequence numbers, a Hello, and a resend
    /// of every result batch the previous session never got credit
    /// for. The orchestrator deduplicates, so resending is always
    /// safe.
    pub fn connect(&mut self) -> Vec<Envelope> {
        self.seq = Sequencer::new();
        let mut out = vec![self.seq.wrap(ControlMessage::Hello {
            worker_id: self.vp.worker_id,
            auth_token: self.auth_token.clone(),
            capabilities: vec!["probe".into()],
            protocol_version: PROTOCOL_VERSION,
        })];
        for (sent_seq, msg) in &mut self.unacked {
            let env = self.seq.wrap(msg.clone());
            *sent_seq = env.seq;
            out.push(env);
        }
        out
    }

    /// Earliest moment anything is due to fire.
    pub fn next_fire(&self) -> Option<u64> {
        self.schedule.peek().map(|f| f.at_us)
    }

    pub fn handle_control(&mut self, envelope: Envelope, now_us: u64) -> Vec<WorkerAction> {
        match envelope.msg {
            ControlMessage::StartMeasurement { spec } => {
                match &self.spec {
                    // Replay of the measurement already running (the
                    // orchestrator resumed our session): keep going.
                    Some(current) if current.measurement_id == spec.measurement_id => {}
                    _ => {
                        self.spec = Some(spec);
                        self.schedule.clear();
                        self.pending = PendingTable::new();
                        self.icmp_seq = 0;
                    }
                }
                vec![]
            }
            ControlMessage::TargetBatch { measurement_id, entries } => {
                match &self.spec {
                    Some(spec) if spec.measurement_id == measurement_id => {
                        for (target, fire_at_us) in entries {
                            self.schedule.push(Fire { at_us: fire_at_us, target });
                        }
                    }
                    _ => self.counters.foreign_batches += 1,
                }
                vec![]
            }
            ControlMessage::EndMeasurement { measurement_id } => {
                if self.spec.as_ref().map(|s| s.measurement_id) == Some(measurement_id) {
                    self.counters.cancelled_targets += self.schedule.len() as u64;
                    self.spec = None;
                    self.schedule.clear();
                    self.unacked.clear();
                }
                vec![]
            }
            // The orchestrator pings; we echo our clock immediately so
            // it can estimate skew from the round trip.
            ControlMessage::Heartbeat { .. } => {
                vec![WorkerAction::Send(
                    self.seq.wrap(ControlMessage::Heartbeat { sent_at_us: now_us }),
                )]
            }
            ControlMessage::Ack { seq } => {
                self.unacked.retain(|(sent_seq, _)| *sent_seq > seq);
                vec![]
            }
            // Worker-bound sessions never carry these.
            ControlMessage::Hello { .. } | ControlMessage::ResultBatch { .. } => vec![],
        }
    }

    /// Fires everything due by `now_us`. Emission order is schedule
    /// order, and the probe's recorded send time is the actual send
    /// time.
    pub fn tick(&mut self, now_us: u64) -> Vec<WorkerAction> {
        let mut out = Vec::new();
        let Some(spec) = self.spec.clone() else {
            return out;
        };
        let source = match spec.source_mode {
            SourceMode::Anycast => self.vp.anycast_address,
            SourceMode::Unicast => self.vp.unicast_address,
        };
        while self.schedule.peek().is_some_and(|f| f.at_us <= now_us) {
            let fire = self.schedule.pop().expect("peeked");
            if now_us.saturating_sub(fire.at_us) > MAX_FIRE_LAG_US {
                self.counters.stale_targets += 1;
                continue;
            }
            self.icmp_seq = self.icmp_seq.wrapping_add(1);
            let probe = match probecodec::encode_probe(
                &spec,
                fire.target,
                self.vp.worker_id,
                self.icmp_seq,
                now_us,
            ) {
                Ok(p) => p,
                Err(_) => {
                    self.counters.send_failures += 1;
                    continue;
                }
            };
            probecodec::register_pending(&mut self.pending, &probe, now_us);
            self.counters.fired += 1;
            out.push(WorkerAction::EmitProbe { probe, source });
        }
        out
    }

    /// Decodes one captured packet. A match becomes a ProbeReply and
    /// an immediate ResultBatch; anything else is counted and dropped.
    pub fn handle_capture(&mut self, capture: Capture, now_us: u64) -> Vec<WorkerAction> {
        let Some(spec) = self.spec.clone() else {
            self.counters.unmatched += 1;
            return vec![];
        };
        let Some(decoded) = probecodec::decode_reply(
            &spec,
            &capture.payload,
            capture.src,
            &mut self.pending,
            now_us,
        ) else {
            self.counters.unmatched += 1;
            return vec![];
        };
        self.counters.replies_decoded += 1;
        let reply = ProbeReply {
            measurement_id: decoded.measurement_id,
            target: TargetAddress::of_address(capture.src),
            protocol: spec.protocol,
            tx_worker: decoded.src_worker,
            rx_worker: self.vp.worker_id,
            tx_time_us: decoded.tx_time_us,
            rx_time_us: capture.rx_time_us,
            chaos_value: decoded.chaos_value,
        };
        let msg = ControlMessage::ResultBatch {
            measurement_id: spec.measurement_id,
            replies: vec![reply],
        };
        let env = self.seq.wrap(msg.clone());
        self.unacked.push((env.seq, msg));
        vec![WorkerAction::Send(env)]
    }
}

/// A core wired to a transport. The runner supplies time and moves
/// control envelopes; this moves packets.
pub struct Worker<T: ProbeTransport> {
    pub core: WorkerCore,
    pub transport: T,
}

impl<T: ProbeTransport> Worker<T> {
    pub fn new(core: WorkerCore, transport: T) -> Worker<T> {
        Worker { core, transport }
    }

    /// Fires due probes and processes due captures. Returns control
    /// envelopes to ship to the orchestrator.
    pub fn tick(&mut self, now_us: u64) -> Vec<Envelope> {
        let mut out = Vec::new();
        for action in self.core.tick(now_us) {
            match action {
                WorkerAction::EmitProbe { probe, source } => {
                    if self.transport.send(&probe, source).is_err() {
                        self.core.counters.send_failures += 1;
                    }
                }
                WorkerAction::Send(env) => out.push(env),
            }
        }
        for capture in self.transport.recv_ready(now_us) {
            for action in self.core.handle_capture(capture, now_us) {
                match action {
                    WorkerAction::Send(env) => out.push(env),
                    WorkerAction::EmitProbe { .. } => unreachable!("captures never emit"),
                }
            }
        }
        out
    }

    pub fn handle_control(&mut self, envelope: Envelope, now_us: u64) -> Vec<Envelope> {
        self.core
            .handle_control(envelope, now_us)
            .into_iter()
            .filter_map(|a| match a {
                WorkerAction::Send(env) => Some(env),
                WorkerAction::EmitProbe { .. } => None,
            })
            .collect()
    }
}
