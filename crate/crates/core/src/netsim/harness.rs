//! Deterministic event loop around one orchestrator and its workers.
//!
//! Everything runs on a single virtual clock: control frames cross an
//! in-memory link with a fixed one-way latency, probes and replies
//! ride the fabric, and the loop always advances to the next thing
//! due anywhere in the system. Scripted faults kill worker processes,
//! cut their connections, or bring them back, which is how the
//! failure-handling paths get exercised without real sockets.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::domain::{MeasurementSpec, ProbeReply, TargetAddress, VantagePoint, WorkerId};
use crate::orchestrator::{
    ConnId, OrchestratorCore, OrchestratorError, OrchestratorEvent, RunPhase, RunSummary,
};
use crate::wire::Envelope;
use crate::worker::{Worker, WorkerCore};

use super::simnet::{SimFabric, SimNet};
use super::SimWorld;

/// One-way control-plane latency between orchestrator and workers.
pub const CONTROL_LATENCY_US: u64 = 1_000;

/// How often the orchestrator gets a clock-driven tick.
pub const ORCH_TICK_US: u64 = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultKind {
    /// Process death: state is lost; a later Reconnect restarts it.
    Kill,
    /// Connection cut: the process keeps running and buffering.
    Drop,
    /// Dial the orchestrator again (restarting first if killed).
    Reconnect,
}

#[derive(Clone, Copy, Debug)]
struct Fault {
    at_us: u64,
    worker: WorkerId,
    kind: FaultKind,
}

enum Hop {
    ToWorker { worker: WorkerId, conn: ConnId, envelope: Envelope },
    ToOrchestrator { conn: ConnId, envelope: Envelope },
}

struct WorkerNode {
    vp: VantagePoint,
    worker: Worker<SimNet>,
    conn: Option<ConnId>,
    alive: bool,
}

pub struct SimHarness {
    clock_us: u64,
    orchestrator: OrchestratorCore,
    auth_token: String,
    fabric: Rc<RefCell<SimFabric>>,
    nodes: BTreeMap<WorkerId, WorkerNode>,
    /// In-flight control frames, keyed (delivery time, sequence).
    link: BTreeMap<(u64, u64), Hop>,
    link_seq: u64,
    next_conn: u64,
    next_orch_tick_us: u64,
    faults: Vec<Fault>,
    /// Deduplicated replies with their orchestrator arrival times.
    results: Vec<(u64, ProbeReply)>,
    logs: Vec<serde_json::Value>,
}

impl SimHarness {
    /// A harness over `world` with one connected worker per vantage
    /// point, ready to run measurements at virtual time zero.
    pub fn new(world: SimWorld, auth_token: &str) -> SimHarness {
        let vps: Vec<VantagePoint> = world.vantage_points().cloned().collect();
        let mut harness = SimHarness {
            clock_us: 0,
            orchestrator: OrchestratorCore::new(auth_token),
            auth_token: auth_token.to_string(),
            fabric: SimFabric::new(world),
            nodes: BTreeMap::new(),
            link: BTreeMap::new(),
            link_seq: 0,
            next_conn: 1,
            next_orch_tick_us: ORCH_TICK_US,
            faults: Vec::new(),
            results: Vec::new(),
            logs: Vec::new(),
        };
        for vp in vps {
            harness.add_worker(vp);
        }
        harness.settle();
        harness
    }

    /// Drains the control link, advancing the clock as needed, so
    /// every handshake in flight completes.
    fn settle(&mut self) {
        while let Some(((t, _), _)) = self.link.first_key_value() {
            let t = *t;
            self.advance_to(t);
        }
    }

    pub fn clock_us(&self) -> u64 {
        self.clock_us
    }

    pub fn fabric(&self) -> Rc<RefCell<SimFabric>> {
        self.fabric.clone()
    }

    /// Forwarded replies in arrival order, with arrival times.
    pub fn results(&self) -> &[(u64, ProbeReply)] {
        &self.results
    }

    pub fn replies(&self) -> Vec<ProbeReply> {
        self.results.iter().map(|(_, r)| r.clone()).collect()
    }

    pub fn logs(&self) -> &[serde_json::Value] {
        &self.logs
    }

    pub fn schedule_fault(&mut self, at_us: u64, worker: WorkerId, kind: FaultKind) {
        self.faults.push(Fault { at_us, worker, kind });
        self.faults.sort_by_key(|f| f.at_us);
    }

    fn add_worker(&mut self, vp: VantagePoint) {
        let worker_id = vp.worker_id;
        let core = WorkerCore::new(vp.clone(), self.auth_token.clone());
        let transport = SimNet::new(self.fabric.clone(), worker_id);
        self.nodes.insert(
            worker_id,
            WorkerNode { vp, worker: Worker::new(core, transport), conn: None, alive: true },
        );
        self.dial(worker_id);
    }

    /// Opens a fresh connection for a live worker and ships its Hello
    /// (plus any buffered resends).
    fn dial(&mut self, worker_id: WorkerId) {
        let conn = ConnId(self.next_conn);
        self.next_conn += 1;
        self.orchestrator.handle_connect(conn, self.clock_us);
        let node = self.nodes.get_mut(&worker_id).expect("known worker");
        node.conn = Some(conn);
        let envelopes = node.worker.core.connect();
        for envelope in envelopes {
            self.queue(Hop::ToOrchestrator { conn, envelope });
        }
    }

    fn queue(&mut self, hop: Hop) {
        let key = (self.clock_us + CONTROL_LATENCY_US, self.link_seq);
        self.link_seq += 1;
        self.link.insert(key, hop);
    }

    /// Runs one measurement to completion and returns its summary.
    pub fn run(
        &mut self,
        spec: MeasurementSpec,
        targets: Vec<TargetAddress>,
    ) -> Result<RunSummary, OrchestratorError> {
        let events = self.orchestrator.start_run(spec, targets, self.clock_us)?;
        self.apply_orchestrator_events(events);
        self.step_orchestrator();
        while self.orchestrator.run_phase() != Some(RunPhase::Done) {
            let next = self.next_due();
            self.advance_to(next);
        }
        // One more settle pass so acks queued at completion land.
        let next = self.next_due();
        self.advance_to(next);
        Ok(self.orchestrator.summary().expect("run just finished"))
    }

    /// Earliest time anything in the system wants to happen.
    fn next_due(&self) -> u64 {
        let mut due = self.next_orch_tick_us;
        if let Some(((t, _), _)) = self.link.first_key_value() {
            due = due.min(*t);
        }
        if let Some(t) = self.fabric.borrow().next_arrival() {
            due = due.min(t);
        }
        for node in self.nodes.values() {
            if node.alive {
                if let Some(t) = node.worker.core.next_fire() {
                    due = due.min(t);
                }
            }
        }
        if let Some(fault) = self.faults.first() {
            due = due.min(fault.at_us);
        }
        due.max(self.clock_us)
    }

    fn advance_to(&mut self, now_us: u64) {
        self.clock_us = now_us;
        self.fabric.borrow_mut().set_now(now_us);

        while self.faults.first().is_some_and(|f| f.at_us <= now_us) {
            let fault = self.faults.remove(0);
            self.apply_fault(fault);
        }

        while self.link.first_key_value().is_some_and(|((t, _), _)| *t <= now_us) {
            let (_, hop) = self.link.pop_first().expect("peeked");
            self.deliver(hop);
        }

        let worker_ids: Vec<WorkerId> = self.nodes.keys().copied().collect();
        for worker_id in worker_ids {
            let node = self.nodes.get_mut(&worker_id).expect("known worker");
            if !node.alive {
                continue;
            }
            let envelopes = node.worker.tick(now_us);
            let conn = node.conn;
            if let Some(conn) = conn {
                for envelope in envelopes {
                    self.queue(Hop::ToOrchestrator { conn, envelope });
                }
            }
        }

        if now_us >= self.next_orch_tick_us {
            self.step_orchestrator();
        }
    }

    fn step_orchestrator(&mut self) {
        self.next_orch_tick_us = self.clock_us + ORCH_TICK_US;
        let events = self.orchestrator.tick(self.clock_us);
        self.apply_orchestrator_events(events);
    }

    fn deliver(&mut self, hop: Hop) {
        match hop {
            Hop::ToWorker { worker, conn, envelope } => {
                let Some(node) = self.nodes.get_mut(&worker) else { return };
                // Frames racing a closed connection fall on the floor.
                if !node.alive || node.conn != Some(conn) {
                    return;
                }
                let replies = node.worker.handle_control(envelope, self.clock_us);
                for envelope in replies {
                    self.queue(Hop::ToOrchestrator { conn, envelope });
                }
            }
            Hop::ToOrchestrator { conn, envelope } => {
                let events = self.orchestrator.handle_frame(conn, envelope, self.clock_us);
                self.apply_orchestrator_events(events);
            }
        }
    }

    fn apply_orchestrator_events(&mut self, events: Vec<OrchestratorEvent>) {
        for event in events {
            match event {
                OrchestratorEvent::Send { conn, envelope } => {
                    if let Some(worker) = self.worker_of(conn) {
                        self.queue(Hop::ToWorker { worker, conn, envelope });
                    }
                }
                OrchestratorEvent::Close { conn } => {
                    if let Some(worker) = self.worker_of(conn) {
                        if let Some(node) = self.nodes.get_mut(&worker) {
                            node.conn = None;
                        }
                    }
                }
                OrchestratorEvent::Result(reply) => {
                    self.results.push((self.clock_us, reply));
                }
                OrchestratorEvent::Log(line) => {
                    self.logs.push(line);
                }
            }
        }
    }

    fn worker_of(&self, conn: ConnId) -> Option<WorkerId> {
        self.nodes
            .iter()
            .find(|(_, node)| node.conn == Some(conn))
            .map(|(id, _)| *id)
    }

    fn apply_fault(&mut self, fault: Fault) {
        match fault.kind {
            FaultKind::Kill | FaultKind::Drop => {
                let Some(node) = self.nodes.get_mut(&fault.worker) else { return };
                if fault.kind == FaultKind::Kill {
                    node.alive = false;
                    let core = WorkerCore::new(node.vp.clone(), self.auth_token.clone());
                    let transport = SimNet::new(self.fabric.clone(), fault.worker);
                    node.worker = Worker::new(core, transport);
                }
                if let Some(conn) = node.conn.take() {
                    let events = self.orchestrator.handle_disconnect(conn, self.clock_us);
                    self.apply_orchestrator_events(events);
                }
            }
            FaultKind::Reconnect => {
                let Some(node) = self.nodes.get_mut(&fault.worker) else { return };
                node.alive = true;
                if node.conn.is_none() {
                    self.dial(fault.worker);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{IpVersion, Protocol, SourceMode};
    use crate::netsim::{SimSite, SimTarget, SimTargetKind};
    use crate::wire::HEARTBEAT_INTERVAL_US;
    use std::collections::BTreeSet;
    use std::net::IpAddr;

    fn vp(id: u16, name: &str, lat: f64, lon: f64) -> VantagePoint {
        VantagePoint {
            worker_id: WorkerId(id),
            name: name.into(),
            lat,
            lon,
            unicast_address: IpAddr::from([10, 0, id as u8, 1]),
            anycast_address: IpAddr::from([198, 51, 100, id as u8]),
        }
    }

    fn site(name: &str, lat: f64, lon: f64) -> SimSite {
        SimSite { name: name.into(), lat, lon }
    }

    fn unicast(prefix: &str, at: SimSite) -> SimTarget {
        SimTarget { prefix: prefix.parse().unwrap(), kind: SimTargetKind::Unicast { site: at }, flap_times_us: None }
    }

    fn world() -> SimWorld {
        let vps = vec![vp(1, "ams", 52.37, 4.90), vp(2, "syd", -33.87, 151.21)];
        let targets = vec![
            unicast("192.0.2.0/24", site("par", 48.86, 2.35)),
            unicast("198.18.0.0/24", site("mel", -37.81, 144.96)),
            SimTarget {
                prefix: "203.0.113.0/24".parse().unwrap(),
                kind: SimTargetKind::Anycast {
                    sites: vec![site("fra", 50.11, 8.68), site("per", -31.95, 115.86)],
                },
                flap_times_us: None,
            },
            SimTarget {
                prefix: "198.51.200.0/24".parse().unwrap(),
                kind: SimTargetKind::Unresponsive,
                flap_times_us: None,
            },
        ];
        SimWorld::new(11, 0.0, 0.0, 0.0, 0.0, vps, targets).unwrap()
    }

    fn spec(source: SourceMode, rate: u32) -> MeasurementSpec {
        MeasurementSpec {
            measurement_id: 42,
            protocol: Protocol::Icmp,
            ip_version: IpVersion::V4,
            source_mode: source,
            rate_pps: rate,
            worker_offset_ms: 100,
            workers: vec![WorkerId(1), WorkerId(2)],
            dns_probe_domain: None,
            tcp_dst_port: 62222,
        }
    }

    fn hitlist(world: &SimWorld) -> Vec<TargetAddress> {
        world.default_hitlist().into_iter().map(TargetAddress::of_address).collect()
    }

    #[test]
    fn unicast_source_run_returns_every_reply_to_its_sender() {
        let world = world();
        let targets = hitlist(&world);
        let mut harness = SimHarness::new(world, "tok");
        let summary = harness.run(spec(SourceMode::Unicast, 100), targets).unwrap();

        assert_eq!(summary.phase, RunPhase::Done);
        for id in [1_u16, 2] {
            let totals = summary.per_worker[&WorkerId(id)];
            assert_eq!(totals.targets_sent, 4);
            assert_eq!(totals.results_received, 3, "three responsive targets");
        }
        let replies = harness.replies();
        assert_eq!(replies.len(), 6);
        for reply in &replies {
            assert_eq!(reply.tx_worker, reply.rx_worker, "unicast source replies come home");
            assert!(reply.rx_time_us > reply.tx_time_us);
        }
        let probed: BTreeSet<TargetAddress> = replies.iter().map(|r| r.target).collect();
        assert_eq!(probed.len(), 3);
    }

    #[test]
    fn anycast_source_run_shows_the_anycast_target_at_both_vps() {
        let world = world();
        let targets = hitlist(&world);
        let mut harness = SimHarness::new(world, "tok");
        harness.run(spec(SourceMode::Anycast, 100), targets).unwrap();

        let anycast_target = TargetAddress::of_address("203.0.113.1".parse().unwrap());
        let rx: BTreeSet<WorkerId> = harness
            .replies()
            .iter()
            .filter(|r| r.target == anycast_target)
            .map(|r| r.rx_worker)
            .collect();
        assert_eq!(rx.len(), 2, "two catchments see the anycast prefix");
        let unicast_target = TargetAddress::of_address("192.0.2.1".parse().unwrap());
        let rx: BTreeSet<WorkerId> = harness
            .replies()
            .iter()
            .filter(|r| r.target == unicast_target)
            .map(|r| r.rx_worker)
            .collect();
        assert_eq!(rx.len(), 1, "a unicast prefix lands in one catchment");
    }

    #[test]
    fn results_reach_the_orchestrator_promptly() {
        let world = world();
        let targets = hitlist(&world);
        let mut harness = SimHarness::new(world, "tok");
        harness.run(spec(SourceMode::Unicast, 100), targets).unwrap();
        for (arrived_us, reply) in harness.results() {
            assert!(
                arrived_us - reply.rx_time_us <= HEARTBEAT_INTERVAL_US,
                "capture at {} only reached the controller at {}",
                reply.rx_time_us,
                arrived_us
            );
        }
    }

    #[test]
    fn identical_seeds_replay_identical_runs() {
        let build = || {
            let world = world();
            let targets = hitlist(&world);
            let mut harness = SimHarness::new(world, "tok");
            let summary = harness.run(spec(SourceMode::Anycast, 100), targets).unwrap();
            (harness.results().to_vec(), serde_json::to_string(&summary).unwrap())
        };
        let (results_a, summary_a) = build();
        let (results_b, summary_b) = build();
        assert_eq!(results_a, results_b);
        assert_eq!(summary_a, summary_b);
    }

    #[test]
    fn a_connection_blip_loses_no_captured_results() {
        let world = world();
        let targets = hitlist(&world);
        let mut harness = SimHarness::new(world, "tok");
        // Cut worker 2's link before its first fire; its probes still
        // fly and replies buffer until the link comes back.
        harness.schedule_fault(1_050_000, WorkerId(2), FaultKind::Drop);
        harness.schedule_fault(3_000_000, WorkerId(2), FaultKind::Reconnect);
        let summary = harness.run(spec(SourceMode::Unicast, 100), targets).unwrap();

        assert_eq!(summary.per_worker[&WorkerId(2)].results_received, 3);
        assert_eq!(summary.per_worker[&WorkerId(2)].missed_targets, 0);
        let buffered: Vec<_> = harness
            .results()
            .iter()
            .filter(|(_, r)| r.rx_worker == WorkerId(2))
            .collect();
        assert_eq!(buffered.len(), 3);
        for (arrived_us, reply) in buffered {
            assert!(reply.rx_time_us < 3_000_000, "captured during the outage");
            assert!(*arrived_us >= 3_000_000, "forwarded after the reconnect");
        }
    }

    #[test]
    fn a_killed_worker_restarts_and_rejoins_while_survivors_finish() {
        let world = world();
        let targets = hitlist(&world);
        let mut harness = SimHarness::new(world, "tok");
        let mut spec = spec(SourceMode::Unicast, 2);
        spec.worker_offset_ms = 0;
        harness.schedule_fault(1_600_000, WorkerId(2), FaultKind::Kill);
        harness.schedule_fault(2_400_000, WorkerId(2), FaultKind::Reconnect);
        let summary = harness.run(spec, targets).unwrap();

        assert_eq!(summary.phase, RunPhase::Done);
        let w1 = summary.per_worker[&WorkerId(1)];
        assert_eq!(w1.targets_sent, 4, "survivor covers the whole hitlist");
        let w2 = summary.per_worker[&WorkerId(2)];
        assert_eq!(w2.targets_sent + w2.missed_targets, 4);
        assert!(harness
            .logs()
            .iter()
            .any(|l| l["event"] == "worker_resumed" && l["worker"] == 2));
    }
}
