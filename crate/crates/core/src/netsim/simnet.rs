//! The simulated-world probe transport.
//!
//! One [`SimFabric`] wraps a world and carries every worker's traffic
//! on a virtual clock; each worker gets a [`SimNet`] handle onto it.
//! Sends are delivered through the world model and queued for their
//! arrival time at the destination worker; receives drain whatever
//! has arrived by the caller's clock. Everything is single-threaded —
//! handles share the fabric through `Rc<RefCell>`.

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::net::IpAddr;
use std::rc::Rc;

use crate::domain::WorkerId;
use crate::probecodec::EncodedProbe;
use crate::worker::{Capture, ProbeTransport, TransportError};

use super::{Delivery, SimWorld};

#[derive(Debug)]
struct QueuedDelivery {
    rx_time_us: u64,
    delivery: Delivery,
}

pub struct SimFabric {
    pub world: SimWorld,
    now_us: u64,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    in_flight: BTreeMap<u64, QueuedDelivery>,
    next_seq: u64,
    inboxes: BTreeMap<WorkerId, Vec<Capture>>,
}

impl SimFabric {
    pub fn new(world: SimWorld) -> Rc<RefCell<SimFabric>> {
        Rc::new(RefCell::new(SimFabric {
            world,
            now_us: 0,
            queue: BinaryHeap::new(),
            in_flight: BTreeMap::new(),
            next_seq: 0,
            inboxes: BTreeMap::new(),
        }))
    }

    /// The fabric's clock only moves forward.
    pub fn set_now(&mut self, now_us: u64) {
        debug_assert!(now_us >= self.now_us, "virtual time cannot run backwards");
        self.now_us = now_us;
    }

    pub fn now(&self) -> u64 {
        self.now_us
    }

    /// Earliest queued arrival, for the event loop's next wakeup.
    pub fn next_arrival(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse((t, _))| *t)
    }

    fn send(&mut self, probe: &EncodedProbe, from: WorkerId, source: IpAddr) {
        let at = self.now_us;
        if let Some(delivery) = self.world.deliver(probe, from, source, at) {
            // Sequence numbers tie-break equal arrival times into send order.
            let seq = self.next_seq;
            self.next_seq += 1;
            self.queue.push(Reverse((delivery.rx_time_us, seq)));
            self.in_flight.insert(seq, QueuedDelivery { rx_time_us: delivery.rx_time_us, delivery });
        }
    }

    /// Moves every delivery due by `now_us` into its worker's inbox.
    fn pump(&mut self, now_us: u64) {
        while self.queue.peek().is_some_and(|Reverse((t, _))| *t <= now_us) {
            let Reverse((_, seq)) = self.queue.pop().expect("peeked");
            let queued = self.in_flight.remove(&seq).expect("queued delivery");
            let capture = Capture {
                payload: queued.delivery.payload,
                src: queued.delivery.src,
                rx_time_us: queued.rx_time_us,
            };
            self.inboxes.entry(queued.delivery.arrives_at).or_default().push(capture);
        }
    }
}

/// One worker's handle onto the shared fabric.
pub struct SimNet {
    fabric: Rc<RefCell<SimFabric>>,
    worker: WorkerId,
}

impl SimNet {
    pub fn new(fabric: Rc<RefCell<SimFabric>>, worker: WorkerId) -> SimNet {
        SimNet { fabric, worker }
    }
}

impl ProbeTransport for SimNet {
    fn send(&mut self, probe: &EncodedProbe, source: IpAddr) -> Result<(), TransportError> {
        self.fabric.borrow_mut().send(probe, self.worker, source);
        Ok(())
    }

    fn recv_ready(&mut self, now_us: u64) -> Vec<Capture> {
        let mut fabric = self.fabric.borrow_mut();
        fabric.pump(now_us);
        fabric.inboxes.get_mut(&self.worker).map(std::mem::take).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{
        IpVersion, MeasurementSpec, Protocol, SourceMode, TargetAddress, VantagePoint,
    };
    use crate::netsim::{SimSite, SimTarget, SimTargetKind};
    use crate::probecodec::encode_probe;

    fn world() -> SimWorld {
        let vps = vec![
            VantagePoint {
                worker_id: WorkerId(1),
                name: "ams".into(),
                lat: 52.37,
                lon: 4.90,
                unicast_address: "10.0.1.1".parse().unwrap(),
                anycast_address: "198.51.100.1".parse().unwrap(),
            },
            VantagePoint {
                worker_id: WorkerId(2),
                name: "nyc".into(),
                lat: 40.71,
                lon: -74.01,
                unicast_address: "10.0.2.1".parse().unwrap(),
                anycast_address: "198.51.100.2".parse().unwrap(),
            },
        ];
        let target = SimTarget {
            prefix: "192.0.2.0/24".parse().unwrap(),
            kind: SimTargetKind::Unicast {
                site: SimSite { name: "par".into(), lat: 48.86, lon: 2.35 },
            },
            flap_times_us: None,
        };
        SimWorld::new(5, 0.0, 0.0, 0.0, 0.0, vps, vec![target]).unwrap()
    }

    fn spec() -> MeasurementSpec {
        MeasurementSpec {
            measurement_id: 1,
            protocol: Protocol::Icmp,
            ip_version: IpVersion::V4,
            source_mode: SourceMode::Unicast,
            rate_pps: 100,
            worker_offset_ms: 1000,
            workers: vec![WorkerId(1), WorkerId(2)],
            dns_probe_domain: None,
            tcp_dst_port: 62222,
        }
    }

    #[test]
    fn sends_queue_and_arrive_on_the_virtual_clock() {
        let fabric = SimFabric::new(world());
        let mut net1 = SimNet::new(fabric.clone(), WorkerId(1));

        fabric.borrow_mut().set_now(1_000);
        let target = TargetAddress::of_address("192.0.2.1".parse().unwrap());
        let probe = encode_probe(&spec(), target, WorkerId(1), 1, 1_000).unwrap();
        net1.send(&probe, "10.0.1.1".parse().unwrap()).unwrap();

        let arrival = fabric.borrow().next_arrival().unwrap();
        assert!(arrival > 1_000);
        // Not there yet one tick early, there at the arrival time.
        assert!(net1.recv_ready(arrival - 1).is_empty());
        let captures = net1.recv_ready(arrival);
        assert_eq!(captures.len(), 1);
        assert_eq!(captures[0].rx_time_us, arrival);
        assert_eq!(captures[0].src, "192.0.2.1".parse::<IpAddr>().unwrap());
        assert!(fabric.borrow().next_arrival().is_none());
    }

    #[test]
    fn arrivals_go_to_the_destination_worker_only() {
        let fabric = SimFabric::new(world());
        let mut net1 = SimNet::new(fabric.clone(), WorkerId(1));
        let mut net2 = SimNet::new(fabric.clone(), WorkerId(2));

        let target = TargetAddress::of_address("192.0.2.1".parse().unwrap());
        let probe = encode_probe(&spec(), target, WorkerId(2), 1, 0).unwrap();
        // Worker 2, unicast source: the reply comes back to worker 2.
        net2.send(&probe, "10.0.2.1".parse().unwrap()).unwrap();
        let arrival = fabric.borrow().next_arrival().unwrap();
        assert!(net1.recv_ready(arrival).is_empty());
        assert_eq!(net2.recv_ready(arrival).len(), 1);
    }
}
