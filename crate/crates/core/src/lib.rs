//! Anycast census toolkit.
//!
//! The crate is organised around one daily loop: probe a hitlist from
//! anycast sources, classify each prefix by how many vantage points saw
//! replies, confirm candidates with latency disks probed from unicast
//! sources, and publish the merged records. A deterministic network
//! simulator stands in for the real internet so every stage can be
//! exercised, end to end, in virtual time.
//!
//! Modules, roughly bottom-up:
//!
//! * [`domain`] - prefixes, targets, vantage points, measurement specs,
//!   probe replies.
//! * [`probecodec`] - wire encoding of probe identity into ICMP, TCP and
//!   DNS packets, and recovery of that identity from replies.
//! * [`wire`] - length-prefixed control protocol between orchestrator
//!   and workers.
//! * [`netsim`] - seeded discrete-event internet model plus the
//!   in-process harness that runs whole measurements in virtual time.
//! * [`worker`] - probe scheduling, capture, and the transport
//!   abstraction (raw sockets or simulator).
//! * [`orchestrator`] - hitlist ownership, target streaming, rate
//!   control, session supervision, result aggregation.
//! * [`classifier`] - anycast candidate detection from reply spread.
//! * [`gcd`] - great-circle geometry: latency disks, disjointness
//!   detection, site enumeration, city geolocation.
//! * [`pipeline`] - the census itself: stage sequencing, record merge,
//!   feedback store, baseline monitoring.
//! * [`runtime`] - live TCP/unix-socket plumbing around the sans-IO
//!   cores: the orchestrator service and the worker agent loop.
//! * [`cli`] - the `anycensus` binary.

pub mod classifier;
pub mod cli;
pub mod domain;
pub mod files;
pub mod gcd;
pub mod netsim;
pub mod orchestrator;
pub mod pipeline;
pub mod probecodec;
pub mod runtime;
pub mod wire;
pub mod worker;

/// Version string stamped into census file headers.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
