//! Pending-probe table.
//!
//! CHAOS probes carry identity only in the 16-bit transaction id, so
//! the sending worker remembers (target, txid) -> (measurement, worker,
//! send time) until the reply lands or the entry ages out. Entries
//! live for ten seconds, matching the measurement drain window; with
//! expiry enforced on every insert and lookup the table can never hold
//! more than rate x TTL live entries.

use std::collections::{BTreeMap, VecDeque};
use std::net::IpAddr;

use crate::domain::WorkerId;

/// How long an unanswered probe stays matchable: 10 s, the drain
/// window of a measurement.
pub const PENDING_TTL_US: u64 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PendingEntry {
    pub measurement_id: u32,
    pub worker: WorkerId,
    pub tx_time_us: u64,
}

#[derive(Debug, Default)]
pub struct PendingTable {
    entries: BTreeMap<(IpAddr, u32), PendingEntry>,
    expiry: VecDeque<(u64, (IpAddr, u32))>,
}

impl PendingTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a probe. A second probe to the same (target, key)
    /// replaces the entry; the newest send time is the one an answer
    /// should be attributed to.
    pub fn insert(&mut self, target: IpAddr, match_key: u32, entry: PendingEntry, now_us: u64) {
        self.expire(now_us);
        self.entries.insert((target, match_key), entry);
        self.expiry
            .push_back((entry.tx_time_us.max(now_us), (target, match_key)));
    }

    /// Claims the entry for a reply, removing it. Expired entries do
    /// not match.
    pub fn take(&mut self, target: IpAddr, match_key: u32, now_us: u64) -> Option<PendingEntry> {
        self.expire(now_us);
        self.entries.remove(&(target, match_key))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn expire(&mut self, now_us: u64) {
        while let Some((registered_at, key)) = self.expiry.front().copied() {
            if now_us.saturating_sub(registered_at) < PENDING_TTL_US {
                break;
            }
            self.expiry.pop_front();
            // Only drop the entry if it was not refreshed since.
            if let Some(e) = self.entries.get(&key) {
                if now_us.saturating_sub(e.tx_time_us) >= PENDING_TTL_US {
                    self.entries.remove(&key);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(last: u8) -> IpAddr {
        format!("192.0.2.{last}").parse().unwrap()
    }

    fn entry(tx: u64) -> PendingEntry {
        PendingEntry {
            measurement_id: 1,
            worker: WorkerId(2),
            tx_time_us: tx,
        }
    }

    #[test]
    fn hit_within_ttl_miss_after() {
        let mut t = PendingTable::new();
        t.insert(addr(1), 7, entry(1_000_000), 1_000_000);
        assert_eq!(t.take(addr(1), 7, 10_999_000), Some(entry(1_000_000)));

        let mut t = PendingTable::new();
        t.insert(addr(1), 7, entry(1_000_000), 1_000_000);
        assert_eq!(t.take(addr(1), 7, 11_000_001), None);
    }

    #[test]
    fn take_removes_the_entry() {
        let mut t = PendingTable::new();
        t.insert(addr(1), 7, entry(1_000_000), 1_000_000);
        assert!(t.take(addr(1), 7, 1_500_000).is_some());
        assert!(t.take(addr(1), 7, 1_500_000).is_none());
    }

    #[test]
    fn keys_are_per_target_and_txid() {
        let mut t = PendingTable::new();
        t.insert(addr(1), 7, entry(1_000), 1_000);
        assert!(t.take(addr(2), 7, 2_000).is_none());
        assert!(t.take(addr(1), 8, 2_000).is_none());
        assert!(t.take(addr(1), 7, 2_000).is_some());
    }

    #[test]
    fn reinsert_refreshes_lifetime() {
        let mut t = PendingTable::new();
        t.insert(addr(1), 7, entry(0), 0);
        t.insert(addr(1), 7, entry(9_000_000), 9_000_000);
        // The first registration has aged out, the refresh has not.
        let got = t.take(addr(1), 7, 12_000_000).unwrap();
        assert_eq!(got.tx_time_us, 9_000_000);
    }

    #[test]
    fn size_stays_bounded_under_sustained_probing() {
        // 1,000 probes per second for 60 virtual seconds with no
        // replies: the table must level off around rate x TTL.
        let mut t = PendingTable::new();
        let rate = 1_000u64;
        let step = 1_000_000 / rate;
        for i in 0..60_000u64 {
            let now = i * step;
            t.insert(addr((i % 200) as u8), i as u32, entry(now), now);
            assert!(
                t.len() as u64 <= rate * 10 + 1,
                "table grew to {} at {now}",
                t.len()
            );
        }
    }
}
