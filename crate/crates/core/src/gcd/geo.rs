//! Great-circle geometry and latency disks.
//!
//! A reply's RTT bounds how far the responding site can be from the
//! vantage point: light in fibre covers about 200,000 km/s, so half the
//! RTT at that speed is a hard radius. Two disks that cannot touch
//! prove two distinct sites.

use serde::{Deserialize, Serialize};

use crate::domain::{VantagePoint, WorkerId};
use crate::gcd::GcdError;

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Propagation speed of light in fibre, km/s. Shared with the
/// simulator so simulated RTTs and disk radii agree by construction.
pub const FIBRE_KM_PER_SEC: f64 = 200_000.0;

/// A point on the sphere, degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        GeoPoint { lat, lon }
    }
}

impl From<(f64, f64)> for GeoPoint {
    fn from((lat, lon): (f64, f64)) -> Self {
        GeoPoint { lat, lon }
    }
}

/// Great-circle distance between two points, haversine form.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat_a = a.lat.to_radians();
    let lat_b = b.lat.to_radians();
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();

    let h = (dlat / 2.0).sin().powi(2) + lat_a.cos() * lat_b.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// The disk of possible site locations implied by one RTT sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyDisk {
    pub vp: WorkerId,
    pub center: GeoPoint,
    pub radius_km: f64,
    pub rtt_us: u64,
}

/// Bounds a disk from an RTT measured at a vantage point.
///
/// radius = fibre speed * rtt/2 = 200,000 km/s * rtt_us / 2e6, i.e.
/// exactly rtt_us / 10 kilometres.
pub fn disk_from_rtt(vp: &VantagePoint, rtt_us: u64) -> Result<LatencyDisk, GcdError> {
    if rtt_us == 0 {
        return Err(GcdError::ZeroRtt);
    }
    Ok(LatencyDisk {
        vp: vp.worker_id,
        center: GeoPoint::new(vp.lat, vp.lon),
        radius_km: rtt_us as f64 / 10.0,
        rtt_us,
    })
}

/// Two disks with no common point: proof of two distinct sites.
/// Touching disks (distance exactly the radius sum) still share a
/// point and are not disjoint.
pub fn disks_disjoint(a: &LatencyDisk, b: &LatencyDisk) -> bool {
    haversine_km(a.center, b.center) > a.radius_km + b.radius_km
}
