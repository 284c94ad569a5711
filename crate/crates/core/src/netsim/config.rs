//! World descriptions as TOML files.
//!
//! A world lists its vantage points and targets. Targets come in two
//! forms: explicit entries with hand-placed sites (used when a test
//! needs exact geometry) and generator groups that stamp out runs of
//! consecutive prefixes with seeded random sites (used for population
//! scale). Both end up as the same [`SimTarget`] values, and the
//! generated ones depend only on the world seed, never on parse order.

use std::net::IpAddr;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::domain::{IpVersion, Prefix, VantagePoint};

use super::{mix, SimError, SimSite, SimTarget, SimTargetKind, SimWorld};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    #[serde(default)]
    pub flap_rate: f64,
    #[serde(default)]
    pub ecmp_fraction: f64,
    #[serde(default)]
    pub jitter_ms: f64,
    #[serde(default)]
    pub catchment_noise_km: f64,
    pub vps: Vec<VantagePoint>,
    #[serde(default)]
    pub targets: Vec<TargetEntry>,
    #[serde(default)]
    pub groups: Vec<GroupEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteEntry {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
}

impl SiteEntry {
    fn to_site(&self) -> SimSite {
        SimSite { name: self.name.clone(), lat: self.lat, lon: self.lon }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetEntry {
    pub prefix: String,
    /// unicast | anycast | partial | unresponsive
    pub kind: String,
    #[serde(default)]
    pub sites: Vec<SiteEntry>,
    #[serde(default)]
    pub unicast_site: Option<SiteEntry>,
    #[serde(default)]
    pub anycast_addresses: Vec<String>,
    #[serde(default)]
    pub unicast_addresses: Vec<String>,
    /// Scripted route-change times, replacing the seeded flap process
    /// for this target.
    #[serde(default)]
    pub flap_times_s: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupEntry {
    /// unicast | anycast | unresponsive
    pub kind: String,
    pub count: u32,
    /// First prefix; later ones follow block by block.
    pub first_prefix: String,
    #[serde(default = "default_sites_min")]
    pub sites_min: u32,
    #[serde(default = "default_sites_max")]
    pub sites_max: u32,
}

fn default_sites_min() -> u32 {
    2
}

fn default_sites_max() -> u32 {
    4
}

impl WorldConfig {
    pub fn from_toml_str(text: &str) -> Result<WorldConfig, SimError> {
        toml::from_str(text).map_err(|e| SimError::Toml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<WorldConfig, SimError> {
        WorldConfig::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn build(&self) -> Result<SimWorld, SimError> {
        let mut targets = Vec::new();
        for entry in &self.targets {
            targets.push(entry.to_target()?);
        }
        for (group_idx, group) in self.groups.iter().enumerate() {
            group.generate(self.seed, group_idx, &mut targets)?;
        }
        SimWorld::new(
            self.seed,
            self.flap_rate,
            self.ecmp_fraction,
            self.jitter_ms,
            self.catchment_noise_km,
            self.vps.clone(),
            targets,
        )
    }
}

/// Parses a world file and builds the world in one step.
pub fn load_world(path: &Path) -> Result<SimWorld, SimError> {
    WorldConfig::load(path)?.build()
}

fn parse_prefix(text: &str) -> Result<Prefix, SimError> {
    text.parse().map_err(|e| SimError::Config(format!("prefix {text}: {e}")))
}

fn parse_addr(text: &str) -> Result<IpAddr, SimError> {
    text.parse().map_err(|_| SimError::Config(format!("{text} is not an IP address")))
}

impl TargetEntry {
    fn to_target(&self) -> Result<SimTarget, SimError> {
        let prefix = parse_prefix(&self.prefix)?;
        let kind = match self.kind.as_str() {
            "unicast" => {
                if self.sites.len() != 1 {
                    return Err(SimError::Config(format!(
                        "unicast target {} needs exactly one site, got {}",
                        self.prefix,
                        self.sites.len()
                    )));
                }
                SimTargetKind::Unicast { site: self.sites[0].to_site() }
            }
            "anycast" => {
                SimTargetKind::Anycast { sites: self.sites.iter().map(SiteEntry::to_site).collect() }
            }
            "partial" => {
                let unicast_site = self.unicast_site.as_ref().ok_or_else(|| {
                    SimError::Config(format!("partial target {} needs unicast_site", self.prefix))
                })?;
                SimTargetKind::Partial {
                    anycast_sites: self.sites.iter().map(SiteEntry::to_site).collect(),
                    unicast_site: unicast_site.to_site(),
                    anycast_addresses: self
                        .anycast_addresses
                        .iter()
                        .map(|a| parse_addr(a))
                        .collect::<Result<_, _>>()?,
                    unicast_addresses: self
                        .unicast_addresses
                        .iter()
                        .map(|a| parse_addr(a))
                        .collect::<Result<_, _>>()?,
                }
            }
            "unresponsive" => SimTargetKind::Unresponsive,
            other => {
                return Err(SimError::Config(format!(
                    "target {} has unknown kind {other:?}",
                    self.prefix
                )))
            }
        };
        let flap_times_us = match &self.flap_times_s {
            None => None,
            Some(times) => {
                let mut us: Vec<u64> = times
                    .iter()
                    .map(|t| {
                        if !t.is_finite() || *t < 0.0 {
                            return Err(SimError::Config(format!(
                                "target {} has a negative flap time",
                                self.prefix
                            )));
                        }
                        Ok((t * 1e6) as u64)
                    })
                    .collect::<Result<_, _>>()?;
                us.sort_unstable();
                Some(us)
            }
        };
        Ok(SimTarget { prefix, kind, flap_times_us })
    }
}

impl GroupEntry {
    fn generate(&self, seed: u64, group_idx: usize, out: &mut Vec<SimTarget>) -> Result<(), SimError> {
        if self.sites_min < 1 || self.sites_min > self.sites_max {
            return Err(SimError::Config(format!(
                "group {group_idx}: sites_min..sites_max {}..{} is not a valid range",
                self.sites_min, self.sites_max
            )));
        }
        let first = parse_prefix(&self.first_prefix)?;
        for i in 0..self.count {
            let prefix = nth_prefix(&first, u128::from(i)).ok_or_else(|| {
                SimError::Config(format!(
                    "group {group_idx}: prefix {} + {i} blocks runs off the address space",
                    self.first_prefix
                ))
            })?;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(
                seed,
                &[b"group", &(group_idx as u32).to_be_bytes(), &i.to_be_bytes()],
            ));
            let kind = match self.kind.as_str() {
                "unicast" => SimTargetKind::Unicast { site: random_site(&mut rng, group_idx, i, 0) },
                "anycast" => {
                    let n = rng.gen_range(self.sites_min..=self.sites_max);
                    SimTargetKind::Anycast {
                        sites: (0..n).map(|k| random_site(&mut rng, group_idx, i, k)).collect(),
                    }
                }
                "unresponsive" => SimTargetKind::Unresponsive,
                other => {
                    return Err(SimError::Config(format!(
                        "group {group_idx} has unknown kind {other:?}"
                    )))
                }
            };
            out.push(SimTarget { prefix, kind, flap_times_us: None });
        }
        Ok(())
    }
}

/// `first` moved forward by `n` blocks of its own size.
fn nth_prefix(first: &Prefix, n: u128) -> Option<Prefix> {
    let len = first.len();
    match first.base() {
        IpAddr::V4(base) => {
            let step = 1u64 << (32 - u32::from(len));
            let bits = u64::from(u32::from_be_bytes(base.octets())).checked_add(step.checked_mul(u64::try_from(n).ok()?)?)?;
            let bits = u32::try_from(bits).ok()?;
            Prefix::new(IpAddr::V4(std::net::Ipv4Addr::from(bits)), len).ok()
        }
        IpAddr::V6(base) => {
            let step = 1u128 << (128 - u32::from(len));
            let bits = u128::from_be_bytes(base.octets()).checked_add(step.checked_mul(n)?)?;
            Prefix::new(IpAddr::V6(std::net::Ipv6Addr::from(bits)), len).ok()
        }
    }
}

/// Uniform point on the sphere, named after its coordinates in the
/// generation scheme.
fn random_site(rng: &mut ChaCha8Rng, group_idx: usize, target_idx: u32, site_idx: u32) -> SimSite {
    let u: f64 = rng.gen();
    let v: f64 = rng.gen();
    SimSite {
        name: format!("g{group_idx}t{target_idx}s{site_idx}"),
        lat: (2.0 * u - 1.0).asin().to_degrees(),
        lon: 360.0 * v - 180.0,
    }
}

impl IpVersion {
    /// The version every prefix in a world must share with the
    /// vantage point addresses probing it; worlds themselves may mix.
    pub fn of_addr(addr: &IpAddr) -> IpVersion {
        match addr {
            IpAddr::V4(_) => IpVersion::V4,
            IpAddr::V6(_) => IpVersion::V6,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::WorkerId;
    use crate::netsim::TargetKindLabel;

    const DEMO: &str = r#"
        seed = 42
        flap_rate = 0.0
        ecmp_fraction = 0.0
        jitter_ms = 0.0
        catchment_noise_km = 0.0

        [[vps]]
        worker_id = 1
        name = "ams"
        lat = 52.37
        lon = 4.9
        unicast_address = "10.0.1.1"
        anycast_address = "198.51.100.1"

        [[vps]]
        worker_id = 2
        name = "nyc"
        lat = 40.71
        lon = -74.01
        unicast_address = "10.0.2.1"
        anycast_address = "198.51.100.2"

        [[targets]]
        prefix = "192.0.2.0/24"
        kind = "unicast"
        sites = [{ name = "par", lat = 48.86, lon = 2.35 }]
        flap_times_s = [12.5, 2.0]

        [[targets]]
        prefix = "203.0.113.0/24"
        kind = "anycast"
        sites = [
            { name = "fra", lat = 50.11, lon = 8.68 },
            { name = "hnd", lat = 35.55, lon = 139.78 },
        ]

        [[groups]]
        kind = "unicast"
        count = 3
        first_prefix = "10.64.0.0/24"
        sites_min = 1
        sites_max = 1

        [[groups]]
        kind = "anycast"
        count = 2
        first_prefix = "10.80.0.0/24"
        sites_min = 2
        sites_max = 3
    "#;

    #[test]
    fn demo_config_builds() {
        let world = WorldConfig::from_toml_str(DEMO).unwrap().build().unwrap();
        assert_eq!(world.vantage_points().count(), 2);
        assert_eq!(world.targets().len(), 2 + 3 + 2);
        // Group prefixes step block by block.
        let prefixes: Vec<String> =
            world.targets().iter().map(|t| t.prefix.to_string()).collect();
        assert!(prefixes.contains(&"10.64.0.0/24".to_string()));
        assert!(prefixes.contains(&"10.64.1.0/24".to_string()));
        assert!(prefixes.contains(&"10.64.2.0/24".to_string()));
        // Scripted flap times are sorted into order.
        assert_eq!(
            world.targets()[0].flap_times_us,
            Some(vec![2_000_000, 12_500_000])
        );
        // Generated anycast targets respect the site count range.
        let truth = world.ground_truth();
        for record in truth.iter().filter(|r| r.kind == TargetKindLabel::Anycast) {
            assert!((2..=3).contains(&record.site_count));
        }
    }

    #[test]
    fn generated_targets_depend_only_on_seed() {
        let a = WorldConfig::from_toml_str(DEMO).unwrap().build().unwrap();
        let b = WorldConfig::from_toml_str(DEMO).unwrap().build().unwrap();
        assert_eq!(a.ground_truth(), b.ground_truth());
        assert_eq!(a.default_hitlist(), b.default_hitlist());
    }

    #[test]
    fn bad_configs_are_refused_with_context() {
        let bad_kind = DEMO.replace("kind = \"unicast\"", "kind = \"multicast\"");
        let err = WorldConfig::from_toml_str(&bad_kind).unwrap().build().unwrap_err();
        assert!(err.to_string().contains("multicast"), "{err}");

        let unknown_field = format!("{DEMO}\nwrong_knob = 1\n");
        assert!(WorldConfig::from_toml_str(&unknown_field).is_err());

        let off_the_edge = r#"
            seed = 1
            [[vps]]
            worker_id = 1
            name = "x"
            lat = 0.0
            lon = 0.0
            unicast_address = "10.0.1.1"
            anycast_address = "198.51.100.1"
            [[groups]]
            kind = "unicast"
            count = 2
            first_prefix = "255.255.255.0/24"
            sites_min = 1
            sites_max = 1
        "#;
        let err = WorldConfig::from_toml_str(off_the_edge).unwrap().build().unwrap_err();
        assert!(err.to_string().contains("address space"), "{err}");
    }

    #[test]
    fn worker_roster_matches_vps() {
        let world = WorldConfig::from_toml_str(DEMO).unwrap().build().unwrap();
        assert!(world.vp(WorkerId(1)).is_some());
        assert!(world.vp(WorkerId(9)).is_none());
    }
}
