//! City table for site geolocation.
//!
//! Tab-separated text, one city per line. Two layouts are accepted:
//! the compact four-column form `name  lat  lon  population`, and full
//! GeoNames rows (19 columns), from which name, coordinates and
//! population are taken by position. Lines starting with `#` and blank
//! lines are skipped.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gcd::geo::{haversine_km, GeoPoint};
use crate::gcd::GcdError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct City {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    pub population: u64,
}

impl City {
    pub fn location(&self) -> GeoPoint {
        GeoPoint::new(self.lat, self.lon)
    }
}

#[derive(Clone, Debug, Default)]
pub struct CityTable {
    cities: Vec<City>,
}

/// Column positions in a full GeoNames row.
const GEONAMES_NAME: usize = 1;
const GEONAMES_LAT: usize = 4;
const GEONAMES_LON: usize = 5;
const GEONAMES_POPULATION: usize = 14;
const GEONAMES_COLUMNS: usize = 19;

impl CityTable {
    pub fn load(path: &Path) -> Result<Self, GcdError> {
        let text = std::fs::read_to_string(path).map_err(|source| GcdError::CityIo {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            GcdError::CityParse { line, reason, .. } => GcdError::CityParse {
                path: path.display().to_string(),
                line,
                reason,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, GcdError> {
        let mut cities = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let (name, lat_s, lon_s, pop_s) = if fields.len() == 4 {
                (fields[0], fields[1], fields[2], fields[3])
            } else if fields.len() >= GEONAMES_COLUMNS {
                (
                    fields[GEONAMES_NAME],
                    fields[GEONAMES_LAT],
                    fields[GEONAMES_LON],
                    fields[GEONAMES_POPULATION],
                )
            } else {
                return Err(parse_err(line_no, format!("expected 4 or 19+ tab-separated columns, got {}", fields.len())));
            };
            let lat: f64 = lat_s
                .trim()
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad latitude {lat_s:?}")))?;
            let lon: f64 = lon_s
                .trim()
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad longitude {lon_s:?}")))?;
            if !(-90.0..=90.0).contains(&lat) {
                return Err(parse_err(line_no, format!("latitude {lat} out of range")));
            }
            if !(-180.0..=180.0).contains(&lon) {
                return Err(parse_err(line_no, format!("longitude {lon} out of range")));
            }
            let population: u64 = pop_s
                .trim()
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad population {pop_s:?}")))?;
            let name = name.trim();
            if name.is_empty() {
                return Err(parse_err(line_no, "empty city name".to_string()));
            }
            cities.push(City {
                name: name.to_string(),
                lat,
                lon,
                population,
            });
        }
        Ok(CityTable { cities })
    }

    pub fn len(&self) -> usize {
        self.cities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cities.is_empty()
    }

    pub fn cities(&self) -> &[City] {
        &self.cities
    }

    /// The most plausible host city for a site somewhere in the given
    /// disk: the highest-population city within `radius_km` of the
    /// centre. Population ties go to the lexicographically smallest
    /// name so the answer never depends on table order.
    pub fn geolocate(&self, center: GeoPoint, radius_km: f64) -> Option<&City> {
        let mut best: Option<&City> = None;
        for city in &self.cities {
            if haversine_km(center, city.location()) > radius_km {
                continue;
            }
            best = match best {
                None => Some(city),
                Some(b) => {
                    if city.population > b.population
                        || (city.population == b.population && city.name < b.name)
                    {
                        Some(city)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        best
    }
}

fn parse_err(line: usize, reason: String) -> GcdError {
    GcdError::CityParse {
        path: String::new(),
        line,
        reason,
    }
}
