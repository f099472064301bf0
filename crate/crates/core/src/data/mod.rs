//! Dataset model, CSV ingestion, the synthetic multi-city generator and
//! per-city statistics.

mod io;
mod stats;
mod synth;

pub use io::{load_dataset, save_dataset, DatasetPaths};
pub use stats::{dataset_stats, write_stats_csv, CityStats};
pub use synth::{generate_synthetic, SynthConfig};

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{centroid, GeoPoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct City {
    pub id: String,
    pub name: String,
    pub location: GeoPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub city_id: String,
    pub location: GeoPoint,
}

/// Hourly PM2.5 reading in µg/m³.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PollutantRecord {
    pub station_id: String,
    pub t: i64,
    pub pm25: f64,
}

/// City-level hourly meteorology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeteoRecord {
    pub city_id: String,
    pub t: i64,
    pub weather: String,
    pub temperature: f64,
    pub pressure: f64,
    pub humidity: f64,
    pub wind_speed: f64,
    pub wind_direction: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: String,
    pub location: GeoPoint,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: String,
    pub start: GeoPoint,
    pub end: GeoPoint,
    pub category: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub cities: Vec<City>,
    pub stations: Vec<Station>,
    pub pollutant: Vec<PollutantRecord>,
    pub meteo: Vec<MeteoRecord>,
    pub pois: Vec<Poi>,
    pub roads: Vec<RoadSegment>,
}

impl Dataset {
    /// Referential integrity and value checks; every violation is reported.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut city_ids = HashSet::new();
        for c in &self.cities {
            if !city_ids.insert(c.id.as_str()) {
                problems.push(format!("duplicate city id {:?}", c.id));
            }
        }
        let mut station_ids = HashSet::new();
        for s in &self.stations {
            if !station_ids.insert(s.id.as_str()) {
                problems.push(format!("duplicate station id {:?}", s.id));
            }
            if !city_ids.contains(s.city_id.as_str()) {
                problems.push(format!(
                    "station {:?} references unknown city {:?}",
                    s.id, s.city_id
                ));
            }
        }
        let mut seen_pm = HashSet::new();
        for r in &self.pollutant {
            if !station_ids.contains(r.station_id.as_str()) {
                problems.push(format!(
                    "pollutant record at t={} references unknown station {:?}",
                    r.t, r.station_id
                ));
            }
            if !(r.pm25.is_finite() && r.pm25 >= 0.0) {
                problems.push(format!(
                    "station {:?} t={}: pm25 {} is not a non-negative number",
                    r.station_id, r.t, r.pm25
                ));
            }
            if !seen_pm.insert((r.station_id.as_str(), r.t)) {
                problems.push(format!(
                    "duplicate pollutant record for station {:?} at t={}",
                    r.station_id, r.t
                ));
            }
        }
        let mut seen_meteo = HashSet::new();
        for m in &self.meteo {
            if !city_ids.contains(m.city_id.as_str()) {
                problems.push(format!(
                    "meteo record at t={} references unknown city {:?}",
                    m.t, m.city_id
                ));
            }
            if !seen_meteo.insert((m.city_id.as_str(), m.t)) {
                problems.push(format!(
                    "duplicate meteo record for city {:?} at t={}",
                    m.city_id, m.t
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Integrity(problems))
        }
    }

    pub fn city(&self, id: &str) -> Option<&City> {
        self.cities.iter().find(|c| c.id == id)
    }

    pub fn station(&self, id: &str) -> Option<&Station> {
        self.stations.iter().find(|s| s.id == id)
    }

    /// Stations of a city in canonical (id) order.
    pub fn stations_of(&self, city_id: &str) -> Vec<&Station> {
        let mut v: Vec<&Station> = self.stations.iter().filter(|s| s.city_id == city_id).collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }

    pub fn city_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.cities.iter().map(|c| c.id.clone()).collect();
        ids.sort();
        ids
    }

    /// Representative location: centroid of the city's station coordinates,
    /// or the listed city location when it has no stations.
    pub fn city_location(&self, city_id: &str) -> Option<GeoPoint> {
        let pts: Vec<GeoPoint> = self.stations_of(city_id).iter().map(|s| s.location).collect();
        centroid(&pts).or_else(|| self.city(city_id).map(|c| c.location))
    }

    /// Inclusive `(min, max)` of all pollutant time indices.
    pub fn time_range(&self) -> Option<(i64, i64)> {
        let min = self.pollutant.iter().map(|r| r.t).min()?;
        let max = self.pollutant.iter().map(|r| r.t).max()?;
        Some((min, max))
    }

    /// Copy whose pollutant records come only from `stations`. Station
    /// coordinates are kept so city locations stay unchanged.
    pub fn with_pollutant_from(&self, stations: &BTreeSet<String>) -> Dataset {
        Dataset {
            pollutant: self
                .pollutant
                .iter()
                .filter(|r| stations.contains(&r.station_id))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    /// Readings grouped by station, ordered by time.
    pub fn pollutant_by_station(&self) -> BTreeMap<&str, BTreeMap<i64, f64>> {
        let mut out: BTreeMap<&str, BTreeMap<i64, f64>> = BTreeMap::new();
        for r in &self.pollutant {
            out.entry(r.station_id.as_str()).or_default().insert(r.t, r.pm25);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let p = GeoPoint::new(30.0, 110.0).unwrap();
        Dataset {
            cities: vec![City { id: "c1".into(), name: "One".into(), location: p }],
            stations: vec![Station { id: "s1".into(), city_id: "c1".into(), location: p }],
            pollutant: vec![PollutantRecord { station_id: "s1".into(), t: 0, pm25: 3.0 }],
            ..Default::default()
        }
    }

    #[test]
    fn valid_dataset_passes() {
        tiny().validate().unwrap();
    }

    #[test]
    fn integrity_violations_are_all_listed() {
        let mut d = tiny();
        d.stations.push(Station {
            id: "s2".into(),
            city_id: "nowhere".into(),
            location: d.cities[0].location,
        });
        d.pollutant.push(PollutantRecord { station_id: "ghost".into(), t: 1, pm25: -1.0 });
        match d.validate() {
            Err(Error::Integrity(v)) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn city_location_falls_back_to_listed_point() {
        let mut d = tiny();
        d.cities.push(City {
            id: "c2".into(),
            name: "Two".into(),
            location: GeoPoint::new(10.0, 10.0).unwrap(),
        });
        assert_eq!(d.city_location("c2").unwrap().lat(), 10.0);
        assert_eq!(d.city_location("c1").unwrap().lat(), 30.0);
    }
}
