use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::factors::{meteo_factor, poi_factor, road_factor, FactorField, FactorVector, FeatureSchema, NormTable};
use super::{relative_position, GeoPoint, RelPos};
use crate::data::{Dataset, Poi, RoadSegment};
use crate::error::{Error, Result};

/// Location whose air quality is inferred.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub city_id: String,
    pub location: GeoPoint,
    /// Set when the target is a monitoring station (training and
    /// evaluation); the station is never used as an input.
    pub station_id: Option<String>,
}

/// Ordered source cities with the canonical (sorted) list of stations that
/// feed each one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceLayout {
    pub cities: Vec<(String, Vec<String>)>,
}

impl SourceLayout {
    pub fn new(cities: Vec<(String, Vec<String>)>) -> Self {
        let cities = cities
            .into_iter()
            .map(|(c, mut s)| {
                s.sort();
                s.dedup();
                (c, s)
            })
            .collect();
        Self { cities }
    }

    /// All stations of `cities` present in `dataset`.
    pub fn from_dataset(dataset: &Dataset, cities: &[String]) -> Self {
        Self::new(
            cities
                .iter()
                .map(|c| (c.clone(), dataset.stations_of(c).iter().map(|s| s.id.clone()).collect()))
                .collect(),
        )
    }

    pub fn city_ids(&self) -> Vec<&str> {
        self.cities.iter().map(|(c, _)| c.as_str()).collect()
    }

    pub fn station_ids(&self) -> impl Iterator<Item = &str> {
        self.cities.iter().flat_map(|(_, s)| s.iter().map(String::as_str))
    }

    pub fn max_stations(&self) -> usize {
        self.cities.iter().map(|(_, s)| s.len()).max().unwrap_or(0)
    }

    pub fn without_station(&self, station: &str) -> Self {
        Self {
            cities: self
                .cities
                .iter()
                .map(|(c, s)| (c.clone(), s.iter().filter(|x| *x != station).cloned().collect()))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetFeatures {
    /// PoI ⊕ road, time-independent.
    pub static_factors: FactorVector,
    /// Meteorology per window step.
    pub sequence: Vec<FactorVector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StationFeatures {
    pub city_id: String,
    /// PoI ⊕ road ⊕ (distance, angle) to the target.
    pub static_factors: FactorVector,
    /// Meteorology ⊕ PM2.5 per window step.
    pub sequence: Vec<FactorVector>,
}

/// Everything the network consumes for one inference.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub t_end: i64,
    pub window: usize,
    pub x_tgt: TargetFeatures,
    pub x_stn: BTreeMap<String, StationFeatures>,
    pub x_city: BTreeMap<String, RelPos>,
}

impl FeatureBundle {
    /// `pm25:<station>:<t>` for every pollutant reading used as input.
    pub fn pollutant_inputs(&self) -> Vec<String> {
        let start = self.t_end - self.window as i64 + 1;
        self.x_stn
            .keys()
            .flat_map(|s| (start..=self.t_end).map(move |t| format!("pm25:{s}:{t}")))
            .collect()
    }
}

/// Normalization tables for every part of a [`FeatureBundle`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub target_static: NormTable,
    pub target_dynamic: NormTable,
    pub station_static: NormTable,
    pub station_dynamic: NormTable,
    pub city: NormTable,
}

impl FeatureNorm {
    pub fn apply(&self, bundle: &FeatureBundle) -> FeatureBundle {
        let norm = |t: &NormTable, f: &FactorVector| super::normalize_with(t, f);
        FeatureBundle {
            t_end: bundle.t_end,
            window: bundle.window,
            x_tgt: TargetFeatures {
                static_factors: norm(&self.target_static, &bundle.x_tgt.static_factors),
                sequence: bundle.x_tgt.sequence.iter().map(|f| norm(&self.target_dynamic, f)).collect(),
            },
            x_stn: bundle
                .x_stn
                .iter()
                .map(|(id, s)| {
                    (
                        id.clone(),
                        StationFeatures {
                            city_id: s.city_id.clone(),
                            static_factors: norm(&self.station_static, &s.static_factors),
                            sequence: s.sequence.iter().map(|f| norm(&self.station_dynamic, f)).collect(),
                        },
                    )
                })
                .collect(),
            x_city: bundle
                .x_city
                .iter()
                .map(|(c, r)| {
                    let mut v = r.as_array();
                    self.city.apply(&mut v);
                    (c.clone(), RelPos { distance: v[0], angle: v[1] })
                })
                .collect(),
        }
    }

    /// PM2.5 maximum used to scale labels.
    pub fn pm25_scale(&self) -> f64 {
        let m = *self.station_dynamic.maxima.last().unwrap_or(&1.0);
        if m > 0.0 {
            m
        } else {
            1.0
        }
    }
}

/// Dense per-station or per-city time series.
#[derive(Clone, Debug)]
struct Series<T> {
    start: i64,
    values: Vec<Option<T>>,
}

impl<T> Series<T> {
    fn from_pairs(pairs: Vec<(i64, T)>) -> Self {
        let start = pairs.iter().map(|p| p.0).min().unwrap_or(0);
        let end = pairs.iter().map(|p| p.0).max().unwrap_or(-1);
        let mut values: Vec<Option<T>> = (start..=end).map(|_| None).collect();
        for (t, v) in pairs {
            values[(t - start) as usize] = Some(v);
        }
        Self { start, values }
    }

    fn get(&self, t: i64) -> Option<&T> {
        if t < self.start {
            return None;
        }
        self.values.get((t - self.start) as usize).and_then(Option::as_ref)
    }

    fn times(&self) -> impl Iterator<Item = i64> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_some())
            .map(move |(i, _)| self.start + i as i64)
    }
}

/// Precomputed factors over a dataset; builds raw or normalized bundles.
#[derive(Clone, Debug)]
pub struct FeatureBuilder {
    schema: FeatureSchema,
    window: usize,
    pois: Vec<Poi>,
    roads: Vec<RoadSegment>,
    station_city: HashMap<String, String>,
    station_location: HashMap<String, GeoPoint>,
    station_static: HashMap<String, FactorVector>,
    city_location: HashMap<String, GeoPoint>,
    pm25: HashMap<String, Series<f64>>,
    meteo: HashMap<String, Series<FactorVector>>,
    location_fields: Arc<[FactorField]>,
    station_static_fields: Arc<[FactorField]>,
    station_dynamic_fields: Arc<[FactorField]>,
}

impl FeatureBuilder {
    pub fn new(dataset: &Dataset, schema: FeatureSchema, window: usize) -> Result<Self> {
        schema.validate()?;
        if window == 0 {
            return Err(Error::Invalid("window must be at least 1".into()));
        }
        let mut location_fields = schema.poi_fields();
        location_fields.extend(schema.road_fields());
        let mut station_static_fields = location_fields.clone();
        station_static_fields.push(FactorField::new("station_location", "distance_km"));
        station_static_fields.push(FactorField::new("station_location", "angle_rad"));
        let mut station_dynamic_fields = schema.meteo_fields();
        station_dynamic_fields.push(FactorField::new("pollutant", "pm25"));

        let mut b = Self {
            schema,
            window,
            pois: dataset.pois.clone(),
            roads: dataset.roads.clone(),
            station_city: HashMap::new(),
            station_location: HashMap::new(),
            station_static: HashMap::new(),
            city_location: HashMap::new(),
            pm25: HashMap::new(),
            meteo: HashMap::new(),
            location_fields: location_fields.into(),
            station_static_fields: station_static_fields.into(),
            station_dynamic_fields: station_dynamic_fields.into(),
        };
        for s in &dataset.stations {
            let f = b.location_factors(s.location)?;
            b.station_static.insert(s.id.clone(), f);
            b.station_city.insert(s.id.clone(), s.city_id.clone());
            b.station_location.insert(s.id.clone(), s.location);
        }
        for c in &dataset.cities {
            if let Some(loc) = dataset.city_location(&c.id) {
                b.city_location.insert(c.id.clone(), loc);
            }
        }
        let mut pm: HashMap<String, Vec<(i64, f64)>> = HashMap::new();
        for r in &dataset.pollutant {
            pm.entry(r.station_id.clone()).or_default().push((r.t, r.pm25));
        }
        b.pm25 = pm.into_iter().map(|(k, v)| (k, Series::from_pairs(v))).collect();
        let mut meteo: HashMap<String, Vec<(i64, FactorVector)>> = HashMap::new();
        for m in &dataset.meteo {
            meteo.entry(m.city_id.clone()).or_default().push((m.t, meteo_factor(m, &b.schema)?));
        }
        b.meteo = meteo.into_iter().map(|(k, v)| (k, Series::from_pairs(v))).collect();
        Ok(b)
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// PoI ⊕ road counts around `l`.
    pub fn location_factors(&self, l: GeoPoint) -> Result<FactorVector> {
        let p = poi_factor(l, &self.pois, &self.schema.poi_categories)?;
        let r = road_factor(l, &self.roads, &self.schema.road_categories)?;
        Ok(FactorVector::concat(&[&p, &r]))
    }

    fn target_static(&self, target: &TargetSpec) -> Result<FactorVector> {
        match target.station_id.as_ref().and_then(|s| self.station_static.get(s)) {
            Some(f) if self.station_location.get(target.station_id.as_ref().unwrap()) == Some(&target.location) => {
                Ok(f.clone())
            }
            _ => self.location_factors(target.location),
        }
    }

    pub fn city_location(&self, city: &str) -> Result<GeoPoint> {
        self.city_location
            .get(city)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("unknown city {city:?}")))
    }

    pub fn station_location(&self, station: &str) -> Result<GeoPoint> {
        self.station_location
            .get(station)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("unknown station {station:?}")))
    }

    pub fn pm25(&self, station: &str, t: i64) -> Option<f64> {
        self.pm25.get(station).and_then(|s| s.get(t)).copied()
    }

    /// Times with a recorded reading for `station`.
    pub fn pm25_times(&self, station: &str) -> Vec<i64> {
        self.pm25.get(station).map(|s| s.times().collect()).unwrap_or_default()
    }

    pub fn meteo_times(&self, city: &str) -> Vec<i64> {
        self.meteo.get(city).map(|s| s.times().collect()).unwrap_or_default()
    }

    fn window_range(&self, t_end: i64) -> std::ops::RangeInclusive<i64> {
        (t_end - self.window as i64 + 1)..=t_end
    }

    fn missing(label: String, absent: &[i64]) -> Error {
        Error::MissingData {
            station: label,
            from: *absent.first().unwrap(),
            to: *absent.last().unwrap(),
        }
    }

    fn meteo_window(&self, city: &str, t_end: i64) -> Result<Vec<FactorVector>> {
        let series = self.meteo.get(city);
        let mut out = Vec::with_capacity(self.window);
        let mut absent = Vec::new();
        for t in self.window_range(t_end) {
            match series.and_then(|s| s.get(t)) {
                Some(v) => out.push(v.clone()),
                None => absent.push(t),
            }
        }
        if absent.is_empty() {
            Ok(out)
        } else {
            Err(Self::missing(format!("meteo of city {city}"), &absent))
        }
    }

    /// Whether every input of a bundle ending at `t_end` exists.
    pub fn covers(&self, target: &TargetSpec, t_end: i64, layout: &SourceLayout) -> bool {
        let Some(tm) = self.meteo.get(&target.city_id) else {
            return false;
        };
        for t in self.window_range(t_end) {
            if tm.get(t).is_none() {
                return false;
            }
            for s in layout.station_ids() {
                let ok = self.pm25(s, t).is_some()
                    && self
                        .station_city
                        .get(s)
                        .and_then(|c| self.meteo.get(c))
                        .and_then(|m| m.get(t))
                        .is_some();
                if !ok {
                    return false;
                }
            }
        }
        true
    }

    /// Unnormalized bundle.
    pub fn raw_bundle(&self, target: &TargetSpec, t_end: i64, layout: &SourceLayout) -> Result<FeatureBundle> {
        let x_tgt = TargetFeatures {
            static_factors: self.target_static(target)?,
            sequence: self.meteo_window(&target.city_id, t_end)?,
        };
        let target_city_loc = self.city_location(&target.city_id)?;
        let mut x_stn = BTreeMap::new();
        let mut x_city = BTreeMap::new();
        for (city, stations) in &layout.cities {
            x_city.insert(city.clone(), relative_position(self.city_location(city)?, target_city_loc));
            let meteo = self.meteo_window(city, t_end)?;
            for s in stations {
                if target.station_id.as_deref() == Some(s.as_str()) {
                    return Err(Error::Invalid(format!("station {s} is both target and input")));
                }
                let loc = self.station_location(s)?;
                if self.station_city.get(s) != Some(city) {
                    return Err(Error::Invalid(format!("station {s} does not belong to city {city}")));
                }
                let rel = relative_position(loc, target.location);
                let mut static_values = self.station_static[s].values().to_vec();
                static_values.extend(rel.as_array());
                let mut sequence = Vec::with_capacity(self.window);
                let mut absent = Vec::new();
                for (m, t) in meteo.iter().zip(self.window_range(t_end)) {
                    match self.pm25(s, t) {
                        Some(v) => {
                            let mut values = m.values().to_vec();
                            values.push(v);
                            sequence.push(FactorVector::new(values, self.station_dynamic_fields.clone())?);
                        }
                        None => absent.push(t),
                    }
                }
                if !absent.is_empty() {
                    return Err(Self::missing(s.clone(), &absent));
                }
                x_stn.insert(
                    s.clone(),
                    StationFeatures {
                        city_id: city.clone(),
                        static_factors: FactorVector::new(static_values, self.station_static_fields.clone())?,
                        sequence,
                    },
                );
            }
        }
        Ok(FeatureBundle {
            t_end,
            window: self.window,
            x_tgt,
            x_stn,
            x_city,
        })
    }

    pub fn bundle(&self, target: &TargetSpec, t_end: i64, layout: &SourceLayout, norm: &FeatureNorm) -> Result<FeatureBundle> {
        Ok(norm.apply(&self.raw_bundle(target, t_end, layout)?))
    }

    /// Fits normalization tables on the training targets and layouts.
    /// Static and relative-position factors cover every (target, station)
    /// combination; time-dependent factors cover every recorded step.
    pub fn fit_norm(&self, groups: &[(Vec<TargetSpec>, SourceLayout)]) -> Result<FeatureNorm> {
        let mut target_static = Vec::new();
        let mut station_static = Vec::new();
        let mut city = Vec::new();
        let mut target_cities = std::collections::BTreeSet::new();
        let mut stations = std::collections::BTreeSet::new();
        for (targets, layout) in groups {
            for target in targets {
                target_static.push(self.target_static(target)?.values().to_vec());
                target_cities.insert(target.city_id.clone());
                let tc = self.city_location(&target.city_id)?;
                for (c, ss) in &layout.cities {
                    city.push(relative_position(self.city_location(c)?, tc).as_array().to_vec());
                    for s in ss {
                        let mut v = self.station_static[s].values().to_vec();
                        v.extend(relative_position(self.station_location(s)?, target.location).as_array());
                        station_static.push(v);
                        stations.insert(s.clone());
                    }
                }
            }
        }
        let mut target_dynamic = Vec::new();
        for c in &target_cities {
            if let Some(series) = self.meteo.get(c) {
                target_dynamic.extend(series.values.iter().flatten().map(|f| f.values().to_vec()));
            }
        }
        let mut station_dynamic = Vec::new();
        for s in &stations {
            let (Some(pm), Some(m)) = (self.pm25.get(s), self.meteo.get(&self.station_city[s])) else {
                continue;
            };
            for t in pm.times() {
                if let Some(mv) = m.get(t) {
                    let mut v = mv.values().to_vec();
                    v.push(*pm.get(t).unwrap());
                    station_dynamic.push(v);
                }
            }
        }
        let fit = |fields: &Arc<[FactorField]>, rows: &[Vec<f64>]| NormTable::fit(fields.to_vec(), rows.iter().map(Vec::as_slice));
        let city_fields: Arc<[FactorField]> =
            vec![FactorField::new("city_location", "distance_km"), FactorField::new("city_location", "angle_rad")].into();
        let meteo_fields: Arc<[FactorField]> = self.schema.meteo_fields().into();
        Ok(FeatureNorm {
            target_static: fit(&self.location_fields, &target_static)?,
            target_dynamic: fit(&meteo_fields, &target_dynamic)?,
            station_static: fit(&self.station_static_fields, &station_static)?,
            station_dynamic: fit(&self.station_dynamic_fields, &station_dynamic)?,
            city: fit(&city_fields, &city)?,
        })
    }
}

/// Raw bundle for `target` with every station of the `sources` cities as
/// inputs, using the default schema.
pub fn build_features(target: &TargetSpec, t_end: i64, window: usize, dataset: &Dataset, sources: &[String]) -> Result<FeatureBundle> {
    let builder = FeatureBuilder::new(dataset, FeatureSchema::default(), window)?;
    let mut layout = SourceLayout::from_dataset(dataset, sources);
    if let Some(s) = &target.station_id {
        layout = layout.without_station(s);
    }
    builder.raw_bundle(target, t_end, &layout)
}
