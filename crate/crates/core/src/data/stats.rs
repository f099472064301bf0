use std::io::Write;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::Result;

/// One row of the per-city table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityStats {
    pub city_id: String,
    pub stations: usize,
    pub readings: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population variance (divides by the reading count).
    pub variance: f64,
}

/// Per-city PM2.5 statistics, one row per city in id order. Cities without
/// readings get NaN for the value columns.
pub fn dataset_stats(dataset: &Dataset) -> Vec<CityStats> {
    let by_station = dataset.pollutant_by_station();
    dataset
        .city_ids()
        .into_iter()
        .map(|city| {
            let stations = dataset.stations_of(&city);
            let values: Vec<f64> = stations
                .iter()
                .filter_map(|s| by_station.get(s.id.as_str()))
                .flat_map(|m| m.values().copied())
                .collect();
            let n = values.len();
            let (mut min, mut max, mut mean, mut variance) = (f64::NAN, f64::NAN, f64::NAN, f64::NAN);
            if n > 0 {
                min = values.iter().copied().fold(f64::INFINITY, f64::min);
                max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                mean = values.iter().sum::<f64>() / n as f64;
                variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            }
            CityStats { city_id: city, stations: stations.len(), readings: n, min, max, mean, variance }
        })
        .collect()
}

/// CSV with a leading comment naming the variance convention.
pub fn write_stats_csv(stats: &[CityStats], out: impl Write) -> Result<()> {
    let mut out = out;
    writeln!(out, "# variance: population (divide by n)")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["city_id", "count", "readings", "min", "max", "average", "variance"])?;
    for s in stats {
        w.write_record([
            s.city_id.clone(),
            s.stations.to_string(),
            s.readings.to_string(),
            s.min.to_string(),
            s.max.to_string(),
            s.mean.to_string(),
            s.variance.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
