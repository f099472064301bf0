use std::fs::File;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{City, Dataset, MeteoRecord, PollutantRecord, Poi, RoadSegment, Station};
use crate::error::{Error, Result};
use crate::geo::GeoPoint;

/// Locations of the six dataset files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub cities: PathBuf,
    pub stations: PathBuf,
    pub air_quality: PathBuf,
    pub meteo: PathBuf,
    pub poi: PathBuf,
    pub roads: PathBuf,
}

impl DatasetPaths {
    /// Standard file names inside `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        Self {
            cities: d.join("cities.csv"),
            stations: d.join("stations.csv"),
            air_quality: d.join("air_quality.csv"),
            meteo: d.join("meteo.csv"),
            poi: d.join("poi.csv"),
            roads: d.join("roads.csv"),
        }
    }

    pub fn all(&self) -> [&Path; 6] {
        [&self.cities, &self.stations, &self.air_quality, &self.meteo, &self.poi, &self.roads]
    }
}

#[derive(Serialize, Deserialize)]
struct CityRow {
    city_id: String,
    name: String,
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct StationRow {
    station_id: String,
    city_id: String,
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct PoiRow {
    poi_id: String,
    lat: f64,
    lon: f64,
    category: String,
}

#[derive(Serialize, Deserialize)]
struct RoadRow {
    road_id: String,
    lat1: f64,
    lon1: f64,
    lat2: f64,
    lon2: f64,
    category: String,
}

fn read_rows<T: DeserializeOwned, U>(path: &Path, mut convert: impl FnMut(T) -> Result<U>) -> Result<Vec<U>> {
    let file = path.display().to_string();
    let handle = File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{file}: {e}"))))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(handle);
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    let headers = reader.headers()?.clone();
    loop {
        let line = reader.position().line() + 1;
        let parse_err = |msg: String| Error::Parse { file: file.clone(), line, msg };
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map_or(line, |p| p.line());
                let parse_err = |msg: String| Error::Parse { file: file.clone(), line, msg };
                let row: T = record.deserialize(Some(&headers)).map_err(|e| parse_err(e.to_string()))?;
                out.push(convert(row).map_err(|e| parse_err(e.to_string()))?);
            }
            Err(e) => return Err(parse_err(e.to_string())),
        }
    }
    Ok(out)
}

fn point(lat: f64, lon: f64) -> Result<GeoPoint> {
    GeoPoint::new(lat, lon)
}

/// Reads and validates a dataset.
pub fn load_dataset(paths: &DatasetPaths) -> Result<Dataset> {
    let cities = read_rows(&paths.cities, |r: CityRow| {
        Ok(City { id: r.city_id, name: r.name, location: point(r.lat, r.lon)? })
    })?;
    let stations = read_rows(&paths.stations, |r: StationRow| {
        Ok(Station { id: r.station_id, city_id: r.city_id, location: point(r.lat, r.lon)? })
    })?;
    let pollutant: Vec<PollutantRecord> = read_rows(&paths.air_quality, Ok)?;
    if pollutant.is_empty() {
        return Err(Error::Parse {
            file: paths.air_quality.display().to_string(),
            line: 1,
            msg: "no records".into(),
        });
    }
    let meteo: Vec<MeteoRecord> = read_rows(&paths.meteo, Ok)?;
    let pois = read_rows(&paths.poi, |r: PoiRow| {
        Ok(Poi { id: r.poi_id, location: point(r.lat, r.lon)?, category: r.category })
    })?;
    let roads = read_rows(&paths.roads, |r: RoadRow| {
        Ok(RoadSegment {
            id: r.road_id,
            start: point(r.lat1, r.lon1)?,
            end: point(r.lat2, r.lon2)?,
            category: r.category,
        })
    })?;
    let dataset = Dataset { cities, stations, pollutant, meteo, pois, roads };
    dataset.validate()?;
    Ok(dataset)
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the six CSV files; floats use the shortest exact representation so
/// loading gives back the same values.
pub fn save_dataset(dataset: &Dataset, paths: &DatasetPaths) -> Result<()> {
    write_rows(
        &paths.cities,
        &["city_id", "name", "lat", "lon"],
        dataset.cities.iter().map(|c| CityRow {
            city_id: c.id.clone(),
            name: c.name.clone(),
            lat: c.location.lat(),
            lon: c.location.lon(),
        }),
    )?;
    write_rows(
        &paths.stations,
        &["station_id", "city_id", "lat", "lon"],
        dataset.stations.iter().map(|s| StationRow {
            station_id: s.id.clone(),
            city_id: s.city_id.clone(),
            lat: s.location.lat(),
            lon: s.location.lon(),
        }),
    )?;
    write_rows(&paths.air_quality, &["station_id", "t", "pm25"], &dataset.pollutant)?;
    write_rows(
        &paths.meteo,
        &["city_id", "t", "weather", "temperature", "pressure", "humidity", "wind_speed", "wind_direction"],
        &dataset.meteo,
    )?;
    write_rows(
        &paths.poi,
        &["poi_id", "lat", "lon", "category"],
        dataset.pois.iter().map(|p| PoiRow {
            poi_id: p.id.clone(),
            lat: p.location.lat(),
            lon: p.location.lon(),
            category: p.category.clone(),
        }),
    )?;
    write_rows(
        &paths.roads,
        &["road_id", "lat1", "lon1", "lat2", "lon2", "category"],
        dataset.roads.iter().map(|r| RoadRow {
            road_id: r.id.clone(),
            lat1: r.start.lat(),
            lon1: r.start.lon(),
            lat2: r.end.lat(),
            lon2: r.end.lon(),
            category: r.category.clone(),
        }),
    )?;
    Ok(())
}
