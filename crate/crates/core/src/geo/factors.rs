use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{haversine_distance, point_segment_distance, GeoPoint};
use crate::data::{MeteoRecord, Poi, RoadSegment};
use crate::error::{Error, Result};

/// Radius of the affecting region around a location.
pub const AFFECTING_RADIUS_KM: f64 = 1.0;

/// One named entry of a factor vector, e.g. `("poi", "factory")`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactorField {
    pub factor: String,
    pub field: String,
}

impl FactorField {
    pub fn new(factor: &str, field: &str) -> Self {
        Self {
            factor: factor.to_string(),
            field: field.to_string(),
        }
    }
}

impl std::fmt::Display for FactorField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.factor, self.field)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorVector {
    values: Vec<f64>,
    schema: Arc<[FactorField]>,
}

impl FactorVector {
    pub fn new(values: Vec<f64>, schema: Arc<[FactorField]>) -> Result<Self> {
        if values.len() != schema.len() {
            return Err(Error::Invalid(format!(
                "factor vector has {} values for {} schema fields",
                values.len(),
                schema.len()
            )));
        }
        Ok(Self { values, schema })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn schema(&self) -> &Arc<[FactorField]> {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn concat(parts: &[&FactorVector]) -> FactorVector {
        let values = parts.iter().flat_map(|p| p.values.iter().copied()).collect();
        let schema: Vec<FactorField> = parts.iter().flat_map(|p| p.schema.iter().cloned()).collect();
        FactorVector {
            values,
            schema: schema.into(),
        }
    }
}

/// Category vocabularies that fix the layout of every factor vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub poi_categories: Vec<String>,
    pub road_categories: Vec<String>,
    pub weather: Vec<String>,
    pub wind_direction: Vec<String>,
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self {
            poi_categories: strings(&[
                "food",
                "shop",
                "office",
                "residence",
                "education",
                "park",
                "transport",
                "factory",
                "medical",
                "entertainment",
            ]),
            road_categories: strings(&["highway", "trunk", "other"]),
            weather: strings(&["sunny", "cloudy", "rain", "fog"]),
            wind_direction: strings(&["N", "NE", "E", "SE", "S", "SW", "W", "NW"]),
        }
    }
}

pub(crate) const METEO_NUMERIC: [&str; 4] = ["temperature", "pressure", "humidity", "wind_speed"];

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        for (name, vocab) in [
            ("poi categories", &self.poi_categories),
            ("road categories", &self.road_categories),
            ("weather vocabulary", &self.weather),
            ("wind direction vocabulary", &self.wind_direction),
        ] {
            check_categories(name, vocab)?;
        }
        Ok(())
    }

    pub fn poi_fields(&self) -> Vec<FactorField> {
        self.poi_categories.iter().map(|c| FactorField::new("poi", c)).collect()
    }

    pub fn road_fields(&self) -> Vec<FactorField> {
        self.road_categories.iter().map(|c| FactorField::new("road", c)).collect()
    }

    pub fn meteo_fields(&self) -> Vec<FactorField> {
        let mut f: Vec<FactorField> = self.weather.iter().map(|w| FactorField::new("weather", w)).collect();
        f.extend(METEO_NUMERIC.iter().map(|n| FactorField::new("meteo", n)));
        f.extend(self.wind_direction.iter().map(|w| FactorField::new("wind_direction", w)));
        f
    }

    pub fn meteo_dim(&self) -> usize {
        self.weather.len() + METEO_NUMERIC.len() + self.wind_direction.len()
    }

    /// PoI ⊕ road width.
    pub fn location_dim(&self) -> usize {
        self.poi_categories.len() + self.road_categories.len()
    }
}

fn check_categories(name: &str, categories: &[String]) -> Result<()> {
    if categories.is_empty() {
        return Err(Error::Invalid(format!("{name}: empty category list")));
    }
    let mut seen = HashSet::new();
    for c in categories {
        if !seen.insert(c.as_str()) {
            return Err(Error::Invalid(format!("{name}: duplicate category {c:?}")));
        }
    }
    Ok(())
}

fn count_vector(factor: &str, categories: &[String], hits: impl Iterator<Item = String>) -> Result<FactorVector> {
    check_categories(factor, categories)?;
    let mut counts = vec![0.0; categories.len()];
    for category in hits {
        match categories.iter().position(|c| *c == category) {
            Some(i) => counts[i] += 1.0,
            None => log::debug!("{factor}: category {category:?} is not in the schema, skipped"),
        }
    }
    let schema: Vec<FactorField> = categories.iter().map(|c| FactorField::new(factor, c)).collect();
    FactorVector::new(counts, schema.into())
}

/// Number of PoIs of each category within the affecting region of `l`.
pub fn poi_factor(l: GeoPoint, pois: &[Poi], categories: &[String]) -> Result<FactorVector> {
    count_vector(
        "poi",
        categories,
        pois.iter()
            .filter(|p| haversine_distance(l, p.location) <= AFFECTING_RADIUS_KM)
            .map(|p| p.category.clone()),
    )
}

/// Number of road segments of each category with some point inside the
/// affecting region of `l`.
pub fn road_factor(l: GeoPoint, roads: &[RoadSegment], categories: &[String]) -> Result<FactorVector> {
    count_vector(
        "road",
        categories,
        roads
            .iter()
            .filter(|r| point_segment_distance(l, r.start, r.end) <= AFFECTING_RADIUS_KM)
            .map(|r| r.category.clone()),
    )
}

fn one_hot(field: &str, vocab: &[String], value: &str, out: &mut Vec<f64>) -> Result<()> {
    let idx = vocab.iter().position(|v| v == value).ok_or_else(|| Error::Vocabulary {
        field: field.to_string(),
        value: value.to_string(),
    })?;
    out.extend((0..vocab.len()).map(|i| if i == idx { 1.0 } else { 0.0 }));
    Ok(())
}

/// Weather one-hot, raw numeric fields, wind-direction one-hot.
pub fn meteo_factor(record: &MeteoRecord, schema: &FeatureSchema) -> Result<FactorVector> {
    let mut v = Vec::with_capacity(schema.meteo_dim());
    one_hot("weather", &schema.weather, &record.weather, &mut v)?;
    v.extend([record.temperature, record.pressure, record.humidity, record.wind_speed]);
    one_hot("wind_direction", &schema.wind_direction, &record.wind_direction, &mut v)?;
    FactorVector::new(v, schema.meteo_fields().into())
}

/// Per-entry maxima of absolute values over a training collection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormTable {
    pub fields: Vec<FactorField>,
    pub maxima: Vec<f64>,
}

impl NormTable {
    pub fn fit<'a>(fields: Vec<FactorField>, rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut maxima = vec![0.0f64; fields.len()];
        let mut any = false;
        for row in rows {
            if row.len() != maxima.len() {
                return Err(Error::Invalid(format!(
                    "normalization input has {} entries, expected {}",
                    row.len(),
                    maxima.len()
                )));
            }
            any = true;
            for (m, v) in maxima.iter_mut().zip(row) {
                *m = m.max(v.abs());
            }
        }
        if !any {
            return Err(Error::Invalid("normalization over an empty collection".into()));
        }
        Ok(Self { fields, maxima })
    }

    pub fn len(&self) -> usize {
        self.maxima.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maxima.is_empty()
    }

    /// Divides each entry by its recorded maximum; zero maxima leave the
    /// entry untouched.
    pub fn apply(&self, values: &mut [f64]) {
        debug_assert_eq!(values.len(), self.maxima.len());
        for (v, &m) in values.iter_mut().zip(&self.maxima) {
            if m > 0.0 {
                *v /= m;
            }
        }
    }
}

pub fn normalize_with(table: &NormTable, v: &FactorVector) -> FactorVector {
    let mut values = v.values.clone();
    table.apply(&mut values);
    FactorVector {
        values,
        schema: v.schema.clone(),
    }
}

/// Fits a [`NormTable`] on `factors` and returns the normalized collection.
pub fn normalize_dataset(factors: &[FactorVector]) -> Result<(Vec<FactorVector>, NormTable)> {
    let first = factors
        .first()
        .ok_or_else(|| Error::Invalid("normalize_dataset: empty collection".into()))?;
    for f in factors {
        if f.schema != first.schema && *f.schema != *first.schema {
            return Err(Error::Invalid("normalize_dataset: mixed schemas".into()));
        }
    }
    let table = NormTable::fit(first.schema.to_vec(), factors.iter().map(|f| f.values()))?;
    let out = factors.iter().map(|f| normalize_with(&table, f)).collect();
    Ok((out, table))
}
