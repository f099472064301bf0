//! Geospatial primitives and the feature factors derived from raw data.

mod factors;
mod features;

pub use factors::{
    meteo_factor, normalize_dataset, normalize_with, poi_factor, road_factor, FactorField,
    FactorVector, FeatureSchema, NormTable, AFFECTING_RADIUS_KM,
};
pub use features::{
    build_features, FeatureBuilder, FeatureBundle, FeatureNorm, SourceLayout, StationFeatures,
    TargetFeatures, TargetSpec,
};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Latitude/longitude in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::Invalid(format!(
                "coordinate ({lat}, {lon}) outside [-90, 90] x [-180, 180]"
            )));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Point at `distance_km` along the initial bearing `bearing` (radians
    /// clockwise from north) on the sphere.
    pub fn destination(&self, bearing: f64, distance_km: f64) -> GeoPoint {
        let d = distance_km / EARTH_RADIUS_KM;
        let (lat1, lon1) = (self.lat.to_radians(), self.lon.to_radians());
        let lat2 = (lat1.sin() * d.cos() + lat1.cos() * d.sin() * bearing.cos()).asin();
        let lon2 = lon1
            + (bearing.sin() * d.sin() * lat1.cos()).atan2(d.cos() - lat1.sin() * lat2.sin());
        let lon2 = (lon2.to_degrees() + 540.0).rem_euclid(360.0) - 180.0;
        GeoPoint {
            lat: lat2.to_degrees().clamp(-90.0, 90.0),
            lon: lon2.clamp(-180.0, 180.0),
        }
    }
}

/// Distance and bearing from one location to another.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelPos {
    /// Kilometers.
    pub distance: f64,
    /// Initial compass bearing in radians, `[-π, π]`, 0 = north, π/2 = east.
    pub angle: f64,
}

impl RelPos {
    pub fn as_array(&self) -> [f64; 2] {
        [self.distance, self.angle]
    }
}

/// Great-circle distance in kilometers.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Coincident points get angle 0.
pub fn relative_position(from: GeoPoint, to: GeoPoint) -> RelPos {
    let distance = haversine_distance(from, to);
    if distance == 0.0 {
        return RelPos {
            distance: 0.0,
            angle: 0.0,
        };
    }
    let (lat1, lat2) = (from.lat.to_radians(), to.lat.to_radians());
    let dlon = (to.lon - from.lon).to_radians();
    let y = dlon.sin() * lat2.cos();
    let x = lat1.cos() * lat2.sin() - lat1.sin() * lat2.cos() * dlon.cos();
    let angle = y.atan2(x).clamp(-PI, PI);
    RelPos { distance, angle }
}

/// Equirectangular projection centred on `origin`, in kilometers.
fn project(origin: GeoPoint, p: GeoPoint) -> (f64, f64) {
    let k = EARTH_RADIUS_KM * PI / 180.0;
    let mut dlon = p.lon - origin.lon;
    if dlon > 180.0 {
        dlon -= 360.0;
    } else if dlon < -180.0 {
        dlon += 360.0;
    }
    (dlon * k * origin.lat.to_radians().cos(), (p.lat - origin.lat) * k)
}

/// Minimum distance in kilometers from `p` to the segment `a`–`b`, measured
/// in the local equirectangular projection around `p`. A zero-length
/// segment is treated as the point `a`.
pub fn point_segment_distance(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> f64 {
    let (ax, ay) = project(p, a);
    let (bx, by) = project(p, b);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (-(ax * dx + ay * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    (cx * cx + cy * cy).sqrt()
}

/// Mean latitude/longitude of a non-empty set of nearby points.
pub fn centroid(points: &[GeoPoint]) -> Option<GeoPoint> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let lat = points.iter().map(|p| p.lat).sum::<f64>() / n;
    let lon = points.iter().map(|p| p.lon).sum::<f64>() / n;
    GeoPoint::new(lat, lon).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn beijing_to_tianjin() {
        let beijing = pt(39.9042, 116.4074);
        let d = haversine_distance(beijing, pt(39.0842, 117.2010));
        assert!((d - 113.8).abs() < 5.0, "{d}");
        // Northern Tianjin point; value from an independent haversine evaluation.
        let d = haversine_distance(beijing, pt(39.3434, 117.3616));
        assert!((d - 102.79733614865232).abs() < 1e-9, "{d}");
    }

    #[test]
    fn identical_points_are_zero_apart() {
        let p = pt(23.1, 113.3);
        assert_eq!(haversine_distance(p, p), 0.0);
    }

    #[test]
    fn quarter_equator() {
        // 6371.0 * π / 2
        let expected = 10007.543398010286;
        let d = haversine_distance(pt(0.0, 0.0), pt(0.0, 90.0));
        assert!((d - expected).abs() < 1e-6, "{d}");
    }

    #[test]
    fn rejects_out_of_range_coordinates() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -180.5).is_err());
    }

    #[test]
    fn relative_position_conventions() {
        let o = pt(0.0, 0.0);
        assert_eq!(relative_position(o, o), RelPos { distance: 0.0, angle: 0.0 });
        let north = relative_position(o, pt(1.0, 0.0));
        assert!(north.angle.abs() < 1e-12);
        // 6371 * π / 180
        assert!((north.distance - 111.19492664455873).abs() < 1e-9);
        let east = relative_position(o, pt(0.0, 1.0));
        assert!((east.angle - PI / 2.0).abs() < 1e-12);
        let west = relative_position(o, pt(0.0, -1.0));
        assert!((west.angle + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn segment_distance_handles_degenerate_segments() {
        let p = pt(30.0, 110.0);
        let a = p.destination(0.0, 2.0);
        let d = point_segment_distance(p, a, a);
        assert!((d - 2.0).abs() < 1e-3, "{d}");
        let b = p.destination(PI, 2.0);
        assert!(point_segment_distance(p, a, b) < 1e-9);
    }

    #[test]
    fn destination_round_trips_distance() {
        let p = pt(39.9, 116.4);
        let q = p.destination(1.0, 12.5);
        assert!((haversine_distance(p, q) - 12.5).abs() < 1e-9);
        assert!((relative_position(p, q).angle - 1.0).abs() < 1e-9);
    }

    fn arb_point() -> impl Strategy<Value = GeoPoint> {
        (-89.0f64..89.0, -179.0f64..179.0).prop_map(|(a, b)| pt(a, b))
    }

    proptest! {
        #[test]
        fn haversine_is_a_metric(a in arb_point(), b in arb_point(), c in arb_point()) {
            let ab = haversine_distance(a, b);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, haversine_distance(b, a));
            prop_assert!(haversine_distance(a, c) <= ab + haversine_distance(b, c) + 1e-9);
        }

        #[test]
        fn bearing_stays_in_range(a in arb_point(), b in arb_point()) {
            let r = relative_position(a, b);
            prop_assert!((-PI..=PI).contains(&r.angle));
        }
    }
}
