use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_distance, FeatureBuilder, GeoPoint};
use crate::training::{rmse, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k: 3 }
    }
}

/// A station's reading at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct StationReading {
    pub id: String,
    pub location: GeoPoint,
    pub value: f64,
}

/// Mean reading of the `k` geodesically nearest stations; equal distances
/// are ordered by station id.
pub fn knn_infer(target: GeoPoint, stations: &[StationReading], cfg: &KnnConfig) -> Result<f64> {
    if cfg.k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if stations.len() < cfg.k {
        return Err(Error::Invalid(format!("k = {} but only {} stations have readings", cfg.k, stations.len())));
    }
    let mut keyed: Vec<(f64, &StationReading)> =
        stations.iter().map(|s| (haversine_distance(target, s.location), s)).collect();
    let cmp = |a: &(f64, &StationReading), b: &(f64, &StationReading)| -> Ordering {
        a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id))
    };
    if cfg.k < keyed.len() {
        keyed.select_nth_unstable_by(cfg.k - 1, cmp);
    }
    let sum: f64 = keyed[..cfg.k].iter().map(|(_, s)| s.value).sum();
    Ok(sum / cfg.k as f64)
}

/// KNN RMSE on labelled samples using the readings of `stations` present
/// in `builder` at each sample's time.
pub fn knn_rmse(builder: &FeatureBuilder, stations: &[String], samples: &[Sample], cfg: &KnnConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }
    let locations = stations
        .iter()
        .map(|s| Ok((s.clone(), builder.station_location(s)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut pred = Vec::with_capacity(samples.len());
    for s in samples {
        let readings: Vec<StationReading> = locations
            .iter()
            .filter(|(id, _)| s.target.station_id.as_deref() != Some(id.as_str()))
            .filter_map(|(id, loc)| builder.pm25(id, s.t).map(|value| StationReading { id: id.clone(), location: *loc, value }))
            .collect();
        pred.push(knn_infer(s.target.location, &readings, cfg)?);
    }
    let truth: Vec<f64> = samples.iter().map(|s| s.label).collect();
    rmse(&pred, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reading(id: &str, lat: f64, lon: f64, value: f64) -> StationReading {
        StationReading { id: id.into(), location: GeoPoint::new(lat, lon).unwrap(), value }
    }

    fn nearest(target: GeoPoint, stations: &[StationReading], k: usize) -> Vec<f64> {
        let mut all: Vec<(f64, String, f64)> =
            stations.iter().map(|s| (haversine_distance(target, s.location), s.id.clone(), s.value)).collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        all.iter().take(k).map(|x| x.2).collect()
    }

    fn oracle(target: GeoPoint, stations: &[StationReading], k: usize) -> f64 {
        nearest(target, stations, k).iter().sum::<f64>() / k as f64
    }

    #[test]
    fn at_a_station_with_k1() {
        let s = [reading("a", 40.0, 116.0, 12.0), reading("b", 40.1, 116.1, 99.0)];
        assert_eq!(knn_infer(s[0].location, &s, &KnnConfig { k: 1 }).unwrap(), 12.0);
    }

    #[test]
    fn three_nearest_average() {
        let s = [
            reading("a", 40.00, 116.00, 10.0),
            reading("b", 40.01, 116.00, 20.0),
            reading("c", 40.02, 116.00, 30.0),
            reading("d", 41.00, 116.00, 500.0),
        ];
        let t = GeoPoint::new(40.0, 116.0).unwrap();
        assert_eq!(knn_infer(t, &s, &KnnConfig::default()).unwrap(), 20.0);
    }

    #[test]
    fn ties_prefer_smaller_id() {
        let s = [reading("z", 40.0, 116.0, 1.0), reading("a", 40.0, 116.0, 2.0)];
        let t = GeoPoint::new(40.5, 116.0).unwrap();
        assert_eq!(knn_infer(t, &s, &KnnConfig { k: 1 }).unwrap(), 2.0);
    }

    #[test]
    fn too_few_stations() {
        let s = [reading("a", 40.0, 116.0, 1.0)];
        assert!(knn_infer(s[0].location, &s, &KnnConfig { k: 2 }).is_err());
        assert!(knn_infer(s[0].location, &s, &KnnConfig { k: 0 }).is_err());
    }

    fn instance() -> impl Strategy<Value = (GeoPoint, Vec<StationReading>, usize)> {
        (
            (39.0..41.0f64, 115.0..117.0f64),
            prop::collection::vec((39.0..41.0f64, 115.0..117.0f64, 0.0..300.0f64), 1..25),
            1usize..6,
        )
            .prop_map(|((lat, lon), pts, k)| {
                let stations: Vec<StationReading> = pts
                    .iter()
                    .enumerate()
                    .map(|(i, &(a, b, v))| reading(&format!("s{i:03}"), a, b, v))
                    .collect();
                let k = k.min(stations.len());
                (GeoPoint::new(lat, lon).unwrap(), stations, k)
            })
    }

    proptest! {
        #[test]
        fn matches_full_sort((t, s, k) in instance()) {
            let got = knn_infer(t, &s, &KnnConfig { k }).unwrap();
            prop_assert!((got - oracle(t, &s, k)).abs() < 1e-9);
        }

        #[test]
        fn order_invariant_and_bounded((t, s, k) in instance(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = s.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = knn_infer(t, &s, &KnnConfig { k }).unwrap();
            let b = knn_infer(t, &shuffled, &KnnConfig { k }).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            let picked = nearest(t, &s, k);
            let lo = picked.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = picked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a >= lo - 1e-9 && a <= hi + 1e-9);
        }
    }
}
