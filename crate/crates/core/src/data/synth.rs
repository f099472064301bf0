use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{City, Dataset, MeteoRecord, PollutantRecord, Poi, RoadSegment, Station};
use crate::error::{Error, Result};
use crate::geo::{haversine_distance, FeatureSchema, GeoPoint};

/// Parameters of the synthetic multi-city generator. Cities alternate
/// between a northern and a southern cluster; the northern one sits
/// `regional_shift` above `base_level`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_cities: usize,
    pub stations_per_city: usize,
    pub hours: usize,
    /// Shortest sequence the data must support.
    pub window: usize,
    /// Southern-cluster mean PM2.5.
    pub base_level: f64,
    /// Added to the northern cluster.
    pub regional_shift: f64,
    /// Standard deviation of the per-city offset.
    pub city_offset_std: f64,
    /// Scale of the regional and city AR(1) processes; 0 makes them flat.
    pub temporal_amplitude: f64,
    /// AR(1) coefficient in `[0, 1)`.
    pub temporal_smoothness: f64,
    /// Marginal std of the station deviation field.
    pub spatial_std: f64,
    pub correlation_length_km: f64,
    pub noise_std: f64,
    /// Stations are scattered uniformly within this radius of the centre.
    pub city_radius_km: f64,
    /// PoIs per km² per unit of relative city level.
    pub poi_density: f64,
    /// Road segments per km² per unit of relative city level.
    pub road_density: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cities: 6,
            stations_per_city: 8,
            hours: 240,
            window: 24,
            base_level: 30.0,
            regional_shift: 40.0,
            city_offset_std: 6.0,
            temporal_amplitude: 12.0,
            temporal_smoothness: 0.9,
            spatial_std: 4.0,
            correlation_length_km: 5.0,
            noise_std: 3.0,
            city_radius_km: 10.0,
            poi_density: 0.3,
            road_density: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Invalid(format!("synthetic config: {msg}")));
        if self.n_cities == 0 || self.stations_per_city == 0 || self.hours == 0 || self.window == 0 {
            return bad("all counts must be at least 1");
        }
        if self.hours < self.window {
            return bad("hours must be at least the window");
        }
        if !(0.0..1.0).contains(&self.temporal_smoothness) {
            return bad("temporal_smoothness must lie in [0, 1)");
        }
        let non_negative = [
            self.base_level,
            self.regional_shift,
            self.city_offset_std,
            self.temporal_amplitude,
            self.spatial_std,
            self.noise_std,
            self.city_radius_km,
            self.poi_density,
            self.road_density,
        ];
        if non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("levels, deviations, radii and densities must be finite and non-negative");
        }
        if !(self.correlation_length_km > 0.0) {
            return bad("correlation_length_km must be positive");
        }
        Ok(())
    }
}

const REGION_CENTERS: [(f64, f64); 2] = [(39.6, 116.8), (23.2, 113.4)];
const REGION_SPREAD_KM: f64 = 180.0;
const REGION_TEMPERATURE: [f64; 2] = [6.0, 22.0];

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Stationary AR(1) with unit marginal variance.
fn ar1(rng: &mut ChaCha8Rng, hours: usize, rho: f64) -> Vec<f64> {
    let innov = (1.0 - rho * rho).sqrt();
    let mut x = normal(rng);
    (0..hours)
        .map(|_| {
            let v = x;
            x = rho * x + innov * normal(rng);
            v
        })
        .collect()
}

fn scatter(rng: &mut ChaCha8Rng, center: GeoPoint, radius_km: f64) -> GeoPoint {
    let bearing = rng.gen_range(-PI..PI);
    let dist = radius_km * rng.gen::<f64>().sqrt();
    center.destination(bearing, dist)
}

/// Station deviation field: an AR(1) in time whose innovations share the
/// spatial covariance `exp(-d / ℓ)`. Returns one series per location.
pub fn station_deviation_field(
    rng: &mut ChaCha8Rng,
    locations: &[GeoPoint],
    hours: usize,
    cfg: &SynthConfig,
) -> Vec<Vec<f64>> {
    let n = locations.len();
    if cfg.spatial_std == 0.0 || n == 0 {
        return vec![vec![0.0; hours]; n];
    }
    let cov = DMatrix::from_fn(n, n, |i, j| {
        let d = haversine_distance(locations[i], locations[j]);
        (-d / cfg.correlation_length_km).exp() + if i == j { 1e-9 } else { 0.0 }
    });
    let chol = cov.cholesky().expect("exponential kernel is positive definite").l();
    let draw = |rng: &mut ChaCha8Rng| &chol * DVector::from_fn(n, |_, _| normal(rng));
    let rho = cfg.temporal_smoothness;
    let innov = (1.0 - rho * rho).sqrt();
    let mut state = draw(rng);
    let mut out = vec![Vec::with_capacity(hours); n];
    for _ in 0..hours {
        for (i, series) in out.iter_mut().enumerate() {
            series.push(cfg.spatial_std * state[i]);
        }
        state = state * rho + draw(rng) * innov;
    }
    out
}

fn weighted_category<'a>(rng: &mut ChaCha8Rng, categories: &'a [String], weights: &[f64]) -> &'a str {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (c, w) in categories.iter().zip(weights) {
        if u < *w {
            return c;
        }
        u -= w;
    }
    categories.last().unwrap()
}

/// Seeded synthetic dataset: two regional clusters of cities, smooth
/// temporal pollution, spatially correlated station deviations, meteorology
/// driven by the same latent process, and PoIs/roads whose density and mix
/// follow the city level.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let schema = FeatureSchema::default();
    let hours = cfg.hours;
    let rho = cfg.temporal_smoothness;
    let regional: Vec<Vec<f64>> = (0..2).map(|_| ar1(&mut rng, hours, rho)).collect();
    let mut d = Dataset::default();
    for ci in 0..cfg.n_cities {
        let region = ci % 2;
        let (lat, lon) = REGION_CENTERS[region];
        let center = scatter(&mut rng, GeoPoint::new(lat, lon)?, REGION_SPREAD_KM);
        let city_id = format!("c{ci:02}");
        d.cities.push(City {
            id: city_id.clone(),
            name: format!("{} city {ci}", ["North", "South"][region]),
            location: center,
        });
        let level = cfg.base_level
            + if region == 0 { cfg.regional_shift } else { 0.0 }
            + cfg.city_offset_std * normal(&mut rng);
        let city_ar = ar1(&mut rng, hours, rho);
        let latent: Vec<f64> = regional[region].iter().zip(&city_ar).map(|(r, c)| (r + c) / 2f64.sqrt()).collect();

        let locations: Vec<GeoPoint> =
            (0..cfg.stations_per_city).map(|_| scatter(&mut rng, center, cfg.city_radius_km)).collect();
        let deviations = station_deviation_field(&mut rng, &locations, hours, cfg);
        for (si, (loc, dev)) in locations.iter().zip(&deviations).enumerate() {
            let station_id = format!("{city_id}s{si:02}");
            d.stations.push(Station { id: station_id.clone(), city_id: city_id.clone(), location: *loc });
            for (t, l) in latent.iter().enumerate() {
                let noise = if cfg.noise_std > 0.0 { cfg.noise_std * normal(&mut rng) } else { 0.0 };
                let v = level + cfg.temporal_amplitude * l + dev[t] + noise;
                d.pollutant.push(PollutantRecord { station_id: station_id.clone(), t: t as i64, pm25: v.max(0.0) });
            }
        }

        let mut wind_angle = rng.gen_range(0.0..2.0 * PI);
        for (t, l) in latent.iter().enumerate() {
            let humidity = (0.55 + 0.15 * l + 0.05 * normal(&mut rng)).clamp(0.0, 1.0);
            let wind_speed = (3.0 - 1.2 * l + 0.4 * normal(&mut rng)).max(0.0);
            let temperature =
                REGION_TEMPERATURE[region] + 5.0 * (2.0 * PI * t as f64 / 24.0).sin() + normal(&mut rng);
            let pressure = 1013.0 + 4.0 * l + normal(&mut rng);
            let weather = if humidity > 0.8 {
                "fog"
            } else if humidity > 0.68 {
                "rain"
            } else if humidity > 0.55 {
                "cloudy"
            } else {
                "sunny"
            };
            wind_angle = (wind_angle + 0.3 * normal(&mut rng)).rem_euclid(2.0 * PI);
            let sector = ((wind_angle / (PI / 4.0)).round() as usize) % 8;
            d.meteo.push(MeteoRecord {
                city_id: city_id.clone(),
                t: t as i64,
                weather: weather.into(),
                temperature,
                pressure,
                humidity,
                wind_speed,
                wind_direction: schema.wind_direction[sector].clone(),
            });
        }

        // Polluting categories (factory, transport, office) grow with the level.
        let rel = (level / cfg.base_level.max(1e-9)).max(0.1);
        let area = PI * (cfg.city_radius_km + 1.0).powi(2);
        let poi_weights: Vec<f64> = schema
            .poi_categories
            .iter()
            .map(|c| match c.as_str() {
                "factory" | "transport" | "office" => rel,
                _ => 1.0,
            })
            .collect();
        let n_poi = (cfg.poi_density * rel * area).round() as usize;
        for pi in 0..n_poi {
            let loc = scatter(&mut rng, center, cfg.city_radius_km + 1.0);
            let category = weighted_category(&mut rng, &schema.poi_categories, &poi_weights).to_string();
            d.pois.push(Poi { id: format!("{city_id}p{pi:05}"), location: loc, category });
        }
        let road_weights = [rel, 1.0, 1.0];
        let n_roads = (cfg.road_density * rel * area).round() as usize;
        for ri in 0..n_roads {
            let start = scatter(&mut rng, center, cfg.city_radius_km + 1.0);
            let end = start.destination(rng.gen_range(-PI..PI), rng.gen_range(0.3..3.0));
            let category = weighted_category(&mut rng, &schema.road_categories, &road_weights).to_string();
            d.roads.push(RoadSegment { id: format!("{city_id}r{ri:05}"), start, end, category });
        }
    }
    d.validate()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { n_cities: 3, stations_per_city: 4, hours: 48, ..Default::default() }
    }

    #[test]
    fn same_seed_gives_identical_data() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let bits = |d: &Dataset| d.pollutant.iter().map(|r| r.pm25.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = generate_synthetic(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.pollutant, c.pollutant);
    }

    #[test]
    fn counts_follow_the_config() {
        let cfg = small();
        let d = generate_synthetic(&cfg).unwrap();
        assert_eq!(d.cities.len(), cfg.n_cities);
        assert_eq!(d.stations.len(), cfg.n_cities * cfg.stations_per_city);
        assert_eq!(d.pollutant.len(), cfg.n_cities * cfg.stations_per_city * cfg.hours);
        assert_eq!(d.meteo.len(), cfg.n_cities * cfg.hours);
        for c in &d.cities {
            assert_eq!(d.stations_of(&c.id).len(), cfg.stations_per_city);
        }
    }

    #[test]
    fn flat_noiseless_city_is_constant() {
        let cfg = SynthConfig { noise_std: 0.0, temporal_amplitude: 0.0, spatial_std: 0.0, ..small() };
        let d = generate_synthetic(&cfg).unwrap();
        let by_station = d.pollutant_by_station();
        for c in &d.cities {
            let vals: Vec<f64> = d
                .stations_of(&c.id)
                .iter()
                .flat_map(|s| by_station[s.id.as_str()].values().copied())
                .collect();
            assert!(vals.iter().all(|v| *v == vals[0]), "{}", c.id);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate_synthetic(&SynthConfig { n_cities: 0, ..small() }).is_err());
        assert!(generate_synthetic(&SynthConfig { hours: 10, window: 24, ..small() }).is_err());
        assert!(generate_synthetic(&SynthConfig { temporal_smoothness: 1.0, ..small() }).is_err());
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn nearby_stations_correlate_more_than_distant_ones() {
        let cfg = SynthConfig { spatial_std: 5.0, correlation_length_km: 10.0, ..Default::default() };
        let a = GeoPoint::new(30.0, 110.0).unwrap();
        let b = a.destination(0.7, 0.1);
        let c = a.destination(2.0, 50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = station_deviation_field(&mut rng, &[a, b, c], 500, &cfg);
        // Add the measurement noise the generator would add.
        let noisy: Vec<Vec<f64>> =
            f.iter().map(|s| s.iter().map(|v| v + cfg.noise_std * normal(&mut rng)).collect()).collect();
        let near = correlation(&noisy[0], &noisy[1]);
        let far = correlation(&noisy[0], &noisy[2]);
        assert!(near > far + 0.3, "near {near} far {far}");
    }
}
