//! Leave-one-city-out meta-training, evaluation and grid search.

mod optim;
mod run;

pub use optim::{clip_global_norm, Adam, Optimizer, OptimizerKind, Sgd};
pub use run::{
    batch_loss, evaluate_rmse, grid_search, rmse, test_queries, train, train_experiment, write_trace_csv, EpochStats, Grid,
    GridResult, TrainOutcome,
};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geo::{FeatureBuilder, FeatureNorm, FeatureSchema, SourceLayout, TargetSpec};
use crate::losses::LossWeights;
use crate::network::ArchConfig;

/// One meta-training task: `meta_target` plays the unmonitored city.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaPair {
    pub meta_target: String,
    pub meta_sources: Vec<String>,
}

/// Leave-one-out pairs, one per source city, in input order.
pub fn make_meta_pairs(sources: &[String]) -> Result<Vec<MetaPair>> {
    if sources.len() < 2 {
        return Err(Error::Invalid(format!("meta-training needs at least 2 source cities, got {}", sources.len())));
    }
    let unique: BTreeSet<&String> = sources.iter().collect();
    if unique.len() != sources.len() {
        return Err(Error::Invalid("source cities contain duplicates".into()));
    }
    Ok(sources
        .iter()
        .map(|t| MetaPair {
            meta_target: t.clone(),
            meta_sources: sources.iter().filter(|c| *c != t).cloned().collect(),
        })
        .collect())
}

/// Station selection for one experiment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub target_city: String,
    /// Source city → selected (training) stations, sorted.
    pub train: BTreeMap<String, Vec<String>>,
    /// Selected target-city stations, sorted; used only for evaluation.
    pub test: Vec<String>,
}

impl Split {
    pub fn source_cities(&self) -> Vec<String> {
        self.train.keys().cloned().collect()
    }

    pub fn train_stations(&self) -> BTreeSet<String> {
        self.train.values().flatten().cloned().collect()
    }

    /// Layout of all training stations of `cities`.
    pub fn layout(&self, cities: &[String]) -> SourceLayout {
        SourceLayout::new(cities.iter().map(|c| (c.clone(), self.train.get(c).cloned().unwrap_or_default())).collect())
    }
}

/// Seeded choice of at most `per_city` stations in every city. Target-city
/// stations become test stations, source-city stations training stations.
pub fn split_train_test(dataset: &Dataset, target_city: &str, sources: &[String], per_city: usize, seed: u64) -> Result<Split> {
    if dataset.city(target_city).is_none() {
        return Err(Error::Invalid(format!("target city {target_city:?} is not in the dataset")));
    }
    if per_city == 0 {
        return Err(Error::Invalid("per_city must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |city: &str| -> Vec<String> {
        let mut ids: Vec<String> = dataset.stations_of(city).iter().map(|s| s.id.clone()).collect();
        ids.shuffle(&mut rng);
        ids.truncate(per_city);
        ids.sort();
        ids
    };
    let test = pick(target_city);
    let mut train = BTreeMap::new();
    for c in sources {
        if c == target_city {
            return Err(Error::Invalid(format!("city {c} cannot be both target and source")));
        }
        if dataset.city(c).is_none() {
            return Err(Error::Invalid(format!("source city {c:?} is not in the dataset")));
        }
        let s = pick(c);
        if s.is_empty() {
            return Err(Error::Invalid(format!("source city {c} has no stations")));
        }
        train.insert(c.clone(), s);
    }
    Ok(Split { target_city: target_city.into(), train, test })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Mixture of experts over meta-pairs.
    #[default]
    Mixture,
    /// One source city, β ≡ 1, L_f only: each of the city's stations in
    /// turn is the target, the rest are inputs.
    SingleSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub window: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub basic: Vec<usize>,
    pub fusion: Vec<usize>,
    pub attention_hidden: usize,
    pub expert_hidden: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub per_city: usize,
    /// Keep every n-th time step when building samples.
    pub sample_stride: usize,
    /// Cap on batches per epoch; `None` covers every sample once.
    pub max_batches_per_epoch: Option<usize>,
    /// Trailing fraction of each group's time steps held out for validation.
    pub val_fraction: f64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.005,
            weights: LossWeights::default(),
            window: 24,
            lstm_hidden: 300,
            lstm_layers: 2,
            basic: vec![100],
            fusion: vec![200, 200],
            attention_hidden: 100,
            expert_hidden: 100,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            clip_norm: Some(5.0),
            per_city: 5,
            sample_stride: 1,
            max_batches_per_epoch: None,
            val_fraction: 0.1,
            mode: TrainMode::Mixture,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: &str| Err(Error::Invalid(format!("train config: {m}")));
        if self.batch_size == 0 || self.window == 0 || self.per_city == 0 || self.sample_stride == 0 {
            return bad("batch size, window, per_city and stride must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }

    pub fn arch(&self, schema: &FeatureSchema, max_stations: usize) -> ArchConfig {
        ArchConfig {
            lstm_hidden: self.lstm_hidden,
            lstm_layers: self.lstm_layers,
            basic: self.basic.clone(),
            fusion: self.fusion.clone(),
            attention_hidden: self.attention_hidden,
            expert_hidden: self.expert_hidden,
            max_stations,
            target_dynamic: schema.meteo_dim(),
            target_static: schema.location_dim(),
        }
    }

    /// Loss weights in effect; single-source training uses L_f only.
    pub fn effective_weights(&self) -> LossWeights {
        match self.mode {
            TrainMode::Mixture => self.weights,
            TrainMode::SingleSource => LossWeights { lambda: 1.0, gamma: 0.0, zeta: 0.0, ..self.weights },
        }
    }
}

/// A labelled query: the pollutant at `target` at the end of the window
/// ending at `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub target: TargetSpec,
    pub t: i64,
    /// µg/m³.
    pub label: f64,
}

/// Samples sharing a source layout; every batch is drawn from one group.
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub name: String,
    pub layout: SourceLayout,
    /// Meta-target stations whose embeddings form the target side of L_a.
    /// Each sample excludes its own station.
    pub aux_city: Option<(String, Vec<String>)>,
    pub samples: Vec<Sample>,
    pub validation: Vec<Sample>,
}

impl Group {
    pub fn aux_layout(&self, target: &TargetSpec) -> Option<SourceLayout> {
        let (city, stations) = self.aux_city.as_ref()?;
        let keep: Vec<String> =
            stations.iter().filter(|s| target.station_id.as_deref() != Some(s.as_str())).cloned().collect();
        (!keep.is_empty()).then(|| SourceLayout::new(vec![(city.clone(), keep)]))
    }

    /// Every pollutant reading a sample touches, as `pm25:<station>:<t>`;
    /// inputs first, the label last.
    pub fn provenance(&self, sample: &Sample, window: usize) -> Vec<String> {
        let mut stations: Vec<&str> = self.layout.station_ids().collect();
        let aux = self.aux_layout(&sample.target);
        if let Some(a) = &aux {
            stations.extend(a.station_ids());
        }
        let start = sample.t - window as i64 + 1;
        let mut out: Vec<String> =
            stations.iter().flat_map(|s| (start..=sample.t).map(move |t| format!("pm25:{s}:{t}"))).collect();
        if let Some(s) = &sample.target.station_id {
            out.push(format!("pm25:{s}:{}", sample.t));
        }
        out
    }
}

fn station_target(dataset: &Dataset, id: &str) -> Result<TargetSpec> {
    let s = dataset.station(id).ok_or_else(|| Error::Invalid(format!("unknown station {id}")))?;
    Ok(TargetSpec { city_id: s.city_id.clone(), location: s.location, station_id: Some(s.id.clone()) })
}

/// One sample per (meta-target training station, covered time step):
/// the station is the target and never an input.
pub fn make_training_samples(
    pair: &MetaPair,
    builder: &FeatureBuilder,
    dataset: &Dataset,
    split: &Split,
    stride: usize,
) -> Result<Vec<Sample>> {
    let group = pair_group(pair, builder, dataset, split, stride, 0.0)?;
    Ok(group.samples)
}

fn collect_samples(
    builder: &FeatureBuilder,
    targets: &[TargetSpec],
    layout_for: &dyn Fn(&TargetSpec) -> SourceLayout,
    aux_for: &dyn Fn(&TargetSpec) -> Option<SourceLayout>,
    stride: usize,
) -> Vec<Sample> {
    let mut out = Vec::new();
    for target in targets {
        let station = target.station_id.as_deref().expect("training targets are stations");
        let layout = layout_for(target);
        let aux = aux_for(target);
        for (i, t) in builder.pm25_times(station).into_iter().enumerate() {
            if i % stride != 0 {
                continue;
            }
            let covered = builder.covers(target, t, &layout) && aux.as_ref().map_or(true, |a| builder.covers(target, t, a));
            if covered {
                if let Some(label) = builder.pm25(station, t) {
                    out.push(Sample { target: target.clone(), t, label });
                }
            }
        }
    }
    out
}

/// Moves the latest `fraction` of distinct time steps into validation.
fn hold_out(samples: Vec<Sample>, fraction: f64) -> (Vec<Sample>, Vec<Sample>) {
    if fraction <= 0.0 || samples.is_empty() {
        return (samples, Vec::new());
    }
    let times: BTreeSet<i64> = samples.iter().map(|s| s.t).collect();
    let n_val = ((times.len() as f64) * fraction).ceil() as usize;
    let n_val = n_val.min(times.len().saturating_sub(1));
    let Some(&cut) = times.iter().rev().nth(n_val.saturating_sub(1)) else {
        return (samples, Vec::new());
    };
    if n_val == 0 {
        return (samples, Vec::new());
    }
    samples.into_iter().partition(|s| s.t < cut)
}

fn pair_group(
    pair: &MetaPair,
    builder: &FeatureBuilder,
    dataset: &Dataset,
    split: &Split,
    stride: usize,
    val_fraction: f64,
) -> Result<Group> {
    let targets_ids = split
        .train
        .get(&pair.meta_target)
        .ok_or_else(|| Error::Invalid(format!("meta-target {} has no training stations", pair.meta_target)))?;
    let targets = targets_ids.iter().map(|s| station_target(dataset, s)).collect::<Result<Vec<_>>>()?;
    let layout = split.layout(&pair.meta_sources);
    let mut group = Group {
        name: format!("pair:{}", pair.meta_target),
        layout: layout.clone(),
        aux_city: Some((pair.meta_target.clone(), targets_ids.clone())),
        samples: Vec::new(),
        validation: Vec::new(),
    };
    let samples = collect_samples(builder, &targets, &|_| layout.clone(), &|t| group.aux_layout(t), stride);
    if samples.is_empty() {
        return Err(Error::Invalid(format!("meta-target {} has no fully covered window", pair.meta_target)));
    }
    (group.samples, group.validation) = hold_out(samples, val_fraction);
    Ok(group)
}

/// Training groups for `split` under `cfg.mode`.
pub fn make_groups(builder: &FeatureBuilder, dataset: &Dataset, split: &Split, cfg: &TrainConfig) -> Result<Vec<Group>> {
    match cfg.mode {
        TrainMode::Mixture => make_meta_pairs(&split.source_cities())?
            .iter()
            .map(|p| pair_group(p, builder, dataset, split, cfg.sample_stride, cfg.val_fraction))
            .collect(),
        TrainMode::SingleSource => {
            let cities = split.source_cities();
            let [city] = cities.as_slice() else {
                return Err(Error::Invalid(format!("single-source training needs exactly one source city, got {}", cities.len())));
            };
            let stations = &split.train[city];
            if stations.len() < 2 {
                return Err(Error::Invalid(format!("single-source training needs 2 stations in {city}")));
            }
            let mut groups = Vec::new();
            for s in stations {
                let target = station_target(dataset, s)?;
                let full = split.layout(&cities);
                let layout = full.without_station(s);
                let samples = collect_samples(builder, &[target], &|_| layout.clone(), &|_| None, cfg.sample_stride);
                let (samples, validation) = hold_out(samples, cfg.val_fraction);
                if !samples.is_empty() {
                    groups.push(Group { name: format!("station:{s}"), layout, aux_city: None, samples, validation });
                }
            }
            if groups.is_empty() {
                return Err(Error::Invalid(format!("no covered samples in {city}")));
            }
            Ok(groups)
        }
    }
}

/// Everything derived from the dataset before optimization starts.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub split: Split,
    /// Dataset limited to training-station pollutant readings.
    pub train_data: Dataset,
    pub builder: FeatureBuilder,
    pub norm: FeatureNorm,
    pub groups: Vec<Group>,
    /// Layout used when inferring the real target city.
    pub inference_layout: SourceLayout,
    pub arch: ArchConfig,
}

impl Experiment {
    pub fn new(dataset: &Dataset, split: &Split, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let train_data = dataset.with_pollutant_from(&split.train_stations());
        let schema = FeatureSchema::default();
        let builder = FeatureBuilder::new(&train_data, schema.clone(), cfg.window)?;
        let groups = make_groups(&builder, &train_data, split, cfg)?;
        let fit: Vec<(Vec<TargetSpec>, SourceLayout)> = groups
            .iter()
            .map(|g| {
                let mut targets: Vec<TargetSpec> = Vec::new();
                for s in &g.samples {
                    if !targets.contains(&s.target) {
                        targets.push(s.target.clone());
                    }
                }
                (targets, g.layout.clone())
            })
            .collect();
        let norm = builder.fit_norm(&fit)?;
        let inference_layout = split.layout(&split.source_cities());
        let max_stations = inference_layout.max_stations();
        Ok(Self {
            split: split.clone(),
            train_data,
            builder,
            norm,
            groups,
            inference_layout,
            arch: cfg.arch(&schema, max_stations),
        })
    }

    /// Labels are divided by this during training: the largest training
    /// PM2.5 magnitude, or 1 when there is none.
    pub fn label_scale(&self) -> f64 {
        match self.norm.pm25_scale() {
            s if s > 0.0 && s.is_finite() => s,
            _ => 1.0,
        }
    }

    pub fn sample_count(&self) -> usize {
        self.groups.iter().map(|g| g.samples.len()).sum()
    }

    /// Provenance strings of every training and validation sample.
    pub fn provenance(&self, window: usize) -> BTreeSet<String> {
        self.groups
            .iter()
            .flat_map(|g| g.samples.iter().chain(&g.validation).flat_map(move |s| g.provenance(s, window)))
            .collect()
    }
}

#[cfg(test)]
mod tests;
