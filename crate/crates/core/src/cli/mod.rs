//! Command-line front end. Every command records a [`RunManifest`] before
//! writing any output so that `airex rerun --manifest <file>` can repeat it.

mod evaluate;
mod manifest;

pub use evaluate::{evaluate_methods, write_report_csv, CompareOptions, ReportRow};
pub use manifest::{manifest_path, RunManifest};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::baselines::{FnnConfig, KnnConfig};
use crate::data::{dataset_stats, generate_synthetic, load_dataset, save_dataset, write_stats_csv, Dataset, DatasetPaths, SynthConfig};
use crate::error::{Error, Result};
use crate::geo::{FeatureBuilder, GeoPoint, SourceLayout, TargetSpec};
use crate::losses::LossWeights;
use crate::network::Model;
use crate::training::{split_train_test, train, write_trace_csv, OptimizerKind, Split, TrainConfig, TrainMode};

#[derive(Parser, Debug)]
#[command(name = "airex", version, about = "Air-quality inference for cities without monitoring stations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-city dataset.
    GenData(GenDataArgs),
    /// Dump the raw feature bundle for one coordinate and time.
    Features(FeaturesArgs),
    /// Train a model and write its checkpoint and loss trace.
    Train(TrainCmd),
    /// Predict PM2.5 for stations or a coordinate with a checkpoint.
    Infer(InferArgs),
    /// RMSE report for AIREX, its experts and the baselines.
    Evaluate(EvaluateArgs),
    /// Per-city pollutant statistics.
    Stats(StatsArgs),
    /// Repeat the command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub n_cities: usize,
    #[arg(long, default_value_t = 8)]
    pub stations_per_city: usize,
    #[arg(long, default_value_t = 240)]
    pub hours: usize,
    #[arg(long, default_value_t = 24)]
    pub window: usize,
    #[arg(long, default_value_t = 30.0)]
    pub base_level: f64,
    #[arg(long, default_value_t = 40.0)]
    pub regional_shift: f64,
    #[arg(long, default_value_t = 3.0)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 5.0)]
    pub correlation_length_km: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    /// City the coordinate belongs to.
    #[arg(long)]
    pub target_city: String,
    #[arg(long, allow_negative_numbers = true)]
    pub lat: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub lon: f64,
    /// Final time step of the window.
    #[arg(long)]
    pub t: i64,
    #[arg(long, default_value_t = 24)]
    pub window: usize,
    /// Comma-separated; defaults to every other city.
    #[arg(long, value_delimiter = ',')]
    pub source_cities: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

/// Data selection and training hyperparameters shared by `train` and
/// `evaluate`.
#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub target_city: String,
    /// Comma-separated; defaults to every other city.
    #[arg(long, value_delimiter = ',')]
    pub source_cities: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.005)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub zeta: f64,
    /// Fixed MMD bandwidth; the per-batch median distance when absent.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, default_value_t = 24)]
    pub window: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stations sampled per city.
    #[arg(long, default_value_t = 5)]
    pub per_city: usize,
    #[arg(long, default_value_t = 300)]
    pub lstm_hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub lstm_layers: usize,
    #[arg(long, value_delimiter = ',', default_value = "100")]
    pub basic: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "200,200")]
    pub fusion: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub attention_hidden: usize,
    #[arg(long, default_value_t = 100)]
    pub expert_hidden: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    #[arg(long)]
    pub no_clip: bool,
    #[arg(long, default_value_t = 1)]
    pub sample_stride: usize,
    #[arg(long)]
    pub max_batches: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            weights: LossWeights { lambda: self.lambda, gamma: self.gamma, zeta: self.zeta, sigma: self.sigma },
            window: self.window,
            lstm_hidden: self.lstm_hidden,
            lstm_layers: self.lstm_layers,
            basic: self.basic.clone(),
            fusion: self.fusion.clone(),
            attention_hidden: self.attention_hidden,
            expert_hidden: self.expert_hidden,
            seed: self.seed,
            optimizer: match self.optimizer {
                OptimizerArg::Adam => OptimizerKind::Adam,
                OptimizerArg::Sgd => OptimizerKind::Sgd,
            },
            clip_norm: (!self.no_clip).then_some(self.clip_norm),
            per_city: self.per_city,
            sample_stride: self.sample_stride,
            max_batches_per_epoch: self.max_batches,
            val_fraction: self.val_fraction,
            mode: TrainMode::Mixture,
        }
    }

    fn split(&self, dataset: &Dataset) -> Result<Split> {
        let sources = source_cities(dataset, &self.target_city, &self.source_cities);
        split_train_test(dataset, &self.target_city, &sources, self.per_city, self.seed)
    }
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Loss-trace CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Train the degenerate one-city model on this source city.
    #[arg(long)]
    pub single_source: Option<String>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated station ids to infer at.
    #[arg(long, value_delimiter = ',')]
    pub stations: Vec<String>,
    /// City of the coordinate given by --lat/--lon.
    #[arg(long)]
    pub target_city: Option<String>,
    #[arg(long, allow_negative_numbers = true, requires = "target_city")]
    pub lat: Option<f64>,
    #[arg(long, allow_negative_numbers = true, requires = "target_city")]
    pub lon: Option<f64>,
    /// First and last time step; default to every covered step.
    #[arg(long)]
    pub from: Option<i64>,
    #[arg(long)]
    pub to: Option<i64>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Evaluate this checkpoint instead of training a new model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Report CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub knn_k: usize,
    #[arg(long)]
    pub no_fnn: bool,
    #[arg(long, default_value_t = 100)]
    pub fnn_epochs: usize,
    /// Also train and report one single-source model per source city.
    #[arg(long)]
    pub single_source: bool,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

fn source_cities(dataset: &Dataset, target: &str, given: &[String]) -> Vec<String> {
    if given.is_empty() {
        dataset.city_ids().into_iter().filter(|c| c != target).collect()
    } else {
        given.to_vec()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Parses `args` (without the program name) and runs the command.
pub fn run<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(std::iter::once("airex".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| Error::Invalid(e.to_string()))?;
    execute(cli.command, argv)
}

fn execute(command: Command, argv: Vec<String>) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a, argv),
        Command::Features(a) => features(a, argv),
        Command::Train(a) => train_cmd(a, argv),
        Command::Infer(a) => infer(a, argv),
        Command::Evaluate(a) => evaluate(a, argv),
        Command::Stats(a) => stats(a, argv),
        Command::Rerun(a) => {
            let m = RunManifest::load(&a.manifest)?;
            if m.argv.first().map(String::as_str) == Some("rerun") {
                return Err(Error::Invalid("a manifest cannot record a rerun".into()));
            }
            log::info!("rerunning `{}`", m.argv.join(" "));
            run(m.argv)
        }
    }
}

fn gen_data(a: GenDataArgs, argv: Vec<String>) -> Result<()> {
    let cfg = SynthConfig {
        n_cities: a.n_cities,
        stations_per_city: a.stations_per_city,
        hours: a.hours,
        window: a.window,
        base_level: a.base_level,
        regional_shift: a.regional_shift,
        noise_std: a.noise_std,
        correlation_length_km: a.correlation_length_km,
        seed: a.seed,
        ..Default::default()
    };
    cfg.validate()?;
    let paths = DatasetPaths::in_dir(&a.out);
    RunManifest::new("gen-data", argv, serde_json::to_value(&cfg)?, a.seed, vec![], files(&paths))
        .write(&a.out.join("manifest.json"))?;
    let data = generate_synthetic(&cfg)?;
    save_dataset(&data, &paths)
}

fn files(paths: &DatasetPaths) -> Vec<PathBuf> {
    paths.all().iter().map(|p| p.to_path_buf()).collect()
}

fn load(dir: &Path) -> Result<(DatasetPaths, Dataset)> {
    let paths = DatasetPaths::in_dir(dir);
    let data = load_dataset(&paths)?;
    Ok((paths, data))
}

fn features(a: FeaturesArgs, argv: Vec<String>) -> Result<()> {
    let (paths, data) = load(&a.data_dir)?;
    RunManifest::new("features", argv, serde_json::json!({ "window": a.window, "t": a.t }), 0, files(&paths), vec![a.out.clone()])
        .write(&manifest_path(&a.out))?;
    let target = TargetSpec { city_id: a.target_city.clone(), location: GeoPoint::new(a.lat, a.lon)?, station_id: None };
    let sources = source_cities(&data, &a.target_city, &a.source_cities);
    let bundle = crate::geo::build_features(&target, a.t, a.window, &data, &sources)?;
    let mut w = csv::Writer::from_writer(create(&a.out)?);
    w.write_record(["block", "entity", "step", "factor", "field", "value"])?;
    let mut put = |block: &str, entity: &str, step: &str, fv: &crate::geo::FactorVector| -> Result<()> {
        for (f, v) in fv.schema().iter().zip(fv.values()) {
            w.write_record([block, entity, step, &f.factor, &f.field, &v.to_string()])?;
        }
        Ok(())
    };
    put("target_static", "target", "", &bundle.x_tgt.static_factors)?;
    for (i, s) in bundle.x_tgt.sequence.iter().enumerate() {
        put("target_dynamic", "target", &i.to_string(), s)?;
    }
    for (id, f) in &bundle.x_stn {
        put("station_static", id, "", &f.static_factors)?;
        for (i, s) in f.sequence.iter().enumerate() {
            put("station_dynamic", id, &i.to_string(), s)?;
        }
    }
    for (c, r) in &bundle.x_city {
        let [d, ang] = r.as_array();
        w.write_record(["city", c, "", "city_location", "distance_km", &d.to_string()])?;
        w.write_record(["city", c, "", "city_location", "angle_rad", &ang.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn train_cmd(a: TrainCmd, argv: Vec<String>) -> Result<()> {
    let (paths, data) = load(&a.train.data_dir)?;
    let mut cfg = a.train.config();
    let mut split = a.train.split(&data)?;
    if let Some(city) = &a.single_source {
        split.train.retain(|c, _| c == city);
        if split.train.is_empty() {
            return Err(Error::Invalid(format!("{city} is not a source city")));
        }
        cfg.mode = TrainMode::SingleSource;
    }
    RunManifest::new("train", argv, serde_json::to_value(&cfg)?, cfg.seed, files(&paths), vec![a.checkpoint.clone(), a.out.clone()])
        .write(&manifest_path(&a.out))?;
    let out = train(&data, &split, &cfg)?;
    out.model.save(&a.checkpoint)?;
    let mut w = create(&a.out)?;
    write_trace_csv(&out.trace, &mut w)?;
    w.flush()?;
    Ok(())
}

fn infer(a: InferArgs, argv: Vec<String>) -> Result<()> {
    let (paths, data) = load(&a.data_dir)?;
    let mut inputs = files(&paths);
    inputs.push(a.checkpoint.clone());
    RunManifest::new("infer", argv, serde_json::json!({ "from": a.from, "to": a.to }), 0, inputs, vec![a.out.clone()])
        .write(&manifest_path(&a.out))?;
    let model = Model::load(&a.checkpoint)?;
    let builder = FeatureBuilder::new(&data, model.schema.clone(), model.window)?;
    let mut targets = Vec::new();
    for id in &a.stations {
        let s = data.station(id).ok_or_else(|| Error::Invalid(format!("unknown station {id}")))?;
        targets.push((id.clone(), TargetSpec { city_id: s.city_id.clone(), location: s.location, station_id: Some(id.clone()) }));
    }
    if let (Some(city), Some(lat), Some(lon)) = (&a.target_city, a.lat, a.lon) {
        targets.push((format!("{lat},{lon}"), TargetSpec { city_id: city.clone(), location: GeoPoint::new(lat, lon)?, station_id: None }));
    }
    if targets.is_empty() {
        return Err(Error::Invalid("give --stations or --target-city with --lat and --lon".into()));
    }
    let mut queries = Vec::new();
    let mut labels = Vec::new();
    for (label, target) in &targets {
        let layout: SourceLayout = model.layout_for(target);
        let times = builder.meteo_times(&target.city_id);
        for t in times {
            if a.from.is_some_and(|f| t < f) || a.to.is_some_and(|e| t > e) {
                continue;
            }
            if builder.covers(target, t, &layout) {
                queries.push((target.clone(), t));
                labels.push(label.clone());
            }
        }
    }
    if queries.is_empty() {
        return Err(Error::Invalid("no time step has complete inputs".into()));
    }
    let preds = model.predict(&builder, &queries)?;
    let mut w = csv::Writer::from_writer(create(&a.out)?);
    let mut header = vec!["target".to_string(), "t".into(), "y".into()];
    header.extend(preds[0].experts.iter().map(|(c, _)| format!("expert:{c}")));
    header.extend(preds[0].beta.iter().map(|(c, _)| format!("beta:{c}")));
    w.write_record(&header)?;
    for (p, label) in preds.iter().zip(&labels) {
        let mut row = vec![label.clone(), p.t.to_string(), p.y.to_string()];
        row.extend(p.experts.iter().map(|(_, v)| v.to_string()));
        row.extend(p.beta.iter().map(|(_, v)| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate(a: EvaluateArgs, argv: Vec<String>) -> Result<()> {
    let (paths, data) = load(&a.train.data_dir)?;
    let mut inputs = files(&paths);
    let cfg = a.train.config();
    inputs.extend(a.checkpoint.clone());
    RunManifest::new("evaluate", argv, serde_json::to_value(&cfg)?, cfg.seed, inputs, vec![a.out.clone()])
        .write(&manifest_path(&a.out))?;
    let split = a.train.split(&data)?;
    let model = match &a.checkpoint {
        Some(p) => Model::load(p)?,
        None => train(&data, &split, &cfg)?.model,
    };
    let opts = CompareOptions {
        knn: Some(KnnConfig { k: a.knn_k }),
        fnn: (!a.no_fnn).then(|| FnnConfig {
            epochs: a.fnn_epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            seed: cfg.seed,
            ..Default::default()
        }),
        single_source: a.single_source,
    };
    let rows = evaluate_methods(&data, &split, &model, &cfg, &opts)?;
    let mut w = create(&a.out)?;
    write_report_csv(&rows, &mut w)?;
    w.flush()?;
    Ok(())
}

fn stats(a: StatsArgs, argv: Vec<String>) -> Result<()> {
    let (paths, data) = load(&a.data_dir)?;
    RunManifest::new("stats", argv, serde_json::Value::Null, 0, files(&paths), vec![a.out.clone()]).write(&manifest_path(&a.out))?;
    let mut w = create(&a.out)?;
    write_stats_csv(&dataset_stats(&data), &mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
