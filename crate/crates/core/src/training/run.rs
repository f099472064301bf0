use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Experiment, Group, Sample, Split, TrainConfig};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geo::{FeatureBuilder, FeatureBundle, TargetSpec};
use crate::losses::{self, median_bandwidth};
use crate::network::{encode, forward_batch, AirexParams, Batch, ForwardVars, Model, StationInputs, Tree};

/// Mean batch losses of one epoch in network units, plus validation RMSE
/// in µg/m³ (NaN without validation samples).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_f: f64,
    pub l_m: f64,
    pub l_a: f64,
    pub r: f64,
    pub total: f64,
    pub val_rmse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<EpochStats>,
    /// Validation RMSE of the returned model.
    pub val_rmse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Objective {
    /// Weighted sum of all four terms.
    Full,
    /// Mixture-output MSE alone, built without the other terms.
    MseOnly,
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Invalid(format!("RMSE over {} predictions and {} labels", pred.len(), truth.len())));
    }
    let se: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((se / pred.len() as f64).sqrt())
}

/// Splits, featurizes and trains.
pub fn train(dataset: &Dataset, split: &Split, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let exp = Experiment::new(dataset, split, cfg)?;
    train_experiment(&exp, cfg)
}

pub fn train_experiment(exp: &Experiment, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(exp, cfg, Objective::Full)
}

fn sample_bundles(exp: &Experiment, group: &Group, samples: &[&Sample]) -> Result<Vec<FeatureBundle>> {
    samples.iter().map(|s| exp.builder.bundle(&s.target, s.t, &group.layout, &exp.norm)).collect()
}

/// Station-encoder inputs of the meta-target's other stations, one block
/// of rows per sample.
fn aux_inputs(exp: &Experiment, group: &Group, samples: &[&Sample]) -> Result<Option<StationInputs>> {
    let mut static_rows = Vec::new();
    let mut seq_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); exp.builder.window()];
    for s in samples {
        let Some(layout) = group.aux_layout(&s.target) else {
            continue;
        };
        let b = exp.builder.bundle(&s.target, s.t, &layout, &exp.norm)?;
        for f in b.x_stn.values() {
            static_rows.push(f.static_factors.values().to_vec());
            for (t, v) in f.sequence.iter().enumerate() {
                seq_rows[t].push(v.values().to_vec());
            }
        }
    }
    if static_rows.len() < 2 {
        return Ok(None);
    }
    StationInputs::from_rows(static_rows, seq_rows).map(Some)
}

struct BatchLosses {
    total: Var,
    parts: [f64; 4],
}

fn batch_objective(
    g: &mut Graph,
    exp: &Experiment,
    cfg: &TrainConfig,
    p: &AirexParams<Var>,
    group: &Group,
    samples: &[&Sample],
    label_scale: f64,
    objective: Objective,
) -> Result<BatchLosses> {
    let bundles = sample_bundles(exp, group, samples)?;
    let refs: Vec<&FeatureBundle> = bundles.iter().collect();
    let batch = Batch::from_bundles(&refs, &group.layout)?;
    let vars = ForwardVars::build(g, p, &exp.arch, &batch)?;
    // The network works on labels divided by `label_scale`; the squared
    // errors are taken in µg/m³ so that they keep their weight against the
    // unit-free R and L_a terms.
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let truth = g.constant(Tensor::column(&labels));
    let y = g.scale(vars.y, label_scale);
    let l_f = losses::loss_final(g, y, truth)?;
    if objective == Objective::MseOnly {
        let v = g.value(l_f).item();
        return Ok(BatchLosses { total: l_f, parts: [v, 0.0, 0.0, 0.0] });
    }
    let w = cfg.effective_weights();
    let experts: Vec<Var> = vars.experts.iter().map(|&e| g.scale(e, label_scale)).collect();
    let l_m = losses::loss_experts(g, &experts, truth)?;
    let r = losses::entropy_reg(g, vars.beta);
    let mut l_a = None;
    if w.gamma > 0.0 && g.shape(vars.z_stn)[0] >= 2 {
        if let Some(aux) = aux_inputs(exp, group, samples)? {
            let (seq, stat) = aux.to_graph(g);
            let z_aux = encode(g, &p.station_encoder, &seq, stat)?;
            let sigma = match w.sigma {
                Some(s) => s,
                None => {
                    let pooled = Tensor::from_rows(
                        &(0..g.shape(vars.z_stn)[0])
                            .map(|i| g.value(vars.z_stn).row_slice(i).to_vec())
                            .chain((0..g.shape(z_aux)[0]).map(|i| g.value(z_aux).row_slice(i).to_vec()))
                            .collect::<Vec<_>>(),
                    )?;
                    median_bandwidth(&pooled)
                }
            };
            l_a = Some(losses::loss_adversarial(g, &[vars.z_stn], z_aux, sigma)?);
        }
    }
    let l_a = match l_a {
        Some(v) => v,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let total = losses::total_loss(g, l_f, l_m, l_a, r, &w)?;
    let parts = [g.value(l_f).item(), g.value(l_m).item(), g.value(l_a).item(), g.value(r).item()];
    Ok(BatchLosses { total, parts })
}

/// Total loss of one batch drawn from `group`, with parameters already in
/// `g`.
pub fn batch_loss(
    g: &mut Graph,
    exp: &Experiment,
    cfg: &TrainConfig,
    params: &AirexParams<Var>,
    group: &Group,
    samples: &[&Sample],
) -> Result<Var> {
    Ok(batch_objective(g, exp, cfg, params, group, samples, exp.label_scale(), Objective::Full)?.total)
}

/// Batch plan of one epoch: `(group, sample indices)`. Groups take turns;
/// each draws from its own shuffled cursor and reshuffles on wrap-around.
pub(crate) struct Planner {
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
}

impl Planner {
    pub(crate) fn new(groups: &[Group]) -> Self {
        Self { orders: groups.iter().map(|g| (0..g.samples.len()).collect()).collect(), cursors: vec![usize::MAX; groups.len()] }
    }

    pub(crate) fn epoch(&mut self, rng: &mut ChaCha8Rng, batch_size: usize, cap: Option<usize>) -> Vec<(usize, Vec<usize>)> {
        let total: usize = self.orders.iter().map(Vec::len).sum();
        let mut n = total.div_ceil(batch_size);
        if let Some(c) = cap {
            n = n.min(c);
        }
        for (o, c) in self.orders.iter_mut().zip(&mut self.cursors) {
            o.shuffle(rng);
            *c = 0;
        }
        let k = self.orders.len();
        (0..n)
            .map(|b| {
                let gi = b % k;
                let order = &mut self.orders[gi];
                let take = batch_size.min(order.len());
                if self.cursors[gi] + take > order.len() {
                    order.shuffle(rng);
                    self.cursors[gi] = 0;
                }
                let c = self.cursors[gi];
                self.cursors[gi] += take;
                (gi, order[c..c + take].to_vec())
            })
            .collect()
    }
}

fn build_model(exp: &Experiment, cfg: &TrainConfig, params: AirexParams<Tensor>, label_scale: f64) -> Model {
    let mut meta = BTreeMap::new();
    meta.insert("train_config".into(), serde_json::to_value(cfg).unwrap_or_default());
    meta.insert("split".into(), serde_json::to_value(&exp.split).unwrap_or_default());
    Model {
        arch: exp.arch.clone(),
        schema: exp.builder.schema().clone(),
        window: exp.builder.window(),
        layout: exp.inference_layout.clone(),
        norm: exp.norm.clone(),
        label_scale,
        params,
        meta,
    }
}

/// RMSE in µg/m³ over every group's validation samples; NaN when there
/// are none.
fn validation_rmse(exp: &Experiment, params: &AirexParams<Tensor>, label_scale: f64) -> Result<f64> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for group in &exp.groups {
        for chunk in group.validation.chunks(128) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let bundles = sample_bundles(exp, group, &refs)?;
            let b: Vec<&FeatureBundle> = bundles.iter().collect();
            for (r, s) in forward_batch(&b, &group.layout, params, &exp.arch)?.iter().zip(chunk) {
                pred.push(r.y * label_scale);
                truth.push(s.label);
            }
        }
    }
    if pred.is_empty() {
        return Ok(f64::NAN);
    }
    rmse(&pred, &truth)
}

pub(crate) fn train_with(exp: &Experiment, cfg: &TrainConfig, objective: Objective) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let experts = exp.split.source_cities();
    let mut params = AirexParams::init(&exp.arch, &experts, &mut rng)?;
    let label_scale = exp.label_scale();
    let mut opt = cfg.optimizer.build(cfg.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut planner = Planner::new(&exp.groups);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let plan = planner.epoch(&mut shuffle_rng, cfg.batch_size, cfg.max_batches_per_epoch);
        let mut sums = [0.0; 5];
        for (bi, (gi, idx)) in plan.iter().enumerate() {
            let group = &exp.groups[*gi];
            let samples: Vec<&Sample> = idx.iter().map(|&i| &group.samples[i]).collect();
            let mut g = Graph::new();
            let p = params.map_named("", &mut |_, t| g.param(t.clone()));
            let losses = batch_objective(&mut g, exp, cfg, &p, group, &samples, label_scale, objective)?;
            let total = g.value(losses.total).item();
            if !total.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            g.backward(losses.total)?;
            let mut grads: Vec<Tensor> = p
                .leaves()
                .into_iter()
                .map(|(_, &v)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)[0], g.shape(v)[1])))
                .collect();
            if let Some(c) = cfg.clip_norm {
                clip(&mut grads, c, epoch, bi)?;
            }
            let mut flat = params.flatten();
            opt.step(&mut flat, &grads);
            params = params.with_values(&flat)?;
            for (s, v) in sums.iter_mut().zip(losses.parts.iter().chain([&total])) {
                *s += v;
            }
        }
        let n = plan.len().max(1) as f64;
        let val_rmse = validation_rmse(exp, &params, label_scale)?;
        let stats = EpochStats {
            epoch,
            l_f: sums[0] / n,
            l_m: sums[1] / n,
            l_a: sums[2] / n,
            r: sums[3] / n,
            total: sums[4] / n,
            val_rmse,
        };
        log::info!(
            "epoch {epoch}: total {:.6} l_f {:.6} l_m {:.6} l_a {:.6} r {:.6} val_rmse {:.4}",
            stats.total,
            stats.l_f,
            stats.l_m,
            stats.l_a,
            stats.r,
            stats.val_rmse
        );
        trace.push(stats);
    }
    let val_rmse = match trace.last() {
        Some(s) => s.val_rmse,
        None => validation_rmse(exp, &params, label_scale)?,
    };
    Ok(TrainOutcome { model: build_model(exp, cfg, params, label_scale), trace, val_rmse })
}

fn clip(grads: &mut [Tensor], max_norm: f64, epoch: usize, batch: usize) -> Result<()> {
    let norm = super::clip_global_norm(grads, max_norm);
    if norm.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, batch })
    }
}

pub fn write_trace_csv(trace: &[EpochStats], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in trace {
        w.serialize(s)?;
    }
    if trace.is_empty() {
        w.write_record(["epoch", "l_f", "l_m", "l_a", "r", "total", "val_rmse"])?;
    }
    w.flush()?;
    Ok(())
}

/// Labelled test queries: every time step at which a test station has a
/// reading and `builder` covers the model's inputs.
pub fn test_queries(model: &Model, builder: &FeatureBuilder, dataset: &Dataset, stations: &[String]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for id in stations {
        let s = dataset.station(id).ok_or_else(|| Error::Invalid(format!("unknown station {id}")))?;
        let target = TargetSpec { city_id: s.city_id.clone(), location: s.location, station_id: Some(s.id.clone()) };
        let layout = model.layout_for(&target);
        for t in builder.pm25_times(id) {
            if builder.covers(&target, t, &layout) {
                if let Some(label) = builder.pm25(id, t) {
                    out.push(Sample { target: target.clone(), t, label });
                }
            }
        }
    }
    Ok(out)
}

/// RMSE of `model` on labelled queries, in µg/m³.
pub fn evaluate_rmse(model: &Model, builder: &FeatureBuilder, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }
    let queries: Vec<(TargetSpec, i64)> = samples.iter().map(|s| (s.target.clone(), s.t)).collect();
    let pred: Vec<f64> = model.predict(builder, &queries)?.iter().map(|p| p.y).collect();
    let truth: Vec<f64> = samples.iter().map(|s| s.label).collect();
    rmse(&pred, &truth)
}

/// Hyperparameter grid over epochs, batch size and learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub epochs: Vec<usize>,
    pub batch_size: Vec<usize>,
    pub learning_rate: Vec<f64>,
    /// Evaluate only the first `n` combinations.
    pub limit: Option<usize>,
}

impl Grid {
    pub fn standard() -> Self {
        Self {
            epochs: vec![100, 200, 300],
            batch_size: vec![32, 64, 128, 256, 512],
            learning_rate: vec![0.005, 0.01],
            limit: None,
        }
    }

    /// One config per combination; trial `i` gets seed `base.seed + i`.
    pub fn expand(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &epochs in &self.epochs {
            for &batch_size in &self.batch_size {
                for &learning_rate in &self.learning_rate {
                    let seed = base.seed.wrapping_add(out.len() as u64);
                    out.push(TrainConfig { epochs, batch_size, learning_rate, seed, ..base.clone() });
                }
            }
        }
        if let Some(n) = self.limit {
            out.truncate(n);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub best: TrainConfig,
    /// Validation RMSE per trial in input order; NaN scores never win.
    pub scores: Vec<(TrainConfig, f64)>,
}

/// Trains every config (in parallel threads) and picks the lowest
/// validation RMSE on meta-target stations. Ties keep the earlier trial.
pub fn grid_search(dataset: &Dataset, split: &Split, configs: &[TrainConfig]) -> Result<GridResult> {
    if configs.is_empty() {
        return Err(Error::Invalid("empty grid".into()));
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(configs.len());
    let mut results: Vec<Option<Result<f64>>> = (0..configs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<_> = results.chunks_mut(configs.len().div_ceil(threads)).enumerate().collect();
        let per = configs.len().div_ceil(threads);
        for (ci, slot) in chunks {
            scope.spawn(move || {
                for (j, r) in slot.iter_mut().enumerate() {
                    let cfg = &configs[ci * per + j];
                    *r = Some(train(dataset, split, cfg).map(|o| o.val_rmse));
                }
            });
        }
    });
    let mut scores = Vec::with_capacity(configs.len());
    for (cfg, r) in configs.iter().zip(results) {
        scores.push((cfg.clone(), r.expect("every trial runs")?));
    }
    let best = scores
        .iter()
        .filter(|(_, s)| !s.is_nan())
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map_or_else(|| configs[0].clone(), |(c, _)| c.clone());
    Ok(GridResult { best, scores })
}
