use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geo::{FeatureBuilder, FeatureBundle, FeatureNorm, SourceLayout};
use crate::losses::loss_final;
use crate::network::{Dense, Tree};
use crate::training::{rmse, OptimizerKind, Sample};
use crate::training::Experiment;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FnnConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FnnConfig {
    fn default() -> Self {
        Self { hidden: vec![200, 200, 200], epochs: 100, batch_size: 32, learning_rate: 0.005, seed: 0 }
    }
}

/// Column layout of the flattened input: target factors, then per source
/// city its relative position and `max_stations` station slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FnnLayout {
    pub cities: Vec<String>,
    pub max_stations: usize,
    pub target_width: usize,
    pub station_width: usize,
}

impl FnnLayout {
    pub fn input_dim(&self) -> usize {
        self.target_width + self.cities.len() * (2 + self.max_stations * self.station_width)
    }

    /// Final-step features of a normalized bundle. Slots of absent cities
    /// and missing stations are zero.
    pub fn features(&self, b: &FeatureBundle) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend(b.x_tgt.static_factors.values());
        if let Some(last) = b.x_tgt.sequence.last() {
            x.extend(last.values());
        }
        if x.len() != self.target_width {
            return Err(Error::Invalid(format!("target features have width {}, expected {}", x.len(), self.target_width)));
        }
        for c in &self.cities {
            let start = x.len();
            if let Some(rel) = b.x_city.get(c) {
                x.extend(rel.as_array());
                let mut n = 0;
                for f in b.x_stn.values().filter(|f| &f.city_id == c) {
                    n += 1;
                    if n > self.max_stations {
                        return Err(Error::Invalid(format!("city {c} has more than {} stations", self.max_stations)));
                    }
                    x.extend(f.static_factors.values());
                    if let Some(last) = f.sequence.last() {
                        x.extend(last.values());
                    }
                    if x.len() != start + 2 + n * self.station_width {
                        return Err(Error::Invalid(format!("station features of city {c} have the wrong width")));
                    }
                }
            }
            x.resize(start + 2 + self.max_stations * self.station_width, 0.0);
        }
        Ok(x)
    }
}

/// ReLU hidden layers, linear scalar output.
pub fn fnn_forward(g: &mut Graph, layers: &[Dense<Var>], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = g.affine(h, l.w, l.b)?;
        if i + 1 < layers.len() {
            h = g.relu(h);
        }
    }
    Ok(h)
}

pub fn fnn_init(input: usize, hidden: &[usize], rng: &mut impl Rng) -> Vec<Dense<Tensor>> {
    let mut dims = vec![input];
    dims.extend(hidden);
    dims.push(1);
    dims.windows(2)
        .map(|w| {
            let a = 1.0 / (w[0] as f64).sqrt();
            let mut u = |r, c| Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-a..a)).collect()).unwrap();
            Dense { w: u(w[0], w[1]), b: u(1, w[1]) }
        })
        .collect()
}

/// Scalar output for one input row.
pub fn fnn_infer(layers: &[Dense<Tensor>], x: &[f64]) -> Result<f64> {
    let Some(first) = layers.first() else {
        return Err(Error::Invalid("network without layers".into()));
    };
    if first.w.rows() != x.len() {
        return Err(Error::Shape { op: "fnn_infer", lhs: [1, x.len()], rhs: first.w.shape() });
    }
    let mut g = Graph::new();
    let p: Vec<Dense<Var>> = layers.iter().map(|l| Dense { w: g.constant(l.w.clone()), b: g.constant(l.b.clone()) }).collect();
    let xv = g.constant(Tensor::row(x));
    let y = fnn_forward(&mut g, &p, xv)?;
    Ok(g.value(y).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FnnModel {
    pub layers: Vec<Dense<Tensor>>,
    pub input: FnnLayout,
    /// Sources used at inference.
    pub layout: SourceLayout,
    pub norm: FeatureNorm,
    pub label_scale: f64,
}

impl FnnModel {
    pub fn predict(&self, builder: &FeatureBuilder, samples: &[Sample]) -> Result<Vec<f64>> {
        samples
            .iter()
            .map(|s| {
                let layout = match &s.target.station_id {
                    Some(id) => self.layout.without_station(id),
                    None => self.layout.clone(),
                };
                let b = builder.bundle(&s.target, s.t, &layout, &self.norm)?;
                Ok(fnn_infer(&self.layers, &self.input.features(&b)?)? * self.label_scale)
            })
            .collect()
    }

    pub fn rmse(&self, builder: &FeatureBuilder, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Invalid("empty test set".into()));
        }
        let truth: Vec<f64> = samples.iter().map(|s| s.label).collect();
        rmse(&self.predict(builder, samples)?, &truth)
    }
}

/// Fits the FNN with MSE on the experiment's meta-samples.
pub fn fnn_train(exp: &Experiment, cfg: &FnnConfig) -> Result<FnnModel> {
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let input = FnnLayout {
        cities: exp.split.source_cities(),
        max_stations: exp.arch.max_stations,
        target_width: exp.arch.target_static + exp.arch.target_dynamic,
        station_width: exp.arch.station_static() + exp.arch.station_dynamic(),
    };
    let label_scale = exp.label_scale();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for g in &exp.groups {
        for s in &g.samples {
            let b = exp.builder.bundle(&s.target, s.t, &g.layout, &exp.norm)?;
            rows.push(input.features(&b)?);
            labels.push(s.label / label_scale);
        }
    }
    if rows.is_empty() {
        return Err(Error::Invalid("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layers = fnn_init(input.input_dim(), &cfg.hidden, &mut rng);
    let mut opt = OptimizerKind::Adam.build(cfg.learning_rate);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = Tensor::from_rows(&chunk.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>())?;
            let y = Tensor::column(&chunk.iter().map(|&i| labels[i]).collect::<Vec<_>>());
            let mut g = Graph::new();
            let p = layers.map_named("", &mut |_, t| g.param(t.clone()));
            let (xv, yv) = (g.constant(x), g.constant(y));
            let out = fnn_forward(&mut g, &p, xv)?;
            let loss = loss_final(&mut g, out, yv)?;
            if !g.value(loss).item().is_finite() {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            g.backward(loss)?;
            let grads: Vec<Tensor> = p
                .leaves()
                .into_iter()
                .map(|(_, &v)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)[0], g.shape(v)[1])))
                .collect();
            let mut flat: Vec<Tensor> = layers.leaves().into_iter().map(|(_, t)| t.clone()).collect();
            opt.step(&mut flat, &grads);
            let mut it = flat.into_iter();
            layers = layers.map_named("", &mut |_, _| it.next().expect("one tensor per leaf"));
        }
    }
    Ok(FnnModel { layers, input, layout: exp.inference_layout.clone(), norm: exp.norm.clone(), label_scale })
}
