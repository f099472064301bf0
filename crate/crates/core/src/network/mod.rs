//! The inference network: shared station encoder, target encoder, station
//! and city attention, per-city experts and the mixture output.
//!
//! Parameters are plain trees generic over the leaf type, so the same layout
//! holds tensors (storage, checkpoints), graph variables (a forward pass) or
//! optimizer moments.

mod forward;
mod model;

pub use forward::{
    airex_forward, city_attention, encode, expert_infer, lstm_step, mixture, station_attention,
    forward_batch, Batch, ForwardResult, ForwardVars, StationInputs,
};
pub use model::{Model, Prediction, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Name-addressed parameter tree.
pub trait Tree<T> {
    type With<U>;

    /// Rebuilds the tree, visiting leaves in a fixed order with their dotted
    /// names.
    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::With<U>;

    /// Visits leaves in the same order as [`Tree::map_named`].
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T));

    fn leaves(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n.to_string(), t)));
        out
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! leaf_struct {
    ($(#[$m:meta])* $name:ident { $($field:ident),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)+
        }

        impl<T> Tree<T> for $name<T> {
            type With<U> = $name<U>;
            fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $name<U> {
                $name { $($field: f(&join(prefix, stringify!($field)), &self.$field),)+ }
            }
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
                $(f(&join(prefix, stringify!($field)), &self.$field);)+
            }
        }
    };
}

leaf_struct!(
    /// `x · w + b`.
    Dense { w, b }
);

leaf_struct!(
    /// One LSTM layer with diagonal peepholes (`w_ic`, `w_fc`, `w_oc` are
    /// `1 x hidden` rows applied elementwise).
    LstmLayer { w_ix, w_ih, w_ic, w_fx, w_fh, w_fc, w_cx, w_ch, w_ox, w_oh, w_oc, b_i, b_f, b_c, b_o }
);

impl<T, X: Tree<T>> Tree<T> for Vec<X> {
    type With<U> = Vec<X::With<U>>;
    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::With<U> {
        self.iter().enumerate().map(|(i, x)| x.map_named(&join(prefix, &i.to_string()), f)).collect()
    }
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        for (i, x) in self.iter().enumerate() {
            x.visit(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T, X: Tree<T>> Tree<T> for BTreeMap<String, X> {
    type With<U> = BTreeMap<String, X::With<U>>;
    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::With<U> {
        self.iter().map(|(k, x)| (k.clone(), x.map_named(&join(prefix, k), f))).collect()
    }
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        for (k, x) in self {
            x.visit(&join(prefix, k), f);
        }
    }
}

/// LSTM over the time-dependent inputs, the basic FC stack over the static
/// inputs and the fusion stack over both.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub lstm: Vec<LstmLayer<T>>,
    pub basic: Vec<Dense<T>>,
    pub fusion: Vec<Dense<T>>,
}

impl<T> Tree<T> for Encoder<T> {
    type With<U> = Encoder<U>;
    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Encoder<U> {
        Encoder {
            lstm: self.lstm.map_named(&join(prefix, "lstm"), f),
            basic: self.basic.map_named(&join(prefix, "basic"), f),
            fusion: self.fusion.map_named(&join(prefix, "fusion"), f),
        }
    }
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        self.lstm.visit(&join(prefix, "lstm"), f);
        self.basic.visit(&join(prefix, "basic"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
    }
}

/// `ReLU(x · W + b) · w + b'`: the form shared by both attention scorers
/// and the experts.
#[derive(Clone, Debug, PartialEq)]
pub struct Scorer<T> {
    pub hidden: Dense<T>,
    pub out: Dense<T>,
}

impl<T> Tree<T> for Scorer<T> {
    type With<U> = Scorer<U>;
    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Scorer<U> {
        Scorer { hidden: self.hidden.map_named(&join(prefix, "hidden"), f), out: self.out.map_named(&join(prefix, "out"), f) }
    }
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AirexParams<T> {
    pub station_encoder: Encoder<T>,
    pub target_encoder: Encoder<T>,
    pub station_attention: Scorer<T>,
    pub city_attention: Scorer<T>,
    /// One expert per source city.
    pub experts: BTreeMap<String, Scorer<T>>,
}

impl<T> Tree<T> for AirexParams<T> {
    type With<U> = AirexParams<U>;
    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> AirexParams<U> {
        AirexParams {
            station_encoder: self.station_encoder.map_named(&join(prefix, "station_encoder"), f),
            target_encoder: self.target_encoder.map_named(&join(prefix, "target_encoder"), f),
            station_attention: self.station_attention.map_named(&join(prefix, "station_attention"), f),
            city_attention: self.city_attention.map_named(&join(prefix, "city_attention"), f),
            experts: self.experts.map_named(&join(prefix, "experts"), f),
        }
    }
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        self.station_encoder.visit(&join(prefix, "station_encoder"), f);
        self.target_encoder.visit(&join(prefix, "target_encoder"), f);
        self.station_attention.visit(&join(prefix, "station_attention"), f);
        self.city_attention.visit(&join(prefix, "city_attention"), f);
        self.experts.visit(&join(prefix, "experts"), f);
    }
}

/// Layer sizes and input widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// Widths of the basic FC stack over static factors.
    pub basic: Vec<usize>,
    /// Widths of the fusion stack; the last one is the embedding width.
    pub fusion: Vec<usize>,
    pub attention_hidden: usize,
    pub expert_hidden: usize,
    /// Station slots per city in the city-attention input.
    pub max_stations: usize,
    /// Time-dependent input width of the target (meteorology).
    pub target_dynamic: usize,
    /// Time-independent input width of the target (PoI ⊕ road).
    pub target_static: usize,
}

impl ArchConfig {
    /// Layer sizes of the reference configuration with input widths taken
    /// from the feature schema.
    pub fn standard(meteo_dim: usize, location_dim: usize, max_stations: usize) -> Self {
        Self {
            lstm_hidden: 300,
            lstm_layers: 2,
            basic: vec![100],
            fusion: vec![200, 200],
            attention_hidden: 100,
            expert_hidden: 100,
            max_stations,
            target_dynamic: meteo_dim,
            target_static: location_dim,
        }
    }

    /// Meteorology plus PM2.5.
    pub fn station_dynamic(&self) -> usize {
        self.target_dynamic + 1
    }

    /// Location factors plus distance and angle to the target.
    pub fn station_static(&self) -> usize {
        self.target_static + 2
    }

    pub fn embedding(&self) -> usize {
        *self.fusion.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.lstm_hidden, self.lstm_layers, self.attention_hidden, self.expert_hidden, self.max_stations, self.target_dynamic];
        if sizes.contains(&0)
            || self.basic.is_empty()
            || self.fusion.is_empty()
            || self.basic.contains(&0)
            || self.fusion.contains(&0)
        {
            return Err(Error::Invalid(format!("architecture has an empty layer: {self:?}")));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..=a)).collect();
    Tensor::new(rows, cols, data).expect("length matches shape")
}

fn dense(rng: &mut impl Rng, input: usize, output: usize) -> Dense<Tensor> {
    Dense { w: uniform(rng, input, output, input), b: uniform(rng, 1, output, input) }
}

fn lstm_layer(rng: &mut impl Rng, input: usize, h: usize) -> LstmLayer<Tensor> {
    let mut x = || uniform(rng, input, h, input);
    let (w_ix, w_fx, w_cx, w_ox) = (x(), x(), x(), x());
    let mut r = || uniform(rng, h, h, h);
    let (w_ih, w_fh, w_ch, w_oh) = (r(), r(), r(), r());
    let mut p = || uniform(rng, 1, h, h);
    let (w_ic, w_fc, w_oc) = (p(), p(), p());
    let (b_i, b_f, b_c, b_o) = (p(), p(), p(), p());
    LstmLayer { w_ix, w_ih, w_ic, w_fx, w_fh, w_fc, w_cx, w_ch, w_ox, w_oh, w_oc, b_i, b_f, b_c, b_o }
}

fn encoder(rng: &mut impl Rng, arch: &ArchConfig, dynamic: usize, stat: usize) -> Encoder<Tensor> {
    let h = arch.lstm_hidden;
    let lstm = (0..arch.lstm_layers).map(|l| lstm_layer(rng, if l == 0 { dynamic } else { h }, h)).collect();
    let stack = |rng: &mut _, input: usize, widths: &[usize]| {
        let mut prev = input;
        widths
            .iter()
            .map(|&w| {
                let d = dense(rng, prev, w);
                prev = w;
                d
            })
            .collect::<Vec<_>>()
    };
    let basic = stack(rng, stat, &arch.basic);
    let fusion = stack(rng, arch.basic.last().unwrap() + h, &arch.fusion);
    Encoder { lstm, basic, fusion }
}

fn scorer(rng: &mut impl Rng, input: usize, hidden: usize) -> Scorer<Tensor> {
    Scorer { hidden: dense(rng, input, hidden), out: dense(rng, hidden, 1) }
}

impl AirexParams<Tensor> {
    /// Uniform `±1/√fan_in` initialization.
    pub fn init(arch: &ArchConfig, cities: &[String], rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let e = arch.embedding();
        Ok(Self {
            station_encoder: encoder(rng, arch, arch.station_dynamic(), arch.station_static()),
            target_encoder: encoder(rng, arch, arch.target_dynamic, arch.target_static),
            station_attention: scorer(rng, 2 * e, arch.attention_hidden),
            city_attention: scorer(rng, e + arch.max_stations * e + 2, arch.attention_hidden),
            experts: cities.iter().map(|c| (c.clone(), scorer(rng, 2 * e, arch.expert_hidden))).collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        self.map_named("", &mut |_, t| Tensor::zeros(t.rows(), t.cols()))
    }

    pub fn parameter_count(&self) -> usize {
        self.leaves().iter().map(|(_, t)| t.len()).sum()
    }

    /// Leaves in canonical order.
    pub fn flatten(&self) -> Vec<Tensor> {
        self.leaves().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Inverse of [`Self::flatten`].
    pub fn with_values(&self, values: &[Tensor]) -> Result<Self> {
        let mut it = values.iter();
        let mut bad = None;
        let out = self.map_named("", &mut |name, t| match it.next() {
            Some(v) if v.shape() == t.shape() => v.clone(),
            other => {
                bad.get_or_insert_with(|| format!("{name}: expected {:?}, got {:?}", t.shape(), other.map(Tensor::shape)));
                t.clone()
            }
        });
        match (bad, it.next()) {
            (Some(msg), _) => Err(Error::Invalid(msg)),
            (None, Some(_)) => Err(Error::Invalid("too many parameter tensors".into())),
            (None, None) => Ok(out),
        }
    }
}
