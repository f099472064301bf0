use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{forward_batch, AirexParams, ArchConfig, ForwardResult, Tree};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geo::{FeatureBuilder, FeatureNorm, FeatureSchema, SourceLayout, TargetSpec};

pub const CHECKPOINT_FORMAT: &str = "airex-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Rows per inference graph.
const INFER_CHUNK: usize = 128;

/// Trained network with everything needed to featurize new inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: ArchConfig,
    pub schema: FeatureSchema,
    pub window: usize,
    /// Source cities and stations used at inference.
    pub layout: SourceLayout,
    pub norm: FeatureNorm,
    /// Network outputs are PM2.5 divided by this.
    pub label_scale: f64,
    pub params: AirexParams<Tensor>,
    /// Free-form provenance (training config, split).
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// Prediction in µg/m³.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub target: TargetSpec,
    pub t: i64,
    pub y: f64,
    pub experts: Vec<(String, f64)>,
    pub beta: Vec<(String, f64)>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    arch: ArchConfig,
    schema: FeatureSchema,
    window: usize,
    layout: SourceLayout,
    norm: FeatureNorm,
    label_scale: f64,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
    params: BTreeMap<String, StoredTensor>,
}

impl Model {
    /// Source layout for `target`; a target station never feeds itself.
    pub fn layout_for(&self, target: &TargetSpec) -> SourceLayout {
        match &target.station_id {
            Some(s) => self.layout.without_station(s),
            None => self.layout.clone(),
        }
    }

    /// Raw network results for each `(target, t)` query.
    pub fn forward(&self, builder: &FeatureBuilder, queries: &[(TargetSpec, i64)]) -> Result<Vec<ForwardResult>> {
        let mut out = Vec::with_capacity(queries.len());
        let mut start = 0;
        while start < queries.len() {
            let layout = self.layout_for(&queries[start].0);
            let mut end = start + 1;
            while end < queries.len() && end - start < INFER_CHUNK && self.layout_for(&queries[end].0) == layout {
                end += 1;
            }
            let bundles = queries[start..end]
                .iter()
                .map(|(tg, t)| builder.bundle(tg, *t, &layout, &self.norm))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = bundles.iter().collect();
            out.extend(forward_batch(&refs, &layout, &self.params, &self.arch)?);
            start = end;
        }
        Ok(out)
    }

    pub fn predict(&self, builder: &FeatureBuilder, queries: &[(TargetSpec, i64)]) -> Result<Vec<Prediction>> {
        let s = self.label_scale;
        Ok(self
            .forward(builder, queries)?
            .into_iter()
            .zip(queries)
            .map(|(r, (target, t))| Prediction {
                target: target.clone(),
                t: *t,
                y: r.y * s,
                experts: r.experts.into_iter().map(|(c, v)| (c, v * s)).collect(),
                beta: r.beta,
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut params = BTreeMap::new();
        for (name, t) in self.params.leaves() {
            params.insert(name, StoredTensor { shape: t.shape(), data: t.data().to_vec() });
        }
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            arch: self.arch.clone(),
            schema: self.schema.clone(),
            window: self.window,
            layout: self.layout.clone(),
            norm: self.norm.clone(),
            label_scale: self.label_scale,
            meta: self.meta.clone(),
            params,
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        let cities: Vec<String> = ck.layout.cities.iter().map(|(c, _)| c.clone()).collect();
        // The stored experts may cover more cities than the inference layout.
        let mut expert_cities: Vec<String> = ck
            .params
            .keys()
            .filter_map(|k| k.strip_prefix("experts.")?.rsplitn(3, '.').nth(2).map(str::to_string))
            .collect();
        expert_cities.dedup();
        for c in &cities {
            if !expert_cities.contains(c) {
                return Err(Error::Checkpoint(format!("no expert stored for source city {c}")));
            }
        }
        let template = AirexParams::init(&ck.arch, &expert_cities, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        let mut missing = None;
        let mut stored = ck.params;
        let params = template.map_named("", &mut |name, t| match stored.remove(name) {
            Some(s) if s.shape == t.shape() => Tensor::new(s.shape[0], s.shape[1], s.data).unwrap_or_else(|_| {
                missing.get_or_insert(format!("{name}: data length does not match shape"));
                t.clone()
            }),
            Some(s) => {
                missing.get_or_insert(format!("{name}: shape {:?}, expected {:?}", s.shape, t.shape()));
                t.clone()
            }
            None => {
                missing.get_or_insert(format!("missing parameter {name}"));
                t.clone()
            }
        });
        if let Some(m) = missing {
            return Err(Error::Checkpoint(m));
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(Model {
            arch: ck.arch,
            schema: ck.schema,
            window: ck.window,
            layout: ck.layout,
            norm: ck.norm,
            label_scale: ck.label_scale,
            params,
            meta: ck.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.as_ref().display()))))?;
        Self::from_json(&text)
    }
}
