use std::collections::BTreeMap;

use super::{AirexParams, ArchConfig, Encoder, LstmLayer, Scorer, Tree};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geo::{FeatureBundle, SourceLayout};

/// One LSTM step with diagonal peepholes, rows as independent sequences.
pub fn lstm_step(g: &mut Graph, p: &LstmLayer<Var>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let gate = |g: &mut Graph, wx: Var, wh: Var, peep: Option<(Var, Var)>, b: Var| -> Result<Var> {
        let a = g.matmul(x, wx)?;
        let r = g.matmul(h, wh)?;
        let mut s = g.add(a, r)?;
        if let Some((w, cell)) = peep {
            let pc = g.mul_row(cell, w)?;
            s = g.add(s, pc)?;
        }
        g.add_row(s, b)
    };
    let i = gate(g, p.w_ix, p.w_ih, Some((p.w_ic, c)), p.b_i)?;
    let i = g.sigmoid(i);
    let f = gate(g, p.w_fx, p.w_fh, Some((p.w_fc, c)), p.b_f)?;
    let f = g.sigmoid(f);
    let cand = gate(g, p.w_cx, p.w_ch, None, p.b_c)?;
    let cand = g.tanh(cand);
    let keep = g.hadamard(f, c)?;
    let write = g.hadamard(i, cand)?;
    let c_new = g.add(keep, write)?;
    let o = gate(g, p.w_ox, p.w_oh, Some((p.w_oc, c_new)), p.b_o)?;
    let o = g.sigmoid(o);
    let tc = g.tanh(c_new);
    let h_new = g.hadamard(o, tc)?;
    Ok((h_new, c_new))
}

fn dense_stack(g: &mut Graph, layers: &[super::Dense<Var>], mut x: Var) -> Result<Var> {
    for l in layers {
        let a = g.affine(x, l.w, l.b)?;
        x = g.relu(a);
    }
    Ok(x)
}

/// Encoder output `z^(L+L')`: the LSTM's final hidden state and the basic
/// stack's output, fused by the fusion stack.
pub fn encode(g: &mut Graph, p: &Encoder<Var>, sequence: &[Var], static_factors: Var) -> Result<Var> {
    let Some(&first) = sequence.first() else {
        return Err(Error::Invalid("encoder needs at least one time step".into()));
    };
    let rows = g.shape(first)[0];
    let mut inputs = sequence.to_vec();
    for layer in &p.lstm {
        let hidden = g.shape(layer.b_i)[1];
        let mut h = g.constant(Tensor::zeros(rows, hidden));
        let mut c = h;
        let mut outputs = Vec::with_capacity(inputs.len());
        for &x in &inputs {
            (h, c) = lstm_step(g, layer, x, h, c)?;
            outputs.push(h);
        }
        inputs = outputs;
    }
    let last = *inputs.last().unwrap();
    let z = dense_stack(g, &p.basic, static_factors)?;
    let fused = g.concat_cols(&[z, last])?;
    dense_stack(g, &p.fusion, fused)
}

fn score(g: &mut Graph, s: &Scorer<Var>, x: Var) -> Result<Var> {
    let h = g.affine(x, s.hidden.w, s.hidden.b)?;
    let h = g.relu(h);
    g.affine(h, s.out.w, s.out.b)
}

/// Station weights `α_k` (rows × stations) and the weighted city embedding.
pub fn station_attention(g: &mut Graph, s: &Scorer<Var>, z_tgt: Var, stations: &[Var]) -> Result<(Var, Var)> {
    if stations.is_empty() {
        return Err(Error::Invalid("station attention over an empty station set".into()));
    }
    let logits = stations
        .iter()
        .map(|&z| {
            let x = g.concat_cols(&[z_tgt, z])?;
            score(g, s, x)
        })
        .collect::<Result<Vec<_>>>()?;
    let logits = g.concat_cols(&logits)?;
    let alpha = g.softmax_rows(logits);
    let mut z_ck = None;
    for (i, &z) in stations.iter().enumerate() {
        let a = g.column(alpha, i)?;
        let term = g.scale_rows(z, a)?;
        z_ck = Some(match z_ck {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok((alpha, z_ck.unwrap()))
}

/// City weights `β` (rows × cities). `z_cat[k]` is city k's padded station
/// concatenation, `x_city[k]` its relative position to the target city.
pub fn city_attention(g: &mut Graph, s: &Scorer<Var>, z_tgt: Var, z_cat: &[Var], x_city: &[Var]) -> Result<Var> {
    if z_cat.is_empty() || z_cat.len() != x_city.len() {
        return Err(Error::Invalid(format!(
            "city attention needs one location per city ({} vs {})",
            z_cat.len(),
            x_city.len()
        )));
    }
    let logits = z_cat
        .iter()
        .zip(x_city)
        .map(|(&z, &xc)| {
            let x = g.concat_cols(&[z_tgt, z, xc])?;
            score(g, s, x)
        })
        .collect::<Result<Vec<_>>>()?;
    let logits = g.concat_cols(&logits)?;
    Ok(g.softmax_rows(logits))
}

pub fn expert_infer(g: &mut Graph, s: &Scorer<Var>, z_tgt: Var, z_ck: Var) -> Result<Var> {
    let x = g.concat_cols(&[z_tgt, z_ck])?;
    score(g, s, x)
}

/// `Σ_k β_k ỹ_k` per row.
pub fn mixture(g: &mut Graph, beta: Var, outputs: &[Var]) -> Result<Var> {
    let k = g.shape(beta)[1];
    if k != outputs.len() || k == 0 {
        return Err(Error::Invalid(format!("mixture over {} outputs with {k} weights", outputs.len())));
    }
    let mut acc = None;
    for (i, &y) in outputs.iter().enumerate() {
        let b = g.column(beta, i)?;
        let term = g.hadamard(y, b)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.unwrap())
}

/// Encoder inputs for a block of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct StationInputs {
    /// One `rows x width` tensor per window step.
    pub sequence: Vec<Tensor>,
    pub static_factors: Tensor,
}

impl StationInputs {
    pub fn rows(&self) -> usize {
        self.static_factors.rows()
    }

    /// Station-major rows (`station * bundles + sample`) for `stations`.
    pub fn from_bundles(bundles: &[&FeatureBundle], stations: &[String]) -> Result<Self> {
        let window = bundles.first().map_or(0, |b| b.window);
        let mut static_rows = Vec::with_capacity(stations.len() * bundles.len());
        let mut seq_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); window];
        for s in stations {
            for b in bundles {
                let f = b
                    .x_stn
                    .get(s)
                    .ok_or_else(|| Error::Invalid(format!("bundle at t={} lacks station {s}", b.t_end)))?;
                if f.sequence.len() != window {
                    return Err(Error::Invalid(format!("station {s}: {} steps, expected {window}", f.sequence.len())));
                }
                static_rows.push(f.static_factors.values().to_vec());
                for (t, v) in f.sequence.iter().enumerate() {
                    seq_rows[t].push(v.values().to_vec());
                }
            }
        }
        Self::from_rows(static_rows, seq_rows)
    }

    pub(crate) fn from_rows(static_rows: Vec<Vec<f64>>, seq_rows: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        Ok(Self {
            static_factors: Tensor::from_rows(&static_rows)?,
            sequence: seq_rows.iter().map(|r| Tensor::from_rows(r)).collect::<Result<_>>()?,
        })
    }

    fn targets(bundles: &[&FeatureBundle]) -> Result<Self> {
        let window = bundles.first().map_or(0, |b| b.window);
        let static_rows = bundles.iter().map(|b| b.x_tgt.static_factors.values().to_vec()).collect();
        let mut seq_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); window];
        for b in bundles {
            if b.x_tgt.sequence.len() != window {
                return Err(Error::Invalid(format!("target: {} steps, expected {window}", b.x_tgt.sequence.len())));
            }
            for (t, v) in b.x_tgt.sequence.iter().enumerate() {
                seq_rows[t].push(v.values().to_vec());
            }
        }
        Self::from_rows(static_rows, seq_rows)
    }

    pub(crate) fn to_graph(&self, g: &mut Graph) -> (Vec<Var>, Var) {
        let seq = self.sequence.iter().map(|t| g.constant(t.clone())).collect();
        (seq, g.constant(self.static_factors.clone()))
    }
}

/// Network inputs for several bundles that share one source layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub target: StationInputs,
    /// Station-major: rows `i * size .. (i + 1) * size` belong to `station_ids[i]`.
    pub stations: StationInputs,
    pub station_ids: Vec<String>,
    /// City id with indices into `station_ids`, in layout order.
    pub cities: Vec<(String, Vec<usize>)>,
    /// Per city, `size x 2` relative position to the target city.
    pub x_city: Vec<Tensor>,
}

impl Batch {
    pub fn from_bundles(bundles: &[&FeatureBundle], layout: &SourceLayout) -> Result<Self> {
        if bundles.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let window = bundles[0].window;
        if bundles.iter().any(|b| b.window != window) {
            return Err(Error::Invalid("bundles in a batch must share the window".into()));
        }
        let mut station_ids = Vec::new();
        let mut cities = Vec::new();
        let mut x_city = Vec::new();
        for (c, stations) in &layout.cities {
            let idx = (station_ids.len()..station_ids.len() + stations.len()).collect();
            station_ids.extend(stations.iter().cloned());
            cities.push((c.clone(), idx));
            let rows = bundles
                .iter()
                .map(|b| {
                    b.x_city
                        .get(c)
                        .map(|r| r.as_array().to_vec())
                        .ok_or_else(|| Error::Invalid(format!("bundle lacks city {c}")))
                })
                .collect::<Result<Vec<_>>>()?;
            x_city.push(Tensor::from_rows(&rows)?);
        }
        for b in bundles {
            if b.x_stn.len() != station_ids.len() || b.x_city.len() != cities.len() {
                return Err(Error::Invalid(format!("bundle at t={} does not match the source layout", b.t_end)));
            }
        }
        Ok(Self {
            size: bundles.len(),
            target: StationInputs::targets(bundles)?,
            stations: StationInputs::from_bundles(bundles, &station_ids)?,
            station_ids,
            cities,
            x_city,
        })
    }
}

/// Graph handles of one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `size x 1` mixture output.
    pub y: Var,
    /// Per city (layout order), `size x 1`.
    pub experts: Vec<Var>,
    /// Per city, `size x stations`.
    pub alpha: Vec<Var>,
    /// `size x cities`.
    pub beta: Var,
    pub z_tgt: Var,
    /// All station embeddings, station-major.
    pub z_stn: Var,
    /// Per city, `size x embedding`.
    pub z_city: Vec<Var>,
}

impl ForwardVars {
    /// Runs the network on `batch` with parameters already in `g`.
    pub fn build(g: &mut Graph, p: &AirexParams<Var>, arch: &ArchConfig, batch: &Batch) -> Result<Self> {
        let n = batch.size;
        let e = arch.embedding();
        let (tseq, tstat) = batch.target.to_graph(g);
        let z_tgt = encode(g, &p.target_encoder, &tseq, tstat)?;
        let (sseq, sstat) = batch.stations.to_graph(g);
        let z_stn = encode(g, &p.station_encoder, &sseq, sstat)?;
        let per_station = (0..batch.station_ids.len())
            .map(|i| g.slice_rows(z_stn, i * n, n))
            .collect::<Result<Vec<_>>>()?;

        let mut experts = Vec::new();
        let mut alpha = Vec::new();
        let mut z_city = Vec::new();
        let mut z_cat = Vec::new();
        let mut x_city = Vec::new();
        let zero = g.constant(Tensor::zeros(n, e));
        for ((city, idx), xc) in batch.cities.iter().zip(&batch.x_city) {
            if idx.len() > arch.max_stations {
                return Err(Error::Invalid(format!(
                    "city {city} has {} stations but the model has {} slots",
                    idx.len(),
                    arch.max_stations
                )));
            }
            let zs: Vec<Var> = idx.iter().map(|&i| per_station[i]).collect();
            let (a, z_ck) = station_attention(g, &p.station_attention, z_tgt, &zs)?;
            let expert = p
                .experts
                .get(city)
                .ok_or_else(|| Error::Invalid(format!("no expert for city {city}")))?;
            experts.push(expert_infer(g, expert, z_tgt, z_ck)?);
            alpha.push(a);
            z_city.push(z_ck);

            let mut canonical = idx.clone();
            canonical.sort_by(|&a, &b| batch.station_ids[a].cmp(&batch.station_ids[b]));
            let mut slots: Vec<Var> = canonical.iter().map(|&i| per_station[i]).collect();
            slots.resize(arch.max_stations, zero);
            z_cat.push(g.concat_cols(&slots)?);
            x_city.push(g.constant(xc.clone()));
        }
        let beta = city_attention(g, &p.city_attention, z_tgt, &z_cat, &x_city)?;
        let y = mixture(g, beta, &experts)?;
        Ok(Self { y, experts, alpha, beta, z_tgt, z_stn, z_city })
    }
}

/// Everything one inference produces, in network units.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    pub y: f64,
    /// `(city, ỹ_c)` in layout order.
    pub experts: Vec<(String, f64)>,
    /// `(city, [(station, α)])`.
    pub alpha: Vec<(String, Vec<(String, f64)>)>,
    pub beta: Vec<(String, f64)>,
    pub z_tgt: Vec<f64>,
    pub z_stn: BTreeMap<String, Vec<f64>>,
    pub z_city: Vec<(String, Vec<f64>)>,
}

impl ForwardResult {
    /// Splits batched graph values into one result per sample.
    pub fn collect(g: &Graph, vars: &ForwardVars, batch: &Batch) -> Vec<Self> {
        let row = |v: Var, r: usize| g.value(v).row_slice(r).to_vec();
        (0..batch.size)
            .map(|r| ForwardResult {
                y: g.value(vars.y).get(r, 0),
                experts: batch
                    .cities
                    .iter()
                    .zip(&vars.experts)
                    .map(|((c, _), &v)| (c.clone(), g.value(v).get(r, 0)))
                    .collect(),
                alpha: batch
                    .cities
                    .iter()
                    .zip(&vars.alpha)
                    .map(|((c, idx), &a)| {
                        let w = row(a, r);
                        (c.clone(), idx.iter().zip(w).map(|(&i, w)| (batch.station_ids[i].clone(), w)).collect())
                    })
                    .collect(),
                beta: batch.cities.iter().zip(row(vars.beta, r)).map(|((c, _), b)| (c.clone(), b)).collect(),
                z_tgt: row(vars.z_tgt, r),
                z_stn: batch
                    .station_ids
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (s.clone(), row(vars.z_stn, i * batch.size + r)))
                    .collect(),
                z_city: batch.cities.iter().zip(&vars.z_city).map(|((c, _), &z)| (c.clone(), row(z, r))).collect(),
            })
            .collect()
    }
}

/// Batched inference on normalized bundles that share `layout`.
pub fn forward_batch(
    bundles: &[&FeatureBundle],
    layout: &SourceLayout,
    params: &AirexParams<Tensor>,
    arch: &ArchConfig,
) -> Result<Vec<ForwardResult>> {
    let batch = Batch::from_bundles(bundles, layout)?;
    let mut g = Graph::new();
    let p = params.map_named("", &mut |_, t| g.constant(t.clone()));
    let vars = ForwardVars::build(&mut g, &p, arch, &batch)?;
    Ok(ForwardResult::collect(&g, &vars, &batch))
}

/// Single normalized bundle through the full network.
pub fn airex_forward(
    bundle: &FeatureBundle,
    layout: &SourceLayout,
    params: &AirexParams<Tensor>,
    arch: &ArchConfig,
) -> Result<ForwardResult> {
    Ok(forward_batch(&[bundle], layout, params, arch)?.remove(0))
}
