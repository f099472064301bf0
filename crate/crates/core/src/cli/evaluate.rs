use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::baselines::{fnn_train, knn_rmse, train_single_source, FnnConfig, KnnConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geo::{FeatureBuilder, FeatureSchema, TargetSpec};
use crate::network::Model;
use crate::training::{rmse, test_queries, Experiment, Sample, Split, TrainConfig};

/// One line of the comparison report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `airex`, `knn`, `fnn`, `expert:<city>` or `single:<city>`.
    pub method: String,
    pub rmse: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompareOptions {
    pub knn: Option<KnnConfig>,
    pub fnn: Option<FnnConfig>,
    /// Train one degenerate single-source model per source city.
    pub single_source: bool,
}

/// RMSE of a trained model on the split's test stations, plus the listed
/// baselines on the same samples.
pub fn evaluate_methods(
    dataset: &Dataset,
    split: &Split,
    model: &Model,
    cfg: &TrainConfig,
    opts: &CompareOptions,
) -> Result<Vec<ReportRow>> {
    let full = FeatureBuilder::new(dataset, FeatureSchema::default(), model.window)?;
    let samples = test_queries(model, &full, dataset, &split.test)?;
    if samples.is_empty() {
        return Err(Error::Invalid("no test samples: test stations lack covered windows".into()));
    }
    let truth: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let n = samples.len();
    let mut rows = Vec::new();

    let queries: Vec<(TargetSpec, i64)> = samples.iter().map(|s| (s.target.clone(), s.t)).collect();
    let preds = model.predict(&full, &queries)?;
    let y: Vec<f64> = preds.iter().map(|p| p.y).collect();
    rows.push(ReportRow { method: "airex".into(), rmse: rmse(&y, &truth)?, samples: n });
    for (ci, (city, _)) in preds[0].experts.iter().enumerate() {
        let e: Vec<f64> = preds.iter().map(|p| p.experts[ci].1).collect();
        rows.push(ReportRow { method: format!("expert:{city}"), rmse: rmse(&e, &truth)?, samples: n });
    }
    if let Some(k) = &opts.knn {
        let stations: Vec<String> = split.train_stations().into_iter().collect();
        rows.push(ReportRow { method: "knn".into(), rmse: knn_rmse(&full, &stations, &samples, k)?, samples: n });
    }
    if let Some(f) = &opts.fnn {
        let exp = Experiment::new(dataset, split, cfg)?;
        let fnn = fnn_train(&exp, f)?;
        rows.push(ReportRow { method: "fnn".into(), rmse: fnn.rmse(&full, &samples)?, samples: n });
    }
    if opts.single_source {
        for city in split.source_cities() {
            rows.push(ReportRow { method: format!("single:{city}"), rmse: single_rmse(dataset, split, &city, cfg, &full, &samples)?, samples: n });
        }
    }
    Ok(rows)
}

fn single_rmse(
    dataset: &Dataset,
    split: &Split,
    city: &str,
    cfg: &TrainConfig,
    full: &FeatureBuilder,
    samples: &[Sample],
) -> Result<f64> {
    let out = train_single_source(dataset, split, city, cfg)?;
    crate::training::evaluate_rmse(&out.model, full, samples)
}

pub fn write_report_csv(rows: &[ReportRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
