use std::path::Path;

use super::*;
use crate::network::Tree;

const ARCH: &str = "--lstm-hidden 4 --lstm-layers 1 --basic 4 --fusion 6,5 --attention-hidden 4 --expert-hidden 4 \
                    --window 3 --batch-size 16 --max-batches 3 --per-city 3";
fn tiny(epochs: usize) -> String {
    format!("{ARCH} --epochs {epochs}")
}

fn args(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn gen(dir: &Path) {
    run(args(&format!("gen-data --out {} --n-cities 3 --stations-per-city 4 --hours 30 --window 3 --seed 2", dir.display())))
        .unwrap();
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn gen_data_writes_manifest_and_files() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let m = RunManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(m.command, "gen-data");
    assert_eq!(m.seed, 2);
    assert_eq!(m.outputs.len(), 6);
    let data = load_dataset(&DatasetPaths::in_dir(dir.path())).unwrap();
    assert_eq!(data.cities.len(), 3);
    assert_eq!(data.stations.len(), 12);
    let modified = |p: &Path| std::fs::metadata(p).unwrap().modified().unwrap();
    for o in &m.outputs {
        assert!(modified(&dir.path().join("manifest.json")) <= modified(o));
    }
}

#[test]
fn train_infer_evaluate_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d);
    let tiny = tiny(2);
    let ck = d.join("model.json");
    let trace = d.join("trace.csv");
    let train_args = format!("train --data-dir {} --target-city c00 {tiny} --checkpoint {} --out {}", d.display(), ck.display(), trace.display());
    run(args(&train_args)).unwrap();
    assert!(manifest_path(&trace).exists());
    let rows = read_csv(&trace);
    assert_eq!(rows[0], ["epoch", "l_f", "l_m", "l_a", "r", "total", "val_rmse"]);
    assert_eq!(rows.len(), 3);

    let pred = d.join("pred.csv");
    run(args(&format!(
        "infer --data-dir {} --checkpoint {} --out {} --stations c00s00,c00s01 --target-city c00 --lat 0.5 --lon 1.0",
        d.display(),
        ck.display(),
        pred.display()
    )))
    .unwrap_or_else(|e| {
        // A coordinate far outside the synthetic cities is still valid input.
        panic!("{e}")
    });
    let rows = read_csv(&pred);
    let header = &rows[0];
    let betas: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("beta:")).collect();
    assert_eq!(betas.len(), 2);
    assert!(header.iter().filter(|h| h.starts_with("expert:")).count() == 2);
    assert!(rows.len() > 1);
    for r in &rows[1..] {
        let s: f64 = betas.iter().map(|&i| r[i].parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    assert!(rows[1..].iter().any(|r| r[0] == "0.5,1"));

    let report = d.join("report.csv");
    run(args(&format!(
        "evaluate --data-dir {} --target-city c00 {tiny} --checkpoint {} --out {} --fnn-epochs 2 --single-source",
        d.display(),
        ck.display(),
        report.display()
    )))
    .unwrap();
    let rows = read_csv(&report);
    let methods: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(methods, ["airex", "expert:c01", "expert:c02", "knn", "fnn", "single:c01", "single:c02"]);
    assert!(rows[1..].iter().all(|r| r[1].parse::<f64>().unwrap().is_finite()));

    let stats = d.join("stats.csv");
    run(args(&format!("stats --data-dir {} --out {}", d.display(), stats.display()))).unwrap();
    assert_eq!(read_csv(&stats).len(), 4);

    let features = d.join("features.csv");
    run(args(&format!(
        "features --data-dir {} --target-city c00 --lat 0.5 --lon 1.0 --t 10 --window 3 --out {}",
        d.display(),
        features.display()
    )))
    .unwrap();
    let rows = read_csv(&features);
    assert!(rows.iter().any(|r| r[0] == "station_dynamic" && r[4] == "pm25"));
}

#[test]
fn rerun_reproduces_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d);
    let tiny = tiny(2);
    let ck = d.join("m.json");
    let trace = d.join("t.csv");
    run(args(&format!("train --data-dir {} --target-city c01 {tiny} --seed 5 --checkpoint {} --out {}", d.display(), ck.display(), trace.display())))
        .unwrap();
    let first = (std::fs::read_to_string(&trace).unwrap(), std::fs::read_to_string(&ck).unwrap());
    std::fs::remove_file(&trace).unwrap();
    run(args(&format!("rerun --manifest {}", manifest_path(&trace).display()))).unwrap();
    let second = (std::fs::read_to_string(&trace).unwrap(), std::fs::read_to_string(&ck).unwrap());
    assert_eq!(first, second);
}

#[test]
fn oracle_checkpoint_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let flat = crate::data::SynthConfig {
        n_cities: 3,
        stations_per_city: 3,
        hours: 20,
        window: 3,
        regional_shift: 0.0,
        city_offset_std: 0.0,
        temporal_amplitude: 0.0,
        spatial_std: 0.0,
        noise_std: 0.0,
        seed: 4,
        ..Default::default()
    };
    let data = generate_synthetic(&flat).unwrap();
    save_dataset(&data, &DatasetPaths::in_dir(d)).unwrap();
    let level = data.pollutant[0].pm25;
    assert!(data.pollutant.iter().all(|r| r.pm25 == level));

    let tiny = tiny(0);
    let ck = d.join("m.json");
    let trace = d.join("t.csv");
    run(args(&format!("train --data-dir {} --target-city c00 {tiny} --checkpoint {} --out {}", d.display(), ck.display(), trace.display())))
        .unwrap();
    let mut model = Model::load(&ck).unwrap();
    let scale = model.label_scale;
    model.params = model.params.map_named("", &mut |name, t| {
        let mut z = crate::autodiff::Tensor::zeros(t.rows(), t.cols());
        if name.starts_with("experts.") && name.ends_with(".out.b") {
            z.set(0, 0, level / scale);
        }
        z
    });
    model.save(&ck).unwrap();
    let report = d.join("r.csv");
    run(args(&format!(
        "evaluate --data-dir {} --target-city c00 {tiny} --checkpoint {} --out {} --no-fnn",
        d.display(),
        ck.display(),
        report.display()
    )))
    .unwrap();
    let rows = read_csv(&report);
    assert_eq!(rows[1][0], "airex");
    assert!(rows[1][1].parse::<f64>().unwrap() < 1e-9, "{rows:?}");
    let knn = rows.iter().find(|r| r[0] == "knn").unwrap();
    assert_eq!(knn[1].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn usage_errors() {
    assert!(run(args("train")).is_err());
    assert!(run(args("nonsense")).is_err());
    assert!(run(args("stats --data-dir /nonexistent/x --out /tmp/never.csv")).is_err());
}
