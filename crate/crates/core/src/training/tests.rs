use super::run::{train_with, Objective};
use super::*;
use crate::data::{generate_synthetic, SynthConfig};
use crate::losses::values;

fn synth(n_cities: usize, stations: usize, hours: usize, seed: u64) -> Dataset {
    generate_synthetic(&SynthConfig {
        n_cities,
        stations_per_city: stations,
        hours,
        window: 1,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn tiny(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        learning_rate: 0.01,
        window: 3,
        lstm_hidden: 4,
        lstm_layers: 1,
        basic: vec![4],
        fusion: vec![6, 5],
        attention_hidden: 4,
        expert_hidden: 4,
        per_city: 3,
        max_batches_per_epoch: Some(4),
        ..Default::default()
    }
}

fn cities(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i:02}")).collect()
}

#[test]
fn meta_pairs_two_cities() {
    let p = make_meta_pairs(&cities(2)).unwrap();
    assert_eq!(
        p,
        vec![
            MetaPair { meta_target: "c00".into(), meta_sources: vec!["c01".into()] },
            MetaPair { meta_target: "c01".into(), meta_sources: vec!["c00".into()] },
        ]
    );
}

#[test]
fn meta_pairs_nineteen_cities() {
    let c = cities(19);
    let p = make_meta_pairs(&c).unwrap();
    assert_eq!(p.len(), 19);
    for (i, pair) in p.iter().enumerate() {
        assert_eq!(pair.meta_target, c[i]);
        assert_eq!(pair.meta_sources.len(), 18);
        assert!(!pair.meta_sources.contains(&pair.meta_target));
    }
    assert!(make_meta_pairs(&cities(1)).is_err());
    assert!(make_meta_pairs(&["a".into(), "a".into()]).is_err());
}

#[test]
fn split_takes_all_of_small_cities() {
    let d = synth(3, 5, 2, 1);
    let s = split_train_test(&d, "c00", &cities(3)[1..], 5, 0).unwrap();
    assert_eq!(s.test.len(), 5);
    assert!(s.train.values().all(|v| v.len() == 5));
    let train = s.train_stations();
    assert!(s.test.iter().all(|t| !train.contains(t)));
    assert!(split_train_test(&d, "zz", &cities(3)[1..], 5, 0).is_err());
    assert!(split_train_test(&d, "c00", &cities(3), 5, 0).is_err());
}

#[test]
fn split_ratio_is_sources_to_one() {
    let d = synth(20, 7, 2, 2);
    let c = cities(20);
    let s = split_train_test(&d, "c19", &c[..19], 5, 3).unwrap();
    assert_eq!(s.train_stations().len(), 19 * s.test.len());
    assert_eq!(s.test.len(), 5);
    assert_eq!(s, split_train_test(&d, "c19", &c[..19], 5, 3).unwrap());
    assert_ne!(s, split_train_test(&d, "c19", &c[..19], 5, 4).unwrap());
}

#[test]
fn window_consumes_leading_steps() {
    let d = synth(2, 1, 71, 4);
    let c = cities(2);
    let split = Split {
        target_city: "zz".into(),
        train: c.iter().map(|c| (c.clone(), vec![format!("{c}s00")])).collect(),
        test: vec![],
    };
    let builder = FeatureBuilder::new(&d, FeatureSchema::default(), 24).unwrap();
    let pair = &make_meta_pairs(&c).unwrap()[0];
    let samples = make_training_samples(pair, &builder, &d, &split, 1).unwrap();
    assert_eq!(samples.len(), 48);
    for s in &samples {
        let rec = d.pollutant.iter().find(|r| r.station_id == "c00s00" && r.t == s.t).unwrap();
        assert_eq!(s.label, rec.pm25);
        assert_eq!(s.target.station_id.as_deref(), Some("c00s00"));
    }
    assert_eq!(samples[0].t, 23);
}

#[test]
fn provenance_excludes_label_station_inputs() {
    let d = synth(3, 3, 20, 5);
    let split = split_train_test(&d, "c00", &cities(3)[1..], 3, 1).unwrap();
    let cfg = tiny(1);
    let exp = Experiment::new(&d, &split, &cfg).unwrap();
    for g in &exp.groups {
        for s in &g.samples {
            let p = g.provenance(s, cfg.window);
            let own = s.target.station_id.as_deref().unwrap();
            let label = format!("pm25:{own}:{}", s.t);
            assert_eq!(p.last(), Some(&label));
            let prefix = format!("pm25:{own}:");
            assert_eq!(p.iter().filter(|x| x.starts_with(&prefix)).count(), 1);
        }
    }
    let prov = exp.provenance(cfg.window);
    for t in &split.test {
        assert!(!prov.iter().any(|p| p.starts_with(&format!("pm25:{t}:"))));
    }
    assert!(exp.train_data.pollutant.iter().all(|r| !split.test.contains(&r.station_id)));
}

#[test]
fn round_robin_visits_groups_evenly() {
    let d = synth(4, 3, 30, 6);
    let split = split_train_test(&d, "c00", &cities(4)[1..], 3, 0).unwrap();
    let cfg = TrainConfig { sample_stride: 1, ..tiny(1) };
    let exp = Experiment::new(&d, &split, &cfg).unwrap();
    assert_eq!(exp.groups.len(), 3);
    let mut planner = run_planner(&exp, 7);
    for _ in 0..3 {
        let plan = planner(16);
        let mut counts = vec![0usize; exp.groups.len()];
        for (g, idx) in &plan {
            counts[*g] += 1;
            assert!(idx.len() <= 16 && !idx.is_empty());
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
        assert_eq!(plan.len(), exp.sample_count().div_ceil(16));
    }
}

fn run_planner(exp: &Experiment, seed: u64) -> impl FnMut(usize) -> Vec<(usize, Vec<usize>)> + '_ {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut p = run::Planner::new(&exp.groups);
    move |b| p.epoch(&mut rng, b, None)
}

fn two_city_toy() -> (Dataset, Split) {
    let d = generate_synthetic(&SynthConfig {
        n_cities: 2,
        stations_per_city: 3,
        hours: 40,
        window: 3,
        noise_std: 1.0,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    let split = Split {
        target_city: "none".into(),
        train: cities(2).into_iter().map(|c| (c.clone(), (0..3).map(|i| format!("{c}s{i:02}")).collect())).collect(),
        test: vec![],
    };
    (d, split)
}

#[test]
fn training_reduces_loss() {
    let (d, split) = two_city_toy();
    let out = train(&d, &split, &tiny(50)).unwrap();
    assert_eq!(out.trace.len(), 50);
    let first = out.trace[0].total;
    let last = out.trace.last().unwrap().total;
    assert!(last < first, "{first} -> {last}");
    assert!(out.trace.iter().all(|s| s.val_rmse.is_finite()));
}

#[test]
fn training_is_deterministic() {
    let (d, split) = two_city_toy();
    let a = train(&d, &split, &tiny(3)).unwrap();
    let b = train(&d, &split, &tiny(3)).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.model, b.model);
    let c = train(&d, &split, &TrainConfig { seed: 1, ..tiny(3) }).unwrap();
    assert_ne!(a.trace, c.trace);
}

#[test]
fn mse_only_weights_match_plain_mse_training() {
    let (d, split) = two_city_toy();
    let w = LossWeights { lambda: 1.0, gamma: 0.0, zeta: 0.0, sigma: None };
    let cfg = TrainConfig { weights: w, ..tiny(5) };
    let exp = Experiment::new(&d, &split, &cfg).unwrap();
    let full = train_with(&exp, &cfg, Objective::Full).unwrap();
    let plain = train_with(&exp, &cfg, Objective::MseOnly).unwrap();
    for (a, b) in full.trace.iter().zip(&plain.trace) {
        assert!((a.total - b.total).abs() < 1e-12);
        assert!((a.l_f - b.l_f).abs() < 1e-12);
        assert!((a.val_rmse - b.val_rmse).abs() < 1e-9);
    }
}

#[test]
fn mse_training_beats_label_spread() {
    let d = generate_synthetic(&SynthConfig {
        n_cities: 2,
        stations_per_city: 3,
        hours: 80,
        window: 3,
        noise_std: 0.5,
        spatial_std: 1.0,
        temporal_amplitude: 20.0,
        seed: 13,
        ..Default::default()
    })
    .unwrap();
    let split = Split {
        target_city: "none".into(),
        train: cities(2).into_iter().map(|c| (c.clone(), (0..3).map(|i| format!("{c}s{i:02}")).collect())).collect(),
        test: vec![],
    };
    let cfg = TrainConfig {
        weights: LossWeights { lambda: 1.0, gamma: 0.0, zeta: 0.0, sigma: None },
        max_batches_per_epoch: None,
        val_fraction: 0.0,
        ..tiny(60)
    };
    let out = train(&d, &split, &cfg).unwrap();
    let exp = Experiment::new(&d, &split, &cfg).unwrap();
    let samples: Vec<Sample> = exp.groups.iter().flat_map(|g| g.samples.clone()).collect();
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let std = (labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / labels.len() as f64).sqrt();
    let err = evaluate_rmse(&out.model, &exp.builder, &samples).unwrap();
    assert!(err < std, "rmse {err} vs label std {std}");
}

#[test]
fn non_finite_loss_reports_position() {
    let (d, split) = two_city_toy();
    let cfg = tiny(2);
    let mut exp = Experiment::new(&d, &split, &cfg).unwrap();
    for g in &mut exp.groups {
        for s in &mut g.samples {
            s.label = f64::NAN;
        }
    }
    match train_experiment(&exp, &cfg) {
        Err(Error::Diverged { epoch: 0, batch: 0 }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn rmse_arithmetic() {
    assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert!((rmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - (12.5f64).sqrt()).abs() < 1e-15);
    assert!((rmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 3.5355).abs() < 1e-4);
    let (p, t) = ([1.5, -2.0, 0.25], [0.5, 1.0, 0.0]);
    let r = rmse(&p, &t).unwrap();
    assert!((r * r - values::loss_final(&p, &t).unwrap()).abs() < 1e-12);
    assert!(rmse(&[], &[]).is_err());
}

#[test]
fn evaluation_on_training_model() {
    let (d, split) = two_city_toy();
    let out = train(&d, &split, &tiny(1)).unwrap();
    let exp = Experiment::new(&d, &split, &tiny(1)).unwrap();
    assert!(evaluate_rmse(&out.model, &exp.builder, &[]).is_err());
    let samples = &exp.groups[0].samples[..5];
    let r = evaluate_rmse(&out.model, &exp.builder, samples).unwrap();
    assert!(r.is_finite() && r >= 0.0);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { val_fraction: 1.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { clip_norm: Some(0.0), ..Default::default() }.validate().is_err());
    assert!(TrainConfig { learning_rate: f64::NAN, ..Default::default() }.validate().is_err());
}

#[test]
fn grid_expansion() {
    let g = Grid::standard();
    let all = g.expand(&TrainConfig::default());
    assert_eq!(all.len(), 30);
    assert_eq!(Grid { limit: Some(4), ..g }.expand(&TrainConfig::default()).len(), 4);
}

#[test]
fn grid_search_cases() {
    let (d, split) = two_city_toy();
    let one = grid_search(&d, &split, &[tiny(2)]).unwrap();
    assert_eq!(one.best, tiny(2));
    assert_eq!(one.scores.len(), 1);

    let configs = [tiny(0), TrainConfig { learning_rate: 0.02, ..tiny(40) }];
    let r = grid_search(&d, &split, &configs).unwrap();
    assert_eq!(r.scores.len(), 2);
    assert_eq!(r.best, configs[1], "{:?}", r.scores.iter().map(|s| s.1).collect::<Vec<_>>());
    assert!(grid_search(&d, &split, &[]).is_err());
}

#[test]
fn single_source_mode_fixes_beta() {
    let (d, _) = two_city_toy();
    let split = Split {
        target_city: "c00".into(),
        train: [("c01".to_string(), vec!["c01s00".into(), "c01s01".into(), "c01s02".into()])].into(),
        test: vec!["c00s00".into()],
    };
    let cfg = TrainConfig { mode: TrainMode::SingleSource, ..tiny(2) };
    let exp = Experiment::new(&d, &split, &cfg).unwrap();
    assert_eq!(exp.groups.len(), 3);
    assert!(exp.groups.iter().all(|g| g.layout.station_ids().count() == 2));
    let out = train_experiment(&exp, &cfg).unwrap();
    assert!(out.trace.iter().all(|s| s.l_a == 0.0));
    let full = FeatureBuilder::new(&d, FeatureSchema::default(), cfg.window).unwrap();
    let q = test_queries(&out.model, &full, &d, &split.test).unwrap();
    assert!(!q.is_empty());
    let queries: Vec<_> = q.iter().map(|s| (s.target.clone(), s.t)).collect();
    for p in out.model.predict(&full, &queries).unwrap() {
        assert_eq!(p.beta, vec![("c01".to_string(), 1.0)]);
    }
    assert!(make_groups(&exp.builder, &d, &split, &TrainConfig { mode: TrainMode::SingleSource, ..tiny(1) }).is_ok());
    let two = two_city_toy().1;
    assert!(Experiment::new(&d, &two, &cfg).is_err());
}

#[test]
fn trace_csv_layout() {
    let s = EpochStats { epoch: 0, l_f: 1.0, l_m: 2.0, l_a: 0.5, r: -0.69, total: 3.0, val_rmse: 4.0 };
    let mut buf = Vec::new();
    write_trace_csv(&[s], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text, "epoch,l_f,l_m,l_a,r,total,val_rmse\n0,1.0,2.0,0.5,-0.69,3.0,4.0\n");
}
