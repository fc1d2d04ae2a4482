mod common;

use chrono::{Duration, NaiveDate};
use spdnet_core::data::{generate_synthetic, Windows};
use spdnet_core::harness::{
    self, benchmark, evaluate, load_model, prepare_data, train, BenchOptions, MetricsAccumulator,
    TrainOptions,
};
use spdnet_core::model::{build_model, Persistence};
use spdnet_core::{
    Checkpoint, Error, Forecaster, ModelConfig, ModelKind, SeriesTable, Tensor, Var,
};

fn tiny(model: ModelKind) -> ModelConfig {
    ModelConfig {
        model,
        seq_len: 32,
        horizon: 4,
        top_k: 2,
        d_model: 8,
        n_heads: 2,
        e_layers: 1,
        d_ff: 16,
        trend_kernel: 9,
        seasonal_kernel: 3,
        max_epochs: 3,
        ..ModelConfig::default()
    }
}

fn synthetic(cfg: &ModelConfig, rows: usize) -> SeriesTable {
    generate_synthetic(&cfg.synthetic, rows, cfg.seed).unwrap()
}

fn series_table(values: Vec<f64>) -> SeriesTable {
    let start = NaiveDate::from_ymd_opt(2023, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let ts = (0..values.len())
        .map(|t| start + Duration::minutes(15 * t as i64))
        .collect();
    SeriesTable::new(ts, vec!["load".into()], values).unwrap()
}

#[test]
fn one_epoch_writes_loadable_checkpoint() {
    let cfg = ModelConfig {
        max_epochs: 1,
        ..tiny(ModelKind::Spdnet)
    };
    let table = synthetic(&cfg, 1500);
    let data = prepare_data(&cfg, &table).unwrap();
    let model = build_model(&cfg, 1).unwrap();
    let run = train(&cfg, model.as_ref(), &data, &TrainOptions::default()).unwrap();
    assert_eq!(run.epochs.len(), 1);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    run.checkpoint.save(&path).unwrap();
    let (loaded_cfg, loaded) = load_model(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(loaded_cfg.n_vars, 1);
    let w = Windows::new(&data.normalized.test, 32, 4).unwrap();
    let x = Var::constant(w.batch(&[0, 5, 9]).inputs);
    assert_eq!(
        model.forward(&x).unwrap().value(),
        loaded.forward(&x).unwrap().value()
    );
}

#[test]
fn fixed_seed_gives_identical_loss_curves() {
    let cfg = tiny(ModelKind::Spdnet);
    let table = synthetic(&cfg, 1500);
    let run = || {
        let data = prepare_data(&cfg, &table).unwrap();
        let model = build_model(&cfg, 1).unwrap();
        train(&cfg, model.as_ref(), &data, &TrainOptions::default()).unwrap()
    };
    let (a, b) = (run(), run());
    let curve = |r: &harness::TrainRun| {
        r.epochs
            .iter()
            .map(|e| {
                (
                    e.train_loss.to_bits(),
                    e.val_mse.to_bits(),
                    e.val_mae.to_bits(),
                )
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(a.initial_loss.to_bits(), b.initial_loss.to_bits());
    assert_eq!(curve(&a), curve(&b));
    assert_eq!(
        a.checkpoint.to_bytes().unwrap(),
        b.checkpoint.to_bytes().unwrap()
    );
}

#[test]
fn thirty_epochs_halve_the_training_loss() {
    let cfg = ModelConfig {
        max_epochs: 30,
        patience: 30,
        ..tiny(ModelKind::Spdnet)
    };
    let table = synthetic(&cfg, 2000);
    let data = prepare_data(&cfg, &table).unwrap();
    let model = build_model(&cfg, 1).unwrap();
    let run = train(&cfg, model.as_ref(), &data, &TrainOptions::default()).unwrap();
    assert_eq!(run.epochs.len(), 30);
    let last = run.final_train_loss().unwrap();
    assert!(
        last < 0.5 * run.initial_loss,
        "initial {} final {}",
        run.initial_loss,
        last
    );
}

#[test]
fn persistence_matches_closed_form_on_a_sinusoid() {
    let (amp, period) = (2.0f64, 96usize);
    let horizon = period / 4;
    let values: Vec<f64> = (0..period * 40)
        .map(|t| amp * (2.0 * std::f64::consts::PI * t as f64 / period as f64).sin())
        .collect();
    let table = series_table(values);
    let w = Windows::new(&table, 96, horizon).unwrap();
    let model = Persistence::new(96, horizon);
    let mut last_step = MetricsAccumulator::default();
    let mut all_steps = MetricsAccumulator::default();
    for batch in w.batches(64, None) {
        let pred = model.forward(&Var::constant(batch.inputs)).unwrap();
        all_steps.add(pred.value(), &batch.targets, None).unwrap();
        let p = pred.value().slice(1, horizon - 1, 1).unwrap();
        let t = batch.targets.slice(1, horizon - 1, 1).unwrap();
        last_step.add(&p, &t, None).unwrap();
    }
    let closed = 2.0 * (1.0 - (std::f64::consts::PI / 2.0).cos()) * amp * amp / 2.0;
    let got = last_step.finish().mse;
    assert!((got - closed).abs() / closed < 0.02, "{got} vs {closed}");

    // Averaged over lags 1..=P the same identity gives A^2 (1 - cos(2 pi h / T)).
    let w0 = 2.0 * std::f64::consts::PI / period as f64;
    let avg = (1..=horizon)
        .map(|h| amp * amp * (1.0 - (w0 * h as f64).cos()))
        .sum::<f64>()
        / horizon as f64;
    let got = all_steps.finish().mse;
    assert!((got - avg).abs() / avg < 0.02, "{got} vs {avg}");

    let flat = series_table(vec![3.5; 500]);
    let fw = Windows::new(&flat, 96, 24).unwrap();
    let m = evaluate(&model, &fw, 32, None).unwrap();
    assert_eq!((m.mse, m.mae), (0.0, 0.0));
}

#[test]
fn linear_baseline_fits_exactly_predictable_data() {
    // Sums of sinusoids obey a linear recurrence, so an S -> P linear map
    // can forecast them without error.
    let values: Vec<f64> = (0..3000)
        .map(|t| {
            let t = t as f64;
            (2.0 * std::f64::consts::PI * t / 48.0).sin()
                + 0.5 * (2.0 * std::f64::consts::PI * t / 20.0).cos()
        })
        .collect();
    let table = series_table(values);
    let cfg = ModelConfig {
        learning_rate: 1e-2,
        max_epochs: 60,
        patience: 60,
        ..tiny(ModelKind::Linear)
    };
    let data = prepare_data(&cfg, &table).unwrap();
    let model = build_model(&cfg, 1).unwrap();
    train(&cfg, model.as_ref(), &data, &TrainOptions::default()).unwrap();
    let w = Windows::new(&data.normalized.test, 32, 4).unwrap();
    let m = evaluate(model.as_ref(), &w, 64, Some(0)).unwrap();
    assert!(m.mse < 1e-3, "test mse {}", m.mse);
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let cfg = ModelConfig {
        max_epochs: 40,
        patience: 2,
        learning_rate: 3e-2,
        ..tiny(ModelKind::Linear)
    };
    let table = synthetic(&cfg, 1500);
    let data = prepare_data(&cfg, &table).unwrap();
    let model = build_model(&cfg, 1).unwrap();
    let run = train(&cfg, model.as_ref(), &data, &TrainOptions::default()).unwrap();
    let best = run.best_epoch.unwrap();
    let best_val = run.epochs[best - 1].val_mse;
    assert!(run.epochs.iter().all(|e| e.val_mse >= best_val));
    assert!(run.epochs.iter().enumerate().all(|(i, e)| e.epoch == i + 1));
    assert!(run.epochs.len() - best <= cfg.patience);
    let w = Windows::new(&data.normalized.val, 32, 4).unwrap();
    let restored = evaluate(model.as_ref(), &w, cfg.batch_size, Some(0)).unwrap();
    assert_eq!(restored.mse, best_val);
}

#[test]
fn metrics_files_and_identities() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    for kind in [ModelKind::Persistence, ModelKind::Linear, ModelKind::Spdnet] {
        let cfg = ModelConfig {
            max_epochs: 1,
            ..tiny(kind)
        };
        let table = synthetic(&cfg, 1500);
        rows.extend(harness::train_and_evaluate(&cfg, &table, &[1, 4], dir.path()).unwrap());
        if kind != ModelKind::Persistence {
            for h in [1, 4] {
                let stem = harness::checkpoint_file_name(kind, 32, h);
                assert!(dir.path().join(&stem).exists());
                assert!(dir.path().join(format!("{stem}.log")).exists());
            }
        }
    }
    assert_eq!(rows.len(), 12);
    for r in &rows {
        let m = r.metrics;
        assert!(m.mse >= 0.0 && m.mae >= 0.0 && m.count > 0);
        assert!(m.mae * m.mae <= m.mse * (1.0 + 1e-12), "{r:?}");
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("model,seq_len,horizon,split,mse,mae,points\n"));
}

#[test]
fn accumulator_is_batching_independent() {
    let mut r = common::rng(4);
    let pred = common::random_tensor(&mut r, &[10, 3, 2], 1.0);
    let actual = common::random_tensor(&mut r, &[10, 3, 2], 1.0);
    let mut whole = MetricsAccumulator::default();
    whole.add(&pred, &actual, None).unwrap();
    let mut parts = MetricsAccumulator::default();
    for (s, l) in [(0, 3), (3, 3), (6, 4)] {
        parts
            .add(
                &pred.slice(0, s, l).unwrap(),
                &actual.slice(0, s, l).unwrap(),
                None,
            )
            .unwrap();
    }
    let (a, b) = (whole.finish(), parts.finish());
    assert_eq!(a.count, b.count);
    assert!((a.mse - b.mse).abs() < 1e-14 && (a.mae - b.mae).abs() < 1e-14);
    let mut zero = MetricsAccumulator::default();
    zero.add(&Tensor::zeros(&[4, 2, 1]), &Tensor::zeros(&[4, 2, 1]), None)
        .unwrap();
    assert_eq!(zero.finish().mse, 0.0);
}

#[test]
fn benchmark_rows_and_counters() {
    let cfg = ModelConfig {
        bench_epochs: 2,
        ..tiny(ModelKind::Spdnet)
    };
    let table = synthetic(&cfg, 1500);
    let horizons = [1, 4, 8];
    let rows = benchmark(
        &cfg,
        &table,
        &horizons,
        BenchOptions {
            max_batches: Some(3),
        },
    )
    .unwrap();
    assert_eq!(rows.len(), horizons.len());
    for (r, &h) in rows.iter().zip(&horizons) {
        assert_eq!(r.horizon, h);
        assert_eq!(r.epochs, 2);
        assert_eq!(r.steps_per_epoch, 3);
        assert_eq!(r.timed_steps, r.epochs * r.steps_per_epoch);
        assert!(r.mean_epoch_seconds > 0.0);
    }
    let mut out = Vec::new();
    harness::write_bench_csv(&mut out, cfg.model, cfg.seq_len, &rows).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), horizons.len() + 1);
    assert!(benchmark(&cfg, &table, &[], BenchOptions::default()).is_err());
}

#[test]
fn divergence_aborts_with_a_dump() {
    let cfg = ModelConfig {
        learning_rate: 1e300,
        max_epochs: 5,
        ..tiny(ModelKind::Linear)
    };
    let table = synthetic(&cfg, 1500);
    let data = prepare_data(&cfg, &table).unwrap();
    let model = build_model(&cfg, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        dump_dir: Some(dir.path().to_path_buf()),
    };
    match train(&cfg, model.as_ref(), &data, &opts) {
        Err(Error::Diverged { .. }) => {}
        other => panic!(
            "expected divergence, got {:?}",
            other.map(|r| r.epochs.len())
        ),
    }
    let dump = std::fs::read_to_string(dir.path().join("divergence.txt")).unwrap();
    assert!(dump.contains("diverged"));
}
