//! Training loop, evaluation metrics, per-epoch timing and the end-to-end
//! train/evaluate pipeline used by the CLI.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::{backward, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, ModelKind};
use crate::data::{fit_transform, split, Scaler, SeriesTable, Splits, Windows};
use crate::error::{Error, Result};
use crate::model::{build_model, Forecaster};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// MSE and MAE over a set of forecasts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
}

/// Sums squared and absolute errors; the result does not depend on how
/// the points were grouped into batches beyond floating-point rounding.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricsAccumulator {
    sum_sq: f64,
    sum_abs: f64,
    count: usize,
}

impl MetricsAccumulator {
    /// Adds `pred` vs `actual` (both `[B, P, N]`), restricted to `column`
    /// when given.
    pub fn add(&mut self, pred: &Tensor, actual: &Tensor, column: Option<usize>) -> Result<()> {
        if pred.shape() != actual.shape() {
            return Err(Error::Shape {
                expected: actual.shape().to_vec(),
                found: pred.shape().to_vec(),
            });
        }
        let n = *pred.shape().last().expect("rank >= 1");
        for (i, (&p, &a)) in pred.data().iter().zip(actual.data()).enumerate() {
            if column.is_some_and(|c| i % n != c) {
                continue;
            }
            let e = p - a;
            self.sum_sq += e * e;
            self.sum_abs += e.abs();
            self.count += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> Metrics {
        let c = self.count.max(1) as f64;
        Metrics {
            mse: self.sum_sq / c,
            mae: self.sum_abs / c,
            count: self.count,
        }
    }
}

/// A dataset split, standardised with training statistics.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub raw: Splits,
    pub normalized: Splits,
    pub scaler: Scaler,
    pub target: usize,
}

pub fn prepare_data(cfg: &ModelConfig, table: &SeriesTable) -> Result<PreparedData> {
    let target = table.column_index(&cfg.target)?;
    let raw = split(
        table,
        [cfg.train_fraction, cfg.val_fraction, cfg.test_fraction],
        cfg.seq_len + cfg.horizon,
    )?;
    let (scaler, normalized) = fit_transform(&raw)?;
    Ok(PreparedData {
        raw,
        normalized,
        scaler,
        target,
    })
}

/// Forecast-vs-target loss on the target column.
fn target_loss(pred: &Var, targets: &Tensor, column: usize) -> Result<Var> {
    let pred = pred.slice(2, column, 1)?;
    let actual = Var::constant(targets.slice(2, column, 1)?);
    Ok(pred.mse(&actual)?)
}

pub fn evaluate(
    model: &dyn Forecaster,
    windows: &Windows<'_>,
    batch_size: usize,
    column: Option<usize>,
) -> Result<Metrics> {
    let mut acc = MetricsAccumulator::default();
    for batch in windows.batches(batch_size, None) {
        let pred = model.forward(&Var::constant(batch.inputs))?;
        acc.add(pred.value(), &batch.targets, column)?;
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub config: ModelConfig,
    /// Training-split MSE of the untrained model.
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Parameters of the best epoch, already restored into the model.
    pub checkpoint: Checkpoint,
}

impl TrainRun {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    pub fn write_log<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# config")?;
        write!(out, "{}", self.config.to_text())?;
        writeln!(out, "# initial_train_mse {}", self.initial_loss)?;
        writeln!(out, "epoch,train_loss,val_mse,val_mae,wall_seconds")?;
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{:.3}",
                e.epoch, e.train_loss, e.val_mse, e.val_mae, e.seconds
            )?;
        }
        if let Some(b) = self.best_epoch {
            writeln!(out, "# best_epoch {b}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where to write a diagnostic dump if training diverges.
    pub dump_dir: Option<PathBuf>,
}

/// Config snapshot stored in checkpoints, with the variate count pinned.
pub fn config_snapshot(cfg: &ModelConfig, n_vars: usize) -> ModelConfig {
    ModelConfig {
        n_vars,
        ..cfg.clone()
    }
}

/// Trains `model` with Adam on MSE, early-stopping on validation MSE.
/// The best epoch's parameters are restored before returning.
pub fn train(
    cfg: &ModelConfig,
    model: &dyn Forecaster,
    data: &PreparedData,
    opts: &TrainOptions,
) -> Result<TrainRun> {
    let train_w = Windows::new(&data.normalized.train, cfg.seq_len, cfg.horizon)?;
    let val_w = Windows::new(&data.normalized.val, cfg.seq_len, cfg.horizon)?;
    let params = model.parameters();
    let snapshot = config_snapshot(cfg, data.normalized.train.n_cols()).to_text();
    let col = Some(data.target);
    let initial_loss = evaluate(model, &train_w, cfg.batch_size, col)?.mse;
    let mut run = TrainRun {
        config: cfg.clone(),
        initial_loss,
        epochs: Vec::new(),
        best_epoch: None,
        checkpoint: Checkpoint::from_parameters(snapshot.clone(), &params),
    };
    if params.is_empty() {
        return Ok(run);
    }
    let mut opt = Adam::new(
        params.clone(),
        AdamConfig {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        },
    );
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let seed = cfg.seed.wrapping_add(epoch as u64);
        for (bi, batch) in train_w.batches(cfg.batch_size, Some(seed)).enumerate() {
            opt.zero_grad();
            let step = || -> Result<f64> {
                let pred = model.forward(&Var::constant(batch.inputs.clone()))?;
                let loss = target_loss(&pred, &batch.targets, data.target)?;
                backward(&loss)?;
                Ok(loss.value().item())
            };
            let loss = match step() {
                Ok(l) => l,
                Err(e) => {
                    if let Some(dir) = &opts.dump_dir {
                        write_divergence_dump(dir, cfg, epoch, bi, &e, &run)?;
                    }
                    return Err(Error::Diverged {
                        epoch,
                        batch: bi,
                        source: Box::new(e),
                    });
                }
            };
            opt.step();
            loss_sum += loss;
            batches += 1;
        }
        let val = evaluate(model, &val_w, cfg.batch_size, col)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_mse: val.mse,
            val_mae: val.mae,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} S={} P={} epoch {epoch}: train {:.5} val mse {:.5} mae {:.5} ({:.1}s)",
            model.kind().as_str(),
            cfg.seq_len,
            cfg.horizon,
            record.train_loss,
            record.val_mse,
            record.val_mae,
            record.seconds
        );
        run.epochs.push(record);
        if val.mse < best {
            best = val.mse;
            since_best = 0;
            run.best_epoch = Some(epoch);
            run.checkpoint = Checkpoint::from_parameters(snapshot.clone(), &params);
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    run.checkpoint.restore(&params)?;
    Ok(run)
}

fn write_divergence_dump(
    dir: &Path,
    cfg: &ModelConfig,
    epoch: usize,
    batch: usize,
    err: &Error,
    run: &TrainRun,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = BufWriter::new(File::create(dir.join("divergence.txt"))?);
    writeln!(
        f,
        "training diverged at epoch {epoch}, batch {batch}: {err}"
    )?;
    run.write_log(&mut f)?;
    writeln!(f, "# config")?;
    write!(f, "{}", cfg.to_text())?;
    Ok(())
}

/// One row of a metrics report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub model: ModelKind,
    pub seq_len: usize,
    pub horizon: usize,
    pub split: String,
    pub metrics: Metrics,
}

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(out, "model,seq_len,horizon,split,mse,mae,points")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.model.as_str(),
            r.seq_len,
            r.horizon,
            r.split,
            r.metrics.mse,
            r.metrics.mae,
            r.metrics.count
        )?;
    }
    Ok(())
}

pub fn checkpoint_file_name(kind: ModelKind, seq_len: usize, horizon: usize) -> String {
    format!("{}_S{seq_len}_P{horizon}.ckpt", kind.as_str())
}

/// Trains one model per horizon, writes checkpoints, run logs and a
/// `metrics.csv` of validation and test scores into `out_dir`.
pub fn train_and_evaluate(
    cfg: &ModelConfig,
    table: &SeriesTable,
    horizons: &[usize],
    out_dir: &Path,
) -> Result<Vec<MetricsRow>> {
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for &h in horizons {
        let cfg = ModelConfig {
            horizon: h,
            ..cfg.clone()
        };
        cfg.validate()?;
        let data = prepare_data(&cfg, table)?;
        let model = build_model(&cfg, table.n_cols())?;
        let run = train(
            &cfg,
            model.as_ref(),
            &data,
            &TrainOptions {
                dump_dir: Some(out_dir.to_path_buf()),
            },
        )?;
        let stem = checkpoint_file_name(cfg.model, cfg.seq_len, h);
        run.checkpoint.save(&out_dir.join(&stem))?;
        run.write_log(BufWriter::new(File::create(
            out_dir.join(format!("{stem}.log")),
        )?))?;
        for (name, part) in [
            ("val", &data.normalized.val),
            ("test", &data.normalized.test),
        ] {
            let w = Windows::new(part, cfg.seq_len, h)?;
            rows.push(MetricsRow {
                model: cfg.model,
                seq_len: cfg.seq_len,
                horizon: h,
                split: name.into(),
                metrics: evaluate(model.as_ref(), &w, cfg.batch_size, Some(data.target))?,
            });
        }
    }
    write_metrics_csv(
        BufWriter::new(File::create(out_dir.join("metrics.csv"))?),
        &rows,
    )?;
    Ok(rows)
}

/// Rebuilds a model from a checkpoint written by [`train`].
pub fn load_model(ckpt: &Checkpoint) -> Result<(ModelConfig, Box<dyn Forecaster>)> {
    let cfg = ModelConfig::parse(&ckpt.metadata)?;
    if cfg.n_vars == 0 {
        return Err(Error::Config("checkpoint config lacks n_vars".into()));
    }
    let model = build_model(&cfg, cfg.n_vars)?;
    ckpt.restore(&model.parameters())?;
    Ok((cfg, model))
}

/// Mean training time per epoch at one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub horizon: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Forward + backward + optimiser step only.
    pub mean_epoch_seconds: f64,
    /// Number of optimisation steps inside the timed region.
    pub timed_steps: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BenchOptions {
    /// Cap on batches per epoch; `None` uses the whole training split.
    pub max_batches: Option<usize>,
}

/// Times `cfg.bench_epochs` training epochs per horizon after one
/// untimed warm-up epoch. Batches are assembled before the clock starts.
pub fn benchmark(
    cfg: &ModelConfig,
    table: &SeriesTable,
    horizons: &[usize],
    opts: BenchOptions,
) -> Result<Vec<BenchRow>> {
    if horizons.is_empty() {
        return Err(Error::Config("benchmark needs at least one horizon".into()));
    }
    let mut rows = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let cfg = ModelConfig {
            horizon: h,
            ..cfg.clone()
        };
        cfg.validate()?;
        let data = prepare_data(&cfg, table)?;
        let model = build_model(&cfg, table.n_cols())?;
        let windows = Windows::new(&data.normalized.train, cfg.seq_len, h)?;
        let mut batches: Vec<_> = windows.batches(cfg.batch_size, Some(cfg.seed)).collect();
        if let Some(m) = opts.max_batches {
            batches.truncate(m.max(1));
        }
        let params = model.parameters();
        let mut opt = Adam::new(
            params,
            AdamConfig {
                lr: cfg.learning_rate,
                ..AdamConfig::default()
            },
        );
        let mut timed = 0.0;
        let mut timed_steps = 0;
        for epoch in 0..=cfg.bench_epochs {
            for batch in &batches {
                let x = Var::constant(batch.inputs.clone());
                let started = Instant::now();
                opt.zero_grad();
                let pred = model.forward(&x)?;
                if pred.requires_grad() {
                    let loss = target_loss(&pred, &batch.targets, data.target)?;
                    backward(&loss)?;
                    opt.step();
                }
                if epoch > 0 {
                    timed += started.elapsed().as_secs_f64();
                    timed_steps += 1;
                }
            }
        }
        rows.push(BenchRow {
            horizon: h,
            epochs: cfg.bench_epochs,
            steps_per_epoch: batches.len(),
            mean_epoch_seconds: timed / cfg.bench_epochs.max(1) as f64,
            timed_steps,
        });
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(
    mut out: W,
    model: ModelKind,
    seq_len: usize,
    rows: &[BenchRow],
) -> std::io::Result<()> {
    writeln!(
        out,
        "model,seq_len,horizon,epochs,steps_per_epoch,mean_epoch_seconds"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:.6}",
            model.as_str(),
            seq_len,
            r.horizon,
            r.epochs,
            r.steps_per_epoch,
            r.mean_epoch_seconds
        )?;
    }
    Ok(())
}
