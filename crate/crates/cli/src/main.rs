use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use spdnet_core::checkpoint::Checkpoint;
use spdnet_core::data::{self, load_csv, CsvSchema, Windows};
use spdnet_core::harness::{self, BenchOptions};
use spdnet_core::model::build_model;
use spdnet_core::spectral;
use spdnet_core::{ModelConfig, ModelKind, SeriesTable, Tensor, Var};

#[derive(Parser, Debug)]
#[command(
    name = "spdnet",
    version,
    about = "Seasonal-periodic decomposition load forecaster"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model per horizon; writes checkpoints, run logs and metrics.csv
    Train(Common),
    /// Score saved checkpoints on the test split
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Evaluate this checkpoint instead of the ones found in --out
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write test-split forecasts for the target column
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Mean training seconds per epoch for each horizon
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Only time this many batches per epoch
        #[arg(long)]
        max_batches: Option<usize>,
    },
    /// Write the synthetic residential-load series as CSV
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Number of rows (defaults to the config's synthetic length)
        #[arg(long)]
        length: Option<usize>,
    },
    /// Print the dominant periods of one input window
    InspectPeriods {
        #[command(flatten)]
        common: Common,
        /// First row of the window
        #[arg(long, default_value_t = 0)]
        start: usize,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV input; synthetic data from the config is used when absent
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (a file path for generate-data and inspect-periods)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated prediction horizons
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
    #[arg(long, value_parser = ["spdnet", "linear", "persistence"])]
    model: Option<String>,
}

impl Common {
    fn config(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => ModelConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ModelConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(m) = &self.model {
            cfg.model = m.parse()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn horizons(&self, cfg: &ModelConfig) -> Vec<usize> {
        self.horizons.clone().unwrap_or_else(|| vec![cfg.horizon])
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    fn table(&self, cfg: &ModelConfig) -> Result<SeriesTable> {
        match &self.data {
            Some(path) => Ok(load_csv(
                path,
                &CsvSchema {
                    columns: None,
                    forward_fill: cfg.forward_fill,
                },
            )
            .with_context(|| format!("reading {}", path.display()))?),
            None => Ok(data::generate_synthetic(
                &cfg.synthetic,
                cfg.synthetic.length,
                cfg.seed,
            )?),
        }
    }
}

fn checkpoint_path(
    common: &Common,
    explicit: &Option<PathBuf>,
    kind: ModelKind,
    s: usize,
    h: usize,
) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        common
            .out_dir()
            .join(harness::checkpoint_file_name(kind, s, h))
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.config()?;
            let table = common.table(&cfg)?;
            let out = common.out_dir();
            let rows = harness::train_and_evaluate(&cfg, &table, &common.horizons(&cfg), &out)?;
            harness::write_metrics_csv(io::stdout().lock(), &rows)?;
            log::info!("outputs written to {}", out.display());
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = common.config()?;
            let table = common.table(&cfg)?;
            let mut rows = Vec::new();
            for h in common.horizons(&cfg) {
                let (model_cfg, model) = if cfg.model == ModelKind::Persistence {
                    let c = ModelConfig {
                        horizon: h,
                        ..cfg.clone()
                    };
                    let m = build_model(&c, table.n_cols())?;
                    (c, m)
                } else {
                    let path = checkpoint_path(&common, &checkpoint, cfg.model, cfg.seq_len, h);
                    let ckpt = Checkpoint::load(&path)
                        .with_context(|| format!("loading {}", path.display()))?;
                    harness::load_model(&ckpt)?
                };
                if model_cfg.n_vars != 0 && model_cfg.n_vars != table.n_cols() {
                    bail!(
                        "checkpoint expects {} variates, data has {}",
                        model_cfg.n_vars,
                        table.n_cols()
                    );
                }
                let prepared = harness::prepare_data(&model_cfg, &table)?;
                let w = Windows::new(
                    &prepared.normalized.test,
                    model_cfg.seq_len,
                    model_cfg.horizon,
                )?;
                rows.push(harness::MetricsRow {
                    model: model_cfg.model,
                    seq_len: model_cfg.seq_len,
                    horizon: model_cfg.horizon,
                    split: "test".into(),
                    metrics: harness::evaluate(
                        model.as_ref(),
                        &w,
                        model_cfg.batch_size,
                        Some(prepared.target),
                    )?,
                });
            }
            let out = common.out_dir();
            fs::create_dir_all(&out)?;
            harness::write_metrics_csv(
                BufWriter::new(File::create(out.join("eval_metrics.csv"))?),
                &rows,
            )?;
            harness::write_metrics_csv(io::stdout().lock(), &rows)?;
        }
        Command::Predict { common, checkpoint } => {
            let cfg = common.config()?;
            let table = common.table(&cfg)?;
            let (model_cfg, model) = if cfg.model == ModelKind::Persistence {
                (cfg.clone(), build_model(&cfg, table.n_cols())?)
            } else {
                let path =
                    checkpoint_path(&common, &checkpoint, cfg.model, cfg.seq_len, cfg.horizon);
                let ckpt = Checkpoint::load(&path)
                    .with_context(|| format!("loading {}", path.display()))?;
                harness::load_model(&ckpt)?
            };
            let prepared = harness::prepare_data(&model_cfg, &table)?;
            let w = Windows::new(
                &prepared.normalized.test,
                model_cfg.seq_len,
                model_cfg.horizon,
            )?;
            let col = prepared.target;
            let raw = &prepared.raw.test;
            let mut rows = Vec::new();
            for batch in w.batches(model_cfg.batch_size, None) {
                let pred = model.forward(&Var::constant(batch.inputs))?;
                let pred = pred.value();
                let (p, n) = (model_cfg.horizon, table.n_cols());
                for (bi, &start) in batch.starts.iter().enumerate() {
                    for step in 0..p {
                        let row = start + model_cfg.seq_len + step;
                        let z = pred.data()[(bi * p + step) * n + col];
                        rows.push((
                            raw.timestamps[row],
                            step + 1,
                            prepared.scaler.inverse_value(col, z),
                            raw.get(row, col),
                        ));
                    }
                }
            }
            let out = common.out_dir();
            fs::create_dir_all(&out)?;
            let path = out.join("predictions.csv");
            data::write_predictions(BufWriter::new(File::create(&path)?), rows)?;
            println!("{}", path.display());
        }
        Command::Benchmark {
            common,
            max_batches,
        } => {
            let cfg = common.config()?;
            let table = common.table(&cfg)?;
            let rows = harness::benchmark(
                &cfg,
                &table,
                &common.horizons(&cfg),
                BenchOptions { max_batches },
            )?;
            let out = common.out_dir();
            fs::create_dir_all(&out)?;
            harness::write_bench_csv(
                BufWriter::new(File::create(out.join("timing.csv"))?),
                cfg.model,
                cfg.seq_len,
                &rows,
            )?;
            harness::write_bench_csv(io::stdout().lock(), cfg.model, cfg.seq_len, &rows)?;
        }
        Command::GenerateData { common, length } => {
            let cfg = common.config()?;
            let len = length.unwrap_or(cfg.synthetic.length);
            let table = data::generate_synthetic(&cfg.synthetic, len, cfg.seed)?;
            let path = common
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("synthetic.csv"));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            table.write_csv(&path)?;
            println!("{} rows -> {}", table.len(), path.display());
        }
        Command::InspectPeriods { common, start } => {
            let cfg = common.config()?;
            let table = common.table(&cfg)?;
            inspect_periods(&cfg, &table, start, common.out.as_deref())?;
        }
    }
    Ok(())
}

fn inspect_periods(
    cfg: &ModelConfig,
    table: &SeriesTable,
    start: usize,
    out: Option<&Path>,
) -> Result<()> {
    if start + cfg.seq_len > table.len() {
        bail!(
            "window {start}..{} runs past the {} available rows",
            start + cfg.seq_len,
            table.len()
        );
    }
    let window = table.rows(start, cfg.seq_len);
    let x = Tensor::new(&[1, cfg.seq_len, table.n_cols()], window.values)?;
    let spec = spectral::compute_spectrum(&x)?;
    let set = spectral::top_k_periods(&spec, cfg.top_k)?;
    let mut stdout = io::stdout().lock();
    writeln!(
        stdout,
        "window rows {start}..{} (S = {})",
        start + cfg.seq_len,
        cfg.seq_len
    )?;
    writeln!(stdout, "frequency period amplitude")?;
    set.write_dump(&mut stdout)?;
    if let Some(path) = out {
        set.write_dump(BufWriter::new(File::create(path)?))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
