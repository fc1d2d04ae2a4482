//! Series ingestion, chronological splitting, standardisation, sliding
//! windows and the synthetic residential-load generator.
//!
//! CSV schema: a header row, then one row per time step. The first column
//! is an ISO-8601 timestamp (`2023-01-01T00:15:00`, a space separator or an
//! RFC 3339 offset are also accepted); every other column is numeric.

use std::f64::consts::PI;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::config::SyntheticProfile;
use crate::tensor::Tensor;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: u64, msg: String },
    #[error("line {line}: timestamp {timestamp} does not increase on the previous row")]
    NonMonotone { line: u64, timestamp: String },
    #[error("header mismatch: expected {expected:?}, found {found:?}")]
    Header {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("{what} has {len} rows, need at least {need}")]
    TooShort {
        what: String,
        len: usize,
        need: usize,
    },
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    Fractions([f64; 3]),
    #[error("{0}")]
    Invalid(String),
}

/// A `T x N` table of observations with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub timestamps: Vec<NaiveDateTime>,
    pub columns: Vec<String>,
    /// Row-major `T x N`.
    pub values: Vec<f64>,
}

impl SeriesTable {
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        columns: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self, DataError> {
        if values.len() != timestamps.len() * columns.len() {
            return Err(DataError::Invalid(format!(
                "{} values do not fill {} rows x {} columns",
                values.len(),
                timestamps.len(),
                columns.len()
            )));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(DataError::NonMonotone {
                line: i as u64 + 3,
                timestamp: timestamps[i + 1].format(TIMESTAMP_FORMAT).to_string(),
            });
        }
        Ok(Self {
            timestamps,
            columns,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column_index(&self, name: &str) -> Result<usize, DataError> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_cols() + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.get(t, col)).collect()
    }

    /// Rows `[start, start + len)`.
    pub fn rows(&self, start: usize, len: usize) -> SeriesTable {
        let n = self.n_cols();
        SeriesTable {
            timestamps: self.timestamps[start..start + len].to_vec(),
            columns: self.columns.clone(),
            values: self.values[start * n..(start + len) * n].to_vec(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(File::create(path)?);
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        let n = self.n_cols();
        for (t, ts) in self.timestamps.iter().enumerate() {
            let mut rec = vec![ts.format(TIMESTAMP_FORMAT).to_string()];
            // `{}` on f64 prints the shortest string that parses back exactly
            rec.extend(
                self.values[t * n..(t + 1) * n]
                    .iter()
                    .map(|v| format!("{v}")),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M"))
        .ok()
        .or_else(|| DateTime::parse_from_rfc3339(s).ok().map(|d| d.naive_utc()))
        .or_else(|| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    /// Value column names the file must carry, in order. `None` accepts any.
    pub columns: Option<Vec<String>>,
    /// Fill empty cells from the previous row instead of rejecting them.
    pub forward_fill: bool,
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<SeriesTable, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.len() < 2 {
        return Err(DataError::Invalid(
            "need a timestamp column and at least one value column".into(),
        ));
    }
    let columns = header[1..].to_vec();
    if let Some(expected) = &schema.columns {
        if *expected != columns {
            return Err(DataError::Header {
                expected: expected.clone(),
                found: columns,
            });
        }
    }
    let n = columns.len();
    let mut timestamps: Vec<NaiveDateTime> = Vec::new();
    let mut values = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != n + 1 {
            return Err(DataError::Malformed {
                line,
                msg: format!("expected {} fields, found {}", n + 1, rec.len()),
            });
        }
        let ts = parse_timestamp(&rec[0]).ok_or_else(|| DataError::Malformed {
            line,
            msg: format!("column `{}`: bad timestamp `{}`", header[0], &rec[0]),
        })?;
        if let Some(prev) = timestamps.last() {
            if ts <= *prev {
                return Err(DataError::NonMonotone {
                    line,
                    timestamp: rec[0].to_string(),
                });
            }
        }
        for (c, cell) in rec.iter().skip(1).enumerate() {
            let v = if cell.is_empty() {
                if !schema.forward_fill || timestamps.is_empty() {
                    return Err(DataError::Malformed {
                        line,
                        msg: format!("column `{}`: missing value", columns[c]),
                    });
                }
                values[values.len() - n]
            } else {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DataError::Malformed {
                        line,
                        msg: format!("column `{}`: `{cell}` is not a finite number", columns[c]),
                    })?
            };
            values.push(v);
        }
        timestamps.push(ts);
    }
    log::info!(
        "loaded {} rows x {} columns from {}",
        timestamps.len(),
        n,
        path.display()
    );
    SeriesTable::new(timestamps, columns, values)
}

/// Train / validation / test partitions, in chronological order.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: SeriesTable,
    pub val: SeriesTable,
    pub test: SeriesTable,
}

/// Row counts for a chronological split: train and validation are
/// floor-rounded, test takes the remainder.
pub fn split_lengths(total: usize, fractions: [f64; 3]) -> Result<[usize; 3], DataError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::Fractions(fractions));
    }
    // the epsilon absorbs products like 0.7 * 50 landing just under 35
    let train = (total as f64 * fractions[0] + 1e-9).floor() as usize;
    let val = (total as f64 * fractions[1] + 1e-9).floor() as usize;
    let train = train.min(total);
    let val = val.min(total - train);
    Ok([train, val, total - train - val])
}

/// Chronological, unshuffled split. Each part must hold at least
/// `min_rows` rows (one full window).
pub fn split(
    table: &SeriesTable,
    fractions: [f64; 3],
    min_rows: usize,
) -> Result<Splits, DataError> {
    let [a, b, c] = split_lengths(table.len(), fractions)?;
    for (what, len) in [
        ("train split", a),
        ("validation split", b),
        ("test split", c),
    ] {
        if len < min_rows {
            return Err(DataError::TooShort {
                what: what.into(),
                len,
                need: min_rows,
            });
        }
    }
    Ok(Splits {
        train: table.rows(0, a),
        val: table.rows(a, b),
        test: table.rows(a + b, c),
    })
}

/// Per-column standardisation fitted on training rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(train: &SeriesTable) -> Result<Self, DataError> {
        if train.is_empty() {
            return Err(DataError::Invalid(
                "cannot fit a scaler on an empty table".into(),
            ));
        }
        let t = train.len() as f64;
        let mut mean = Vec::with_capacity(train.n_cols());
        let mut std = Vec::with_capacity(train.n_cols());
        for c in 0..train.n_cols() {
            let col = train.column(c);
            let mu = col.iter().sum::<f64>() / t;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / t;
            let mut sigma = var.sqrt();
            if sigma < STD_FLOOR {
                log::warn!(
                    "column `{}` has zero variance on the training split; std floored to {STD_FLOOR:e}",
                    train.columns[c]
                );
                sigma = STD_FLOOR;
            }
            mean.push(mu);
            std.push(sigma);
        }
        Ok(Self { mean, std })
    }

    pub fn transform(&self, table: &SeriesTable) -> SeriesTable {
        let n = table.n_cols();
        let values = table
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % n]) / self.std[i % n])
            .collect();
        SeriesTable {
            values,
            ..table.clone()
        }
    }

    pub fn inverse_transform(&self, table: &SeriesTable) -> SeriesTable {
        let n = table.n_cols();
        let values = table
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| self.inverse_value(i % n, v))
            .collect();
        SeriesTable {
            values,
            ..table.clone()
        }
    }

    pub fn inverse_value(&self, col: usize, z: f64) -> f64 {
        z * self.std[col] + self.mean[col]
    }
}

/// Fits on `splits.train` and standardises all three parts.
pub fn fit_transform(splits: &Splits) -> Result<(Scaler, Splits), DataError> {
    let scaler = Scaler::fit(&splits.train)?;
    let out = Splits {
        train: scaler.transform(&splits.train),
        val: scaler.transform(&splits.val),
        test: scaler.transform(&splits.test),
    };
    Ok((scaler, out))
}

/// A batch of aligned windows.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// `[B, S, N]`
    pub inputs: Tensor,
    /// `[B, P, N]`
    pub targets: Tensor,
    /// Row index of each window's first input step.
    pub starts: Vec<usize>,
}

/// All stride-1 windows of a table.
#[derive(Debug, Clone)]
pub struct Windows<'a> {
    table: &'a SeriesTable,
    seq_len: usize,
    horizon: usize,
}

impl<'a> Windows<'a> {
    pub fn new(table: &'a SeriesTable, seq_len: usize, horizon: usize) -> Result<Self, DataError> {
        if seq_len == 0 || horizon == 0 {
            return Err(DataError::Invalid(
                "seq_len and horizon must be positive".into(),
            ));
        }
        if table.len() < seq_len + horizon {
            return Err(DataError::TooShort {
                what: "series".into(),
                len: table.len(),
                need: seq_len + horizon,
            });
        }
        Ok(Self {
            table,
            seq_len,
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.table.len() - self.seq_len - self.horizon + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn table(&self) -> &SeriesTable {
        self.table
    }

    pub fn batch(&self, starts: &[usize]) -> WindowBatch {
        let n = self.table.n_cols();
        let (s, p) = (self.seq_len, self.horizon);
        let mut inputs = Vec::with_capacity(starts.len() * s * n);
        let mut targets = Vec::with_capacity(starts.len() * p * n);
        for &st in starts {
            inputs.extend_from_slice(&self.table.values[st * n..(st + s) * n]);
            targets.extend_from_slice(&self.table.values[(st + s) * n..(st + s + p) * n]);
        }
        let b = starts.len();
        WindowBatch {
            inputs: Tensor::new(&[b, s, n], inputs).expect("window shape"),
            targets: Tensor::new(&[b, p, n], targets).expect("window shape"),
            starts: starts.to_vec(),
        }
    }

    /// Batches of `batch_size`; the last one may be smaller. With
    /// `shuffle_seed` the window order is a seeded permutation, otherwise
    /// chronological.
    pub fn batches(
        &self,
        batch_size: usize,
        shuffle_seed: Option<u64>,
    ) -> impl Iterator<Item = WindowBatch> + '_ {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        let batch_size = batch_size.max(1);
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }
}

/// Convenience wrapper returning every batch at once.
pub fn make_windows(
    table: &SeriesTable,
    seq_len: usize,
    horizon: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<WindowBatch>, DataError> {
    let w = Windows::new(table, seq_len, horizon)?;
    Ok(w.batches(batch_size, shuffle_seed).collect())
}

/// Additive parts of a generated load series.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadComponents {
    /// base + daily + weekly
    pub smooth: Vec<f64>,
    pub ar_noise: Vec<f64>,
    pub spikes: Vec<f64>,
}

impl LoadComponents {
    pub fn load(&self) -> Vec<f64> {
        self.smooth
            .iter()
            .zip(&self.ar_noise)
            .zip(&self.spikes)
            .map(|((a, b), c)| a + b + c)
            .collect()
    }
}

pub const MIN_SYNTHETIC_LENGTH: usize = 1000;

pub fn synthetic_components(
    profile: &SyntheticProfile,
    length: usize,
    rng: &mut ChaCha8Rng,
) -> LoadComponents {
    let daily = profile.daily_period.max(1) as f64;
    let weekly = profile.weekly_period.max(1) as f64;
    let noise = Normal::new(0.0, profile.noise_std.max(0.0)).expect("finite std");
    let mut smooth = Vec::with_capacity(length);
    let mut ar_noise = Vec::with_capacity(length);
    let mut spikes = Vec::with_capacity(length);
    let mut ar = 0.0;
    for t in 0..length {
        let tf = t as f64;
        // load peaks in the evening, dips before dawn
        smooth.push(
            profile.base
                + profile.daily_amplitude * (2.0 * PI * tf / daily - PI / 2.0).sin()
                + profile.weekly_amplitude * (2.0 * PI * tf / weekly).sin(),
        );
        ar = profile.ar_coefficient * ar + noise.sample(rng);
        ar_noise.push(ar);
        let spike = if profile.spike_magnitude != 0.0
            && rng.gen_bool(profile.spike_probability.clamp(0.0, 1.0))
        {
            profile.spike_magnitude * (1.0 + rng.gen::<f64>())
        } else {
            0.0
        };
        spikes.push(spike);
    }
    LoadComponents {
        smooth,
        ar_noise,
        spikes,
    }
}

/// Deterministic synthetic residential-load table at 15-minute resolution.
///
/// Columns: `load`, plus `temperature`, `humidity`, `wind_speed` and
/// `irradiance` when `profile.covariates` is set.
pub fn generate_synthetic(
    profile: &SyntheticProfile,
    length: usize,
    seed: u64,
) -> Result<SeriesTable, DataError> {
    if length < MIN_SYNTHETIC_LENGTH {
        return Err(DataError::TooShort {
            what: "synthetic series".into(),
            len: length,
            need: MIN_SYNTHETIC_LENGTH,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let load = synthetic_components(profile, length, &mut rng).load();
    let mut columns = vec!["load".to_string()];
    let mut cols = vec![load];
    if profile.covariates {
        let daily = profile.daily_period.max(1) as f64;
        let jitter = Normal::new(0.0, 1.0).expect("unit normal");
        let phase = |t: usize, lag: f64| 2.0 * PI * (t as f64 - lag) / daily;
        let mut temperature = Vec::with_capacity(length);
        let mut humidity = Vec::with_capacity(length);
        let mut wind = Vec::with_capacity(length);
        let mut irradiance = Vec::with_capacity(length);
        for t in 0..length {
            let slow = 2.0 * PI * t as f64 / (daily * 5.0);
            temperature
                .push(15.0 + 6.0 * phase(t, daily * 0.375).sin() + 0.5 * jitter.sample(&mut rng));
            humidity
                .push(60.0 - 12.0 * phase(t, daily * 0.375).sin() + 2.0 * jitter.sample(&mut rng));
            wind.push((4.0 + 1.5 * slow.sin() + 0.6 * jitter.sample(&mut rng)).max(0.0));
            irradiance.push(
                (600.0 * phase(t, daily * 0.25).sin()).max(0.0)
                    + 5.0 * jitter.sample(&mut rng).abs(),
            );
        }
        columns.extend(["temperature", "humidity", "wind_speed", "irradiance"].map(String::from));
        cols.extend([temperature, humidity, wind, irradiance]);
    }
    let start = NaiveDate::from_ymd_opt(2023, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid start");
    let timestamps = (0..length)
        .map(|t| start + Duration::minutes(15 * t as i64))
        .collect();
    let n = cols.len();
    let mut values = Vec::with_capacity(length * n);
    for t in 0..length {
        values.extend(cols.iter().map(|c| c[t]));
    }
    SeriesTable::new(timestamps, columns, values)
}

/// Writes `timestamp,horizon_step,predicted,actual` rows.
pub fn write_predictions<W: Write>(
    out: W,
    rows: impl IntoIterator<Item = (NaiveDateTime, usize, f64, f64)>,
) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp", "horizon_step", "predicted", "actual"])?;
    for (ts, step, pred, actual) in rows {
        w.write_record([
            ts.format(TIMESTAMP_FORMAT).to_string(),
            step.to_string(),
            format!("{pred}"),
            format!("{actual}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}
