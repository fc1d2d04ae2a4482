//! Dominant-period extraction and the 1-D to 2-D folding of a window.
//!
//! A window `[B, S, N]` is transformed along time, magnitudes are averaged
//! over batch and variates, the DC bin is discarded and the strongest
//! remaining frequencies become periods `p = ceil(S / f)`. Folding lays a
//! series out as a `[p, f]` plane whose rows index time within a cycle and
//! whose columns index cycles, zero-padding the tail up to `p * f`.

use std::io::{self, Write};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::autodiff::Var;
use crate::tensor::{Tensor, TensorError};

/// Magnitudes at or below this are treated as absent.
pub const MAGNITUDE_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("sequence length {0} is too short for period detection (need at least 4)")]
    TooShort(usize),
    #[error(
        "input has no periodic component: every non-DC magnitude is at most {MAGNITUDE_FLOOR:e}"
    )]
    NoPeriodicity,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("expected a [B, S, N] window, got shape {0:?}")]
    BadShape(Vec<usize>),
    #[error("period {period} x frequency {frequency} overflows")]
    Overflow { period: usize, frequency: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Batch- and variate-averaged DFT magnitudes for bins `0..=S/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub magnitudes: Vec<f64>,
    pub sequence_length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodEntry {
    /// Cycles per window, at least 1.
    pub frequency: usize,
    /// `ceil(S / frequency)`.
    pub period: usize,
    pub amplitude: f64,
}

impl PeriodEntry {
    pub fn new(sequence_length: usize, frequency: usize, amplitude: f64) -> Self {
        Self {
            frequency,
            period: sequence_length.div_ceil(frequency),
            amplitude,
        }
    }
}

/// Dominant periods, strongest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodSet {
    pub sequence_length: usize,
    pub entries: Vec<PeriodEntry>,
}

impl PeriodSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn periods(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.period).collect()
    }

    /// One `frequency period amplitude` line per entry.
    pub fn write_dump<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in &self.entries {
            writeln!(out, "{} {} {:.17e}", e.frequency, e.period, e.amplitude)?;
        }
        Ok(())
    }
}

fn window_dims(shape: &[usize]) -> Result<(usize, usize, usize), SpectralError> {
    match *shape {
        [b, s, n] => Ok((b, s, n)),
        _ => Err(SpectralError::BadShape(shape.to_vec())),
    }
}

pub fn compute_spectrum(x: &Tensor) -> Result<Spectrum, SpectralError> {
    let (batch, seq, vars) = window_dims(x.shape())?;
    if seq < 4 {
        return Err(SpectralError::TooShort(seq));
    }
    let bins = seq / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(seq);
    let mut buf = vec![Complex::new(0.0, 0.0); seq];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut acc = vec![0.0; bins];
    let data = x.data();
    for b in 0..batch {
        for n in 0..vars {
            for (t, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(data[(b * seq + t) * vars + n], 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (a, c) in acc.iter_mut().zip(&buf) {
                *a += c.norm();
            }
        }
    }
    let count = (batch * vars) as f64;
    Ok(Spectrum {
        magnitudes: acc.into_iter().map(|a| a / count).collect(),
        sequence_length: seq,
    })
}

/// The `k` strongest non-DC frequencies of `spec`.
///
/// Ties go to the lower frequency. Fewer than `k` entries come back when
/// fewer usable bins exist.
pub fn top_k_periods(spec: &Spectrum, k: usize) -> Result<PeriodSet, SpectralError> {
    if k == 0 {
        return Err(SpectralError::ZeroK);
    }
    let mut candidates: Vec<(usize, f64)> = spec
        .magnitudes
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &m)| m > MAGNITUDE_FLOOR)
        .map(|(f, &m)| (f, m))
        .collect();
    if candidates.is_empty() {
        return Err(SpectralError::NoPeriodicity);
    }
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    candidates.truncate(k);
    Ok(PeriodSet {
        sequence_length: spec.sequence_length,
        entries: candidates
            .into_iter()
            .map(|(f, m)| PeriodEntry::new(spec.sequence_length, f, m))
            .collect(),
    })
}

/// Convenience: spectrum then selection.
pub fn detect_periods(x: &Tensor, k: usize) -> Result<PeriodSet, SpectralError> {
    top_k_periods(&compute_spectrum(x)?, k)
}

/// A window folded to `[B, period, frequency, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Folded2D {
    pub tensor: Tensor,
    pub valid_length: usize,
}

impl Folded2D {
    pub fn period(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn frequency(&self) -> usize {
        self.tensor.shape()[2]
    }
}

fn padded_len(seq: usize, period: usize, frequency: usize) -> Result<usize, SpectralError> {
    let len = period
        .checked_mul(frequency)
        .ok_or(SpectralError::Overflow { period, frequency })?;
    if len < seq {
        return Err(SpectralError::Tensor(TensorError::Invalid {
            op: "fold",
            msg: format!("period {period} x frequency {frequency} does not cover {seq} steps"),
        }));
    }
    Ok(len)
}

/// Folds `[B, S, N]` into `[B, p, f, N]` where element `(t, c)` holds
/// `x[c * p + t]` and positions past `S` are zero.
pub fn fold(x: &Tensor, period: usize, frequency: usize) -> Result<Folded2D, SpectralError> {
    let (batch, seq, vars) = window_dims(x.shape())?;
    let len = padded_len(seq, period, frequency)?;
    let tensor = x
        .pad_zeros(1, len)?
        .reshape(&[batch, frequency, period, vars])?
        .permute(&[0, 2, 1, 3])?;
    Ok(Folded2D {
        tensor,
        valid_length: seq,
    })
}

/// Inverse of [`fold`] on the first `valid_length` positions.
pub fn unfold(folded: &Folded2D) -> Result<Tensor, SpectralError> {
    let s = folded.tensor.shape();
    let (batch, period, frequency, vars) = (s[0], s[1], s[2], s[3]);
    Ok(folded
        .tensor
        .permute(&[0, 2, 1, 3])?
        .reshape(&[batch, frequency * period, vars])?
        .slice(1, 0, folded.valid_length)?)
}

/// Differentiable [`fold`] on a graph node.
pub fn fold_var(x: &Var, period: usize, frequency: usize) -> Result<Var, SpectralError> {
    let (batch, seq, vars) = window_dims(x.shape())?;
    let len = padded_len(seq, period, frequency)?;
    Ok(x.pad_zeros(1, len)?
        .reshape(&[batch, frequency, period, vars])?
        .permute(&[0, 2, 1, 3])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: &[f64]) -> Tensor {
        Tensor::new(&[1, values.len(), 1], values.to_vec()).unwrap()
    }

    fn sine(seq: usize, f: usize, amp: f64) -> Vec<f64> {
        (0..seq)
            .map(|t| amp * (2.0 * std::f64::consts::PI * (f * t) as f64 / seq as f64).sin())
            .collect()
    }

    #[test]
    fn constant_has_no_periodicity() {
        let x = series(&[2.5; 32]);
        let spec = compute_spectrum(&x).unwrap();
        assert!(spec.magnitudes[1..].iter().all(|&m| m <= 1e-9));
        assert_eq!(top_k_periods(&spec, 2), Err(SpectralError::NoPeriodicity));
    }

    #[test]
    fn too_short_and_zero_k() {
        assert_eq!(
            compute_spectrum(&series(&[1.0, 2.0, 3.0])),
            Err(SpectralError::TooShort(3))
        );
        let spec = compute_spectrum(&series(&sine(16, 2, 1.0))).unwrap();
        assert_eq!(top_k_periods(&spec, 0), Err(SpectralError::ZeroK));
    }

    #[test]
    fn single_tone_period() {
        let spec = compute_spectrum(&series(&sine(96, 4, 1.0))).unwrap();
        let set = top_k_periods(&spec, 1).unwrap();
        assert_eq!((set.entries[0].frequency, set.entries[0].period), (4, 24));
    }

    #[test]
    fn fewer_usable_bins_than_k() {
        let spec = Spectrum {
            magnitudes: vec![5.0, 0.0, 3.0, 0.0, 0.0],
            sequence_length: 8,
        };
        let set = top_k_periods(&spec, 3).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.entries[0].period, 4);
    }

    #[test]
    fn ties_prefer_lower_frequency() {
        let spec = Spectrum {
            magnitudes: vec![9.0, 1.0, 2.0, 2.0, 2.0],
            sequence_length: 8,
        };
        let set = top_k_periods(&spec, 2).unwrap();
        assert_eq!(
            set.entries.iter().map(|e| e.frequency).collect::<Vec<_>>(),
            vec![2, 3]
        );
    }

    #[test]
    fn fold_layout_and_padding() {
        let x = series(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let f = fold(&x, 3, 2).unwrap();
        assert_eq!(f.tensor.shape(), &[1, 3, 2, 1]);
        assert_eq!(f.tensor.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);

        let x = series(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let f = fold(&x, 3, 2).unwrap();
        assert_eq!(f.tensor.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 0.0]);
        assert_eq!(unfold(&f).unwrap(), x);
    }

    #[test]
    fn fold_rejects_short_cover() {
        assert!(fold(&series(&[0.0; 7]), 3, 2).is_err());
    }

    #[test]
    fn unfold_zero() {
        let f = Folded2D {
            tensor: Tensor::zeros(&[2, 4, 3, 2]),
            valid_length: 10,
        };
        assert_eq!(unfold(&f).unwrap(), Tensor::zeros(&[2, 10, 2]));
    }

    #[test]
    fn dump_lines() {
        let spec = compute_spectrum(&series(&sine(32, 2, 1.0))).unwrap();
        let set = top_k_periods(&spec, 1).unwrap();
        let mut buf = Vec::new();
        set.write_dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("2 16 "), "{text}");
    }
}
