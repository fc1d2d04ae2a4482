//! Test-only oracles. Everything here works on plain `Vec<f64>` with
//! explicit index arithmetic and never calls the library's kernels, so it
//! stays independent of the code under test.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spdnet_core::{Parameter, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, random_vec(rng, n, scale)).unwrap()
}

/// Overwrites every parameter with uniform noise of the given scale.
pub fn randomize(params: &[Parameter], rng: &mut ChaCha8Rng, scale: f64) {
    for p in params {
        let shape = p.shape();
        p.set_value(random_tensor(rng, &shape, scale)).unwrap();
    }
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Central differences of `f` w.r.t. every element of `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `(re, im)` of `sum_t x[t] e^{-2 pi i t f / S}` by direct summation.
pub fn dft_bin(x: &[f64], f: usize) -> (f64, f64) {
    let s = x.len() as f64;
    x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, &v)| {
        let ang = -2.0 * std::f64::consts::PI * (t * f) as f64 / s;
        (re + v * ang.cos(), im + v * ang.sin())
    })
}

/// Batch/variate-averaged magnitudes for bins `0..=S/2` of a `[B, S, N]`
/// row-major buffer.
pub fn brute_spectrum(data: &[f64], b: usize, s: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; s / 2 + 1];
    for bi in 0..b {
        for ni in 0..n {
            let series: Vec<f64> = (0..s).map(|t| data[(bi * s + t) * n + ni]).collect();
            for (f, o) in out.iter_mut().enumerate() {
                let (re, im) = dft_bin(&series, f);
                *o += (re * re + im * im).sqrt();
            }
        }
    }
    out.iter().map(|v| v / (b * n) as f64).collect()
}

pub fn sine(seq: usize, f: usize, amp: f64) -> Vec<f64> {
    (0..seq)
        .map(|t| amp * (2.0 * std::f64::consts::PI * (f * t) as f64 / seq as f64).sin())
        .collect()
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

/// `y[h] = sum_s x[s] w[s, h] + bias[h]`
pub fn linear(x: &[f64], w: &Tensor, bias: Option<&Tensor>) -> Vec<f64> {
    let (i, o) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), i);
    (0..o)
        .map(|h| {
            let dot: f64 = (0..i).map(|s| x[s] * w.data()[s * o + h]).sum();
            dot + bias.map_or(0.0, |b| b.data()[h])
        })
        .collect()
}

/// 'same'-padded cross-correlation of one sequence with an odd kernel.
pub fn conv_same(x: &[f64], k: &[f64]) -> Vec<f64> {
    let lead = (k.len() - 1) / 2;
    (0..x.len())
        .map(|t| {
            k.iter()
                .enumerate()
                .map(|(j, &w)| {
                    let u = t as isize + j as isize - lead as isize;
                    if u >= 0 && (u as usize) < x.len() {
                        w * x[u as usize]
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Element `(t, c)` of the folded plane of `series` for period `p`.
pub fn folded_at(series: &[f64], p: usize, t: isize, c: isize, f: usize) -> f64 {
    if t < 0 || c < 0 || t as usize >= p || c as usize >= f {
        return 0.0;
    }
    series
        .get(c as usize * p + t as usize)
        .copied()
        .unwrap_or(0.0)
}

/// Per-cycle 'same' 1-D conv along time-within-period, unfolded to S.
pub fn within_period_conv(series: &[f64], p: usize, f: usize, k: &[f64]) -> Vec<f64> {
    let s = series.len();
    let mut out = vec![0.0; s];
    for (pos, o) in out.iter_mut().enumerate() {
        let (c, t) = (pos / p, pos % p);
        *o = (0..k.len())
            .map(|j| k[j] * folded_at(series, p, t as isize + j as isize - 1, c as isize, f))
            .sum();
    }
    out
}

/// 3x3 'same' conv over the folded `(p, f)` plane, unfolded to S.
pub fn plane_conv(series: &[f64], p: usize, f: usize, k: &[f64]) -> Vec<f64> {
    let s = series.len();
    let mut out = vec![0.0; s];
    for (pos, o) in out.iter_mut().enumerate() {
        let (c, t) = (pos / p, pos % p);
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                acc += k[i * 3 + j]
                    * folded_at(
                        series,
                        p,
                        t as isize + i as isize - 1,
                        c as isize + j as isize - 1,
                        f,
                    );
            }
        }
        *o = acc;
    }
    out
}

/// Column `n` of a `[B, S, N]` buffer for batch `b`.
pub fn series_of(data: &[f64], b: usize, s: usize, n_vars: usize, n: usize) -> Vec<f64> {
    (0..s).map(|t| data[(b * s + t) * n_vars + n]).collect()
}
