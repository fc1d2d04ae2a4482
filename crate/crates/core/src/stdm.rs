//! Seasonal-trend decomposition branch.
//!
//! Trend is a depthwise 1-D convolution over time with a wide kernel;
//! seasonality is a narrower depthwise convolution over the detrended
//! series; the residual is what remains. The three parts are summed back
//! (which reproduces the input exactly) and projected from `S` to `P`
//! steps by a linear map shared across variates.

use crate::autodiff::{Parameter, Var};
use crate::error::{Error, Result};
use crate::nn::{Initializer, Linear};
use crate::tensor::{Padding, Tensor};

/// Trend, seasonal and residual parts, each `[B, S, N]`.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub trend: Var,
    pub seasonal: Var,
    pub residual: Var,
}

#[derive(Debug, Clone)]
pub struct Stdm {
    seq_len: usize,
    horizon: usize,
    n_vars: usize,
    /// `[N, 1, trend_kernel]`, one kernel per variate
    pub trend_kernel: Parameter,
    /// `[N, 1, seasonal_kernel]`
    pub seasonal_kernel: Parameter,
    pub projection: Linear,
}

impl Stdm {
    pub fn new(
        init: &mut Initializer,
        seq_len: usize,
        horizon: usize,
        n_vars: usize,
        trend_kernel: usize,
        seasonal_kernel: usize,
    ) -> Result<Self> {
        for (name, k) in [("trend", trend_kernel), ("seasonal", seasonal_kernel)] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("{name} kernel {k} must be odd")));
            }
            if k >= seq_len {
                return Err(Error::Config(format!(
                    "{name} kernel {k} must be shorter than seq_len {seq_len}"
                )));
            }
        }
        if trend_kernel <= seasonal_kernel {
            return Err(Error::Config(format!(
                "trend kernel {trend_kernel} must exceed seasonal kernel {seasonal_kernel}"
            )));
        }
        let averaging = |name: &str, k: usize, init: &mut Initializer| {
            init.constant(name, &[n_vars, 1, k], 1.0 / k as f64)
        };
        Ok(Self {
            seq_len,
            horizon,
            n_vars,
            trend_kernel: averaging("stdm.trend_conv", trend_kernel, init),
            seasonal_kernel: averaging("stdm.seasonal_conv", seasonal_kernel, init),
            projection: Linear::new(init, "stdm.projection", seq_len, horizon, true),
        })
    }

    fn check_input(&self, x: &Var) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.seq_len || s[2] != self.n_vars {
            return Err(Error::Shape {
                expected: vec![s.first().copied().unwrap_or(1), self.seq_len, self.n_vars],
                found: s.to_vec(),
            });
        }
        Ok(())
    }

    pub fn decompose(&self, x: &Var) -> Result<Decomposition> {
        self.check_input(x)?;
        let channels_first = x.permute(&[0, 2, 1])?;
        let trend = channels_first.conv1d(&self.trend_kernel.var(), Padding::Same, self.n_vars)?;
        let detrended = channels_first.sub(&trend)?;
        let seasonal = detrended.conv1d(&self.seasonal_kernel.var(), Padding::Same, self.n_vars)?;
        let residual = detrended.sub(&seasonal)?;
        Ok(Decomposition {
            trend: trend.permute(&[0, 2, 1])?,
            seasonal: seasonal.permute(&[0, 2, 1])?,
            residual: residual.permute(&[0, 2, 1])?,
        })
    }

    /// `[B, S, N] -> [B, P, N]`.
    pub fn forward(&self, x: &Var) -> Result<Var> {
        let parts = self.decompose(x)?;
        let recombined = parts.seasonal.add(&parts.trend)?.add(&parts.residual)?;
        let out = self.projection.forward(&recombined.permute(&[0, 2, 1])?)?;
        Ok(out.permute(&[0, 2, 1])?)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = vec![self.trend_kernel.clone(), self.seasonal_kernel.clone()];
        out.extend(self.projection.parameters());
        out
    }

    /// Overwrites both kernels with uniform averaging weights.
    pub fn reset_to_moving_average(&self) -> Result<()> {
        for p in [&self.trend_kernel, &self.seasonal_kernel] {
            let shape = p.shape();
            p.set_value(Tensor::full(&shape, 1.0 / shape[2] as f64))?;
        }
        Ok(())
    }
}
