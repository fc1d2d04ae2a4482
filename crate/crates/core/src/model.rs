//! Forecasting models: the full SPDNet and the two yardstick baselines.

use std::collections::HashSet;

use crate::autodiff::{Parameter, Var};
use crate::config::{ModelConfig, ModelKind};
use crate::error::{Error, Result};
use crate::nn::Initializer;
use crate::pdm::{Pdm, PdmDims, PdmTrace};
use crate::stdm::Stdm;
use crate::tensor::Tensor;

/// A model mapping `[B, S, N]` windows to `[B, P, N]` forecasts.
pub trait Forecaster {
    fn kind(&self) -> ModelKind;
    fn forward(&self, x: &Var) -> Result<Var>;
    fn parameters(&self) -> Vec<Parameter>;
    fn seq_len(&self) -> usize;
    fn horizon(&self) -> usize;
}

/// `alpha_1 * PDM(x) + alpha_2 * STDM(x)`.
#[derive(Debug, Clone)]
pub struct Spdnet {
    pub stdm: Stdm,
    pub pdm: Pdm,
    pub alpha_pdm: Parameter,
    pub alpha_stdm: Parameter,
}

#[derive(Debug, Clone)]
pub struct SpdnetTrace {
    pub output: Var,
    pub pdm: Var,
    pub stdm: Var,
    pub pdm_trace: PdmTrace,
}

impl Spdnet {
    pub fn new(cfg: &ModelConfig, n_vars: usize) -> Result<Self> {
        cfg.validate()?;
        if n_vars == 0 {
            return Err(Error::Config("model needs at least one variate".into()));
        }
        let mut init = Initializer::new(cfg.seed);
        let stdm = Stdm::new(
            &mut init,
            cfg.seq_len,
            cfg.horizon,
            n_vars,
            cfg.trend_kernel,
            cfg.seasonal_kernel,
        )?;
        let pdm = Pdm::new(
            &mut init,
            PdmDims {
                seq_len: cfg.seq_len,
                horizon: cfg.horizon,
                n_vars,
                k_max: cfg.top_k,
                d_model: cfg.d_model,
                n_heads: cfg.n_heads,
                e_layers: cfg.e_layers,
                d_ff: cfg.d_ff,
                activation: cfg.activation,
                layer_norm_eps: cfg.layer_norm_eps,
            },
        )?;
        Ok(Self {
            stdm,
            pdm,
            alpha_pdm: init.constant("alpha_pdm", &[1], 0.5),
            alpha_stdm: init.constant("alpha_stdm", &[1], 0.5),
        })
    }

    pub fn forward_traced(&self, x: &Var) -> Result<SpdnetTrace> {
        let (pdm, pdm_trace) = self.pdm.forward_traced(x)?;
        let stdm = self.stdm.forward(x)?;
        let output = pdm
            .mul(&self.alpha_pdm.var())?
            .add(&stdm.mul(&self.alpha_stdm.var())?)?;
        Ok(SpdnetTrace {
            output,
            pdm,
            stdm,
            pdm_trace,
        })
    }
}

impl Forecaster for Spdnet {
    fn kind(&self) -> ModelKind {
        ModelKind::Spdnet
    }

    fn forward(&self, x: &Var) -> Result<Var> {
        Ok(self.forward_traced(x)?.output)
    }

    fn parameters(&self) -> Vec<Parameter> {
        let mut out = self.stdm.parameters();
        out.extend(self.pdm.parameters());
        out.push(self.alpha_pdm.clone());
        out.push(self.alpha_stdm.clone());
        out
    }

    fn seq_len(&self) -> usize {
        self.pdm.dims().seq_len
    }

    fn horizon(&self) -> usize {
        self.pdm.dims().horizon
    }
}

/// One independent `S -> P` linear map per variate.
#[derive(Debug, Clone)]
pub struct LinearBaseline {
    seq_len: usize,
    horizon: usize,
    /// `[N, S, P]`
    pub weight: Parameter,
    /// `[N, 1, P]`
    pub bias: Parameter,
}

impl LinearBaseline {
    pub fn new(cfg: &ModelConfig, n_vars: usize) -> Result<Self> {
        cfg.validate()?;
        let mut init = Initializer::new(cfg.seed);
        Ok(Self {
            seq_len: cfg.seq_len,
            horizon: cfg.horizon,
            weight: init.uniform(
                "linear.weight",
                &[n_vars, cfg.seq_len, cfg.horizon],
                cfg.seq_len,
            ),
            bias: init.zeros("linear.bias", &[n_vars, 1, cfg.horizon]),
        })
    }
}

impl Forecaster for LinearBaseline {
    fn kind(&self) -> ModelKind {
        ModelKind::Linear
    }

    fn forward(&self, x: &Var) -> Result<Var> {
        let per_var = x.permute(&[2, 0, 1])?;
        let y = per_var.matmul(&self.weight.var())?.add(&self.bias.var())?;
        Ok(y.permute(&[1, 2, 0])?)
    }

    fn parameters(&self) -> Vec<Parameter> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn horizon(&self) -> usize {
        self.horizon
    }
}

/// Repeats the last observed step across the horizon.
#[derive(Debug, Clone)]
pub struct Persistence {
    seq_len: usize,
    horizon: usize,
}

impl Persistence {
    pub fn new(seq_len: usize, horizon: usize) -> Self {
        Self { seq_len, horizon }
    }
}

/// `[B, S, N] -> [B, P, N]` with every step equal to `x[:, S-1, :]`.
pub fn persistence_forecast(x: &Tensor, horizon: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Shape {
            expected: vec![1, 1, 1],
            found: s.to_vec(),
        });
    }
    let last = x.slice(1, s[1] - 1, 1)?;
    let copies: Vec<&Tensor> = std::iter::repeat_n(&last, horizon).collect();
    Ok(Tensor::concat(&copies, 1)?)
}

impl Forecaster for Persistence {
    fn kind(&self) -> ModelKind {
        ModelKind::Persistence
    }

    fn forward(&self, x: &Var) -> Result<Var> {
        Ok(Var::constant(persistence_forecast(
            x.value(),
            self.horizon,
        )?))
    }

    fn parameters(&self) -> Vec<Parameter> {
        Vec::new()
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn horizon(&self) -> usize {
        self.horizon
    }
}

pub fn build_model(cfg: &ModelConfig, n_vars: usize) -> Result<Box<dyn Forecaster>> {
    let model: Box<dyn Forecaster> = match cfg.model {
        ModelKind::Spdnet => Box::new(Spdnet::new(cfg, n_vars)?),
        ModelKind::Linear => Box::new(LinearBaseline::new(cfg, n_vars)?),
        ModelKind::Persistence => Box::new(Persistence::new(cfg.seq_len, cfg.horizon)),
    };
    let mut names = HashSet::new();
    for p in model.parameters() {
        if !names.insert(p.name().to_string()) {
            return Err(Error::Config(format!(
                "duplicate parameter name `{}`",
                p.name()
            )));
        }
    }
    Ok(model)
}
