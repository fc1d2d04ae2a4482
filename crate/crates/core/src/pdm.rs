//! Periodical decomposition branch.
//!
//! For each dominant period the folded window `[B, p, f, N]` goes through
//! three parallel branches, each ending in a `[B, P, N]` forecast:
//!
//! * short-term: a 1-D convolution along time-within-period, per cycle;
//! * periodic: a 3x3 2-D convolution over the `(p, f)` plane;
//! * long-term: a per-cycle 1-D convolution, then an inverted embedding
//!   (one token per variate) and a multi-head self-attention encoder.
//!
//! Branch outputs are summed per period, stacked along a trailing period
//! axis (zero-filled up to `k_max`) and collapsed by a learned linear map.
//!
//! Learnable shapes depend only on `(S, P, N, k_max, d_model, H, L, d_ff)`.
//! Every branch unfolds back to length `S` before its `S -> P` projection,
//! so the detected `(p, f)` pairs never leak into parameter shapes.

use crate::autodiff::{Parameter, Var};
use crate::config::Activation;
use crate::error::{Error, Result};
use crate::nn::{Initializer, Linear};
use crate::spectral::{detect_periods, fold_var, PeriodSet};
use crate::tensor::{Padding, Tensor};

pub const BRANCH_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdmDims {
    pub seq_len: usize,
    pub horizon: usize,
    pub n_vars: usize,
    pub k_max: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub e_layers: usize,
    pub d_ff: usize,
    pub activation: Activation,
    pub layer_norm_eps: f64,
}

/// Per-period branch outputs, each `[B, P, N]`.
#[derive(Debug, Clone)]
pub struct BranchOutputs {
    pub short: Var,
    pub periodic: Var,
    pub long: Var,
}

/// Intermediate values of one PDM forward pass.
#[derive(Debug, Clone)]
pub struct PdmTrace {
    pub periods: PeriodSet,
    pub branches: Vec<BranchOutputs>,
    /// One `[B, H, N, N]` probability tensor per encoder layer per period.
    pub attention: Vec<Tensor>,
}

/// `[B, p, f, N] -> [B*N, p, f]`
fn merge_batch_vars(folded: &Var) -> Result<Var> {
    let s = folded.shape();
    let (b, p, f, n) = (s[0], s[1], s[2], s[3]);
    Ok(folded.permute(&[0, 3, 1, 2])?.reshape(&[b * n, p, f])?)
}

/// `[B*N, p, f] -> [B*N, S]`, reading cycle by cycle and dropping padding.
fn unfold_merged(x: &Var, seq_len: usize) -> Result<Var> {
    let s = x.shape();
    let (bn, p, f) = (s[0], s[1], s[2]);
    Ok(x.permute(&[0, 2, 1])?
        .reshape(&[bn, f * p])?
        .slice(1, 0, seq_len)?)
}

/// `[B*N, P] -> [B, P, N]`
fn split_batch_vars(y: &Var, batch: usize, n_vars: usize) -> Result<Var> {
    let p = y.shape()[1];
    Ok(y.reshape(&[batch, n_vars, p])?.permute(&[0, 2, 1])?)
}

/// Single-channel 1-D convolution along time-within-period, applied to
/// every cycle independently. `[B*N, p, f] -> [B*N, p, f]`.
fn conv_within_period(x: &Var, kernel: &Parameter) -> Result<Var> {
    let s = x.shape();
    let (bn, p, f) = (s[0], s[1], s[2]);
    let cycles = x.permute(&[0, 2, 1])?.reshape(&[bn * f, 1, p])?;
    let y = cycles.conv1d(&kernel.var(), Padding::Same, 1)?;
    Ok(y.reshape(&[bn, f, p])?.permute(&[0, 2, 1])?)
}

#[derive(Debug, Clone)]
pub struct ShortBranch {
    pub conv: Parameter,
    pub projection: Linear,
}

impl ShortBranch {
    fn new(init: &mut Initializer, dims: &PdmDims) -> Self {
        Self {
            conv: init.uniform("pdm.short.conv", &[1, 1, BRANCH_KERNEL], BRANCH_KERNEL),
            projection: Linear::new(
                init,
                "pdm.short.projection",
                dims.seq_len,
                dims.horizon,
                true,
            ),
        }
    }

    /// `folded`: `[B, p, f, N]` with `valid_length` = `seq_len`.
    pub fn forward(&self, folded: &Var, seq_len: usize) -> Result<Var> {
        let (b, n) = (folded.shape()[0], folded.shape()[3]);
        let merged = merge_batch_vars(folded)?;
        let conv = conv_within_period(&merged, &self.conv)?;
        let series = unfold_merged(&conv, seq_len)?;
        split_batch_vars(&self.projection.forward(&series)?, b, n)
    }

    fn parameters(&self) -> Vec<Parameter> {
        let mut out = vec![self.conv.clone()];
        out.extend(self.projection.parameters());
        out
    }
}

#[derive(Debug, Clone)]
pub struct PeriodicBranch {
    pub conv: Parameter,
    pub projection: Linear,
}

impl PeriodicBranch {
    fn new(init: &mut Initializer, dims: &PdmDims) -> Self {
        let k = BRANCH_KERNEL;
        Self {
            conv: init.uniform("pdm.periodic.conv", &[1, 1, k, k], k * k),
            projection: Linear::new(
                init,
                "pdm.periodic.projection",
                dims.seq_len,
                dims.horizon,
                true,
            ),
        }
    }

    pub fn forward(&self, folded: &Var, seq_len: usize) -> Result<Var> {
        let (b, n) = (folded.shape()[0], folded.shape()[3]);
        let merged = merge_batch_vars(folded)?;
        let s = merged.shape().to_vec();
        let plane = merged.reshape(&[s[0], 1, s[1], s[2]])?;
        let conv = plane.conv2d(&self.conv.var(), Padding::Same)?.reshape(&s)?;
        let series = unfold_merged(&conv, seq_len)?;
        split_batch_vars(&self.projection.forward(&series)?, b, n)
    }

    fn parameters(&self) -> Vec<Parameter> {
        let mut out = vec![self.conv.clone()];
        out.extend(self.projection.parameters());
        out
    }
}

/// One encoder layer: multi-head attention over variate tokens, an output
/// mix, a two-layer FFN, an FFN residual and layer normalisation.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    n_heads: usize,
    activation: Activation,
    eps: f64,
    /// `[d_model, d_model]`; head `h` owns columns `h*d_k .. (h+1)*d_k`.
    pub w_q: Parameter,
    pub w_k: Parameter,
    pub w_v: Parameter,
    /// Mixes the concatenated heads; starts as the identity.
    pub w_o: Parameter,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm_gain: Parameter,
    pub norm_bias: Parameter,
}

impl EncoderLayer {
    fn new(init: &mut Initializer, prefix: &str, dims: &PdmDims) -> Self {
        let d = dims.d_model;
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        Self {
            n_heads: dims.n_heads,
            activation: dims.activation,
            eps: dims.layer_norm_eps,
            w_q: init.uniform(&format!("{prefix}.w_q"), &[d, d], d),
            w_k: init.uniform(&format!("{prefix}.w_k"), &[d, d], d),
            w_v: init.uniform(&format!("{prefix}.w_v"), &[d, d], d),
            w_o: Parameter::new(format!("{prefix}.w_o"), eye),
            ffn_in: Linear::new(init, &format!("{prefix}.ffn_in"), d, dims.d_ff, true),
            ffn_out: Linear::new(init, &format!("{prefix}.ffn_out"), dims.d_ff, d, true),
            norm_gain: init.constant(&format!("{prefix}.norm.gain"), &[d], 1.0),
            norm_bias: init.zeros(&format!("{prefix}.norm.bias"), &[d]),
        }
    }

    /// `[B, N, d] -> [B, H, N, d_k]`
    fn heads(&self, x: &Var, w: &Parameter) -> Result<Var> {
        let s = x.shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        let dk = d / self.n_heads;
        Ok(x.matmul(&w.var())?
            .reshape(&[b, n, self.n_heads, dk])?
            .permute(&[0, 2, 1, 3])?)
    }

    /// Returns the layer output and the attention probabilities.
    pub fn forward(&self, x: &Var) -> Result<(Var, Tensor)> {
        let s = x.shape().to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let dk = d / self.n_heads;
        let q = self.heads(x, &self.w_q)?;
        let k = self.heads(x, &self.w_k)?;
        let v = self.heads(x, &self.w_v)?;
        let scores = q
            .matmul(&k.transpose_last2()?)?
            .scale(1.0 / (dk as f64).sqrt())?;
        let probs = scores.softmax(3)?;
        let attended = probs.matmul(&v)?;
        let concat = attended
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, n, d])?
            .matmul(&self.w_o.var())?;
        let hidden = self.ffn_in.forward(&concat)?;
        let hidden = match self.activation {
            Activation::Gelu => hidden.gelu()?,
            Activation::Relu => hidden.relu()?,
        };
        let ffn = self.ffn_out.forward(&hidden)?;
        let out = concat.add(&ffn)?.layer_norm(
            2,
            &self.norm_gain.var(),
            &self.norm_bias.var(),
            self.eps,
        )?;
        Ok((out, probs.value().clone()))
    }

    fn parameters(&self) -> Vec<Parameter> {
        let mut out = vec![
            self.w_q.clone(),
            self.w_k.clone(),
            self.w_v.clone(),
            self.w_o.clone(),
        ];
        out.extend(self.ffn_in.parameters());
        out.extend(self.ffn_out.parameters());
        out.push(self.norm_gain.clone());
        out.push(self.norm_bias.clone());
        out
    }
}

#[derive(Debug, Clone)]
pub struct LongBranch {
    pub conv: Parameter,
    /// Inverted embedding: each variate's length-`S` history becomes a token.
    pub embedding: Linear,
    pub layers: Vec<EncoderLayer>,
    pub head: Linear,
}

impl LongBranch {
    fn new(init: &mut Initializer, dims: &PdmDims) -> Self {
        Self {
            conv: init.uniform("pdm.long.conv", &[1, 1, BRANCH_KERNEL], BRANCH_KERNEL),
            embedding: Linear::new(init, "pdm.long.embedding", dims.seq_len, dims.d_model, true),
            layers: (0..dims.e_layers)
                .map(|l| EncoderLayer::new(init, &format!("pdm.long.encoder.{l}"), dims))
                .collect(),
            head: Linear::new(init, "pdm.long.head", dims.d_model, dims.horizon, true),
        }
    }

    pub fn forward(
        &self,
        folded: &Var,
        seq_len: usize,
        attention: &mut Vec<Tensor>,
    ) -> Result<Var> {
        let (b, n) = (folded.shape()[0], folded.shape()[3]);
        let merged = merge_batch_vars(folded)?;
        let conv = conv_within_period(&merged, &self.conv)?;
        let tokens_in = unfold_merged(&conv, seq_len)?.reshape(&[b, n, seq_len])?;
        let mut tokens = self.embedding.forward(&tokens_in)?;
        for layer in &self.layers {
            let (next, probs) = layer.forward(&tokens)?;
            attention.push(probs);
            tokens = next;
        }
        Ok(self.head.forward(&tokens)?.permute(&[0, 2, 1])?)
    }

    fn parameters(&self) -> Vec<Parameter> {
        let mut out = vec![self.conv.clone()];
        out.extend(self.embedding.parameters());
        for l in &self.layers {
            out.extend(l.parameters());
        }
        out.extend(self.head.parameters());
        out
    }
}

#[derive(Debug, Clone)]
pub struct Pdm {
    dims: PdmDims,
    pub short: ShortBranch,
    pub periodic: PeriodicBranch,
    pub long: LongBranch,
    /// `[k_max, 1]`, collapses the stacked period axis.
    pub fusion: Parameter,
}

impl Pdm {
    pub fn new(init: &mut Initializer, dims: PdmDims) -> Result<Self> {
        if dims.n_heads == 0 || !dims.d_model.is_multiple_of(dims.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                dims.d_model, dims.n_heads
            )));
        }
        if dims.k_max == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let short = ShortBranch::new(init, &dims);
        let periodic = PeriodicBranch::new(init, &dims);
        let long = LongBranch::new(init, &dims);
        let fusion = init.constant("pdm.fusion", &[dims.k_max, 1], 1.0 / dims.k_max as f64);
        Ok(Self {
            dims,
            short,
            periodic,
            long,
            fusion,
        })
    }

    pub fn dims(&self) -> &PdmDims {
        &self.dims
    }

    pub fn forward(&self, x: &Var) -> Result<Var> {
        Ok(self.forward_traced(x)?.0)
    }

    pub fn forward_traced(&self, x: &Var) -> Result<(Var, PdmTrace)> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.dims.seq_len || s[2] != self.dims.n_vars {
            return Err(Error::Shape {
                expected: vec![
                    s.first().copied().unwrap_or(1),
                    self.dims.seq_len,
                    self.dims.n_vars,
                ],
                found: s.to_vec(),
            });
        }
        let periods = detect_periods(x.value(), self.dims.k_max)?;
        self.forward_with_periods(x, periods)
    }

    /// Runs the branches on caller-supplied periods instead of detecting
    /// them from `x`.
    pub fn forward_with_periods(&self, x: &Var, periods: PeriodSet) -> Result<(Var, PdmTrace)> {
        let s = x.shape();
        let (b, seq, n) = (s[0], s[1], s[2]);
        if periods.len() > self.dims.k_max || periods.sequence_length != seq {
            return Err(Error::Config(format!(
                "period set of {} entries for S={} does not fit k_max={} and S={seq}",
                periods.len(),
                periods.sequence_length,
                self.dims.k_max
            )));
        }
        let horizon = self.dims.horizon;
        let mut attention = Vec::new();
        let mut branches = Vec::with_capacity(periods.len());
        let mut stacked = Vec::with_capacity(self.dims.k_max);
        for entry in &periods.entries {
            let folded = fold_var(x, entry.period, entry.frequency)?;
            let out = BranchOutputs {
                short: self.short.forward(&folded, seq)?,
                periodic: self.periodic.forward(&folded, seq)?,
                long: self.long.forward(&folded, seq, &mut attention)?,
            };
            let sum = out.short.add(&out.periodic)?.add(&out.long)?;
            stacked.push(sum.reshape(&[b, horizon, n, 1])?);
            branches.push(out);
        }
        while stacked.len() < self.dims.k_max {
            stacked.push(Var::constant(Tensor::zeros(&[b, horizon, n, 1])));
        }
        let fused = Var::concat(&stacked, 3)?
            .matmul(&self.fusion.var())?
            .reshape(&[b, horizon, n])?;
        Ok((
            fused,
            PdmTrace {
                periods,
                branches,
                attention,
            },
        ))
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = self.short.parameters();
        out.extend(self.periodic.parameters());
        out.extend(self.long.parameters());
        out.push(self.fusion.clone());
        out
    }
}
