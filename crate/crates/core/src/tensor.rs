//! Dense row-major `f64` tensors and the forward kernels used by the
//! autodiff layer.
//!
//! Every kernel here is a pure function of its inputs. Gradient tracking
//! lives in [`crate::autodiff`]; this module only knows about values.

use std::fmt;

use thiserror::Error;

/// Errors raised by tensor kernels and the autodiff graph.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error(
        "reshape: cannot reshape {from:?} ({from_len} elements) into {to:?} ({to_len} elements)"
    )]
    ReshapeCount {
        from: Vec<usize>,
        to: Vec<usize>,
        from_len: usize,
        to_len: usize,
    },
    #[error("{op}: kernel {kernel:?} is wider than padded input {input:?}")]
    KernelTooWide {
        op: &'static str,
        kernel: Vec<usize>,
        input: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Padding mode for convolutions.
///
/// `Same` pads `(k - 1) / 2` on the leading side and the remainder on the
/// trailing side, so odd kernels are centred and output length equals input
/// length. `Valid` applies no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    fn amounts(self, k: usize) -> (usize, usize) {
        match self {
            Padding::Same => {
                let lead = (k - 1) / 2;
                (lead, k - 1 - lead)
            }
            Padding::Valid => (0, 0),
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("shape {shape:?} must be non-empty with positive extents"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full: invalid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(values: &[f64]) -> Self {
        Self::new(&[values.len()], values.to_vec()).expect("from_slice: empty slice")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Element at a multi-index. Panics on a bad index; intended for tests
    /// and diagnostics.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.ndim(), "index rank");
        let off: usize = index.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item on non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// In-place `self += rhs` for equal shapes.
    pub fn add_assign(&mut self, rhs: &Tensor) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add_assign",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    /// Elementwise binary op where `rhs` broadcasts onto `self`.
    ///
    /// `rhs` is right-aligned against `self`; each of its extents must be 1
    /// or equal to the matching extent of `self`. Only the right operand
    /// broadcasts.
    fn zip_broadcast(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let map = broadcast_map(&self.shape, &rhs.shape, op)?;
        let data = match map {
            BroadcastMap::Same => self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            BroadcastMap::Scalar => {
                let b = rhs.data[0];
                self.data.iter().map(|&a| f(a, b)).collect()
            }
            BroadcastMap::Suffix(n) => self
                .data
                .iter()
                .enumerate()
                .map(|(i, &a)| f(a, rhs.data[i % n]))
                .collect(),
            BroadcastMap::General(idx) => self
                .data
                .iter()
                .zip(idx)
                .map(|(&a, j)| f(a, rhs.data[j]))
                .collect(),
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Sums `self` down to `target` shape, the adjoint of broadcasting
    /// `target` onto `self.shape()`.
    pub fn reduce_to(&self, target: &[usize]) -> Result<Tensor> {
        let map = broadcast_map(&self.shape, target, "reduce_to")?;
        let n: usize = target.iter().product();
        let mut out = vec![0.0; n];
        match map {
            BroadcastMap::Same => out.copy_from_slice(&self.data),
            BroadcastMap::Scalar => out[0] = self.data.iter().sum(),
            BroadcastMap::Suffix(m) => {
                for (i, &v) in self.data.iter().enumerate() {
                    out[i % m] += v;
                }
            }
            BroadcastMap::General(idx) => {
                for (&v, j) in self.data.iter().zip(idx) {
                    out[j] += v;
                }
            }
        }
        Tensor::new(target, out)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        self.map(gelu_scalar)
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.numel() as f64
    }

    // ---- shape manipulation -------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(TensorError::ReshapeCount {
                from: self.shape.clone(),
                to: shape.to_vec(),
                from_len: self.numel(),
                to_len: n,
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.ndim();
        let mut seen = vec![false; rank];
        if perm.len() != rank {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("permutation {perm:?} has wrong length for rank {rank}"),
            });
        }
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(TensorError::Invalid {
                    op: "permute",
                    msg: format!("{perm:?} is not a permutation of 0..{rank}"),
                });
            }
            seen[p] = true;
        }
        let in_strides = self.strides();
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..self.numel() {
            data.push(self.data[off]);
            // odometer increment over the output index
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let r = self.ndim();
        if r < 2 {
            return Err(TensorError::AxisOutOfRange {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let (outer, extent, inner) = self.split_axis(axis, "slice")?;
        if len == 0 || start + len > extent {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} exceeds extent {extent}", start + len),
            });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    /// Appends zeros along `axis` until its extent is `new_len`.
    pub fn pad_zeros(&self, axis: usize, new_len: usize) -> Result<Tensor> {
        let (outer, extent, inner) = self.split_axis(axis, "pad_zeros")?;
        if new_len < extent {
            return Err(TensorError::Invalid {
                op: "pad_zeros",
                msg: format!("target length {new_len} shorter than extent {extent}"),
            });
        }
        let mut data = vec![0.0; outer * new_len * inner];
        for o in 0..outer {
            let src = &self.data[o * extent * inner..(o + 1) * extent * inner];
            data[o * new_len * inner..o * new_len * inner + extent * inner].copy_from_slice(src);
        }
        let mut shape = self.shape.clone();
        shape[axis] = new_len;
        Ok(Tensor { shape, data })
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let (outer, _, inner) = first.split_axis(axis, "concat")?;
        let mut total = 0;
        for p in parts {
            let same_rank = p.ndim() == first.ndim();
            let same_other = same_rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same_other {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            total += p.shape[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor { shape, data })
    }

    /// `(outer, extent, inner)` sizes around `axis`.
    pub(crate) fn split_axis(
        &self,
        axis: usize,
        op: &'static str,
    ) -> Result<(usize, usize, usize)> {
        if axis >= self.ndim() {
            return Err(TensorError::AxisOutOfRange {
                op,
                axis,
                rank: self.ndim(),
            });
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    // ---- linear algebra ------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `rhs` is either rank 2 (shared across every leading batch index of
    /// `self`) or has exactly the same leading batch extents as `self`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: self.shape.clone(),
            right: rhs.shape.clone(),
        };
        if self.ndim() < 2 || rhs.ndim() < 2 {
            return Err(mismatch());
        }
        let r = self.ndim();
        let (m, k) = (self.shape[r - 2], self.shape[r - 1]);
        let rr = rhs.ndim();
        let (k2, n) = (rhs.shape[rr - 2], rhs.shape[rr - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch: usize = self.shape[..r - 2].iter().product();
        let shared = rr == 2;
        if !shared && rhs.shape[..rr - 2] != self.shape[..r - 2] {
            return Err(mismatch());
        }
        let mut out = vec![0.0; batch * m * n];
        for b in 0..batch {
            let a = &self.data[b * m * k..(b + 1) * m * k];
            let w = if shared {
                &rhs.data[..]
            } else {
                &rhs.data[b * k * n..(b + 1) * k * n]
            };
            let o = &mut out[b * m * n..(b + 1) * m * n];
            matmul_kernel(a, w, o, m, k, n);
        }
        let mut shape = self.shape[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(Tensor { shape, data: out })
    }

    // ---- convolution ---------------------------------------------------

    /// Grouped 1-D cross-correlation.
    ///
    /// `self` is `[batch, channels, len]`, `kernel` is
    /// `[out_channels, channels / groups, width]`. The kernel is not
    /// flipped: `out[b, o, t] = sum_{c, j} kernel[o, c, j] * x[b, c, t + j - lead]`.
    pub fn conv1d(&self, kernel: &Tensor, padding: Padding, groups: usize) -> Result<Tensor> {
        let g = Conv1dGeom::new(self.shape(), kernel.shape(), padding, groups)?;
        let mut out = vec![0.0; g.batch * g.out_c * g.out_len];
        for b in 0..g.batch {
            for o in 0..g.out_c {
                let grp = o / g.out_per_group;
                for ci in 0..g.in_per_group {
                    let c = grp * g.in_per_group + ci;
                    let xrow = &self.data[(b * g.in_c + c) * g.len..][..g.len];
                    let krow = &kernel.data[(o * g.in_per_group + ci) * g.width..][..g.width];
                    let orow = &mut out[(b * g.out_c + o) * g.out_len..][..g.out_len];
                    for (j, &kv) in krow.iter().enumerate() {
                        let (t0, t1) = g.valid_range(j);
                        for t in t0..t1 {
                            orow[t] += kv * xrow[t + j - g.lead];
                        }
                    }
                }
            }
        }
        Tensor::new(&[g.batch, g.out_c, g.out_len], out)
    }

    /// 2-D cross-correlation; `self` is `[batch, channels, h, w]`,
    /// `kernel` is `[out_channels, channels, kh, kw]`.
    pub fn conv2d(&self, kernel: &Tensor, padding: Padding) -> Result<Tensor> {
        let g = Conv2dGeom::new(self.shape(), kernel.shape(), padding)?;
        let mut out = vec![0.0; g.batch * g.out_c * g.out_h * g.out_w];
        for b in 0..g.batch {
            for o in 0..g.out_c {
                let oplane = &mut out[(b * g.out_c + o) * g.out_h * g.out_w..][..g.out_h * g.out_w];
                for c in 0..g.in_c {
                    let xplane = &self.data[(b * g.in_c + c) * g.h * g.w..][..g.h * g.w];
                    let kplane = &kernel.data[(o * g.in_c + c) * g.kh * g.kw..][..g.kh * g.kw];
                    for i in 0..g.kh {
                        let (y0, y1) = valid_span(g.out_h, g.h, g.lead_h, i);
                        for j in 0..g.kw {
                            let kv = kplane[i * g.kw + j];
                            let (x0, x1) = valid_span(g.out_w, g.w, g.lead_w, j);
                            for y in y0..y1 {
                                let src = (y + i - g.lead_h) * g.w;
                                for x in x0..x1 {
                                    oplane[y * g.out_w + x] += kv * xplane[src + x + j - g.lead_w];
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(&[g.batch, g.out_c, g.out_h, g.out_w], out)
    }

    // ---- normalisation -------------------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, extent, inner) = self.split_axis(axis, "softmax")?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * extent + j) * inner + i;
                let max = (0..extent)
                    .map(|j| self.data[at(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..extent {
                    let e = (self.data[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..extent {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Layer normalisation along `axis` with per-position `gain` and `bias`
    /// (both shaped `[extent]`). Uses the population variance.
    pub fn layer_norm(
        &self,
        axis: usize,
        gain: &Tensor,
        bias: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        Ok(layer_norm_forward(self, axis, gain, bias, eps)?.0)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

enum BroadcastMap {
    Same,
    Scalar,
    /// rhs equals the trailing block of lhs with this many elements
    Suffix(usize),
    General(Vec<usize>),
}

fn broadcast_map(lhs: &[usize], rhs: &[usize], op: &'static str) -> Result<BroadcastMap> {
    if lhs == rhs {
        return Ok(BroadcastMap::Same);
    }
    let rn: usize = rhs.iter().product();
    if rn == 1 {
        return Ok(BroadcastMap::Scalar);
    }
    let mismatch = || TensorError::ShapeMismatch {
        op,
        left: lhs.to_vec(),
        right: rhs.to_vec(),
    };
    if rhs.len() > lhs.len() {
        return Err(mismatch());
    }
    let off = lhs.len() - rhs.len();
    for (i, &d) in rhs.iter().enumerate() {
        if d != 1 && d != lhs[off + i] {
            return Err(mismatch());
        }
    }
    // strip leading ones from rhs, then check whether it is an exact suffix
    let first = rhs.iter().position(|&d| d != 1).unwrap_or(rhs.len());
    if rhs[first..] == lhs[lhs.len() - (rhs.len() - first)..] {
        return Ok(BroadcastMap::Suffix(rn));
    }
    let rstr = strides_of(rhs);
    let mut eff = vec![0usize; lhs.len()];
    for (i, &d) in rhs.iter().enumerate() {
        if d != 1 {
            eff[off + i] = rstr[i];
        }
    }
    let total: usize = lhs.iter().product();
    let mut idx = vec![0usize; lhs.len()];
    let mut pos = 0usize;
    let mut map = Vec::with_capacity(total);
    for _ in 0..total {
        map.push(pos);
        for ax in (0..lhs.len()).rev() {
            idx[ax] += 1;
            pos += eff[ax];
            if idx[ax] < lhs[ax] {
                break;
            }
            pos -= eff[ax] * lhs[ax];
            idx[ax] = 0;
        }
    }
    Ok(BroadcastMap::General(map))
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Output rows `[lo, hi)` that read an in-bounds input element at kernel
/// tap `tap`.
fn valid_span(out_len: usize, in_len: usize, lead: usize, tap: usize) -> (usize, usize) {
    // input index = out + tap - lead must lie in [0, in_len)
    let lo = lead.saturating_sub(tap);
    let hi = (in_len + lead).saturating_sub(tap).min(out_len);
    (lo, hi.max(lo))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv1dGeom {
    pub batch: usize,
    pub in_c: usize,
    pub len: usize,
    pub out_c: usize,
    pub in_per_group: usize,
    pub out_per_group: usize,
    pub width: usize,
    pub lead: usize,
    pub out_len: usize,
}

impl Conv1dGeom {
    pub fn new(x: &[usize], k: &[usize], padding: Padding, groups: usize) -> Result<Self> {
        if x.len() != 3 || k.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                left: x.to_vec(),
                right: k.to_vec(),
            });
        }
        let (batch, in_c, len) = (x[0], x[1], x[2]);
        let (out_c, kin, width) = (k[0], k[1], k[2]);
        if groups == 0 || in_c % groups != 0 || out_c % groups != 0 || kin * groups != in_c {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                left: x.to_vec(),
                right: k.to_vec(),
            });
        }
        let (lead, trail) = padding.amounts(width);
        if width > len + lead + trail {
            return Err(TensorError::KernelTooWide {
                op: "conv1d",
                kernel: k.to_vec(),
                input: x.to_vec(),
            });
        }
        Ok(Self {
            batch,
            in_c,
            len,
            out_c,
            in_per_group: kin,
            out_per_group: out_c / groups,
            width,
            lead,
            out_len: len + lead + trail - width + 1,
        })
    }

    pub fn valid_range(&self, tap: usize) -> (usize, usize) {
        valid_span(self.out_len, self.len, self.lead, tap)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2dGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub lead_h: usize,
    pub lead_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeom {
    pub fn new(x: &[usize], k: &[usize], padding: Padding) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 || x[1] != k[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: x.to_vec(),
                right: k.to_vec(),
            });
        }
        let (kh, kw) = (k[2], k[3]);
        let (lh, th) = padding.amounts(kh);
        let (lw, tw) = padding.amounts(kw);
        if kh > x[2] + lh + th || kw > x[3] + lw + tw {
            return Err(TensorError::KernelTooWide {
                op: "conv2d",
                kernel: k.to_vec(),
                input: x.to_vec(),
            });
        }
        Ok(Self {
            batch: x[0],
            in_c: x[1],
            h: x[2],
            w: x[3],
            out_c: k[0],
            kh,
            kw,
            lead_h: lh,
            lead_w: lw,
            out_h: x[2] + lh + th - kh + 1,
            out_w: x[3] + lw + tw - kw + 1,
        })
    }

    pub fn h_range(&self, tap: usize) -> (usize, usize) {
        valid_span(self.out_h, self.h, self.lead_h, tap)
    }

    pub fn w_range(&self, tap: usize) -> (usize, usize) {
        valid_span(self.out_w, self.w, self.lead_w, tap)
    }
}

/// Returns `(output, normalised input, reciprocal std per row)`.
pub(crate) fn layer_norm_forward(
    x: &Tensor,
    axis: usize,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    if eps <= 0.0 {
        return Err(TensorError::Invalid {
            op: "layer_norm",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    let (outer, extent, inner) = x.split_axis(axis, "layer_norm")?;
    if gain.shape() != [extent] || bias.shape() != [extent] {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape.clone(),
            right: gain.shape.clone(),
        });
    }
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * extent + j) * inner + i;
            let mean = (0..extent).map(|j| x.data[at(j)]).sum::<f64>() / extent as f64;
            let var = (0..extent)
                .map(|j| (x.data[at(j)] - mean).powi(2))
                .sum::<f64>()
                / extent as f64;
            let r = 1.0 / (var + eps).sqrt();
            for j in 0..extent {
                let h = (x.data[at(j)] - mean) * r;
                xhat[at(j)] = h;
                out[at(j)] = h * gain.data[j] + bias.data[j];
            }
            rstd.push(r);
        }
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        Tensor::new(x.shape(), xhat)?,
        rstd,
    ))
}
