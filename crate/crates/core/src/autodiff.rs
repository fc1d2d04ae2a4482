//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A forward pass builds a fresh graph of [`Var`] nodes; each node owns
//! its value and remembers the operation and parent nodes that produced
//! it. [`backward`] walks the graph in reverse topological order and
//! deposits gradients on every node that requires them. Leaves created
//! from a [`Parameter`] forward their gradient into the parameter's
//! accumulator, which persists across graphs until
//! [`Parameter::zero_grad`] is called.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::tensor::{
    gelu_derivative, layer_norm_forward, matmul_kernel, Conv1dGeom, Conv2dGeom, Padding, Result,
    Tensor, TensorError,
};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    PadZeros {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        padding: Padding,
        groups: usize,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        padding: Padding,
    },
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn parents(&self) -> Vec<&Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Softmax(a, _)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
            Op::Slice { x, .. } | Op::PadZeros { x, .. } => vec![x],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::Conv1d { x, kernel, .. } | Op::Conv2d { x, kernel, .. } => vec![x, kernel],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Slice { .. } => "slice",
            Op::PadZeros { .. } => "pad_zeros",
            Op::Concat { .. } => "concat",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

#[derive(Debug)]
struct Node {
    id: usize,
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: RefCell<Option<Tensor>>,
    param: Option<Parameter>,
}

/// A node in the computation graph.
#[derive(Debug, Clone)]
pub struct Var(Rc<Node>);

impl Var {
    fn from_op(value: Tensor, op: Op) -> Result<Var> {
        let value = value.check_finite(op.name())?;
        let requires_grad = op.parents().iter().any(|p| p.0.requires_grad);
        Ok(Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            op,
            requires_grad,
            grad: RefCell::new(None),
            param: None,
        })))
    }

    fn leaf(value: Tensor, requires_grad: bool, param: Option<Parameter>) -> Var {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            op: Op::Leaf,
            requires_grad,
            grad: RefCell::new(None),
            param,
        }))
    }

    /// An input that is not differentiated.
    pub fn constant(value: Tensor) -> Var {
        Var::leaf(value, false, None)
    }

    /// A leaf whose gradient is retained on the node after [`backward`].
    pub fn tracked(value: Tensor) -> Var {
        Var::leaf(value, true, None)
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Gradient deposited by the most recent [`backward`] through this graph.
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        Var::from_op(
            self.value().add(rhs.value())?,
            Op::Add(self.clone(), rhs.clone()),
        )
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        Var::from_op(
            self.value().sub(rhs.value())?,
            Op::Sub(self.clone(), rhs.clone()),
        )
    }

    /// Elementwise product; `rhs` may broadcast (including a `[1]` scalar).
    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        Var::from_op(
            self.value().mul(rhs.value())?,
            Op::Mul(self.clone(), rhs.clone()),
        )
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        Var::from_op(self.value().scale(c), Op::Scale(self.clone(), c))
    }

    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        Var::from_op(
            self.value().matmul(rhs.value())?,
            Op::MatMul(self.clone(), rhs.clone()),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        Var::from_op(self.value().reshape(shape)?, Op::Reshape(self.clone()))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        Var::from_op(
            self.value().permute(perm)?,
            Op::Permute(self.clone(), perm.to_vec()),
        )
    }

    pub fn transpose_last2(&self) -> Result<Var> {
        let r = self.shape().len();
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

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        Var::from_op(
            self.value().slice(axis, start, len)?,
            Op::Slice {
                x: self.clone(),
                axis,
                start,
            },
        )
    }

    pub fn pad_zeros(&self, axis: usize, new_len: usize) -> Result<Var> {
        Var::from_op(
            self.value().pad_zeros(axis, new_len)?,
            Op::PadZeros {
                x: self.clone(),
                axis,
            },
        )
    }

    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        Var::from_op(
            Tensor::concat(&values, axis)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn conv1d(&self, kernel: &Var, padding: Padding, groups: usize) -> Result<Var> {
        Var::from_op(
            self.value().conv1d(kernel.value(), padding, groups)?,
            Op::Conv1d {
                x: self.clone(),
                kernel: kernel.clone(),
                padding,
                groups,
            },
        )
    }

    pub fn conv2d(&self, kernel: &Var, padding: Padding) -> Result<Var> {
        Var::from_op(
            self.value().conv2d(kernel.value(), padding)?,
            Op::Conv2d {
                x: self.clone(),
                kernel: kernel.clone(),
                padding,
            },
        )
    }

    pub fn softmax(&self, axis: usize) -> Result<Var> {
        Var::from_op(self.value().softmax(axis)?, Op::Softmax(self.clone(), axis))
    }

    pub fn layer_norm(&self, axis: usize, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let (out, xhat, rstd) =
            layer_norm_forward(self.value(), axis, gain.value(), bias.value(), eps)?;
        Var::from_op(
            out,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                axis,
                xhat,
                rstd,
            },
        )
    }

    pub fn relu(&self) -> Result<Var> {
        Var::from_op(self.value().relu(), Op::Relu(self.clone()))
    }

    pub fn gelu(&self) -> Result<Var> {
        Var::from_op(self.value().gelu(), Op::Gelu(self.clone()))
    }

    pub fn sum(&self) -> Result<Var> {
        Var::from_op(
            Tensor::scalar(self.value().sum_all()),
            Op::Sum(self.clone()),
        )
    }

    pub fn mean(&self) -> Result<Var> {
        Var::from_op(
            Tensor::scalar(self.value().mean_all()),
            Op::Mean(self.clone()),
        )
    }

    /// Mean of squared differences.
    pub fn mse(&self, target: &Var) -> Result<Var> {
        let d = self.sub(target)?;
        d.mul(&d)?.mean()
    }
}

/// Gradients for each parent of `node`, given the gradient of its output.
fn local_grads(node: &Node, g: &Tensor) -> Result<Vec<Tensor>> {
    Ok(match &node.op {
        Op::Leaf => vec![],
        Op::Add(_, b) => vec![g.clone(), g.reduce_to(b.shape())?],
        Op::Sub(_, b) => vec![g.clone(), g.reduce_to(b.shape())?.scale(-1.0)],
        Op::Mul(a, b) => vec![g.mul(b.value())?, g.mul(a.value())?.reduce_to(b.shape())?],
        Op::Scale(_, c) => vec![g.scale(*c)],
        Op::MatMul(a, b) => {
            let ga = g.matmul(&b.value().transpose_last2()?)?;
            let gb = if b.shape().len() == 2 {
                // shared weight: fold batch into rows, then a^T g
                let k = b.shape()[0];
                let n = b.shape()[1];
                let rows = a.value().numel() / k;
                let mut out = vec![0.0; k * n];
                let at = a.value().reshape(&[rows, k])?.transpose_last2()?;
                matmul_kernel(at.data(), g.data(), &mut out, k, rows, n);
                Tensor::new(&[k, n], out)?
            } else {
                a.value().transpose_last2()?.matmul(g)?
            };
            vec![ga, gb]
        }
        Op::Reshape(a) => vec![g.reshape(a.shape())?],
        Op::Permute(_, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![g.permute(&inv)?]
        }
        Op::Slice { x, axis, start } => {
            let (outer, extent, inner) = x.value().split_axis(*axis, "slice")?;
            let len = g.shape()[*axis];
            let mut out = vec![0.0; x.value().numel()];
            for o in 0..outer {
                let dst = o * extent * inner + start * inner;
                out[dst..dst + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Tensor::new(x.shape(), out)?]
        }
        Op::PadZeros { x, axis } => vec![g.slice(*axis, 0, x.shape()[*axis])?],
        Op::Concat { parts, axis } => {
            let mut start = 0;
            let mut grads = Vec::with_capacity(parts.len());
            for p in parts {
                let len = p.shape()[*axis];
                grads.push(g.slice(*axis, start, len)?);
                start += len;
            }
            grads
        }
        Op::Conv1d {
            x,
            kernel,
            padding,
            groups,
        } => {
            let geo = Conv1dGeom::new(x.shape(), kernel.shape(), *padding, *groups)?;
            let (xv, kv) = (x.value().data(), kernel.value().data());
            let mut gx = vec![0.0; xv.len()];
            let mut gk = vec![0.0; kv.len()];
            for b in 0..geo.batch {
                for o in 0..geo.out_c {
                    let grp = o / geo.out_per_group;
                    let grow = &g.data()[(b * geo.out_c + o) * geo.out_len..][..geo.out_len];
                    for ci in 0..geo.in_per_group {
                        let c = grp * geo.in_per_group + ci;
                        let xoff = (b * geo.in_c + c) * geo.len;
                        let koff = (o * geo.in_per_group + ci) * geo.width;
                        for j in 0..geo.width {
                            let (t0, t1) = geo.valid_range(j);
                            let w = kv[koff + j];
                            let mut acc = 0.0;
                            for t in t0..t1 {
                                let xi = xoff + t + j - geo.lead;
                                gx[xi] += w * grow[t];
                                acc += xv[xi] * grow[t];
                            }
                            gk[koff + j] += acc;
                        }
                    }
                }
            }
            vec![
                Tensor::new(x.shape(), gx)?,
                Tensor::new(kernel.shape(), gk)?,
            ]
        }
        Op::Conv2d { x, kernel, padding } => {
            let geo = Conv2dGeom::new(x.shape(), kernel.shape(), *padding)?;
            let (xv, kv) = (x.value().data(), kernel.value().data());
            let mut gx = vec![0.0; xv.len()];
            let mut gk = vec![0.0; kv.len()];
            let (hw, ohw) = (geo.h * geo.w, geo.out_h * geo.out_w);
            for b in 0..geo.batch {
                for o in 0..geo.out_c {
                    let gplane = &g.data()[(b * geo.out_c + o) * ohw..][..ohw];
                    for c in 0..geo.in_c {
                        let xoff = (b * geo.in_c + c) * hw;
                        let koff = (o * geo.in_c + c) * geo.kh * geo.kw;
                        for i in 0..geo.kh {
                            let (y0, y1) = geo.h_range(i);
                            for j in 0..geo.kw {
                                let (x0, x1) = geo.w_range(j);
                                let w = kv[koff + i * geo.kw + j];
                                let mut acc = 0.0;
                                for y in y0..y1 {
                                    let src = xoff + (y + i - geo.lead_h) * geo.w;
                                    for xx in x0..x1 {
                                        let xi = src + xx + j - geo.lead_w;
                                        let gv = gplane[y * geo.out_w + xx];
                                        gx[xi] += w * gv;
                                        acc += xv[xi] * gv;
                                    }
                                }
                                gk[koff + i * geo.kw + j] += acc;
                            }
                        }
                    }
                }
            }
            vec![
                Tensor::new(x.shape(), gx)?,
                Tensor::new(kernel.shape(), gk)?,
            ]
        }
        Op::Softmax(x, axis) => {
            let y = &node.value;
            let (outer, extent, inner) = y.split_axis(*axis, "softmax")?;
            let mut gx = vec![0.0; y.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * extent + j) * inner + i;
                    let dot: f64 = (0..extent).map(|j| g.data()[at(j)] * y.data()[at(j)]).sum();
                    for j in 0..extent {
                        gx[at(j)] = y.data()[at(j)] * (g.data()[at(j)] - dot);
                    }
                }
            }
            vec![Tensor::new(x.shape(), gx)?]
        }
        Op::LayerNorm {
            x,
            gain,
            axis,
            xhat,
            rstd,
            ..
        } => {
            let (outer, extent, inner) = xhat.split_axis(*axis, "layer_norm")?;
            let gv = gain.value().data();
            let mut gx = vec![0.0; xhat.numel()];
            let mut ggain = vec![0.0; extent];
            let mut gbias = vec![0.0; extent];
            let n = extent as f64;
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * extent + j) * inner + i;
                    let r = rstd[o * inner + i];
                    let mut sum_gh = 0.0;
                    let mut sum_gh_xhat = 0.0;
                    for j in 0..extent {
                        let gy = g.data()[at(j)];
                        let h = xhat.data()[at(j)];
                        ggain[j] += gy * h;
                        gbias[j] += gy;
                        let gh = gy * gv[j];
                        sum_gh += gh;
                        sum_gh_xhat += gh * h;
                    }
                    for j in 0..extent {
                        let gh = g.data()[at(j)] * gv[j];
                        let h = xhat.data()[at(j)];
                        gx[at(j)] = r / n * (n * gh - sum_gh - h * sum_gh_xhat);
                    }
                }
            }
            vec![
                Tensor::new(x.shape(), gx)?,
                Tensor::new(&[extent], ggain)?,
                Tensor::new(&[extent], gbias)?,
            ]
        }
        Op::Relu(x) => {
            let data = x
                .value()
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                .collect();
            vec![Tensor::new(x.shape(), data)?]
        }
        Op::Gelu(x) => {
            let data = x
                .value()
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| gv * gelu_derivative(v))
                .collect();
            vec![Tensor::new(x.shape(), data)?]
        }
        Op::Sum(x) => vec![Tensor::full(x.shape(), g.item())],
        Op::Mean(x) => vec![Tensor::full(x.shape(), g.item() / x.value().numel() as f64)],
    })
}

/// Back-propagates from a scalar `loss`.
///
/// Every reachable node with `requires_grad` receives `d(loss)/d(node)`;
/// parameter leaves add theirs into [`Parameter::grad`].
pub fn backward(loss: &Var) -> Result<()> {
    if loss.value().numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
    }
    if !loss.requires_grad() {
        return Ok(());
    }
    let order = topo_order(loss);
    for node in &order {
        node.0.grad.replace(None);
    }
    loss.0.grad.replace(Some(Tensor::ones(loss.shape())));
    for node in order.iter().rev() {
        let Some(g) = node.0.grad.borrow().clone() else {
            continue;
        };
        if let Some(p) = &node.0.param {
            p.accumulate(&g)?;
        }
        let parents = node.0.op.parents();
        if parents.is_empty() {
            continue;
        }
        let grads = local_grads(&node.0, &g)?;
        for (parent, pg) in parents.into_iter().zip(grads) {
            if !parent.0.requires_grad {
                continue;
            }
            let pg = pg.check_finite("backward")?;
            let mut slot = parent.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.add_assign(&pg)?,
                None => *slot = Some(pg),
            }
        }
    }
    Ok(())
}

/// Nodes reachable from `root` that require grad, parents before children.
fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    // (node, children pushed?)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.0.id) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in node.0.op.parents() {
            if p.0.requires_grad && !seen.contains(&p.0.id) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

#[derive(Debug)]
struct ParamInner {
    name: String,
    value: RefCell<Tensor>,
    grad: RefCell<Tensor>,
}

/// A named learnable tensor with a persistent gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter(Rc<ParamInner>);

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter(Rc::new(ParamInner {
            name: name.into(),
            value: RefCell::new(value),
            grad: RefCell::new(grad),
        }))
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        self.0.value.borrow()
    }

    pub fn grad(&self) -> Ref<'_, Tensor> {
        self.0.grad.borrow()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    /// Replaces the value; the shape must not change.
    pub fn set_value(&self, value: Tensor) -> Result<()> {
        let mut slot = self.0.value.borrow_mut();
        if slot.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn update(&self, f: impl FnOnce(&mut Tensor)) {
        f(&mut self.0.value.borrow_mut());
    }

    pub fn zero_grad(&self) {
        let mut g = self.0.grad.borrow_mut();
        g.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    fn accumulate(&self, g: &Tensor) -> Result<()> {
        self.0.grad.borrow_mut().add_assign(g)
    }

    /// A graph leaf holding a snapshot of the current value.
    pub fn var(&self) -> Var {
        Var::leaf(self.0.value.borrow().clone(), true, Some(self.clone()))
    }

    pub fn ptr_eq(&self, other: &Parameter) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}
