//! Forward definitions and vector-Jacobian products.
//!
//! Each vector-Jacobian product is composed from the public tensor operations,
//! so when the upstream gradient or saved inputs are tracked the result is
//! tracked too.

use std::cell::Cell;
use std::rc::Rc;

use super::kernels::{self, ConvDims};
use super::tensor::{numel, Conv2dSpec, Tensor};
use super::{AutodiffError, Result};

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Conv2d(Tensor, Tensor, Conv2dSpec),
    ConvInputGrad(Tensor, Tensor, Conv2dSpec),
    ConvWeightGrad(Tensor, Tensor, Conv2dSpec),
    Relu(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Power(Tensor, f64),
    SafeRecip(Tensor),
    Sum(Tensor),
    SumTrailing(Tensor, usize),
    ExpandTrailing(Tensor, Vec<usize>),
    SumLeading(Tensor),
    TileLeading(Tensor),
    Softmax(Tensor, usize),
    L2Norm(Tensor),
    UnitVec(Tensor),
    Reshape(Tensor),
    Gather(Tensor, Rc<[usize]>),
    ScatterAdd(Tensor, Rc<[usize]>),
    Concat(Vec<Tensor>, usize),
    SgdUpdate { param: Tensor, grad: Tensor, lr: f64 },
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

fn any_tracked(ts: &[&Tensor]) -> bool {
    ts.iter().any(|t| t.is_tracked())
}

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Disables graph recording on this thread while alive.
pub(crate) struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub(crate) fn new() -> NoGradGuard {
        NoGradGuard { prev: NO_GRAD.with(|f| f.replace(true)) }
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD.with(|f| f.set(self.prev));
    }
}

fn record(tracked: bool, op: impl FnOnce() -> Op) -> Option<Op> {
    if tracked && !NO_GRAD.with(Cell::get) {
        Some(op())
    } else {
        None
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect()
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.values().iter().map(|&x| f(x)).collect()
}

fn shape4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(shape_err(op, format!("expected rank-4 tensor, got {s:?}"))),
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let op = record(any_tracked(&[self, other]), || Op::Add(self.clone(), other.clone()));
        Tensor::from_op(self.shape().to_vec(), zip_map(self, other, |a, b| a + b), op, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let op = record(any_tracked(&[self, other]), || Op::Sub(self.clone(), other.clone()));
        Tensor::from_op(self.shape().to_vec(), zip_map(self, other, |a, b| a - b), op, "sub")
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let op = record(any_tracked(&[self, other]), || Op::Mul(self.clone(), other.clone()));
        Tensor::from_op(self.shape().to_vec(), zip_map(self, other, |a, b| a * b), op, "mul")
    }

    /// Elementwise quotient.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("div", self, other)?;
        let op = record(any_tracked(&[self, other]), || Op::Div(self.clone(), other.clone()));
        Tensor::from_op(self.shape().to_vec(), zip_map(self, other, |a, b| a / b), op, "div")
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        let op = record(self.is_tracked(), || Op::Scale(self.clone(), s));
        Tensor::from_op(self.shape().to_vec(), map(self, |a| a * s), op, "scale")
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        let op = record(self.is_tracked(), || Op::AddScalar(self.clone()));
        Tensor::from_op(self.shape().to_vec(), map(self, |a| a + s), op, "add_scalar")
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = match (self.shape(), other.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (a, b) => return Err(shape_err("matmul", format!("{a:?} x {b:?}"))),
        };
        let op = record(any_tracked(&[self, other]), || Op::MatMul(self.clone(), other.clone()));
        Tensor::from_op(vec![m, n], kernels::matmul(self.values(), other.values(), m, k, n), op, "matmul")
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let [m, n] = match *self.shape() {
            [m, n] => [m, n],
            ref s => return Err(shape_err("transpose", format!("expected matrix, got {s:?}"))),
        };
        let v = self.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let op = record(self.is_tracked(), || Op::Transpose(self.clone()));
        Tensor::from_op(vec![n, m], out, op, "transpose")
    }

    /// Cross-correlation of `[N,C,H,W]` input with `[O,C,KH,KW]` kernel.
    pub fn conv2d(&self, kernel: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
        let d = ConvDims::new(shape4("conv2d", self)?, shape4("conv2d", kernel)?, spec)
            .ok_or_else(|| shape_err("conv2d", format!("input {:?} kernel {:?}", self.shape(), kernel.shape())))?;
        let op = record(any_tracked(&[self, kernel]), || Op::Conv2d(self.clone(), kernel.clone(), spec));
        Tensor::from_op(vec![d.n, d.o, d.oh, d.ow], kernels::conv2d(self.values(), kernel.values(), &d), op, "conv2d")
    }

    /// Gradient of a convolution w.r.t. its input, given the output gradient `self`.
    pub(crate) fn conv2d_input_grad(&self, kernel: &Tensor, input_hw: [usize; 2], spec: Conv2dSpec) -> Result<Tensor> {
        let [n, o, _, _] = shape4("conv2d_input_grad", self)?;
        let [ko, c, kh, kw] = shape4("conv2d_input_grad", kernel)?;
        let d = ConvDims::new([n, c, input_hw[0], input_hw[1]], [ko, c, kh, kw], spec)
            .filter(|d| d.o == o && [d.oh, d.ow] == self.shape()[2..])
            .ok_or_else(|| shape_err("conv2d_input_grad", format!("{:?} / {:?}", self.shape(), kernel.shape())))?;
        let op = record(any_tracked(&[self, kernel]), || Op::ConvInputGrad(self.clone(), kernel.clone(), spec));
        Tensor::from_op(
            vec![n, c, input_hw[0], input_hw[1]],
            kernels::conv2d_input_grad(self.values(), kernel.values(), &d),
            op,
            "conv2d_input_grad",
        )
    }

    /// Gradient of a convolution w.r.t. its kernel; `self` is the input, `grad` the output gradient.
    pub(crate) fn conv2d_weight_grad(&self, grad: &Tensor, kernel_hw: [usize; 2], spec: Conv2dSpec) -> Result<Tensor> {
        let [n, c, h, w] = shape4("conv2d_weight_grad", self)?;
        let [gn, o, _, _] = shape4("conv2d_weight_grad", grad)?;
        let d = ConvDims::new([n, c, h, w], [o, c, kernel_hw[0], kernel_hw[1]], spec)
            .filter(|d| gn == n && [d.oh, d.ow] == grad.shape()[2..])
            .ok_or_else(|| shape_err("conv2d_weight_grad", format!("{:?} / {:?}", self.shape(), grad.shape())))?;
        let op = record(any_tracked(&[self, grad]), || Op::ConvWeightGrad(self.clone(), grad.clone(), spec));
        Tensor::from_op(
            vec![o, c, kernel_hw[0], kernel_hw[1]],
            kernels::conv2d_weight_grad(self.values(), grad.values(), &d),
            op,
            "conv2d_weight_grad",
        )
    }

    pub fn relu(&self) -> Result<Tensor> {
        let op = record(self.is_tracked(), || Op::Relu(self.clone()));
        Tensor::from_op(self.shape().to_vec(), map(self, |a| a.max(0.0)), op, "relu")
    }

    pub fn exp(&self) -> Result<Tensor> {
        let op = record(self.is_tracked(), || Op::Exp(self.clone()));
        Tensor::from_op(self.shape().to_vec(), map(self, f64::exp), op, "exp")
    }

    pub fn log(&self) -> Result<Tensor> {
        let op = record(self.is_tracked(), || Op::Log(self.clone()));
        Tensor::from_op(self.shape().to_vec(), map(self, f64::ln), op, "log")
    }

    /// Elementwise `x^p` for a constant exponent.
    pub fn powf(&self, p: f64) -> Result<Tensor> {
        let op = record(self.is_tracked(), || Op::Power(self.clone(), p));
        Tensor::from_op(self.shape().to_vec(), map(self, |a| a.powf(p)), op, "power")
    }

    /// `1/x`, with `0` mapped to `0`.
    pub(crate) fn safe_recip(&self) -> Result<Tensor> {
        let op = record(self.is_tracked(), || Op::SafeRecip(self.clone()));
        Tensor::from_op(self.shape().to_vec(), map(self, |a| if a == 0.0 { 0.0 } else { 1.0 / a }), op, "safe_recip")
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let op = record(self.is_tracked(), || Op::Sum(self.clone()));
        Tensor::from_op(vec![], vec![self.values().iter().sum()], op, "sum")
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel().max(1) as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sums out the last `axes` dimensions.
    pub fn sum_trailing(&self, axes: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axes > rank {
            return Err(shape_err("sum_trailing", format!("cannot reduce {axes} axes of {:?}", self.shape())));
        }
        let outer = self.shape()[..rank - axes].to_vec();
        let inner = numel(&self.shape()[rank - axes..]);
        let out = if inner == 0 {
            vec![0.0; numel(&outer)]
        } else {
            self.values().chunks(inner).map(|c| c.iter().sum()).collect()
        };
        let op = record(self.is_tracked(), || Op::SumTrailing(self.clone(), axes));
        Tensor::from_op(outer, out, op, "sum_trailing")
    }

    /// Repeats every element over new trailing dimensions `dims`.
    pub fn expand_trailing(&self, dims: &[usize]) -> Result<Tensor> {
        let inner = numel(dims);
        let mut shape = self.shape().to_vec();
        shape.extend_from_slice(dims);
        let mut out = Vec::with_capacity(self.numel() * inner);
        for &v in self.values() {
            out.extend(std::iter::repeat_n(v, inner));
        }
        let op = record(self.is_tracked(), || Op::ExpandTrailing(self.clone(), dims.to_vec()));
        Tensor::from_op(shape, out, op, "expand_trailing")
    }

    /// Sums over the leading axis.
    pub fn sum_leading(&self) -> Result<Tensor> {
        let Some((&lead, rest)) = self.shape().split_first() else {
            return Err(shape_err("sum_leading", "rank-0 tensor".into()));
        };
        let inner = numel(rest);
        let mut out = vec![0.0; inner];
        for i in 0..lead {
            for (o, v) in out.iter_mut().zip(&self.values()[i * inner..(i + 1) * inner]) {
                *o += v;
            }
        }
        let op = record(self.is_tracked(), || Op::SumLeading(self.clone()));
        Tensor::from_op(rest.to_vec(), out, op, "sum_leading")
    }

    /// Stacks `n` copies along a new leading axis.
    pub fn tile_leading(&self, n: usize) -> Result<Tensor> {
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape());
        let mut out = Vec::with_capacity(n * self.numel());
        for _ in 0..n {
            out.extend_from_slice(self.values());
        }
        let op = record(self.is_tracked(), || Op::TileLeading(self.clone()));
        Tensor::from_op(shape, out, op, "tile_leading")
    }

    /// Softmax over the flattened last `axes` dimensions, with max subtraction.
    pub fn softmax_trailing(&self, axes: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axes == 0 || axes > rank {
            return Err(shape_err("softmax", format!("cannot normalize {axes} axes of {:?}", self.shape())));
        }
        let inner = numel(&self.shape()[rank - axes..]);
        let mut out = Vec::with_capacity(self.numel());
        for chunk in self.values().chunks(inner) {
            let m = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for &v in chunk {
                let e = (v - m).exp();
                z += e;
                out.push(e);
            }
            for o in &mut out[start..] {
                *o /= z;
            }
        }
        let op = record(self.is_tracked(), || Op::Softmax(self.clone(), axes));
        Tensor::from_op(self.shape().to_vec(), out, op, "softmax")
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&self) -> Result<Tensor> {
        let Some((&last, outer)) = self.shape().split_last() else {
            return Err(shape_err("l2_norm", "rank-0 tensor".into()));
        };
        let out = if last == 0 {
            vec![0.0; numel(outer)]
        } else {
            self.values().chunks(last).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
        };
        let op = record(self.is_tracked(), || Op::L2Norm(self.clone()));
        Tensor::from_op(outer.to_vec(), out, op, "l2_norm")
    }

    /// `x / ||x||` over the last axis; zero vectors map to zero.
    pub(crate) fn unit_vec(&self) -> Result<Tensor> {
        let last = *self.shape().last().ok_or_else(|| shape_err("unit_vec", "rank-0 tensor".into()))?;
        let mut out = Vec::with_capacity(self.numel());
        if last > 0 {
            for c in self.values().chunks(last) {
                let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                out.extend(c.iter().map(|v| if n == 0.0 { 0.0 } else { v / n }));
            }
        }
        let op = record(self.is_tracked(), || Op::UnitVec(self.clone()));
        Tensor::from_op(self.shape().to_vec(), out, op, "unit_vec")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape())));
        }
        let op = record(self.is_tracked(), || Op::Reshape(self.clone()));
        Tensor::from_op(shape.to_vec(), self.to_vec(), op, "reshape")
    }

    /// `out[i] = self.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, index: Rc<[usize]>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != index.len() {
            return Err(shape_err("gather", format!("{} indices for shape {shape:?}", index.len())));
        }
        let v = self.values();
        let mut out = Vec::with_capacity(index.len());
        for &i in index.iter() {
            out.push(*v.get(i).ok_or_else(|| shape_err("gather", format!("index {i} out of {}", v.len())))?);
        }
        let op = record(self.is_tracked(), || Op::Gather(self.clone(), index.clone()));
        Tensor::from_op(shape.to_vec(), out, op, "gather")
    }

    /// `out.flat[index[i]] += self.flat[i]` into a zero tensor of `shape`.
    pub fn scatter_add(&self, index: Rc<[usize]>, shape: &[usize]) -> Result<Tensor> {
        if self.numel() != index.len() {
            return Err(shape_err("scatter_add", format!("{} indices for {} values", index.len(), self.numel())));
        }
        let mut out = vec![0.0; numel(shape)];
        for (&i, &v) in index.iter().zip(self.values()) {
            *out.get_mut(i).ok_or_else(|| shape_err("scatter_add", format!("index {i} out of range")))? += v;
        }
        let op = record(self.is_tracked(), || Op::ScatterAdd(self.clone(), index.clone()));
        Tensor::from_op(shape.to_vec(), out, op, "scatter_add")
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(shape_err("concat", format!("axis {axis} for rank {rank}")));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != rank || s[..axis] != first.shape()[..axis] || s[axis + 1..] != first.shape()[axis + 1..] {
                return Err(shape_err("concat", format!("{:?} vs {s:?}", first.shape())));
            }
            shape[axis] += s[axis];
        }
        let outer = numel(&shape[..axis]);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let block = numel(&p.shape()[axis..]);
                out.extend_from_slice(&p.values()[o * block..(o + 1) * block]);
            }
        }
        let tracked = parts.iter().any(Tensor::is_tracked);
        let op = record(tracked, || Op::Concat(parts.to_vec(), axis));
        Tensor::from_op(shape, out, op, "concat")
    }

    /// Indices into the flat buffer selecting `[start, start+len)` along `axis`.
    pub fn slice_index(shape: &[usize], axis: usize, start: usize, len: usize) -> Rc<[usize]> {
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * shape[axis] + a) * inner;
                idx.extend(base..base + inner);
            }
        }
        idx.into()
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.shape().len() || start + len > self.shape()[axis] {
            return Err(shape_err("slice", format!("[{start}, {}) on axis {axis} of {:?}", start + len, self.shape())));
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        self.gather(Tensor::slice_index(self.shape(), axis, start, len), &shape)
    }

    /// `param - lr * grad`, recorded as a distinguished update node.
    ///
    /// When `grad` is tracked (produced by a backward pass with `create_graph`)
    /// the dependence of the result on the gradient is retained and a later
    /// backward pass sees the second-order term.
    pub fn sgd_update(&self, grad: &Tensor, lr: f64) -> Result<Tensor> {
        same_shape("sgd_update", self, grad)?;
        let op = record(any_tracked(&[self, grad]), || Op::SgdUpdate { param: self.clone(), grad: grad.clone(), lr });
        Tensor::from_op(self.shape().to_vec(), zip_map(self, grad, |p, g| p - lr * g), op, "sgd_update")
    }
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Conv2d(a, b, _) | Op::ConvInputGrad(a, b, _) | Op::ConvWeightGrad(a, b, _) => vec![a, b],
            Op::SgdUpdate { param, grad, .. } => vec![param, grad],
            Op::Concat(parts, _) => parts.iter().collect(),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Power(a, _)
            | Op::SafeRecip(a)
            | Op::Sum(a)
            | Op::SumTrailing(a, _)
            | Op::ExpandTrailing(a, _)
            | Op::SumLeading(a)
            | Op::TileLeading(a)
            | Op::Softmax(a, _)
            | Op::L2Norm(a)
            | Op::UnitVec(a)
            | Op::Reshape(a)
            | Op::Gather(a, _)
            | Op::ScatterAdd(a, _) => vec![a],
        }
    }

    /// Gradients for each input, aligned with `inputs()`. `None` marks an
    /// input that needs no gradient (untracked).
    pub(crate) fn vjp(&self, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let want = |t: &Tensor| t.is_tracked();
        let opt = |t: &Tensor, f: &dyn Fn() -> Result<Tensor>| -> Result<Option<Tensor>> {
            if want(t) {
                f().map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(match self {
            Op::Add(a, b) => vec![opt(a, &|| Ok(g.clone()))?, opt(b, &|| Ok(g.clone()))?],
            Op::Sub(a, b) => vec![opt(a, &|| Ok(g.clone()))?, opt(b, &|| g.neg())?],
            Op::Mul(a, b) => vec![opt(a, &|| g.mul(b))?, opt(b, &|| g.mul(a))?],
            Op::Div(a, b) => vec![
                opt(a, &|| g.div(b))?,
                // -g * a / b^2
                opt(b, &|| g.mul(a)?.div(&b.mul(b)?)?.neg())?,
            ],
            Op::Scale(_, s) => vec![Some(g.scale(*s)?)],
            Op::AddScalar(_) => vec![Some(g.clone())],
            Op::MatMul(a, b) => vec![opt(a, &|| g.matmul(&b.transpose()?))?, opt(b, &|| a.transpose()?.matmul(g))?],
            Op::Transpose(_) => vec![Some(g.transpose()?)],
            Op::Conv2d(x, w, spec) => {
                let xs = x.shape();
                let ws = w.shape();
                vec![
                    opt(x, &|| g.conv2d_input_grad(w, [xs[2], xs[3]], *spec))?,
                    opt(w, &|| x.conv2d_weight_grad(g, [ws[2], ws[3]], *spec))?,
                ]
            }
            Op::ConvInputGrad(gy, w, spec) => {
                let ws = w.shape();
                vec![opt(gy, &|| g.conv2d(w, *spec))?, opt(w, &|| g.conv2d_weight_grad(gy, [ws[2], ws[3]], *spec))?]
            }
            Op::ConvWeightGrad(x, gy, spec) => {
                let xs = x.shape();
                vec![opt(x, &|| gy.conv2d_input_grad(g, [xs[2], xs[3]], *spec))?, opt(gy, &|| x.conv2d(g, *spec))?]
            }
            Op::Relu(x) => {
                let mask = Tensor::new(x.shape(), map(x, |v| if v > 0.0 { 1.0 } else { 0.0 }))?;
                vec![Some(g.mul(&mask)?)]
            }
            Op::Exp(x) => vec![Some(g.mul(&x.exp()?)?)],
            Op::Log(x) => vec![Some(g.div(x)?)],
            Op::Power(x, p) => {
                if *p == 0.0 {
                    vec![Some(Tensor::zeros(x.shape()))]
                } else {
                    vec![Some(g.mul(&x.powf(p - 1.0)?.scale(*p)?)?)]
                }
            }
            Op::SafeRecip(x) => {
                let r = x.safe_recip()?;
                vec![Some(g.mul(&r.mul(&r)?)?.neg()?)]
            }
            Op::Sum(x) => {
                let dims = x.shape().to_vec();
                vec![Some(g.expand_trailing(&dims)?)]
            }
            Op::SumTrailing(x, axes) => {
                let rank = x.shape().len();
                let dims = x.shape()[rank - axes..].to_vec();
                vec![Some(g.expand_trailing(&dims)?)]
            }
            Op::ExpandTrailing(_, dims) => vec![Some(g.sum_trailing(dims.len())?)],
            Op::SumLeading(x) => vec![Some(g.tile_leading(x.shape()[0])?)],
            Op::TileLeading(_) => vec![Some(g.sum_leading()?)],
            Op::Softmax(x, axes) => {
                // y * (g - sum(g*y))
                let y = x.softmax_trailing(*axes)?;
                let rank = x.shape().len();
                let dims = x.shape()[rank - axes..].to_vec();
                let dot = g.mul(&y)?.sum_trailing(*axes)?.expand_trailing(&dims)?;
                vec![Some(y.mul(&g.sub(&dot)?)?)]
            }
            Op::L2Norm(x) => {
                let last = *x.shape().last().unwrap();
                vec![Some(g.expand_trailing(&[last])?.mul(&x.unit_vec()?)?)]
            }
            Op::UnitVec(x) => {
                // (G - u (u.G)) / ||x||
                let last = *x.shape().last().unwrap();
                let u = x.unit_vec()?;
                let ug = u.mul(g)?.sum_trailing(1)?.expand_trailing(&[last])?;
                let inv = x.l2_norm()?.safe_recip()?.expand_trailing(&[last])?;
                vec![Some(g.sub(&u.mul(&ug)?)?.mul(&inv)?)]
            }
            Op::Reshape(x) => vec![Some(g.reshape(x.shape())?)],
            Op::Gather(x, idx) => vec![Some(g.scatter_add(idx.clone(), x.shape())?)],
            Op::ScatterAdd(x, idx) => vec![Some(g.gather(idx.clone(), x.shape())?)],
            Op::Concat(parts, axis) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut start = 0;
                for p in parts {
                    let len = p.shape()[*axis];
                    out.push(opt(p, &|| g.slice_axis(*axis, start, len))?);
                    start += len;
                }
                out
            }
            Op::SgdUpdate { param, grad, lr } => {
                vec![opt(param, &|| Ok(g.clone()))?, opt(grad, &|| g.scale(-lr))?]
            }
        })
    }
}
