//! Define-by-run tape. A [`Graph`] borrows a [`ParamStore`] read-only while the
//! forward pass is recorded, and [`Graph::backward`] returns the gradients as a
//! separate map so the store can be updated afterwards.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{gemm, View};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Clamp used by the binary entropy so that its derivative stays finite.
pub const ENTROPY_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Square,
    Abs,
    /// `-(a ln a + (1 - a) ln(1 - a))` with `0 ln 0 = 0`.
    BinaryEntropy,
}

/// Operation with a hand-written backward pass, implemented outside this module
/// (hash encoding, volume integration).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input; entries for inputs with `needs[i] == false`
    /// may be `None`.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Concat(Vec<Var>),
    Slice { a: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    RepeatRows { a: Var, times: usize },
    BroadcastRows(Var),
    Sum(Var),
    SumCols(Var),
    RowNorm(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Vec<f64>>,
    inputs: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Vec<f64>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(|v| v.as_slice())
    }

    /// Gradient with respect to an input created by [`Graph::input_with_grad`].
    pub fn input(&self, var: Var) -> Option<&[f64]> {
        self.inputs.get(&var).map(|v| v.as_slice())
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().chain(self.inputs.values()).all(|g| g.iter().all(|v| v.is_finite()))
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(&src) {
                *a += *b;
            }
        }
        None => *dst = Some(src),
    }
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let src = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn binary_entropy(a: f64) -> f64 {
    let a = if (0.0..=1.0).contains(&a) { a } else { a.clamp(ENTROPY_EPS, 1.0 - ENTROPY_EPS) };
    let xlx = |p: f64| if p <= 0.0 { 0.0 } else { p * p.ln() };
    -(xlx(a) + xlx(1.0 - a))
}

pub(crate) fn binary_entropy_grad(a: f64) -> f64 {
    let a = a.clamp(ENTROPY_EPS, 1.0 - ENTROPY_EPS);
    ((1.0 - a) / a).ln()
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(256) }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input whose gradient is reported by [`Gradients::input`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs = self.params.get(id).requires_grad;
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), needs_grad: needs });
        Var(self.nodes.len() - 1)
    }

    /// `x[N,in] * w[in,out] + b[1,out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::dimension("linear", format!("input width {}", ws[0]), format!("{}", xs[xs.len() - 1])));
        }
        let (n, k, m) = (self.value(x).rows(), ws[0], ws[1]);
        let mut out = vec![0.0; n * m];
        let mut beta = 0.0;
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(Error::dimension("linear bias", format!("{m}"), format!("{}", bv.len())));
            }
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bv.data());
            }
            beta = 1.0;
        }
        gemm(
            n,
            k,
            m,
            1.0,
            View::row_major(self.value(x).data(), k),
            View::row_major(self.value(w).data(), m),
            beta,
            &mut out,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Linear { x, w, b }, needs))
    }

    fn same_shape(&self, ctx: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension(ctx, format!("{:?}", self.shape(a)), format!("{:?}", self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, ctx: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(ctx, a, b)?;
        let data: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, data), op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[1,C]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(row).len() != c {
            return Err(Error::dimension("add_row", format!("{c}"), format!("{}", self.value(row).len())));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_exact_mut(c) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v += *b;
            }
        }
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRow(a, row), needs))
    }

    /// Scales row `i` of `a[N,C]` by `s[i]`, `s` shaped `[N,1]`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var> {
        let (n, c) = (self.value(a).rows(), self.value(a).cols());
        if self.value(s).len() != n {
            return Err(Error::dimension("mul_col", format!("{n} rows"), format!("{}", self.value(s).len())));
        }
        let sv = self.value(s).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for (chunk, k) in data.chunks_exact_mut(c).zip(&sv) {
            for v in chunk {
                *v *= *k;
            }
        }
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(s);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MulCol(a, s), needs))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let data = self.value(a).data().iter().map(|v| v * k).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::from_parts(shape, data), Op::Scale(a, k), needs)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let data = self.value(a).data().iter().map(|v| v + k).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::from_parts(shape, data), Op::AddScalar(a), needs)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |x| x.max(0.0),
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Softplus => softplus,
            Unary::Exp => f64::exp,
            Unary::Square => |x| x * x,
            Unary::Abs => f64::abs,
            Unary::BinaryEntropy => binary_entropy,
        };
        let data = self.value(a).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::from_parts(shape, data), Op::Unary(a, kind), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// Concatenates `[N, c_i]` matrices along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        if let Some(bad) = parts.iter().find(|&&p| self.value(p).rows() != n) {
            return Err(Error::dimension("concat", format!("{n} rows"), format!("{} rows", self.value(*bad).rows())));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..n {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_parts(vec![n, total], data), Op::Concat(parts.to_vec()), needs))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = (self.value(a).rows(), self.value(a).cols());
        if start + len > c || len == 0 {
            return Err(Error::dimension("slice_cols", format!("range within {c} columns"), format!("{start}..{}", start + len)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(vec![n, len], data), Op::Slice { a, start }, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), needs))
    }

    /// Matrix transpose `[R,C] -> [C,R]`.
    pub fn transpose(&mut self, a: Var) -> Var {
        let t = transpose(self.value(a));
        let needs = self.needs(a);
        self.push(t, Op::Transpose(a), needs)
    }

    /// Repeats each row `times` times consecutively: `[R,C] -> [R*times, C]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * times * c);
        for i in 0..r {
            for _ in 0..times {
                data.extend_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::from_parts(vec![r * times, c], data), Op::RepeatRows { a, times }, needs)
    }

    /// `[1,C] -> [n,C]`.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        if self.value(a).rows() != 1 {
            return Err(Error::dimension("broadcast_rows", "1 row", format!("{}", self.value(a).rows())));
        }
        let c = self.value(a).cols();
        let row = self.value(a).data().to_vec();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(vec![n, c], data), Op::BroadcastRows(a), needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Row sums: `[N,C] -> [N,1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let c = self.value(a).cols();
        let data: Vec<f64> = self.value(a).data().chunks_exact(c).map(|r| r.iter().sum()).collect();
        let n = data.len();
        let needs = self.needs(a);
        self.push(Tensor::from_parts(vec![n, 1], data), Op::SumCols(a), needs)
    }

    /// Euclidean norm of each row: `[N,C] -> [N,1]`. The subgradient at zero is zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let c = self.value(a).cols();
        let data: Vec<f64> =
            self.value(a).data().chunks_exact(c).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let n = data.len();
        let needs = self.needs(a);
        self.push(Tensor::from_parts(vec![n, 1], data), Op::RowNorm(a), needs)
    }

    /// 2D convolution of a `[C,H,W]` image with `[O,C,k,k]` filters and `[O]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(Error::dimension("conv2d", format!("filters [O,{},k,k]", xs.get(0).copied().unwrap_or(0)), format!("{ws:?}")));
        }
        if self.value(b).len() != ws[0] {
            return Err(Error::dimension("conv2d bias", format!("{}", ws[0]), format!("{}", self.value(b).len())));
        }
        let geo = ConvGeom::new(&xs, &ws, stride, pad)?;
        let out = conv_forward(&geo, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![geo.o, geo.oh, geo.ow], out), Op::Conv2d { x, w, b, stride, pad }, needs))
    }

    /// 2x2 mean pooling of a `[C,H,W]` image (odd trailing rows/cols dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(Error::dimension("avg_pool2", "[C,H>=2,W>=2]", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let base = ch * h * w;
                    let v = src[base + 2 * i * w + 2 * j]
                        + src[base + 2 * i * w + 2 * j + 1]
                        + src[base + (2 * i + 1) * w + 2 * j]
                        + src[base + (2 * i + 1) * w + 2 * j + 1];
                    out[ch * oh * ow + i * ow + j] = 0.25 * v;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![c, oh, ow], out), Op::AvgPool2(x), needs))
    }

    /// `[C,H,W] -> [1,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dimension("global_avg_pool", "[C,H,W]", format!("{s:?}")));
        }
        let hw = s[1] * s[2];
        let out: Vec<f64> = self.value(x).data().chunks_exact(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![1, s[0]], out), Op::GlobalAvgPool(x), needs))
    }

    /// Records a custom op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, needs)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = self.value(Var(idx));
            match &node.op {
                Op::Input => {
                    out.inputs.insert(Var(idx), g);
                }
                Op::Param(id) => match out.params.get_mut(id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    None => {
                        out.params.insert(*id, g);
                    }
                },
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, k, m) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                    if self.needs(*x) {
                        let mut dx = vec![0.0; n * k];
                        gemm(n, m, k, 1.0, View::row_major(&g, m), View::transposed(wv.data(), m), 0.0, &mut dx);
                        add_into(&mut grads[x.0], dx);
                    }
                    if self.needs(*w) {
                        let mut dw = vec![0.0; k * m];
                        gemm(k, n, m, 1.0, View::transposed(xv.data(), k), View::row_major(&g, m), 0.0, &mut dw);
                        add_into(&mut grads[w.0], dw);
                    }
                    if let Some(b) = b {
                        if self.needs(*b) {
                            let mut db = vec![0.0; m];
                            for row in g.chunks_exact(m) {
                                for (a, v) in db.iter_mut().zip(row) {
                                    *a += *v;
                                }
                            }
                            add_into(&mut grads[b.0], db);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        add_into(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        add_into(&mut grads[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        add_into(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        add_into(&mut grads[b.0], g.iter().map(|v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let bv = self.value(*b).data();
                        add_into(&mut grads[a.0], g.iter().zip(bv).map(|(d, y)| d * y).collect());
                    }
                    if self.needs(*b) {
                        let av = self.value(*a).data();
                        add_into(&mut grads[b.0], g.iter().zip(av).map(|(d, x)| d * x).collect());
                    }
                }
                Op::AddRow(a, r) => {
                    if self.needs(*r) {
                        let c = self.value(*r).len();
                        let mut dr = vec![0.0; c];
                        for row in g.chunks_exact(c) {
                            for (acc, v) in dr.iter_mut().zip(row) {
                                *acc += *v;
                            }
                        }
                        add_into(&mut grads[r.0], dr);
                    }
                    if self.needs(*a) {
                        add_into(&mut grads[a.0], g);
                    }
                }
                Op::MulCol(a, s) => {
                    let c = self.value(*a).cols();
                    let sv = self.value(*s).data();
                    if self.needs(*s) {
                        let av = self.value(*a).data();
                        let ds: Vec<f64> = g
                            .chunks_exact(c)
                            .zip(av.chunks_exact(c))
                            .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                            .collect();
                        add_into(&mut grads[s.0], ds);
                    }
                    if self.needs(*a) {
                        let mut da = g;
                        for (row, k) in da.chunks_exact_mut(c).zip(sv) {
                            for v in row {
                                *v *= *k;
                            }
                        }
                        add_into(&mut grads[a.0], da);
                    }
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    add_into(&mut grads[a.0], g.iter().map(|v| v * k).collect());
                }
                Op::AddScalar(a) | Op::Reshape(a) => add_into(&mut grads[a.0], g),
                Op::Transpose(a) => {
                    let shape = self.value(*a).shape();
                    let gt = Tensor::from_parts(vec![shape[1], shape[0]], g);
                    add_into(&mut grads[a.0], transpose(&gt).into_data());
                }
                Op::Unary(a, kind) => {
                    let x = self.value(*a).data();
                    let yd = y.data();
                    let da: Vec<f64> = match kind {
                        Unary::Relu => g.iter().zip(x).map(|(d, &v)| if v > 0.0 { *d } else { 0.0 }).collect(),
                        Unary::Sigmoid => g.iter().zip(yd).map(|(d, s)| d * s * (1.0 - s)).collect(),
                        Unary::Tanh => g.iter().zip(yd).map(|(d, t)| d * (1.0 - t * t)).collect(),
                        Unary::Softplus => g.iter().zip(x).map(|(d, &v)| d * sigmoid(v)).collect(),
                        Unary::Exp => g.iter().zip(yd).map(|(d, e)| d * e).collect(),
                        Unary::Square => g.iter().zip(x).map(|(d, v)| 2.0 * d * v).collect(),
                        Unary::Abs => g
                            .iter()
                            .zip(x)
                            .map(|(d, &v)| if v > 0.0 { *d } else if v < 0.0 { -d } else { 0.0 })
                            .collect(),
                        Unary::BinaryEntropy => g.iter().zip(x).map(|(d, &v)| d * binary_entropy_grad(v)).collect(),
                    };
                    add_into(&mut grads[a.0], da);
                }
                Op::Concat(parts) => {
                    let n = y.rows();
                    let total = y.cols();
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.needs(p) {
                            let mut dp = Vec::with_capacity(n * w);
                            for r in 0..n {
                                dp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                            }
                            add_into(&mut grads[p.0], dp);
                        }
                        off += w;
                    }
                }
                Op::Slice { a, start } => {
                    let (n, c) = (self.value(*a).rows(), self.value(*a).cols());
                    let len = y.cols();
                    let mut da = vec![0.0; n * c];
                    for r in 0..n {
                        da[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    add_into(&mut grads[a.0], da);
                }
                Op::RepeatRows { a, times } => {
                    let c = y.cols();
                    let r = self.value(*a).rows();
                    let mut da = vec![0.0; r * c];
                    for (i, row) in g.chunks_exact(c).enumerate() {
                        let dst = &mut da[(i / times) * c..(i / times + 1) * c];
                        for (acc, v) in dst.iter_mut().zip(row) {
                            *acc += *v;
                        }
                    }
                    add_into(&mut grads[a.0], da);
                }
                Op::BroadcastRows(a) => {
                    let c = y.cols();
                    let mut da = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        for (acc, v) in da.iter_mut().zip(row) {
                            *acc += *v;
                        }
                    }
                    add_into(&mut grads[a.0], da);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    add_into(&mut grads[a.0], vec![g[0]; n]);
                }
                Op::SumCols(a) => {
                    let c = self.value(*a).cols();
                    let mut da = Vec::with_capacity(g.len() * c);
                    for d in &g {
                        da.extend(std::iter::repeat(*d).take(c));
                    }
                    add_into(&mut grads[a.0], da);
                }
                Op::RowNorm(a) => {
                    let c = self.value(*a).cols();
                    let av = self.value(*a).data();
                    let mut da = vec![0.0; av.len()];
                    for (i, (d, nrm)) in g.iter().zip(y.data()).enumerate() {
                        if *nrm > 0.0 {
                            for j in 0..c {
                                da[i * c + j] = d * av[i * c + j] / nrm;
                            }
                        }
                    }
                    add_into(&mut grads[a.0], da);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let geo = ConvGeom::new(self.shape(*x), self.shape(*w), *stride, *pad)?;
                    let (dx, dw, db) = conv_backward(
                        &geo,
                        self.value(*x).data(),
                        self.value(*w).data(),
                        &g,
                        [self.needs(*x), self.needs(*w), self.needs(*b)],
                    );
                    if let Some(dx) = dx {
                        add_into(&mut grads[x.0], dx);
                    }
                    if let Some(dw) = dw {
                        add_into(&mut grads[w.0], dw);
                    }
                    if let Some(db) = db {
                        add_into(&mut grads[b.0], db);
                    }
                }
                Op::AvgPool2(a) => {
                    let s = self.shape(*a);
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut da = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let d = 0.25 * g[ch * oh * ow + i * ow + j];
                                let base = ch * h * w;
                                da[base + 2 * i * w + 2 * j] += d;
                                da[base + 2 * i * w + 2 * j + 1] += d;
                                da[base + (2 * i + 1) * w + 2 * j] += d;
                                da[base + (2 * i + 1) * w + 2 * j + 1] += d;
                            }
                        }
                    }
                    add_into(&mut grads[a.0], da);
                }
                Op::GlobalAvgPool(a) => {
                    let s = self.shape(*a);
                    let hw = s[1] * s[2];
                    let mut da = Vec::with_capacity(s[0] * hw);
                    for d in &g {
                        da.extend(std::iter::repeat(d / hw as f64).take(hw));
                    }
                    add_into(&mut grads[a.0], da);
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                    let dins = op.backward(&vals, y, &g, &needs);
                    for ((&v, d), need) in inputs.iter().zip(dins).zip(needs) {
                        if let (Some(d), true) = (d, need) {
                            add_into(&mut grads[v.0], d);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dimension("conv2d", "kernel fits padded input", format!("{xs:?} with k={k}")));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(Self { c, h, w, o, k, stride, pad, oh, ow })
    }

    /// Input coordinate for output `(i,j)` and kernel tap `(u,v)`, if inside the image.
    #[inline]
    fn tap(&self, i: usize, j: usize, u: usize, v: usize) -> Option<(usize, usize)> {
        let y = (i * self.stride + u) as isize - self.pad as isize;
        let x = (j * self.stride + v) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.o * g.oh * g.ow];
    for o in 0..g.o {
        for i in 0..g.oh {
            for j in 0..g.ow {
                let mut acc = b[o];
                for c in 0..g.c {
                    for u in 0..g.k {
                        for v in 0..g.k {
                            if let Some((y, xx)) = g.tap(i, j, u, v) {
                                acc += w[((o * g.c + c) * g.k + u) * g.k + v] * x[(c * g.h + y) * g.w + xx];
                            }
                        }
                    }
                }
                out[(o * g.oh + i) * g.ow + j] = acc;
            }
        }
    }
    out
}

type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

fn conv_backward(g: &ConvGeom, x: &[f64], w: &[f64], dy: &[f64], needs: [bool; 3]) -> ConvGrads {
    let mut dx = needs[0].then(|| vec![0.0; x.len()]);
    let mut dw = needs[1].then(|| vec![0.0; w.len()]);
    let mut db = needs[2].then(|| vec![0.0; g.o]);
    for o in 0..g.o {
        for i in 0..g.oh {
            for j in 0..g.ow {
                let d = dy[(o * g.oh + i) * g.ow + j];
                if let Some(db) = db.as_mut() {
                    db[o] += d;
                }
                for c in 0..g.c {
                    for u in 0..g.k {
                        for v in 0..g.k {
                            if let Some((y, xx)) = g.tap(i, j, u, v) {
                                let wi = ((o * g.c + c) * g.k + u) * g.k + v;
                                let xi = (c * g.h + y) * g.w + xx;
                                if let Some(dw) = dw.as_mut() {
                                    dw[wi] += d * x[xi];
                                }
                                if let Some(dx) = dx.as_mut() {
                                    dx[xi] += d * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
