//! Operation tape for reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Ops are
//! appended in execution order, so node indices are already a topological
//! order and [`Tape::backward`] is a single reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::{Error, Result, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    /// Square root with a zero subgradient at the origin.
    Sqrt,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug)]
enum Broadcast {
    None,
    LhsScalar,
    RhsScalar,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
struct PoolGeom {
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    wh: usize,
    ww: usize,
}

/// Axis split of a shape into `outer × n × inner`.
#[derive(Clone, Copy, Debug)]
struct AxisSplit {
    outer: usize,
    n: usize,
    inner: usize,
}

impl AxisSplit {
    fn of(shape: &[usize], axis: usize) -> Self {
        AxisSplit {
            outer: shape[..axis].iter().product(),
            n: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    #[inline]
    fn at(&self, o: usize, j: usize, i: usize) -> usize {
        (o * self.n + j) * self.inner + i
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, trans_b: bool },
    Binary { a: Var, b: Var, kind: Binary, bc: Broadcast },
    Scale { a: Var, c: T },
    Shift { a: Var },
    Unary { a: Var, op: UnaryOp },
    ClampMin { a: Var, lo: T },
    Mask { a: Var, mask: Vec<T> },
    Maximum { a: Var, b: Var },
    Sum { a: Var },
    SumAxis { a: Var, split: AxisSplit },
    Softmax { a: Var, split: AxisSplit },
    LogSoftmax { a: Var, n: usize },
    LayerNorm { a: Var, n: usize, xhat: Vec<T>, inv_std: Vec<T> },
    AddBias { a: Var, b: Var },
    MulGain { a: Var, g: Var },
    MatTranspose { a: Var, m: usize, n: usize },
    Reshape { a: Var },
    Slice { a: Var, split: AxisSplit, start: usize, len: usize },
    Concat { parts: Vec<Var>, axis: usize },
    GatherCols { table: Var, rows: usize, cols: usize, indices: Vec<usize> },
    Pick { a: Var, indices: Vec<usize> },
    GridModulate { grid: Var, h: Var, cells: usize, d: usize },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    Pool { x: Var, kind: PoolKind, geom: PoolGeom, argmax: Vec<usize> },
    PadHw { x: Var, batch: usize, h: usize, w: usize, c: usize, h2: usize, w2: usize },
    CircConv { a: Var, b: Var },
    CountSketch { a: Var, hash: Arc<Vec<usize>>, sign: Arc<Vec<i8>> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Binary { a, b, .. } | Maximum { a, b } | CircConv { a, b } => vec![*a, *b],
            AddBias { a, b } => vec![*a, *b],
            MulGain { a, g } => vec![*a, *g],
            GridModulate { grid, h, .. } => vec![*grid, *h],
            Conv2d { x, k, .. } => vec![*x, *k],
            Concat { parts, .. } => parts.clone(),
            GatherCols { table, .. } => vec![*table],
            Scale { a, .. }
            | Shift { a }
            | Unary { a, .. }
            | ClampMin { a, .. }
            | Mask { a, .. }
            | Sum { a }
            | SumAxis { a, .. }
            | Softmax { a, .. }
            | LogSoftmax { a, .. }
            | LayerNorm { a, .. }
            | MatTranspose { a, .. }
            | Reshape { a }
            | Slice { a, .. }
            | Pick { a, .. }
            | CountSketch { a, .. } => vec![*a],
            Pool { x, .. } | PadHw { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of executed operations.
///
/// The tape runs either in inference mode ([`Tape::new`]) or in training mode
/// ([`Tape::training`]), which carries the seeded generator used by dropout.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
    rng: Option<ChaCha8Rng>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Inference-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: HashMap::new(), param_order: Vec::new(), rng: None }
    }

    /// Training-mode tape with a seeded generator for stochastic layers.
    pub fn training(seed: u64) -> Self {
        Tape { rng: Some(ChaCha8Rng::seed_from_u64(seed)), ..Self::new() }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        self.rng.as_mut()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded after the first `len`, so a shared prefix can
    /// be reused across independent continuations.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.params.retain(|_, v| v.0 < len);
        self.param_order.retain(|(_, v)| v.0 < len);
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> Result<T> {
        self.nodes[v.0].value.item()
    }

    /// Gradient accumulated on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Input ids of the op that produced `v` (empty for leaves).
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        if cfg!(debug_assertions) && inputs.iter().all(|i| self.nodes[i.0].value.all_finite()) {
            debug_assert!(value.all_finite(), "non-finite output from finite inputs");
        }
        value.requires_grad = inputs.iter().any(|i| self.nodes[i.0].value.requires_grad);
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn out(&self, shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
        Tensor::new(shape, data).expect("op produced inconsistent tensor")
    }

    /// Records an input tensor; gradients flow to it iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad;
        let mut t = t;
        t.grad = None;
        self.nodes.push(Node { value: t, op: Op::Leaf });
        self.nodes.last_mut().unwrap().value.requires_grad = requires_grad;
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Records a registered parameter. Repeated requests for the same id
    /// return the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let mut value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("stored tensor");
        value.requires_grad = t.requires_grad;
        let v = self.leaf(value);
        self.params.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    /// Parameters recorded on this tape, in first-use order.
    pub fn params(&self) -> &[(ParamId, Var)] {
        &self.param_order
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product `a · b` of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let value = self.out(vec![m, n], out);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n, trans_b: false }))
    }

    /// `a · bᵀ` of `[m×k]` and `[n×k]`; applies weights stored as `[out × in]` to row batches.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim(format!("matmul_t of {sa:?} and transpose of {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nt(self.data(a), self.data(b), &mut out, m, k, n);
        let value = self.out(vec![m, n], out);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n, trans_b: true }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose of rank-{} tensor", s.len())));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let value = self.out(vec![n, m], out);
        Ok(self.push(value, Op::MatTranspose { a, m, n }))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        let bc = if sa == sb {
            Broadcast::None
        } else if nb == 1 {
            Broadcast::RhsScalar
        } else if na == 1 {
            Broadcast::LhsScalar
        } else {
            return Err(Error::dim(format!("elementwise {kind:?} of {sa:?} and {sb:?}")));
        };
        let shape = if matches!(bc, Broadcast::LhsScalar) { sb.to_vec() } else { sa.to_vec() };
        let (xa, xb) = (self.data(a), self.data(b));
        let n = na.max(nb);
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let data: Vec<T> = (0..n)
            .map(|i| {
                let x = if na == 1 { xa[0] } else { xa[i] };
                let y = if nb == 1 { xb[0] } else { xb[i] };
                f(x, y)
            })
            .collect();
        let value = self.out(shape, data);
        Ok(self.push(value, Op::Binary { a, b, kind, bc }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a);
        let value = self.out(t.shape().to_vec(), t.data().iter().map(|&x| x * c).collect());
        self.push(value, Op::Scale { a, c })
    }

    /// Adds a constant.
    pub fn shift(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a);
        let value = self.out(t.shape().to_vec(), t.data().iter().map(|&x| x + c).collect());
        self.push(value, Op::Shift { a })
    }

    pub fn unary(&mut self, a: Var, op: UnaryOp) -> Result<Var> {
        let t = self.value(a);
        match op {
            UnaryOp::Log if t.data().iter().any(|&x| x <= T::zero()) => {
                return Err(Error::Domain("log of non-positive value".into()));
            }
            UnaryOp::Sqrt if t.data().iter().any(|&x| x < T::zero()) => {
                return Err(Error::Domain("square root of negative value".into()));
            }
            _ => {}
        }
        let f = |x: T| match op {
            UnaryOp::Neg => -x,
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Relu => x.max(T::zero()),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Square => x * x,
        };
        let value = self.out(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        Ok(self.push(value, Op::Unary { a, op }))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Neg).expect("total op")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Tanh).expect("total op")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Sigmoid).expect("total op")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Relu).expect("total op")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Exp).expect("total op")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, UnaryOp::Square).expect("total op")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Log)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Sqrt)
    }

    /// `max(a, lo)`; the gradient is blocked where the clamp is active.
    pub fn clamp_min(&mut self, a: Var, lo: T) -> Var {
        let t = self.value(a);
        let value = self.out(t.shape().to_vec(), t.data().iter().map(|&x| x.max(lo)).collect());
        self.push(value, Op::ClampMin { a, lo })
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.len() {
            return Err(Error::dim(format!("mask of {} values for tensor {:?}", mask.len(), t.shape())));
        }
        let data = t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = self.out(t.shape().to_vec(), data);
        Ok(self.push(value, Op::Mask { a, mask }))
    }

    /// Elementwise maximum; ties resolve to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("maximum of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| if x >= y { x } else { y }).collect();
        let value = self.out(self.shape(a).to_vec(), data);
        Ok(self.push(value, Op::Maximum { a, b }))
    }

    // ---------------------------------------------------------------- reductions

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        let value = Tensor::scalar(s);
        self.push(value, Op::Sum { a })
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        let split = AxisSplit::of(&shape, axis);
        let x = self.data(a);
        let mut out = vec![T::zero(); split.outer * split.inner];
        for o in 0..split.outer {
            for j in 0..split.n {
                for i in 0..split.inner {
                    out[o * split.inner + i] = out[o * split.inner + i] + x[split.at(o, j, i)];
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let value = self.out(oshape, out);
        Ok(self.push(value, Op::SumAxis { a, split }))
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
        }
        let split = AxisSplit::of(&shape, axis);
        let x = self.data(a);
        let data = if split.inner == 1 {
            kernels::softmax_rows(x, split.n)
        } else {
            let mut out = vec![T::zero(); x.len()];
            for o in 0..split.outer {
                for i in 0..split.inner {
                    let m = (0..split.n).map(|j| x[split.at(o, j, i)]).fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for j in 0..split.n {
                        let e = (x[split.at(o, j, i)] - m).exp();
                        out[split.at(o, j, i)] = e;
                        z = z + e;
                    }
                    for j in 0..split.n {
                        out[split.at(o, j, i)] = out[split.at(o, j, i)] / z;
                    }
                }
            }
            out
        };
        let value = self.out(shape, data);
        Ok(self.push(value, Op::Softmax { a, split }))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("rank ≥ 1");
        let data = kernels::log_softmax_rows(self.data(a), n);
        let value = self.out(shape, data);
        self.push(value, Op::LogSoftmax { a, n })
    }

    /// Normalises each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("rank ≥ 1");
        let x = self.data(a);
        let nf = T::of(n as f64);
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.len() / n);
        for row in x.chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|&v| (v - mean) * is));
        }
        let value = self.out(shape, xhat.clone());
        self.push(value, Op::LayerNorm { a, n, xhat, inv_std })
    }

    /// Adds a bias vector along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = *self.shape(a).last().expect("rank ≥ 1");
        if self.value(b).len() != n {
            return Err(Error::dim(format!("bias {:?} for tensor {:?}", self.shape(b), self.shape(a))));
        }
        let bias = self.data(b);
        let data = self.data(a).chunks(n).flat_map(|row| row.iter().zip(bias).map(|(&x, &y)| x + y)).collect();
        let value = self.out(self.shape(a).to_vec(), data);
        Ok(self.push(value, Op::AddBias { a, b }))
    }

    /// Multiplies by a gain vector along the last axis of `a`.
    pub fn mul_gain(&mut self, a: Var, g: Var) -> Result<Var> {
        let n = *self.shape(a).last().expect("rank ≥ 1");
        if self.value(g).len() != n {
            return Err(Error::dim(format!("gain {:?} for tensor {:?}", self.shape(g), self.shape(a))));
        }
        let gain = self.data(g);
        let data = self.data(a).chunks(n).flat_map(|row| row.iter().zip(gain).map(|(&x, &y)| x * y)).collect();
        let value = self.out(self.shape(a).to_vec(), data);
        Ok(self.push(value, Op::MulGain { a, g }))
    }

    // ---------------------------------------------------------------- shape

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape { a }))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(format!("slice [{start}, {}) of axis {axis} in {shape:?}", start + len)));
        }
        let split = AxisSplit::of(&shape, axis);
        let x = self.data(a);
        let mut data = Vec::with_capacity(split.outer * len * split.inner);
        for o in 0..split.outer {
            data.extend_from_slice(&x[split.at(o, start, 0)..split.at(o, start + len, 0)]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let value = self.out(oshape, data);
        Ok(self.push(value, Op::Slice { a, split, start, len }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::dim(format!("concat of {base:?} and {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * w..(o + 1) * w]);
            }
        }
        let mut oshape = base;
        oshape[axis] = total;
        let value = self.out(oshape, data);
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Columns of a `[rows × cols]` table, returned as rows `[indices.len() × rows]`.
    pub fn gather_cols(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!("gather_cols on {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        if indices.is_empty() {
            return Err(Error::usage("gather_cols with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(Error::dim(format!("column {bad} out of range for {s:?}")));
        }
        let x = self.data(table);
        let data = indices.iter().flat_map(|&c| (0..rows).map(move |r| x[r * cols + c])).collect();
        let value = self.out(vec![indices.len(), rows], data);
        Ok(self.push(value, Op::GatherCols { table, rows, cols, indices: indices.to_vec() }))
    }

    /// Selected flat elements as a rank-1 tensor.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if indices.is_empty() || indices.iter().any(|&i| i >= n) {
            return Err(Error::dim(format!("pick {indices:?} from {n} elements")));
        }
        let x = self.data(a);
        let data = indices.iter().map(|&i| x[i]).collect();
        let value = self.out(vec![indices.len()], data);
        Ok(self.push(value, Op::Pick { a, indices: indices.to_vec() }))
    }

    /// For a grid `[gh, gw, d]` and rows `h: [l × d]`, returns `[l, gh, gw, d]`
    /// where every cell vector is multiplied elementwise by the row of `h`.
    pub fn grid_modulate(&mut self, grid: Var, h: Var) -> Result<Var> {
        let gs = self.shape(grid).to_vec();
        let hs = self.shape(h).to_vec();
        if gs.len() != 3 || hs.len() != 2 || gs[2] != hs[1] {
            return Err(Error::dim(format!("grid_modulate of {gs:?} by {hs:?}")));
        }
        let (cells, d, l) = (gs[0] * gs[1], gs[2], hs[0]);
        let (g, hv) = (self.data(grid), self.data(h));
        let mut data = Vec::with_capacity(l * cells * d);
        for row in hv.chunks(d) {
            for cell in g.chunks(d) {
                data.extend(cell.iter().zip(row).map(|(&x, &y)| x * y));
            }
        }
        let value = self.out(vec![l, gs[0], gs[1], d], data);
        Ok(self.push(value, Op::GridModulate { grid, h, cells, d }))
    }

    // ---------------------------------------------------------------- spatial

    fn spatial(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
        match *shape {
            [h, w, c] => Ok((1, h, w, c)),
            [b, h, w, c] => Ok((b, h, w, c)),
            _ => Err(Error::dim(format!("expected [h, w, c] or [b, h, w, c], got {shape:?}"))),
        }
    }

    /// Same-padded, stride-1 cross-correlation. `x: [(b,) h, w, c_in]`,
    /// `kernel: [kh, kw, c_in, c_out]` with odd spatial extents.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let (batch, h, w, c_in) = Self::spatial(&xs)?;
        if ks.len() != 4 {
            return Err(Error::dim(format!("kernel must be [kh, kw, c_in, c_out], got {ks:?}")));
        }
        if ks[0] % 2 == 0 || ks[1] % 2 == 0 {
            return Err(Error::Unsupported(format!("even kernel extent {}×{}", ks[0], ks[1])));
        }
        if ks[2] != c_in {
            return Err(Error::dim(format!("kernel {ks:?} expects {} input channels, input is {xs:?}", ks[2])));
        }
        let geom = ConvGeom { batch, h, w, c_in, kh: ks[0], kw: ks[1], c_out: ks[3] };
        let data = kernels::conv2d_forward(self.data(x), self.data(kernel), &geom);
        let mut oshape = xs;
        *oshape.last_mut().unwrap() = geom.c_out;
        let value = self.out(oshape, data);
        Ok(self.push(value, Op::Conv2d { x, k: kernel, geom }))
    }

    /// Non-overlapping pooling with the given window, or over the whole
    /// spatial extent when `window` is `None`.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, window: Option<(usize, usize)>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, h, w, c) = Self::spatial(&xs)?;
        let (wh, ww) = window.unwrap_or((h, w));
        if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 {
            return Err(Error::dim(format!("pool window {wh}×{ww} does not divide {h}×{w}")));
        }
        let geom = PoolGeom { batch, h, w, c, wh, ww };
        let (oh, ow) = (h / wh, w / ww);
        let src = self.data(x);
        let mut data = Vec::with_capacity(batch * oh * ow * c);
        let mut argmax = Vec::new();
        let area = T::of((wh * ww) as f64);
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0;
                        let mut acc = T::zero();
                        for dy in 0..wh {
                            for dx in 0..ww {
                                let i = ((b * h + oy * wh + dy) * w + ox * ww + dx) * c + ch;
                                let v = src[i];
                                if v > best {
                                    best = v;
                                    best_i = i;
                                }
                                acc = acc + v;
                            }
                        }
                        match kind {
                            PoolKind::Max => {
                                data.push(best);
                                argmax.push(best_i);
                            }
                            PoolKind::Avg => data.push(acc / area),
                        }
                    }
                }
            }
        }
        let oshape = if xs.len() == 3 { vec![oh, ow, c] } else { vec![batch, oh, ow, c] };
        let value = self.out(oshape, data);
        Ok(self.push(value, Op::Pool { x, kind, geom, argmax }))
    }

    /// Zero-pads the bottom and right edges up to `h2 × w2`.
    pub fn pad_hw(&mut self, x: Var, h2: usize, w2: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, h, w, c) = Self::spatial(&xs)?;
        if h2 < h || w2 < w {
            return Err(Error::dim(format!("cannot pad {h}×{w} to {h2}×{w2}")));
        }
        let src = self.data(x);
        let mut data = vec![T::zero(); batch * h2 * w2 * c];
        for b in 0..batch {
            for y in 0..h {
                let s = ((b * h + y) * w) * c;
                let d = ((b * h2 + y) * w2) * c;
                data[d..d + w * c].copy_from_slice(&src[s..s + w * c]);
            }
        }
        let oshape = if xs.len() == 3 { vec![h2, w2, c] } else { vec![batch, h2, w2, c] };
        let value = self.out(oshape, data);
        Ok(self.push(value, Op::PadHw { x, batch, h, w, c, h2, w2 }))
    }

    // ---------------------------------------------------------------- sketching

    /// Circular convolution of two equal-length vectors computed in the frequency domain.
    pub fn circular_convolve(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::dim(format!(
                "circular convolution of lengths {} and {}",
                self.value(a).len(),
                self.value(b).len()
            )));
        }
        let data = kernels::circular_convolve(self.data(a), self.data(b));
        let value = self.out(self.shape(a).to_vec(), data);
        Ok(self.push(value, Op::CircConv { a, b }))
    }

    /// Count sketch: `out[hash[i]] += sign[i] · a[i]`, returned as `[1 × d_out]`.
    pub fn count_sketch(&mut self, a: Var, hash: Arc<Vec<usize>>, sign: Arc<Vec<i8>>, d_out: usize) -> Result<Var> {
        let n = self.value(a).len();
        if hash.len() != n || sign.len() != n {
            return Err(Error::dim(format!("sketch of length {} for input of {n} values", hash.len())));
        }
        if hash.iter().any(|&h| h >= d_out) {
            return Err(Error::dim(format!("sketch index out of range [0, {d_out})")));
        }
        let mut data = vec![T::zero(); d_out];
        for ((&x, &h), &s) in self.data(a).iter().zip(hash.iter()).zip(sign.iter()) {
            data[h] = data[h] + if s < 0 { -x } else { x };
        }
        let value = self.out(vec![1, d_out], data);
        Ok(self.push(value, Op::CountSketch { a, hash, sign }))
    }

    // ---------------------------------------------------------------- stochastic

    /// Inverted dropout: identity on inference tapes.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::usage(format!("dropout rate {rate} outside [0, 1)")));
        }
        let n = self.value(a).len();
        let Some(rng) = self.rng.as_mut() else {
            return Ok(a);
        };
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask = (0..n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        self.mask(a, mask)
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf.
    /// Calling it twice without resetting doubles the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!("backward from non-scalar of shape {:?}", self.shape(loss))));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                adj[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut adj);
        }
        for (i, g) in adj.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[i];
                if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                    node.value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    /// Clears leaf gradients.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].value.requires_grad;
        let out = nodes[i].value.data();
        let mut send = |v: Var, d: Vec<T>| {
            if !nodes[v.0].value.requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &b)| *a = *a + b),
                slot @ None => *slot = Some(d),
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n, trans_b } => {
                if wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    if trans_b {
                        kernels::gemm_nn(g, val(b), &mut da, m, n, k);
                    } else {
                        kernels::gemm_nt(g, val(b), &mut da, m, n, k);
                    }
                    send(a, da);
                }
                if wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    if trans_b {
                        kernels::gemm_tn(g, val(a), &mut db, n, m, k);
                    } else {
                        kernels::gemm_tn(val(a), g, &mut db, k, m, n);
                    }
                    send(b, db);
                }
            }
            &Op::Binary { a, b, kind, bc } => {
                let (xa, xb) = (val(a), val(b));
                let (na, nb) = (xa.len(), xb.len());
                let ga: Vec<T> = match kind {
                    Binary::Add | Binary::Sub => g.to_vec(),
                    Binary::Mul => g.iter().enumerate().map(|(j, &gv)| gv * xb[if nb == 1 { 0 } else { j }]).collect(),
                };
                let gb: Vec<T> = match kind {
                    Binary::Add => g.to_vec(),
                    Binary::Sub => g.iter().map(|&v| -v).collect(),
                    Binary::Mul => g.iter().enumerate().map(|(j, &gv)| gv * xa[if na == 1 { 0 } else { j }]).collect(),
                };
                let reduce = |v: Vec<T>| vec![v.into_iter().sum::<T>()];
                match bc {
                    Broadcast::None => {
                        send(a, ga);
                        send(b, gb);
                    }
                    Broadcast::RhsScalar => {
                        send(a, ga);
                        send(b, reduce(gb));
                    }
                    Broadcast::LhsScalar => {
                        send(a, reduce(ga));
                        send(b, gb);
                    }
                }
            }
            &Op::Scale { a, c } => send(a, g.iter().map(|&v| v * c).collect()),
            &Op::Shift { a } => send(a, g.to_vec()),
            &Op::Unary { a, op } => {
                let x = val(a);
                let d = g
                    .iter()
                    .zip(x)
                    .zip(out)
                    .map(|((&gv, &xv), &y)| {
                        gv * match op {
                            UnaryOp::Neg => -T::one(),
                            UnaryOp::Tanh => T::one() - y * y,
                            UnaryOp::Sigmoid => y * (T::one() - y),
                            UnaryOp::Relu => {
                                if xv > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryOp::Exp => y,
                            UnaryOp::Log => T::one() / xv,
                            UnaryOp::Sqrt => {
                                if y > T::zero() {
                                    T::of(0.5) / y
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryOp::Square => T::of(2.0) * xv,
                        }
                    })
                    .collect();
                send(a, d);
            }
            &Op::ClampMin { a, lo } => {
                let d = g.iter().zip(val(a)).map(|(&gv, &x)| if x > lo { gv } else { T::zero() }).collect();
                send(a, d);
            }
            Op::Mask { a, mask } => send(*a, g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect()),
            &Op::Maximum { a, b } => {
                let (xa, xb) = (val(a), val(b));
                let mut da = vec![T::zero(); g.len()];
                let mut db = vec![T::zero(); g.len()];
                for j in 0..g.len() {
                    if xa[j] >= xb[j] {
                        da[j] = g[j];
                    } else {
                        db[j] = g[j];
                    }
                }
                send(a, da);
                send(b, db);
            }
            &Op::Sum { a } => send(a, vec![g[0]; val(a).len()]),
            &Op::SumAxis { a, split } => {
                let mut d = vec![T::zero(); split.outer * split.n * split.inner];
                for o in 0..split.outer {
                    for j in 0..split.n {
                        for ii in 0..split.inner {
                            d[split.at(o, j, ii)] = g[o * split.inner + ii];
                        }
                    }
                }
                send(a, d);
            }
            &Op::Softmax { a, split } => {
                let mut d = vec![T::zero(); out.len()];
                for o in 0..split.outer {
                    for ii in 0..split.inner {
                        let dot: T = (0..split.n).map(|j| g[split.at(o, j, ii)] * out[split.at(o, j, ii)]).sum();
                        for j in 0..split.n {
                            let k = split.at(o, j, ii);
                            d[k] = out[k] * (g[k] - dot);
                        }
                    }
                }
                send(a, d);
            }
            &Op::LogSoftmax { a, n } => {
                let mut d = Vec::with_capacity(out.len());
                for (grow, yrow) in g.chunks(n).zip(out.chunks(n)) {
                    let total: T = grow.iter().copied().sum();
                    d.extend(grow.iter().zip(yrow).map(|(&gv, &y)| gv - y.exp() * total));
                }
                send(a, d);
            }
            Op::LayerNorm { a, n, xhat, inv_std } => {
                let n = *n;
                let nf = T::of(n as f64);
                let mut d = Vec::with_capacity(g.len());
                for ((grow, xrow), &is) in g.chunks(n).zip(xhat.chunks(n)).zip(inv_std) {
                    let sg: T = grow.iter().copied().sum();
                    let sgx: T = grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum();
                    d.extend(grow.iter().zip(xrow).map(|(&gv, &xh)| is / nf * (nf * gv - sg - xh * sgx)));
                }
                send(*a, d);
            }
            &Op::AddBias { a, b } => {
                let n = val(b).len();
                let mut db = vec![T::zero(); n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(x, &y)| *x = *x + y);
                }
                send(a, g.to_vec());
                send(b, db);
            }
            &Op::MulGain { a, g: gain } => {
                let n = val(gain).len();
                let (x, gv) = (val(a), val(gain));
                let mut dg = vec![T::zero(); n];
                let mut da = Vec::with_capacity(g.len());
                for (grow, xrow) in g.chunks(n).zip(x.chunks(n)) {
                    for j in 0..n {
                        dg[j] = dg[j] + grow[j] * xrow[j];
                        da.push(grow[j] * gv[j]);
                    }
                }
                send(a, da);
                send(gain, dg);
            }
            &Op::MatTranspose { a, m, n } => {
                let mut d = vec![T::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        d[r * n + c] = g[c * m + r];
                    }
                }
                send(a, d);
            }
            &Op::Reshape { a } => send(a, g.to_vec()),
            &Op::Slice { a, split, start, len } => {
                let mut d = vec![T::zero(); split.outer * split.n * split.inner];
                let w = len * split.inner;
                for o in 0..split.outer {
                    let dst = split.at(o, start, 0);
                    d[dst..dst + w].copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                send(a, d);
            }
            Op::Concat { parts, axis } => {
                let base = nodes[parts[0].0].value.shape();
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let widths: Vec<usize> = parts.iter().map(|p| nodes[p.0].value.shape()[*axis] * inner).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut d = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        d.extend_from_slice(&g[o * total + offset..o * total + offset + w]);
                    }
                    offset += w;
                    send(p, d);
                }
            }
            Op::GatherCols { table, rows, cols, indices } => {
                let (rows, cols) = (*rows, *cols);
                let mut d = vec![T::zero(); rows * cols];
                for (k, &c) in indices.iter().enumerate() {
                    for r in 0..rows {
                        d[r * cols + c] = d[r * cols + c] + g[k * rows + r];
                    }
                }
                send(*table, d);
            }
            Op::Pick { a, indices } => {
                let mut d = vec![T::zero(); val(*a).len()];
                for (&j, &gv) in indices.iter().zip(g) {
                    d[j] = d[j] + gv;
                }
                send(*a, d);
            }
            &Op::GridModulate { grid, h, cells, d } => {
                let (gv, hv) = (val(grid), val(h));
                let l = hv.len() / d;
                if wants(grid) {
                    let mut dg = vec![T::zero(); cells * d];
                    for t in 0..l {
                        let hrow = &hv[t * d..(t + 1) * d];
                        for c in 0..cells {
                            let go = &g[(t * cells + c) * d..(t * cells + c + 1) * d];
                            for k in 0..d {
                                dg[c * d + k] = dg[c * d + k] + go[k] * hrow[k];
                            }
                        }
                    }
                    send(grid, dg);
                }
                if wants(h) {
                    let mut dh = vec![T::zero(); l * d];
                    for t in 0..l {
                        for c in 0..cells {
                            let go = &g[(t * cells + c) * d..(t * cells + c + 1) * d];
                            for k in 0..d {
                                dh[t * d + k] = dh[t * d + k] + go[k] * gv[c * d + k];
                            }
                        }
                    }
                    send(h, dh);
                }
            }
            &Op::Conv2d { x, k, ref geom } => {
                let (dx, dk) = kernels::conv2d_backward(val(x), val(k), g, geom);
                send(x, dx);
                send(k, dk);
            }
            Op::Pool { x, kind, geom, argmax } => {
                let mut d = vec![T::zero(); val(*x).len()];
                match kind {
                    PoolKind::Max => {
                        for (&src, &gv) in argmax.iter().zip(g) {
                            d[src] = d[src] + gv;
                        }
                    }
                    PoolKind::Avg => {
                        let PoolGeom { batch, h, w, c, wh, ww } = *geom;
                        let (oh, ow) = (h / wh, w / ww);
                        let area = T::of((wh * ww) as f64);
                        for b in 0..batch {
                            for y in 0..h {
                                for xx in 0..w {
                                    for ch in 0..c {
                                        let o = ((b * oh + y / wh) * ow + xx / ww) * c + ch;
                                        d[((b * h + y) * w + xx) * c + ch] = g[o] / area;
                                    }
                                }
                            }
                        }
                    }
                }
                send(*x, d);
            }
            &Op::PadHw { x, batch, h, w, c, h2, w2 } => {
                let mut d = vec![T::zero(); batch * h * w * c];
                for b in 0..batch {
                    for y in 0..h {
                        let s = ((b * h2 + y) * w2) * c;
                        let t = ((b * h + y) * w) * c;
                        d[t..t + w * c].copy_from_slice(&g[s..s + w * c]);
                    }
                }
                send(x, d);
            }
            &Op::CircConv { a, b } => {
                if wants(a) {
                    send(a, kernels::circular_correlate(g, val(b)));
                }
                if wants(b) {
                    send(b, kernels::circular_correlate(g, val(a)));
                }
            }
            Op::CountSketch { a, hash, sign } => {
                let d = hash
                    .iter()
                    .zip(sign.iter())
                    .map(|(&h, &s)| if s < 0 { -g[h] } else { g[h] })
                    .collect();
                send(*a, d);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[derive(Clone, Copy)]
    enum Draw {
        Signed,
        Positive,
        /// Magnitudes in [0.2, 1] so kinks at zero are never crossed.
        AwayFromZero,
        /// Well separated values so maxima are unique.
        Distinct,
    }

    fn draw(rng: &mut ChaCha8Rng, shape: &[usize], how: Draw) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = match how {
            Draw::Signed => (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            Draw::Positive => (0..n).map(|_| rng.random_range(0.2..2.0)).collect(),
            Draw::AwayFromZero => (0..n)
                .map(|_| {
                    let m = rng.random_range(0.2..1.0);
                    if rng.random::<bool>() { m } else { -m }
                })
                .collect(),
            Draw::Distinct => {
                let mut v: Vec<f64> = (0..n).map(|i| 0.1 * i as f64).collect();
                for i in (1..n).rev() {
                    v.swap(i, rng.random_range(0..=i));
                }
                v
            }
        };
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Checks `Σ w ⊙ f(x)` for a random fixed `w` against central differences.
    fn check_op<F>(seed: u64, inputs: &[(Vec<usize>, Draw)], f: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> =
            inputs.iter().enumerate().map(|(i, (s, how))| store.add(format!("x{i}"), draw(&mut rng, s, *how)).unwrap()).collect();
        let out_shape = {
            let mut tape = Tape::new();
            let xs: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
            let y = f(&mut tape, &xs).unwrap();
            tape.shape(y).to_vec()
        };
        let w = draw(&mut rng, &out_shape, Draw::Signed);
        let report = grad_check(&mut store, 1e-6, 1e-4, |tape, st| {
            let xs: Vec<Var> = ids.iter().map(|&id| tape.param(st, id)).collect();
            let y = f(tape, &xs)?;
            let wv = tape.constant(w.clone());
            let p = tape.mul(y, wv)?;
            Ok(tape.sum(p))
        })
        .unwrap();
        assert!(report.passed(), "seed {seed}: {:?}", report.worst());
    }

    fn dims(seed: u64, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1);
        (0..n).map(|_| rng.random_range(1..5)).collect()
    }

    const SEEDS: u64 = 20;

    #[test]
    fn matmul_family_gradients() {
        for s in 0..SEEDS {
            let d = dims(s, 3);
            check_op(s, &[(vec![d[0], d[1]], Draw::Signed), (vec![d[1], d[2]], Draw::Signed)], |t, x| t.matmul(x[0], x[1]));
            check_op(s, &[(vec![d[0], d[1]], Draw::Signed), (vec![d[2], d[1]], Draw::Signed)], |t, x| t.matmul_t(x[0], x[1]));
            check_op(s, &[(vec![d[0], d[1]], Draw::Signed)], |t, x| t.transpose(x[0]));
        }
    }

    #[test]
    fn binary_gradients_with_broadcast() {
        for s in 0..SEEDS {
            let d = dims(s, 2);
            let same = [(vec![d[0], d[1]], Draw::Signed), (vec![d[0], d[1]], Draw::Signed)];
            check_op(s, &same, |t, x| t.add(x[0], x[1]));
            check_op(s, &same, |t, x| t.sub(x[0], x[1]));
            check_op(s, &same, |t, x| t.mul(x[0], x[1]));
            check_op(s, &[(vec![1], Draw::Signed), (vec![d[0], d[1]], Draw::Signed)], |t, x| t.mul(x[0], x[1]));
            check_op(s, &[(vec![d[0], d[1]], Draw::Signed), (vec![1], Draw::Signed)], |t, x| t.sub(x[0], x[1]));
            check_op(s, &[(vec![d[0], d[1]], Draw::Distinct), (vec![d[0], d[1]], Draw::Distinct)], |t, x| {
                let b = t.shift(x[1], 0.05);
                t.maximum(x[0], b)
            });
        }
    }

    #[test]
    fn elementwise_gradients() {
        for s in 0..SEEDS {
            let shape = dims(s, 2);
            let signed = [(shape.clone(), Draw::Signed)];
            let positive = [(shape.clone(), Draw::Positive)];
            let kinked = [(shape.clone(), Draw::AwayFromZero)];
            check_op(s, &signed, |t, x| Ok(t.scale(x[0], -1.7)));
            check_op(s, &signed, |t, x| Ok(t.shift(x[0], 0.3)));
            check_op(s, &signed, |t, x| Ok(t.neg(x[0])));
            check_op(s, &signed, |t, x| Ok(t.tanh(x[0])));
            check_op(s, &signed, |t, x| Ok(t.sigmoid(x[0])));
            check_op(s, &signed, |t, x| Ok(t.exp(x[0])));
            check_op(s, &signed, |t, x| Ok(t.square(x[0])));
            check_op(s, &kinked, |t, x| Ok(t.relu(x[0])));
            check_op(s, &kinked, |t, x| Ok(t.clamp_min(x[0], 0.0)));
            check_op(s, &positive, |t, x| t.log(x[0]));
            check_op(s, &positive, |t, x| t.sqrt(x[0]));
            let n: usize = shape.iter().product();
            let mask: Vec<f64> = (0..n).map(|i| (i % 3) as f64).collect();
            check_op(s, &signed, move |t, x| t.mask(x[0], mask.clone()));
        }
    }

    #[test]
    fn reduction_and_normalisation_gradients() {
        for s in 0..SEEDS {
            let d = dims(s, 2);
            let x = [(vec![d[0], d[1] + 1], Draw::Signed)];
            check_op(s, &x, |t, x| Ok(t.sum(x[0])));
            check_op(s, &x, |t, x| t.sum_axis(x[0], 0));
            check_op(s, &x, |t, x| t.sum_axis(x[0], 1));
            check_op(s, &x, |t, x| t.softmax(x[0], 0));
            check_op(s, &x, |t, x| t.softmax(x[0], 1));
            check_op(s, &x, |t, x| Ok(t.log_softmax(x[0])));
            check_op(s, &x, |t, x| Ok(t.layer_norm(x[0], 1e-5)));
            let bias = [(vec![d[0], d[1]], Draw::Signed), (vec![d[1]], Draw::Signed)];
            check_op(s, &bias, |t, x| t.add_bias(x[0], x[1]));
            check_op(s, &bias, |t, x| t.mul_gain(x[0], x[1]));
        }
    }

    #[test]
    fn shape_gradients() {
        for s in 0..SEEDS {
            let d = dims(s, 3);
            let x = [(vec![d[0], d[1], d[2] + 1], Draw::Signed)];
            check_op(s, &x, |t, x| t.reshape(x[0], &[d[0] * d[1], d[2] + 1]));
            check_op(s, &x, |t, x| t.slice(x[0], 2, 1, d[2]));
            check_op(s, &x, |t, x| t.slice(x[0], 0, 0, 1));
            let parts = [(vec![d[0], d[1]], Draw::Signed), (vec![d[0], d[2]], Draw::Signed)];
            check_op(s, &parts, |t, x| t.concat(&[x[0], x[1], x[0]], 1));
            check_op(s, &[(vec![d[0], 5], Draw::Signed)], |t, x| t.gather_cols(x[0], &[4, 0, 4]));
            check_op(s, &[(vec![d[0], 5], Draw::Signed)], |t, x| t.pick(x[0], &[0, 3, 3]));
        }
    }

    #[test]
    fn spatial_gradients() {
        for s in 0..SEEDS {
            let d = dims(s, 3);
            let (h, w, c) = (d[0] + 1, d[1] + 1, d[2]);
            check_op(s, &[(vec![h, w, c], Draw::Signed), (vec![3, 3, c, 2], Draw::Signed)], |t, x| t.conv2d(x[0], x[1]));
            check_op(s, &[(vec![2, h, w, c], Draw::Signed), (vec![1, 1, c, 3], Draw::Signed)], |t, x| t.conv2d(x[0], x[1]));
            check_op(s, &[(vec![2, h, w], Draw::Signed), (vec![3, w], Draw::Signed)], |t, x| t.grid_modulate(x[0], x[1]));
            check_op(s, &[(vec![2 * h, 2 * w, c], Draw::Distinct)], |t, x| t.pool2d(x[0], PoolKind::Max, Some((2, 2))));
            check_op(s, &[(vec![2 * h, 2 * w, c], Draw::Signed)], |t, x| t.pool2d(x[0], PoolKind::Avg, Some((2, 2))));
            check_op(s, &[(vec![h, w, c], Draw::Signed)], |t, x| t.pool2d(x[0], PoolKind::Avg, None));
            check_op(s, &[(vec![h, w, c], Draw::Signed)], |t, x| t.pad_hw(x[0], h + 1, w + 2));
        }
    }

    #[test]
    fn sketch_gradients() {
        for s in 0..SEEDS {
            let n = 2 + s as usize % 7;
            let pair = [(vec![1, n], Draw::Signed), (vec![1, n], Draw::Signed)];
            check_op(s, &pair, |t, x| t.circular_convolve(x[0], x[1]));
            let hash = Arc::new((0..n).map(|i| (i * 5) % 4).collect::<Vec<_>>());
            let sign = Arc::new((0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect::<Vec<i8>>());
            check_op(s, &[(vec![1, n], Draw::Signed)], move |t, x| t.count_sketch(x[0], hash.clone(), sign.clone(), 4));
        }
    }

    #[test]
    fn sigmoid_derivative_at_two() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_grad());
        let y = tape.sigmoid(x);
        tape.backward(y).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let h = 1e-5;
        let numeric = (sig(2.0 + h) - sig(2.0 - h)) / (2.0 * h);
        assert!((tape.grad(x).unwrap()[0] - numeric).abs() < 1e-7);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap().with_grad());
        let y = tape.relu(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_pool_tie_routes_to_first_index() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 2, 1], vec![1.0, 1.0, 0.5, 1.0]).unwrap().with_grad());
        let y = tape.pool2d(x, PoolKind::Max, None).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.data(y), &[1.0]);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_parameter_accumulates_both_paths() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(3.0f64)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_requires_a_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
        assert!(tape.slice(a, 1, 2, 2).is_err());
        assert!(tape.softmax(a, 2).is_err());
        assert!(tape.dropout(a, 1.0).is_err());
    }

    #[test]
    fn dropout_is_identity_at_inference_and_scaled_in_training() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::ones(vec![1000]));
        let d = tape.dropout(a, 0.5).unwrap();
        assert_eq!(tape.data(d), tape.data(a));
        let mut tape = Tape::<f64>::training(4);
        let a = tape.constant(Tensor::ones(vec![1000]));
        let d = tape.dropout(a, 0.5).unwrap();
        assert!(tape.data(d).iter().all(|&x| x == 0.0 || x == 2.0));
        let kept = tape.data(d).iter().filter(|&&x| x > 0.0).count();
        assert!((400..600).contains(&kept), "{kept}");
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(rows in 1usize..5, vals in prop::collection::vec(-30.0f64..30.0, 1..40), c in -50.0f64..50.0) {
            let cols = vals.len();
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::new(vec![1, cols], vals.clone()).unwrap());
            let x = tape.concat(&vec![x; rows], 0).unwrap();
            let p = tape.softmax(x, 1).unwrap();
            let shifted = tape.shift(x, c);
            let q = tape.softmax(shifted, 1).unwrap();
            for r in tape.data(p).chunks(cols) {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                prop_assert!(r.iter().all(|&v| v >= 0.0));
            }
            for (a, b) in tape.data(p).iter().zip(tape.data(q)) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
            let am = |v: &[f64]| crate::models::argmax(v);
            prop_assert_eq!(am(&tape.data(p)[..cols]), am(&tape.data(q)[..cols]));
        }
    }
}
