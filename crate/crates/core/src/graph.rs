//! Reverse-mode automatic differentiation over an append-only node list.
//!
//! Every operation appends one node holding its forward value plus whatever
//! it needs for the backward pass. Nodes only reference earlier nodes, so the
//! list is already in topological order and `backward` is a single reverse
//! sweep that visits each node once.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::conv::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{strides, Tensor};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train mode uses batch statistics and dropout; eval mode uses running
/// statistics and disables dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add { a: Var, b: Var, bmap: Option<Vec<usize>> },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var, bmap: Option<Vec<usize>> },
    Scale { a: Var, k: f64 },
    AddScalar { a: Var },
    Relu(Var),
    LeakyRelu { a: Var, slope: f64 },
    Sigmoid(Var),
    Tanh(Var),
    Softmax { a: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { a: Var, axis: usize },
    Matmul { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Permute { a: Var, perm: Vec<usize> },
    Reshape(Var),
    Slice { a: Var, axis: usize, start: usize },
    Concat { a: Var, b: Var, axis: usize },
    Shift { a: Var, axis: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { a: Var, argmax: Vec<usize> },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { a: Var, mask: Vec<f64> },
    Mse { a: Var, b: Var },
    L1 { a: Var, b: Var },
    BceLogits { a: Var, target: f64 },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

/// A recorded computation. Parameter values are borrowed from the store.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Overwrites every gradient slot in `store`: reached parameters get their
    /// gradient, all others get zero.
    pub fn write_to(&self, store: &mut ParamStore) {
        store.zero_grad();
        for &(pid, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                store.get_mut(pid).grad.add_assign(g);
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Flat index into `b` for each element of `a`, under right-aligned
/// broadcasting of `b` against `a`. `None` when the shapes are equal.
fn broadcast_map(op: &'static str, a: &[usize], b: &[usize]) -> Result<Option<Vec<usize>>> {
    if a == b {
        return Ok(None);
    }
    let bad = || Error::shape(op, format!("cannot broadcast {:?} onto {:?}", b, a));
    if b.len() > a.len() {
        return Err(bad());
    }
    let pad = a.len() - b.len();
    let bs = strides(b);
    let mut eff = vec![0usize; a.len()];
    for (i, (&bd, &s)) in b.iter().zip(&bs).enumerate() {
        let ad = a[pad + i];
        if bd == ad {
            eff[pad + i] = s;
        } else if bd != 1 {
            return Err(bad());
        }
    }
    let n: usize = a.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; a.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..a.len()).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < a[d] {
                break;
            }
            off -= eff[d] * a[d];
            idx[d] = 0;
        }
    }
    Ok(Some(map))
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; perm.len()];
    let mut off = 0usize;
    let src = t.data();
    for _ in 0..n {
        out.push(src[off]);
        for d in (0..perm.len()).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn shift_forward(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let mut out = vec![0.0; t.numel()];
    let src = t.data();
    for o in 0..outer {
        let base = o * len * inner;
        out[base + inner..base + len * inner].copy_from_slice(&src[base..base + (len - 1) * inner]);
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

fn shift_backward(dy: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(dy.shape(), axis);
    let mut out = vec![0.0; dy.numel()];
    let src = dy.data();
    for o in 0..outer {
        let base = o * len * inner;
        out[base..base + (len - 1) * inner].copy_from_slice(&src[base + inner..base + len * inner]);
    }
    Tensor::from_parts(dy.shape().to_vec(), out)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    /// A graph that can read parameters from `store`.
    pub fn new(store: &'p ParamStore, mode: Mode) -> Self {
        Graph { store: Some(store), nodes: Vec::new(), param_vars: HashMap::new(), mode, buffer_updates: Vec::new() }
    }

    /// A graph with no parameter store, for pure tensor computations.
    pub fn standalone() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode: Mode::Eval,
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    fn store(&self, op: &'static str) -> Result<&'p ParamStore> {
        self.store.ok_or_else(|| Error::arg(op, "graph has no parameter store"))
    }

    /// Running-statistic updates produced by train-mode batch norm.
    pub fn into_buffer_updates(self) -> Vec<(ParamId, Tensor)> {
        self.buffer_updates
    }

    /// Digest of every piecewise branch taken so far: rectifier signs,
    /// max-pool winners and L1 signs. Two evaluations with equal digests
    /// lie on the same smooth piece, which is what a finite-difference
    /// comparison needs.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{DefaultHasher, Hash, Hasher};
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(a) | Op::LeakyRelu { a, .. } => {
                    i.hash(&mut h);
                    for &v in self.value(*a).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::L1 { a, b } => {
                    i.hash(&mut h);
                    for (x, y) in self.value(*a).data().iter().zip(self.value(*b).data()) {
                        x.partial_cmp(y).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    // ── leaves ───────────────────────────────────────────────────────

    /// Records an input or constant.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records a parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let store = self.store("param")?;
        if id.0 >= store.len() {
            return Err(Error::arg("param", format!("no parameter with id {}", id.0)));
        }
        self.nodes.push(Node { value: Cow::Borrowed(store.value(id)), op: Op::Param });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    // ── elementwise ──────────────────────────────────────────────────

    /// `a + b`, with `b` broadcast onto the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bmap = broadcast_map("add", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data: Vec<f64> = match &bmap {
            None => av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect(),
            Some(m) => av.data().iter().zip(m).map(|(x, &j)| x + bv.data()[j]).collect(),
        };
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(out, Op::Add { a, b, bmap }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("sub", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(out, Op::Sub { a, b }))
    }

    /// Elementwise `a * b`, with `b` broadcast onto the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bmap = broadcast_map("mul", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data: Vec<f64> = match &bmap {
            None => av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
            Some(m) => av.data().iter().zip(m).map(|(x, &j)| x * bv.data()[j]).collect(),
        };
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul { a, b, bmap }))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::Scale { a, k })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar { a })
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu { a, slope })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Inverted dropout: zeroes each element with probability `p` in train
    /// mode and rescales survivors by `1/(1-p)`. Identity in eval mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::arg("dropout", format!("probability {p} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> =
            (0..self.value(a).numel()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let av = self.value(a);
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(out, Op::Dropout { a, mask }))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a))
    }

    /// Sums over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg("sum_axis", format!("axis {axis} for rank {}", shape.len())));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &src[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::SumAxis { a, axis }))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg("softmax", format!("axis {axis} for rank {}", shape.len())));
        }
        let out = softmax_tensor(self.value(a), axis);
        Ok(self.push(out, Op::Softmax { a, axis }))
    }

    // ── linear algebra ───────────────────────────────────────────────

    /// Batched matrix product over the last two axes. Leading axes must match.
    /// With `trans_b`, `b` is read as `[..., N, K]` and used transposed.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::shape("matmul", format!("{:?} x {:?} (trans_b={trans_b})", sa, sb));
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(err());
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let am = MatRef::row_major(&ad[i * m * k..(i + 1) * m * k], m, k);
            let bslice = &bd[i * k * n..(i + 1) * k * n];
            let bm = if trans_b { MatRef::row_major(bslice, n, k).t() } else { MatRef::row_major(bslice, k, n) };
            gemm(am, bm, 0.0, &mut out[i * m * n..(i + 1) * m * n]);
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Matmul { a, b, trans_b }))
    }

    /// Affine map over the last axis: `x · wᵀ + b` with `w: [Dout, Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || *sx.last().unwrap() != sw[1] {
            return Err(Error::shape("linear", format!("input {:?} with weight {:?}", sx, sw)));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("linear", format!("bias {:?} for weight {:?}", self.shape(b), sw)));
            }
        }
        let (dout, din) = (sw[0], sw[1]);
        let rows = self.value(x).numel() / din;
        let mut out = vec![0.0; rows * dout];
        gemm(
            MatRef::row_major(self.value(x).data(), rows, din),
            MatRef::row_major(self.value(w).data(), dout, din).t(),
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bd).for_each(|(o, bv)| *o += bv);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }))
    }

    // ── layout ───────────────────────────────────────────────────────

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let r = self.shape(a).len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::arg("permute", format!("{:?} is not a permutation of rank {r}", perm)));
        }
        let out = permute_tensor(self.value(a), perm);
        Ok(self.push(out, Op::Permute { a, perm: perm.to_vec() }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::arg("slice", format!("[{start}, {}) of axis {axis} in {:?}", start + len, shape)));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Slice { a, axis, start }))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !ok {
            return Err(Error::shape("concat", format!("{:?} and {:?} along axis {axis}", sa, sb)));
        }
        let (outer, la, inner) = axis_split(&sa, axis);
        let lb = sb[axis];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for o in 0..outer {
            out.extend_from_slice(&ad[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&bd[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = sa;
        shape[axis] = la + lb;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { a, b, axis }))
    }

    /// Moves every entry one step along `axis`, inserting zeros at index 0
    /// and dropping the last entry.
    pub fn shift(&mut self, a: Var, axis: usize) -> Result<Var> {
        if axis >= self.shape(a).len() {
            return Err(Error::arg("shift", format!("axis {axis} for shape {:?}", self.shape(a))));
        }
        let out = shift_forward(self.value(a), axis);
        Ok(self.push(out, Op::Shift { a, axis }))
    }

    /// Shift along the last (column) axis.
    pub fn shift_right(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        self.shift(a, r - 1)
    }

    /// Shift along the second-to-last (row) axis.
    pub fn shift_down(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::arg("shift_down", "needs rank >= 2"));
        }
        self.shift(a, r - 2)
    }

    // ── convolution and pooling ──────────────────────────────────────

    /// Cross-correlation of `x: [N,Cin,H,W]` with `w: [Cout,Cin,kH,kW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", format!("input {:?} with weight {:?}", sx, sw)));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d", "stride must be >= 1"));
        }
        if sx[2] + 2 * padding < sw[2] || sx[3] + 2 * padding < sw[3] {
            return Err(Error::shape("conv2d", format!("kernel {:?} larger than padded input {:?}", sw, sx)));
        }
        self.check_bias("conv2d", b, sw[0])?;
        let geom = ConvGeom { cin: sx[1], h: sx[2], w: sx[3], kh: sw[2], kw: sw[3], stride, pad: padding };
        let out = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }))
    }

    /// Transposed convolution of `x: [N,Cin,H,W]` with `w: [Cin,Cout,kH,kW]`;
    /// output extent `(H-1)·stride + kH`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(Error::shape("conv_transpose2d", format!("input {:?} with weight {:?}", sx, sw)));
        }
        if stride == 0 {
            return Err(Error::arg("conv_transpose2d", "stride must be >= 1"));
        }
        self.check_bias("conv_transpose2d", b, sw[1])?;
        let geom = conv::transpose_geom(&sx, &sw, stride);
        let mut out = conv::conv2d_backward_input(self.value(x), self.value(w), &geom);
        if let Some(b) = b {
            let bd = self.value(b).data().to_vec();
            let plane = geom.h * geom.w;
            for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let bv = bd[i % bd.len()];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom }))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        match b {
            Some(b) if self.shape(b) != [channels] => {
                Err(Error::shape(op, format!("bias {:?} for {channels} output channels", self.shape(b))))
            }
            _ => Ok(()),
        }
    }

    /// Max pooling over `k×k` windows. The gradient goes to the first
    /// (row-major) maximum of each window.
    pub fn maxpool2d(&mut self, a: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("maxpool2d", format!("expected [N,C,H,W], got {:?}", s)));
        }
        if k == 0 || stride == 0 || s[2] % stride != 0 || s[3] % stride != 0 || k > s[2] || k > s[3] {
            return Err(Error::arg(
                "maxpool2d",
                format!("extent {}x{} incompatible with window {k}, stride {stride}", s[2], s[3]),
            ));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let src = self.value(a).data();
        let planes = s[0] * s[1];
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * stride * w + j * stride;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (i * stride + di) * w + j * stride + dj;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::from_parts(vec![s[0], s[1], oh, ow], out);
        Ok(self.push(t, Op::MaxPool { a, argmax }))
    }

    // ── normalization ────────────────────────────────────────────────

    /// Per-channel batch normalization of `[N,C,H,W]`. Train mode normalizes
    /// with batch statistics and queues a momentum update of the running
    /// statistics; eval mode uses the running statistics.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("batchnorm2d", format!("expected [N,C,H,W], got {:?}", s)));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let store = self.store("batchnorm2d")?;
        for id in [gamma, beta, running_mean, running_var] {
            if store.value(id).shape() != [c] {
                return Err(Error::shape("batchnorm2d", format!("`{}` must be [{c}]", store.get(id).name)));
            }
        }
        let count = n * plane;
        let (mean, var) = match self.mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::arg("batchnorm2d", "train mode needs N·H·W >= 2"));
                }
                let src = self.value(x).data();
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * plane;
                        mean[ch] += src[o..o + plane].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * plane;
                        var[ch] += src[o..o + plane].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let rm = store.value(running_mean).data();
                let rv = store.value(running_var).data();
                let unbias = count as f64 / (count - 1) as f64;
                let new_mean: Vec<f64> =
                    (0..c).map(|i| (1.0 - BATCHNORM_MOMENTUM) * rm[i] + BATCHNORM_MOMENTUM * mean[i]).collect();
                let new_var: Vec<f64> =
                    (0..c).map(|i| (1.0 - BATCHNORM_MOMENTUM) * rv[i] + BATCHNORM_MOMENTUM * var[i] * unbias).collect();
                self.buffer_updates.push((running_mean, Tensor::from_parts(vec![c], new_mean)));
                self.buffer_updates.push((running_var, Tensor::from_parts(vec![c], new_var)));
                (mean, var)
            }
            Mode::Eval => (store.value(running_mean).data().to_vec(), store.value(running_var).data().to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let (gv, bv) = (store.value(gamma).data(), store.value(beta).data());
        let src = self.value(x).data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * plane;
                for i in o..o + plane {
                    xhat[i] = (src[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let (gamma, beta) = (self.param(gamma)?, self.param(beta)?);
        let t = Tensor::from_parts(s, out);
        let op = match self.mode {
            Mode::Train => Op::BatchNormTrain { x, gamma, beta, xhat, inv_std },
            Mode::Eval => Op::BatchNormEval { x, gamma, beta, xhat, inv_std },
        };
        Ok(self.push(t, op))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", format!("affine parameters must be [{c}]")));
        }
        let src = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / c;
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std.push(is);
            for k in 0..c {
                let xh = (row[k] - mean) * is;
                xhat[r * c + k] = xh;
                out[r * c + k] = gv[k] * xh + bv[k];
            }
        }
        let t = Tensor::from_parts(s, out);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    // ── losses ───────────────────────────────────────────────────────

    /// Mean of squared differences.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse_loss", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let v = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / av.numel() as f64;
        Ok(self.push(Tensor::scalar(v), Op::Mse { a, b }))
    }

    /// Mean absolute difference; subgradient 0 at ties.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("l1_loss", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let v = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / av.numel() as f64;
        Ok(self.push(Tensor::scalar(v), Op::L1 { a, b }))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a constant
    /// label, in the overflow-free form `max(x,0) - x·t + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, target: f64) -> Var {
        let av = self.value(logits);
        let v = av.data().iter().map(|&x| x.max(0.0) - x * target + (-x.abs()).exp().ln_1p()).sum::<f64>()
            / av.numel() as f64;
        self.push(Tensor::scalar(v), Op::BceLogits { a: logits, target })
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let mut params: Vec<(ParamId, Var)> = self.param_vars.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &*node.value;
        let mut acc = |v: Var, g: Tensor| match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        let map = |t: &Tensor, f: &dyn Fn(usize, f64) -> f64| {
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().enumerate().map(|(k, &g)| f(k, g)).collect())
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add { a, b, bmap } => {
                acc(*a, gy.clone());
                acc(*b, reduce_broadcast(gy, bmap.as_deref(), self.shape(*b)));
            }
            Op::Sub { a, b } => {
                acc(*a, gy.clone());
                acc(*b, gy.map(|g| -g));
            }
            Op::Mul { a, b, bmap } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = match bmap {
                    None => map(gy, &|k, g| g * bv[k]),
                    Some(m) => map(gy, &|k, g| g * bv[m[k]]),
                };
                let prod = map(gy, &|k, g| g * av[k]);
                acc(*a, ga);
                acc(*b, reduce_broadcast(&prod, bmap.as_deref(), self.shape(*b)));
            }
            Op::Scale { a, k } => acc(*a, gy.map(|g| g * k)),
            Op::AddScalar { a } => acc(*a, gy.clone()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, map(gy, &|k, g| if x[k] > 0.0 { g } else { 0.0 }));
            }
            Op::LeakyRelu { a, slope } => {
                let x = self.value(*a).data();
                acc(*a, map(gy, &|k, g| if x[k] > 0.0 { g } else { g * slope }));
            }
            Op::Sigmoid(a) => {
                let yd = y.data();
                acc(*a, map(gy, &|k, g| g * yd[k] * (1.0 - yd[k])));
            }
            Op::Tanh(a) => {
                let yd = y.data();
                acc(*a, map(gy, &|k, g| g * (1.0 - yd[k] * yd[k])));
            }
            Op::Dropout { a, mask } => acc(*a, map(gy, &|k, g| g * mask[k])),
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a), gy.item())),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                acc(*a, Tensor::full(self.shape(*a), gy.item() / n));
            }
            Op::SumAxis { a, axis } => {
                let shape = self.shape(*a).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let mut out = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &gy.data()[o * inner..(o + 1) * inner];
                    for k in 0..len {
                        out[(o * len + k) * inner..(o * len + k + 1) * inner].copy_from_slice(src);
                    }
                }
                acc(*a, Tensor::from_parts(shape, out));
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let (yd, gd) = (y.data(), gy.data());
                let mut out = vec![0.0; yd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + j;
                        let dot: f64 = (0..len).map(|k| yd[idx(k)] * gd[idx(k)]).sum();
                        for k in 0..len {
                            out[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                acc(*a, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::Matmul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = y.shape()[r - 1];
                let batch: usize = sa[..r - 2].iter().product();
                let (ad, bd, gd) = (self.value(*a).data(), self.value(*b).data(), gy.data());
                let mut da = vec![0.0; ad.len()];
                let mut db = vec![0.0; bd.len()];
                for i in 0..batch {
                    let am = MatRef::row_major(&ad[i * m * k..(i + 1) * m * k], m, k);
                    let gm = MatRef::row_major(&gd[i * m * n..(i + 1) * m * n], m, n);
                    let bs = &bd[i * k * n..(i + 1) * k * n];
                    let da_i = &mut da[i * m * k..(i + 1) * m * k];
                    let db_i = &mut db[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // y = a bᵀ, b: [n,k]
                        gemm(gm, MatRef::row_major(bs, n, k), 0.0, da_i);
                        gemm(gm.t(), am, 0.0, db_i);
                    } else {
                        gemm(gm, MatRef::row_major(bs, k, n).t(), 0.0, da_i);
                        gemm(am.t(), gm, 0.0, db_i);
                    }
                }
                acc(*a, Tensor::from_parts(sa.to_vec(), da));
                acc(*b, Tensor::from_parts(sb.to_vec(), db));
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (dout, din) = (sw[0], sw[1]);
                let xd = self.value(*x).data();
                let rows = xd.len() / din;
                let gm = MatRef::row_major(gy.data(), rows, dout);
                let mut dx = vec![0.0; xd.len()];
                gemm(gm, MatRef::row_major(self.value(*w).data(), dout, din), 0.0, &mut dx);
                let mut dw = vec![0.0; dout * din];
                gemm(gm.t(), MatRef::row_major(xd, rows, din), 0.0, &mut dw);
                acc(*x, Tensor::from_parts(self.shape(*x).to_vec(), dx));
                acc(*w, Tensor::from_parts(sw.to_vec(), dw));
                if let Some(b) = b {
                    let mut db = vec![0.0; dout];
                    for row in gy.data().chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    acc(*b, Tensor::from_parts(vec![dout], db));
                }
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*a, permute_tensor(gy, &inv));
            }
            Op::Reshape(a) => {
                acc(*a, Tensor::from_parts(self.shape(*a).to_vec(), gy.data().to_vec()));
            }
            Op::Slice { a, axis, start } => {
                let shape = self.shape(*a).to_vec();
                let (outer, full, inner) = axis_split(&shape, *axis);
                let len = y.shape()[*axis];
                let mut out = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    out[dst..dst + len * inner].copy_from_slice(&gy.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*a, Tensor::from_parts(shape, out));
            }
            Op::Concat { a, b, axis } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (outer, la, inner) = axis_split(&sa, *axis);
                let lb = sb[*axis];
                let mut ga = Vec::with_capacity(outer * la * inner);
                let mut gb = Vec::with_capacity(outer * lb * inner);
                let gd = gy.data();
                for o in 0..outer {
                    let base = o * (la + lb) * inner;
                    ga.extend_from_slice(&gd[base..base + la * inner]);
                    gb.extend_from_slice(&gd[base + la * inner..base + (la + lb) * inner]);
                }
                acc(*a, Tensor::from_parts(sa, ga));
                acc(*b, Tensor::from_parts(sb, gb));
            }
            Op::Shift { a, axis } => acc(*a, shift_backward(gy, *axis)),
            Op::Conv2d { x, w, b, geom } => {
                let wv = self.value(*w);
                acc(*x, conv::conv2d_backward_input(gy, wv, geom));
                acc(*w, conv::conv2d_backward_weight(self.value(*x), gy, wv.shape(), geom));
                if let Some(b) = b {
                    acc(*b, conv::channel_sum(gy));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                // Forward was the input-gradient of a conv with weight `w`
                // taking `gy`-shaped images to `x`-shaped ones.
                let wv = self.value(*w);
                acc(*x, conv::conv2d_forward(gy, wv, None, geom));
                acc(*w, conv::conv2d_backward_weight(gy, self.value(*x), wv.shape(), geom));
                if let Some(b) = b {
                    acc(*b, conv::channel_sum(gy));
                }
            }
            Op::MaxPool { a, argmax } => {
                let mut out = Tensor::zeros(self.shape(*a));
                let od = out.data_mut();
                for (&src, g) in argmax.iter().zip(gy.data()) {
                    od[src] += g;
                }
                acc(*a, out);
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let s = self.shape(*x);
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let m = (n * plane) as f64;
                let gv = self.value(*gamma).data();
                let gd = gy.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * plane;
                        for i in o..o + plane {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                let mut dx = vec![0.0; gd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * plane;
                        // Σ dxhat = γ·Σdy, Σ dxhat·xhat = γ·dγ
                        let k = gv[ch] * inv_std[ch] / m;
                        for i in o..o + plane {
                            dx[i] = k * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                        }
                    }
                }
                acc(*x, Tensor::from_parts(s.to_vec(), dx));
                acc(*gamma, Tensor::from_parts(vec![c], dgamma));
                acc(*beta, Tensor::from_parts(vec![c], dbeta));
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let s = self.shape(*x);
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gv = self.value(*gamma).data();
                let gd = gy.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; gd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * plane;
                        for i in o..o + plane {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                            dx[i] = gd[i] * gv[ch] * inv_std[ch];
                        }
                    }
                }
                acc(*x, Tensor::from_parts(s.to_vec(), dx));
                acc(*gamma, Tensor::from_parts(vec![c], dgamma));
                acc(*beta, Tensor::from_parts(vec![c], dbeta));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = *self.shape(*x).last().unwrap();
                let gv = self.value(*gamma).data();
                let gd = gy.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; gd.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let row = r * c..(r + 1) * c;
                    let (g, xh) = (&gd[row.clone()], &xhat[row.clone()]);
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for k in 0..c {
                        let d = g[k] * gv[k];
                        sum_d += d;
                        sum_dx += d * xh[k];
                        dgamma[k] += g[k] * xh[k];
                        dbeta[k] += g[k];
                    }
                    let cf = c as f64;
                    for k in 0..c {
                        let d = g[k] * gv[k];
                        dx[r * c + k] = is / cf * (cf * d - sum_d - xh[k] * sum_dx);
                    }
                }
                acc(*x, Tensor::from_parts(self.shape(*x).to_vec(), dx));
                acc(*gamma, Tensor::from_parts(vec![c], dgamma));
                acc(*beta, Tensor::from_parts(vec![c], dbeta));
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = 2.0 * gy.item() / av.numel() as f64;
                let d: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, t)| k * (x - t)).collect();
                let neg = d.iter().map(|v| -v).collect();
                acc(*a, Tensor::from_parts(av.shape().to_vec(), d));
                acc(*b, Tensor::from_parts(bv.shape().to_vec(), neg));
            }
            Op::L1 { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = gy.item() / av.numel() as f64;
                let sign = |v: f64| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                let d: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, t)| k * sign(x - t)).collect();
                let neg = d.iter().map(|v| -v).collect();
                acc(*a, Tensor::from_parts(av.shape().to_vec(), d));
                acc(*b, Tensor::from_parts(bv.shape().to_vec(), neg));
            }
            Op::BceLogits { a, target } => {
                let av = self.value(*a);
                let k = gy.item() / av.numel() as f64;
                acc(*a, av.map(|x| k * (sigmoid(x) - target)));
            }
        }
    }
}

use crate::ops::gemm::{gemm, MatRef};

fn reduce_broadcast(g: &Tensor, bmap: Option<&[usize]>, b_shape: &[usize]) -> Tensor {
    match bmap {
        None => g.clone(),
        Some(m) => {
            let mut out = Tensor::zeros(b_shape);
            let od = out.data_mut();
            for (&j, v) in m.iter().zip(g.data()) {
                od[j] += v;
            }
            out
        }
    }
}

pub(crate) fn softmax_tensor(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + j;
            let max = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (src[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] /= total;
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}
