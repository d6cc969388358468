//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op appends a node holding its forward value. Inputs always have
//! smaller ids than their consumers, so a reverse sweep over the tape is a
//! valid topological order. Binary elementwise ops broadcast with numpy
//! rules (trailing dimensions aligned).

use std::cell::{Cell, Ref, RefCell};

use super::conv::{self, ConvGeometry};
use super::tensor::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddConst(Var, T),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    Powf(Var, T),
    ClampMin(Var, T),
    /// Forward value is rounded to a grid; gradient passes straight through.
    RoundSte(Var),
    Sum(Var),
    Mean(Var),
    MeanPerSample(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    ChannelDense(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// A tape of tensor operations.
pub struct Graph<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    clamp_hits: Cell<u64>,
    track_branches: Cell<bool>,
    branch_signature: Cell<u64>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

enum Bcast {
    Same,
    Scalar,
    Map(Vec<usize>),
}

impl Bcast {
    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Map(m) => m[i],
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

fn broadcast_map(out: &[usize], input: &[usize]) -> Bcast {
    if out == input {
        return Bcast::Same;
    }
    if numel(input) == 1 {
        return Bcast::Scalar;
    }
    let rank = out.len();
    let offset = rank - input.len();
    // Strides of `input` expressed on the output's axes (0 on broadcast axes).
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= input[i];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            pos += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            pos -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Bcast::Map(map)
}

fn permuted_shape(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    perm.iter().map(|&p| shape[p]).collect()
}

/// For each element of the permuted output, the flat index in the source.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * shape[i + 1];
    }
    let out_shape = permuted_shape(shape, perm);
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            pos += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            pos -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            clamp_hits: Cell::new(0),
            track_branches: Cell::new(false),
            branch_signature: Cell::new(FNV_OFFSET),
        }
    }

    /// Makes piecewise ops (`relu`, `abs`, `clamp_min`, `round_ste`) fold
    /// which piece every element landed on into [`Graph::branch_signature`].
    /// Two evaluations with different signatures straddle a point where the
    /// function is not differentiable.
    pub fn track_branches(&self) {
        self.track_branches.set(true);
    }

    pub fn branch_signature(&self) -> u64 {
        self.branch_signature.get()
    }

    /// Records branch choices made outside the graph (for example a sign
    /// computed from values and fed back as a constant).
    pub fn note_branches(&self, choices: impl IntoIterator<Item = i64>) {
        if !self.track_branches.get() {
            return;
        }
        let mut h = self.branch_signature.get();
        for c in choices {
            h = (h ^ c as u64).wrapping_mul(FNV_PRIME);
        }
        self.branch_signature.set(h);
    }

    fn note_pieces(&self, a: Var, piece: impl Fn(T) -> i64) {
        if self.track_branches.get() {
            let v = self.value(a);
            self.note_branches(v.data().iter().map(|&x| piece(x)));
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of elements that `clamp_min` has raised to its floor so far.
    pub fn clamp_hits(&self) -> u64 {
        self.clamp_hits.get()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let value = {
            let va = self.value(a);
            let vb = self.value(b);
            let shape = broadcast_shape(va.shape(), vb.shape())?;
            let ma = broadcast_map(&shape, va.shape());
            let mb = broadcast_map(&shape, vb.shape());
            let (da, db) = (va.data(), vb.data());
            let data = match (&ma, &mb) {
                (Bcast::Same, Bcast::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
                _ => (0..numel(&shape))
                    .map(|i| f(da[ma.index(i)], db[mb.index(i)]))
                    .collect(),
            };
            Tensor::new(shape, data)?
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_const(&self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddConst(a, c))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.note_pieces(a, |x| (x > T::zero()) as i64);
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Ln(a))
    }

    pub fn log2(&self, a: Var) -> Var {
        let l = self.ln(a);
        self.scale(l, T::one() / T::from_f64_lossy(std::f64::consts::LN_2))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.note_pieces(a, |x| (x >= T::zero()) as i64);
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn powf(&self, a: Var, p: T) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    /// `max(a, floor)`; elements raised to the floor receive zero gradient
    /// and are counted in [`Graph::clamp_hits`].
    pub fn clamp_min(&self, a: Var, floor: T) -> Var {
        let hits = self.value(a).data().iter().filter(|&&x| !(x >= floor)).count() as u64;
        self.clamp_hits.set(self.clamp_hits.get() + hits);
        self.note_pieces(a, |x| (x >= floor) as i64);
        self.unary(a, |x| if x >= floor { x } else { floor }, Op::ClampMin(a, floor))
    }

    /// Rounds to the nearest multiple of `step` in the forward pass and
    /// passes the gradient through unchanged.
    pub fn round_ste(&self, a: Var, step: T) -> Var {
        self.note_pieces(a, |x| (x / step).round().to_i64().unwrap_or(i64::MIN));
        self.unary(a, |x| (x / step).round() * step, Op::RoundSte(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&self, a: Var) -> Var {
        let (s, n) = {
            let v = self.value(a);
            (v.sum(), v.len())
        };
        let needs = self.needs(a);
        self.push(
            Tensor::scalar(s / T::from_usize(n).unwrap()),
            Op::Mean(a),
            needs,
        )
    }

    /// Mean over every axis but the first: `[N, ...] -> [N]`.
    pub fn mean_per_sample(&self, a: Var) -> Result<Var> {
        let value = {
            let v = self.value(a);
            let n = *v.shape().first().ok_or_else(|| Error::Shape("rank-0 tensor".into()))?;
            let per = v.len() / n.max(1);
            let denom = T::from_usize(per).unwrap();
            let data = v
                .data()
                .chunks(per.max(1))
                .map(|c| c.iter().copied().sum::<T>() / denom)
                .collect();
            Tensor::new(vec![n], data)?
        };
        let needs = self.needs(a);
        Ok(self.push(value, Op::MeanPerSample(a), needs))
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let va = self.value(a);
            let vb = self.value(b);
            let (sa, sb) = (va.shape(), vb.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                for p in 0..k {
                    let x = va.data()[i * k + p];
                    let row = &vb.data()[p * n..][..n];
                    for (o, &y) in out[i * n..][..n].iter_mut().zip(row) {
                        *o += x * y;
                    }
                }
            }
            Tensor::new(vec![m, n], out)?
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    /// Cross-correlation of `[N, C, H, W]` with `[O, C, KH, KW]` (kernel not flipped).
    pub fn conv2d(&self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (geom, value) = {
            let vi = self.value(input);
            let vk = self.value(kernel);
            let (si, sk) = (vi.shape(), vk.shape());
            if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || stride == 0 {
                return Err(Error::Shape(format!(
                    "conv2d input {si:?} kernel {sk:?} stride {stride}"
                )));
            }
            if si[2] + 2 * padding < sk[2] || si[3] + 2 * padding < sk[3] {
                return Err(Error::Shape(format!(
                    "conv2d kernel {sk:?} larger than padded input {si:?}"
                )));
            }
            let geom = ConvGeometry {
                n: si[0],
                c: si[1],
                h: si[2],
                w: si[3],
                o: sk[0],
                kh: sk[2],
                kw: sk[3],
                stride,
                padding,
            };
            let data = conv::forward(&geom, vi.data(), vk.data());
            (geom, Tensor::new(geom.out_shape(), data)?)
        };
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
            needs,
        ))
    }

    /// 2x2 average pooling with stride 2 on `[N, C, H, W]`. Odd trailing
    /// rows/columns are pooled with themselves, so the output is
    /// `ceil(H/2) x ceil(W/2)`.
    pub fn avg_pool2(&self, a: Var) -> Result<Var> {
        let value = {
            let v = self.value(a);
            let s = v.shape();
            if s.len() != 4 {
                return Err(Error::Shape(format!("avg_pool2 expects rank 4, got {s:?}")));
            }
            let (h, w) = (s[2], s[3]);
            let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
            let quarter = T::from_f64_lossy(0.25);
            let planes = s[0] * s[1];
            let mut out = Vec::with_capacity(planes * ho * wo);
            for p in 0..planes {
                let src = &v.data()[p * h * w..][..h * w];
                for y in 0..ho {
                    let (r0, r1) = (2 * y, (2 * y + 1).min(h - 1));
                    for x in 0..wo {
                        let (c0, c1) = (2 * x, (2 * x + 1).min(w - 1));
                        out.push(
                            (src[r0 * w + c0] + src[r0 * w + c1] + src[r1 * w + c0] + src[r1 * w + c1])
                                * quarter,
                        );
                    }
                }
            }
            Tensor::new(vec![s[0], s[1], ho, wo], out)?
        };
        let needs = self.needs(a);
        Ok(self.push(value, Op::AvgPool2(a), needs))
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2(&self, a: Var) -> Result<Var> {
        let value = {
            let v = self.value(a);
            let s = v.shape();
            if s.len() != 4 {
                return Err(Error::Shape(format!("upsample2 expects rank 4, got {s:?}")));
            }
            let (h, w) = (s[2], s[3]);
            let planes = s[0] * s[1];
            let mut out = Vec::with_capacity(planes * 4 * h * w);
            for p in 0..planes {
                let src = &v.data()[p * h * w..][..h * w];
                for y in 0..2 * h {
                    let row = &src[(y / 2) * w..][..w];
                    for x in 0..2 * w {
                        out.push(row[x / 2]);
                    }
                }
            }
            Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?
        };
        let needs = self.needs(a);
        Ok(self.push(value, Op::Upsample2(a), needs))
    }

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = {
            let v = self.value(a);
            let rank = v.rank();
            let mut seen = vec![false; rank];
            if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::Shape(format!("invalid permutation {perm:?} for rank {rank}")));
            }
            let map = permute_map(v.shape(), perm);
            let data = map.iter().map(|&i| v.data()[i]).collect();
            Tensor::new(permuted_shape(v.shape(), perm), data)?
        };
        let needs = self.needs(a);
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), needs))
    }

    /// Batched matrix product `w[b] @ x[b]`: `x: [B, Kin, M]`,
    /// `w: [B, Kout, Kin]` -> `[B, Kout, M]`.
    pub fn channel_dense(&self, x: Var, w: Var) -> Result<Var> {
        let value = {
            let vx = self.value(x);
            let vw = self.value(w);
            let (sx, sw) = (vx.shape(), vw.shape());
            if sx.len() != 3 || sw.len() != 3 || sx[0] != sw[0] || sx[1] != sw[2] {
                return Err(Error::Shape(format!("channel_dense x {sx:?} w {sw:?}")));
            }
            let (b, kin, m, kout) = (sx[0], sx[1], sx[2], sw[1]);
            let mut out = vec![T::zero(); b * kout * m];
            for bi in 0..b {
                for o in 0..kout {
                    let dst = &mut out[(bi * kout + o) * m..][..m];
                    for i in 0..kin {
                        let wv = vw.data()[(bi * kout + o) * kin + i];
                        let src = &vx.data()[(bi * kin + i) * m..][..m];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
            Tensor::new(vec![b, kout, m], out)?
        };
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(value, Op::ChannelDense(x, w), needs))
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Every leaf created with `requires_grad` receives a gradient; leaves
    /// that do not influence the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if loss.0 >= nodes.len() {
            return Err(Error::Contract("loss variable is not on this graph".into()));
        }
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            let Some(g) = grads[id].take() else {
                continue;
            };
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads)?;
        }
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && leaf_grads[id].is_none() {
                leaf_grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, f: impl FnOnce(&mut [T])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

fn unary_grad<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    a: Var,
    g: &[T],
    out: &[T],
    df: impl Fn(T, T) -> T,
) {
    let x = nodes[a.0].value.data();
    accumulate(grads, nodes, a, |buf| {
        for i in 0..buf.len() {
            buf[i] += g[i] * df(x[i], out[i]);
        }
    });
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
    let node = &nodes[id];
    let out = node.value.data();
    let out_shape = node.value.shape();
    let zero = T::zero();
    let one = T::one();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            let (a, b) = (*a, *b);
            let va = &nodes[a.0].value;
            let vb = &nodes[b.0].value;
            let ma = broadcast_map(out_shape, va.shape());
            let mb = broadcast_map(out_shape, vb.shape());
            let (da, db) = (va.data(), vb.data());
            let op = &node.op;
            accumulate(grads, nodes, a, |buf| {
                for i in 0..g.len() {
                    let (ia, ib) = (ma.index(i), mb.index(i));
                    buf[ia] += match op {
                        Op::Add(..) | Op::Sub(..) => g[i],
                        Op::Mul(..) => g[i] * db[ib],
                        _ => g[i] / db[ib],
                    };
                }
            });
            accumulate(grads, nodes, b, |buf| {
                for i in 0..g.len() {
                    let (ia, ib) = (ma.index(i), mb.index(i));
                    buf[ib] += match op {
                        Op::Add(..) => g[i],
                        Op::Sub(..) => -g[i],
                        Op::Mul(..) => g[i] * da[ia],
                        _ => -g[i] * da[ia] / (db[ib] * db[ib]),
                    };
                }
            });
        }
        Op::Neg(a) => unary_grad(grads, nodes, *a, g, out, |_, _| -one),
        Op::Scale(a, c) => {
            let c = *c;
            unary_grad(grads, nodes, *a, g, out, |_, _| c)
        }
        Op::AddConst(a, _) | Op::RoundSte(a) | Op::Reshape(a) => {
            unary_grad(grads, nodes, *a, g, out, |_, _| one)
        }
        Op::Relu(a) => unary_grad(grads, nodes, *a, g, out, |x, _| if x > zero { one } else { zero }),
        Op::Tanh(a) => unary_grad(grads, nodes, *a, g, out, |_, y| one - y * y),
        Op::Sigmoid(a) => unary_grad(grads, nodes, *a, g, out, |_, y| y * (one - y)),
        Op::Softplus(a) => unary_grad(grads, nodes, *a, g, out, |x, _| sigmoid(x)),
        Op::Exp(a) => unary_grad(grads, nodes, *a, g, out, |_, y| y),
        Op::Ln(a) => unary_grad(grads, nodes, *a, g, out, |x, _| one / x),
        Op::Abs(a) => unary_grad(grads, nodes, *a, g, out, |x, _| {
            if x > zero {
                one
            } else if x < zero {
                -one
            } else {
                zero
            }
        }),
        Op::Sqrt(a) => {
            let two = one + one;
            unary_grad(grads, nodes, *a, g, out, |_, y| one / (two * y))
        }
        Op::Square(a) => {
            let two = one + one;
            unary_grad(grads, nodes, *a, g, out, |x, _| two * x)
        }
        Op::Powf(a, p) => {
            let p = *p;
            unary_grad(grads, nodes, *a, g, out, |x, _| p * x.powf(p - one))
        }
        Op::ClampMin(a, floor) => {
            let floor = *floor;
            unary_grad(grads, nodes, *a, g, out, |x, _| if x >= floor { one } else { zero })
        }
        Op::Sum(a) => {
            let g0 = g[0];
            accumulate(grads, nodes, *a, |buf| buf.iter_mut().for_each(|b| *b += g0));
        }
        Op::Mean(a) => {
            let n = T::from_usize(nodes[a.0].value.len()).unwrap();
            let g0 = g[0] / n;
            accumulate(grads, nodes, *a, |buf| buf.iter_mut().for_each(|b| *b += g0));
        }
        Op::MeanPerSample(a) => {
            let per = nodes[a.0].value.len() / g.len().max(1);
            let denom = T::from_usize(per).unwrap();
            accumulate(grads, nodes, *a, |buf| {
                for (chunk, &gi) in buf.chunks_mut(per.max(1)).zip(g) {
                    let v = gi / denom;
                    chunk.iter_mut().for_each(|b| *b += v);
                }
            });
        }
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            let va = &nodes[a.0].value;
            let vb = &nodes[b.0].value;
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            let (da, db) = (va.data(), vb.data());
            accumulate(grads, nodes, a, |buf| {
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = zero;
                        for j in 0..n {
                            acc += g[i * n + j] * db[p * n + j];
                        }
                        buf[i * k + p] += acc;
                    }
                }
            });
            accumulate(grads, nodes, b, |buf| {
                for i in 0..m {
                    for p in 0..k {
                        let x = da[i * k + p];
                        for j in 0..n {
                            buf[p * n + j] += x * g[i * n + j];
                        }
                    }
                }
            });
        }
        Op::Conv2d {
            input,
            kernel,
            geom,
        } => {
            let (input, kernel) = (*input, *kernel);
            if nodes[input.0].needs_grad {
                let gi = conv::backward_input(geom, g, nodes[kernel.0].value.data());
                accumulate(grads, nodes, input, |buf| {
                    buf.iter_mut().zip(&gi).for_each(|(b, &v)| *b += v)
                });
            }
            if nodes[kernel.0].needs_grad {
                let gk = conv::backward_kernel(geom, g, nodes[input.0].value.data());
                accumulate(grads, nodes, kernel, |buf| {
                    buf.iter_mut().zip(&gk).for_each(|(b, &v)| *b += v)
                });
            }
        }
        Op::AvgPool2(a) => {
            let s = nodes[a.0].value.shape();
            let (h, w) = (s[2], s[3]);
            let (ho, wo) = (out_shape[2], out_shape[3]);
            let quarter = T::from_f64_lossy(0.25);
            accumulate(grads, nodes, *a, |buf| {
                for p in 0..s[0] * s[1] {
                    let dst = &mut buf[p * h * w..][..h * w];
                    let go = &g[p * ho * wo..][..ho * wo];
                    for y in 0..ho {
                        let (r0, r1) = (2 * y, (2 * y + 1).min(h - 1));
                        for x in 0..wo {
                            let (c0, c1) = (2 * x, (2 * x + 1).min(w - 1));
                            let v = go[y * wo + x] * quarter;
                            dst[r0 * w + c0] += v;
                            dst[r0 * w + c1] += v;
                            dst[r1 * w + c0] += v;
                            dst[r1 * w + c1] += v;
                        }
                    }
                }
            });
        }
        Op::Upsample2(a) => {
            let s = nodes[a.0].value.shape();
            let (h, w) = (s[2], s[3]);
            accumulate(grads, nodes, *a, |buf| {
                for p in 0..s[0] * s[1] {
                    let dst = &mut buf[p * h * w..][..h * w];
                    let go = &g[p * 4 * h * w..][..4 * h * w];
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dst[(y / 2) * w + x / 2] += go[y * 2 * w + x];
                        }
                    }
                }
            });
        }
        Op::Permute(a, perm) => {
            let map = permute_map(nodes[a.0].value.shape(), perm);
            accumulate(grads, nodes, *a, |buf| {
                for (i, &src) in map.iter().enumerate() {
                    buf[src] += g[i];
                }
            });
        }
        Op::ChannelDense(x, w) => {
            let (x, w) = (*x, *w);
            let vx = &nodes[x.0].value;
            let vw = &nodes[w.0].value;
            let (b, kin, m) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let kout = vw.shape()[1];
            let (dx, dw) = (vx.data(), vw.data());
            accumulate(grads, nodes, x, |buf| {
                for bi in 0..b {
                    for o in 0..kout {
                        let go = &g[(bi * kout + o) * m..][..m];
                        for i in 0..kin {
                            let wv = dw[(bi * kout + o) * kin + i];
                            let dst = &mut buf[(bi * kin + i) * m..][..m];
                            for (d, &s) in dst.iter_mut().zip(go) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            });
            accumulate(grads, nodes, w, |buf| {
                for bi in 0..b {
                    for o in 0..kout {
                        let go = &g[(bi * kout + o) * m..][..m];
                        for i in 0..kin {
                            let src = &dx[(bi * kin + i) * m..][..m];
                            buf[(bi * kout + o) * kin + i] +=
                                go.iter().zip(src).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                }
            });
        }
    }
    Ok(())
}
