//! Reverse-mode differentiation over a linear tape of coarse tensor ops.
//!
//! Every op appends a node holding its output value; [`Tape::backward`] walks
//! the nodes in reverse and accumulates vector-Jacobian products. All loops
//! run in a fixed order, so results are bit-identical across runs.

use std::collections::BTreeMap;

use super::{numel, strides, Gradients, ParamId, ParamStore, Tensor};
use crate::error::{contract_err, dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    LogSigmoid,
    Relu,
    Exp,
    Ln,
    Sqrt,
    Square,
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Unary { x: Var, kind: Unary },
    Binary { a: Var, b: Var, kind: Binary },
    SumAxes { x: Var },
    MaxAxes { x: Var, argmax: Vec<usize> },
    Reshape { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Softmax { x: Var, axis: usize },
    Linear { x: Var, w: Var, b: Var },
    Conv3x3 { x: Var, w: Var, b: Var },
    AvgPool2 { x: Var },
    Upsample { x: Var },
    Blur { x: Var, kernel: Vec<f64>, radius: usize },
    Votes { pose: Var, w: Var },
    Ohem { logits: Var, probs: Vec<f64>, kept: Vec<usize>, labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, Var>,
}

/// Calls `f(out_offset, a_offset, b_offset)` for every element of `out`,
/// where `sa`/`sb` are broadcast strides (0 on broadcast axes).
fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let n = numel(out);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape.iter().zip(out).zip(s).map(|((&e, &o), st)| if e == 1 && o != 1 { 0 } else { st }).collect()
}

fn bcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(dim_err!("broadcast needs equal ranks, got {a:?} and {b:?}"));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(dim_err!("cannot broadcast {a:?} with {b:?}")),
        })
        .collect()
}

/// `(outer, extent, inner)` split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Source index pair and weight of align-corners-false bilinear sampling.
fn bilinear_taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = if i0 + 1 < inp { i0 + 1 } else { i0 };
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    /// Gradient of the last `backward` call with respect to a leaf or parameter.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            _ => self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param => vec![],
            Op::Unary { x, .. }
            | Op::SumAxes { x }
            | Op::MaxAxes { x, .. }
            | Op::Reshape { x }
            | Op::Slice { x, .. }
            | Op::Softmax { x, .. }
            | Op::AvgPool2 { x }
            | Op::Upsample { x }
            | Op::Blur { x, .. } => vec![*x],
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Linear { x, w, b } | Op::Conv3x3 { x, w, b } => vec![*x, *w, *b],
            Op::Votes { pose, w } => vec![*pose, *w],
            Op::Ohem { logits, .. } => vec![*logits],
        }
    }

    /// Records a value that is not differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, "constant").expect("tensors are finite by construction")
    }

    /// Records a leaf whose gradient is kept and readable through [`Tape::grad`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let v = self.constant(t);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// Records a parameter; repeated calls with the same id return the same node,
    /// so shared parameters accumulate gradient from every use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let mut t = store.tensor(id).clone();
        t.grad = None;
        let v = self.push(t, Op::Param, "param").expect("parameters are finite");
        self.params.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- unary

    fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let xv = self.value(x);
        let f: fn(f64, f64, f64) -> f64 = match kind {
            Unary::Sigmoid => |x, _, _| sigmoid(x),
            Unary::LogSigmoid => |x, _, _| log_sigmoid(x),
            Unary::Relu => |x, _, _| x.max(0.0),
            Unary::Exp => |x, _, _| x.exp(),
            Unary::Ln => |x, _, _| x.ln(),
            Unary::Sqrt => |x, _, _| x.sqrt(),
            Unary::Square => |x, _, _| x * x,
            Unary::Scale(_) => |x, s, _| x * s,
            Unary::AddScalar(_) => |x, s, _| x + s,
            Unary::Clamp(_, _) => |x, lo, hi| x.clamp(lo, hi),
        };
        let (p0, p1) = match kind {
            Unary::Scale(s) | Unary::AddScalar(s) => (s, 0.0),
            Unary::Clamp(lo, hi) => (lo, hi),
            _ => (0.0, 0.0),
        };
        let data = xv.data().iter().map(|&v| f(v, p0, p1)).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::Unary { x, kind }, "unary op")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    /// `ln(sigmoid(x))`, evaluated without underflow.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::LogSigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Unary::Scale(s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Unary::AddScalar(s))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Scale(-1.0))
    }

    /// Clamp to `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    // --------------------------------------------------------------- binary

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out_shape = bcast_shape(av.shape(), bv.shape())?;
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = bcast_strides(av.shape(), &out_shape);
            let sb = bcast_strides(bv.shape(), &out_shape);
            let mut data = vec![0.0; numel(&out_shape)];
            let (ad, bd) = (av.data(), bv.data());
            for_each_bcast(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
            data
        };
        self.push(Tensor::from_parts(out_shape, data), Op::Binary { a, b, kind }, "binary op")
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    /// Outer product over the two resolution axes:
    /// `out[h,w,t,d] = a[h,0,t,d] * b[0,w,t,d]`.
    pub fn matmul_resolution(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 4 || sb.len() != 4 || sa[1] != 1 || sb[0] != 1 {
            return Err(dim_err!("matmul_resolution expects (H,1,T,D) and (1,W,T,D), got {sa:?} and {sb:?}"));
        }
        if sa[2..] != sb[2..] {
            return Err(dim_err!("matmul_resolution type/capsule extents differ: {sa:?} vs {sb:?}"));
        }
        self.mul(a, b)
    }

    // ----------------------------------------------------------- reductions

    fn reduced_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
        let mut out = shape.to_vec();
        for &a in axes {
            if a >= shape.len() {
                return Err(dim_err!("axis {a} out of range for {shape:?}"));
            }
            out[a] = 1;
        }
        Ok(out)
    }

    /// Sum over `axes`, keeping them with extent 1.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let out_shape = Self::reduced_shape(xv.shape(), axes)?;
        let so = bcast_strides(&out_shape, xv.shape());
        let zero = vec![0; so.len()];
        let mut data = vec![0.0; numel(&out_shape)];
        let xd = xv.data();
        for_each_bcast(xv.shape(), &so, &zero, |i, o, _| data[o] += xd[i]);
        self.push(Tensor::from_parts(out_shape, data), Op::SumAxes { x }, "sum")
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let count: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        let s = self.sum_axes(x, axes)?;
        self.scale(s, 1.0 / count as f64)
    }

    /// Sum of all elements as a shape-`[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.sum_axes(x, &axes)?;
        self.reshape(s, &[1])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Max over `axes`, keeping them with extent 1. Ties route the gradient to
    /// the first maximal element in row-major order.
    pub fn max_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let out_shape = Self::reduced_shape(xv.shape(), axes)?;
        let so = bcast_strides(&out_shape, xv.shape());
        let zero = vec![0; so.len()];
        let n = numel(&out_shape);
        let mut data = vec![f64::NEG_INFINITY; n];
        let mut argmax = vec![usize::MAX; n];
        let xd = xv.data();
        for_each_bcast(xv.shape(), &so, &zero, |i, o, _| {
            if argmax[o] == usize::MAX || xd[i] > data[o] {
                data[o] = xd[i];
                argmax[o] = i;
            }
        });
        self.push(Tensor::from_parts(out_shape, data), Op::MaxAxes { x, argmax }, "max")
    }

    // ------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape { x }, "reshape")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| contract_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return Err(dim_err!("concat along {axis}: {s:?} incompatible with {base:?}"));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        self.push(Tensor::from_parts(out_shape, data), Op::Concat { xs: xs.to_vec(), axis }, "concat")
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err!("slice [{start}, {}) on axis {axis} of {shape:?}", start + len));
        }
        let (outer, n, inner) = split_axis(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        self.push(Tensor::from_parts(out_shape, data), Op::Slice { x, axis, start }, "slice")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(dim_err!("softmax axis {axis} out of range for {:?}", xv.shape()));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let xd = xv.data();
        let mut data = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let m = (0..n).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (xd[at(k)] - m).exp();
                    data[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    data[at(k)] /= z;
                }
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::Softmax { x, axis }, "softmax")
    }

    // ------------------------------------------------------------ layers

    /// `y[..., j] = sum_i x[..., i] * w[i, j] + b[j]`.
    pub fn linear_along_last(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let xs = xv.shape();
        let cin = *xs.last().expect("rank >= 1");
        if wv.rank() != 2 || wv.shape()[0] != cin || bv.shape() != [wv.shape()[1]] {
            return Err(dim_err!(
                "linear: input {xs:?}, weight {:?}, bias {:?}",
                wv.shape(),
                bv.shape()
            ));
        }
        let cout = wv.shape()[1];
        let rows = xv.numel() / cin;
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut data = vec![0.0; rows * cout];
        for r in 0..rows {
            let y = &mut data[r * cout..(r + 1) * cout];
            y.copy_from_slice(bd);
            for i in 0..cin {
                let xi = xd[r * cin + i];
                if xi == 0.0 {
                    continue;
                }
                let wrow = &wd[i * cout..(i + 1) * cout];
                for (yj, wj) in y.iter_mut().zip(wrow) {
                    *yj += xi * wj;
                }
            }
        }
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().expect("rank >= 1") = cout;
        self.push(Tensor::from_parts(out_shape, data), Op::Linear { x, w, b }, "linear")
    }

    /// 3x3 cross-correlation with zero padding 1; `x: [H,W,C]`, `w: [3,3,C,O]`.
    pub fn conv2d_3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[0] != 3 || ws[1] != 3 || ws[2] != xs[2] || bv.shape() != [ws[3]] {
            return Err(dim_err!("conv2d_3x3: input {xs:?}, weight {ws:?}, bias {:?}", bv.shape()));
        }
        let (h, wd_, c, o) = (xs[0], xs[1], xs[2], ws[3]);
        let (xd, wdat, bd) = (xv.data(), wv.data(), bv.data());
        let mut data = vec![0.0; h * wd_ * o];
        for y in 0..h {
            for xx in 0..wd_ {
                let out = &mut data[(y * wd_ + xx) * o..(y * wd_ + xx + 1) * o];
                out.copy_from_slice(bd);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= wd_ as isize {
                            continue;
                        }
                        let xbase = (sy as usize * wd_ + sx as usize) * c;
                        let wbase = (ky * 3 + kx) * c * o;
                        for ci in 0..c {
                            let xv = xd[xbase + ci];
                            let wrow = &wdat[wbase + ci * o..wbase + (ci + 1) * o];
                            for (oj, wj) in out.iter_mut().zip(wrow) {
                                *oj += xv * wj;
                            }
                        }
                    }
                }
            }
        }
        self.push(Tensor::from_parts(vec![h, wd_, o], data), Op::Conv3x3 { x, w, b }, "conv2d_3x3")
    }

    /// 2x2 average pooling with stride 2; odd extents keep a partial last window.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 {
            return Err(dim_err!("avg_pool2 expects [H,W,C], got {s:?}"));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let xd = xv.data();
        let mut data = vec![0.0; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let ys = 2 * oy..(2 * oy + 2).min(h);
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let count = (ys.len() * xs.len()) as f64;
                for y in ys {
                    for xx in xs.clone() {
                        for ch in 0..c {
                            data[(oy * ow + ox) * c + ch] += xd[(y * w + xx) * c + ch];
                        }
                    }
                }
                for ch in 0..c {
                    data[(oy * ow + ox) * c + ch] /= count;
                }
            }
        }
        self.push(Tensor::from_parts(vec![oh, ow, c], data), Op::AvgPool2 { x }, "avg_pool2")
    }

    /// Align-corners-false bilinear resampling of `[H,W,C]` to `[out_h,out_w,C]`.
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(dim_err!("bilinear_upsample expects [H,W,C] and positive size, got {s:?}"));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if (h, w) == (out_h, out_w) {
            return self.reshape(x, &[h, w, c]);
        }
        let rows = bilinear_taps(out_h, h);
        let cols = bilinear_taps(out_w, w);
        let xd = xv.data();
        let mut data = vec![0.0; out_h * out_w * c];
        for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                let taps = [
                    ((y0 * w + x0) * c, (1.0 - ly) * (1.0 - lx)),
                    ((y0 * w + x1) * c, (1.0 - ly) * lx),
                    ((y1 * w + x0) * c, ly * (1.0 - lx)),
                    ((y1 * w + x1) * c, ly * lx),
                ];
                let out = &mut data[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
                for (base, wt) in taps {
                    for (ch, o) in out.iter_mut().enumerate() {
                        *o += wt * xd[base + ch];
                    }
                }
            }
        }
        self.push(Tensor::from_parts(vec![out_h, out_w, c], data), Op::Upsample { x }, "bilinear_upsample")
    }

    /// Depthwise correlation of `[H,W,C]` with a fixed `(2r+1)x(2r+1)` kernel, zero padded.
    pub fn blur(&mut self, x: Var, kernel: &[f64]) -> Result<Var> {
        let side = (kernel.len() as f64).sqrt() as usize;
        if side * side != kernel.len() || side % 2 == 0 {
            return Err(dim_err!("blur kernel must be odd square, got {} taps", kernel.len()));
        }
        let r = side / 2;
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 {
            return Err(dim_err!("blur expects [H,W,C], got {s:?}"));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let xd = xv.data();
        let mut data = vec![0.0; h * w * c];
        for y in 0..h {
            for xx in 0..w {
                for dy in 0..side {
                    let sy = y as isize + dy as isize - r as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..side {
                        let sx = xx as isize + dx as isize - r as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let k = kernel[dy * side + dx];
                        let src = (sy as usize * w + sx as usize) * c;
                        for ch in 0..c {
                            data[(y * w + xx) * c + ch] += k * xd[src + ch];
                        }
                    }
                }
            }
        }
        let op = Op::Blur { x, kernel: kernel.to_vec(), radius: r };
        self.push(Tensor::from_parts(vec![h, w, c], data), op, "blur")
    }

    /// Capsule votes `V[l,i,j] = pose[l,i] · W[i,j]` with 4x4 matrices flattened
    /// row-major; `pose: [L,I,16]`, `w: [I,J,16]`, output `[L,I,J,16]`.
    pub fn capsule_votes(&mut self, pose: Var, w: Var) -> Result<Var> {
        let (pv, wv) = (self.value(pose), self.value(w));
        let (ps, ws) = (pv.shape(), wv.shape());
        if ps.len() != 3 || ws.len() != 3 || ps[2] != 16 || ws[2] != 16 || ps[1] != ws[0] {
            return Err(dim_err!("capsule_votes: pose {ps:?}, transforms {ws:?}"));
        }
        let (l, ni, nj) = (ps[0], ps[1], ws[1]);
        let (pd, wd) = (pv.data(), wv.data());
        let mut data = vec![0.0; l * ni * nj * 16];
        for li in 0..l {
            for i in 0..ni {
                let p = &pd[(li * ni + i) * 16..(li * ni + i + 1) * 16];
                for j in 0..nj {
                    let m = &wd[(i * nj + j) * 16..(i * nj + j + 1) * 16];
                    let out = &mut data[((li * ni + i) * nj + j) * 16..((li * ni + i) * nj + j + 1) * 16];
                    for r in 0..4 {
                        for k in 0..4 {
                            let a = p[r * 4 + k];
                            for cc in 0..4 {
                                out[r * 4 + cc] += a * m[k * 4 + cc];
                            }
                        }
                    }
                }
            }
        }
        self.push(Tensor::from_parts(vec![l, ni, nj, 16], data), Op::Votes { pose, w }, "capsule_votes")
    }

    /// Online-hard-example-mined cross-entropy. `logits: [..., K]`, one label per
    /// row; averages the per-row losses of the `max(min_kept, keep_fraction*N)`
    /// hardest rows (capped at `N`). Ties are broken by row index.
    pub fn ohem_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        keep_fraction: f64,
        min_kept: usize,
    ) -> Result<Var> {
        if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
            return Err(contract_err!("keep_fraction must lie in (0, 1], got {keep_fraction}"));
        }
        let lv = self.value(logits);
        let k = *lv.shape().last().expect("rank >= 1");
        let n = lv.numel() / k;
        if labels.len() != n {
            return Err(dim_err!("{} labels for {n} logit rows", labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&c| c >= k) {
            return Err(contract_err!("class id {bad} out of range for {k} classes"));
        }
        let ld = lv.data();
        let mut probs = vec![0.0; n * k];
        let mut losses = vec![0.0; n];
        for r in 0..n {
            let row = &ld[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for c in 0..k {
                probs[r * k + c] = (row[c] - m).exp() / z;
            }
            losses[r] = z.ln() + m - row[labels[r]];
        }
        let kept_count = ((keep_fraction * n as f64 + 1e-9).floor() as usize).max(min_kept).clamp(1, n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
        order.truncate(kept_count);
        let mut sum = 0.0;
        for &r in &order {
            sum += losses[r];
        }
        let out = Tensor::scalar(sum / kept_count as f64);
        let op = Op::Ohem { logits, probs, kept: order, labels: labels.to_vec() };
        self.push(out, op, "ohem_cross_entropy")
    }

    // ------------------------------------------------------------ backward

    /// Reverse pass from a single-element `loss`. Gradients of leaves stay
    /// readable through [`Tape::grad`]; parameter gradients are returned.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(contract_err!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Unary { x, kind } => {
                    let xd = nodes[x.0].value.data();
                    let yd = y.data();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for k in 0..gx.len() {
                            let d = match *kind {
                                Unary::Sigmoid => yd[k] * (1.0 - yd[k]),
                                Unary::LogSigmoid => sigmoid(-xd[k]),
                                Unary::Relu => f64::from(u8::from(xd[k] > 0.0)),
                                Unary::Exp => yd[k],
                                Unary::Ln => 1.0 / xd[k],
                                Unary::Sqrt => 0.5 / yd[k],
                                Unary::Square => 2.0 * xd[k],
                                Unary::Scale(s) => s,
                                Unary::AddScalar(_) => 1.0,
                                Unary::Clamp(lo, hi) => f64::from(u8::from(xd[k] >= lo && xd[k] <= hi)),
                            };
                            gx[k] += g[k] * d;
                        }
                    }
                }
                Op::Binary { a, b, kind } => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let out = y.shape();
                    let sa = bcast_strides(av.shape(), out);
                    let sb = bcast_strides(bv.shape(), out);
                    let (ad, bd) = (av.data(), bv.data());
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for_each_bcast(out, &sa, &sb, |o, ia, ib| {
                            ga[ia] += match kind {
                                Binary::Add | Binary::Sub => g[o],
                                Binary::Mul => g[o] * bd[ib],
                                Binary::Div => g[o] / bd[ib],
                            }
                        });
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for_each_bcast(out, &sa, &sb, |o, ia, ib| {
                            gb[ib] += match kind {
                                Binary::Add => g[o],
                                Binary::Sub => -g[o],
                                Binary::Mul => g[o] * ad[ia],
                                Binary::Div => -g[o] * ad[ia] / (bd[ib] * bd[ib]),
                            }
                        });
                    }
                }
                Op::SumAxes { x } => {
                    let xs = nodes[x.0].value.shape().to_vec();
                    let so = bcast_strides(y.shape(), &xs);
                    let zero = vec![0; so.len()];
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for_each_bcast(&xs, &so, &zero, |k, o, _| gx[k] += g[o]);
                    }
                }
                Op::MaxAxes { x, argmax } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (o, &k) in argmax.iter().enumerate() {
                            gx[k] += g[o];
                        }
                    }
                }
                Op::Reshape { x } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                Op::Concat { xs, axis } => {
                    let (outer, _, inner) = split_axis(y.shape(), *axis);
                    let mut offset = 0;
                    for o in 0..outer {
                        for v in xs {
                            let block = nodes[v.0].value.shape()[*axis] * inner;
                            if let Some(gx) = slot(&mut grads, nodes, *v) {
                                for q in 0..block {
                                    gx[o * block + q] += g[offset + q];
                                }
                            }
                            offset += block;
                        }
                    }
                }
                Op::Slice { x, axis, start } => {
                    let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                    let len = y.shape()[*axis];
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for o in 0..outer {
                            let base = o * n * inner + start * inner;
                            for q in 0..len * inner {
                                gx[base + q] += g[o * len * inner + q];
                            }
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    let (outer, n, inner) = split_axis(y.shape(), *axis);
                    let yd = y.data();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for o in 0..outer {
                            for q in 0..inner {
                                let at = |k: usize| o * n * inner + k * inner + q;
                                let dot: f64 = (0..n).map(|k| yd[at(k)] * g[at(k)]).sum();
                                for k in 0..n {
                                    gx[at(k)] += yd[at(k)] * (g[at(k)] - dot);
                                }
                            }
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
                    let rows = xv.numel() / cin;
                    let (xd, wd) = (xv.data(), wv.data());
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for r in 0..rows {
                            let gr = &g[r * cout..(r + 1) * cout];
                            for i in 0..cin {
                                let wrow = &wd[i * cout..(i + 1) * cout];
                                gx[r * cin + i] += gr.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                    if let Some(gw) = slot(&mut grads, nodes, *w) {
                        for r in 0..rows {
                            let gr = &g[r * cout..(r + 1) * cout];
                            for i in 0..cin {
                                let xi = xd[r * cin + i];
                                if xi == 0.0 {
                                    continue;
                                }
                                for (gwj, gj) in gw[i * cout..(i + 1) * cout].iter_mut().zip(gr) {
                                    *gwj += xi * gj;
                                }
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for r in 0..rows {
                            for j in 0..cout {
                                gb[j] += g[r * cout + j];
                            }
                        }
                    }
                }
                Op::Conv3x3 { x, w, b } => {
                    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (h, wd_, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let o = wv.shape()[3];
                    let (xd, wdat) = (xv.data(), wv.data());
                    let need_x = nodes[x.0].needs_grad;
                    let need_w = nodes[w.0].needs_grad;
                    let mut gx = vec![0.0; if need_x { xd.len() } else { 0 }];
                    let mut gw = vec![0.0; if need_w { wdat.len() } else { 0 }];
                    for yy in 0..h {
                        for xx in 0..wd_ {
                            let gs = &g[(yy * wd_ + xx) * o..(yy * wd_ + xx + 1) * o];
                            for ky in 0..3 {
                                let sy = yy as isize + ky as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = xx as isize + kx as isize - 1;
                                    if sx < 0 || sx >= wd_ as isize {
                                        continue;
                                    }
                                    let xbase = (sy as usize * wd_ + sx as usize) * c;
                                    let wbase = (ky * 3 + kx) * c * o;
                                    for ci in 0..c {
                                        let wrow = wbase + ci * o..wbase + (ci + 1) * o;
                                        if need_x {
                                            gx[xbase + ci] +=
                                                gs.iter().zip(&wdat[wrow.clone()]).map(|(a, b)| a * b).sum::<f64>();
                                        }
                                        if need_w {
                                            let xv = xd[xbase + ci];
                                            for (gwj, gj) in gw[wrow].iter_mut().zip(gs) {
                                                *gwj += xv * gj;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        s.iter_mut().zip(&gx).for_each(|(a, b)| *a += b);
                    }
                    if let Some(s) = slot(&mut grads, nodes, *w) {
                        s.iter_mut().zip(&gw).for_each(|(a, b)| *a += b);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for p in 0..h * wd_ {
                            for j in 0..o {
                                gb[j] += g[p * o + j];
                            }
                        }
                    }
                }
                Op::AvgPool2 { x } => {
                    let xs = nodes[x.0].value.shape();
                    let (h, w, c) = (xs[0], xs[1], xs[2]);
                    let ow = y.shape()[1];
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for yy in 0..h {
                            for xx in 0..w {
                                let (oy, ox) = (yy / 2, xx / 2);
                                let count = ((2 * oy + 2).min(h) - 2 * oy) * ((2 * ox + 2).min(w) - 2 * ox);
                                for ch in 0..c {
                                    gx[(yy * w + xx) * c + ch] += g[(oy * ow + ox) * c + ch] / count as f64;
                                }
                            }
                        }
                    }
                }
                Op::Upsample { x } => {
                    let xs = nodes[x.0].value.shape();
                    let (h, w, c) = (xs[0], xs[1], xs[2]);
                    let (out_h, out_w) = (y.shape()[0], y.shape()[1]);
                    let rows = bilinear_taps(out_h, h);
                    let cols = bilinear_taps(out_w, w);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
                            for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                                let taps = [
                                    ((y0 * w + x0) * c, (1.0 - ly) * (1.0 - lx)),
                                    ((y0 * w + x1) * c, (1.0 - ly) * lx),
                                    ((y1 * w + x0) * c, ly * (1.0 - lx)),
                                    ((y1 * w + x1) * c, ly * lx),
                                ];
                                let go = &g[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c];
                                for (base, wt) in taps {
                                    for ch in 0..c {
                                        gx[base + ch] += wt * go[ch];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Blur { x, kernel, radius } => {
                    let s = y.shape();
                    let (h, w, c) = (s[0], s[1], s[2]);
                    let side = 2 * radius + 1;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for yy in 0..h {
                            for xx in 0..w {
                                for dy in 0..side {
                                    let sy = yy as isize + dy as isize - *radius as isize;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for dx in 0..side {
                                        let sx = xx as isize + dx as isize - *radius as isize;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        let k = kernel[dy * side + dx];
                                        let src = (sy as usize * w + sx as usize) * c;
                                        for ch in 0..c {
                                            gx[src + ch] += k * g[(yy * w + xx) * c + ch];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Votes { pose, w } => {
                    let (pv, wv) = (&nodes[pose.0].value, &nodes[w.0].value);
                    let (l, ni, nj) = (pv.shape()[0], pv.shape()[1], wv.shape()[1]);
                    let (pd, wd) = (pv.data(), wv.data());
                    if let Some(gp) = slot(&mut grads, nodes, *pose) {
                        for li in 0..l {
                            for i in 0..ni {
                                for j in 0..nj {
                                    let m = &wd[(i * nj + j) * 16..(i * nj + j + 1) * 16];
                                    let go = &g[((li * ni + i) * nj + j) * 16..((li * ni + i) * nj + j + 1) * 16];
                                    let gpi = &mut gp[(li * ni + i) * 16..(li * ni + i + 1) * 16];
                                    for r in 0..4 {
                                        for k in 0..4 {
                                            let mut acc = 0.0;
                                            for cc in 0..4 {
                                                acc += go[r * 4 + cc] * m[k * 4 + cc];
                                            }
                                            gpi[r * 4 + k] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let Some(gw) = slot(&mut grads, nodes, *w) {
                        for li in 0..l {
                            for i in 0..ni {
                                let p = &pd[(li * ni + i) * 16..(li * ni + i + 1) * 16];
                                for j in 0..nj {
                                    let go = &g[((li * ni + i) * nj + j) * 16..((li * ni + i) * nj + j + 1) * 16];
                                    let gwm = &mut gw[(i * nj + j) * 16..(i * nj + j + 1) * 16];
                                    for r in 0..4 {
                                        for k in 0..4 {
                                            let a = p[r * 4 + k];
                                            for cc in 0..4 {
                                                gwm[k * 4 + cc] += a * go[r * 4 + cc];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Ohem { logits, probs, kept, labels } => {
                    let k = *nodes[logits.0].value.shape().last().expect("rank >= 1");
                    let scale = g[0] / kept.len() as f64;
                    if let Some(gl) = slot(&mut grads, nodes, *logits) {
                        for &r in kept {
                            for c in 0..k {
                                let onehot = if c == labels[r] { 1.0 } else { 0.0 };
                                gl[r * k + c] += scale * (probs[r * k + c] - onehot);
                            }
                        }
                    }
                }
            }
        }

        let entries = self
            .params
            .iter()
            .map(|(id, v)| {
                let g = grads[v.0].clone().unwrap_or_else(|| vec![0.0; nodes[v.0].value.numel()]);
                (*id, g)
            })
            .collect();
        self.grads = grads;
        Ok(Gradients { entries })
    }

    /// Runs [`Tape::backward`] and adds the parameter gradients into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads);
        Ok(())
    }

    // ------------------------------------------------- composite layer ops

    /// Per-channel instance normalisation followed by an affine map:
    /// `gamma * (x - mean) / sqrt(var + 1e-5) + beta`, statistics over every
    /// axis but the last.
    pub fn norm_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        let c = self.shape(x)[rank - 1];
        let axes: Vec<usize> = (0..rank - 1).collect();
        let mean = self.mean_axes(x, &axes)?;
        let centered = self.sub(x, mean)?;
        let sq = self.square(centered)?;
        let var = self.mean_axes(sq, &axes)?;
        let var = self.add_scalar(var, NORM_EPS)?;
        let std = self.sqrt(var)?;
        let normed = self.div(centered, std)?;
        let mut bshape = vec![1; rank];
        bshape[rank - 1] = c;
        let g = self.reshape(gamma, &bshape)?;
        let b = self.reshape(beta, &bshape)?;
        let scaled = self.mul(normed, g)?;
        self.add(scaled, b)
    }

    /// `[H,W,C] -> [1,1,C]` spatial maximum.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        self.expect_hwc(x, "global_max_pool")?;
        self.max_axes(x, &[0, 1])
    }

    /// `[H,W,C] -> [H,W,1]` maximum over channels.
    pub fn channel_max_pool(&mut self, x: Var) -> Result<Var> {
        self.expect_hwc(x, "channel_max_pool")?;
        self.max_axes(x, &[2])
    }

    /// `[H,W,C] -> [1,1,C]` spatial mean.
    pub fn avg_pool_global(&mut self, x: Var) -> Result<Var> {
        self.expect_hwc(x, "avg_pool_global")?;
        self.mean_axes(x, &[0, 1])
    }

    fn expect_hwc(&self, x: Var, what: &str) -> Result<()> {
        if self.shape(x).len() != 3 {
            return Err(dim_err!("{what} expects [H,W,C], got {:?}", self.shape(x)));
        }
        Ok(())
    }
}

pub(crate) const NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 2]));
        let w = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[1], &[0.5]));
        let y = tape.linear_along_last(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.5]);

        let x = tape.constant(Tensor::from_fn([4, 4, 32], |i| (i[0] + i[1] * 3 + i[2]) as f64).unwrap());
        let w = tape.constant(Tensor::zeros([32, 17]));
        let b = tape.constant(Tensor::zeros([17]));
        let y = tape.linear_along_last(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[4, 4, 17]);

        let eye = Tensor::from_fn([32, 32], |i| f64::from(u8::from(i[0] == i[1]))).unwrap();
        let w = tape.constant(eye);
        let b = tape.constant(Tensor::zeros([32]));
        let y = tape.linear_along_last(x, w, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let bad = tape.constant(Tensor::zeros([31, 2]));
        let b2 = tape.constant(Tensor::zeros([2]));
        assert!(matches!(tape.linear_along_last(x, bad, b2), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones([3, 3, 1]));
        let w = tape.constant(Tensor::ones([3, 3, 1, 1]));
        let b = tape.constant(Tensor::zeros([1]));
        let y = tape.conv2d_3x3(x, w, b).unwrap();
        let yv = tape.value(y);
        assert_eq!(yv.get(&[1, 1, 0]), 9.0);
        assert_eq!(yv.get(&[0, 0, 0]), 4.0);
        assert_eq!(yv.get(&[0, 1, 0]), 6.0);

        let x = tape.constant(Tensor::from_fn([5, 7, 2], |i| i[0] as f64 - i[1] as f64).unwrap());
        let w = tape.constant(Tensor::zeros([3, 3, 2, 4]));
        let b = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.conv2d_3x3(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[5, 7, 4]);
        assert!(tape.value(y).data().chunks(4).all(|c| c == [1.0, 2.0, 3.0, 4.0]));

        let w3 = tape.constant(Tensor::zeros([3, 3, 3, 4]));
        assert!(matches!(tape.conv2d_3x3(x, w3, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn activations_and_norm() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, -3.0, 2.0]));
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let c = tape.constant(Tensor::full([2, 2, 1], 3.0));
        let g = tape.constant(Tensor::ones([1]));
        let b = tape.constant(Tensor::zeros([1]));
        let n = tape.norm_affine(c, g, b).unwrap();
        assert!(tape.value(n).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 0.0]));
        let m = tape.global_max_pool(x).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0]);
        let a = tape.constant(t(&[2, 2, 1], &[1.0, 3.0, 5.0, 7.0]));
        let avg = tape.avg_pool_global(a).unwrap();
        assert_eq!(tape.value(avg).data(), &[4.0]);
        let c = tape.constant(t(&[1, 1, 3], &[-1.0, 4.0, 2.0]));
        let cm = tape.channel_max_pool(c).unwrap();
        assert_eq!(tape.value(cm).data(), &[4.0]);
        let single = tape.constant(t(&[2, 1, 1], &[5.0, -1.0]));
        let cm = tape.channel_max_pool(single).unwrap();
        assert_eq!(tape.value(cm), tape.value(single));
        let k = tape.constant(Tensor::full([3, 2, 4], 1.25));
        let gm = tape.global_max_pool(k).unwrap();
        assert!(tape.value(gm).data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn upsample_constant_field() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([3, 2, 2], 0.75));
        let y = tape.bilinear_upsample(x, 7, 5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn matmul_resolution_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones([2, 1, 3, 5]));
        let b = tape.constant(Tensor::ones([1, 3, 3, 5]));
        let y = tape.matmul_resolution(a, b).unwrap();
        assert_eq!(tape.value(y), &Tensor::ones([2, 3, 3, 5]));

        let a = tape.constant(t(&[3, 1, 1, 1], &[1.0, 2.0, 3.0]));
        let b = tape.constant(t(&[1, 2, 1, 1], &[1.0, 2.0]));
        let y = tape.matmul_resolution(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);

        let a = tape.constant(Tensor::ones([4, 1, 8, 17]));
        let b = tape.constant(Tensor::ones([1, 6, 8, 17]));
        let y = tape.matmul_resolution(a, b).unwrap();
        assert_eq!(tape.shape(y), &[4, 6, 8, 17]);
        let bad = tape.constant(Tensor::ones([1, 6, 7, 17]));
        assert!(matches!(tape.matmul_resolution(a, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]));
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let wx = tape.mul(w, x).unwrap();
        let loss = tape.sum_all(wx).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0, 3.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros([1]));
        let s = tape.sigmoid(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.25]);

        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates_in_store() {
        let mut store = ParamStore::new(0);
        let id = store.add("w", &[2], super::super::Init::Const(1.0)).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let w = tape.param(&store, id);
            let x = tape.constant(t(&[2], &[3.0, 4.0]));
            let wx = tape.mul(w, x).unwrap();
            let loss = tape.sum_all(wx).unwrap();
            tape.backward_into(loss, &mut store).unwrap();
        }
        assert_eq!(store.grad(id), &[6.0, 8.0]);
        store.zero_grad();
        assert_eq!(store.grad(id), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[-1.0]));
        assert!(matches!(tape.ln(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn ohem_examples() {
        // per-row CE with logits [0, a]: ln(1 + e^a) - a for label 1
        let logits: [f64; 8] = [0.0, 1.0, 0.0, -1.0, 0.0, 2.0, 0.0, 0.0];
        let ce: Vec<f64> = logits.chunks(2).map(|r| (r[0].exp() + r[1].exp()).ln() - r[1]).collect();
        let mut tape = Tape::new();
        let l = tape.constant(t(&[2, 2, 2], &logits));
        let all = tape.ohem_cross_entropy(l, &[1, 1, 1, 1], 1.0, 0).unwrap();
        let mean = ce.iter().sum::<f64>() / 4.0;
        assert!((tape.value(all).data()[0] - mean).abs() < 1e-15);
        let top2 = tape.ohem_cross_entropy(l, &[1, 1, 1, 1], 0.5, 0).unwrap();
        let mut sorted = ce.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        assert!((tape.value(top2).data()[0] - (sorted[0] + sorted[1]) / 2.0).abs() < 1e-15);
        assert!(matches!(tape.ohem_cross_entropy(l, &[1, 1, 2, 1], 1.0, 0), Err(Error::Contract(_))));
        assert!(matches!(tape.ohem_cross_entropy(l, &[1, 1, 1, 1], 0.0, 0), Err(Error::Contract(_))));
    }
}
