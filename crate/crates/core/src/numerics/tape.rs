//! Reverse-mode differentiation over a linear record of primitive applications.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! the inputs it read. Inputs always precede their consumers, so walking the
//! record backwards is a reverse topological order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::{axis_split, numel};
use super::{ParamId, ParamStore, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Swish(Var),
    Relu(Var),
    Tanh(Var),
    Softmax(Var, usize),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Conv3x3(Var, Var),
    Conv1x1(Var, Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    SumAxis(Var, usize),
    IndexSelect(Var, usize, Vec<usize>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Record of evaluated primitives plus the parameters read from a store.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<ParamId, Var>,
}

impl Grads {
    /// Gradient with respect to a leaf; zeros if the output does not depend
    /// on it. Interior nodes release their gradients during the sweep.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradient with respect to a stored parameter; zeros if the parameter
    /// was never read or does not influence the output.
    pub fn param(&self, id: ParamId, store: &ParamStore) -> Tensor {
        match self.params.get(&id) {
            Some(&v) => self.wrt(v),
            None => Tensor::zeros(store.get(id).shape()),
        }
    }

    /// Gradients for every parameter of `store`, in registration order.
    pub fn all_params(&self, store: &ParamStore) -> Vec<Tensor> {
        store.ids().map(|id| self.param(id, store)).collect()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn bcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(mismatch(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(mismatch(op, a, b)),
        })
        .collect()
}

/// For every flat index of `out`, the flat index of the broadcast source.
fn bcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut src_strides = vec![0usize; rank];
    let mut acc = 1;
    for k in (0..rank).rev() {
        src_strides[k] = if src[k] == 1 { 0 } else { acc };
        acc *= src[k];
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= src_strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Sums `g` (shaped like the broadcast output) back onto `src` shape.
fn unbroadcast(g: &[f64], out: &[usize], src: &[usize], f: impl Fn(usize, f64) -> f64) -> Tensor {
    let mut r = Tensor::zeros(src);
    if out == src {
        for (k, (d, &gv)) in r.data_mut().iter_mut().zip(g).enumerate() {
            *d = f(k, gv);
        }
        return r;
    }
    let map = bcast_map(out, src);
    let d = r.data_mut();
    for (k, &gv) in g.iter().enumerate() {
        d[map[k]] += f(k, gv);
    }
    r
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_kernel(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

fn conv3x3_forward(x: &Tensor, w: &Tensor) -> Vec<f64> {
    let (bs, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = w.shape()[0];
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; bs * co * h * wd];
    let plane = h * wd;
    for b in 0..bs {
        for o in 0..co {
            let yplane = &mut out[(b * co + o) * plane..(b * co + o + 1) * plane];
            for i in 0..ci {
                let xplane = &xd[(b * ci + i) * plane..(b * ci + i + 1) * plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = wdat[((o * ci + i) * 3 + ky) * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                            let yrow = &mut yplane[y * wd..(y + 1) * wd];
                            let (lo, hi) = match kx {
                                0 => (1, wd),
                                1 => (0, wd),
                                _ => (0, wd - 1),
                            };
                            for xx in lo..hi {
                                yrow[xx] += wv * xrow[xx + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_backward(x: &Tensor, w: &Tensor, g: &[f64]) -> (Tensor, Tensor) {
    let (bs, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = w.shape()[0];
    let plane = h * wd;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let (xd, wdat) = (x.data(), w.data());
    {
        let gxd = gx.data_mut();
        let gwd = gw.data_mut();
        for b in 0..bs {
            for o in 0..co {
                let gplane = &g[(b * co + o) * plane..(b * co + o + 1) * plane];
                for i in 0..ci {
                    let xoff = (b * ci + i) * plane;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let widx = ((o * ci + i) * 3 + ky) * 3 + kx;
                            let wv = wdat[widx];
                            let (lo, hi) = match kx {
                                0 => (1, wd),
                                1 => (0, wd),
                                _ => (0, wd - 1),
                            };
                            let mut acc = 0.0;
                            for y in 0..h {
                                let iy = y as isize + ky as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let grow = &gplane[y * wd..(y + 1) * wd];
                                let rbase = xoff + iy as usize * wd;
                                for xx in lo..hi {
                                    let xi = rbase + xx + kx - 1;
                                    acc += grow[xx] * xd[xi];
                                    gxd[xi] += wv * grow[xx];
                                }
                            }
                            gwd[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Ok(Var(nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// A leaf node. Gradients with respect to leaves are available from
    /// [`Grads::wrt`].
    pub fn leaf(&self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, "leaf")
    }

    /// Alias of [`Tape::leaf`] for values that are never differentiated.
    pub fn constant(&self, t: Tensor) -> Result<Var> {
        self.leaf(t)
    }

    /// Leaf holding the current value of a stored parameter. Repeated reads
    /// of the same parameter share one node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let v = self
            .push(store.get(id).clone(), Op::Leaf, "param")
            .expect("parameters are finite");
        self.params.borrow_mut().insert(id, v);
        v
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = bcast_shape(name, va.shape(), vb.shape())?;
        let data: Vec<f64> = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = bcast_map(&out_shape, va.shape());
            let mb = bcast_map(&out_shape, vb.shape());
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
                .collect()
        };
        self.push(Tensor::new(&out_shape, data)?, op, name)
    }

    /// Elementwise sum; operands of equal rank broadcast along unit axes.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&self, a: Var, k: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k), "scale")
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::Shift(a), "add_scalar")
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), "exp")
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a), "log")
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), "sigmoid")
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Swish(a), "swish")
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), "relu")
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), "tanh")
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: va.rank(),
            });
        }
        let (outer, ext, inner) = axis_split(va.shape(), axis);
        let x = va.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * ext * inner + i;
                let mut m = f64::NEG_INFINITY;
                for k in 0..ext {
                    m = m.max(x[base + k * inner]);
                }
                let mut s = 0.0;
                for k in 0..ext {
                    let e = (x[base + k * inner] - m).exp();
                    out[base + k * inner] = e;
                    s += e;
                }
                for k in 0..ext {
                    out[base + k * inner] /= s;
                }
            }
        }
        self.push(Tensor::new(va.shape(), out)?, Op::Softmax(a, axis), "softmax")
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_kernel(va.data(), vb.data(), &mut out, m, k, n);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for bi in 0..bs {
            matmul_kernel(
                &va.data()[bi * m * k..(bi + 1) * m * k],
                &vb.data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push(Tensor::new(&[bs, m, n], out)?, Op::Bmm(a, b), "bmm")
    }

    /// 3x3 convolution with zero padding 1: `x [B,Ci,H,W]`, `w [Co,Ci,3,3]`.
    pub fn conv3x3(&self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != 3 || sw[3] != 3 {
            return Err(mismatch("conv3x3", sx, sw));
        }
        let out = conv3x3_forward(&vx, &vw);
        let shape = [sx[0], sw[0], sx[2], sx[3]];
        self.push(Tensor::new(&shape, out)?, Op::Conv3x3(x, w), "conv3x3")
    }

    /// Channel mixing at every pixel: `x [B,Ci,H,W]`, `w [Co,Ci]`.
    pub fn conv1x1(&self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 2 || sw[1] != sx[1] {
            return Err(mismatch("conv1x1", sx, sw));
        }
        let (bs, ci, co, p) = (sx[0], sx[1], sw[0], sx[2] * sx[3]);
        let mut out = vec![0.0; bs * co * p];
        for b in 0..bs {
            matmul_kernel(
                vw.data(),
                &vx.data()[b * ci * p..(b + 1) * ci * p],
                &mut out[b * co * p..(b + 1) * co * p],
                co,
                ci,
                p,
            );
        }
        let shape = [bs, co, sx[2], sx[3]];
        self.push(Tensor::new(&shape, out)?, Op::Conv1x1(x, w), "conv1x1")
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let t = Tensor::concat(&refs, axis)?;
        self.push(t, Op::Concat(parts.to_vec(), axis), "concat")
    }

    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a).narrow(axis, start, len)?;
        self.push(t, Op::Narrow(a, axis, start), "narrow")
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(a, axis, start, s)?);
            start += s;
        }
        let ext = self.shape(a)[axis];
        if start != ext {
            return Err(mismatch("split", &[ext], sizes));
        }
        Ok(out)
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a).permute(perm)?;
        self.push(t, Op::Permute(a, perm.to_vec()), "permute")
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.value(a)).clone().reshape(shape)?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(TensorError::InvalidAxis {
                op: "sum_axis",
                axis,
                rank: va.rank(),
            });
        }
        let (outer, ext, inner) = axis_split(va.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let x = va.data();
        for o in 0..outer {
            for k in 0..ext {
                let src = &x[(o * ext + k) * inner..(o * ext + k + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape: Vec<usize> = va.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Tensor::new(&shape, out)?, Op::SumAxis(a, axis), "sum_axis")
    }

    /// Per-sample sum over all axes except the leading one: `[B,...] -> [B]`.
    pub fn sum_per_sample(&self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let rest = numel(&s[1..]);
        let flat = self.reshape(a, &[s[0], rest.max(1)])?;
        self.sum_axis(flat, 1)
    }

    /// Gathers the given positions along `axis`.
    pub fn index_select(&self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(TensorError::InvalidAxis {
                op: "index_select",
                axis,
                rank: va.rank(),
            });
        }
        let (outer, ext, inner) = axis_split(va.shape(), axis);
        if indices.is_empty() || indices.iter().any(|&i| i >= ext) {
            return Err(mismatch("index_select", va.shape(), indices));
        }
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * ext + i) * inner;
                out.extend_from_slice(&va.data()[base..base + inner]);
            }
        }
        let mut shape = va.shape().to_vec();
        shape[axis] = indices.len();
        self.push(
            Tensor::new(&shape, out)?,
            Op::IndexSelect(a, axis, indices.to_vec()),
            "index_select",
        )
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if nodes[out.0].value.numel() != 1 {
            return Err(TensorError::NonScalarOutput {
                shape: nodes[out.0].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[out.0] = Some(Tensor::ones(nodes[out.0].value.shape()));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(e) => {
                    for (d, s) in e.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let y = &node.value;
            let val = |v: Var| Rc::clone(&nodes[v.0].value);
            let gd = g.data();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let (sa, sb) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
                    acc(&mut grads, *a, unbroadcast(gd, y.shape(), &sa, |_, v| v));
                    acc(&mut grads, *b, unbroadcast(gd, y.shape(), &sb, |_, v| sign * v));
                }
                Op::Mul(a, b) | Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let ma = bcast_map(y.shape(), va.shape());
                    let mb = bcast_map(y.shape(), vb.shape());
                    let (xa, xb) = (va.data(), vb.data());
                    if matches!(node.op, Op::Mul(..)) {
                        acc(&mut grads, *a, unbroadcast(gd, y.shape(), va.shape(), |k, v| v * xb[mb[k]]));
                        acc(&mut grads, *b, unbroadcast(gd, y.shape(), vb.shape(), |k, v| v * xa[ma[k]]));
                    } else {
                        acc(&mut grads, *a, unbroadcast(gd, y.shape(), va.shape(), |k, v| v / xb[mb[k]]));
                        acc(
                            &mut grads,
                            *b,
                            unbroadcast(gd, y.shape(), vb.shape(), |k, v| {
                                -v * xa[ma[k]] / (xb[mb[k]] * xb[mb[k]])
                            }),
                        );
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g.map(|v| v * k)),
                Op::Shift(a) => acc(&mut grads, *a, g.clone()),
                Op::Exp(a) => {
                    let t = Tensor::from_fn(y.shape(), |i| gd[i] * y.data()[i]);
                    acc(&mut grads, *a, t);
                }
                Op::Log(a) => {
                    let x = val(*a);
                    let t = Tensor::from_fn(y.shape(), |i| gd[i] / x.data()[i]);
                    acc(&mut grads, *a, t);
                }
                Op::Sigmoid(a) => {
                    let t = Tensor::from_fn(y.shape(), |i| {
                        let s = y.data()[i];
                        gd[i] * s * (1.0 - s)
                    });
                    acc(&mut grads, *a, t);
                }
                Op::Swish(a) => {
                    let x = val(*a);
                    let t = Tensor::from_fn(y.shape(), |i| {
                        let xv = x.data()[i];
                        let s = sigmoid(xv);
                        gd[i] * (s + xv * s * (1.0 - s))
                    });
                    acc(&mut grads, *a, t);
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let t = Tensor::from_fn(y.shape(), |i| if x.data()[i] > 0.0 { gd[i] } else { 0.0 });
                    acc(&mut grads, *a, t);
                }
                Op::Tanh(a) => {
                    let t = Tensor::from_fn(y.shape(), |i| {
                        let v = y.data()[i];
                        gd[i] * (1.0 - v * v)
                    });
                    acc(&mut grads, *a, t);
                }
                Op::Softmax(a, axis) => {
                    let (outer, ext, inner) = axis_split(y.shape(), *axis);
                    let yd = y.data();
                    let mut gx = vec![0.0; yd.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * ext * inner + i;
                            let dot: f64 = (0..ext).map(|k| gd[base + k * inner] * yd[base + k * inner]).sum();
                            for k in 0..ext {
                                let p = base + k * inner;
                                gx[p] = yd[p] * (gd[p] - dot);
                            }
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(y.shape(), gx)?);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    let mut ga = vec![0.0; m * k];
                    matmul_kernel(gd, &transpose_kernel(vb.data(), k, n), &mut ga, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_kernel(&transpose_kernel(va.data(), m, k), gd, &mut gb, k, m, n);
                    acc(&mut grads, *a, Tensor::new(&[m, k], ga)?);
                    acc(&mut grads, *b, Tensor::new(&[k, n], gb)?);
                }
                Op::Bmm(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (bs, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
                    let mut ga = vec![0.0; bs * m * k];
                    let mut gb = vec![0.0; bs * k * n];
                    for bi in 0..bs {
                        let gsl = &gd[bi * m * n..(bi + 1) * m * n];
                        let asl = &va.data()[bi * m * k..(bi + 1) * m * k];
                        let bsl = &vb.data()[bi * k * n..(bi + 1) * k * n];
                        matmul_kernel(gsl, &transpose_kernel(bsl, k, n), &mut ga[bi * m * k..(bi + 1) * m * k], m, n, k);
                        matmul_kernel(&transpose_kernel(asl, m, k), gsl, &mut gb[bi * k * n..(bi + 1) * k * n], k, m, n);
                    }
                    acc(&mut grads, *a, Tensor::new(&[bs, m, k], ga)?);
                    acc(&mut grads, *b, Tensor::new(&[bs, k, n], gb)?);
                }
                Op::Conv3x3(x, w) => {
                    let (gx, gw) = conv3x3_backward(&val(*x), &val(*w), gd);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                }
                Op::Conv1x1(x, w) => {
                    let (vx, vw) = (val(*x), val(*w));
                    let (bs, ci, co) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
                    let p = vx.shape()[2] * vx.shape()[3];
                    let mut gx = vec![0.0; bs * ci * p];
                    let mut gw = vec![0.0; co * ci];
                    let wt = transpose_kernel(vw.data(), co, ci);
                    for b in 0..bs {
                        let gsl = &gd[b * co * p..(b + 1) * co * p];
                        let xsl = &vx.data()[b * ci * p..(b + 1) * ci * p];
                        matmul_kernel(&wt, gsl, &mut gx[b * ci * p..(b + 1) * ci * p], ci, co, p);
                        matmul_kernel(gsl, &transpose_kernel(xsl, ci, p), &mut gw, co, p, ci);
                    }
                    acc(&mut grads, *x, Tensor::new(vx.shape(), gx)?);
                    acc(&mut grads, *w, Tensor::new(vw.shape(), gw)?);
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for p in parts {
                        let len = val(*p).shape()[*axis];
                        acc(&mut grads, *p, g.narrow(*axis, start, len)?);
                        start += len;
                    }
                }
                Op::Narrow(a, axis, start) => {
                    let sa = val(*a).shape().to_vec();
                    let (outer, ext, inner) = axis_split(&sa, *axis);
                    let len = y.shape()[*axis];
                    let mut gx = Tensor::zeros(&sa);
                    let d = gx.data_mut();
                    for o in 0..outer {
                        let dst = o * ext * inner + start * inner;
                        d[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (k, &p) in perm.iter().enumerate() {
                        inv[p] = k;
                    }
                    acc(&mut grads, *a, g.permute(&inv)?);
                }
                Op::Reshape(a) => {
                    let sa = val(*a).shape().to_vec();
                    acc(&mut grads, *a, g.reshape(&sa)?);
                }
                Op::Sum(a) => {
                    let sa = val(*a).shape().to_vec();
                    acc(&mut grads, *a, Tensor::full(&sa, gd[0]));
                }
                Op::SumAxis(a, axis) => {
                    let sa = val(*a).shape().to_vec();
                    let (outer, ext, inner) = axis_split(&sa, *axis);
                    let mut gx = Tensor::zeros(&sa);
                    let d = gx.data_mut();
                    for o in 0..outer {
                        for k in 0..ext {
                            d[(o * ext + k) * inner..(o * ext + k + 1) * inner]
                                .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::IndexSelect(a, axis, indices) => {
                    let sa = val(*a).shape().to_vec();
                    let (outer, ext, inner) = axis_split(&sa, *axis);
                    let mut gx = Tensor::zeros(&sa);
                    let d = gx.data_mut();
                    let n = indices.len();
                    for o in 0..outer {
                        for (j, &i) in indices.iter().enumerate() {
                            let src = &gd[(o * n + j) * inner..(o * n + j + 1) * inner];
                            let dst = &mut d[(o * ext + i) * inner..(o * ext + i + 1) * inner];
                            for (dv, sv) in dst.iter_mut().zip(src) {
                                *dv += sv;
                            }
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
            }
        }
        Ok(Grads {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.borrow().clone(),
        })
    }
}
