//! Define-by-run reverse-mode tape.
//!
//! Every forward op records its result and enough saved state to produce
//! vector-Jacobian products. Ops are layer-sized (convolution, matmul,
//! layer norm, ...) so the bookkeeping cost stays small next to the math.

use std::cell::RefCell;
use std::rc::Rc;

use super::gemm::gemm;
use super::{Array, Elem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Broadcast layout: `x` viewed as `[outer, ch, inner]`, operand `b` viewed
/// as `[ch]` (shared over `outer`) or `[outer, ch]` (per outer index).
#[derive(Clone, Copy, Debug)]
struct Bcast {
    outer: usize,
    ch: usize,
    inner: usize,
    per_outer: bool,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleItems(Var, Vec<T>),
    AddBcast(Var, Var, Bcast),
    MulBcast(Var, Var, Bcast),
    MatMul {
        a: Var,
        b: Var,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Tanh(Var),
    Silu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        d: usize,
        rstd: Vec<T>,
    },
    Softmax(Var, usize),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        ia: usize,
        ib: usize,
    },
    Upsample2(Var),
    Gather(Var, Vec<usize>),
    Repeat(Var, usize),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    MeanInner(Var, usize),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddBcast(a, b, _) | MulBcast(a, b, _) => {
                vec![*a, *b]
            }
            MatMul { a, b, .. } | Concat { a, b, .. } => vec![*a, *b],
            Conv { x, w, .. } => vec![*x, *w],
            Scale(x, _)
            | ScaleItems(x, _)
            | Tanh(x)
            | Silu(x)
            | Gelu(x)
            | Softmax(x, _)
            | Permute(x, _)
            | Reshape(x)
            | Upsample2(x)
            | Gather(x, _)
            | Repeat(x, _)
            | Sum(x)
            | Mean(x)
            | Abs(x)
            | MeanInner(x, _) => vec![*x],
            LayerNorm { x, .. } => vec![*x],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Rc<Array<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording tape. Create one per forward evaluation.
pub struct Graph<T: Elem = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }
}

/// Gradients of leaf variables from one backward pass.
pub struct Grads<T: Elem = f32> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Elem> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Array<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn sigmoid<T: Elem>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl Graph<f32> {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Elem> Graph<T> {
    /// Number of recorded ops, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Rc<Array<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes.borrow()[v.0].op, Op::Leaf)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push(&self, value: Array<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.parents().iter().any(|p| nodes[p.0].needs_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_leaf(&self, value: Array<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn param(&self, t: Array<T>) -> Var {
        self.push_leaf(t, true)
    }

    /// Non-differentiable input; also serves as stop-gradient.
    pub fn constant(&self, t: Array<T>) -> Var {
        self.push_leaf(t, false)
    }

    /// Constant from a working-precision tensor.
    pub fn lift(&self, t: &super::Tensor) -> Var {
        self.constant(t.cast())
    }

    pub fn stop_grad(&self, v: Var) -> Var {
        let t = (*self.value(v)).clone();
        self.constant(t)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Array<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        Array::from_parts(
            va.shape().to_vec(),
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, c: f32) -> Var {
        let c = T::of_f32(c);
        let t = self.value(a).scale(c);
        self.push(t, Op::Scale(a, c))
    }

    /// Multiply batch item `i` of `x` by `coeffs[i]`.
    pub fn scale_items(&self, x: Var, coeffs: &[f32]) -> Var {
        let v = self.value(x);
        assert_eq!(v.batch(), coeffs.len());
        let coeffs: Vec<T> = coeffs.iter().map(|&c| T::of_f32(c)).collect();
        let n = v.item_len();
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &e)| e * coeffs[i / n])
            .collect();
        self.push(
            Array::from_parts(v.shape().to_vec(), data),
            Op::ScaleItems(x, coeffs),
        )
    }

    fn bcast_layout(&self, x: Var, b: Var, axis: usize) -> Bcast {
        let xs = self.shape(x);
        let bs = self.shape(b);
        let outer: usize = xs[..axis].iter().product();
        let ch = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let bn: usize = bs.iter().product();
        let per_outer = if bn == ch {
            false
        } else if bn == outer * ch {
            true
        } else {
            panic!("broadcast operand {bs:?} incompatible with {xs:?} at axis {axis}")
        };
        Bcast {
            outer,
            ch,
            inner,
            per_outer,
        }
    }

    fn bcast_apply(&self, x: Var, b: Var, l: Bcast, f: impl Fn(T, T) -> T) -> Array<T> {
        let (vx, vb) = (self.value(x), self.value(b));
        let (xd, bd) = (vx.data(), vb.data());
        let mut out = Vec::with_capacity(xd.len());
        for o in 0..l.outer {
            for c in 0..l.ch {
                let bv = bd[if l.per_outer { o * l.ch + c } else { c }];
                let base = (o * l.ch + c) * l.inner;
                out.extend(xd[base..base + l.inner].iter().map(|&e| f(e, bv)));
            }
        }
        Array::from_parts(vx.shape().to_vec(), out)
    }

    /// `x + b` with `b` broadcast along every axis except `axis` (and
    /// optionally the leading axes, when `b` carries them).
    pub fn add_bcast(&self, x: Var, b: Var, axis: usize) -> Var {
        let l = self.bcast_layout(x, b, axis);
        let t = self.bcast_apply(x, b, l, |e, bv| e + bv);
        self.push(t, Op::AddBcast(x, b, l))
    }

    pub fn mul_bcast(&self, x: Var, b: Var, axis: usize) -> Var {
        let l = self.bcast_layout(x, b, axis);
        let t = self.bcast_apply(x, b, l, |e, bv| e * bv);
        self.push(t, Op::MulBcast(x, b, l))
    }

    /// Batched matmul over a leading group axis. With `ta`, `a` is stored as
    /// `[g, k, m]`; with `tb`, `b` is stored as `[g, n, k]`.
    pub fn bmm(&self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0],
            "bmm {sa:?} {sb:?}"
        );
        let groups = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm inner dims {sa:?} {sb:?}");
        let mut out = vec![T::zero(); groups * m * n];
        for g in 0..groups {
            gemm(
                m,
                k,
                n,
                &va.data()[g * m * k..],
                ta,
                &vb.data()[g * k * n..],
                tb,
                &mut out[g * m * n..],
                T::zero(),
            );
        }
        self.push(
            Array::from_parts(vec![groups, m, n], out),
            Op::MatMul {
                a,
                b,
                groups,
                m,
                k,
                n,
                ta,
                tb,
            },
        )
    }

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul {sa:?} {sb:?}");
        let a3 = self.reshape(a, &[1, sa[0], sa[1]]);
        let b3 = self.reshape(b, &[1, sb[0], sb[1]]);
        let c = self.bmm(a3, b3, false, false);
        self.reshape(c, &[sa[0], sb[1]])
    }

    /// Dense layer on the last axis: `x [.., in] @ w [in, out] + b [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let d_in = *xs.last().unwrap();
        assert_eq!(ws[0], d_in, "linear {xs:?} @ {ws:?}");
        let rows = xs.iter().product::<usize>() / d_in;
        let x2 = self.reshape(x, &[rows, d_in]);
        let mut y = self.matmul(x2, w);
        if let Some(b) = b {
            y = self.add_bcast(y, b, 1);
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(y, &out_shape)
    }

    /// 2-D convolution. `w` is `[cout, cin * k * k]`.
    pub fn conv2d(&self, x: Var, w: Var, k: usize, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let xs = vx.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be [B,C,H,W]");
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = vw.shape()[0];
        assert_eq!(
            vw.numel(),
            cout * cin * k * k,
            "conv weight {:?}",
            vw.shape()
        );
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = im2col(vx.data(), &geom);
        let ncol = batch * ho * wo;
        let ck = cin * k * k;
        let mut mat = vec![T::zero(); cout * ncol];
        gemm(
            cout,
            ck,
            ncol,
            vw.data(),
            false,
            &cols,
            false,
            &mut mat,
            T::zero(),
        );
        // [cout, B, hw] -> [B, cout, hw]
        let hw = ho * wo;
        let mut out = vec![T::zero(); batch * cout * hw];
        for co in 0..cout {
            for b in 0..batch {
                let src = &mat[co * ncol + b * hw..co * ncol + (b + 1) * hw];
                out[(b * cout + co) * hw..(b * cout + co + 1) * hw].copy_from_slice(src);
            }
        }
        drop(vx);
        drop(vw);
        self.push(
            Array::from_parts(vec![batch, cout, ho, wo], out),
            Op::Conv { x, w, geom, cols },
        )
    }

    pub fn tanh(&self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        self.push(t, Op::Tanh(x))
    }

    pub fn silu(&self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push(t, Op::Silu(x))
    }

    pub fn gelu(&self, x: Var) -> Var {
        let (half, c, a) = (T::lit(0.5), T::lit(GELU_C), T::lit(GELU_A));
        let t = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        self.push(t, Op::Gelu(x))
    }

    /// Normalize over the last axis (no affine).
    pub fn layer_norm(&self, x: Var) -> Var {
        let v = self.value(x);
        let d = *v.shape().last().unwrap();
        let rows = v.numel() / d;
        let mut out = vec![T::zero(); v.numel()];
        let dn = T::lit(d as f64);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
            rstd.push(rs);
            for (o, &e) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (e - mean) * rs;
            }
        }
        let shape = v.shape().to_vec();
        drop(v);
        self.push(Array::from_parts(shape, out), Op::LayerNorm { x, d, rstd })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let v = self.value(x);
        let d = *v.shape().last().unwrap();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &e| m.max(e));
            let mut s = T::zero();
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                s += *e;
            }
            for e in row.iter_mut() {
                *e /= s;
            }
        }
        let shape = v.shape().to_vec();
        drop(v);
        self.push(Array::from_parts(shape, out), Op::Softmax(x, d))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x);
        assert_eq!(
            v.numel(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {shape:?}",
            v.shape()
        );
        let t = Array::from_parts(shape.to_vec(), v.data().to_vec());
        drop(v);
        self.push(t, Op::Reshape(x))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Var {
        let v = self.value(x);
        let (shape, data) = permute_data(v.shape(), v.data(), perm);
        drop(v);
        self.push(
            Array::from_parts(shape, data),
            Op::Permute(x, perm.to_vec()),
        )
    }

    /// Concatenate along `axis`.
    pub fn concat(&self, a: Var, b: Var, axis: usize) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert_eq!(sa.len(), sb.len());
        for i in 0..sa.len() {
            assert!(i == axis || sa[i] == sb[i], "concat {sa:?} {sb:?}");
        }
        let outer: usize = sa[..axis].iter().product();
        let ia = va.numel() / outer;
        let ib = vb.numel() / outer;
        let mut out = Vec::with_capacity(va.numel() + vb.numel());
        for o in 0..outer {
            out.extend_from_slice(&va.data()[o * ia..(o + 1) * ia]);
            out.extend_from_slice(&vb.data()[o * ib..(o + 1) * ib]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        drop(va);
        drop(vb);
        self.push(
            Array::from_parts(shape, out),
            Op::Concat {
                a,
                b,
                outer,
                ia,
                ib,
            },
        )
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2(&self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = v.data()[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let shape = vec![s[0], s[1], 2 * h, 2 * w];
        drop(v);
        self.push(Array::from_parts(shape, out), Op::Upsample2(x))
    }

    /// Rows of `table [n, d]` at `idx`, giving `[idx.len(), d]`.
    pub fn gather(&self, table: Var, idx: &[usize]) -> Var {
        let v = self.value(table);
        let d = v.shape()[1];
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < v.shape()[0], "gather index {i} out of bounds");
            out.extend_from_slice(&v.data()[i * d..(i + 1) * d]);
        }
        drop(v);
        self.push(
            Array::from_parts(vec![idx.len(), d], out),
            Op::Gather(table, idx.to_vec()),
        )
    }

    /// Stack `n` copies of `x` along a new leading axis.
    pub fn repeat(&self, x: Var, n: usize) -> Var {
        let v = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let mut out = Vec::with_capacity(n * v.numel());
        for _ in 0..n {
            out.extend_from_slice(v.data());
        }
        drop(v);
        self.push(Array::from_parts(shape, out), Op::Repeat(x, n))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = T::lit(self.value(x).sum());
        self.push(Array::scalar(s), Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = T::lit(self.value(x).mean());
        self.push(Array::scalar(s), Op::Mean(x))
    }

    pub fn abs(&self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.abs());
        self.push(t, Op::Abs(x))
    }

    /// Sum of squares.
    pub fn sq_sum(&self, x: Var) -> Var {
        let sq = self.mul(x, x);
        self.sum(sq)
    }

    /// Mean cross-entropy of `logits [B, K]` against integer labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Var {
        let v = self.value(logits);
        let k = v.shape()[1];
        let b = v.shape()[0];
        assert_eq!(labels.len(), b);
        let mut probs = v.data().to_vec();
        let mut loss = 0.0f64;
        for (row, &y) in probs.chunks_mut(k).zip(labels) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &e| m.max(e));
            let mut s = T::zero();
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                s += *e;
            }
            for e in row.iter_mut() {
                *e /= s;
            }
            loss -= row[y].as_f64().max(1e-300).ln();
        }
        drop(v);
        self.push(
            Array::scalar(T::lit(loss / b as f64)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean over every axis after the first two: `[B, C, ...] -> [B, C]`.
    pub fn mean_spatial(&self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.shape();
        let inner: usize = s[2..].iter().product();
        let n = T::lit(inner as f64);
        let out: Vec<T> = v
            .data()
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<T>() / n)
            .collect();
        let shape = vec![s[0], s[1]];
        drop(v);
        self.push(Array::from_parts(shape, out), Op::MeanInner(x, inner))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let n = self.value(root).numel();
        assert_eq!(n, 1, "backward root must be scalar");
        self.backward_with(root, Array::scalar(T::one()))
    }

    /// Reverse pass seeded with an explicit cotangent for `root`.
    pub fn backward_with(&self, root: Var, seed: Array<T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.shape(), seed.shape(), "cotangent shape");
        let mut grads: Vec<Option<Array<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, node, g, &mut grads);
        }
        Grads { grads }
    }
}

fn accumulate<T: Elem>(nodes: &[Node<T>], grads: &mut [Option<Array<T>>], v: Var, g: Array<T>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn like<T: Elem>(t: &Array<T>, data: Vec<T>) -> Array<T> {
    Array::from_parts(t.shape().to_vec(), data)
}

fn backprop<T: Elem>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: Array<T>,
    grads: &mut [Option<Array<T>>],
) {
    let val = |v: Var| -> &Array<T> { &nodes[v.0].value };
    let one = T::one();
    let wants = |v: Var| nodes[v.0].needs_grad;
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if wants(*b) {
                accumulate(nodes, grads, *b, g.clone());
            }
            accumulate(nodes, grads, *a, g);
        }
        Op::Sub(a, b) => {
            if wants(*b) {
                accumulate(nodes, grads, *b, g.scale(-one));
            }
            accumulate(nodes, grads, *a, g);
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let d = gd
                    .iter()
                    .zip(val(*b).data())
                    .map(|(&x, &y)| x * y)
                    .collect();
                accumulate(nodes, grads, *a, like(&g, d));
            }
            if wants(*b) {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&x, &y)| x * y)
                    .collect();
                accumulate(nodes, grads, *b, like(&g, d));
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.scale(*c)),
        Op::ScaleItems(a, coeffs) => {
            let n = g.item_len();
            let d = gd
                .iter()
                .enumerate()
                .map(|(i, &e)| e * coeffs[i / n])
                .collect();
            accumulate(nodes, grads, *a, like(&g, d));
        }
        Op::AddBcast(x, b, l) => {
            if wants(*b) {
                let bt = val(*b);
                let mut db = vec![T::zero(); bt.numel()];
                for o in 0..l.outer {
                    for c in 0..l.ch {
                        let base = (o * l.ch + c) * l.inner;
                        let s: T = gd[base..base + l.inner].iter().copied().sum();
                        db[if l.per_outer { o * l.ch + c } else { c }] += s;
                    }
                }
                accumulate(nodes, grads, *b, like(bt, db));
            }
            accumulate(nodes, grads, *x, g);
        }
        Op::MulBcast(x, b, l) => {
            let (xt, bt) = (val(*x), val(*b));
            if wants(*b) {
                let mut db = vec![T::zero(); bt.numel()];
                for o in 0..l.outer {
                    for c in 0..l.ch {
                        let base = (o * l.ch + c) * l.inner;
                        let s: T = gd[base..base + l.inner]
                            .iter()
                            .zip(&xt.data()[base..base + l.inner])
                            .map(|(&a, &b)| a * b)
                            .sum();
                        db[if l.per_outer { o * l.ch + c } else { c }] += s;
                    }
                }
                accumulate(nodes, grads, *b, like(bt, db));
            }
            if wants(*x) {
                let mut dx = vec![T::zero(); xt.numel()];
                for o in 0..l.outer {
                    for c in 0..l.ch {
                        let bv = bt.data()[if l.per_outer { o * l.ch + c } else { c }];
                        let base = (o * l.ch + c) * l.inner;
                        for j in base..base + l.inner {
                            dx[j] = gd[j] * bv;
                        }
                    }
                }
                accumulate(nodes, grads, *x, like(xt, dx));
            }
        }
        Op::MatMul {
            a,
            b,
            groups,
            m,
            k,
            n,
            ta,
            tb,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (at, bt) = (val(*a), val(*b));
            if wants(*a) {
                let mut da = vec![T::zero(); at.numel()];
                for gi in 0..*groups {
                    let dc = &gd[gi * m * n..];
                    let bb = &bt.data()[gi * k * n..];
                    let out = &mut da[gi * m * k..];
                    if !*ta {
                        gemm(m, n, k, dc, false, bb, !*tb, out, T::zero());
                    } else {
                        gemm(k, n, m, bb, *tb, dc, true, out, T::zero());
                    }
                }
                accumulate(nodes, grads, *a, like(at, da));
            }
            if wants(*b) {
                let mut db = vec![T::zero(); bt.numel()];
                for gi in 0..*groups {
                    let dc = &gd[gi * m * n..];
                    let aa = &at.data()[gi * m * k..];
                    let out = &mut db[gi * k * n..];
                    if !*tb {
                        gemm(k, m, n, aa, !*ta, dc, false, out, T::zero());
                    } else {
                        gemm(n, m, k, dc, true, aa, *ta, out, T::zero());
                    }
                }
                accumulate(nodes, grads, *b, like(bt, db));
            }
        }
        Op::Conv { x, w, geom, cols } => {
            let ConvGeom {
                batch,
                cin,
                cout,
                k,
                ho,
                wo,
                ..
            } = *geom;
            let hw = ho * wo;
            let ncol = batch * hw;
            let ck = cin * k * k;
            let mut dmat = vec![T::zero(); cout * ncol];
            for b in 0..batch {
                for co in 0..cout {
                    dmat[co * ncol + b * hw..co * ncol + (b + 1) * hw]
                        .copy_from_slice(&gd[(b * cout + co) * hw..(b * cout + co + 1) * hw]);
                }
            }
            if wants(*w) {
                let mut dw = vec![T::zero(); cout * ck];
                gemm(cout, ncol, ck, &dmat, false, cols, true, &mut dw, T::zero());
                accumulate(nodes, grads, *w, like(val(*w), dw));
            }
            if wants(*x) {
                let mut dcols = vec![T::zero(); ck * ncol];
                gemm(
                    ck,
                    cout,
                    ncol,
                    val(*w).data(),
                    true,
                    &dmat,
                    false,
                    &mut dcols,
                    T::zero(),
                );
                let dx = col2im(&dcols, geom);
                accumulate(nodes, grads, *x, like(val(*x), dx));
            }
        }
        Op::Tanh(x) => {
            let y = node.value.data();
            let d = gd.iter().zip(y).map(|(&g, &y)| g * (one - y * y)).collect();
            accumulate(nodes, grads, *x, like(&g, d));
        }
        Op::Silu(x) => {
            let d = gd
                .iter()
                .zip(val(*x).data())
                .map(|(&g, &v)| {
                    let s = sigmoid(v);
                    g * (s + v * s * (one - s))
                })
                .collect();
            accumulate(nodes, grads, *x, like(&g, d));
        }
        Op::Gelu(x) => {
            let (half, c, a) = (T::lit(0.5), T::lit(GELU_C), T::lit(GELU_A));
            let three = T::lit(3.0);
            let d = gd
                .iter()
                .zip(val(*x).data())
                .map(|(&g, &v)| {
                    let th = (c * (v + a * v * v * v)).tanh();
                    let dth = (one - th * th) * c * (one + three * a * v * v);
                    g * (half * (one + th) + half * v * dth)
                })
                .collect();
            accumulate(nodes, grads, *x, like(&g, d));
        }
        Op::LayerNorm { x, d, rstd } => {
            let d = *d;
            let xhat = node.value.data();
            let dn = T::lit(d as f64);
            let mut dx = vec![T::zero(); gd.len()];
            for (r, rs) in rstd.iter().enumerate() {
                let gr = &gd[r * d..(r + 1) * d];
                let xr = &xhat[r * d..(r + 1) * d];
                let mg = gr.iter().copied().sum::<T>() / dn;
                let mgx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                for j in 0..d {
                    dx[r * d + j] = *rs * (gr[j] - mg - xr[j] * mgx);
                }
            }
            accumulate(nodes, grads, *x, like(&g, dx));
        }
        Op::Softmax(x, d) => {
            let y = node.value.data();
            let mut dx = vec![T::zero(); gd.len()];
            for ((dr, gr), yr) in dx.chunks_mut(*d).zip(gd.chunks(*d)).zip(y.chunks(*d)) {
                let s: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for j in 0..*d {
                    dr[j] = yr[j] * (gr[j] - s);
                }
            }
            accumulate(nodes, grads, *x, like(&g, dx));
        }
        Op::Reshape(x) => {
            let t = Array::from_parts(val(*x).shape().to_vec(), g.into_data());
            accumulate(nodes, grads, *x, t);
        }
        Op::Permute(x, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (shape, data) = permute_data(g.shape(), gd, &inv);
            accumulate(nodes, grads, *x, Array::from_parts(shape, data));
        }
        Op::Concat {
            a,
            b,
            outer,
            ia,
            ib,
        } => {
            let (ia, ib) = (*ia, *ib);
            if wants(*a) {
                let mut da = Vec::with_capacity(outer * ia);
                for o in 0..*outer {
                    da.extend_from_slice(&gd[o * (ia + ib)..o * (ia + ib) + ia]);
                }
                accumulate(nodes, grads, *a, like(val(*a), da));
            }
            if wants(*b) {
                let mut db = Vec::with_capacity(outer * ib);
                for o in 0..*outer {
                    db.extend_from_slice(&gd[o * (ia + ib) + ia..(o + 1) * (ia + ib)]);
                }
                accumulate(nodes, grads, *b, like(val(*b), db));
            }
        }
        Op::Upsample2(x) => {
            let xt = val(*x);
            let s = xt.shape();
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            let mut dx = vec![T::zero(); xt.numel()];
            for p in 0..planes {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dx[(p * h + y / 2) * w + xx / 2] += gd[(p * 2 * h + y) * 2 * w + xx];
                    }
                }
            }
            accumulate(nodes, grads, *x, like(xt, dx));
        }
        Op::Gather(table, idx) => {
            let tt = val(*table);
            let d = tt.shape()[1];
            let mut dt = vec![T::zero(); tt.numel()];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..d {
                    dt[i * d + j] += gd[r * d + j];
                }
            }
            accumulate(nodes, grads, *table, like(tt, dt));
        }
        Op::Repeat(x, n) => {
            let xt = val(*x);
            let m = xt.numel();
            let mut dx = vec![T::zero(); m];
            for r in 0..*n {
                for j in 0..m {
                    dx[j] += gd[r * m + j];
                }
            }
            accumulate(nodes, grads, *x, like(xt, dx));
        }
        Op::Sum(x) => {
            let xt = val(*x);
            accumulate(nodes, grads, *x, Array::full(xt.shape(), gd[0]));
        }
        Op::Mean(x) => {
            let xt = val(*x);
            let c = gd[0] / T::lit(xt.numel() as f64);
            accumulate(nodes, grads, *x, Array::full(xt.shape(), c));
        }
        Op::Abs(x) => {
            let d = gd
                .iter()
                .zip(val(*x).data())
                .map(|(&g, &v)| {
                    if v > T::zero() {
                        g
                    } else if v < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })
                .collect();
            accumulate(nodes, grads, *x, like(&g, d));
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let lt = val(*logits);
            let k = lt.shape()[1];
            let b = T::lit(labels.len() as f64);
            let mut d = probs.clone();
            for (r, &y) in labels.iter().enumerate() {
                d[r * k + y] -= one;
            }
            for e in d.iter_mut() {
                *e *= gd[0] / b;
            }
            accumulate(nodes, grads, *logits, like(lt, d));
        }
        Op::MeanInner(x, inner) => {
            let xt = val(*x);
            let mut dx = vec![T::zero(); xt.numel()];
            for (i, &gv) in gd.iter().enumerate() {
                let c = gv / T::lit(*inner as f64);
                for e in &mut dx[i * inner..(i + 1) * inner] {
                    *e = c;
                }
            }
            accumulate(nodes, grads, *x, like(xt, dx));
        }
    }
}

fn im2col<T: Elem>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.ho * g.wo;
    let ncol = g.batch * hw;
    let mut cols = vec![T::zero(); g.cin * g.k * g.k * ncol];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for b in 0..g.batch {
                    let plane = &x[(b * g.cin + ci) * g.h * g.w..(b * g.cin + ci + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_row = &mut dst[b * hw + oy * g.wo..b * hw + (oy + 1) * g.wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Elem>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.ho * g.wo;
    let ncol = g.batch * hw;
    let mut x = vec![T::zero(); g.batch * g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for b in 0..g.batch {
                    let base = (b * g.cin + ci) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                x[base + iy as usize * g.w + ix as usize] +=
                                    src[b * hw + oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn permute_data<T: Elem>(shape: &[usize], data: &[T], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let r = shape.len();
    assert_eq!(perm.len(), r, "permutation rank");
    let mut in_strides = vec![1; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; r];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}
