//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Ops work at tensor granularity with explicit leading batch dimensions.
//! Values are computed eagerly; `backward` walks the tape in reverse
//! creation order, which is always a valid topological order.

use std::rc::Rc;

use crate::rope::RopeConfig;
use crate::tensor::{matmul, matmul_at_into, matmul_bt, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValId(pub(crate) usize);

pub(crate) enum Op<S: Scalar> {
    Leaf { requires_grad: bool },
    Add(ValId, ValId),
    Sub(ValId, ValId),
    Mul(ValId, ValId),
    Scale(ValId, S),
    /// x (..., k) @ w (k, n) + b
    Affine { x: ValId, w: ValId, b: Option<ValId> },
    /// a (..., m, k) @ b (..., k, n); transpose_b flips b to (..., n, k)
    Bmm { a: ValId, b: ValId, transpose_b: bool },
    /// (B, L, H*dh) -> (B*H, L, dh)
    SplitHeads { x: ValId, heads: usize },
    /// (B*H, L, dh) -> (B, L, H*dh)
    MergeHeads { x: ValId, heads: usize },
    Softmax { x: ValId },
    LayerNorm { x: ValId, eps: f64 },
    Gelu(ValId),
    Silu(ValId),
    /// Pairwise rotation of the last axis of (G, L, dh) by per-position angles.
    Rope { x: ValId, coords: Rc<Vec<[i64; 4]>>, cfg: RopeConfig },
    Reshape { x: ValId },
    /// Rows [start, start+len) along axis 1 of (B, L, d).
    SliceRows { x: ValId, start: usize, len: usize },
    /// Entries [start, start+len) along the last axis.
    SliceLast { x: ValId, start: usize, len: usize },
    /// (d,) -> (b, l, d)
    BroadcastVec { v: ValId, b: usize, l: usize },
    /// x (B, L, d) * (s (B, d) + plus_one)
    ModScale { x: ValId, s: ValId, plus_one: bool },
    /// x (B, L, d) + s (B, d)
    ModShift { x: ValId, s: ValId },
    /// x (B, L, d) * v (d,)
    MulVec { x: ValId, v: ValId },
    /// Fourier phase factors of a normalized time: even channels
    /// cos(gamma[c] * t_bar), odd channels -sin(gamma[c] * t_bar).
    FourierPhase { gamma: ValId, t_bar: f64 },
    /// table (n, d) -> (d,)
    SelectRow { table: ValId, row: usize },
    SumAll(ValId),
}

pub(crate) struct Node<S: Scalar> {
    pub op: Op<S>,
    pub value: Tensor<S>,
    pub requires: bool,
}

pub struct Tape<S: Scalar> {
    pub(crate) nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: ValId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn requires(&self, id: ValId) -> bool {
        self.nodes[id.0].requires
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> ValId {
        let requires = match &op {
            Op::Leaf { requires_grad } => *requires_grad,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => self.requires(*a) || self.requires(*b),
            Op::Scale(a, _) => self.requires(*a),
            Op::Affine { x, w, b } => {
                self.requires(*x) || self.requires(*w) || b.map(|b| self.requires(b)).unwrap_or(false)
            }
            Op::Bmm { a, b, .. } => self.requires(*a) || self.requires(*b),
            Op::SplitHeads { x, .. }
            | Op::MergeHeads { x, .. }
            | Op::Softmax { x }
            | Op::LayerNorm { x, .. }
            | Op::Gelu(x)
            | Op::Silu(x)
            | Op::Rope { x, .. }
            | Op::Reshape { x }
            | Op::SliceRows { x, .. }
            | Op::SliceLast { x, .. }
            | Op::SumAll(x) => self.requires(*x),
            Op::BroadcastVec { v, .. } => self.requires(*v),
            Op::ModScale { x, s, .. } | Op::ModShift { x, s } => self.requires(*x) || self.requires(*s),
            Op::MulVec { x, v } => self.requires(*x) || self.requires(*v),
            Op::FourierPhase { gamma, .. } => self.requires(*gamma),
            Op::SelectRow { table, .. } => self.requires(*table),
        };
        self.nodes.push(Node { op, value, requires });
        ValId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> ValId {
        self.push(Op::Leaf { requires_grad: true }, value)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> ValId {
        self.push(Op::Leaf { requires_grad: false }, value)
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> ValId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: ValId, b: ValId) -> ValId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> ValId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: ValId, c: S) -> ValId {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn affine(&mut self, x: ValId, w: ValId, b: Option<ValId>) -> ValId {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let k = *xs.last().unwrap();
        assert_eq!(ws[0], k, "affine: inner dims {k} vs {}", ws[0]);
        let n = ws[1];
        let m: usize = xs[..xs.len() - 1].iter().product();
        let mut y = matmul(self.value(x).data(), self.value(w).data(), m, k, n);
        if let Some(bid) = b {
            let bv = self.value(bid).data().to_vec();
            assert_eq!(bv.len(), n);
            for row in y.chunks_exact_mut(n) {
                for (out, &bb) in row.iter_mut().zip(bv.iter()) {
                    *out += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        self.push(Op::Affine { x, w, b }, Tensor::from_vec(&shape, y))
    }

    pub fn bmm(&mut self, a: ValId, b: ValId, transpose_b: bool) -> ValId {
        let ash = self.value(a).shape().to_vec();
        let bsh = self.value(b).shape().to_vec();
        assert!(ash.len() >= 2 && ash.len() == bsh.len());
        assert_eq!(&ash[..ash.len() - 2], &bsh[..bsh.len() - 2], "bmm leading dims");
        let g: usize = ash[..ash.len() - 2].iter().product();
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (n, kb) = if transpose_b {
            (bsh[bsh.len() - 2], bsh[bsh.len() - 1])
        } else {
            (bsh[bsh.len() - 1], bsh[bsh.len() - 2])
        };
        assert_eq!(k, kb, "bmm inner dims");
        let mut out = vec![S::ZERO; g * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for gi in 0..g {
            let a_blk = &av[gi * m * k..(gi + 1) * m * k];
            let b_blk = &bv[gi * n * k..(gi + 1) * n * k];
            let c_blk = if transpose_b {
                matmul_bt(a_blk, b_blk, m, k, n)
            } else {
                matmul(a_blk, b_blk, m, k, n)
            };
            out[gi * m * n..(gi + 1) * m * n].copy_from_slice(&c_blk);
        }
        let mut shape = ash[..ash.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        self.push(Op::Bmm { a, b, transpose_b }, Tensor::from_vec(&shape, out))
    }

    pub fn split_heads(&mut self, x: ValId, heads: usize) -> ValId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (b, l, d) = (xs[0], xs[1], xs[2]);
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let mut out = vec![S::ZERO; b * l * d];
        let src = self.value(x).data();
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let src_base = (bi * l + li) * d + h * dh;
                    let dst_base = ((bi * heads + h) * l + li) * dh;
                    out[dst_base..dst_base + dh].copy_from_slice(&src[src_base..src_base + dh]);
                }
            }
        }
        self.push(Op::SplitHeads { x, heads }, Tensor::from_vec(&[b * heads, l, dh], out))
    }

    pub fn merge_heads(&mut self, x: ValId, heads: usize) -> ValId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (bh, l, dh) = (xs[0], xs[1], xs[2]);
        assert_eq!(bh % heads, 0);
        let b = bh / heads;
        let d = heads * dh;
        let mut out = vec![S::ZERO; b * l * d];
        let src = self.value(x).data();
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let src_base = ((bi * heads + h) * l + li) * dh;
                    let dst_base = (bi * l + li) * d + h * dh;
                    out[dst_base..dst_base + dh].copy_from_slice(&src[src_base..src_base + dh]);
                }
            }
        }
        self.push(Op::MergeHeads { x, heads }, Tensor::from_vec(&[b, l, d], out))
    }

    pub fn softmax(&mut self, x: ValId) -> ValId {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().unwrap();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.maximum(v);
            }
            let mut sum = S::ZERO;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        self.push(Op::Softmax { x }, Tensor::from_vec(&shape, out))
    }

    pub fn layer_norm(&mut self, x: ValId, eps: f64) -> ValId {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().unwrap();
        let inv_d = S::from_f64(1.0 / d as f64);
        let epss = S::from_f64(eps);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let mut mean = S::ZERO;
            for &v in row.iter() {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = S::ZERO;
            for &v in row.iter() {
                let dv = v - mean;
                var += dv * dv;
            }
            var = var * inv_d;
            let inv_std = S::ONE / (var + epss).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv_std;
            }
        }
        self.push(Op::LayerNorm { x, eps }, Tensor::from_vec(&shape, out))
    }

    pub fn gelu(&mut self, x: ValId) -> ValId {
        let v = self.value(x).map(gelu_fwd);
        self.push(Op::Gelu(x), v)
    }

    pub fn silu(&mut self, x: ValId) -> ValId {
        let v = self.value(x).map(silu_fwd);
        self.push(Op::Silu(x), v)
    }

    pub fn rope(&mut self, x: ValId, coords: Rc<Vec<[i64; 4]>>, cfg: RopeConfig) -> ValId {
        let shape = self.value(x).shape().to_vec();
        assert_eq!(shape.len(), 3);
        let (g, l, dh) = (shape[0], shape[1], shape[2]);
        assert_eq!(l, coords.len(), "one coordinate per position");
        assert_eq!(dh, cfg.head_dim);
        let table = rope_table::<S>(&coords, &cfg, false);
        let mut out = self.value(x).data().to_vec();
        apply_rope_table(&mut out, &table, g, l, dh);
        self.push(Op::Rope { x, coords, cfg }, Tensor::from_vec(&shape, out))
    }

    pub fn reshape(&mut self, x: ValId, shape: &[usize]) -> ValId {
        let v = self.value(x).reshaped(shape);
        self.push(Op::Reshape { x }, v)
    }

    pub fn slice_rows(&mut self, x: ValId, start: usize, len: usize) -> ValId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (b, l, d) = (xs[0], xs[1], xs[2]);
        assert!(start + len <= l);
        let mut out = vec![S::ZERO; b * len * d];
        let src = self.value(x).data();
        for bi in 0..b {
            let src_base = (bi * l + start) * d;
            out[bi * len * d..(bi + 1) * len * d].copy_from_slice(&src[src_base..src_base + len * d]);
        }
        self.push(Op::SliceRows { x, start, len }, Tensor::from_vec(&[b, len, d], out))
    }

    pub fn slice_last(&mut self, x: ValId, start: usize, len: usize) -> ValId {
        let xs = self.value(x).shape().to_vec();
        let d = *xs.last().unwrap();
        assert!(start + len <= d);
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let mut out = vec![S::ZERO; rows * len];
        let src = self.value(x).data();
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        self.push(Op::SliceLast { x, start, len }, Tensor::from_vec(&shape, out))
    }

    pub fn broadcast_vec(&mut self, v: ValId, b: usize, l: usize) -> ValId {
        let d = self.value(v).len();
        let src = self.value(v).data().to_vec();
        let mut out = Vec::with_capacity(b * l * d);
        for _ in 0..b * l {
            out.extend_from_slice(&src);
        }
        self.push(Op::BroadcastVec { v, b, l }, Tensor::from_vec(&[b, l, d], out))
    }

    pub fn mod_scale(&mut self, x: ValId, s: ValId, plus_one: bool) -> ValId {
        let xs = self.value(x).shape().to_vec();
        let (b, l, d) = (xs[0], xs[1], xs[2]);
        assert_eq!(self.value(s).shape(), &[b, d]);
        let sv = self.value(s).data().to_vec();
        let one = if plus_one { S::ONE } else { S::ZERO };
        let mut out = self.value(x).data().to_vec();
        for bi in 0..b {
            let srow = &sv[bi * d..(bi + 1) * d];
            for li in 0..l {
                let row = &mut out[(bi * l + li) * d..(bi * l + li + 1) * d];
                for (o, &sc) in row.iter_mut().zip(srow.iter()) {
                    *o = *o * (sc + one);
                }
            }
        }
        self.push(Op::ModScale { x, s, plus_one }, Tensor::from_vec(&xs, out))
    }

    pub fn mod_shift(&mut self, x: ValId, s: ValId) -> ValId {
        let xs = self.value(x).shape().to_vec();
        let (b, l, d) = (xs[0], xs[1], xs[2]);
        assert_eq!(self.value(s).shape(), &[b, d]);
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for bi in 0..b {
            let srow = &sv[bi * d..(bi + 1) * d];
            for li in 0..l {
                let row = &mut out[(bi * l + li) * d..(bi * l + li + 1) * d];
                for (o, &sc) in row.iter_mut().zip(srow.iter()) {
                    *o += sc;
                }
            }
        }
        self.push(Op::ModShift { x, s }, Tensor::from_vec(&xs, out))
    }

    pub fn mul_vec(&mut self, x: ValId, v: ValId) -> ValId {
        let xs = self.value(x).shape().to_vec();
        let d = *xs.last().unwrap();
        assert_eq!(self.value(v).len(), d);
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            for (o, &f) in row.iter_mut().zip(vv.iter()) {
                *o = *o * f;
            }
        }
        self.push(Op::MulVec { x, v }, Tensor::from_vec(&xs, out))
    }

    pub fn fourier_phase(&mut self, gamma: ValId, t_bar: f64) -> ValId {
        let g = self.value(gamma).data().to_vec();
        let tb = S::from_f64(t_bar);
        let out: Vec<S> = g
            .iter()
            .enumerate()
            .map(|(c, &gc)| {
                let arg = (gc * tb).to_f64();
                if c % 2 == 0 {
                    S::from_f64(arg.cos())
                } else {
                    S::from_f64(-arg.sin())
                }
            })
            .collect();
        let shape = self.value(gamma).shape().to_vec();
        self.push(Op::FourierPhase { gamma, t_bar }, Tensor::from_vec(&shape, out))
    }

    pub fn select_row(&mut self, table: ValId, row: usize) -> ValId {
        let ts = self.value(table).shape().to_vec();
        assert_eq!(ts.len(), 2);
        let d = ts[1];
        let v = self.value(table).data()[row * d..(row + 1) * d].to_vec();
        self.push(Op::SelectRow { table, row }, Tensor::from_vec(&[d], v))
    }

    pub fn sum_all(&mut self, x: ValId) -> ValId {
        let s = self.value(x).sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    /// Gradients of a scalar node with respect to every grad-requiring node.
    pub fn backward(&self, loss: ValId) -> Vec<Option<Tensor<S>>> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(S::ONE));
        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires {
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf { requires_grad: true }) {
                grads[id] = Some(g);
            }
        }
        grads
    }

    fn accum(&self, grads: &mut [Option<Tensor<S>>], id: ValId, delta: Tensor<S>) {
        if !self.requires(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_in_place(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, id: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    self.accum(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                }
                if self.requires(*b) {
                    self.accum(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Scale(a, c) => self.accum(grads, *a, g.map(|v| v * *c)),
            Op::Affine { x, w, b } => {
                let xs = self.value(*x).shape().to_vec();
                let k = *xs.last().unwrap();
                let m: usize = xs[..xs.len() - 1].iter().product();
                let n = self.value(*w).shape()[1];
                if self.requires(*x) {
                    // dx = g @ w^T
                    let dx = matmul_bt(g.data(), self.value(*w).data(), m, n, k);
                    self.accum(grads, *x, Tensor::from_vec(&xs, dx));
                }
                if self.requires(*w) {
                    // dw = x^T @ g
                    let mut dw = vec![S::ZERO; k * n];
                    matmul_at_into(&mut dw, self.value(*x).data(), g.data(), m, k, n, false);
                    self.accum(grads, *w, Tensor::from_vec(&[k, n], dw));
                }
                if let Some(bid) = b {
                    if self.requires(*bid) {
                        let mut db = vec![S::ZERO; n];
                        for row in g.data().chunks_exact(n) {
                            for (acc, &gv) in db.iter_mut().zip(row.iter()) {
                                *acc += gv;
                            }
                        }
                        self.accum(grads, *bid, Tensor::from_vec(&[n], db));
                    }
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let ash = self.value(*a).shape().to_vec();
                let bsh = self.value(*b).shape().to_vec();
                let gcount: usize = ash[..ash.len() - 2].iter().product();
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = if *transpose_b { bsh[bsh.len() - 2] } else { *bsh.last().unwrap() };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let gv = g.data();
                if self.requires(*a) {
                    let mut da = vec![S::ZERO; av.len()];
                    for gi in 0..gcount {
                        let g_blk = &gv[gi * m * n..(gi + 1) * m * n];
                        let b_blk = &bv[gi * n * k..(gi + 1) * n * k];
                        let out = &mut da[gi * m * k..(gi + 1) * m * k];
                        if *transpose_b {
                            // y = a b^T => da = g @ b
                            out.copy_from_slice(&matmul(g_blk, b_blk, m, n, k));
                        } else {
                            // da = g @ b^T ; b is (k, n)
                            out.copy_from_slice(&matmul_bt(g_blk, b_blk, m, n, k));
                        }
                    }
                    self.accum(grads, *a, Tensor::from_vec(&ash, da));
                }
                if self.requires(*b) {
                    let mut db = vec![S::ZERO; bv.len()];
                    for gi in 0..gcount {
                        let g_blk = &gv[gi * m * n..(gi + 1) * m * n];
                        let a_blk = &av[gi * m * k..(gi + 1) * m * k];
                        let out = &mut db[gi * n * k..(gi + 1) * n * k];
                        if *transpose_b {
                            // db = g^T @ a, shaped (n, k)
                            matmul_at_into(out, g_blk, a_blk, m, n, k, false);
                        } else {
                            // db = a^T @ g, shaped (k, n)
                            matmul_at_into(out, a_blk, g_blk, m, k, n, false);
                        }
                    }
                    self.accum(grads, *b, Tensor::from_vec(&bsh, db));
                }
            }
            Op::SplitHeads { x, heads } => {
                let xs = self.value(*x).shape().to_vec();
                let (b, l, d) = (xs[0], xs[1], xs[2]);
                let dh = d / heads;
                let mut dx = vec![S::ZERO; b * l * d];
                let gv = g.data();
                for bi in 0..b {
                    for li in 0..l {
                        for h in 0..*heads {
                            let gb = ((bi * heads + h) * l + li) * dh;
                            let xb = (bi * l + li) * d + h * dh;
                            dx[xb..xb + dh].copy_from_slice(&gv[gb..gb + dh]);
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(&xs, dx));
            }
            Op::MergeHeads { x, heads } => {
                let xs = self.value(*x).shape().to_vec();
                let (bh, l, dh) = (xs[0], xs[1], xs[2]);
                let b = bh / heads;
                let d = heads * dh;
                let mut dx = vec![S::ZERO; bh * l * dh];
                let gv = g.data();
                for bi in 0..b {
                    for li in 0..l {
                        for h in 0..*heads {
                            let gb = (bi * l + li) * d + h * dh;
                            let xb = ((bi * heads + h) * l + li) * dh;
                            dx[xb..xb + dh].copy_from_slice(&gv[gb..gb + dh]);
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(&xs, dx));
            }
            Op::Softmax { x } => {
                let y = &self.nodes[id].value;
                let d = *y.shape().last().unwrap();
                let mut dx = g.data().to_vec();
                for (row, yrow) in dx.chunks_exact_mut(d).zip(y.data().chunks_exact(d)) {
                    let mut dot = S::ZERO;
                    for (&gv, &yv) in row.iter().zip(yrow.iter()) {
                        dot += gv * yv;
                    }
                    for (gv, &yv) in row.iter_mut().zip(yrow.iter()) {
                        *gv = yv * (*gv - dot);
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(y.shape(), dx));
            }
            Op::LayerNorm { x, eps } => {
                let xv = self.value(*x);
                let y = &self.nodes[id].value;
                let d = *y.shape().last().unwrap();
                let inv_d = S::from_f64(1.0 / d as f64);
                let epss = S::from_f64(*eps);
                let mut dx = vec![S::ZERO; xv.len()];
                for ((xrow, yrow), (grow, drow)) in xv
                    .data()
                    .chunks_exact(d)
                    .zip(y.data().chunks_exact(d))
                    .zip(g.data().chunks_exact(d).zip(dx.chunks_exact_mut(d)))
                {
                    let mut mean = S::ZERO;
                    for &v in xrow.iter() {
                        mean += v;
                    }
                    mean = mean * inv_d;
                    let mut var = S::ZERO;
                    for &v in xrow.iter() {
                        let dv = v - mean;
                        var += dv * dv;
                    }
                    var = var * inv_d;
                    let inv_std = S::ONE / (var + epss).sqrt();
                    let mut gmean = S::ZERO;
                    let mut gymean = S::ZERO;
                    for (&gv, &yv) in grow.iter().zip(yrow.iter()) {
                        gmean += gv;
                        gymean += gv * yv;
                    }
                    gmean = gmean * inv_d;
                    gymean = gymean * inv_d;
                    for ((dv, &gv), &yv) in drow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
                        *dv = (gv - gmean - yv * gymean) * inv_std;
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::Gelu(x) => {
                let dx = g.zip_map(self.value(*x), |gv, xv| gv * gelu_bwd(xv));
                self.accum(grads, *x, dx);
            }
            Op::Silu(x) => {
                let dx = g.zip_map(self.value(*x), |gv, xv| gv * silu_bwd(xv));
                self.accum(grads, *x, dx);
            }
            Op::Rope { x, coords, cfg } => {
                // rotation is orthogonal: pull back with the inverse angles
                let shape = self.value(*x).shape().to_vec();
                let (gg, l, dh) = (shape[0], shape[1], shape[2]);
                let table = rope_table::<S>(coords, cfg, true);
                let mut dx = g.data().to_vec();
                apply_rope_table(&mut dx, &table, gg, l, dh);
                self.accum(grads, *x, Tensor::from_vec(&shape, dx));
            }
            Op::Reshape { x } => {
                self.accum(grads, *x, g.reshaped(self.value(*x).shape()));
            }
            Op::SliceRows { x, start, len } => {
                let xs = self.value(*x).shape().to_vec();
                let (b, l, d) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![S::ZERO; b * l * d];
                let gv = g.data();
                for bi in 0..b {
                    let dst = (bi * l + start) * d;
                    dx[dst..dst + len * d].copy_from_slice(&gv[bi * len * d..(bi + 1) * len * d]);
                }
                self.accum(grads, *x, Tensor::from_vec(&xs, dx));
            }
            Op::SliceLast { x, start, len } => {
                let xs = self.value(*x).shape().to_vec();
                let d = *xs.last().unwrap();
                let rows: usize = xs[..xs.len() - 1].iter().product();
                let mut dx = vec![S::ZERO; rows * d];
                let gv = g.data();
                for r in 0..rows {
                    dx[r * d + start..r * d + start + len].copy_from_slice(&gv[r * len..(r + 1) * len]);
                }
                self.accum(grads, *x, Tensor::from_vec(&xs, dx));
            }
            Op::BroadcastVec { v, b, l } => {
                let d = self.value(*v).len();
                let mut dv = vec![S::ZERO; d];
                for row in g.data().chunks_exact(d) {
                    for (acc, &gv) in dv.iter_mut().zip(row.iter()) {
                        *acc += gv;
                    }
                }
                let _ = (b, l);
                self.accum(grads, *v, Tensor::from_vec(&[d], dv));
            }
            Op::ModScale { x, s, plus_one } => {
                let xs = self.value(*x).shape().to_vec();
                let (b, l, d) = (xs[0], xs[1], xs[2]);
                let one = if *plus_one { S::ONE } else { S::ZERO };
                let sv = self.value(*s).data();
                let xv = self.value(*x).data();
                let gv = g.data();
                if self.requires(*x) {
                    let mut dx = vec![S::ZERO; xv.len()];
                    for bi in 0..b {
                        let srow = &sv[bi * d..(bi + 1) * d];
                        for li in 0..l {
                            let base = (bi * l + li) * d;
                            for c in 0..d {
                                dx[base + c] = gv[base + c] * (srow[c] + one);
                            }
                        }
                    }
                    self.accum(grads, *x, Tensor::from_vec(&xs, dx));
                }
                if self.requires(*s) {
                    let mut ds = vec![S::ZERO; b * d];
                    for bi in 0..b {
                        for li in 0..l {
                            let base = (bi * l + li) * d;
                            for c in 0..d {
                                ds[bi * d + c] += gv[base + c] * xv[base + c];
                            }
                        }
                    }
                    self.accum(grads, *s, Tensor::from_vec(&[b, d], ds));
                }
            }
            Op::ModShift { x, s } => {
                let xs = self.value(*x).shape().to_vec();
                let (b, l, d) = (xs[0], xs[1], xs[2]);
                if self.requires(*x) {
                    self.accum(grads, *x, g.clone());
                }
                if self.requires(*s) {
                    let mut ds = vec![S::ZERO; b * d];
                    let gv = g.data();
                    for bi in 0..b {
                        for li in 0..l {
                            let base = (bi * l + li) * d;
                            for c in 0..d {
                                ds[bi * d + c] += gv[base + c];
                            }
                        }
                    }
                    self.accum(grads, *s, Tensor::from_vec(&[b, d], ds));
                }
            }
            Op::MulVec { x, v } => {
                let xs = self.value(*x).shape().to_vec();
                let d = *xs.last().unwrap();
                let vv = self.value(*v).data();
                let xv = self.value(*x).data();
                let gv = g.data();
                if self.requires(*x) {
                    let mut dx = vec![S::ZERO; xv.len()];
                    for (drow, grow) in dx.chunks_exact_mut(d).zip(gv.chunks_exact(d)) {
                        for c in 0..d {
                            drow[c] = grow[c] * vv[c];
                        }
                    }
                    self.accum(grads, *x, Tensor::from_vec(&xs, dx));
                }
                if self.requires(*v) {
                    let mut dv = vec![S::ZERO; d];
                    for (grow, xrow) in gv.chunks_exact(d).zip(xv.chunks_exact(d)) {
                        for c in 0..d {
                            dv[c] += grow[c] * xrow[c];
                        }
                    }
                    self.accum(grads, *v, Tensor::from_vec(&[d], dv));
                }
            }
            Op::FourierPhase { gamma, t_bar } => {
                let gm = self.value(*gamma).data();
                let tb = *t_bar;
                let dg: Vec<S> = gm
                    .iter()
                    .enumerate()
                    .zip(g.data().iter())
                    .map(|((c, &gc), &gv)| {
                        let arg = gc.to_f64() * tb;
                        let deriv = if c % 2 == 0 { -tb * arg.sin() } else { -tb * arg.cos() };
                        gv * S::from_f64(deriv)
                    })
                    .collect();
                let shape = self.value(*gamma).shape().to_vec();
                self.accum(grads, *gamma, Tensor::from_vec(&shape, dg));
            }
            Op::SelectRow { table, row } => {
                let ts = self.value(*table).shape().to_vec();
                let d = ts[1];
                let mut dt = vec![S::ZERO; ts[0] * d];
                dt[row * d..(row + 1) * d].copy_from_slice(g.data());
                self.accum(grads, *table, Tensor::from_vec(&ts, dt));
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                let shape = self.value(*x).shape().to_vec();
                self.accum(grads, *x, Tensor::full(&shape, gv));
            }
        }
    }
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    // tanh approximation
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (S::ONE + inner.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::ONE + t) + half * x * (S::ONE - t * t) * c * (S::ONE + three * a * x * x)
}

fn silu_fwd<S: Scalar>(x: S) -> S {
    x / (S::ONE + (-x).exp())
}

fn silu_bwd<S: Scalar>(x: S) -> S {
    let sig = S::ONE / (S::ONE + (-x).exp());
    sig * (S::ONE + x * (S::ONE - sig))
}

/// Per-position (cos, sin) factors for every channel pair.
fn rope_table<S: Scalar>(coords: &[[i64; 4]], cfg: &RopeConfig, inverse: bool) -> Vec<(S, S)> {
    let pairs = cfg.head_dim / 2;
    let mut table = Vec::with_capacity(coords.len() * pairs);
    for &coord in coords {
        for theta in cfg.angles(coord) {
            let theta = if inverse { -theta } else { theta };
            table.push((S::from_f64(theta.cos()), S::from_f64(theta.sin())));
        }
    }
    table
}

fn apply_rope_table<S: Scalar>(data: &mut [S], table: &[(S, S)], g: usize, l: usize, dh: usize) {
    let pairs = dh / 2;
    for gi in 0..g {
        for li in 0..l {
            let row = &mut data[(gi * l + li) * dh..(gi * l + li + 1) * dh];
            let trow = &table[li * pairs..(li + 1) * pairs];
            for (p, &(c, s)) in trow.iter().enumerate() {
                let (x0, x1) = (row[2 * p], row[2 * p + 1]);
                row[2 * p] = x0 * c - x1 * s;
                row[2 * p + 1] = x0 * s + x1 * c;
            }
        }
    }
}
