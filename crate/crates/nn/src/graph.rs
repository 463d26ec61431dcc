//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation applied during a forward pass as a
//! node in an append-only list. Inputs of a node always precede it, so
//! reverse index order is a valid topological order for [`Graph::backward`].

use std::collections::{BTreeMap, HashMap};

use crate::error::{NnError, Result};
use crate::kernels::{self, ConvGeom, MatRef};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    AddScalar(Var),
    Mul(Var, Var),
    Scale(Var, f32),
    MulConst(Var, Tensor),
    MulPerSample(Var, Vec<f32>),
    MatMul { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2x2 { x: Var, w: Var, b: Option<Var> },
    MaxPool2x2 { x: Var, argmax: Vec<u32> },
    Interpolate { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Softmax(Var),
    Gelu(Var),
    Ln(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    GatherRows { table: Var, indices: Vec<usize> },
    SelectRows { x: Var, repl: Var, mask: Vec<bool> },
    StraightThrough { soft: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32> },
    Mse { a: Var, target: Tensor },
    SmoothL1 { pred: Var, target: Tensor, beta: f32, normalizer: f32 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Full-precision value of scalar reductions.
    exact: Option<f64>,
}

/// A recorded computation. Parameters are read from an optional [`ParamStore`].
pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_nodes: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::input_grad`] or [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate(&self, store: &mut ParamStore) {
        for (&id, g) in &self.params {
            let p = store.get_mut(id);
            if p.trainable {
                p.grad.add_assign(g);
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NnError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_nodes: HashMap::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    /// A graph whose parameters never require gradients (evaluation mode).
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            grad_enabled: false,
            ..Self::new()
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value in full precision when the node is a reduction.
    pub fn scalar_f64(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        match node.exact {
            Some(x) => Ok(x),
            None => node.value.item().map(|x| x as f64),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
            exact: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, exact: f64, op: Op, requires_grad: bool) -> Var {
        let v = self.push(Tensor::scalar(exact as f32), op, requires_grad);
        self.nodes[v.0].exact = Some(exact);
        v
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input_grad(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
            requires_grad: true,
            exact: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding the current value of a stored parameter. Repeated calls
    /// with the same id return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self
            .params
            .expect("Graph::param called on a graph without a ParamStore");
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.param_nodes.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- shape

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(NnError::invalid("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let data = kernels::permute(self.value(x).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Permute(x, perm.to_vec()), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(NnError::invalid("concat", format!("axis {axis} out of range")));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(NnError::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    // ----------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(NnError::shape("add_broadcast", sa, sb));
        }
        let mut t = self.value(a).clone();
        let bd = self.value(b).data();
        for chunk in t.data_mut().chunks_mut(bd.len().max(1)) {
            for (x, y) in chunk.iter_mut().zip(bd) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddBroadcast(a, b), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x += c);
        let exact = self.nodes[a.0].exact.map(|e| e + c as f64);
        let rg = self.rg(a);
        let v = self.push(t, Op::AddScalar(a), rg);
        self.nodes[v.0].exact = exact;
        v
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let bd = self.value(b).data().to_vec();
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().zip(&bd).for_each(|(x, y)| *x *= y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= s);
        let exact = self.nodes[a.0].exact.map(|e| e * s as f64);
        let rg = self.rg(a);
        let v = self.push(t, Op::Scale(a, s), rg);
        self.nodes[v.0].exact = exact;
        v
    }

    /// Elementwise product with a constant tensor (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        same_shape("mul_const", self.value(a), &c)?;
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().zip(c.data()).for_each(|(x, y)| *x *= y);
        let rg = self.rg(a);
        Ok(self.push(t, Op::MulConst(a, c), rg))
    }

    /// Multiplies every slice along the leading axis by its own constant factor.
    pub fn mul_per_sample(&mut self, a: Var, factors: Vec<f32>) -> Result<Var> {
        let shape = self.shape(a);
        if shape.is_empty() || shape[0] != factors.len() {
            return Err(NnError::shape("mul_per_sample", shape, &[factors.len()]));
        }
        let mut t = self.value(a).clone();
        let per = t.numel() / factors.len().max(1);
        for (chunk, f) in t.data_mut().chunks_mut(per.max(1)).zip(&factors) {
            chunk.iter_mut().for_each(|x| *x *= f);
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::MulPerSample(a, factors), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x = kernels::gelu(*x));
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Natural log, clamping inputs below `1e-12`.
    pub fn ln(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x = x.max(LN_FLOOR).ln());
        let rg = self.rg(a);
        self.push(t, Op::Ln(a), rg)
    }

    // ------------------------------------------------------------- linear

    /// `a @ b` for rank-2 operands, or batched over the leading axis for rank-3.
    /// With `trans_b`, computes `a @ b^T`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || NnError::shape("matmul", &sa, &sb);
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (bk, bn) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                if sa[1] != bk {
                    return Err(err());
                }
                (1, sa[0], sa[1], bn)
            }
            (3, 3) => {
                let (bk, bn) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                if sa[0] != sb[0] || sa[2] != bk {
                    return Err(err());
                }
                (sa[0], sa[1], sa[2], bn)
            }
            _ => return Err(err()),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let am = MatRef::row_major(&ad[i * m * k..(i + 1) * m * k], m, k);
                let bm = if trans_b {
                    MatRef::row_major(&bd[i * n * k..(i + 1) * n * k], n, k).t()
                } else {
                    MatRef::row_major(&bd[i * k * n..(i + 1) * k * n], k, n)
                };
                kernels::gemm(am, bm, &mut out[i * m * n..(i + 1) * m * n], 0.0);
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// 2-D convolution over `[N, C, H, W]` with weights `[O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(NnError::shape("conv2d", &sx, &sw));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(NnError::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(NnError::shape("conv2d bias", self.shape(b), &[o]));
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let plane = geom.oh * geom.ow;
        let ckk = c * kh * kw;
        let mut out = vec![0.0; n * o * plane];
        {
            let xd = self.value(x).data();
            let wm = MatRef::row_major(self.value(w).data(), o, ckk);
            let mut col = if geom.is_pointwise() { Vec::new() } else { vec![0.0; ckk * plane] };
            for i in 0..n {
                let xi = &xd[i * c * h * wd..(i + 1) * c * h * wd];
                let colm = if geom.is_pointwise() {
                    MatRef::row_major(xi, ckk, plane)
                } else {
                    kernels::im2col(xi, &geom, &mut col);
                    MatRef::row_major(&col, ckk, plane)
                };
                let oi = &mut out[i * o * plane..(i + 1) * o * plane];
                if let Some(b) = b {
                    for (ch, &bv) in self.value(b).data().iter().enumerate() {
                        oi[ch * plane..(ch + 1) * plane].fill(bv);
                    }
                    kernels::gemm(wm, colm, oi, 1.0);
                } else {
                    kernels::gemm(wm, colm, oi, 0.0);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&[n, o, geom.oh, geom.ow], out)?,
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    /// Stride-2, 2×2 transposed convolution: `[N, Ci, H, W]` with weights
    /// `[Ci, Co, 2, 2]` gives `[N, Co, 2H, 2W]`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || sw[2] != 2 || sw[3] != 2 {
            return Err(NnError::shape("conv_transpose2x2", &sx, &sw));
        }
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let co = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(NnError::shape("conv_transpose2x2 bias", self.shape(b), &[co]));
            }
        }
        let hw = h * wd;
        let (oh, ow) = (2 * h, 2 * wd);
        let mut out = vec![0.0; n * co * oh * ow];
        {
            let xd = self.value(x).data();
            let wm = MatRef::row_major(self.value(w).data(), ci, co * 4);
            let bias = b.map(|b| self.value(b).data().to_vec());
            let mut y = vec![0.0; hw * co * 4];
            for i in 0..n {
                let xt = MatRef::row_major(&xd[i * ci * hw..(i + 1) * ci * hw], ci, hw).t();
                kernels::gemm(xt, wm, &mut y, 0.0);
                let oi = &mut out[i * co * oh * ow..(i + 1) * co * oh * ow];
                for p in 0..hw {
                    let (r, c) = (p / wd, p % wd);
                    for o in 0..co {
                        let bv = bias.as_ref().map_or(0.0, |b| b[o]);
                        for a in 0..2 {
                            for bb in 0..2 {
                                oi[o * oh * ow + (2 * r + a) * ow + 2 * c + bb] =
                                    y[p * co * 4 + o * 4 + a * 2 + bb] + bv;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[n, co, oh, ow], out)?, Op::ConvTranspose2x2 { x, w, b }, rg))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[2] < 2 || sx[3] < 2 {
            return Err(NnError::shape("max_pool2x2", &sx, &[2, 2]));
        }
        let (nc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(nc * oh * ow);
        let mut argmax = Vec::with_capacity(nc * oh * ow);
        for p in 0..nc {
            let base = p * h * w;
            for r in 0..oh {
                for c in 0..ow {
                    let mut best = base + 2 * r * w + 2 * c;
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * r + dr) * w + 2 * c + dc;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[sx[0], sx[1], oh, ow], out)?, Op::MaxPool2x2 { x, argmax }, rg))
    }

    /// Bilinear resampling (half-pixel centers) of `[N, C, H, W]` to `[N, C, oh, ow]`.
    pub fn interpolate_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || oh == 0 || ow == 0 {
            return Err(NnError::shape("interpolate_bilinear", &sx, &[oh, ow]));
        }
        let (nc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let ty = kernels::bilinear_taps(h, oh);
        let tx = kernels::bilinear_taps(w, ow);
        let xd = self.value(x).data();
        let mut out = vec![0.0; nc * oh * ow];
        for p in 0..nc {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (r, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (c, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                    let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                    dst[r * ow + c] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[sx[0], sx[1], oh, ow], out)?, Op::Interpolate { x }, rg))
    }

    // -------------------------------------------------------- normalization

    /// Layer normalization over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| NnError::shape("layer_norm", &sx, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(NnError::shape("layer_norm", &sx, self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..d {
                let xh = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bt[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::new(&sx, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let k = *t.shape().last().unwrap_or(&1);
        for row in t.data_mut().chunks_mut(k.max(1)) {
            kernels::softmax_row(row);
        }
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    // ---------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push_scalar(s, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.numel().max(1) as f64;
        let rg = self.rg(x);
        self.push_scalar(s, Op::Mean(x), rg)
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx[axis] == 0 {
            return Err(NnError::invalid("mean_axis", format!("axis {axis} invalid for {sx:?}")));
        }
        let outer: usize = sx[..axis].iter().product();
        let len = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0f64;
                for l in 0..len {
                    acc += xd[(o * len + l) * inner + i] as f64;
                }
                out[o * inner + i] = (acc / len as f64) as f32;
            }
        }
        let mut shape = sx.clone();
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MeanAxis { x, axis }, rg))
    }

    // ------------------------------------------------------------ indexing

    /// Rows of a `[V, D]` table selected by `indices` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(NnError::shape("gather_rows", &st, &[indices.len()]));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(NnError::invalid("gather_rows", format!("index {bad} out of range for {v} rows")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&[indices.len(), d], out)?,
            Op::GatherRows { table, indices: indices.to_vec() },
            rg,
        ))
    }

    /// For `x: [B, L, D]` and `repl: [L, D]`, replaces row `(b, l)` by
    /// `repl[l]` wherever `mask[b * L + l]` is set. Other rows are copied unchanged.
    pub fn select_rows(&mut self, x: Var, repl: Var, mask: &[bool]) -> Result<Var> {
        let (sx, sr) = (self.shape(x).to_vec(), self.shape(repl).to_vec());
        if sx.len() != 3 || sr != sx[1..] || mask.len() != sx[0] * sx[1] {
            return Err(NnError::shape("select_rows", &sx, &sr));
        }
        let (l, d) = (sx[1], sx[2]);
        let mut t = self.value(x).clone();
        let rd = self.value(repl).data().to_vec();
        for (row, &m) in mask.iter().enumerate() {
            if m {
                let pos = row % l;
                t.data_mut()[row * d..(row + 1) * d].copy_from_slice(&rd[pos * d..(pos + 1) * d]);
            }
        }
        let rg = self.rg(x) || self.rg(repl);
        Ok(self.push(t, Op::SelectRows { x, repl, mask: mask.to_vec() }, rg))
    }

    /// Takes the value of `hard` but routes gradients straight to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        same_shape("straight_through", self.value(soft), &hard)?;
        let rg = self.rg(soft);
        Ok(self.push(hard, Op::StraightThrough { soft }, rg))
    }

    // -------------------------------------------------------------- losses

    /// Mean softmax cross-entropy of `[M, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() || sl[0] == 0 {
            return Err(NnError::shape("cross_entropy", &sl, &[targets.len()]));
        }
        let k = sl[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(NnError::invalid("cross_entropy", format!("target {bad} out of range for {k} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0f64;
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln() + max as f64;
            loss += lse - row[t] as f64;
            kernels::softmax_row(row);
        }
        let m = targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push_scalar(
            loss / m,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: Tensor) -> Result<Var> {
        same_shape("mse", self.value(a), &target)?;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum();
        let n = target.numel().max(1) as f64;
        let rg = self.rg(a);
        Ok(self.push_scalar(s / n, Op::Mse { a, target }, rg))
    }

    /// `sum(smooth_l1(pred - target; beta)) / normalizer`.
    pub fn smooth_l1(&mut self, pred: Var, target: Tensor, beta: f32, normalizer: f32) -> Result<Var> {
        same_shape("smooth_l1", self.value(pred), &target)?;
        if normalizer <= 0.0 || beta <= 0.0 {
            return Err(NnError::invalid("smooth_l1", "beta and normalizer must be positive"));
        }
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let d = (p - t).abs() as f64;
                if d < beta as f64 {
                    0.5 * d * d / beta as f64
                } else {
                    d - 0.5 * beta as f64
                }
            })
            .sum();
        let rg = self.rg(pred);
        Ok(self.push_scalar(
            s / normalizer as f64,
            Op::SmoothL1 { pred, target, beta, normalizer },
            rg,
        ))
    }

    // ------------------------------------------------------------ backward

    /// Reverse-mode accumulation from a scalar `loss`.
    ///
    /// The graph is left intact, so calling this twice and accumulating both
    /// results doubles the parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(NnError::NotScalar(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_node.value.shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {
                    out.leaves.insert(Var(idx), g);
                }
                Op::Param(id) => {
                    match out.params.get_mut(id) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            out.params.insert(*id, g.clone());
                        }
                    }
                    out.leaves.insert(Var(idx), g);
                }
                op => self.backward_op(idx, op, g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        assert!(v.0 < grads.len(), "graph cycle: input {} is not older than its consumer", v.0);
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor {
        Tensor::zeros(self.shape(v))
    }

    fn backward_op(&self, idx: usize, op: &Op, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        let grads = &mut grads[..idx];
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::Reshape(x) => {
                let gx = g.reshape(self.shape(*x))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Permute(x, perm) => {
                let inv = kernels::inverse_perm(perm);
                let data = kernels::permute(g.data(), g.shape(), &inv);
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), data)?);
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<f32>> = inputs.iter().map(|v| Vec::with_capacity(self.value(*v).numel())).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (k, v) in inputs.iter().enumerate() {
                        let len = self.shape(*v)[*axis] * inner;
                        parts[k].extend_from_slice(&g.data()[off..off + len]);
                        off += len;
                    }
                }
                for (v, data) in inputs.iter().zip(parts) {
                    let t = Tensor::new(self.shape(*v), data)?;
                    self.accumulate(grads, *v, t);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::AddBroadcast(a, b) => {
                if self.rg(*b) {
                    let mut gb = self.zeros_like(*b);
                    let n = gb.numel().max(1);
                    for chunk in g.data().chunks(n) {
                        gb.data_mut().iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                    self.accumulate(grads, *b, gb);
                }
                self.accumulate(grads, *a, g);
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let mut ga = g.clone();
                    ga.data_mut().iter_mut().zip(self.value(*b).data()).for_each(|(x, y)| *x *= y);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = g;
                    gb.data_mut().iter_mut().zip(self.value(*a).data()).for_each(|(x, y)| *x *= y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                let mut ga = g;
                ga.data_mut().iter_mut().for_each(|x| *x *= s);
                self.accumulate(grads, *a, ga);
            }
            Op::MulConst(a, c) => {
                let mut ga = g;
                ga.data_mut().iter_mut().zip(c.data()).for_each(|(x, y)| *x *= y);
                self.accumulate(grads, *a, ga);
            }
            Op::MulPerSample(a, factors) => {
                let mut ga = g;
                let per = ga.numel() / factors.len().max(1);
                for (chunk, f) in ga.data_mut().chunks_mut(per.max(1)).zip(factors) {
                    chunk.iter_mut().for_each(|x| *x *= f);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let mut ga = g;
                ga.data_mut()
                    .iter_mut()
                    .zip(self.value(*a).data())
                    .for_each(|(x, &v)| *x *= kernels::gelu_grad(v));
                self.accumulate(grads, *a, ga);
            }
            Op::Ln(a) => {
                let mut ga = g;
                ga.data_mut().iter_mut().zip(self.value(*a).data()).for_each(|(x, &v)| {
                    *x = if v > LN_FLOOR { *x / v } else { 0.0 };
                });
                self.accumulate(grads, *a, ga);
            }
            Op::MatMul { a, b, trans_b } => self.backward_matmul(*a, *b, *trans_b, &g, grads)?,
            Op::Conv2d { x, w, b, geom } => self.backward_conv(*x, *w, *b, geom, &g, grads)?,
            Op::ConvTranspose2x2 { x, w, b } => self.backward_conv_t(*x, *w, *b, &g, grads)?,
            Op::MaxPool2x2 { x, argmax } => {
                let mut gx = self.zeros_like(*x);
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[i as usize] += gv;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Interpolate { x } => {
                let sx = self.shape(*x);
                let (nc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let ty = kernels::bilinear_taps(h, oh);
                let tx = kernels::bilinear_taps(w, ow);
                let mut gx = self.zeros_like(*x);
                for p in 0..nc {
                    let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
                    for (r, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (c, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let gv = src[r * ow + c];
                            dst[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                            dst[y0 * w + x1] += gv * (1.0 - wy) * wx;
                            dst[y1 * w + x0] += gv * wy * (1.0 - wx);
                            dst[y1 * w + x1] += gv * wy * wx;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.shape(*gamma)[0];
                let gd = self.value(*gamma).data();
                let rows = rstd.len();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = vec![0.0f32; d];
                    let mut gbeta = vec![0.0f32; d];
                    for r in 0..rows {
                        for j in 0..d {
                            let gv = g.data()[r * d + j];
                            gg[j] += gv * xhat[r * d + j];
                            gbeta[j] += gv;
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(&[d], gg)?);
                    self.accumulate(grads, *beta, Tensor::new(&[d], gbeta)?);
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0f32; rows * d];
                    for r in 0..rows {
                        let mut mean_dxh = 0.0f64;
                        let mut mean_dxh_xh = 0.0f64;
                        for j in 0..d {
                            let dxh = (g.data()[r * d + j] * gd[j]) as f64;
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[r * d + j] as f64;
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = (g.data()[r * d + j] * gd[j]) as f64;
                            gx[r * d + j] = (rstd[r] as f64
                                * (dxh - mean_dxh - xhat[r * d + j] as f64 * mean_dxh_xh))
                                as f32;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
                }
            }
            Op::Softmax(x) => {
                let k = *out.shape().last().unwrap_or(&1);
                let mut gx = g;
                for (grow, yrow) in gx.data_mut().chunks_mut(k.max(1)).zip(out.data().chunks(k.max(1))) {
                    let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    grow.iter_mut().zip(yrow).for_each(|(gv, &y)| *gv = y * (*gv - dot));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1) as f32;
                let gv = g.data()[0] / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::MeanAxis { x, axis } => {
                let sx = self.shape(*x);
                let outer: usize = sx[..*axis].iter().product();
                let len = sx[*axis];
                let inner: usize = sx[axis + 1..].iter().product();
                let mut gx = self.zeros_like(*x);
                let inv = 1.0 / len as f32;
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gx.data_mut()[(o * len + l) * inner + i] = g.data()[o * inner + i] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows { table, indices } => {
                let d = self.shape(*table)[1];
                let mut gt = self.zeros_like(*table);
                for (r, &i) in indices.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    gt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
                self.accumulate(grads, *table, gt);
            }
            Op::SelectRows { x, repl, mask } => {
                let (l, d) = (self.shape(*x)[1], self.shape(*x)[2]);
                let mut gx = g;
                let mut gr = self.zeros_like(*repl);
                for (row, &m) in mask.iter().enumerate() {
                    if m {
                        let pos = row % l;
                        let src = &mut gx.data_mut()[row * d..(row + 1) * d];
                        gr.data_mut()[pos * d..(pos + 1) * d].iter_mut().zip(src.iter()).for_each(|(a, b)| *a += b);
                        src.fill(0.0);
                    }
                }
                self.accumulate(grads, *repl, gr);
                self.accumulate(grads, *x, gx);
            }
            Op::StraightThrough { soft } => self.accumulate(grads, *soft, g),
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g.data()[0] / targets.len() as f32;
                let mut gl = probs.clone();
                for (row, &t) in gl.chunks_mut(k).zip(targets) {
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, Tensor::new(self.shape(*logits), gl)?);
            }
            Op::Mse { a, target } => {
                let scale = 2.0 * g.data()[0] / target.numel().max(1) as f32;
                let ga: Vec<f32> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&x, &y)| (x - y) * scale)
                    .collect();
                self.accumulate(grads, *a, Tensor::new(target.shape(), ga)?);
            }
            Op::SmoothL1 { pred, target, beta, normalizer } => {
                let scale = g.data()[0] / normalizer;
                let gp: Vec<f32> = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| {
                        let d = p - t;
                        let gd = if d.abs() < *beta { d / beta } else { d.signum() };
                        gd * scale
                    })
                    .collect();
                self.accumulate(grads, *pred, Tensor::new(target.shape(), gp)?);
            }
        }
        Ok(())
    }

    fn backward_matmul(&self, a: Var, b: Var, trans_b: bool, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let batched = sa.len() == 3;
        let batch = if batched { sa[0] } else { 1 };
        let (m, k) = if batched { (sa[1], sa[2]) } else { (sa[0], sa[1]) };
        let n = g.shape()[g.ndim() - 1];
        let (ad, bd, gd) = (self.value(a).data(), self.value(b).data(), g.data());
        if self.rg(a) {
            let mut ga = vec![0.0; batch * m * k];
            for i in 0..batch {
                let gm = MatRef::row_major(&gd[i * m * n..(i + 1) * m * n], m, n);
                let bslice = &bd[i * k * n..(i + 1) * k * n];
                // C = A B  => dA = G B^T ; C = A B^T => dA = G B
                let bm = if trans_b {
                    MatRef::row_major(bslice, n, k)
                } else {
                    MatRef::row_major(bslice, k, n).t()
                };
                kernels::gemm(gm, bm, &mut ga[i * m * k..(i + 1) * m * k], 0.0);
            }
            self.accumulate(grads, a, Tensor::new(sa, ga)?);
        }
        if self.rg(b) {
            let mut gb = vec![0.0; batch * k * n];
            for i in 0..batch {
                let am = MatRef::row_major(&ad[i * m * k..(i + 1) * m * k], m, k);
                let gm = MatRef::row_major(&gd[i * m * n..(i + 1) * m * n], m, n);
                let dst = &mut gb[i * k * n..(i + 1) * k * n];
                if trans_b {
                    // dB [n, k] = G^T A
                    kernels::gemm(gm.t(), am, dst, 0.0);
                } else {
                    // dB [k, n] = A^T G
                    kernels::gemm(am.t(), gm, dst, 0.0);
                }
            }
            self.accumulate(grads, b, Tensor::new(sb, gb)?);
        }
        Ok(())
    }

    fn backward_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let n = self.shape(x)[0];
        let o = self.shape(w)[0];
        let plane = geom.oh * geom.ow;
        let ckk = geom.c * geom.kh * geom.kw;
        let chw = geom.c * geom.h * geom.w;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let gd = g.data();
        let need_w = self.rg(w);
        let need_x = self.rg(x);
        let mut gw = vec![0.0; o * ckk];
        let mut gx = if need_x { vec![0.0; n * chw] } else { Vec::new() };
        let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { ckk * plane }];
        let mut dcol = vec![0.0; if need_x && !geom.is_pointwise() { ckk * plane } else { 0 }];
        for i in 0..n {
            let gi = MatRef::row_major(&gd[i * o * plane..(i + 1) * o * plane], o, plane);
            if need_w {
                let xi = &xd[i * chw..(i + 1) * chw];
                let colm = if geom.is_pointwise() {
                    MatRef::row_major(xi, ckk, plane)
                } else {
                    kernels::im2col(xi, geom, &mut col);
                    MatRef::row_major(&col, ckk, plane)
                };
                kernels::gemm(gi, colm.t(), &mut gw, 1.0);
            }
            if need_x {
                let wt = MatRef::row_major(wd, o, ckk).t();
                let dst = &mut gx[i * chw..(i + 1) * chw];
                if geom.is_pointwise() {
                    kernels::gemm(wt, gi, dst, 0.0);
                } else {
                    kernels::gemm(wt, gi, &mut dcol, 0.0);
                    kernels::col2im(&dcol, geom, dst);
                }
            }
        }
        if let Some(b) = b {
            if self.rg(b) {
                let mut gb = vec![0.0f32; o];
                for i in 0..n {
                    for (ch, acc) in gb.iter_mut().enumerate() {
                        let s = &gd[(i * o + ch) * plane..(i * o + ch + 1) * plane];
                        *acc += s.iter().sum::<f32>();
                    }
                }
                self.accumulate(grads, b, Tensor::new(&[o], gb)?);
            }
        }
        if need_w {
            self.accumulate(grads, w, Tensor::new(self.shape(w), gw)?);
        }
        if need_x {
            self.accumulate(grads, x, Tensor::new(self.shape(x), gx)?);
        }
        Ok(())
    }

    fn backward_conv_t(&self, x: Var, w: Var, b: Option<Var>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let sx = self.shape(x);
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let co = self.shape(w)[1];
        let hw = h * wd;
        let (oh, ow) = (2 * h, 2 * wd);
        let xd = self.value(x).data();
        let wv = self.value(w).data();
        let gd = g.data();
        let mut dy = vec![0.0; hw * co * 4];
        let mut gw = vec![0.0; ci * co * 4];
        let mut gx = vec![0.0; n * ci * hw];
        let mut gb = vec![0.0f32; co];
        for i in 0..n {
            let gi = &gd[i * co * oh * ow..(i + 1) * co * oh * ow];
            for p in 0..hw {
                let (r, c) = (p / wd, p % wd);
                for o in 0..co {
                    for a in 0..2 {
                        for bb in 0..2 {
                            let v = gi[o * oh * ow + (2 * r + a) * ow + 2 * c + bb];
                            dy[p * co * 4 + o * 4 + a * 2 + bb] = v;
                            gb[o] += v;
                        }
                    }
                }
            }
            let dym = MatRef::row_major(&dy, hw, co * 4);
            let xi = &xd[i * ci * hw..(i + 1) * ci * hw];
            // Y = X^T W  =>  dW = X dY,  dX^T = dY W^T  i.e. dX = W dY^T
            kernels::gemm(MatRef::row_major(xi, ci, hw), dym, &mut gw, 1.0);
            kernels::gemm(
                MatRef::row_major(wv, ci, co * 4),
                dym.t(),
                &mut gx[i * ci * hw..(i + 1) * ci * hw],
                0.0,
            );
        }
        if let Some(b) = b {
            self.accumulate(grads, b, Tensor::new(&[co], gb)?);
        }
        self.accumulate(grads, w, Tensor::new(self.shape(w), gw)?);
        self.accumulate(grads, x, Tensor::new(sx, gx)?);
        Ok(())
    }
}

const LN_FLOOR: f32 = 1e-12;
