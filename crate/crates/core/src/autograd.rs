//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and enough bookkeeping to push gradients back to its inputs.
//! Linear operators (matrix products and convolutions) tally their
//! multiply-accumulate count as they run, so a forward pass doubles as an
//! instrumented operation counter.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

// Below this many multiply-accumulates the rayon split costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Reshape(Var),
    Gather(Var, Arc<Vec<usize>>),
    Slice0 {
        src: Var,
        offset: usize,
    },
    Concat0(Vec<Var>),
    MatMul {
        a: Var,
        b: Var,
        dims: MatDims,
    },
    AddBroadcast(Var, Var),
    SoftmaxLast(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    L1Loss {
        pred: Var,
        target: Arc<Tensor>,
    },
    WeightedSum {
        x: Var,
        weights: Arc<Tensor>,
    },
}

#[derive(Debug, Clone, Copy)]
struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    macs: u64,
}

/// Gradients of a scalar with respect to the leaves of a [`Graph`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Multiply-accumulates performed by linear operators so far.
    pub fn macs(&self) -> u64 {
        self.macs
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

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Multiplies by a one-element node (a learnable scalar).
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err!("scale_by expects a scalar, got {:?}", self.shape(s)));
        }
        let sv = self.value(s).data()[0];
        let t = self.value(a).map(|x| x * sv);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::ScaleBy(a, s), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// `out[i] = src[index[i]]` over the flattened arrays; `shape` is the output shape.
    pub fn gather(&mut self, src: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(shape_err!(
                "gather index has {} entries for shape {:?}",
                index.len(),
                shape
            ));
        }
        let sv = self.value(src).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= sv.len()) {
            return Err(shape_err!("gather index {bad} out of range {}", sv.len()));
        }
        let data = index.iter().map(|&i| sv[i]).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(src);
        Ok(self.push(t, Op::Gather(src, index), rg))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice0(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(shape_err!("slice {start}..{} of {:?}", start + len, shape));
        }
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let offset = start * inner;
        let data = self.value(src).data()[offset..offset + len * inner].to_vec();
        let t = Tensor::new(&out_shape, data)?;
        let rg = self.rg(src);
        Ok(self.push(t, Op::Slice0 { src, offset }, rg))
    }

    /// Concatenation along the leading axis.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(shape_err!("concat: {:?} vs trailing {:?}", s, tail));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(&shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::Concat0(parts.to_vec()), rg))
    }

    /// Matrix product of `[m, k]` by `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul {:?} x {:?}", sa, sb));
        }
        self.matmul_impl(
            a,
            b,
            MatDims {
                batch: 1,
                m: sa[0],
                k: sa[1],
                n: sb[1],
                a_batched: false,
                b_batched: false,
            },
            vec![sa[0], sb[1]],
        )
    }

    /// Batched product of `[B, m, k]` by `[B, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err!("batch_matmul {:?} x {:?}", sa, sb));
        }
        self.matmul_impl(
            a,
            b,
            MatDims {
                batch: sa[0],
                m: sa[1],
                k: sa[2],
                n: sb[2],
                a_batched: true,
                b_batched: true,
            },
            vec![sa[0], sa[1], sb[2]],
        )
    }

    fn matmul_impl(&mut self, a: Var, b: Var, d: MatDims, shape: Vec<usize>) -> Result<Var> {
        let mut out = vec![0.0; d.batch * d.m * d.n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..d.batch {
                let ao = if d.a_batched { bi * d.m * d.k } else { 0 };
                let bo = if d.b_batched { bi * d.k * d.n } else { 0 };
                gemm_nn(
                    &av[ao..ao + d.m * d.k],
                    &bv[bo..bo + d.k * d.n],
                    &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                    d.m,
                    d.k,
                    d.n,
                );
            }
        }
        self.macs += (d.batch * d.m * d.k * d.n) as u64;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul { a, b, dims: d }, rg))
    }

    /// Adds `b` to every trailing block of `a`; `b.shape()` must be a suffix of `a.shape()`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(shape_err!("cannot broadcast {:?} onto {:?}", sb, sa));
        }
        let bv = self.value(b).data();
        let bl = bv.len();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % bl])
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddBroadcast(a, b), rg))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| shape_err!("softmax of a 0-d value"))?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SoftmaxLast(a), rg))
    }

    /// Per-pixel normalization over the channel axis of a `[C, H, W]` map,
    /// followed by a per-channel affine transform.
    pub fn layer_norm_channels(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err!("layer norm expects [C, H, W], got {:?}", s));
        }
        let (c, p) = (s[0], s[1] * s[2]);
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err!(
                "layer norm affine {:?}/{:?} for {c} channels",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut mean = vec![0.0; p];
        let mut rstd = vec![0.0; p];
        for ch in 0..c {
            for (m, v) in mean.iter_mut().zip(&xv[ch * p..(ch + 1) * p]) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= c as f64;
        }
        for ch in 0..c {
            for (i, v) in xv[ch * p..(ch + 1) * p].iter().enumerate() {
                let d = v - mean[i];
                rstd[i] += d * d;
            }
        }
        for r in &mut rstd {
            *r = 1.0 / (*r / c as f64 + eps).sqrt();
        }
        let mut out = vec![0.0; c * p];
        for ch in 0..c {
            for i in 0..p {
                out[ch * p + i] = (xv[ch * p + i] - mean[i]) * rstd[i] * g[ch] + b[ch];
            }
        }
        let t = Tensor::new(&s, out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Unpadded 2-D convolution of a `[C, H, W]` map with an
    /// `[O, C / groups, k, k]` kernel and optional `[O]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, groups: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(shape_err!("conv2d input {:?} kernel {:?}", sx, sw));
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (o, cg, k) = (sw[0], sw[1], sw[2]);
        if groups == 0 || stride == 0 || c % groups != 0 || o % groups != 0 || c / groups != cg {
            return Err(shape_err!(
                "conv2d: {c} input channels, {o} outputs, kernel depth {cg}, groups {groups}"
            ));
        }
        if k > h || k > wd {
            return Err(shape_err!("conv2d kernel {k} larger than input {h}x{wd}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err!("conv2d bias {:?} for {o} outputs", self.shape(b)));
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            groups,
            ho: (h - k) / stride + 1,
            wo: (wd - k) / stride + 1,
        };
        let out = conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        self.macs += (o * geom.ho * geom.wo * cg * k * k) as u64;
        let t = Tensor::new(&[o, geom.ho, geom.wo], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Mean absolute difference to a fixed target.
    pub fn l1_loss(&mut self, pred: Var, target: Arc<Tensor>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(shape_err!(
                "l1 loss {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            ));
        }
        let n = target.len() as f64;
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t).abs())
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(s / n), Op::L1Loss { pred, target }, rg))
    }

    /// `sum(x * weights)`, a scalar probe used for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Arc<Tensor>) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(shape_err!(
                "weighted sum {:?} vs weights {:?}",
                self.shape(x),
                weights.shape()
            ));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// Back-propagates from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(shape_err!("backward needs a scalar root, got {:?}", self.shape(root)));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::ones(self.shape(root)));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn grad_like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v), data).expect("gradient shape mirrors its value")
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let d = gd.iter().zip(bv).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, self.grad_like(*a, d));
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let d = gd.iter().zip(av).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, self.grad_like(*b, d));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).data()[0];
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.map(|x| x * sv));
                }
                if self.rg(*s) {
                    let av = self.value(*a).data();
                    let d: f64 = gd.iter().zip(av).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, *s, self.grad_like(*s, vec![d]));
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, self.grad_like(*a, gd.to_vec())),
            Op::Gather(src, index) => {
                let mut d = vec![0.0; self.value(*src).len()];
                for (gi, &si) in gd.iter().zip(index.iter()) {
                    d[si] += gi;
                }
                self.accumulate(grads, *src, self.grad_like(*src, d));
            }
            Op::Slice0 { src, offset } => {
                let mut d = vec![0.0; self.value(*src).len()];
                d[*offset..*offset + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *src, self.grad_like(*src, d));
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        self.accumulate(grads, p, self.grad_like(p, gd[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::MatMul { a, b, dims: d } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let mut da = vec![0.0; av.len()];
                    for bi in 0..d.batch {
                        let ao = if d.a_batched { bi * d.m * d.k } else { 0 };
                        let bo = if d.b_batched { bi * d.k * d.n } else { 0 };
                        gemm_nt_acc(
                            &gd[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                            &bv[bo..bo + d.k * d.n],
                            &mut da[ao..ao + d.m * d.k],
                            d.m,
                            d.n,
                            d.k,
                        );
                    }
                    self.accumulate(grads, *a, self.grad_like(*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for bi in 0..d.batch {
                        let ao = if d.a_batched { bi * d.m * d.k } else { 0 };
                        let bo = if d.b_batched { bi * d.k * d.n } else { 0 };
                        gemm_tn_acc(
                            &av[ao..ao + d.m * d.k],
                            &gd[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                            &mut db[bo..bo + d.k * d.n],
                            d.m,
                            d.k,
                            d.n,
                        );
                    }
                    self.accumulate(grads, *b, self.grad_like(*b, db));
                }
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let bl = self.value(*b).len();
                    let mut d = vec![0.0; bl];
                    for (i, x) in gd.iter().enumerate() {
                        d[i % bl] += x;
                    }
                    self.accumulate(grads, *b, self.grad_like(*b, d));
                }
            }
            Op::SoftmaxLast(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, self.grad_like(*a, d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let c = gv.len();
                let p = mean.len();
                let xhat = |ch: usize, i: usize| (xv[ch * p + i] - mean[i]) * rstd[i];
                if self.rg(*gain) {
                    let d = (0..c)
                        .map(|ch| (0..p).map(|i| gd[ch * p + i] * xhat(ch, i)).sum())
                        .collect();
                    self.accumulate(grads, *gain, self.grad_like(*gain, d));
                }
                if self.rg(*bias) {
                    let d = (0..c).map(|ch| gd[ch * p..(ch + 1) * p].iter().sum()).collect();
                    self.accumulate(grads, *bias, self.grad_like(*bias, d));
                }
                if self.rg(*x) {
                    let mut m1 = vec![0.0; p];
                    let mut m2 = vec![0.0; p];
                    for ch in 0..c {
                        for i in 0..p {
                            let dxh = gd[ch * p + i] * gv[ch];
                            m1[i] += dxh;
                            m2[i] += dxh * xhat(ch, i);
                        }
                    }
                    let cf = c as f64;
                    let mut d = vec![0.0; c * p];
                    for ch in 0..c {
                        for i in 0..p {
                            let dxh = gd[ch * p + i] * gv[ch];
                            d[ch * p + i] = rstd[i] * (dxh - m1[i] / cf - xhat(ch, i) * m2[i] / cf);
                        }
                    }
                    self.accumulate(grads, *x, self.grad_like(*x, d));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.rg(*x) {
                    let d = conv_backward_input(gd, wv, geom);
                    self.accumulate(grads, *x, self.grad_like(*x, d));
                }
                if self.rg(*w) {
                    let d = conv_backward_weight(gd, xv, geom);
                    self.accumulate(grads, *w, self.grad_like(*w, d));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let plane = geom.ho * geom.wo;
                        let d = gd.chunks(plane).map(|r| r.iter().sum()).collect();
                        self.accumulate(grads, *b, self.grad_like(*b, d));
                    }
                }
            }
            Op::L1Loss { pred, target } => {
                let n = target.len() as f64;
                let s = gd[0] / n;
                let d = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| {
                        let diff = p - t;
                        if diff > 0.0 {
                            s
                        } else if diff < 0.0 {
                            -s
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *pred, self.grad_like(*pred, d));
            }
            Op::WeightedSum { x, weights } => {
                let s = gd[0];
                self.accumulate(grads, *x, weights.map(|w| w * s));
            }
        }
    }
}

/// `c = a · b` with `a: m×k`, `b: k×n`, `c: m×n` (overwrites `c`).
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let row = |(i, cr): (usize, &mut [f64])| {
        cr.fill(0.0);
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for (cv, bv) in cr.iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
    };
    if n == 0 {
        return;
    }
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c += a · bᵀ` with `a: m×n`, `b: k×n`, `c: m×k`.
fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    let row = |(i, cr): (usize, &mut [f64])| {
        let ar = &a[i * n..(i + 1) * n];
        for (p, cv) in cr.iter_mut().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            *cv += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    };
    if k == 0 {
        return;
    }
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        c.chunks_mut(k).enumerate().for_each(row);
    }
}

/// `c += aᵀ · b` with `a: m×k`, `b: m×n`, `c: k×n`.
fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let row = |(p, cr): (usize, &mut [f64])| {
        for i in 0..m {
            let av = a[i * k + p];
            let br = &b[i * n..(i + 1) * n];
            for (cv, bv) in cr.iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
    };
    if n == 0 {
        return;
    }
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

fn conv_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let cg = g.c / g.groups;
    let og = g.o / g.groups;
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut out = vec![0.0; g.o * plane_out];
    let work = g.o * plane_out * cg * g.k * g.k;
    let per_output = |(o, dst): (usize, &mut [f64])| {
        dst.fill(b.map_or(0.0, |b| b[o]));
        let gi = o / og;
        for ci in 0..cg {
            let src = &x[(gi * cg + ci) * plane_in..(gi * cg + ci + 1) * plane_in];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = w[((o * cg + ci) * g.k + ky) * g.k + kx];
                    for oy in 0..g.ho {
                        let srow = &src[(oy * g.stride + ky) * g.w..];
                        let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            for (d, s) in drow.iter_mut().zip(&srow[kx..kx + g.wo]) {
                                *d += wv * s;
                            }
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d += wv * srow[ox * g.stride + kx];
                            }
                        }
                    }
                }
            }
        }
    };
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(plane_out).enumerate().for_each(per_output);
    } else {
        out.chunks_mut(plane_out).enumerate().for_each(per_output);
    }
    out
}

fn conv_backward_input(gout: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cg = g.c / g.groups;
    let og = g.o / g.groups;
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut dx = vec![0.0; g.c * plane_in];
    let work = g.o * plane_out * cg * g.k * g.k;
    let per_input = |(c, dst): (usize, &mut [f64])| {
        let gi = c / cg;
        let ci = c % cg;
        for o in gi * og..(gi + 1) * og {
            let src = &gout[o * plane_out..(o + 1) * plane_out];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = w[((o * cg + ci) * g.k + ky) * g.k + kx];
                    for oy in 0..g.ho {
                        let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                        let base = (oy * g.stride + ky) * g.w + kx;
                        if g.stride == 1 {
                            for (d, s) in dst[base..base + g.wo].iter_mut().zip(srow) {
                                *d += wv * s;
                            }
                        } else {
                            for (ox, s) in srow.iter().enumerate() {
                                dst[base + ox * g.stride] += wv * s;
                            }
                        }
                    }
                }
            }
        }
    };
    if work >= PAR_THRESHOLD {
        dx.par_chunks_mut(plane_in).enumerate().for_each(per_input);
    } else {
        dx.chunks_mut(plane_in).enumerate().for_each(per_input);
    }
    dx
}

fn conv_backward_weight(gout: &[f64], x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cg = g.c / g.groups;
    let og = g.o / g.groups;
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let kk = g.k * g.k;
    let mut dw = vec![0.0; g.o * cg * kk];
    let work = g.o * plane_out * cg * kk;
    let per_output = |(o, dst): (usize, &mut [f64])| {
        let gi = o / og;
        let go = &gout[o * plane_out..(o + 1) * plane_out];
        for ci in 0..cg {
            let src = &x[(gi * cg + ci) * plane_in..(gi * cg + ci + 1) * plane_in];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let mut acc = 0.0;
                    for oy in 0..g.ho {
                        let grow = &go[oy * g.wo..(oy + 1) * g.wo];
                        let srow = &src[(oy * g.stride + ky) * g.w + kx..];
                        if g.stride == 1 {
                            acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        } else {
                            for (ox, gv) in grow.iter().enumerate() {
                                acc += gv * srow[ox * g.stride];
                            }
                        }
                    }
                    dst[ci * kk + ky * g.k + kx] = acc;
                }
            }
        }
    };
    if work >= PAR_THRESHOLD {
        dw.par_chunks_mut(cg * kk).enumerate().for_each(per_output);
    } else {
        dw.chunks_mut(cg * kk).enumerate().for_each(per_output);
    }
    dw
}

/// Reflection of `i` into `0..n` without repeating the edge sample, folded
/// as many times as needed so any padding width is valid.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

/// Gather index that reflect-pads a `[C, H, W]` map.
pub fn reflect_pad_index(
    c: usize,
    h: usize,
    w: usize,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> (Vec<usize>, [usize; 3]) {
    let (ph, pw) = (h + top + bottom, w + left + right);
    let mut idx = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect_index(y as isize - top as isize, h);
            for x in 0..pw {
                let sx = reflect_index(x as isize - left as isize, w);
                idx.push((ch * h + sy) * w + sx);
            }
        }
    }
    (idx, [c, ph, pw])
}

/// Gather index that crops the top-left `out_h × out_w` region of a `[C, H, W]` map.
pub fn crop_index(c: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<usize> {
    debug_assert!(out_h <= h && out_w <= w);
    let mut idx = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for y in 0..out_h {
            for x in 0..out_w {
                idx.push((ch * h + y) * w + x);
            }
        }
    }
    idx
}

/// Gather index transposing the last two axes of `[batch, rows, cols]`.
pub fn transpose_index(batch: usize, rows: usize, cols: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * rows * cols);
    for b in 0..batch {
        for j in 0..cols {
            for i in 0..rows {
                idx.push((b * rows + i) * cols + j);
            }
        }
    }
    idx
}

impl Graph {
    /// Reflect-pads a `[C, H, W]` node.
    pub fn reflect_pad(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        if top + bottom + left + right == 0 {
            return Ok(x);
        }
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err!("reflect pad expects [C, H, W], got {:?}", s));
        }
        let (idx, shape) = reflect_pad_index(s[0], s[1], s[2], top, bottom, left, right);
        self.gather(x, Arc::new(idx), &shape)
    }

    /// Keeps the top-left `h × w` region of a `[C, H, W]` node.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || h > s[1] || w > s[2] {
            return Err(shape_err!("cannot crop {:?} to {h}x{w}", s));
        }
        if h == s[1] && w == s[2] {
            return Ok(x);
        }
        let idx = crop_index(s[0], s[1], s[2], h, w);
        self.gather(x, Arc::new(idx), &[s[0], h, w])
    }

    /// Swaps the last two axes of a 2-D or 3-D node.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, rows, cols) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(shape_err!("transpose of {:?}", s)),
        };
        let idx = transpose_index(batch, rows, cols);
        let shape: Vec<usize> = if s.len() == 2 {
            vec![cols, rows]
        } else {
            vec![batch, cols, rows]
        };
        self.gather(x, Arc::new(idx), &shape)
    }
}
