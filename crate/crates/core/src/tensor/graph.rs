//! Compute graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so every node's inputs have
//! strictly smaller ids and the node list is already a topological order.
//! `backward` walks it once in reverse.

use super::{Element, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for a user-registered operation.
///
/// Receives the input values, the output value and the upstream gradient;
/// returns one optional gradient per input.
pub type BackwardFn<E> = Box<dyn Fn(&[&Tensor<E>], &Tensor<E>, &[E]) -> Vec<Option<Vec<E>>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar,
    BatchMatMul,
    Conv2d,
    SoftmaxRows,
    GroupNorm,
    Relu,
    Silu,
    ChannelAffine,
    AddChannelBias,
    AddBatchChannel,
    AddLastBias,
    Reshape,
    Permute,
    AvgPool2,
    Upsample2,
    Sum,
    Mean,
    Mse,
    AffineConst,
    Custom,
}

enum Op<E> {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar(E),
    BatchMatMul { trans_a: bool, trans_b: bool },
    Conv2d { padding: usize },
    SoftmaxRows,
    GroupNorm { rstd: Vec<E> },
    Relu,
    Silu,
    ChannelAffine,
    AddChannelBias,
    AddBatchChannel,
    AddLastBias,
    Reshape,
    Permute(Vec<usize>),
    AvgPool2,
    Upsample2,
    Sum,
    Mean,
    Mse,
    AffineConst { scale: Vec<E> },
    Custom(BackwardFn<E>),
}

impl<E> Op<E> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::AddScalar => OpKind::AddScalar,
            Op::MulScalar(_) => OpKind::MulScalar,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::SoftmaxRows => OpKind::SoftmaxRows,
            Op::GroupNorm { .. } => OpKind::GroupNorm,
            Op::Relu => OpKind::Relu,
            Op::Silu => OpKind::Silu,
            Op::ChannelAffine => OpKind::ChannelAffine,
            Op::AddChannelBias => OpKind::AddChannelBias,
            Op::AddBatchChannel => OpKind::AddBatchChannel,
            Op::AddLastBias => OpKind::AddLastBias,
            Op::Reshape => OpKind::Reshape,
            Op::Permute(_) => OpKind::Permute,
            Op::AvgPool2 => OpKind::AvgPool2,
            Op::Upsample2 => OpKind::Upsample2,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::Mse => OpKind::Mse,
            Op::AffineConst { .. } => OpKind::AffineConst,
            Op::Custom(_) => OpKind::Custom,
        }
    }
}

struct Node<E> {
    op: Op<E>,
    inputs: Vec<NodeId>,
    value: Tensor<E>,
    needs_grad: bool,
}

/// Append-only tape of tensor operations.
pub struct Graph<E: Element = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

fn zip_map<E: Element>(a: &[E], b: &[E], f: impl Fn(E, E) -> E) -> Vec<E> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Gathers `src` (shape `shape`) into the axis order `axes`.
fn permute_data<E: Copy>(src: &[E], shape: &[usize], axes: &[usize]) -> Vec<E> {
    let src_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let gather_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    loop {
        // Inner loop over the last output axis.
        let stride = gather_strides[last];
        for i in 0..out_shape[last] {
            out.push(src[offset + i * stride]);
        }
        // Advance the multi-index over the remaining axes.
        let mut axis = last;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += gather_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= gather_strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox + dx` is in bounds.
fn valid_span(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).clamp(0, w as isize) as usize;
    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
    (lo, hi.max(lo))
}

fn im2col<E: Element>(x: &[E], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [E]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad as isize;
                let (lo, hi) = valid_span(w, dx);
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let line = &mut dst[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        line.fill(E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    line[..lo].fill(E::zero());
                    let s0 = (lo as isize + dx) as usize;
                    line[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    line[hi..].fill(E::zero());
                }
            }
        }
    }
}

fn col2im<E: Element>(cols: &[E], c: usize, h: usize, w: usize, k: usize, pad: usize, x: &mut [E]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad as isize;
                let (lo, hi) = valid_span(w, dx);
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let d0 = iy as usize * w + (lo as isize + dx) as usize;
                    let dst = &mut plane[d0..d0 + (hi - lo)];
                    for (d, &v) in dst.iter_mut().zip(&src[oy * w + lo..oy * w + hi]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

fn sigmoid<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: NodeId) -> Option<&[E]> {
        self.nodes[id.0].value.grad()
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    fn push(&mut self, op: Op<E>, inputs: Vec<NodeId>, value: Tensor<E>) -> NodeId {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    /// Adds a leaf. Its gradient is populated by `backward` if `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<E>) -> NodeId {
        self.push(Op::Leaf, Vec::new(), t)
    }

    pub fn param(&mut self, t: Tensor<E>) -> NodeId {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<E>) -> NodeId {
        self.leaf(t.with_requires_grad(false))
    }

    fn binary(&mut self, op: Op<E>, name: &'static str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        let f: fn(E, E) -> E = match op {
            Op::Add => |x, y| x + y,
            Op::Sub => |x, y| x - y,
            Op::Mul => |x, y| x * y,
            _ => unreachable!(),
        };
        let data = if av.shape() == bv.shape() {
            zip_map(av.data(), bv.data(), f)
        } else if bv.numel() == 1 {
            let s = bv.data()[0];
            av.data().iter().map(|&x| f(x, s)).collect()
        } else {
            return Err(mismatch(name, av.shape(), bv.shape()));
        };
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(op, vec![a, b], out))
    }

    /// Elementwise `a + b`; `b` may be a single-element tensor.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, "mul", a, b)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: E) -> NodeId {
        let av = self.val(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x + s).collect())
            .expect("same shape");
        self.push(Op::AddScalar, vec![a], out)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: E) -> NodeId {
        let av = self.val(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| x * s).collect())
            .expect("same shape");
        self.push(Op::MulScalar(s), vec![a], out)
    }

    /// `x * scale + shift` with constant per-element (or length-1) coefficients.
    pub fn affine_const(&mut self, x: NodeId, scale: Vec<E>, shift: Vec<E>) -> Result<NodeId> {
        let xv = self.val(x);
        let n = xv.numel();
        for (what, v) in [("scale", &scale), ("shift", &shift)] {
            if v.len() != n && v.len() != 1 {
                return Err(TensorError::Invalid {
                    op: "affine_const",
                    msg: format!("{what} has length {}, expected {n} or 1", v.len()),
                });
            }
        }
        let pick = |v: &[E], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * pick(&scale, i) + pick(&shift, i))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let scale = if scale.len() == 1 { vec![scale[0]; n] } else { scale };
        Ok(self.push(Op::AffineConst { scale }, vec![x], out))
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        expect_rank("matmul", &sa, 2)?;
        expect_rank("matmul", &sb, 2)?;
        if sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::zero(); m * n];
        E::gemm(m, k, n, self.val(a).data(), false, self.val(b).data(), false, E::zero(), &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            Op::BatchMatMul {
                trans_a: false,
                trans_b: false,
            },
            vec![a, b],
            t,
        ))
    }

    /// Batched product over the leading axis of rank-3 operands, with
    /// optional transposition of either operand's trailing two axes.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        expect_rank("bmm", &sa, 3)?;
        expect_rank("bmm", &sb, 3)?;
        let (m, ka) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if sa[0] != sb[0] || ka != kb {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let batch = sa[0];
        let mut out = vec![E::zero(); batch * m * n];
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        for i in 0..batch {
            E::gemm(
                m,
                ka,
                n,
                &ad[i * m * ka..(i + 1) * m * ka],
                trans_a,
                &bd[i * ka * n..(i + 1) * ka * n],
                trans_b,
                E::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let t = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(Op::BatchMatMul { trans_a, trans_b }, vec![a, b], t))
    }

    /// Stride-1 cross-correlation with square kernels and zero padding.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, padding: usize) -> Result<NodeId> {
        let (sx, sw) = (self.val(x).shape().to_vec(), self.val(w).shape().to_vec());
        expect_rank("conv2d", &sx, 4)?;
        expect_rank("conv2d", &sw, 4)?;
        let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, ck, k) = (sw[0], sw[1], sw[2]);
        if ck != c || sw[3] != k || 2 * padding + 1 != k {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let hw = h * wd;
        let ckk = c * k * k;
        let mut out = vec![E::zero(); b * o * hw];
        let mut cols = vec![E::zero(); if k == 1 { 0 } else { ckk * hw }];
        let (xd, wdata) = (self.val(x).data(), self.val(w).data());
        for bi in 0..b {
            let xb = &xd[bi * c * hw..(bi + 1) * c * hw];
            let src: &[E] = if k == 1 {
                xb
            } else {
                im2col(xb, c, h, wd, k, padding, &mut cols);
                &cols
            };
            E::gemm(o, ckk, hw, wdata, false, src, false, E::zero(), &mut out[bi * o * hw..(bi + 1) * o * hw]);
        }
        let t = Tensor::new(vec![b, o, h, wd], out)?;
        Ok(self.push(Op::Conv2d { padding }, vec![x, w], t))
    }

    /// Softmax over the trailing axis, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.val(x);
        let n = *xv.shape().last().ok_or(TensorError::Rank {
            op: "softmax_rows",
            expected: 1,
            shape: vec![],
        })?;
        let mut out = xv.data().to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                let max = row.iter().fold(E::neg_infinity(), |m, &v| m.max(v));
                let mut sum = E::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum = sum + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / sum;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(Op::SoftmaxRows, vec![x], t))
    }

    /// Group normalization without affine parameters over `[B, C, ...]`.
    pub fn group_norm(&mut self, x: NodeId, groups: usize, eps: E) -> Result<NodeId> {
        let xv = self.val(x);
        let s = xv.shape().to_vec();
        if s.len() < 2 {
            return Err(TensorError::Rank {
                op: "group_norm",
                expected: 2,
                shape: s,
            });
        }
        let c = s[1];
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::GroupDivisibility {
                op: "group_norm",
                channels: c,
                groups,
            });
        }
        let spatial: usize = s[2..].iter().product();
        let group_len = (c / groups) * spatial;
        let mut out = xv.data().to_vec();
        let mut rstd = Vec::with_capacity(s[0] * groups);
        let inv_n = E::one() / E::of(group_len as f64);
        for chunk in out.chunks_mut(group_len.max(1)) {
            let mean = chunk.iter().copied().sum::<E>() * inv_n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_n;
            let r = E::one() / (var + eps).sqrt();
            for v in chunk.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push(Op::GroupNorm { rstd }, vec![x], t))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let data = xv.data().iter().map(|&v| v.max(E::zero())).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(Op::Relu, vec![x], t)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let data = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(Op::Silu, vec![x], t)
    }

    fn channel_layout(&self, op: &'static str, x: NodeId, per_channel: NodeId) -> Result<(usize, usize, usize)> {
        let s = self.val(x).shape();
        let p = self.val(per_channel).shape();
        if s.len() < 2 || p.len() != 1 || p[0] != s[1] {
            return Err(mismatch(op, s, p));
        }
        Ok((s[0], s[1], s[2..].iter().product()))
    }

    /// `x * gamma[c] + beta[c]` over `[B, C, ...]`.
    pub fn channel_affine(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (b, c, sp) = self.channel_layout("channel_affine", x, gamma)?;
        self.channel_layout("channel_affine", x, beta)?;
        let (xd, g, be) = (self.val(x).data(), self.val(gamma).data(), self.val(beta).data());
        let mut out = Vec::with_capacity(xd.len());
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * sp;
                out.extend(xd[base..base + sp].iter().map(|&v| v * g[ci] + be[ci]));
            }
        }
        let t = Tensor::new(self.val(x).shape().to_vec(), out)?;
        Ok(self.push(Op::ChannelAffine, vec![x, gamma, beta], t))
    }

    /// Adds `bias[c]` over `[B, C, ...]`.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (b, c, sp) = self.channel_layout("add_channel_bias", x, bias)?;
        let (xd, bd) = (self.val(x).data(), self.val(bias).data());
        let mut out = Vec::with_capacity(xd.len());
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * sp;
                out.extend(xd[base..base + sp].iter().map(|&v| v + bd[ci]));
            }
        }
        let t = Tensor::new(self.val(x).shape().to_vec(), out)?;
        Ok(self.push(Op::AddChannelBias, vec![x, bias], t))
    }

    /// Adds a per-sample, per-channel term `e[b, c]` over `[B, C, ...]`.
    pub fn add_batch_channel(&mut self, x: NodeId, e: NodeId) -> Result<NodeId> {
        let s = self.val(x).shape().to_vec();
        let se = self.val(e).shape().to_vec();
        if s.len() < 2 || se != [s[0], s[1]] {
            return Err(mismatch("add_batch_channel", &s, &se));
        }
        let sp: usize = s[2..].iter().product();
        let (xd, ed) = (self.val(x).data(), self.val(e).data());
        let mut out = Vec::with_capacity(xd.len());
        for (row, &add) in xd.chunks(sp.max(1)).zip(ed) {
            out.extend(row.iter().map(|&v| v + add));
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push(Op::AddBatchChannel, vec![x, e], t))
    }

    /// Adds `bias[n]` along the trailing axis.
    pub fn add_last_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let s = self.val(x).shape().to_vec();
        let sb = self.val(bias).shape().to_vec();
        if s.is_empty() || sb.len() != 1 || sb[0] != s[s.len() - 1] {
            return Err(mismatch("add_last_bias", &s, &sb));
        }
        let n = sb[0];
        let bd = self.val(bias).data();
        let out = self
            .val(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % n])
            .collect();
        let t = Tensor::new(s, out)?;
        Ok(self.push(Op::AddLastBias, vec![x, bias], t))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.val(x).clone().with_requires_grad(false);
        let t = Tensor::new(t.shape().to_vec(), t.into_data())?.reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x], t))
    }

    /// Reorders axes; `axes[i]` is the source axis of output axis `i`.
    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let s = self.val(x).shape().to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("axes {axes:?} invalid for shape {s:?}"),
            });
        }
        let data = permute_data(self.val(x).data(), &s, axes);
        let t = Tensor::new(axes.iter().map(|&a| s[a]).collect(), data)?;
        Ok(self.push(Op::Permute(axes.to_vec()), vec![x], t))
    }

    /// 2x2 average pooling over `[B, C, H, W]` with even `H`, `W`.
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.val(x).shape().to_vec();
        expect_rank("avg_pool2", &s, 4)?;
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "avg_pool2",
                msg: format!("odd spatial size {s:?}"),
            });
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.val(x).data();
        let quarter = E::of(0.25);
        let mut out = Vec::with_capacity(xd.len() / 4);
        for plane in xd.chunks(h * w) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = 2 * oy * w + 2 * ox;
                    out.push((plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter);
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        Ok(self.push(Op::AvgPool2, vec![x], t))
    }

    /// Nearest-neighbour 2x upsampling over `[B, C, H, W]`.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.val(x).shape().to_vec();
        expect_rank("upsample2", &s, 4)?;
        let (h, w) = (s[2], s[3]);
        let xd = self.val(x).data();
        let mut out = Vec::with_capacity(xd.len() * 4);
        for plane in xd.chunks(h * w) {
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    out.push(plane[(oy / 2) * w + ox / 2]);
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?;
        Ok(self.push(Op::Upsample2, vec![x], t))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).data().iter().copied().sum::<E>();
        self.push(Op::Sum, vec![x], Tensor::scalar(v))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let v = xv.data().iter().copied().sum::<E>() / E::of(xv.numel().max(1) as f64);
        self.push(Op::Mean, vec![x], Tensor::scalar(v))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mse", av.shape(), bv.shape()));
        }
        let n = E::of(av.numel().max(1) as f64);
        let v = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<E>()
            / n;
        Ok(self.push(Op::Mse, vec![a, b], Tensor::scalar(v)))
    }

    /// Registers an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[NodeId], output: Tensor<E>, backward: BackwardFn<E>) -> NodeId {
        self.push(Op::Custom(backward), inputs.to_vec(), output)
    }

    /// Propagates gradients from a scalar `loss` to every leaf that requires
    /// them. Leaves that do not influence the loss receive zero gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let ls = self.val(loss).shape();
        if self.val(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let need: Vec<bool> = self.nodes[id]
                .inputs
                .iter()
                .map(|i| self.nodes[i.0].needs_grad)
                .collect();
            let input_grads = self.vjp(id, &g, &need);
            let inputs = self.nodes[id].inputs.clone();
            for ((inp, ig), needed) in inputs.into_iter().zip(input_grads).zip(need) {
                let (Some(ig), true) = (ig, needed) else { continue };
                match &mut grads[inp.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let n = node.value.numel();
                node.value
                    .set_grad(Some(g.unwrap_or_else(|| vec![E::zero(); n])))?;
            }
        }
        Ok(())
    }

    fn vjp(&self, id: usize, g: &[E], need: &[bool]) -> Vec<Option<Vec<E>>> {
        let node = &self.nodes[id];
        let inp = |i: usize| &self.nodes[node.inputs[i].0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (inp(0), inp(1));
                let broadcast = a.shape() != b.shape();
                let bval = |i: usize| if broadcast { b.data()[0] } else { b.data()[i] };
                let ga: Vec<E> = match node.op {
                    Op::Mul => g.iter().enumerate().map(|(i, &d)| d * bval(i)).collect(),
                    _ => g.to_vec(),
                };
                let gb_full: Vec<E> = match node.op {
                    Op::Add => g.to_vec(),
                    Op::Sub => g.iter().map(|&d| -d).collect(),
                    _ => zip_map(g, a.data(), |d, x| d * x),
                };
                let gb = if broadcast {
                    vec![gb_full.into_iter().sum::<E>()]
                } else {
                    gb_full
                };
                vec![Some(ga), Some(gb)]
            }
            Op::AddScalar => vec![Some(g.to_vec())],
            Op::MulScalar(s) => vec![Some(g.iter().map(|&d| d * *s).collect())],
            Op::AffineConst { scale } => vec![Some(zip_map(g, scale, |d, s| d * s))],
            Op::BatchMatMul { trans_a, trans_b } => {
                let (a, b) = (inp(0), inp(1));
                let (sa, sb) = (a.shape(), b.shape());
                let rank3 = sa.len() == 3;
                let (batch, ra, ca) = if rank3 { (sa[0], sa[1], sa[2]) } else { (1, sa[0], sa[1]) };
                let (rb, cb) = if rank3 { (sb[1], sb[2]) } else { (sb[0], sb[1]) };
                let (m, k) = if *trans_a { (ca, ra) } else { (ra, ca) };
                let n = if *trans_b { rb } else { cb };
                let mut ga = need[0].then(|| vec![E::zero(); a.numel()]);
                let mut gb = need[1].then(|| vec![E::zero(); b.numel()]);
                for i in 0..batch {
                    let dc = &g[i * m * n..(i + 1) * m * n];
                    let ad = &a.data()[i * m * k..(i + 1) * m * k];
                    let bd = &b.data()[i * k * n..(i + 1) * k * n];
                    if let Some(ga) = ga.as_mut() {
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_a {
                            E::gemm(k, n, m, bd, *trans_b, dc, true, E::zero(), dst);
                        } else {
                            E::gemm(m, n, k, dc, false, bd, !*trans_b, E::zero(), dst);
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            E::gemm(n, m, k, dc, true, ad, *trans_a, E::zero(), dst);
                        } else {
                            E::gemm(k, m, n, ad, !*trans_a, dc, false, E::zero(), dst);
                        }
                    }
                }
                vec![ga, gb]
            }
            Op::Conv2d { padding } => {
                let (x, w) = (inp(0), inp(1));
                let (sx, sw) = (x.shape(), w.shape());
                let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, k) = (sw[0], sw[2]);
                let hw = h * wd;
                let ckk = c * k * k;
                let mut gx = need[0].then(|| vec![E::zero(); x.numel()]);
                let mut gw = need[1].then(|| vec![E::zero(); w.numel()]);
                let mut cols = vec![E::zero(); if k == 1 { 0 } else { ckk * hw }];
                let mut dcols = vec![E::zero(); if gx.is_some() && k != 1 { ckk * hw } else { 0 }];
                for bi in 0..b {
                    let xb = &x.data()[bi * c * hw..(bi + 1) * c * hw];
                    let dout = &g[bi * o * hw..(bi + 1) * o * hw];
                    if let Some(gw) = gw.as_mut() {
                        let src: &[E] = if k == 1 {
                            xb
                        } else {
                            im2col(xb, c, h, wd, k, *padding, &mut cols);
                            &cols
                        };
                        E::gemm(o, hw, ckk, dout, false, src, true, E::one(), gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[bi * c * hw..(bi + 1) * c * hw];
                        if k == 1 {
                            E::gemm(ckk, o, hw, w.data(), true, dout, false, E::zero(), dst);
                        } else {
                            E::gemm(ckk, o, hw, w.data(), true, dout, false, E::zero(), &mut dcols);
                            col2im(&dcols, c, h, wd, k, *padding, dst);
                        }
                    }
                }
                vec![gx, gw]
            }
            Op::SoftmaxRows => {
                let n = *out.shape().last().unwrap_or(&1);
                let mut gx = Vec::with_capacity(g.len());
                if n > 0 {
                    for (y, dy) in out.data().chunks(n).zip(g.chunks(n)) {
                        let dot: E = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
                        gx.extend(y.iter().zip(dy).map(|(&yi, &di)| yi * (di - dot)));
                    }
                }
                vec![Some(gx)]
            }
            Op::GroupNorm { rstd, .. } => {
                let group_len = out.numel() / rstd.len().max(1);
                let mut gx = Vec::with_capacity(g.len());
                let inv_n = E::one() / E::of(group_len as f64);
                for ((y, dy), &r) in out.data().chunks(group_len).zip(g.chunks(group_len)).zip(rstd) {
                    let mean_dy = dy.iter().copied().sum::<E>() * inv_n;
                    let mean_dyy = y.iter().zip(dy).map(|(&a, &b)| a * b).sum::<E>() * inv_n;
                    gx.extend(y.iter().zip(dy).map(|(&yi, &di)| r * (di - mean_dy - yi * mean_dyy)));
                }
                vec![Some(gx)]
            }
            Op::Relu => vec![Some(zip_map(g, inp(0).data(), |d, x| if x > E::zero() { d } else { E::zero() }))],
            Op::Silu => vec![Some(zip_map(g, inp(0).data(), |d, x| {
                let s = sigmoid(x);
                d * (s + x * s * (E::one() - s))
            }))],
            Op::ChannelAffine => {
                let (x, gamma) = (inp(0), inp(1));
                let s = x.shape();
                let (b, c) = (s[0], s[1]);
                let sp: usize = s[2..].iter().product();
                let mut gx = Vec::with_capacity(g.len());
                let mut gg = vec![E::zero(); c];
                let mut gbeta = vec![E::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * sp;
                        let dy = &g[base..base + sp];
                        let xs = &x.data()[base..base + sp];
                        gg[ci] = gg[ci] + dy.iter().zip(xs).map(|(&d, &v)| d * v).sum::<E>();
                        gbeta[ci] = gbeta[ci] + dy.iter().copied().sum::<E>();
                        gx.extend(dy.iter().map(|&d| d * gamma.data()[ci]));
                    }
                }
                vec![Some(gx), Some(gg), Some(gbeta)]
            }
            Op::AddChannelBias => {
                let s = out.shape();
                let (b, c) = (s[0], s[1]);
                let sp: usize = s[2..].iter().product();
                let mut gb = vec![E::zero(); c];
                for bi in 0..b {
                    for (ci, acc) in gb.iter_mut().enumerate() {
                        let base = (bi * c + ci) * sp;
                        *acc = *acc + g[base..base + sp].iter().copied().sum::<E>();
                    }
                }
                vec![Some(g.to_vec()), Some(gb)]
            }
            Op::AddBatchChannel => {
                let s = out.shape();
                let sp: usize = s[2..].iter().product();
                let ge = g.chunks(sp.max(1)).map(|row| row.iter().copied().sum::<E>()).collect();
                vec![Some(g.to_vec()), Some(ge)]
            }
            Op::AddLastBias => {
                let n = inp(1).numel();
                let mut gb = vec![E::zero(); n];
                for (i, &d) in g.iter().enumerate() {
                    gb[i % n] = gb[i % n] + d;
                }
                vec![Some(g.to_vec()), Some(gb)]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Permute(axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                vec![Some(permute_data(g, out.shape(), &inverse))]
            }
            Op::AvgPool2 => {
                let s = inp(0).shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = E::of(0.25);
                let mut gx = vec![E::zero(); inp(0).numel()];
                for (plane, dy) in gx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let d = dy[oy * ow + ox] * quarter;
                            let i = 2 * oy * w + 2 * ox;
                            plane[i] = d;
                            plane[i + 1] = d;
                            plane[i + w] = d;
                            plane[i + w + 1] = d;
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::Upsample2 => {
                let s = inp(0).shape();
                let (h, w) = (s[2], s[3]);
                let mut gx = vec![E::zero(); inp(0).numel()];
                for (plane, dy) in gx.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
                    for oy in 0..2 * h {
                        for ox in 0..2 * w {
                            let i = (oy / 2) * w + ox / 2;
                            plane[i] = plane[i] + dy[oy * 2 * w + ox];
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::Sum => vec![Some(vec![g[0]; inp(0).numel()])],
            Op::Mean => {
                let n = inp(0).numel().max(1);
                vec![Some(vec![g[0] / E::of(n as f64); n])]
            }
            Op::Mse => {
                let (a, b) = (inp(0), inp(1));
                let scale = E::of(2.0) * g[0] / E::of(a.numel().max(1) as f64);
                let ga: Vec<E> = zip_map(a.data(), b.data(), |x, y| (x - y) * scale);
                let gb = ga.iter().map(|&v| -v).collect();
                vec![Some(ga), Some(gb)]
            }
            Op::Custom(f) => {
                let inputs: Vec<&Tensor<E>> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                f(&inputs, out, g)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn add_and_scalar_mul() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]));
        let b = g.leaf(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let m = g.mul(a, z).unwrap();
        assert_eq!(g.value(m).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[3, 2]));
        match g.add(a, b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn add_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let b = g.leaf(t(&[3], &[3.0, 4.0, 5.0]));
        let c = g.add(a, b).unwrap();
        let l = g.sum(c);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::ones(&[2]));
        let unused = g.param(Tensor::ones(&[4]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn matmul_identity_and_small() {
        let mut g = Graph::<f64>::new();
        let i = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.leaf(t(&[2, 2], &[3.0, -1.0, 2.5, 7.0]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let a = g.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = g.leaf(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn_f64(&[3, 4], &mut rng);
        let b = Tensor::randn_f64(&[4, 2], &mut rng);
        let mut expected = [0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    expected[i * 2 + j] += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
            }
        }
        let mut g = Graph::new();
        let (an, bn) = (g.leaf(a), g.leaf(b));
        let c = g.matmul(an, bn).unwrap();
        for (x, y) in g.value(c).data().iter().zip(expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bmm_transposes_match_explicit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn_f64(&[2, 3, 4], &mut rng);
        let b = Tensor::randn_f64(&[2, 5, 4], &mut rng);
        let mut g = Graph::new();
        let (an, bn) = (g.leaf(a.clone()), g.leaf(b.clone()));
        let c = g.bmm(an, bn, false, true).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 5]);
        let bt = g.permute(bn, &[0, 2, 1]).unwrap();
        let c2 = g.bmm(an, bt, false, false).unwrap();
        for (x, y) in g.value(c).data().iter().zip(g.value(c2).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn_f64(&[1, 1, 5, 4], &mut rng);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let w = g.leaf(t(&[1, 1, 3, 3], &k));
        let y = g.conv2d(xn, w, 1).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn conv_ones_kernel_counts_neighbours() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(&[1, 1, 4, 4]));
        let w = g.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, w, 1).unwrap();
        // Direct sliding-window count of in-bounds taps.
        let mut expected = vec![0.0; 16];
        for oy in 0..4i32 {
            for ox in 0..4i32 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (iy, ix) = (oy + dy, ox + dx);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            expected[(oy * 4 + ox) as usize] += 1.0;
                        }
                    }
                }
            }
        }
        assert_eq!(g.value(y).data(), expected.as_slice());
        let d = g.value(y).data();
        assert_eq!((d[0], d[1], d[5]), (4.0, 6.0, 9.0));
    }

    #[test]
    fn conv_zero_kernel_and_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::ones(&[1, 2, 3, 3]));
        let w = g.leaf(Tensor::zeros(&[4, 2, 3, 3]));
        let y = g.conv2d(x, w, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let bad = g.leaf(Tensor::zeros(&[4, 3, 3, 3]));
        assert!(g.conv2d(x, bad, 1).is_err());
    }

    #[test]
    fn softmax_fixtures() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::zeros(&[4]));
        let s = g.softmax_rows(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.25; 4]);
        let big = g.leaf(t(&[2], &[1000.0, -1000.0]));
        let s = g.softmax_rows(big).unwrap();
        assert!(g.value(s).data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        // Reference values evaluated with 40-digit arithmetic.
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.softmax_rows(x).unwrap();
        let reference = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_65,
            0.665_240_955_774_821_9,
        ];
        for (a, b) in g.value(s).data().iter().zip(reference) {
            assert!((a - b).abs() < 1e-6);
        }
        let mut g32 = Graph::<f32>::new();
        let x = g32.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = g32.softmax_rows(x).unwrap();
        for (a, b) in g32.value(s).data().iter().zip(reference) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn group_norm_stats_and_constant_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[2, 4, 3, 3], &mut rng);
        let mut g = Graph::<f32>::new();
        let xn = g.leaf(x);
        let y = g.group_norm(xn, 2, 1e-5).unwrap();
        for chunk in g.value(y).data().chunks(18) {
            let n = chunk.len() as f64;
            let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
        let c = g.leaf(Tensor::full(&[1, 2, 2, 2], 3.5));
        let y = g.group_norm(c, 1, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            g.group_norm(c, 3, 1e-5),
            Err(TensorError::GroupDivisibility { .. })
        ));
    }

    #[test]
    fn permute_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 3, 4, 5], &mut rng);
        let mut g = Graph::<f32>::new();
        let xn = g.leaf(x.clone());
        let p = g.permute(xn, &[0, 2, 1, 3]).unwrap();
        assert_eq!(g.shape(p), &[2, 4, 3, 5]);
        // Spot check one element: out[1,2,0,3] == in[1,0,2,3].
        let out = g.value(p).data()[((1 * 4 + 2) * 3 + 0) * 5 + 3];
        let inp = x.data()[((1 * 3 + 0) * 4 + 2) * 5 + 3];
        assert_eq!(out, inp);
        let back = g.permute(p, &[0, 2, 1, 3]).unwrap();
        assert_eq!(g.value(back).data(), x.data());
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.avg_pool2(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
        let u = g.upsample2(x).unwrap();
        assert_eq!(g.shape(u), &[1, 1, 4, 4]);
        assert_eq!(&g.value(u).data()[..4], &[1.0, 1.0, 2.0, 2.0]);
    }
}
