//! Operation tape: forward kernels plus reverse-mode adjoints.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append nodes and return lightweight [`Var`] handles; [`Tape::backward`]
//! walks the nodes in exact reverse execution order, propagating adjoints
//! only into nodes that can reach a trainable parameter, and finally
//! accumulates parameter gradients into the [`ParamStore`].

use super::{numel, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Pointwise binary kinds. `b` may broadcast into `a` (equal rank, every
/// `b` extent equal to `a`'s or 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwKind {
    Add,
    Sub,
    Hadamard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Relu,
    Gelu,
    Exp,
    Ln,
    /// x·ln(x) with the convention 0·ln(0) = 0 (and derivative 0 there).
    XLogX,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    Matmul { a: Var, b: Var },
    Bmm { a: Var, b: Var, transpose_b: bool },
    Ew { kind: EwKind, a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Unary { kind: UnaryKind, a: Var },
    SoftmaxLast { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    MeanAxis { a: Var, axis: usize },
    SumAxis { a: Var, axis: usize },
    CosineLast { a: Var, b: Var, eps: f64 },
    L2NormLast { a: Var, eps: f64 },
    DepthwiseConv { x: Var, kernel: Var },
    PointwiseConv { x: Var, w: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    BroadcastAxis { a: Var, axis: usize, n: usize },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
}

/// Records primitives during a forward pass and replays them in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    adjoints: Vec<Option<Vec<f64>>>,
    spent: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        debug_assert!(
            data.iter().all(|x| x.is_finite()),
            "non-finite value produced by {op:?}"
        );
        self.nodes.push(Node {
            op,
            shape,
            data,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Materializes a tape value as an owned [`Tensor`].
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Adjoint of `v` after [`Tape::backward`] has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.adjoints.get(v.0).and_then(|g| g.as_deref())
    }

    // ── leaves ──────────────────────────────────────────────────────

    /// Non-differentiable constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf { param: None }, t.shape, t.data, false)
    }

    /// Input leaf; participates in backward iff `t.requires_grad`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(
            Op::Leaf { param: None },
            t.shape.clone(),
            t.data.clone(),
            t.requires_grad,
        )
    }

    /// Parameter leaf. Frozen parameters enter as constants.
    pub fn param(&mut self, id: ParamId, store: &ParamStore) -> Var {
        let p = store.get(id);
        self.push(
            Op::Leaf { param: Some(id) },
            p.tensor.shape.clone(),
            p.tensor.data.clone(),
            !p.frozen,
        )
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// `a [..., M, K] × b [K, N] → [..., M, N]`; `b` is shared across any
    /// leading batch axes of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ashape.len() < 2 || bshape.len() != 2 || ashape[ashape.len() - 1] != bshape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let k = bshape[0];
        let n = bshape[1];
        let m = ashape[ashape.len() - 2];
        let batch = numel(&ashape) / (m * k);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            mm(
                &self.nodes[a.0].data[bi * m * k..(bi + 1) * m * k],
                &self.nodes[b.0].data,
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = ashape;
        let last = shape.len() - 1;
        shape[last] = n;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, shape, out, ng))
    }

    /// Batched matmul with equal leading axes. With `transpose_b` the second
    /// operand is `[..., N, K]` and the product contracts the last axes.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = ashape.len();
        let mismatch = || TensorError::ShapeMismatch {
            op: "bmm",
            lhs: ashape.clone(),
            rhs: bshape.clone(),
        };
        if r < 2 || bshape.len() != r || ashape[..r - 2] != bshape[..r - 2] {
            return Err(mismatch());
        }
        let m = ashape[r - 2];
        let k = ashape[r - 1];
        let (bn, bk) = if transpose_b {
            (bshape[r - 2], bshape[r - 1])
        } else {
            (bshape[r - 1], bshape[r - 2])
        };
        if bk != k {
            return Err(mismatch());
        }
        let batch = numel(&ashape) / (m * k);
        let mut out = vec![0.0; batch * m * bn];
        for i in 0..batch {
            let av = &self.nodes[a.0].data[i * m * k..(i + 1) * m * k];
            let bv = &self.nodes[b.0].data[i * bn * k..(i + 1) * bn * k];
            let ov = &mut out[i * m * bn..(i + 1) * m * bn];
            if transpose_b {
                mm_nt(av, bv, m, k, bn, ov);
            } else {
                mm(av, bv, m, k, bn, ov);
            }
        }
        let mut shape = ashape;
        shape[r - 2] = m;
        shape[r - 1] = bn;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Bmm { a, b, transpose_b }, shape, out, ng))
    }

    // ── pointwise ───────────────────────────────────────────────────

    fn ew(&mut self, kind: EwKind, a: Var, b: Var) -> Result<Var> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !broadcast_ok(&ashape, &bshape) {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let n = numel(&ashape);
        let mut out = vec![0.0; n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            let apply = |x: f64, y: f64| match kind {
                EwKind::Add => x + y,
                EwKind::Sub => x - y,
                EwKind::Hadamard => x * y,
            };
            if ashape == bshape {
                for i in 0..n {
                    out[i] = apply(ad[i], bd[i]);
                }
            } else {
                broadcast_zip(&ashape, &bshape, |ai, bi| out[ai] = apply(ad[ai], bd[bi]));
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Ew { kind, a, b }, ashape, out, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(EwKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(EwKind::Sub, a, b)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(EwKind::Hadamard, a, b)
    }

    /// Multiplication by a compile-time scalar (the `scale` elementwise kind).
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(Op::Scale { a, c }, shape, data, ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(Op::AddScalar { a }, shape, data, ng)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| unary_fwd(kind, x))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(Op::Unary { kind, a }, shape, data, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Ln, a)
    }

    pub fn xlogx(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::XLogX, a)
    }

    // ── normalization and reductions ────────────────────────────────

    /// Max-subtracting softmax over the last axis.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or(TensorError::AxisOutOfRange {
            axis: 0,
            shape: shape.clone(),
        })?;
        let n = numel(&shape);
        let mut out = vec![0.0; n];
        for (row_out, row_in) in out
            .chunks_mut(d)
            .zip(self.nodes[a.0].data.chunks(d))
        {
            let m = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - m).exp();
                s += *o;
            }
            for o in row_out.iter_mut() {
                *o /= s;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Op::SoftmaxLast { a }, shape, out, ng))
    }

    /// Layer normalization over the channel (last) axis with affine output.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if c == 0
            || self.shape(gain) != [c]
            || self.shape(bias) != [c]
        {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Config("layer_norm eps must be > 0".into()));
        }
        let n = numel(&shape);
        let mut out = vec![0.0; n];
        {
            let xd = &self.nodes[x.0].data;
            let g = &self.nodes[gain.0].data;
            let b = &self.nodes[bias.0].data;
            for (row_out, row_in) in out.chunks_mut(c).zip(xd.chunks(c)) {
                let mean = row_in.iter().sum::<f64>() / c as f64;
                let var = row_in.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    row_out[j] = (row_in[j] - mean) * inv * g[j] + b[j];
                }
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, shape, out, ng))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        let pre: usize = shape[..axis].iter().product();
        let n_axis = shape[axis];
        let post: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; pre * post];
        {
            let d = &self.nodes[a.0].data;
            for p in 0..pre {
                for j in 0..n_axis {
                    let base = (p * n_axis + j) * post;
                    let obase = p * post;
                    for q in 0..post {
                        out[obase + q] += d[base + q];
                    }
                }
            }
        }
        if mean {
            let inv = 1.0 / n_axis as f64;
            out.iter_mut().for_each(|x| *x *= inv);
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let ng = self.needs(a);
        let op = if mean {
            Op::MeanAxis { a, axis }
        } else {
            Op::SumAxis { a, axis }
        };
        Ok(self.push(op, oshape, out, ng))
    }

    /// Arithmetic mean along `axis`; the axis is removed.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over all elements, producing a scalar (empty shape).
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].data.len();
        let flat = self.reshape(a, vec![n])?;
        self.mean_axis(flat, 0)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].data.len();
        let flat = self.reshape(a, vec![n])?;
        self.sum_axis(flat, 0)
    }

    /// Cosine similarity over the last axis, clamped to [-1, 1].
    ///
    /// Norms are floored at `eps`, so an all-zero row yields similarity 0.
    pub fn cosine_lastdim(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ashape != bshape || ashape.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_lastdim",
                lhs: ashape,
                rhs: bshape,
            });
        }
        let d = *ashape.last().unwrap();
        let rows = numel(&ashape) / d;
        let mut out = vec![0.0; rows];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for r in 0..rows {
                let (ra, rb) = (&ad[r * d..(r + 1) * d], &bd[r * d..(r + 1) * d]);
                let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
                let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
                out[r] = (dot / (na * nb)).clamp(-1.0, 1.0);
            }
        }
        let oshape = ashape[..ashape.len() - 1].to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::CosineLast { a, b, eps }, oshape, out, ng))
    }

    /// Rows scaled to unit L2 norm; norms are floored at `eps`.
    pub fn l2_normalize_lastdim(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or(TensorError::AxisOutOfRange {
            axis: 0,
            shape: shape.clone(),
        })?;
        let n = numel(&shape);
        let mut out = vec![0.0; n];
        {
            let ad = &self.nodes[a.0].data;
            for (row_out, row_in) in out.chunks_mut(d).zip(ad.chunks(d)) {
                let norm = row_in.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
                for (o, &x) in row_out.iter_mut().zip(row_in) {
                    *o = x / norm;
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Op::L2NormLast { a, eps }, shape, out, ng))
    }

    // ── temporal convolutions ───────────────────────────────────────

    /// Depthwise 1-D convolution along axis 0 with zero padding ("same"
    /// length). `x` is `[T, ..., C]`, `kernel` is `[C, k]` with odd `k`;
    /// channels never mix and any middle axes are treated as batch.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let kshape = self.shape(kernel).to_vec();
        if shape.len() < 2 || kshape.len() != 2 || kshape[0] != *shape.last().unwrap() {
            return Err(TensorError::ShapeMismatch {
                op: "depthwise_conv1d",
                lhs: shape,
                rhs: kshape,
            });
        }
        let ks = kshape[1];
        if ks % 2 == 0 {
            return Err(TensorError::Config(format!(
                "depthwise kernel size must be odd, got {ks}"
            )));
        }
        let t = shape[0];
        let c = *shape.last().unwrap();
        let mid = numel(&shape) / (t * c);
        let pad = (ks - 1) / 2;
        let mut out = vec![0.0; numel(&shape)];
        {
            let xd = &self.nodes[x.0].data;
            let kd = &self.nodes[kernel.0].data;
            for ti in 0..t {
                for r in 0..mid {
                    let obase = (ti * mid + r) * c;
                    for d in 0..ks {
                        let src = ti as isize + d as isize - pad as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let ibase = (src as usize * mid + r) * c;
                        for ch in 0..c {
                            out[obase + ch] += kd[ch * ks + d] * xd[ibase + ch];
                        }
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(kernel);
        Ok(self.push(Op::DepthwiseConv { x, kernel }, shape, out, ng))
    }

    /// Pointwise 1-D convolution: linear channel mixing at every position.
    /// `x` is `[..., C_in]`, `w` is `[C_in, C_out]`.
    ///
    /// Numerically equal to a matmul by `w`, but kept as its own kernel so
    /// the two routes stay independently checkable.
    pub fn pointwise_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let wshape = self.shape(w).to_vec();
        if shape.is_empty() || wshape.len() != 2 || wshape[0] != *shape.last().unwrap() {
            return Err(TensorError::ShapeMismatch {
                op: "pointwise_conv1d",
                lhs: shape,
                rhs: wshape,
            });
        }
        let cin = wshape[0];
        let cout = wshape[1];
        let positions = numel(&shape) / cin;
        let mut out = vec![0.0; positions * cout];
        {
            let xd = &self.nodes[x.0].data;
            let wd = &self.nodes[w.0].data;
            for p in 0..positions {
                let xrow = &xd[p * cin..(p + 1) * cin];
                let orow = &mut out[p * cout..(p + 1) * cout];
                for (ci, &xv) in xrow.iter().enumerate() {
                    let wrow = &wd[ci * cout..(ci + 1) * cout];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let mut oshape = shape;
        let last = oshape.len() - 1;
        oshape[last] = cout;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Op::PointwiseConv { x, w }, oshape, out, ng))
    }

    // ── shape plumbing ──────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, new_shape: Vec<usize>) -> Result<Var> {
        if numel(&new_shape) != self.nodes[a.0].data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: new_shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape { a }, new_shape, data, ng))
    }

    /// Axis permutation (copying transpose).
    pub fn permute(&mut self, a: Var, perm: Vec<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::Config(format!(
                "invalid permutation {perm:?} for rank {r}"
            )));
        }
        let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_copy(&self.nodes[a.0].data, &shape, &perm);
        let ng = self.needs(a);
        Ok(self.push(Op::Permute { a, perm }, oshape, data, ng))
    }

    /// Repeats a singleton axis `n` times; the adjoint sums back over it.
    pub fn broadcast_axis(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] != 1 {
            return Err(TensorError::AxisOutOfRange { axis, shape });
        }
        let pre: usize = shape[..axis].iter().product();
        let post: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; pre * n * post];
        {
            let d = &self.nodes[a.0].data;
            for p in 0..pre {
                let block = &d[p * post..(p + 1) * post];
                for j in 0..n {
                    out[(p * n + j) * post..(p * n + j + 1) * post].copy_from_slice(block);
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = n;
        let ng = self.needs(a);
        Ok(self.push(Op::BroadcastAxis { a, axis, n }, oshape, out, ng))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Usage("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange { axis, shape: first });
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let pre: usize = first[..axis].iter().product();
        let post: usize = first[axis + 1..].iter().product();
        let mut oshape = first;
        oshape[axis] = axis_total;
        let mut out = vec![0.0; numel(&oshape)];
        let mut offset = 0;
        for &p in parts {
            let s_axis = self.shape(p)[axis];
            let d = &self.nodes[p.0].data;
            for pi in 0..pre {
                let src = &d[pi * s_axis * post..(pi + 1) * s_axis * post];
                let dst_base = (pi * axis_total + offset) * post;
                out[dst_base..dst_base + s_axis * post].copy_from_slice(src);
            }
            offset += s_axis;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            oshape,
            out,
            ng,
        ))
    }

    // ── sparse selection ────────────────────────────────────────────

    /// Per-row Top-K mask with `K = ⌈rho·L⌉` over the last axis, plus the
    /// softmax of the scores (the soft selection distribution).
    ///
    /// The mask enters the graph as a constant: gradients flow only through
    /// the values it multiplies. Ties break toward ascending index.
    pub fn topk_mask(&mut self, scores: Var, rho: f64) -> Result<(Var, Var)> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(TensorError::Config(format!(
                "top-k ratio must lie in (0, 1], got {rho}"
            )));
        }
        let shape = self.shape(scores).to_vec();
        let l = *shape.last().ok_or(TensorError::AxisOutOfRange {
            axis: 0,
            shape: shape.clone(),
        })?;
        let k = ceil_ratio(rho, l);
        let soft = self.softmax_lastdim(scores)?;
        let mut mask = vec![0.0; numel(&shape)];
        {
            let d = &self.nodes[scores.0].data;
            let mut order: Vec<usize> = Vec::with_capacity(l);
            for (row_mask, row) in mask.chunks_mut(l).zip(d.chunks(l)) {
                order.clear();
                order.extend(0..l);
                // Descending score, ascending index on ties.
                order.sort_by(|&i, &j| {
                    row[j].partial_cmp(&row[i]).unwrap().then(i.cmp(&j))
                });
                for &i in &order[..k] {
                    row_mask[i] = 1.0;
                }
            }
        }
        let mask_var = self.constant(Tensor {
            shape,
            data: mask,
            requires_grad: false,
            grad: None,
        });
        Ok((mask_var, soft))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse replay from a scalar `root`; gradients of non-frozen
    /// parameter leaves accumulate into `store`.
    pub fn backward(&mut self, root: Var, store: &mut ParamStore) -> Result<()> {
        if self.spent {
            return Err(TensorError::Usage(
                "backward already ran on this tape; record a new forward".into(),
            ));
        }
        if self.nodes[root.0].data.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.spent = true;
        self.adjoints = (0..self.nodes.len()).map(|_| None).collect();
        self.adjoints[root.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.adjoints[i].take() else {
                continue;
            };
            self.propagate(i, &g, store);
            self.adjoints[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].data.len();
        let slot = self.adjoints[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&mut self, i: usize, g: &[f64], store: &mut ParamStore) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf { param } => {
                if let Some(id) = param {
                    store.accumulate_grad(id, g);
                }
            }
            Op::Matmul { a, b } => {
                let (m, k, n);
                {
                    let bs = &self.nodes[b.0].shape;
                    k = bs[0];
                    n = bs[1];
                    let ashape = &self.nodes[a.0].shape;
                    m = ashape[ashape.len() - 2];
                }
                let batch = self.nodes[a.0].data.len() / (m * k);
                if self.needs(a) {
                    let mut da = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        mm_bt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &self.nodes[b.0].data,
                            m,
                            n,
                            k,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    self.acc(a, |s| axpy(s, &da));
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    for bi in 0..batch {
                        mm_at(
                            &self.nodes[a.0].data[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db,
                        );
                    }
                    self.acc(b, |s| axpy(s, &db));
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let r = self.nodes[a.0].shape.len();
                let m = self.nodes[a.0].shape[r - 2];
                let k = self.nodes[a.0].shape[r - 1];
                let bn = self.nodes[i].shape[r - 1];
                let batch = self.nodes[a.0].data.len() / (m * k);
                if self.needs(a) {
                    let mut da = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        let gv = &g[bi * m * bn..(bi + 1) * m * bn];
                        let bv = &self.nodes[b.0].data[bi * bn * k..(bi + 1) * bn * k];
                        let dv = &mut da[bi * m * k..(bi + 1) * m * k];
                        if transpose_b {
                            // C = A·Bᵀ ⇒ dA = dC·B
                            mm(gv, bv, m, bn, k, dv);
                        } else {
                            mm_bt(gv, bv, m, bn, k, dv);
                        }
                    }
                    self.acc(a, |s| axpy(s, &da));
                }
                if self.needs(b) {
                    let mut db = vec![0.0; self.nodes[b.0].data.len()];
                    for bi in 0..batch {
                        let gv = &g[bi * m * bn..(bi + 1) * m * bn];
                        let av = &self.nodes[a.0].data[bi * m * k..(bi + 1) * m * k];
                        let dv = &mut db[bi * bn * k..(bi + 1) * bn * k];
                        if transpose_b {
                            // dB = dCᵀ·A
                            mm_at(gv, av, m, bn, k, dv);
                        } else {
                            mm_at(av, gv, m, k, bn, dv);
                        }
                    }
                    self.acc(b, |s| axpy(s, &db));
                }
            }
            Op::Ew { kind, a, b } => {
                let same = self.nodes[a.0].shape == self.nodes[b.0].shape;
                match kind {
                    EwKind::Add | EwKind::Sub => {
                        let sign = if kind == EwKind::Sub { -1.0 } else { 1.0 };
                        self.acc(a, |s| axpy(s, g));
                        if self.needs(b) {
                            let mut db = vec![0.0; self.nodes[b.0].data.len()];
                            if same {
                                for (d, &gv) in db.iter_mut().zip(g) {
                                    *d += sign * gv;
                                }
                            } else {
                                let (ashape, bshape) =
                                    (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
                                broadcast_zip(&ashape, &bshape, |ai, bi| db[bi] += sign * g[ai]);
                            }
                            self.acc(b, |s| axpy(s, &db));
                        }
                    }
                    EwKind::Hadamard => {
                        if self.needs(a) {
                            let mut da = vec![0.0; self.nodes[a.0].data.len()];
                            {
                                let bd = &self.nodes[b.0].data;
                                if same {
                                    for j in 0..da.len() {
                                        da[j] = g[j] * bd[j];
                                    }
                                } else {
                                    let (ashape, bshape) = (
                                        self.nodes[a.0].shape.clone(),
                                        self.nodes[b.0].shape.clone(),
                                    );
                                    broadcast_zip(&ashape, &bshape, |ai, bi| {
                                        da[ai] = g[ai] * bd[bi]
                                    });
                                }
                            }
                            self.acc(a, |s| axpy(s, &da));
                        }
                        if self.needs(b) {
                            let mut db = vec![0.0; self.nodes[b.0].data.len()];
                            {
                                let ad = &self.nodes[a.0].data;
                                if same {
                                    for j in 0..db.len() {
                                        db[j] += g[j] * ad[j];
                                    }
                                } else {
                                    let (ashape, bshape) = (
                                        self.nodes[a.0].shape.clone(),
                                        self.nodes[b.0].shape.clone(),
                                    );
                                    broadcast_zip(&ashape, &bshape, |ai, bi| {
                                        db[bi] += g[ai] * ad[ai]
                                    });
                                }
                            }
                            self.acc(b, |s| axpy(s, &db));
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                self.acc(a, |s| {
                    for (x, &gv) in s.iter_mut().zip(g) {
                        *x += c * gv;
                    }
                });
            }
            Op::AddScalar { a } => {
                self.acc(a, |s| axpy(s, g));
            }
            Op::Unary { kind, a } => {
                let mut da = vec![0.0; g.len()];
                {
                    let xin = &self.nodes[a.0].data;
                    let yout = &self.nodes[i].data;
                    for j in 0..g.len() {
                        da[j] = g[j] * unary_bwd(kind, xin[j], yout[j]);
                    }
                }
                self.acc(a, |s| axpy(s, &da));
            }
            Op::SoftmaxLast { a } => {
                let d = *self.nodes[i].shape.last().unwrap();
                let mut da = vec![0.0; g.len()];
                {
                    let y = &self.nodes[i].data;
                    for r in 0..g.len() / d {
                        let (ys, gs) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: f64 = ys.iter().zip(gs).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..d {
                            da[r * d + j] = ys[j] * (gs[j] - dot);
                        }
                    }
                }
                self.acc(a, |s| axpy(s, &da));
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let c = *self.nodes[i].shape.last().unwrap();
                let rows = g.len() / c;
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                {
                    let xd = &self.nodes[x.0].data;
                    let gd = &self.nodes[gain.0].data;
                    for r in 0..rows {
                        let xin = &xd[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let mean = xin.iter().sum::<f64>() / c as f64;
                        let var =
                            xin.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let xhat = (xin[j] - mean) * inv;
                            let dxhat = gr[j] * gd[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            dgain[j] += gr[j] * xhat;
                            dbias[j] += gr[j];
                        }
                        let invc = 1.0 / c as f64;
                        for j in 0..c {
                            let xhat = (xin[j] - mean) * inv;
                            let dxhat = gr[j] * gd[j];
                            dx[r * c + j] =
                                inv * (dxhat - invc * sum_dxhat - xhat * invc * sum_dxhat_xhat);
                        }
                    }
                }
                self.acc(x, |s| axpy(s, &dx));
                self.acc(gain, |s| axpy(s, &dgain));
                self.acc(bias, |s| axpy(s, &dbias));
            }
            Op::MeanAxis { a, axis } | Op::SumAxis { a, axis } => {
                let is_mean = matches!(self.nodes[i].op, Op::MeanAxis { .. });
                let in_shape = self.nodes[a.0].shape.clone();
                let pre: usize = in_shape[..axis].iter().product();
                let n_axis = in_shape[axis];
                let post: usize = in_shape[axis + 1..].iter().product();
                let w = if is_mean { 1.0 / n_axis as f64 } else { 1.0 };
                let mut da = vec![0.0; numel(&in_shape)];
                for p in 0..pre {
                    for j in 0..n_axis {
                        let base = (p * n_axis + j) * post;
                        let gbase = p * post;
                        for q in 0..post {
                            da[base + q] = w * g[gbase + q];
                        }
                    }
                }
                self.acc(a, |s| axpy(s, &da));
            }
            Op::CosineLast { a, b, eps } => {
                let d = *self.nodes[a.0].shape.last().unwrap();
                let rows = g.len();
                let mut da = vec![0.0; rows * d];
                let mut db = vec![0.0; rows * d];
                {
                    let ad = &self.nodes[a.0].data;
                    let bd = &self.nodes[b.0].data;
                    for r in 0..rows {
                        let (ra, rb) = (&ad[r * d..(r + 1) * d], &bd[r * d..(r + 1) * d]);
                        let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                        let norm_a = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let norm_b = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let na = norm_a.max(eps);
                        let nb = norm_b.max(eps);
                        let raw = dot / (na * nb);
                        if raw.abs() > 1.0 {
                            continue; // clamped: flat region
                        }
                        let gv = g[r];
                        for j in 0..d {
                            let mut ga = rb[j] / (na * nb);
                            if norm_a > eps {
                                ga -= raw * ra[j] / (na * na);
                            }
                            let mut gb = ra[j] / (na * nb);
                            if norm_b > eps {
                                gb -= raw * rb[j] / (nb * nb);
                            }
                            da[r * d + j] = gv * ga;
                            db[r * d + j] = gv * gb;
                        }
                    }
                }
                self.acc(a, |s| axpy(s, &da));
                self.acc(b, |s| axpy(s, &db));
            }
            Op::L2NormLast { a, eps } => {
                let d = *self.nodes[a.0].shape.last().unwrap();
                let mut da = vec![0.0; g.len()];
                {
                    let ad = &self.nodes[a.0].data;
                    let yd = &self.nodes[i].data;
                    for r in 0..g.len() / d {
                        let ra = &ad[r * d..(r + 1) * d];
                        let ry = &yd[r * d..(r + 1) * d];
                        let rg = &g[r * d..(r + 1) * d];
                        let norm = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if norm > eps {
                            let dot: f64 = ry.iter().zip(rg).map(|(y, gv)| y * gv).sum();
                            for j in 0..d {
                                da[r * d + j] = (rg[j] - ry[j] * dot) / norm;
                            }
                        } else {
                            for j in 0..d {
                                da[r * d + j] = rg[j] / eps;
                            }
                        }
                    }
                }
                self.acc(a, |s| axpy(s, &da));
            }
            Op::DepthwiseConv { x, kernel } => {
                let shape = self.nodes[x.0].shape.clone();
                let ks = self.nodes[kernel.0].shape[1];
                let t = shape[0];
                let c = *shape.last().unwrap();
                let mid = numel(&shape) / (t * c);
                let pad = (ks - 1) / 2;
                if self.needs(x) {
                    let mut dx = vec![0.0; numel(&shape)];
                    {
                        let kd = &self.nodes[kernel.0].data;
                        for ti in 0..t {
                            for r in 0..mid {
                                let gbase = (ti * mid + r) * c;
                                for d in 0..ks {
                                    let src = ti as isize + d as isize - pad as isize;
                                    if src < 0 || src >= t as isize {
                                        continue;
                                    }
                                    let ibase = (src as usize * mid + r) * c;
                                    for ch in 0..c {
                                        dx[ibase + ch] += kd[ch * ks + d] * g[gbase + ch];
                                    }
                                }
                            }
                        }
                    }
                    self.acc(x, |s| axpy(s, &dx));
                }
                if self.needs(kernel) {
                    let mut dk = vec![0.0; c * ks];
                    {
                        let xd = &self.nodes[x.0].data;
                        for ti in 0..t {
                            for r in 0..mid {
                                let gbase = (ti * mid + r) * c;
                                for d in 0..ks {
                                    let src = ti as isize + d as isize - pad as isize;
                                    if src < 0 || src >= t as isize {
                                        continue;
                                    }
                                    let ibase = (src as usize * mid + r) * c;
                                    for ch in 0..c {
                                        dk[ch * ks + d] += g[gbase + ch] * xd[ibase + ch];
                                    }
                                }
                            }
                        }
                    }
                    self.acc(kernel, |s| axpy(s, &dk));
                }
            }
            Op::PointwiseConv { x, w } => {
                let cin = self.nodes[w.0].shape[0];
                let cout = self.nodes[w.0].shape[1];
                let positions = self.nodes[x.0].data.len() / cin;
                if self.needs(x) {
                    let mut dx = vec![0.0; positions * cin];
                    {
                        let wd = &self.nodes[w.0].data;
                        for p in 0..positions {
                            let grow = &g[p * cout..(p + 1) * cout];
                            let xrow = &mut dx[p * cin..(p + 1) * cin];
                            for ci in 0..cin {
                                let wrow = &wd[ci * cout..(ci + 1) * cout];
                                xrow[ci] = grow.iter().zip(wrow).map(|(gv, wv)| gv * wv).sum();
                            }
                        }
                    }
                    self.acc(x, |s| axpy(s, &dx));
                }
                if self.needs(w) {
                    let mut dw = vec![0.0; cin * cout];
                    {
                        let xd = &self.nodes[x.0].data;
                        for p in 0..positions {
                            let grow = &g[p * cout..(p + 1) * cout];
                            let xrow = &xd[p * cin..(p + 1) * cin];
                            for (ci, &xv) in xrow.iter().enumerate() {
                                let wrow = &mut dw[ci * cout..(ci + 1) * cout];
                                for (d, &gv) in wrow.iter_mut().zip(grow) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                    self.acc(w, |s| axpy(s, &dw));
                }
            }
            Op::Concat { parts, axis } => {
                let oshape = self.nodes[i].shape.clone();
                let pre: usize = oshape[..axis].iter().product();
                let post: usize = oshape[axis + 1..].iter().product();
                let axis_total = oshape[axis];
                let mut offset = 0;
                for &p in &parts {
                    let s_axis = self.nodes[p.0].shape[axis];
                    if self.needs(p) {
                        let mut dp = vec![0.0; self.nodes[p.0].data.len()];
                        for pi in 0..pre {
                            let src_base = (pi * axis_total + offset) * post;
                            dp[pi * s_axis * post..(pi + 1) * s_axis * post]
                                .copy_from_slice(&g[src_base..src_base + s_axis * post]);
                        }
                        self.acc(p, |s| axpy(s, &dp));
                    }
                    offset += s_axis;
                }
            }
            Op::Reshape { a } => {
                self.acc(a, |s| axpy(s, g));
            }
            Op::Permute { a, perm } => {
                // Adjoint permutes the gradient by the inverse permutation.
                let mut inv = vec![0usize; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                let oshape = self.nodes[i].shape.clone();
                let da = permute_copy(g, &oshape, &inv);
                self.acc(a, |s| axpy(s, &da));
            }
            Op::BroadcastAxis { a, axis, n } => {
                let in_shape = self.nodes[a.0].shape.clone();
                let pre: usize = in_shape[..axis].iter().product();
                let post: usize = in_shape[axis + 1..].iter().product();
                let mut da = vec![0.0; pre * post];
                for p in 0..pre {
                    for j in 0..n {
                        let base = (p * n + j) * post;
                        for q in 0..post {
                            da[p * post + q] += g[base + q];
                        }
                    }
                }
                self.acc(a, |s| axpy(s, &da));
            }
        }
    }
}

/// Exact ceiling of `rho * l` for decimal ratios, guarded against the float
/// product landing epsilon above an integer (e.g. 0.3 * 10).
pub fn ceil_ratio(rho: f64, l: usize) -> usize {
    (((rho * l as f64) - 1e-9).ceil().max(1.0) as usize).min(l)
}

fn unary_fwd(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        UnaryKind::Relu => x.max(0.0),
        // tanh-approximated GELU:
        //   gelu(x) = 0.5·x·(1 + tanh(sqrt(2/π)·(x + 0.044715·x³)))
        UnaryKind::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
        UnaryKind::Exp => x.exp(),
        UnaryKind::Ln => x.ln(),
        UnaryKind::XLogX => {
            if x > 0.0 {
                x * x.ln()
            } else {
                0.0
            }
        }
    }
}

/// sqrt(2/π)
const GELU_C: f64 = 0.797_884_560_802_865_4;

fn unary_bwd(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        }
        UnaryKind::Exp => y,
        UnaryKind::Ln => 1.0 / x,
        UnaryKind::XLogX => {
            if x > 0.0 {
                x.ln() + 1.0
            } else {
                0.0
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// out += a[m,k] · b[k,n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a[m,k] · b[n,k]ᵀ  (rows of `a` dotted with rows of `b`)
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for q in 0..n {
            let brow = &b[q * k..(q + 1) * k];
            out[i * n + q] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out += g[m,n] · b[k,n]ᵀ  — i.e. dA for C = A·B (out is [m,k])
fn mm_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out += a[m,k]ᵀ · g[m,n]  — i.e. dB for C = A·B (out is [k,n])
fn mm_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| y == x || y == 1)
}

/// Visits every flat index of `a` together with the broadcast-matched flat
/// index of `b` (odometer walk; axes where `b` has extent 1 contribute
/// stride 0).
fn broadcast_zip(a_shape: &[usize], b_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let r = a_shape.len();
    let mut b_strides = vec![0usize; r];
    let mut acc = 1;
    for d in (0..r).rev() {
        b_strides[d] = if b_shape[d] == 1 { 0 } else { acc };
        acc *= b_shape[d];
    }
    let n = numel(a_shape);
    let mut idx = vec![0usize; r];
    let mut bi = 0usize;
    for ai in 0..n {
        f(ai, bi);
        for d in (0..r).rev() {
            idx[d] += 1;
            bi += b_strides[d];
            if idx[d] < a_shape[d] {
                break;
            }
            idx[d] = 0;
            bi -= b_strides[d] * a_shape[d];
        }
    }
}

fn permute_copy(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; r];
    for d in (0..r.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    // Walk output indices in row-major order; `src` tracks the matching
    // input offset incrementally.
    let strides_for_out: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    for o in out.iter_mut() {
        *o = data[src];
        for d in (0..r).rev() {
            idx[d] += 1;
            src += strides_for_out[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            src -= strides_for_out[d] * out_shape[d];
        }
    }
    out
}
