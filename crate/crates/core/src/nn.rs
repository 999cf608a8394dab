//! Shared network building blocks.
//!
//! Each block registers named parameters in a [`ParamStore`] at construction
//! and replays pure forward functions over a [`Tape`]. Parameter values
//! depend only on `(seed, name)`, so two models built with the same seed
//! share values for every name they have in common.

use crate::tensor::{Init, ParamId, ParamStore, Result, Tape, TensorError, Var};

/// Affine map over the last axis: `y = x·W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        seed: u64,
        frozen: bool,
    ) -> Result<Self> {
        Self::with_init(
            store,
            name,
            in_dim,
            out_dim,
            Init::UniformFanIn(in_dim),
            seed,
            frozen,
        )
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        w_init: Init,
        seed: u64,
        frozen: bool,
    ) -> Result<Self> {
        let w = store.add_seeded(
            &format!("{name}.w"),
            vec![in_dim, out_dim],
            w_init,
            seed,
            frozen,
        )?;
        let b = store.add_seeded(&format!("{name}.b"), vec![out_dim], Init::Zeros, seed, frozen)?;
        Ok(Linear {
            w,
            b: Some(b),
            out_dim,
        })
    }

    /// Projection without bias (prototype maps, cross-modal projections).
    pub fn no_bias(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        seed: u64,
        frozen: bool,
    ) -> Result<Self> {
        let w = store.add_seeded(
            &format!("{name}.w"),
            vec![in_dim, out_dim],
            Init::UniformFanIn(in_dim),
            seed,
            frozen,
        )?;
        Ok(Linear {
            w,
            b: None,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(self.w, store);
        let y = tape.matmul(x, w)?;
        match self.b {
            None => Ok(y),
            Some(b) => {
                let bv = tape.param(b, store);
                let rank = tape.shape(y).len();
                let mut bshape = vec![1; rank];
                bshape[rank - 1] = self.out_dim;
                let bb = tape.reshape(bv, bshape)?;
                tape.add(y, bb)
            }
        }
    }
}

/// Layer normalization with learned affine parameters.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        seed: u64,
        frozen: bool,
    ) -> Result<Self> {
        let gain = store.add_seeded(&format!("{name}.gain"), vec![dim], Init::Ones, seed, frozen)?;
        let bias = store.add_seeded(&format!("{name}.bias"), vec![dim], Init::Zeros, seed, frozen)?;
        Ok(Norm {
            gain,
            bias,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(self.gain, store);
        let b = tape.param(self.bias, store);
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// Multi-head attention over the last two axes `[..., N, C]`.
///
/// Self-attention and cross-attention share the projection layout; cross
/// attention takes queries from one stream and keys/values from another.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        seed: u64,
        frozen: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, seed, frozen)?,
            // No key bias: a uniform key offset shifts every score in a row
            // by the same amount and cancels in the softmax.
            wk: Linear::no_bias(store, &format!("{name}.wk"), dim, dim, seed, frozen)?,
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, seed, frozen)?,
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, seed, frozen)?,
            heads,
            dim,
        })
    }

    /// Splits `[..., N, C]` into `[..., h, N, C/h]`.
    fn split_heads(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let r = shape.len();
        let dh = self.dim / self.heads;
        let mut with_heads = shape[..r - 1].to_vec();
        with_heads.extend([self.heads, dh]);
        let y = tape.reshape(x, with_heads)?;
        // [..., N, h, dh] → [..., h, N, dh]
        let rr = r + 1;
        let mut perm: Vec<usize> = (0..rr).collect();
        perm.swap(rr - 3, rr - 2);
        tape.permute(y, perm)
    }

    fn merge_heads(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let rr = shape.len();
        let mut perm: Vec<usize> = (0..rr).collect();
        perm.swap(rr - 3, rr - 2);
        let y = tape.permute(x, perm)?;
        let yshape = tape.shape(y).to_vec();
        let mut merged = yshape[..rr - 2].to_vec();
        merged.push(self.dim);
        tape.reshape(y, merged)
    }

    /// Scaled dot-product attention with queries from `q_src` and keys and
    /// values from `kv_src`.
    pub fn forward_cross(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_src: Var,
        kv_src: Var,
    ) -> Result<Var> {
        let q = self.wq.forward(tape, store, q_src)?;
        let k = self.wk.forward(tape, store, kv_src)?;
        let v = self.wv.forward(tape, store, kv_src)?;
        let qh = self.split_heads(tape, q)?;
        let kh = self.split_heads(tape, k)?;
        let vh = self.split_heads(tape, v)?;
        let dh = self.dim / self.heads;
        let scores = tape.bmm(qh, kh, true)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_lastdim(scaled)?;
        let ctx = tape.bmm(attn, vh, false)?;
        let merged = self.merge_heads(tape, ctx)?;
        self.wo.forward(tape, store, merged)
    }

    pub fn forward_self(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward_cross(tape, store, x, x)
    }
}

/// Two-layer projection with a GELU between: `linear → GELU → linear`.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub down: Linear,
    pub up: Linear,
}

impl Bottleneck {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        up_init: Init,
        seed: u64,
        frozen: bool,
    ) -> Result<Self> {
        Ok(Bottleneck {
            down: Linear::new(store, &format!("{name}.down"), in_dim, hidden, seed, frozen)?,
            up: Linear::with_init(
                store,
                &format!("{name}.up"),
                hidden,
                out_dim,
                up_init,
                seed,
                frozen,
            )?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.down.forward(tape, store, x)?;
        let a = tape.gelu(h);
        self.up.forward(tape, store, a)
    }
}
