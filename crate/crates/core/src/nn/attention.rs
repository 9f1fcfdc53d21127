use candle_core::{Tensor, D};

use super::layers::Linear;
use super::params::Params;
use crate::error::{Error, Result};

/// Softmax over the last axis, built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Multi-head scaled dot-product attention with separate query and context widths.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new(p: &Params, dim: usize, ctx_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid("heads", format!("{dim} not divisible by {heads}")));
        }
        Ok(Self {
            q: Linear::no_bias(&p.pp("q"), dim, dim)?,
            k: Linear::no_bias(&p.pp("k"), ctx_dim, dim)?,
            v: Linear::no_bias(&p.pp("v"), ctx_dim, dim)?,
            out: Linear::new(&p.pp("out"), dim, dim)?,
            heads,
            dim,
        })
    }

    /// `x`: `[N, Lq, dim]`, `ctx`: `[N, Lk, ctx_dim]` → `[N, Lq, dim]`.
    pub fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let (k, v) = self.project_kv(ctx)?;
        self.attend(x, &k, &v)
    }

    /// Key/value projections `[N, Lk, dim]` each, reusable across queries.
    pub fn project_kv(&self, ctx: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.k.forward(ctx)?, self.v.forward(ctx)?))
    }

    /// Attention of `x` over already-projected keys and values.
    pub fn attend(&self, x: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (n, lq, _) = x.dims3()?;
        let lk = k.dim(1)?;
        let hd = self.dim / self.heads;
        let split = |t: Tensor, l: usize| -> Result<Tensor> {
            Ok(t.reshape((n, l, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()?
                .reshape((n * self.heads, l, hd))?)
        };
        let q = split(self.q.forward(x)?, lq)?;
        let k = split(k.clone(), lk)?;
        let v = split(v.clone(), lk)?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let y = attn
            .matmul(&v)?
            .reshape((n, self.heads, lq, hd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, lq, self.dim))?;
        self.out.forward(&y)
    }
}
