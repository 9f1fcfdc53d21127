use candle_core::{Tensor, D};

use super::conv::conv2d;
use super::params::{Init, Params};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = p.get(&[out_dim, in_dim], "weight", Init::FanIn(in_dim))?;
        let bias = Some(p.get(&[out_dim], "bias", Init::Zeros)?);
        Ok(Self { weight, bias })
    }

    pub fn no_bias(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = p.get(&[out_dim, in_dim], "weight", Init::FanIn(in_dim))?;
        Ok(Self { weight, bias: None })
    }

    /// Linear layer whose weights start at zero (used for residual outputs).
    pub fn zeroed(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = p.get(&[out_dim, in_dim], "weight", Init::Zeros)?;
        let bias = Some(p.get(&[out_dim], "bias", Init::Zeros)?);
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        p: &Params,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = p.get(&[out_ch, in_ch, kernel, kernel], "weight", Init::FanIn(fan_in))?;
        let bias = Some(p.get(&[out_ch], "bias", Init::Zeros)?);
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn zeroed(p: &Params, in_ch: usize, out_ch: usize, kernel: usize, padding: usize) -> Result<Self> {
        let weight = p.get(&[out_ch, in_ch, kernel, kernel], "weight", Init::Zeros)?;
        let bias = Some(p.get(&[out_ch], "bias", Init::Zeros)?);
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding,
        })
    }

    /// `x`: `[N, C, H, W]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, (self.padding, self.padding))?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }
}

/// 1-D convolution along the time axis of a `[B, F, C, H, W]` tensor.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    weight: Tensor,
    bias: Tensor,
}

impl TemporalConv {
    pub fn new(p: &Params, ch: usize) -> Result<Self> {
        let weight = p.get(&[ch, ch, 3, 1], "weight", Init::FanIn(ch * 3))?;
        let bias = p.get(&[ch], "bias", Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, f, c, h, w) = x.dims5()?;
        let seq = x.reshape((b, f, c, h * w))?.transpose(1, 2)?;
        let y = conv2d(&seq, &self.weight, 1, (1, 0))?;
        let y = y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?;
        Ok(y.transpose(1, 2)?.contiguous()?.reshape((b, f, c, h, w))?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(p: &Params, channels: usize, groups: usize) -> Result<Self> {
        let groups = largest_divisor_at_most(channels, groups);
        Ok(Self {
            weight: p.get(&[channels], "weight", Init::Ones)?,
            bias: p.get(&[channels], "bias", Init::Zeros)?,
            groups,
        })
    }

    /// `x`: `[N, C, ...]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (n, c) = (dims[0], dims[1]);
        let per_group = x.elem_count() / (n * self.groups);
        let g = x.reshape((n, self.groups, per_group))?;
        let mean = g.mean_keepdim(2)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape(dims.as_slice())?;
        let mut wd = vec![1; dims.len()];
        wd[1] = c;
        Ok(normed
            .broadcast_mul(&self.weight.reshape(wd.as_slice())?)?
            .broadcast_add(&self.bias.reshape(wd.as_slice())?)?)
    }
}

fn largest_divisor_at_most(n: usize, k: usize) -> usize {
    (1..=k.min(n)).rev().find(|d| n % d == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: p.get(&[dim], "weight", Init::Ones)?,
            bias: p.get(&[dim], "bias", Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Pre-activation residual block over `[N, C, H, W]` with an optional
/// per-sample embedding added between the two convolutions.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    emb: Option<Linear>,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(p: &Params, in_ch: usize, out_ch: usize, emb_dim: Option<usize>) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&p.pp("norm1"), in_ch, 8)?,
            conv1: Conv2d::new(&p.pp("conv1"), in_ch, out_ch, 3, 1, 1)?,
            norm2: GroupNorm::new(&p.pp("norm2"), out_ch, 8)?,
            conv2: Conv2d::new(&p.pp("conv2"), out_ch, out_ch, 3, 1, 1)?,
            emb: emb_dim
                .map(|d| Linear::new(&p.pp("emb"), d, out_ch))
                .transpose()?,
            skip: if in_ch != out_ch {
                Some(Conv2d::new(&p.pp("skip"), in_ch, out_ch, 1, 1, 0)?)
            } else {
                None
            },
        })
    }

    /// `emb`: `[N, emb_dim]` when the block was built with an embedding.
    pub fn forward(&self, x: &Tensor, emb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(lin), Some(e)) = (&self.emb, emb) {
            let e = lin.forward(&e.silu()?)?;
            let (n, c) = e.dims2()?;
            h = h.broadcast_add(&e.reshape((n, c, 1, 1))?)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Sinusoidal embedding of a per-sample scalar; `t`: `[N]`.
/// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))?)
}

pub fn sinusoidal_embedding(t: &Tensor, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64).ln() * i as f64 / half as f64).exp() * 10.0)
        .collect();
    let freqs = Tensor::from_vec(freqs, (1, half), t.device())?.to_dtype(t.dtype())?;
    let args = t.unsqueeze(1)?.broadcast_mul(&freqs)?;
    Ok(Tensor::cat(&[args.sin()?, args.cos()?], 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn temporal_conv_preserves_shape() {
        let s = ParamStore::new(DType::F32, 1);
        let tc = TemporalConv::new(&s.root(), 4).unwrap();
        let x = Tensor::ones((2, 5, 4, 3, 3), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(tc.forward(&x).unwrap().dims(), &[2, 5, 4, 3, 3]);
    }

    #[test]
    fn group_norm_falls_back_to_divisor() {
        assert_eq!(largest_divisor_at_most(12, 8), 6);
        assert_eq!(largest_divisor_at_most(7, 8), 7);
    }
}
