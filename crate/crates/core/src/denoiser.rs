//! Spatio-temporal UNet `F_θ` over latent clips.
//!
//! Each resolution stage runs a factorized 3D residual block (spatial 3×3
//! convolution followed by a temporal 3-tap convolution), then per-frame
//! self-attention, cross-attention over the identity tokens and temporal
//! attention in which the tokens are appended as extra keys/values.
//!
//! Parameter names follow `stage{i}.{block}.{param}`, e.g.
//! `stage0.down.res.conv1.weight`, `stage1.up.attn.temporal.k.weight`. The
//! remaining blocks are `input.*`, `time.*`, `tokens.*`, `output.*` and
//! `null_tokens`.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::edm::{RawNetwork, Windowed};
use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_embedding, upsample2, Attention, Conv2d, GroupNorm, Init, LayerNorm, Linear, Params, ResBlock,
    TemporalConv,
};

/// Number of detailed identity tokens (a 7×7 grid).
pub const IDENTITY_TOKENS: usize = 49;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub heads: usize,
    pub d_model: usize,
    pub frames: usize,
    /// Temporal convolutions and temporal attention; off gives a frame-local net.
    pub temporal_layers: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 16,
            base_channels: 64,
            channel_mult: vec![1, 2],
            heads: 4,
            d_model: 128,
            frames: 8,
            temporal_layers: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_mult.is_empty() {
            return Err(Error::invalid("channel_mult", "needs at least one stage"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(
                "d_model",
                format!("{} not divisible by heads {}", self.d_model, self.heads),
            ));
        }
        for &m in &self.channel_mult {
            let ch = m * self.base_channels;
            if ch == 0 || ch % self.heads != 0 {
                return Err(Error::invalid(
                    "channel_mult",
                    format!("stage width {ch} not divisible by heads {}", self.heads),
                ));
            }
        }
        if self.latent_channels == 0 || self.frames == 0 {
            return Err(Error::invalid("latent_channels", "latent channels and frames must be positive"));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        self.channel_mult.iter().map(|m| m * self.base_channels).collect()
    }

    /// Spatial divisor the latent size must satisfy.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.channel_mult.len() - 1)
    }
}

/// Identity conditioning: 49 tokens per clip, or the learned null set.
#[derive(Debug, Clone)]
pub enum IdentityTokens {
    /// `[B, 49, d_model]`.
    Tokens(Tensor),
    Null,
}

/// Everything the denoiser is conditioned on besides the noisy latent.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    /// `[B, F, c, h, w]`, concatenated to the noisy latent along channels.
    pub masked_target: Tensor,
    pub identity_tokens: IdentityTokens,
    /// `[B, F, base_channels, h, w]`, added to the input activations.
    pub attribute_low: Option<Tensor>,
    /// `[B, F]` with entries in {0, 1}.
    pub frame_mask: Tensor,
}

impl ConditioningBundle {
    pub fn batch(&self) -> usize {
        self.masked_target.dims()[0]
    }

    pub fn frames(&self) -> usize {
        self.masked_target.dims()[1]
    }

    /// The same conditioning with identity tokens replaced by the null set.
    pub fn unconditional(&self) -> Self {
        Self {
            identity_tokens: IdentityTokens::Null,
            ..self.clone()
        }
    }
}

impl Windowed for ConditioningBundle {
    fn window(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            masked_target: self.masked_target.narrow(1, start, len)?,
            identity_tokens: self.identity_tokens.clone(),
            attribute_low: self
                .attribute_low
                .as_ref()
                .map(|a| a.narrow(1, start, len))
                .transpose()?,
            frame_mask: self.frame_mask.narrow(1, start, len)?,
        })
    }
}

fn check_binary(mask: &Tensor) -> Result<()> {
    let v = mask.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if v.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::invalid("frame_mask", "entries must be 0 or 1"));
    }
    Ok(())
}

struct SpatioTemporalRes {
    res: ResBlock,
    tnorm: Option<GroupNorm>,
    tconv: Option<TemporalConv>,
}

impl SpatioTemporalRes {
    fn new(p: &Params, in_ch: usize, out_ch: usize, emb: usize, temporal: bool) -> Result<Self> {
        Ok(Self {
            res: ResBlock::new(p, in_ch, out_ch, Some(emb))?,
            tnorm: temporal.then(|| GroupNorm::new(&p.pp("tnorm"), out_ch, 8)).transpose()?,
            tconv: temporal.then(|| TemporalConv::new(&p.pp("tconv"), out_ch)).transpose()?,
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor, b: usize, f: usize) -> Result<Tensor> {
        let h = self.res.forward(x, Some(emb))?;
        match (&self.tnorm, &self.tconv) {
            (Some(n), Some(t)) => {
                let (_, c, hh, ww) = h.dims4()?;
                let y = n.forward(&h)?.silu()?.reshape((b, f, c, hh, ww))?;
                Ok((&h + t.forward(&y)?.reshape((b * f, c, hh, ww))?)?)
            }
            _ => Ok(h),
        }
    }
}

struct AttnBlock {
    norm_self: LayerNorm,
    self_attn: Attention,
    norm_cross: LayerNorm,
    cross_attn: Attention,
    temporal: Option<(LayerNorm, Linear, Attention)>,
}

impl AttnBlock {
    fn new(p: &Params, ch: usize, d_model: usize, heads: usize, temporal: bool) -> Result<Self> {
        let temporal = if temporal {
            Some((
                LayerNorm::new(&p.pp("norm_temporal"), ch)?,
                Linear::new(&p.pp("token_proj"), d_model, ch)?,
                Attention::new(&p.pp("temporal"), ch, ch, heads)?,
            ))
        } else {
            None
        };
        Ok(Self {
            norm_self: LayerNorm::new(&p.pp("norm_self"), ch)?,
            self_attn: Attention::new(&p.pp("self"), ch, ch, heads)?,
            norm_cross: LayerNorm::new(&p.pp("norm_cross"), ch)?,
            cross_attn: Attention::new(&p.pp("cross"), ch, d_model, heads)?,
            temporal,
        })
    }

    /// `x`: `[B·F, C, H, W]`, `tokens`: `[B, 49, d_model]`.
    fn forward(&self, x: &Tensor, tokens: &Tensor, b: usize, f: usize) -> Result<Tensor> {
        let (bf, c, hh, ww) = x.dims4()?;
        let hw = hh * ww;
        let mut seq = x.reshape((bf, c, hw))?.transpose(1, 2)?.contiguous()?;

        let n = self.norm_self.forward(&seq)?;
        seq = (&seq + self.self_attn.forward(&n, &n)?)?;

        let (k, v) = self.cross_attn.project_kv(tokens)?;
        let per_frame = |t: Tensor| -> Result<Tensor> {
            let l = t.dim(1)?;
            Ok(t.unsqueeze(1)?.broadcast_as((b, f, l, c))?.reshape((bf, l, c))?)
        };
        let n = self.norm_cross.forward(&seq)?;
        seq = (&seq + self.cross_attn.attend(&n, &per_frame(k)?, &per_frame(v)?)?)?;

        if let Some((norm, token_proj, attn)) = &self.temporal {
            let t = seq.reshape((b, f, hw, c))?.transpose(1, 2)?.contiguous()?.reshape((b * hw, f, c))?;
            let idx = Tensor::arange(0u32, f as u32, &Device::Cpu)?.to_dtype(x.dtype())?;
            let pos = sinusoidal_embedding(&idx, c)?.unsqueeze(0)?;
            let q = norm.forward(&t)?.broadcast_add(&pos)?;
            let (kf, vf) = attn.project_kv(&q)?;
            let (kt, vt) = attn.project_kv(&token_proj.forward(tokens)?)?;
            let per_location = |t: Tensor| -> Result<Tensor> {
                let l = t.dim(1)?;
                Ok(t.unsqueeze(1)?.broadcast_as((b, hw, l, c))?.reshape((b * hw, l, c))?)
            };
            let k = Tensor::cat(&[kf, per_location(kt)?], 1)?;
            let v = Tensor::cat(&[vf, per_location(vt)?], 1)?;
            let t = (&t + attn.attend(&q, &k, &v)?)?;
            seq = t.reshape((b, hw, f, c))?.transpose(1, 2)?.contiguous()?.reshape((bf, hw, c))?;
        }
        Ok(seq.transpose(1, 2)?.contiguous()?.reshape((bf, c, hh, ww))?)
    }
}

struct Stage {
    down_res: SpatioTemporalRes,
    down_attn: AttnBlock,
    downsample: Option<Conv2d>,
    up_res: SpatioTemporalRes,
    up_attn: AttnBlock,
    upsample: Option<Conv2d>,
}

pub struct Denoiser {
    config: DenoiserConfig,
    input: Conv2d,
    time1: Linear,
    time2: Linear,
    token_norm: LayerNorm,
    stages: Vec<Stage>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    null_tokens: Tensor,
}

impl Denoiser {
    pub fn new(p: &Params, config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let base = config.base_channels;
        let emb = 2 * base;
        let t = config.temporal_layers;
        let mut stages = Vec::with_capacity(widths.len());
        for (i, &ch) in widths.iter().enumerate() {
            let sp = p.pp(format!("stage{i}"));
            let in_ch = if i == 0 { base } else { widths[i - 1] };
            let last = i + 1 == widths.len();
            stages.push(Stage {
                down_res: SpatioTemporalRes::new(&sp.pp("down.res"), in_ch, ch, emb, t)?,
                down_attn: AttnBlock::new(&sp.pp("down.attn"), ch, config.d_model, config.heads, t)?,
                downsample: (!last)
                    .then(|| Conv2d::new(&sp.pp("downsample"), ch, ch, 3, 2, 1))
                    .transpose()?,
                // input: upsampled deeper features (or the bottleneck itself) concatenated with the skip
                up_res: SpatioTemporalRes::new(&sp.pp("up.res"), 2 * ch, ch, emb, t)?,
                up_attn: AttnBlock::new(&sp.pp("up.attn"), ch, config.d_model, config.heads, t)?,
                upsample: (!last)
                    .then(|| Conv2d::new(&sp.pp("upsample"), widths[i + 1], ch, 3, 1, 1))
                    .transpose()?,
            });
        }
        Ok(Self {
            input: Conv2d::new(&p.pp("input.conv"), 2 * config.latent_channels, base, 3, 1, 1)?,
            time1: Linear::new(&p.pp("time.fc1"), base, emb)?,
            time2: Linear::new(&p.pp("time.fc2"), emb, emb)?,
            token_norm: LayerNorm::new(&p.pp("tokens.norm"), config.d_model)?,
            out_norm: GroupNorm::new(&p.pp("output.norm"), widths[0], 8)?,
            out_conv: Conv2d::new(&p.pp("output.conv"), widths[0], config.latent_channels, 3, 1, 1)?,
            null_tokens: p.get(&[IDENTITY_TOKENS, config.d_model], "null_tokens", Init::Normal(1.0))?,
            stages,
            config,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Learned unconditional token set, `[49, d_model]`.
    pub fn null_tokens(&self) -> &Tensor {
        &self.null_tokens
    }

    fn resolve_tokens(&self, tokens: &IdentityTokens, b: usize) -> Result<Tensor> {
        let d = self.config.d_model;
        match tokens {
            IdentityTokens::Null => Ok(self.null_tokens.unsqueeze(0)?.broadcast_as((b, IDENTITY_TOKENS, d))?),
            IdentityTokens::Tokens(t) => {
                let dims = t.dims();
                if dims.len() != 3 || dims[1] != IDENTITY_TOKENS {
                    return Err(Error::invalid(
                        "identity_tokens",
                        format!("expected {IDENTITY_TOKENS} tokens, got shape {dims:?}"),
                    ));
                }
                if dims != [b, IDENTITY_TOKENS, d] {
                    return Err(Error::shape("identity_tokens", [b, IDENTITY_TOKENS, d], dims));
                }
                Ok(t.clone())
            }
        }
    }

    /// `x_in`: noisy latent ⊕ masked target, `[B, F, 2c, h, w]`; `c_noise`: `[B]`.
    pub fn forward(&self, x_in: &Tensor, c_noise: &Tensor, cond: &ConditioningBundle) -> Result<Tensor> {
        let cfg = &self.config;
        let (b, f, c2, h, w) = x_in.dims5()?;
        if c2 != 2 * cfg.latent_channels {
            return Err(Error::shape("denoiser input channels", 2 * cfg.latent_channels, c2));
        }
        let div = cfg.spatial_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::invalid("latent size", format!("{h}x{w} not divisible by {div}")));
        }
        if cond.frame_mask.dims() != [b, f] {
            return Err(Error::invalid(
                "frame_mask",
                format!("expected length {f} per clip ([{b}, {f}]), got {:?}", cond.frame_mask.dims()),
            ));
        }
        check_binary(&cond.frame_mask)?;
        if c_noise.dims() != [b] {
            return Err(Error::shape("c_noise", [b], c_noise.dims()));
        }
        let tokens = self.token_norm.forward(&self.resolve_tokens(&cond.identity_tokens, b)?)?;

        let mut x = self.input.forward(&x_in.reshape((b * f, c2, h, w))?)?;
        if let Some(a) = &cond.attribute_low {
            let want = [b, f, cfg.base_channels, h, w];
            if a.dims() != want {
                return Err(Error::shape("attribute_low", want, a.dims()));
            }
            let gate = cond.frame_mask.to_dtype(a.dtype())?.reshape((b * f, 1, 1, 1))?;
            x = (x + a.reshape((b * f, cfg.base_channels, h, w))?.broadcast_mul(&gate)?)?;
        }

        let emb = sinusoidal_embedding(c_noise, cfg.base_channels)?;
        let emb = self.time2.forward(&self.time1.forward(&emb)?.silu()?)?;
        let e = emb.dim(1)?;
        let emb = emb.unsqueeze(1)?.broadcast_as((b, f, e))?.reshape((b * f, e))?;

        let mut skips = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = stage.down_res.forward(&x, &emb, b, f)?;
            x = stage.down_attn.forward(&x, &tokens, b, f)?;
            skips.push(x.clone());
            if let Some(ds) = &stage.downsample {
                x = ds.forward(&x)?;
            }
        }
        for (stage, skip) in self.stages.iter().zip(skips).rev() {
            if let Some(us) = &stage.upsample {
                x = us.forward(&upsample2(&x)?)?;
            }
            x = Tensor::cat(&[&x, &skip], 1)?;
            x = stage.up_res.forward(&x, &emb, b, f)?;
            x = stage.up_attn.forward(&x, &tokens, b, f)?;
        }
        let out = self.out_conv.forward(&self.out_norm.forward(&x)?.silu()?)?;
        Ok(out.reshape((b, f, cfg.latent_channels, h, w))?)
    }
}

impl RawNetwork for Denoiser {
    type Cond = ConditioningBundle;

    fn raw(&self, x_scaled: &Tensor, c_noise: &Tensor, cond: &ConditioningBundle) -> Result<Tensor> {
        if cond.masked_target.dims() != x_scaled.dims() {
            return Err(Error::shape("masked_target", x_scaled.dims(), cond.masked_target.dims()));
        }
        let x_in = Tensor::cat(&[x_scaled, &cond.masked_target.to_dtype(x_scaled.dtype())?], D::Minus(3))?;
        self.forward(&x_in, c_noise, cond)
    }
}
