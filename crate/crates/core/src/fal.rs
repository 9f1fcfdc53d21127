//! Attribute encoder `E_attr`, identity-fusing decoder `Dec`, discriminator
//! `Dis`, and the attribute/reconstruction/identity/adversarial losses.
//!
//! All networks act per frame on `[B, F, C, h, w]` tensors. Parameters live
//! under `fal.encoder.*`, `fal.decoder.*` and `fal.discriminator.*`.

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{upsample2, Attention, Conv2d, GroupNorm, LayerNorm, Linear, Params, ResBlock};
use crate::tensor::{cosine, randn, to_f64_vec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FalLossWeights {
    pub lambda_attr: f64,
    pub lambda_rec: f64,
    pub lambda_tid: f64,
    pub margin: f64,
}

impl Default for FalLossWeights {
    fn default() -> Self {
        Self {
            lambda_attr: 10.0,
            lambda_rec: 10.0,
            lambda_tid: 1.0,
            margin: 0.4,
        }
    }
}

impl FalLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_attr", self.lambda_attr),
            ("lambda_rec", self.lambda_rec),
            ("lambda_tid", self.lambda_tid),
            ("margin", self.margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("fal weights", format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// `adv + λ_attr·attr + λ_tid·tid + λ_rec·rec` on plain numbers.
    pub fn combine(&self, p: &FalParts<f64>) -> f64 {
        p.adv + self.lambda_attr * p.attr + self.lambda_tid * p.tid + self.lambda_rec * p.rec
    }
}

/// The four FAL loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FalParts<T> {
    pub adv: T,
    pub attr: T,
    pub tid: T,
    pub rec: T,
}

/// Weighted FAL total; the adversarial term is unweighted.
pub fn fal_total_loss(parts: &FalParts<Tensor>, weights: &FalLossWeights) -> Result<Tensor> {
    let t = (&parts.adv + (&parts.attr * weights.lambda_attr)?)?;
    let t = (t + (&parts.tid * weights.lambda_tid)?)?;
    Ok((t + (&parts.rec * weights.lambda_rec)?)?)
}

/// Where the FAL networks operate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FalSpace {
    Latent,
    /// Space-to-depth packed pixels at latent resolution (ablation).
    Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FalConfig {
    /// Channels of the tensors the networks read and write.
    pub input_channels: usize,
    pub widths: [usize; 3],
    pub heads: usize,
    /// Width of `f_low`, the denoiser's base channels.
    pub low_channels: usize,
    pub id_dim: usize,
    /// Number of tokens `f_rid` is projected to for cross-attention.
    pub rid_tokens: usize,
    pub space: FalSpace,
}

impl Default for FalConfig {
    fn default() -> Self {
        Self {
            input_channels: 16,
            widths: [32, 48, 64],
            heads: 4,
            low_channels: 64,
            id_dim: 128,
            rid_tokens: 4,
            space: FalSpace::Latent,
        }
    }
}

impl FalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0 || self.heads == 0 || w % self.heads != 0) {
            return Err(Error::invalid("fal.widths", format!("{:?} must be divisible by heads {}", self.widths, self.heads)));
        }
        if self.input_channels == 0 || self.low_channels == 0 || self.id_dim == 0 || self.rid_tokens == 0 {
            return Err(Error::invalid("fal", "channel counts must be positive"));
        }
        Ok(())
    }
}

/// High-level features `f_attr` (layer 3) and low-level injection features `f_low` (layer 1).
#[derive(Debug, Clone)]
pub struct AttributeBundle {
    /// `[B, F, w3, h/4, w/4]`.
    pub f_attr: Tensor,
    /// `[B, F, low_channels, h, w]`.
    pub f_low: Tensor,
}

fn to_frames(x: &Tensor) -> Result<(Tensor, usize, usize)> {
    let (b, f, c, h, w) = x.dims5()?;
    Ok((x.reshape((b * f, c, h, w))?, b, f))
}

fn from_frames(x: &Tensor, b: usize, f: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, f, c, h, w))?)
}

fn spatial_attention(norm: &LayerNorm, attn: &Attention, x: &Tensor, ctx: Option<&Tensor>) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let seq = x.reshape((n, c, h * w))?.transpose(1, 2)?.contiguous()?;
    let q = norm.forward(&seq)?;
    let out = match ctx {
        Some(ctx) => attn.forward(&q, ctx)?,
        None => attn.forward(&q, &q)?,
    };
    Ok((seq + out)?.transpose(1, 2)?.contiguous()?.reshape((n, c, h, w))?)
}

/// Two residual blocks interleaved with two self-attentions, optionally after a stride-2 downsample.
struct EncoderLayer {
    down: Option<Conv2d>,
    res: Vec<ResBlock>,
    norms: Vec<LayerNorm>,
    attn: Vec<Attention>,
}

impl EncoderLayer {
    fn new(p: &Params, in_ch: usize, ch: usize, heads: usize, downsample: bool) -> Result<Self> {
        let down = downsample.then(|| Conv2d::new(&p.pp("down"), in_ch, ch, 3, 2, 1)).transpose()?;
        let first_in = if downsample { ch } else { in_ch };
        Ok(Self {
            down,
            res: (0..2)
                .map(|i| ResBlock::new(&p.pp(format!("res{i}")), if i == 0 { first_in } else { ch }, ch, None))
                .collect::<Result<_>>()?,
            norms: (0..2).map(|i| LayerNorm::new(&p.pp(format!("norm{i}")), ch)).collect::<Result<_>>()?,
            attn: (0..2)
                .map(|i| Attention::new(&p.pp(format!("attn{i}")), ch, ch, heads))
                .collect::<Result<_>>()?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = match &self.down {
            Some(d) => d.forward(x)?,
            None => x.clone(),
        };
        for i in 0..2 {
            x = self.res[i].forward(&x, None)?;
            x = spatial_attention(&self.norms[i], &self.attn[i], &x, None)?;
        }
        Ok(x)
    }
}

/// Shared trunk of the encoder and the discriminator.
struct Trunk {
    input: Conv2d,
    layers: Vec<EncoderLayer>,
}

impl Trunk {
    fn new(p: &Params, cfg: &FalConfig) -> Result<Self> {
        let [w1, w2, w3] = cfg.widths;
        Ok(Self {
            input: Conv2d::new(&p.pp("input"), cfg.input_channels, w1, 3, 1, 1)?,
            layers: vec![
                EncoderLayer::new(&p.pp("layer1"), w1, w1, cfg.heads, false)?,
                EncoderLayer::new(&p.pp("layer2"), w1, w2, cfg.heads, true)?,
                EncoderLayer::new(&p.pp("layer3"), w2, w3, cfg.heads, true)?,
            ],
        })
    }

    /// Returns (layer-1 output, layer-3 output) on per-frame tensors.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let l1 = self.layers[0].forward(&self.input.forward(x)?)?;
        let l2 = self.layers[1].forward(&l1)?;
        let l3 = self.layers[2].forward(&l2)?;
        Ok((l1, l3))
    }
}

fn check_input(cfg: &FalConfig, x: &Tensor, what: &str) -> Result<()> {
    let dims = x.dims();
    if dims.len() != 5 || dims[2] != cfg.input_channels || dims[3] % 4 != 0 || dims[4] % 4 != 0 {
        return Err(Error::invalid(
            "fal input",
            format!(
                "{what}: expected [B, F, {}, h, w] with h, w divisible by 4, got {dims:?}",
                cfg.input_channels
            ),
        ));
    }
    Ok(())
}

pub struct AttributeEncoder {
    config: FalConfig,
    trunk: Trunk,
    low: Conv2d,
}

impl AttributeEncoder {
    pub fn new(p: &Params, config: FalConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            trunk: Trunk::new(p, &config)?,
            low: Conv2d::new(&p.pp("low"), config.widths[0], config.low_channels, 1, 1, 0)?,
            config,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<AttributeBundle> {
        check_input(&self.config, x, "encode_attributes")?;
        let (frames, b, f) = to_frames(x)?;
        let (l1, l3) = self.trunk.forward(&frames)?;
        Ok(AttributeBundle {
            f_attr: from_frames(&l3, b, f)?,
            f_low: from_frames(&self.low.forward(&l1)?, b, f)?,
        })
    }
}

struct DecoderLayer {
    res0: ResBlock,
    cross: Option<(LayerNorm, Attention)>,
    res1: ResBlock,
}

impl DecoderLayer {
    fn new(p: &Params, ch: usize, ctx: Option<usize>, heads: usize) -> Result<Self> {
        Ok(Self {
            res0: ResBlock::new(&p.pp("res0"), ch, ch, None)?,
            cross: ctx
                .map(|c| -> Result<_> {
                    Ok((LayerNorm::new(&p.pp("norm"), ch)?, Attention::new(&p.pp("cross"), ch, c, heads)?))
                })
                .transpose()?,
            res1: ResBlock::new(&p.pp("res1"), ch, ch, None)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let mut x = self.res0.forward(x, None)?;
        if let Some((norm, attn)) = &self.cross {
            x = spatial_attention(norm, attn, &x, Some(ctx))?;
        }
        self.res1.forward(&x, None)
    }
}

/// Three layers upsampling `f_attr` back to the input resolution; the first
/// two fuse `f_rid` through cross-attention.
pub struct AttributeDecoder {
    config: FalConfig,
    rid_proj: Linear,
    layers: Vec<DecoderLayer>,
    up: Vec<Conv2d>,
    out_norm: GroupNorm,
    out: Conv2d,
}

impl AttributeDecoder {
    pub fn new(p: &Params, config: FalConfig) -> Result<Self> {
        config.validate()?;
        let [w1, w2, w3] = config.widths;
        Ok(Self {
            rid_proj: Linear::new(&p.pp("rid_proj"), config.id_dim, config.rid_tokens * w3)?,
            layers: vec![
                DecoderLayer::new(&p.pp("layer1"), w3, Some(w3), config.heads)?,
                DecoderLayer::new(&p.pp("layer2"), w2, Some(w3), config.heads)?,
                DecoderLayer::new(&p.pp("layer3"), w1, None, config.heads)?,
            ],
            up: vec![
                Conv2d::new(&p.pp("up1"), w3, w2, 3, 1, 1)?,
                Conv2d::new(&p.pp("up2"), w2, w1, 3, 1, 1)?,
            ],
            out_norm: GroupNorm::new(&p.pp("out_norm"), w1, 8)?,
            out: Conv2d::new(&p.pp("out"), w1, config.input_channels, 3, 1, 1)?,
            config,
        })
    }

    /// `f_attr`: `[B, F, w3, h/4, w/4]`, `f_rid`: unit-norm `[B, id_dim]` → `[B, F, C, h, w]`.
    pub fn forward(&self, f_attr: &Tensor, f_rid: &Tensor) -> Result<Tensor> {
        let (frames, b, f) = to_frames(f_attr)?;
        if f_rid.dims() != [b, self.config.id_dim] {
            return Err(Error::shape("f_rid", [b, self.config.id_dim], f_rid.dims()));
        }
        for (i, n) in to_f64_vec(&f_rid.sqr()?.sum(1)?)?.into_iter().enumerate() {
            if (n.sqrt() - 1.0).abs() > 1e-3 {
                return Err(Error::invalid("f_rid", format!("row {i} has norm {:.6}, expected 1", n.sqrt())));
            }
        }
        let w3 = self.config.widths[2];
        let ctx = self
            .rid_proj
            .forward(&f_rid.to_dtype(f_attr.dtype())?)?
            .reshape((b, self.config.rid_tokens, w3))?;
        let ctx = ctx
            .unsqueeze(1)?
            .broadcast_as((b, f, self.config.rid_tokens, w3))?
            .reshape((b * f, self.config.rid_tokens, w3))?;
        let mut x = self.layers[0].forward(&frames, &ctx)?;
        x = self.up[0].forward(&upsample2(&x)?)?;
        x = self.layers[1].forward(&x, &ctx)?;
        x = self.up[1].forward(&upsample2(&x)?)?;
        x = self.layers[2].forward(&x, &ctx)?;
        let out = self.out.forward(&self.out_norm.forward(&x)?.silu()?)?;
        from_frames(&out, b, f)
    }
}

/// Anything producing 2-channel per-frame logits `[B, F, 2]`.
pub trait Critic {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

/// Encoder trunk plus a 1×1 convolution to 2 channels, averaged spatially.
pub struct Discriminator {
    config: FalConfig,
    trunk: Trunk,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(p: &Params, config: FalConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            trunk: Trunk::new(p, &config)?,
            head: Conv2d::new(&p.pp("head"), config.widths[2], 2, 1, 1, 0)?,
            config,
        })
    }
}

impl Critic for Discriminator {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        check_input(&self.config, x, "discriminator")?;
        let (frames, b, f) = to_frames(x)?;
        let (_, l3) = self.trunk.forward(&frames)?;
        let s = self.head.forward(&l3)?.mean(3)?.mean(2)?;
        Ok(s.reshape((b, f, 2))?)
    }
}

/// The three FAL networks under one `fal.*` prefix.
pub struct Fal {
    pub encoder: AttributeEncoder,
    pub decoder: AttributeDecoder,
    pub discriminator: Discriminator,
}

impl Fal {
    /// `p` is the root; networks are created under `fal.encoder`, `fal.decoder`, `fal.discriminator`.
    pub fn new(p: &Params, config: FalConfig) -> Result<Self> {
        let p = p.pp("fal");
        Ok(Self {
            encoder: AttributeEncoder::new(&p.pp("encoder"), config.clone())?,
            decoder: AttributeDecoder::new(&p.pp("decoder"), config.clone())?,
            discriminator: Discriminator::new(&p.pp("discriminator"), config)?,
        })
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, a.dims(), b.dims()));
    }
    Ok(())
}

/// `½·mean((f_attr − f'_attr)²)`.
pub fn attr_consistency_loss(f_attr: &Tensor, f_attr_prime: &Tensor) -> Result<Tensor> {
    check_same_shape("attr_consistency_loss", f_attr, f_attr_prime)?;
    Ok(((f_attr - f_attr_prime)?.sqr()?.mean_all()? * 0.5)?)
}

/// `½·mean((V' − V)²)` when the identity was kept, else exactly 0.
pub fn reconstruction_loss(v_prime: &Tensor, v: &Tensor, same_identity: bool) -> Result<Tensor> {
    check_same_shape("reconstruction_loss", v_prime, v)?;
    if !same_identity {
        return Ok(Tensor::zeros((), v.dtype(), v.device())?);
    }
    Ok(((v_prime - v)?.sqr()?.mean_all()? * 0.5)?)
}

/// Per-row `max(cos(f', f_gid) − cos(f', f_rid) + m, 0)` averaged over rows of `[N, D]` inputs.
pub fn triplet_identity_loss(f_gid_prime: &Tensor, f_gid: &Tensor, f_rid: &Tensor, margin: f64) -> Result<Tensor> {
    check_same_shape("triplet_identity_loss", f_gid_prime, f_gid)?;
    check_same_shape("triplet_identity_loss", f_gid_prime, f_rid)?;
    for (name, t) in [("f_gid_prime", f_gid_prime), ("f_gid", f_gid), ("f_rid", f_rid)] {
        if to_f64_vec(&t.sqr()?.sum(D::Minus1)?)?.iter().any(|&n| n == 0.0) {
            return Err(Error::invalid("triplet_identity_loss", format!("{name} contains a zero vector")));
        }
    }
    let d = ((cosine(f_gid_prime, f_gid)? - cosine(f_gid_prime, f_rid)?)? + margin)?;
    Ok(d.relu()?.mean_all()?)
}

/// `ln(1 + eˣ)`, computed stably.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + ((x.abs()?.neg()?.exp()? + 1.0)?.log()?))?)
}

/// Picks channel 1 for cross-identity clips and channel 0 otherwise: `[B, F, 2]` → `[B, F]`.
pub fn select_head(logits: &Tensor, cross_identity: &[bool]) -> Result<Tensor> {
    let (b, f, two) = logits.dims3()?;
    if two != 2 || cross_identity.len() != b {
        return Err(Error::shape("select_head", [b, f, 2], [cross_identity.len(), f, two]));
    }
    let idx: Vec<u32> = cross_identity.iter().flat_map(|&c| std::iter::repeat(c as u32).take(f)).collect();
    let idx = Tensor::from_vec(idx, (b, f, 1), logits.device())?;
    Ok(logits.contiguous()?.gather(&idx, 2)?.squeeze(2)?)
}

/// Non-saturating generator loss `mean softplus(−D(fake))`.
pub fn generator_adv_loss(fake_logits: &Tensor, cross_identity: &[bool]) -> Result<Tensor> {
    Ok(softplus(&select_head(fake_logits, cross_identity)?.neg()?)?.mean_all()?)
}

/// `mean softplus(−D(real)) + mean softplus(D(fake))`.
pub fn discriminator_adv_loss(real_logits: &Tensor, fake_logits: &Tensor, cross_identity: &[bool]) -> Result<Tensor> {
    check_same_shape("discriminator_adv_loss", real_logits, fake_logits)?;
    let r = softplus(&select_head(real_logits, cross_identity)?.neg()?)?.mean_all()?;
    let f = softplus(&select_head(fake_logits, cross_identity)?)?.mean_all()?;
    Ok((r + f)?)
}

/// R1 penalty `½·mean‖∇ₓD(x)‖²` over frames, estimated with central differences
/// along random directions `v ~ N(0, I)`: `E[(∇D·v)²] = ‖∇D‖²`. The estimate is
/// differentiable with respect to the critic's parameters.
pub fn r1_penalty<C: Critic, R: Rng>(
    critic: &C,
    real: &Tensor,
    cross_identity: &[bool],
    directions: usize,
    step: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let dirs = (0..directions.max(1))
        .map(|_| randn(rng, real.dims(), real.dtype()))
        .collect::<Result<Vec<_>>>()?;
    r1_penalty_along(critic, real, cross_identity, &dirs, step)
}

/// [`r1_penalty`] with explicit directions.
pub fn r1_penalty_along<C: Critic>(
    critic: &C,
    real: &Tensor,
    cross_identity: &[bool],
    directions: &[Tensor],
    step: f64,
) -> Result<Tensor> {
    if directions.is_empty() {
        return Err(Error::Empty("r1 directions"));
    }
    let real = real.detach();
    let mut total: Option<Tensor> = None;
    for v in directions {
        check_same_shape("r1_penalty", &real, v)?;
        let plus = select_head(&critic.logits(&(&real + (v * step)?)?)?, cross_identity)?;
        let minus = select_head(&critic.logits(&(&real - (v * step)?)?)?, cross_identity)?;
        let dd = ((plus - minus)? / (2.0 * step))?.sqr()?.mean_all()?;
        total = Some(match total {
            None => dd,
            Some(t) => (t + dd)?,
        });
    }
    Ok((total.expect("non-empty") * (0.5 / directions.len() as f64))?)
}

/// Exact `½·mean‖∇ₓD(x)‖²` via backprop to the input; detached, for monitoring and tests.
pub fn r1_penalty_exact<C: Critic>(critic: &C, real: &Tensor, cross_identity: &[bool]) -> Result<f64> {
    let x = candle_core::Var::from_tensor(&real.detach())?;
    let s = select_head(&critic.logits(x.as_tensor())?, cross_identity)?;
    let (b, f) = s.dims2()?;
    let grads = s.sum_all()?.backward()?;
    let g = grads
        .get(x.as_tensor())
        .ok_or_else(|| Error::invalid("r1_penalty_exact", "critic output does not depend on its input"))?;
    let sq = crate::tensor::scalar(&g.sqr()?.sum_all()?)?;
    Ok(0.5 * sq / (b * f) as f64)
}

/// Generator-side and discriminator-side adversarial terms plus the R1 penalty.
#[derive(Debug, Clone)]
pub struct AdversarialLosses {
    /// Depends on the critic and on `fake` (with gradients).
    pub g_loss: Tensor,
    /// Uses `fake.detach()`, so only critic parameters receive gradients.
    pub d_loss: Tensor,
    pub r1_penalty: Tensor,
}

pub fn adversarial_losses<C: Critic, R: Rng>(
    critic: &C,
    real: &Tensor,
    fake: &Tensor,
    cross_identity: &[bool],
    r1_directions: usize,
    r1_step: f64,
    rng: &mut R,
) -> Result<AdversarialLosses> {
    check_same_shape("adversarial_losses", real, fake)?;
    let g_loss = generator_adv_loss(&critic.logits(fake)?, cross_identity)?;
    let d_loss = discriminator_adv_loss(&critic.logits(&real.detach())?, &critic.logits(&fake.detach())?, cross_identity)?;
    let r1 = r1_penalty(critic, real, cross_identity, r1_directions, r1_step, rng)?;
    Ok(AdversarialLosses {
        g_loss,
        d_loss,
        r1_penalty: r1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::nn::ParamStore;
    use crate::tensor::{bit_equal, scalar};
    use candle_core::{DType, Device, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> FalConfig {
        FalConfig {
            input_channels: 4,
            widths: [8, 8, 8],
            heads: 2,
            low_channels: 6,
            id_dim: 5,
            rid_tokens: 2,
            space: FalSpace::Latent,
        }
    }

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        crate::tensor::l2_normalize(&randn(rng, &[n, d], DType::F32).unwrap()).unwrap()
    }

    #[test]
    fn network_shapes_and_determinism() {
        let store = ParamStore::new(DType::F32, 1);
        let fal = Fal::new(&store.root(), small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, &[2, 3, 4, 8, 8], DType::F32).unwrap();
        let a = fal.encoder.forward(&x).unwrap();
        assert_eq!(a.f_attr.dims(), &[2, 3, 8, 2, 2]);
        assert_eq!(a.f_low.dims(), &[2, 3, 6, 8, 8]);
        let b = fal.encoder.forward(&x).unwrap();
        assert!(bit_equal(&a.f_attr, &b.f_attr).unwrap());
        let rid = unit_rows(&mut rng, 2, 5);
        let v = fal.decoder.forward(&a.f_attr, &rid).unwrap();
        assert_eq!(v.dims(), x.dims());
        assert!(bit_equal(&v, &fal.decoder.forward(&a.f_attr, &rid).unwrap()).unwrap());
        assert_eq!(fal.discriminator.logits(&x).unwrap().dims(), &[2, 3, 2]);
        assert!(store.vars().iter().all(|(n, _)| n.starts_with("fal.encoder.")
            || n.starts_with("fal.decoder.")
            || n.starts_with("fal.discriminator.")));
        let bad = randn(&mut rng, &[2, 3, 4, 6, 8], DType::F32).unwrap();
        assert!(fal.encoder.forward(&bad).is_err());
        let not_unit = (rid * 2.0).unwrap();
        assert!(fal.decoder.forward(&a.f_attr, &not_unit).is_err());
    }

    #[test]
    fn decoder_depends_on_identity() {
        let store = ParamStore::new(DType::F32, 3);
        let fal = Fal::new(&store.root(), small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[1, 2, 4, 8, 8], DType::F32).unwrap();
        let a = fal.encoder.forward(&x).unwrap();
        let v1 = fal.decoder.forward(&a.f_attr, &unit_rows(&mut rng, 1, 5)).unwrap();
        let v2 = fal.decoder.forward(&a.f_attr, &unit_rows(&mut rng, 1, 5)).unwrap();
        assert!(crate::tensor::mean_abs_diff(&v1, &v2).unwrap() > 0.0);
    }

    #[test]
    fn loss_arithmetic() {
        let d = Device::Cpu;
        let f = Tensor::new(&[[1.0f64, -2.0], [0.5, 3.0]], &d).unwrap();
        assert_eq!(scalar(&attr_consistency_loss(&f, &f).unwrap()).unwrap(), 0.0);
        assert_eq!(scalar(&attr_consistency_loss(&f, &(&f + 2.0).unwrap()).unwrap()).unwrap(), 2.0);
        assert_eq!(scalar(&reconstruction_loss(&(&f + 5.0).unwrap(), &f, false).unwrap()).unwrap(), 0.0);
        assert_eq!(scalar(&reconstruction_loss(&f, &f, true).unwrap()).unwrap(), 0.0);
        assert_eq!(scalar(&reconstruction_loss(&(&f + 1.0).unwrap(), &f, true).unwrap()).unwrap(), 0.5);
        let other = Tensor::new(&[1.0f64, 2.0, 3.0], &d).unwrap();
        assert!(attr_consistency_loss(&f, &other).is_err());
        assert!(reconstruction_loss(&f, &other, true).is_err());
    }

    #[test]
    fn triplet_cases() {
        let d = Device::Cpu;
        let v = |x: [f64; 2]| Tensor::new(&[x], &d).unwrap();
        let l = |a, b, c| scalar(&triplet_identity_loss(&a, &b, &c, 0.4).unwrap()).unwrap();
        assert!((l(v([1.0, 0.0]), v([3.0, 0.0]), v([0.0, 2.0])) - 1.4).abs() < 1e-12);
        // cos = 0.2 and 0.9 against the unit x-axis
        let at = |c: f64| v([c, (1.0 - c * c).sqrt()]);
        assert_eq!(l(v([1.0, 0.0]), at(0.2), at(0.9)), 0.0);
        assert!((l(v([1.0, 0.0]), at(0.5), at(0.5)) - 0.4).abs() < 1e-12);
        assert!(triplet_identity_loss(&v([0.0, 0.0]), &v([1.0, 0.0]), &v([0.0, 1.0]), 0.4).is_err());
    }

    #[test]
    fn triplet_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = randn(&mut rng, &[3, 6], DType::F64).unwrap();
            let b = randn(&mut rng, &[3, 6], DType::F64).unwrap();
            let c = randn(&mut rng, &[3, 6], DType::F64).unwrap();
            let base = scalar(&triplet_identity_loss(&a, &b, &c, 0.4).unwrap()).unwrap();
            let s: [f64; 3] = [rng.gen_range(0.01..100.0), rng.gen_range(0.01..100.0), rng.gen_range(0.01..100.0)];
            let scaled = triplet_identity_loss(&(a * s[0]).unwrap(), &(b * s[1]).unwrap(), &(c * s[2]).unwrap(), 0.4).unwrap();
            assert!((scalar(&scaled).unwrap() - base).abs() < 1e-12);
            assert!(base >= 0.0);
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let p = FalParts {
            adv: 1.0,
            attr: 0.1,
            tid: 0.2,
            rec: 0.3,
        };
        let w = FalLossWeights::default();
        assert!((w.combine(&p) - 5.2).abs() < 1e-12);
        let zero = FalLossWeights {
            lambda_attr: 0.0,
            lambda_rec: 0.0,
            lambda_tid: 0.0,
            margin: 0.4,
        };
        assert_eq!(zero.combine(&p), 1.0);
        let t = |x: f64| Tensor::new(x, &Device::Cpu).unwrap();
        let tp = FalParts {
            adv: t(1.0),
            attr: t(0.1),
            tid: t(0.2),
            rec: t(0.3),
        };
        assert!((scalar(&fal_total_loss(&tp, &w).unwrap()).unwrap() - 5.2).abs() < 1e-12);
        let z = FalParts {
            adv: t(0.0),
            attr: t(0.0),
            tid: t(0.0),
            rec: t(0.0),
        };
        assert_eq!(scalar(&fal_total_loss(&z, &w).unwrap()).unwrap(), 0.0);
    }

    struct Zero;
    impl Critic for Zero {
        fn logits(&self, x: &Tensor) -> Result<Tensor> {
            let (b, f, _, _, _) = x.dims5()?;
            Ok(Tensor::zeros((b, f, 2), x.dtype(), x.device())?)
        }
    }

    #[test]
    fn zero_critic_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[2, 2, 1, 4, 4], DType::F64).unwrap();
        let l = adversarial_losses(&Zero, &x, &x, &[false, true], 1, 1e-3, &mut rng).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((scalar(&l.g_loss).unwrap() - ln2).abs() < 1e-15);
        assert!((scalar(&l.d_loss).unwrap() - 2.0 * ln2).abs() < 1e-15);
        assert_eq!(scalar(&l.r1_penalty).unwrap(), 0.0);
    }

    /// Per-frame critic `tanh(x·W)` pooled over pixels; a handful of parameters.
    struct Toy {
        w: Var,
    }

    impl Critic for Toy {
        fn logits(&self, x: &Tensor) -> Result<Tensor> {
            let (b, f, c, h, w) = x.dims5()?;
            let flat = x.reshape((b * f, c * h * w))?;
            let s = flat.matmul(self.w.as_tensor())?.tanh()?;
            Ok(s.reshape((b, f, 2))?)
        }
    }

    fn toy(rng: &mut ChaCha8Rng, inputs: usize) -> Toy {
        Toy {
            w: Var::from_tensor(&(randn(rng, &[inputs, 2], DType::F64).unwrap() * 0.3).unwrap()).unwrap(),
        }
    }

    #[test]
    fn r1_estimator_matches_exact_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let critic = toy(&mut rng, 8);
        let x = randn(&mut rng, &[2, 1, 2, 2, 2], DType::F64).unwrap();
        let cross = [false, true];
        let exact = r1_penalty_exact(&critic, &x, &cross).unwrap();
        let est = scalar(&r1_penalty(&critic, &x, &cross, 4000, 1e-4, &mut rng).unwrap()).unwrap();
        assert!(exact > 0.0);
        assert!((est - exact).abs() / exact < 0.1, "{est} vs {exact}");
    }

    #[test]
    fn fal_losses_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[2, 2, 1, 2, 2], DType::F64).unwrap();
        let y = randn(&mut rng, &[2, 2, 1, 2, 2], DType::F64).unwrap();
        let critic = toy(&mut rng, 4);
        let cross = [true, false];
        // toy generator: elementwise affine on x
        let g = Var::from_tensor(&randn(&mut rng, &[1, 1, 1, 2, 2], DType::F64).unwrap()).unwrap();
        let fake = || -> Result<Tensor> { Ok(x.broadcast_mul(g.as_tensor())?.tanh()?) };
        let checks: Vec<(&str, Vec<Var>, Box<dyn Fn() -> Result<Tensor>>)> = vec![
            ("attr", vec![g.clone()], Box::new(|| attr_consistency_loss(&fake()?, &y))),
            ("rec", vec![g.clone()], Box::new(|| reconstruction_loss(&fake()?, &y, true))),
            (
                "tid",
                vec![g.clone()],
                Box::new(|| {
                    let f = fake()?.reshape((2, 8))?;
                    let a = y.reshape((2, 8))?;
                    let r = x.reshape((2, 8))?.neg()?;
                    triplet_identity_loss(&f, &a, &r, 2.0)
                }),
            ),
            ("g_adv", vec![g.clone()], Box::new(|| generator_adv_loss(&critic.logits(&fake()?)?, &cross))),
            (
                "d_adv",
                vec![critic.w.clone()],
                Box::new(|| discriminator_adv_loss(&critic.logits(&x)?, &critic.logits(&y)?, &cross)),
            ),
        ];
        for (name, vars, f) in checks {
            let r = check_gradients(&vars, 1e-6, || f()).unwrap();
            assert!(r.relative_error < 1e-4 && r.analytic_norm > 0.0, "{name}: {r:?}");
        }
        let dirs: Vec<Tensor> = (0..2).map(|_| randn(&mut rng, x.dims(), DType::F64).unwrap()).collect();
        let r = check_gradients(&[critic.w.clone()], 1e-6, || r1_penalty_along(&critic, &x, &cross, &dirs, 1e-3)).unwrap();
        assert!(r.relative_error < 1e-4 && r.analytic_norm > 0.0, "r1: {r:?}");
    }

    #[test]
    fn softplus_is_stable() {
        let t = Tensor::new(&[-1000.0f64, 0.0, 1000.0], &Device::Cpu).unwrap();
        let v = to_f64_vec(&softplus(&t).unwrap()).unwrap();
        assert!(v[0] < 1e-300 && (v[1] - std::f64::consts::LN_2).abs() < 1e-15 && v[2] == 1000.0);
    }
}
