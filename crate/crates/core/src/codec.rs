//! Pixel ↔ latent codecs. All diffusion, attribute and injection math runs on
//! the latent side.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore, Params, ResBlock};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::scalar;
use crate::videodata::{ClipSource, VideoClip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    /// Exact space-to-depth packing.
    Identity,
    /// Small convolutional autoencoder.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub kind: CodecKind,
    /// Spatial downsample factor `s`.
    pub factor: usize,
    /// Latent channels for the learned codec (identity codec uses `3 * s * s`).
    pub channels: usize,
    pub hidden: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            kind: CodecKind::Learned,
            factor: 8,
            channels: 16,
            hidden: 64,
        }
    }
}

impl CodecConfig {
    pub fn identity(factor: usize) -> Self {
        Self {
            kind: CodecKind::Identity,
            factor,
            channels: 3 * factor * factor,
            hidden: 0,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self.kind {
            CodecKind::Identity => 3 * self.factor * self.factor,
            CodecKind::Learned => self.channels,
        }
    }
}

/// Latent representation of a clip, `[F, c, h, w]`.
#[derive(Debug, Clone)]
pub struct LatentClip {
    pub data: Tensor,
    pub factor: usize,
    pub channels: usize,
}

impl LatentClip {
    pub fn frames(&self) -> usize {
        self.data.dims()[0]
    }
}

/// `[N, C, H, W] -> [N, C*s*s, H/s, W/s]`.
pub fn space_to_depth(x: &Tensor, s: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % s != 0 || w % s != 0 {
        return Err(Error::invalid("size", format!("{h}x{w} not divisible by factor {s}")));
    }
    if s == 1 {
        return Ok(x.clone());
    }
    let (hh, ww) = (h / s, w / s);
    Ok(x.reshape(vec![n, c, hh, s, ww, s])?
        .permute(vec![0, 1, 3, 5, 2, 4])?
        .reshape((n, c * s * s, hh, ww))?)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, s: usize) -> Result<Tensor> {
    let (n, cs, hh, ww) = x.dims4()?;
    if cs % (s * s) != 0 {
        return Err(Error::invalid("channels", format!("{cs} not divisible by {}", s * s)));
    }
    if s == 1 {
        return Ok(x.clone());
    }
    let c = cs / (s * s);
    Ok(x.reshape(vec![n, c, s, s, hh, ww])?
        .permute(vec![0, 1, 4, 2, 5, 3])?
        .reshape((n, c, hh * s, ww * s))?)
}

/// Linear patch projection plus a convolutional residual on each side. The
/// linear maps are initialized from a patch PCA of the training data and the
/// residual output convolutions start at zero.
#[derive(Debug, Clone)]
struct LearnedCodec {
    enc_linear: Conv2d,
    enc_in: Conv2d,
    enc_blocks: Vec<ResBlock>,
    enc_out: Conv2d,
    dec_linear: Conv2d,
    dec_in: Conv2d,
    dec_blocks: Vec<ResBlock>,
    dec_out: Conv2d,
}

impl LearnedCodec {
    fn new(p: &Params, cfg: &CodecConfig) -> Result<Self> {
        let packed = 3 * cfg.factor * cfg.factor;
        let h = cfg.hidden;
        let e = p.pp("encoder");
        let d = p.pp("decoder");
        Ok(Self {
            enc_linear: Conv2d::new(&e.pp("linear"), packed, cfg.channels, 1, 1, 0)?,
            enc_in: Conv2d::new(&e.pp("conv_in"), packed, h, 3, 1, 1)?,
            enc_blocks: (0..2)
                .map(|i| ResBlock::new(&e.pp(format!("block{i}")), h, h, None))
                .collect::<Result<_>>()?,
            enc_out: Conv2d::zeroed(&e.pp("conv_out"), h, cfg.channels, 1, 0)?,
            dec_linear: Conv2d::new(&d.pp("linear"), cfg.channels, packed, 1, 1, 0)?,
            dec_in: Conv2d::new(&d.pp("conv_in"), cfg.channels, h, 3, 1, 1)?,
            dec_blocks: (0..2)
                .map(|i| ResBlock::new(&d.pp(format!("block{i}")), h, h, None))
                .collect::<Result<_>>()?,
            dec_out: Conv2d::zeroed(&d.pp("conv_out"), h, packed, 3, 1)?,
        })
    }

    fn encode(&self, packed: &Tensor) -> Result<Tensor> {
        let mut x = self.enc_in.forward(packed)?;
        for b in &self.enc_blocks {
            x = b.forward(&x, None)?;
        }
        Ok((self.enc_linear.forward(packed)? + self.enc_out.forward(&x)?)?)
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut x = self.dec_in.forward(z)?;
        for b in &self.dec_blocks {
            x = b.forward(&x, None)?;
        }
        Ok((self.dec_linear.forward(z)? + self.dec_out.forward(&x)?)?)
    }
}

/// Mean and top-`channels` principal directions of packed `s×s` patches.
/// Returns `(mean [P], basis [channels, P])` with `P = 3·s²`.
pub fn patch_pca<D: ClipSource + ?Sized>(
    data: &D,
    factor: usize,
    channels: usize,
    max_clips: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let p = 3 * factor * factor;
    if channels > p {
        return Err(Error::invalid("channels", format!("{channels} exceeds patch size {p}")));
    }
    let mut sum = vec![0f64; p];
    let mut outer = nalgebra::DMatrix::<f64>::zeros(p, p);
    let mut count = 0usize;
    for i in 0..data.len().min(max_clips) {
        let clip = data.clip(i)?;
        let packed = space_to_depth(&clip.frames.to_dtype(DType::F64)?, factor)?;
        let (n, _, hh, ww) = packed.dims4()?;
        let rows = packed.permute((0, 2, 3, 1))?.reshape((n * hh * ww, p))?;
        let m = nalgebra::DMatrix::from_row_slice(n * hh * ww, p, &rows.flatten_all()?.to_vec1::<f64>()?);
        outer += m.transpose() * &m;
        for r in 0..m.nrows() {
            for c in 0..p {
                sum[c] += m[(r, c)];
            }
        }
        count += m.nrows();
    }
    if count == 0 {
        return Err(Error::Empty("codec training data"));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mu = nalgebra::DVector::from_vec(mean.clone());
    let cov = outer / count as f64 - &mu * mu.transpose();
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let basis = order[..channels]
        .iter()
        .map(|&k| eig.eigenvectors.column(k).iter().copied().collect())
        .collect();
    Ok((mean, basis))
}

/// A pixel/latent codec plus the data statistic `sigma_data` used by the
/// diffusion preconditioning.
#[derive(Clone)]
pub struct Codec {
    pub config: CodecConfig,
    pub sigma_data: f64,
    store: Option<ParamStore>,
    net: Option<LearnedCodec>,
}

impl std::fmt::Debug for Codec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Codec")
            .field("config", &self.config)
            .field("sigma_data", &self.sigma_data)
            .finish()
    }
}

impl Codec {
    pub fn identity(factor: usize, sigma_data: f64) -> Self {
        Self {
            config: CodecConfig::identity(factor),
            sigma_data,
            store: None,
            net: None,
        }
    }

    /// Fresh (untrained) codec of the given configuration.
    pub fn init(config: CodecConfig, seed: u64) -> Result<Self> {
        match config.kind {
            CodecKind::Identity => Ok(Self::identity(config.factor, 0.5)),
            CodecKind::Learned => {
                let store = ParamStore::new(DType::F32, seed);
                let net = LearnedCodec::new(&store.root().pp("codec"), &config)?;
                Ok(Self {
                    config,
                    sigma_data: 1.0,
                    store: Some(store),
                    net: Some(net),
                })
            }
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.config.latent_channels()
    }

    /// Frozen copy: weights no longer receive gradients.
    pub fn frozen(&self) -> Result<Self> {
        match &self.store {
            None => Ok(self.clone()),
            Some(store) => {
                let fs = ParamStore::frozen(store.tensors(), DType::F32)?;
                let net = LearnedCodec::new(&fs.root().pp("codec"), &self.config)?;
                Ok(Self {
                    config: self.config,
                    sigma_data: self.sigma_data,
                    store: Some(fs),
                    net: Some(net),
                })
            }
        }
    }

    /// `[N, 3, H, W] -> [N, c, H/s, W/s]`; differentiable.
    pub fn encode_frames(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let s = self.config.factor;
        if h % s != 0 || w % s != 0 {
            return Err(Error::invalid("size", format!("{h}x{w} not divisible by factor {s}")));
        }
        let packed = space_to_depth(x, s)?;
        match &self.net {
            None => Ok(packed),
            Some(net) => net.encode(&packed.to_dtype(DType::F32)?),
        }
    }

    /// `[N, c, h, w] -> [N, 3, h*s, w*s]`; differentiable, unclamped.
    pub fn decode_frames(&self, z: &Tensor) -> Result<Tensor> {
        let c = z.dims4()?.1;
        if c != self.latent_channels() {
            return Err(Error::shape("decode", self.latent_channels(), c));
        }
        match &self.net {
            None => depth_to_space(z, self.config.factor),
            Some(net) => depth_to_space(&net.decode(z)?, self.config.factor),
        }
    }

    pub fn encode_clip(&self, clip: &VideoClip) -> Result<LatentClip> {
        Ok(LatentClip {
            data: self.encode_frames(&clip.frames)?,
            factor: self.config.factor,
            channels: self.latent_channels(),
        })
    }

    pub fn decode_clip(&self, latent: &LatentClip) -> Result<VideoClip> {
        if latent.factor != self.config.factor || latent.channels != self.latent_channels() {
            return Err(Error::shape(
                "decode_clip",
                (self.config.factor, self.latent_channels()),
                (latent.factor, latent.channels),
            ));
        }
        let mut frames = self.decode_frames(&latent.data)?;
        if self.net.is_some() {
            frames = frames.clamp(-1.0, 1.0)?;
        }
        VideoClip::new(frames, None, None)
    }

    /// Standard deviation of encoded latents over a sample of clips.
    pub fn measure_sigma_data<D: ClipSource + ?Sized>(&self, data: &D, max_clips: usize) -> Result<f64> {
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0usize;
        for i in 0..data.len().min(max_clips) {
            let z = self.encode_clip(&data.clip(i)?)?.data.to_dtype(DType::F64)?;
            sum += scalar(&z.sum_all()?)?;
            sq += scalar(&z.sqr()?.sum_all()?)?;
            n += z.elem_count();
        }
        if n == 0 {
            return Err(Error::Empty("sigma_data sample"));
        }
        let mean = sum / n as f64;
        Ok((sq / n as f64 - mean * mean).max(1e-12).sqrt())
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new()
            .with_meta("kind", "codec")?
            .with_meta("codec", self.config)?
            .with_meta("sigma_data", self.sigma_data)?;
        if let Some(s) = &self.store {
            a.extend(s.tensors());
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let config: CodecConfig = a.meta("codec")?;
        let sigma_data: f64 = a.meta("sigma_data")?;
        match config.kind {
            CodecKind::Identity => Ok(Self::identity(config.factor, sigma_data)),
            CodecKind::Learned => {
                let store = ParamStore::frozen(a.tensors.clone(), DType::F32)?;
                let net = LearnedCodec::new(&store.root().pp("codec"), &config)?;
                Ok(Self {
                    config,
                    sigma_data,
                    store: Some(store),
                    net: Some(net),
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch_frames: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_frames: 16,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Peak signal-to-noise ratio for signals in `[-1, 1]` (peak-to-peak 2).
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = scalar(&(a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?.sqr()?.mean_all()?)?;
    Ok(10.0 * (4.0 / mse.max(1e-20)).log10())
}

/// Trains the learned codec on random frames by pixel MSE, then measures
/// `sigma_data`. Returns the frozen codec and the per-step losses.
pub fn pretrain_codec<D: ClipSource + ?Sized>(
    config: CodecConfig,
    train: &CodecTrainConfig,
    data: &D,
) -> Result<(Codec, Vec<f64>)> {
    if config.kind == CodecKind::Identity {
        let c = Codec::identity(config.factor, 0.5);
        let sd = c.measure_sigma_data(data, 64)?;
        return Ok((Codec::identity(config.factor, sd), Vec::new()));
    }
    if data.is_empty() {
        return Err(Error::Empty("codec training data"));
    }
    let codec = Codec::init(config, train.seed)?;
    let store = codec.store.clone().expect("learned codec has params");
    let (mean, basis) = patch_pca(data, config.factor, config.channels, 64)?;
    let p = mean.len();
    let c = config.channels;
    let flat: Vec<f64> = basis.iter().flatten().copied().collect();
    let enc_w = Tensor::from_vec(flat, (c, p), &Device::Cpu)?;
    let mean_t = Tensor::from_vec(mean, (p, 1), &Device::Cpu)?;
    let mut init = BTreeMap::new();
    init.insert("codec.encoder.linear.weight".to_string(), enc_w.reshape((c, p, 1, 1))?);
    init.insert("codec.encoder.linear.bias".to_string(), enc_w.matmul(&mean_t)?.neg()?.reshape(c)?);
    init.insert("codec.decoder.linear.weight".to_string(), enc_w.t()?.contiguous()?.reshape((p, c, 1, 1))?);
    init.insert("codec.decoder.linear.bias".to_string(), mean_t.reshape(p)?);
    store.load(&init)?;
    let mut opt = AdamW::new(
        store.vars(),
        AdamWConfig {
            lr: train.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut losses = Vec::with_capacity(train.steps);
    let base_lr = train.lr;
    for step in 0..train.steps {
        let mut frames = Vec::with_capacity(train.batch_frames);
        for _ in 0..train.batch_frames {
            let clip = data.clip(rng.gen_range(0..data.len()))?;
            frames.push(clip.frame(rng.gen_range(0..clip.len()))?);
        }
        let x = Tensor::stack(&frames, 0)?;
        let recon = codec.decode_frames(&codec.encode_frames(&x)?)?;
        let loss = (recon - &x)?.sqr()?.mean_all()?;
        // cosine decay
        let progress = step as f64 / train.steps.max(1) as f64;
        opt.set_lr(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        opt.step(&loss.backward()?)?;
        losses.push(scalar(&loss)?);
    }
    let mut frozen = codec.frozen()?;
    frozen.sigma_data = frozen.measure_sigma_data(data, 64)?;
    Ok((frozen, losses))
}
