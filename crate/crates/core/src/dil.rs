//! Identity encoder (global and detailed features), the detailed identity
//! tokenizer, and the identity loss on generated frames.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::denoiser::IDENTITY_TOKENS;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Linear, ParamStore, Params, ResBlock};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{cosine, l2_normalize, scalar};
use crate::videodata::{generate_synthetic_clip, sample_factors_and_motion, IdentityCodebook};

/// Side of the detailed identity grid.
pub const GRID: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentityEncoderConfig {
    pub input_size: usize,
    /// Widths of the four residual stages.
    pub widths: [usize; 4],
    pub embed_dim: usize,
}

impl Default for IdentityEncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            widths: [8, 16, 24, 32],
            embed_dim: 128,
        }
    }
}

impl IdentityEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size != 64 {
            return Err(Error::invalid(
                "input_size",
                format!("the 7x7 detailed grid requires 64x64 inputs, got {}", self.input_size),
            ));
        }
        if self.widths.iter().any(|&w| w == 0) || self.embed_dim == 0 {
            return Err(Error::invalid("widths", "all widths must be positive"));
        }
        Ok(())
    }

    pub fn detail_channels(&self) -> usize {
        self.widths[3]
    }
}

/// Global unit-norm identity vector, detailed 7×7 map, and its tokens.
#[derive(Debug, Clone)]
pub struct IdentityBundle {
    /// `[N, embed_dim]`.
    pub f_gid: Tensor,
    /// `[N, C, 7, 7]`.
    pub f_did: Tensor,
    /// `[N, 49, d_model]`.
    pub t_did: Tensor,
}

/// Four-stage residual CNN: 64 → 32 → 16 → 8 → 7.
pub struct IdentityEncoder {
    config: IdentityEncoderConfig,
    store: ParamStore,
    stem: Conv2d,
    stage1: ResBlock,
    down2: Conv2d,
    stage2: ResBlock,
    down3: Conv2d,
    stage3: ResBlock,
    down4: Conv2d,
    stage4: ResBlock,
    fc: Linear,
}

impl IdentityEncoder {
    fn build(store: ParamStore, config: IdentityEncoderConfig) -> Result<Self> {
        config.validate()?;
        let p = store.root();
        let [w1, w2, w3, w4] = config.widths;
        Ok(Self {
            stem: Conv2d::new(&p.pp("stem"), 3, w1, 3, 2, 1)?,
            stage1: ResBlock::new(&p.pp("stage1"), w1, w1, None)?,
            down2: Conv2d::new(&p.pp("down2"), w1, w2, 3, 2, 1)?,
            stage2: ResBlock::new(&p.pp("stage2"), w2, w2, None)?,
            down3: Conv2d::new(&p.pp("down3"), w2, w3, 3, 2, 1)?,
            stage3: ResBlock::new(&p.pp("stage3"), w3, w3, None)?,
            down4: Conv2d::new(&p.pp("down4"), w3, w4, 2, 1, 0)?,
            stage4: ResBlock::new(&p.pp("stage4"), w4, w4, None)?,
            fc: Linear::new(&p.pp("fc"), w4, config.embed_dim)?,
            store,
            config,
        })
    }

    pub fn init(config: IdentityEncoderConfig, seed: u64) -> Result<Self> {
        Self::build(ParamStore::new(DType::F32, seed), config)
    }

    pub fn config(&self) -> &IdentityEncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Same weights, detached from any optimizer.
    pub fn frozen(&self) -> Result<Self> {
        Self::build(ParamStore::frozen(self.store.tensors(), DType::F32)?, self.config.clone())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        let s = self.config.input_size;
        if dims.len() != 4 || dims[1] != 3 || dims[2] != s || dims[3] != s {
            return Err(Error::invalid("face", format!("expected [N, 3, {s}, {s}], got {dims:?}")));
        }
        Ok(())
    }

    /// `[N, 3, 64, 64]` → `[N, C, 7, 7]`, the last residual stage before pooling.
    pub fn embed_detailed(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let x = x.to_dtype(DType::F32)?;
        let h = self.stage1.forward(&self.stem.forward(&x)?, None)?;
        let h = self.stage2.forward(&self.down2.forward(&h)?, None)?;
        let h = self.stage3.forward(&self.down3.forward(&h)?, None)?;
        self.stage4.forward(&self.down4.forward(&h)?, None)
    }

    /// Normalized global pooling + projection of a detailed map.
    pub fn global_from_detailed(&self, f_did: &Tensor) -> Result<Tensor> {
        let pooled = f_did.mean(3)?.mean(2)?;
        l2_normalize(&self.fc.forward(&pooled)?)
    }

    /// Unit-norm `[N, embed_dim]`.
    pub fn embed_global(&self, x: &Tensor) -> Result<Tensor> {
        self.global_from_detailed(&self.embed_detailed(x)?)
    }

    /// `(f_gid, f_did)` from one pass.
    pub fn embed(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = self.embed_detailed(x)?;
        Ok((self.global_from_detailed(&d)?, d))
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new().with_meta("idenc", &self.config)?;
        a.extend(self.store.tensors());
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let config: IdentityEncoderConfig = a.meta("idenc")?;
        Self::build(ParamStore::frozen(a.tensors.clone(), DType::F32)?, config)
    }

    /// SHA-256 over all weights, used to pin the frozen encoder.
    pub fn weights_hash(&self) -> Result<String> {
        crate::checkpoint::tensors_hash(&self.store.tensors())
    }
}

/// 1×1 convolution to `d_model` and row-major flattening into 49 tokens.
pub struct Tokenizer {
    proj: Linear,
    pos: Option<Tensor>,
    channels: usize,
    dtype: DType,
}

impl Tokenizer {
    pub fn new(p: &Params, channels: usize, d_model: usize, positional: bool) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(&p.pp("proj"), channels, d_model)?,
            pos: positional
                .then(|| p.get(&[IDENTITY_TOKENS, d_model], "pos", Init::Normal(0.1)))
                .transpose()?,
            channels,
            dtype: p.dtype(),
        })
    }

    /// `[N, C, 7, 7]` → `[N, 49, d_model]`; token `k` is cell `(k / 7, k % 7)`.
    pub fn forward(&self, f_did: &Tensor) -> Result<Tensor> {
        let dims = f_did.dims();
        if dims.len() != 4 || dims[2] != GRID || dims[3] != GRID {
            return Err(Error::invalid("f_did", format!("expected a {GRID}x{GRID} map, got {dims:?}")));
        }
        if dims[1] != self.channels {
            return Err(Error::shape("f_did channels", self.channels, dims[1]));
        }
        let cells = f_did
            .reshape((dims[0], self.channels, IDENTITY_TOKENS))?
            .transpose(1, 2)?
            .contiguous()?;
        let t = self.proj.forward(&cells.to_dtype(self.dtype)?)?;
        match &self.pos {
            Some(pos) => Ok(t.broadcast_add(pos)?),
            None => Ok(t),
        }
    }

    pub fn positional(&self) -> Option<&Tensor> {
        self.pos.as_ref()
    }
}

/// Builds the full identity bundle for a batch of faces.
pub fn identity_bundle(encoder: &IdentityEncoder, tokenizer: &Tokenizer, faces: &Tensor) -> Result<IdentityBundle> {
    let (f_gid, f_did) = encoder.embed(faces)?;
    let t_did = tokenizer.forward(&f_did)?;
    Ok(IdentityBundle { f_gid, f_did, t_did })
}

/// `mean(1 − cos(f_src, e))` for embeddings `e`: `[B, F, D]` against `f_src`: `[B, D]`.
pub fn identity_loss_from_embeddings(f_src: &Tensor, embeddings: &Tensor) -> Result<Tensor> {
    let (b, f, d) = embeddings.dims3()?;
    if f_src.dims() != [b, d] {
        return Err(Error::shape("identity_loss", [b, d], f_src.dims()));
    }
    let src = f_src.unsqueeze(1)?.broadcast_as((b, f, d))?.contiguous()?;
    Ok((1.0 - cosine(&src, embeddings)?)?.mean_all()?)
}

/// Identity loss of generated frames `[B, F, 3, H, W]` against source embeddings `[B, D]`.
pub fn identity_loss(encoder: &IdentityEncoder, f_src: &Tensor, frames: &Tensor) -> Result<Tensor> {
    let (b, f, c, h, w) = frames.dims5()?;
    let e = encoder.embed_global(&frames.reshape((b * f, c, h, w))?)?;
    let d = e.dim(1)?;
    identity_loss_from_embeddings(f_src, &e.reshape((b, f, d))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentityTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Cosine-margin softmax scale and margin.
    pub scale: f64,
    pub margin: f64,
    /// Number of codebook identities used for training.
    pub identities: usize,
    pub seed: u64,
}

impl Default for IdentityTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2500,
            batch: 32,
            lr: 3e-3,
            scale: 16.0,
            margin: 0.2,
            identities: 256,
            seed: 0,
        }
    }
}

/// A random single-frame render of `identity` with random factors and background.
pub fn random_face<R: Rng>(codebook: &IdentityCodebook, identity: u32, size: usize, rng: &mut R) -> Result<Tensor> {
    let (f, _) = sample_factors_and_motion(rng, identity, 1);
    let clip = generate_synthetic_clip(codebook, &f, &[], 1, (size, size), rng.gen())?;
    clip.frame(0)
}

/// Margin-softmax identity classification on synthetic renders; returns the
/// frozen encoder and the loss curve.
pub fn pretrain_identity_encoder(
    config: IdentityEncoderConfig,
    train: &IdentityTrainConfig,
    codebook: &IdentityCodebook,
) -> Result<(IdentityEncoder, Vec<f64>)> {
    if train.identities == 0 || train.identities > codebook.len() {
        return Err(Error::invalid("identities", format!("must be in 1..={}", codebook.len())));
    }
    let enc = IdentityEncoder::init(config.clone(), train.seed)?;
    let head_store = ParamStore::new(DType::F32, train.seed ^ 0x5eed);
    let classes = head_store
        .root()
        .get(&[train.identities, config.embed_dim], "classes", Init::Normal(1.0))?;
    let mut vars = enc.store.vars();
    vars.extend(head_store.vars());
    let mut opt = AdamW::new(
        vars,
        AdamWConfig {
            lr: train.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut faces = Vec::with_capacity(train.batch);
        let mut labels = Vec::with_capacity(train.batch);
        for _ in 0..train.batch {
            let id = rng.gen_range(0..train.identities) as u32;
            faces.push(random_face(codebook, id, config.input_size, &mut rng)?);
            labels.push(id);
        }
        let x = Tensor::stack(&faces, 0)?;
        let e = enc.embed_global(&x)?;
        let w = l2_normalize(&classes)?;
        let cos = e.matmul(&w.t()?)?;
        let labels_t = Tensor::new(labels.as_slice(), x.device())?;
        let onehot = candle_core::Tensor::zeros((train.batch, train.identities), DType::F32, x.device())?
            .scatter_add(&labels_t.unsqueeze(1)?, &Tensor::ones((train.batch, 1), DType::F32, x.device())?, 1)?;
        let logits = ((cos - (onehot * train.margin)?)? * train.scale)?;
        let loss = cross_entropy(&logits, &labels_t)?;
        let progress = step as f64 / train.steps.max(1) as f64;
        opt.set_lr(train.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        opt.step(&loss.backward()?)?;
        losses.push(scalar(&loss)?);
    }
    Ok((enc.frozen()?, losses))
}

/// Mean cross-entropy of `[N, K]` logits against class indices.
pub fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let picked = shifted.gather(&labels.unsqueeze(1)?, 1)?;
    Ok((lse - picked)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_abs_diff, randn, to_f64_vec};
    use candle_core::Device;

    fn encoder() -> IdentityEncoder {
        IdentityEncoder::init(
            IdentityEncoderConfig {
                widths: [4, 4, 8, 8],
                embed_dim: 16,
                ..Default::default()
            },
            1,
        )
        .unwrap()
    }

    fn faces(n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cb = IdentityCodebook::new(8);
        let v: Vec<Tensor> = (0..n).map(|i| random_face(&cb, i as u32, 64, &mut rng).unwrap()).collect();
        Tensor::stack(&v, 0).unwrap()
    }

    #[test]
    fn shapes_and_unit_norm() {
        let enc = encoder();
        let x = faces(3);
        let (g, d) = enc.embed(&x).unwrap();
        assert_eq!(d.dims(), &[3, 8, 7, 7]);
        assert_eq!(g.dims(), &[3, 16]);
        for n in to_f64_vec(&g.sqr().unwrap().sum(1).unwrap()).unwrap() {
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
        let again = enc.embed_global(&x).unwrap();
        assert!(crate::tensor::bit_equal(&g, &again).unwrap());
        let g2 = enc.global_from_detailed(&enc.embed_detailed(&x).unwrap()).unwrap();
        assert!(crate::tensor::bit_equal(&g, &g2).unwrap());
    }

    #[test]
    fn wrong_size_is_rejected() {
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(encoder().embed_global(&x).is_err());
        let bad = IdentityEncoderConfig {
            input_size: 32,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn tokenizer(positional: bool) -> (ParamStore, Tokenizer) {
        let store = ParamStore::new(DType::F64, 4);
        let t = Tokenizer::new(&store.root(), 8, 12, positional).unwrap();
        (store, t)
    }

    #[test]
    fn tokens_shape_and_zero_input() {
        let (store, t) = tokenizer(true);
        let z = Tensor::zeros((2, 8, 7, 7), DType::F64, &Device::Cpu).unwrap();
        let out = t.forward(&z).unwrap();
        assert_eq!(out.dims(), &[2, 49, 12]);
        let bias = store.tensors()["proj.bias"].clone();
        let expect = t.positional().unwrap().broadcast_add(&bias).unwrap();
        assert!(max_abs_diff(&out.get(1).unwrap(), &expect).unwrap() < 1e-15);
        assert!(t.forward(&Tensor::zeros((1, 8, 6, 7), DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn token_locality() {
        let (_, t) = tokenizer(false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randn(&mut rng, &[1, 8, 7, 7], DType::F64).unwrap();
        let base = t.forward(&a).unwrap();
        let (r, c) = (3, 5);
        let mut bump = vec![0f64; 8 * 49];
        for ch in 0..8 {
            bump[ch * 49 + r * 7 + c] = 1.0;
        }
        let b = (a + Tensor::from_vec(bump, (1, 8, 7, 7), &Device::Cpu).unwrap()).unwrap();
        let out = t.forward(&b).unwrap();
        for k in 0..49 {
            let d = max_abs_diff(&out.narrow(1, k, 1).unwrap(), &base.narrow(1, k, 1).unwrap()).unwrap();
            if k == r * 7 + c {
                assert!(d > 1e-3);
            } else {
                assert_eq!(d, 0.0);
            }
        }
    }

    #[test]
    fn identity_loss_values() {
        let d = Device::Cpu;
        let src = Tensor::new(&[[1f64, 0.0]], &d).unwrap();
        let emb = |v: [[f64; 2]; 2]| Tensor::new(&[v], &d).unwrap();
        let l = |e| scalar(&identity_loss_from_embeddings(&src, &e).unwrap()).unwrap();
        assert!(l(emb([[1.0, 0.0], [2.0, 0.0]])).abs() < 1e-12);
        assert!((l(emb([[0.0, 1.0], [0.0, 3.0]])) - 1.0).abs() < 1e-12);
        assert!((l(emb([[-1.0, 0.0], [-0.5, 0.0]])) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn archive_round_trip_and_hash() {
        let enc = encoder();
        let back = IdentityEncoder::from_archive(&enc.to_archive().unwrap()).unwrap();
        assert_eq!(enc.weights_hash().unwrap(), back.weights_hash().unwrap());
        let x = faces(2);
        assert!(crate::tensor::bit_equal(&enc.embed_global(&x).unwrap(), &back.embed_global(&x).unwrap()).unwrap());
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        let d = Device::Cpu;
        let logits = Tensor::new(&[[1f64, 2.0, 3.0]], &d).unwrap();
        let labels = Tensor::new(&[2u32], &d).unwrap();
        let want = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((scalar(&cross_entropy(&logits, &labels).unwrap()).unwrap() - want).abs() < 1e-12);
    }
}
