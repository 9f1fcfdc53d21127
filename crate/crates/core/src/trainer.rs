//! Joint training of the denoiser, identity tokenizer and attribute networks,
//! checkpointing, and face-swap inference.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Archive;
use crate::codec::{depth_to_space, space_to_depth, Codec};
use crate::denoiser::{ConditioningBundle, Denoiser, DenoiserConfig, IdentityTokens};
use crate::dil::{identity_loss_from_embeddings, IdentityEncoder, Tokenizer};
use crate::edm::{
    denoise, dsm_loss, edm_sample, temporal_codenoise, window_starts, Guided, SamplerSchedule, SigmaDistribution,
    Windowed,
};
use crate::error::{Error, Result};
use crate::fal::{
    adversarial_losses, attr_consistency_loss, fal_total_loss, triplet_identity_loss, Fal, FalConfig,
    FalLossWeights, FalParts, FalSpace,
};
use crate::nn::{fnv1a, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{randn, scalar};
use crate::videodata::{mask_face_region, ClipSource, SourceFace, VideoClip};

/// Architecture of everything trained jointly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub fal: FalConfig,
    /// Learned positional embedding on the identity tokens.
    pub positional_tokens: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            fal: FalConfig::default(),
            positional_tokens: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.fal.validate()?;
        if self.fal.low_channels != self.denoiser.base_channels {
            return Err(Error::invalid(
                "fal.low_channels",
                format!("must equal denoiser.base_channels ({})", self.denoiser.base_channels),
            ));
        }
        Ok(())
    }

    /// Checks channel counts against the frozen codec and identity encoder.
    pub fn check_compatible(&self, pre: &Pretrained) -> Result<()> {
        self.validate()?;
        let c = pre.codec.latent_channels();
        if self.denoiser.latent_channels != c {
            return Err(Error::invalid("denoiser.latent_channels", format!("codec produces {c} channels")));
        }
        let s = pre.codec.config.factor;
        let want = match self.fal.space {
            FalSpace::Latent => c,
            FalSpace::Pixel => 3 * s * s,
        };
        if self.fal.input_channels != want {
            return Err(Error::invalid("fal.input_channels", format!("{:?} space needs {want}", self.fal.space)));
        }
        let d = pre.idenc.config().embed_dim;
        if self.fal.id_dim != d {
            return Err(Error::invalid("fal.id_dim", format!("identity encoder embeds to {d}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `L_DM + λ_FAL·L_FAL + λ_id·L_id` with a discriminator step.
    Joint,
    /// `L_DM` alone.
    Diffusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub disc_learning_rate: f64,
    pub weight_decay: f64,
    pub lambda_fal: f64,
    pub lambda_id: f64,
    pub fal_weights: FalLossWeights,
    pub warmup_steps: usize,
    pub attr_drop_prob: f64,
    pub token_drop_prob: f64,
    pub same_identity_prob: f64,
    pub sigma: SigmaDistribution,
    pub r1_weight: f64,
    pub r1_directions: usize,
    pub r1_step: f64,
    /// Frames per clip fed to the identity losses; 0 uses all.
    pub id_loss_frames: usize,
    pub freeze_fal_after_warmup: bool,
    pub objective: Objective,
    /// 0 disables periodic checkpoints (a final one is still written).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            batch_size: 4,
            learning_rate: 1e-4,
            disc_learning_rate: 1e-4,
            weight_decay: 0.01,
            lambda_fal: 1.0,
            lambda_id: 0.1,
            fal_weights: FalLossWeights::default(),
            warmup_steps: 500,
            attr_drop_prob: 0.1,
            token_drop_prob: 0.1,
            same_identity_prob: 0.5,
            sigma: SigmaDistribution::default(),
            r1_weight: 1.0,
            r1_directions: 1,
            r1_step: 1e-2,
            id_loss_frames: 0,
            freeze_fal_after_warmup: false,
            objective: Objective::Joint,
            checkpoint_every: 250,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("attr_drop_prob", self.attr_drop_prob),
            ("token_drop_prob", self.token_drop_prob),
            ("same_identity_prob", self.same_identity_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(name, format!("{p} is not a probability")));
            }
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::invalid("warmup_steps", "must not exceed total_steps"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("disc_learning_rate", self.disc_learning_rate),
            ("r1_step", self.r1_step),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda_fal", self.lambda_fal),
            ("lambda_id", self.lambda_id),
            ("r1_weight", self.r1_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be non-negative"));
            }
        }
        self.fal_weights.validate()?;
        self.sigma.validate()
    }
}

/// The frozen codec and identity encoder every stage depends on.
pub struct Pretrained {
    pub codec: Codec,
    pub idenc: IdentityEncoder,
}

impl Pretrained {
    pub fn new(codec: &Codec, idenc: &IdentityEncoder) -> Result<Self> {
        Ok(Self {
            codec: codec.frozen()?,
            idenc: idenc.frozen()?,
        })
    }

    pub fn sigma_data(&self) -> f64 {
        self.codec.sigma_data
    }

    pub fn codec_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.codec.to_archive()?.to_bytes()?)))
    }

    pub fn idenc_hash(&self) -> Result<String> {
        self.idenc.weights_hash()
    }

    /// `[B, F, 3, H, W]` pixels → `[B, F, c, h, w]` latents.
    pub fn encode(&self, frames: &Tensor) -> Result<Tensor> {
        let (b, f, c, h, w) = frames.dims5()?;
        let z = self.codec.encode_frames(&frames.reshape((b * f, c, h, w))?)?;
        let (_, zc, zh, zw) = z.dims4()?;
        Ok(z.reshape((b, f, zc, zh, zw))?)
    }

    /// `[B, F, c, h, w]` latents → `[B, F, 3, H, W]` pixels, unclamped.
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let (b, f, c, h, w) = latents.dims5()?;
        let x = self.codec.decode_frames(&latents.reshape((b * f, c, h, w))?)?;
        let (_, xc, xh, xw) = x.dims4()?;
        Ok(x.reshape((b, f, xc, xh, xw))?)
    }

    /// Unit-norm global identity embeddings of `[B, F, 3, H, W]` frames, `[B, F, D]`.
    pub fn frame_identities(&self, frames: &Tensor) -> Result<Tensor> {
        let (b, f, c, h, w) = frames.dims5()?;
        let e = self.idenc.embed_global(&frames.reshape((b * f, c, h, w))?)?;
        let d = e.dim(1)?;
        Ok(e.reshape((b, f, d))?)
    }
}

/// Denoiser, tokenizer and FAL networks sharing one parameter store.
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub denoiser: Denoiser,
    pub tokenizer: Tokenizer,
    pub fal: Fal,
}

impl Model {
    pub fn new(config: ModelConfig, pre: &Pretrained, seed: u64) -> Result<Self> {
        config.check_compatible(pre)?;
        Self::build(ParamStore::new(DType::F32, seed), config, pre.idenc.config().detail_channels())
    }

    fn build(store: ParamStore, config: ModelConfig, detail_channels: usize) -> Result<Self> {
        let root = store.root();
        let denoiser = Denoiser::new(&root, config.denoiser.clone())?;
        let tokenizer = Tokenizer::new(
            &root.pp("tokenizer"),
            detail_channels,
            config.denoiser.d_model,
            config.positional_tokens,
        )?;
        let fal = Fal::new(&root, config.fal.clone())?;
        Ok(Self {
            config,
            store,
            denoiser,
            tokenizer,
            fal,
        })
    }

    /// Rebuilds a model from named weights; the result is frozen.
    pub fn from_tensors(config: ModelConfig, pre: &Pretrained, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.check_compatible(pre)?;
        let dc = pre.idenc.config().detail_channels();
        let expected = Self::build(ParamStore::new(DType::F32, 0), config.clone(), dc)?.store.tensors();
        if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Self::build(ParamStore::frozen(tensors, DType::F32)?, config, dc)
    }

    /// Loads the model part of a training checkpoint, frozen for inference.
    pub fn load(path: impl AsRef<Path>, pre: &Pretrained) -> Result<Self> {
        let a = Archive::load(path)?;
        check_pins(&a, pre)?;
        let tensors = a
            .tensors
            .iter()
            .filter(|(k, _)| !k.starts_with(OPT_PREFIX))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self::from_tensors(a.meta("model")?, pre, tensors)
    }

    /// The tensor `E_attr` reads for a clip: latents, or packed pixels in the pixel ablation.
    pub fn fal_input(&self, pre: &Pretrained, frames: &Tensor, latents: &Tensor) -> Result<Tensor> {
        match self.config.fal.space {
            FalSpace::Latent => Ok(latents.clone()),
            FalSpace::Pixel => {
                let (b, f, c, h, w) = frames.dims5()?;
                let s = pre.codec.config.factor;
                let p = space_to_depth(&frames.reshape((b * f, c, h, w))?.to_dtype(DType::F32)?, s)?;
                let (_, pc, ph, pw) = p.dims4()?;
                Ok(p.reshape((b, f, pc, ph, pw))?)
            }
        }
    }

    /// Pixels of a tensor in FAL space.
    fn fal_to_pixels(&self, pre: &Pretrained, v: &Tensor) -> Result<Tensor> {
        match self.config.fal.space {
            FalSpace::Latent => pre.decode(v),
            FalSpace::Pixel => {
                let (b, f, c, h, w) = v.dims5()?;
                let s = pre.codec.config.factor;
                let x = depth_to_space(&v.reshape((b * f, c, h, w))?, s)?;
                let (_, xc, xh, xw) = x.dims4()?;
                Ok(x.reshape((b, f, xc, xh, xw))?)
            }
        }
    }

    pub fn weights_hash(&self) -> Result<String> {
        crate::checkpoint::tensors_hash(&self.store.tensors())
    }
}

const OPT_PREFIX: &str = "optim.";

fn check_pins(a: &Archive, pre: &Pretrained) -> Result<()> {
    let codec: String = a.meta("codec_hash")?;
    let idenc: String = a.meta("idenc_hash")?;
    if codec != pre.codec_hash()? {
        return Err(Error::Checkpoint("checkpoint was trained with a different codec".into()));
    }
    if idenc != pre.idenc_hash()? {
        return Err(Error::Checkpoint("checkpoint was trained with a different identity encoder".into()));
    }
    Ok(())
}

const STREAM_DATA: u64 = 1;
const STREAM_POLICY: u64 = 2;
const STREAM_SIGMA: u64 = 3;
const STREAM_MASK: u64 = 4;
const STREAM_TOKENS: u64 = 5;
const STREAM_ID_FRAMES: u64 = 6;
const STREAM_R1: u64 = 7;

/// Seed of an independent random stream for `(seed, step, stream)`; every
/// step's randomness is a pure function of these, so a resumed run replays
/// an uninterrupted one exactly.
pub fn stream_seed(seed: u64, step: usize, stream: u64) -> u64 {
    let mut bytes = [0u8; 24];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&(step as u64).to_le_bytes());
    bytes[16..].copy_from_slice(&stream.to_le_bytes());
    fnv1a(&bytes)
}

fn stream(seed: u64, step: usize, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, step, stream))
}

/// Per-sample identity-source flags for a step: `true` keeps the clip's own identity.
pub fn identity_source_flags(cfg: &TrainConfig, step: usize) -> Vec<bool> {
    let mut rng = stream(cfg.seed, step, STREAM_POLICY);
    (0..cfg.batch_size).map(|_| rng.gen_bool(cfg.same_identity_prob)).collect()
}

/// One training batch of clip windows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub step: usize,
    pub seed: u64,
    pub clip_indices: Vec<usize>,
    /// `[B, F, 3, H, W]`.
    pub frames: Tensor,
    /// `[B, F, 1, H, W]`.
    pub masks: Tensor,
    /// Frames with the face region filled, `[B, F, 3, H, W]`.
    pub masked_frames: Tensor,
    /// A frame of each clip, `[B, 3, H, W]`.
    pub source: Tensor,
    /// Face whose `f_gid` becomes `f_rid`; the source itself for same-identity samples.
    pub rid_faces: Tensor,
    pub same_identity: Vec<bool>,
}

impl Batch {
    pub fn cross_identity(&self) -> Vec<bool> {
        self.same_identity.iter().map(|s| !s).collect()
    }
}

/// Draws the batch of step `step`; the result depends only on `(cfg.seed, step)`.
pub fn sample_batch<D: ClipSource + ?Sized>(dataset: &D, cfg: &TrainConfig, frames: usize, step: usize) -> Result<Batch> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let seed = stream_seed(cfg.seed, step, STREAM_DATA);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let same_identity = identity_source_flags(cfg, step);
    let mut policy_rng = stream(cfg.seed, step, STREAM_POLICY + 100);
    let mut clip_indices = Vec::new();
    let (mut windows, mut masks, mut masked, mut sources, mut rids) = (vec![], vec![], vec![], vec![], vec![]);
    for &same in &same_identity {
        let index = rng.gen_range(0..dataset.len());
        let clip = dataset.clip(index)?;
        if clip.len() < frames {
            return Err(Error::invalid("dataset", format!("clip {index} has {} < {frames} frames", clip.len())));
        }
        let start = rng.gen_range(0..=clip.len() - frames);
        let window = clip.window(start, frames)?;
        let source = window.frame(rng.gen_range(0..frames))?;
        let rid = if same {
            source.clone()
        } else {
            other_identity_face(dataset, index, &mut policy_rng)?
        };
        masked.push(mask_face_region(&window)?.frames);
        masks.push(
            window
                .masks
                .clone()
                .ok_or_else(|| Error::invalid("masks", format!("clip {index} has no face masks")))?,
        );
        windows.push(window.frames);
        sources.push(source);
        rids.push(rid);
        clip_indices.push(index);
    }
    let f32s = |v: Vec<Tensor>| -> Result<Tensor> { Ok(Tensor::stack(&v, 0)?.to_dtype(DType::F32)?) };
    Ok(Batch {
        step,
        seed,
        clip_indices,
        frames: f32s(windows)?,
        masks: f32s(masks)?,
        masked_frames: f32s(masked)?,
        source: f32s(sources)?,
        rid_faces: f32s(rids)?,
        same_identity,
    })
}

fn other_identity_face<D: ClipSource + ?Sized>(dataset: &D, index: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let own = dataset.identity(index);
    for _ in 0..256 {
        let j = rng.gen_range(0..dataset.len());
        let other = dataset.identity(j);
        if own.is_none() || other.is_none() || other != own {
            if j == index {
                continue;
            }
            let clip = dataset.clip(j)?;
            return clip.frame(rng.gen_range(0..clip.len()));
        }
    }
    Err(Error::invalid("dataset", "no clip with a different identity"))
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub batch_seed: u64,
    pub loss_total: f64,
    pub loss_dm: f64,
    pub loss_fal: f64,
    pub loss_id: f64,
    pub loss_adv_g: f64,
    pub loss_attr: f64,
    pub loss_tid: f64,
    pub loss_rec: f64,
    pub loss_d: f64,
    pub r1_penalty: f64,
    /// Fraction of `M_f` entries equal to zero.
    pub mf_zero_fraction: f64,
    pub same_identity_rate: f64,
    pub token_drop_rate: f64,
}

impl MetricsRecord {
    /// `L_DM + λ_FAL·L_FAL + λ_id·L_id` from the logged parts.
    pub fn recombined_total(&self, cfg: &TrainConfig) -> f64 {
        self.loss_dm + cfg.lambda_fal * self.loss_fal + cfg.lambda_id * self.loss_id
    }
}

/// Model, optimizers and step counter.
pub struct TrainState {
    pub model: Model,
    pub model_config: ModelConfig,
    pub config: TrainConfig,
    pub step: usize,
    gen_opt: AdamW,
    fal_opt: AdamW,
    disc_opt: AdamW,
}

const DISC_PREFIX: &str = "fal.discriminator.";

impl TrainState {
    pub fn new(model_config: ModelConfig, config: TrainConfig, pre: &Pretrained) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config.clone(), pre, config.seed)?;
        let vars = model.store.vars();
        let pick = |f: &dyn Fn(&str) -> bool| -> Vec<_> { vars.iter().filter(|(n, _)| f(n)).cloned().collect() };
        let adam = |lr| AdamWConfig {
            lr,
            weight_decay: config.weight_decay,
            ..Default::default()
        };
        let gen_opt = AdamW::new(pick(&|n| !n.starts_with("fal.")), adam(config.learning_rate))?;
        let fal_opt = AdamW::new(
            pick(&|n| n.starts_with("fal.") && !n.starts_with(DISC_PREFIX)),
            adam(config.learning_rate),
        )?;
        let disc_opt = AdamW::new(pick(&|n| n.starts_with(DISC_PREFIX)), adam(config.disc_learning_rate))?;
        Ok(Self {
            model,
            model_config,
            config,
            step: 0,
            gen_opt,
            fal_opt,
            disc_opt,
        })
    }

    pub fn to_archive(&self, pre: &Pretrained) -> Result<Archive> {
        let mut a = Archive::new()
            .with_meta("model", &self.model_config)?
            .with_meta("train", &self.config)?
            .with_meta("step", self.step)?
            .with_meta(
                "optimizer_steps",
                [self.gen_opt.steps_taken(), self.fal_opt.steps_taken(), self.disc_opt.steps_taken()],
            )?
            .with_meta("sigma_data", pre.sigma_data())?
            .with_meta("codec_hash", pre.codec_hash()?)?
            .with_meta("idenc_hash", pre.idenc_hash()?)?;
        a.extend(self.model.store.tensors());
        a.extend(self.gen_opt.state("optim.gen"));
        a.extend(self.fal_opt.state("optim.fal"));
        a.extend(self.disc_opt.state("optim.disc"));
        Ok(a)
    }

    pub fn from_archive(a: &Archive, pre: &Pretrained) -> Result<Self> {
        check_pins(a, pre)?;
        let mut state = Self::new(a.meta("model")?, a.meta("train")?, pre)?;
        let params: BTreeMap<String, Tensor> = a
            .tensors
            .iter()
            .filter(|(k, _)| !k.starts_with(OPT_PREFIX))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        if params.len() != state.model.store.tensors().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model has {}",
                params.len(),
                state.model.store.tensors().len()
            )));
        }
        state.model.store.load(&params)?;
        let [g, f, d]: [u64; 3] = a.meta("optimizer_steps")?;
        state.gen_opt.load_state("optim.gen", &a.tensors, g)?;
        state.fal_opt.load_state("optim.fal", &a.tensors, f)?;
        state.disc_opt.load_state("optim.disc", &a.tensors, d)?;
        state.step = a.meta("step")?;
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>, pre: &Pretrained) -> Result<()> {
        self.to_archive(pre)?.save(path)
    }

    pub fn load(path: impl AsRef<Path>, pre: &Pretrained) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, pre)
    }

    /// Names of the parameters updated by the generator-side step.
    pub fn generator_parameter_names(&self) -> Vec<String> {
        self.gen_opt
            .var_names()
            .chain(self.fal_opt.var_names())
            .map(str::to_string)
            .collect()
    }

    pub fn discriminator_parameter_names(&self) -> Vec<String> {
        self.disc_opt.var_names().map(str::to_string).collect()
    }

    /// Samples the batch for the current step and trains on it.
    pub fn step_on<D: ClipSource + ?Sized>(&mut self, pre: &Pretrained, dataset: &D) -> Result<MetricsRecord> {
        let batch = sample_batch(dataset, &self.config, self.model_config.denoiser.frames, self.step)?;
        Ok(training_step(self, pre, &batch)?.record)
    }
}

/// Gradients of one step, kept apart for inspection.
pub struct StepOutput {
    pub record: MetricsRecord,
    pub generator_grads: GradStore,
    pub discriminator_grads: Option<GradStore>,
}

fn f64_scalar(t: &Tensor) -> Result<Tensor> {
    Ok(t.to_dtype(DType::F64)?)
}

fn pick_frames(total: usize, keep: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    if keep == 0 || keep >= total {
        return (0..total as u32).collect();
    }
    let mut idx: Vec<u32> = sample(rng, total, keep).into_iter().map(|i| i as u32).collect();
    idx.sort_unstable();
    idx
}

/// One generator step on the joint objective and one discriminator step.
pub fn training_step(state: &mut TrainState, pre: &Pretrained, batch: &Batch) -> Result<StepOutput> {
    let cfg = state.config.clone();
    let step = state.step;
    if batch.step != step {
        return Err(Error::invalid("batch", format!("batch for step {} given at step {step}", batch.step)));
    }
    let model = &state.model;
    let (b, f) = (batch.frames.dims()[0], batch.frames.dims()[1]);
    let sd = pre.sigma_data();

    let x0 = pre.encode(&batch.frames)?.detach();
    let masked = pre.encode(&batch.masked_frames)?.detach();
    let v = model.fal_input(pre, &batch.frames, &x0)?.detach();
    let faces = Tensor::cat(&[&batch.source, &batch.rid_faces], 0)?;
    let (gid, did) = pre.idenc.embed(&faces)?;
    let f_src = gid.narrow(0, 0, b)?.detach();
    let f_rid = gid.narrow(0, b, b)?.detach();
    let f_did = did.narrow(0, 0, b)?.detach();

    let mut rng = stream(cfg.seed, step, STREAM_TOKENS);
    let dropped: Vec<bool> = (0..b).map(|_| rng.gen_bool(cfg.token_drop_prob)).collect();
    let mut tokens = model.tokenizer.forward(&f_did)?;
    if dropped.iter().any(|&d| d) {
        let keep: Vec<f32> = dropped.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
        let keep = Tensor::from_vec(keep, (b, 1, 1), &Device::Cpu)?;
        let null = model.denoiser.null_tokens().unsqueeze(0)?;
        tokens = (tokens.broadcast_mul(&keep)? + null.broadcast_mul(&(1.0 - &keep)?)?)?;
    }

    let mf: Vec<f32> = if step < cfg.warmup_steps {
        vec![0.0; b * f]
    } else {
        let mut rng = stream(cfg.seed, step, STREAM_MASK);
        (0..b * f).map(|_| if rng.gen_bool(cfg.attr_drop_prob) { 0.0 } else { 1.0 }).collect()
    };
    let mf_zero_fraction = mf.iter().filter(|&&m| m == 0.0).count() as f64 / mf.len() as f64;
    let attrs = model.fal.encoder.forward(&v)?;
    let cond = ConditioningBundle {
        masked_target: masked,
        identity_tokens: IdentityTokens::Tokens(tokens),
        attribute_low: Some(attrs.f_low.clone()),
        frame_mask: Tensor::from_vec(mf, (b, f), &Device::Cpu)?,
    };
    let dsm = dsm_loss(
        |x, s| denoise(&model.denoiser, x, s, sd, &cond),
        &x0,
        &cfg.sigma,
        sd,
        &mut stream(cfg.seed, step, STREAM_SIGMA),
    )?;
    let l_dm = f64_scalar(&dsm.loss)?;

    let same_identity_rate = batch.same_identity.iter().filter(|&&s| s).count() as f64 / b as f64;
    let token_drop_rate = dropped.iter().filter(|&&d| d).count() as f64 / b as f64;
    let mut record = MetricsRecord {
        step,
        batch_seed: batch.seed,
        loss_total: 0.0,
        loss_dm: scalar(&l_dm)?,
        loss_fal: 0.0,
        loss_id: 0.0,
        loss_adv_g: 0.0,
        loss_attr: 0.0,
        loss_tid: 0.0,
        loss_rec: 0.0,
        loss_d: 0.0,
        r1_penalty: 0.0,
        mf_zero_fraction,
        same_identity_rate,
        token_drop_rate,
    };

    let (total, disc_total) = match cfg.objective {
        Objective::Diffusion => (l_dm, None),
        Objective::Joint => {
            let frame_idx = pick_frames(f, cfg.id_loss_frames, &mut stream(cfg.seed, step, STREAM_ID_FRAMES));
            let frame_idx = Tensor::new(frame_idx.as_slice(), &Device::Cpu)?;

            let x_hat = dsm.denoised.index_select(&frame_idx, 1)?;
            let emb = pre.frame_identities(&pre.decode(&x_hat)?)?;
            let l_id = f64_scalar(&identity_loss_from_embeddings(&f_src, &emb)?)?;

            let v_prime = model.fal.decoder.forward(&attrs.f_attr, &f_rid)?;
            let attrs_prime = model.fal.encoder.forward(&v_prime)?;
            let l_attr = attr_consistency_loss(&attrs.f_attr, &attrs_prime.f_attr)?;

            let same_w: Vec<f32> = batch
                .same_identity
                .iter()
                .map(|&s| if s { 1.0 } else { 0.0 })
                .collect();
            let per_sample = (&v_prime - &v)?.sqr()?.reshape((b, ()))?.mean(1)?;
            let l_rec = ((per_sample * Tensor::from_vec(same_w, b, &Device::Cpu)?)?.sum_all()? * (0.5 / b as f64))?;

            let cross: Vec<u32> = (0..b as u32).filter(|&i| !batch.same_identity[i as usize]).collect();
            let l_tid = if cross.is_empty() {
                Tensor::zeros((), DType::F32, &Device::Cpu)?
            } else {
                let ci = Tensor::new(cross.as_slice(), &Device::Cpu)?;
                let fake = model
                    .fal_to_pixels(pre, &v_prime.index_select(&ci, 0)?.index_select(&frame_idx, 1)?)?;
                let real = batch.frames.index_select(&ci, 0)?.index_select(&frame_idx, 1)?;
                let gid_fake = pre.frame_identities(&fake)?;
                let gid_real = pre.frame_identities(&real)?.detach();
                let (n, k, d) = gid_fake.dims3()?;
                let rid = f_rid
                    .index_select(&ci, 0)?
                    .unsqueeze(1)?
                    .broadcast_as((n, k, d))?
                    .reshape((n * k, d))?;
                let t = triplet_identity_loss(
                    &gid_fake.reshape((n * k, d))?,
                    &gid_real.reshape((n * k, d))?,
                    &rid,
                    cfg.fal_weights.margin,
                )?;
                (t * (n as f64 / b as f64))?
            };

            let adv = adversarial_losses(
                &model.fal.discriminator,
                &v,
                &v_prime,
                &batch.cross_identity(),
                cfg.r1_directions,
                cfg.r1_step,
                &mut stream(cfg.seed, step, STREAM_R1),
            )?;
            let parts = FalParts {
                adv: f64_scalar(&adv.g_loss)?,
                attr: f64_scalar(&l_attr)?,
                tid: f64_scalar(&l_tid)?,
                rec: f64_scalar(&l_rec)?,
            };
            let l_fal = fal_total_loss(&parts, &cfg.fal_weights)?;
            record.loss_adv_g = scalar(&parts.adv)?;
            record.loss_attr = scalar(&parts.attr)?;
            record.loss_tid = scalar(&parts.tid)?;
            record.loss_rec = scalar(&parts.rec)?;
            record.loss_fal = scalar(&l_fal)?;
            record.loss_id = scalar(&l_id)?;
            record.loss_d = scalar(&adv.d_loss)?;
            record.r1_penalty = scalar(&adv.r1_penalty)?;
            let total = ((l_dm + (l_fal * cfg.lambda_fal)?)? + (l_id * cfg.lambda_id)?)?;
            let disc = (adv.d_loss + (adv.r1_penalty * cfg.r1_weight)?)?;
            (total, Some(disc))
        }
    };
    record.loss_total = scalar(&total)?;
    let finite = [record.loss_total, record.loss_d, record.r1_penalty].iter().all(|x| x.is_finite());
    if !finite {
        return Err(Error::NonFinite(format!(
            "training loss at step {step} (batch seed {}, clips {:?})",
            batch.seed, batch.clip_indices
        )));
    }

    let generator_grads = total.backward()?;
    let discriminator_grads = disc_total.map(|d| d.backward()).transpose()?;
    state.gen_opt.step(&generator_grads)?;
    let fal_frozen = cfg.freeze_fal_after_warmup && step >= cfg.warmup_steps;
    if !fal_frozen {
        state.fal_opt.step(&generator_grads)?;
        if let Some(g) = &discriminator_grads {
            state.disc_opt.step(g)?;
        }
    }
    state.step += 1;
    Ok(StepOutput {
        record,
        generator_grads,
        discriminator_grads,
    })
}

/// Where and how [`fit`] persists progress.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Checkpoints and `metrics.ndjson` go here; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Stop before this step instead of `total_steps` (simulates an interruption).
    pub stop_at: Option<usize>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";

/// Runs steps from `state.step` to `total_steps`, appending to the metrics log
/// and writing periodic checkpoints. A state loaded from the last checkpoint
/// continues the log where that checkpoint left it.
pub fn fit<D, C>(state: &mut TrainState, pre: &Pretrained, dataset: &D, opts: &FitOptions, mut on_step: C) -> Result<Vec<MetricsRecord>>
where
    D: ClipSource + ?Sized,
    C: FnMut(&MetricsRecord),
{
    let end = opts.stop_at.unwrap_or(state.config.total_steps).min(state.config.total_steps);
    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(open_metrics_log(&dir.join(METRICS_FILE), state.step)?)
        }
        None => None,
    };
    let mut records = Vec::new();
    while state.step < end {
        let record = match state.step_on(pre, dataset) {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                if let Some(dir) = &opts.out_dir {
                    let dump = serde_json::json!({
                        "step": state.step,
                        "batch_seed": stream_seed(state.config.seed, state.step, STREAM_DATA),
                        "seed": state.config.seed,
                        "error": e.to_string(),
                    });
                    std::fs::write(dir.join(NAN_DUMP_FILE), serde_json::to_string_pretty(&dump)?)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some(log) = &mut log {
            writeln!(log, "{}", serde_json::to_string(&record)?)?;
            log.flush()?;
        }
        on_step(&record);
        records.push(record);
        let every = state.config.checkpoint_every;
        if let Some(dir) = &opts.out_dir {
            if every > 0 && state.step % every == 0 {
                state.save(dir.join(CHECKPOINT_FILE), pre)?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        state.save(dir.join(CHECKPOINT_FILE), pre)?;
    }
    Ok(records)
}

/// Opens the metrics log for appending, dropping records at or after `from_step`.
fn open_metrics_log(path: &Path, from_step: usize) -> Result<File> {
    let mut kept = Vec::new();
    if from_step > 0 && path.exists() {
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: MetricsRecord = serde_json::from_str(&line)?;
            if r.step < from_step {
                kept.push(line);
            }
        }
    }
    let mut f = File::create(path)?;
    for line in kept {
        writeln!(f, "{line}")?;
    }
    drop(f);
    Ok(OpenOptions::new().append(true).open(path)?)
}

pub fn read_metrics_log(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwapOptions {
    pub schedule: SamplerSchedule,
    pub seed: u64,
    /// Frame overlap between co-denoised windows for long targets.
    pub overlap: usize,
    /// `false` forces `M_f = 0`, removing the attribute features.
    pub use_attributes: bool,
    /// Window length; defaults to the training clip length.
    pub clip_len: Option<usize>,
    /// Samples long targets as separate non-overlapping windows instead of co-denoising them.
    pub independent_windows: bool,
}

impl Default for SwapOptions {
    fn default() -> Self {
        Self {
            schedule: SamplerSchedule::default(),
            seed: 0,
            overlap: 2,
            use_attributes: true,
            clip_len: None,
            independent_windows: false,
        }
    }
}

/// Generated clip before and after compositing.
#[derive(Debug, Clone)]
pub struct SwapResult {
    /// Generated face pasted onto the target background.
    pub clip: VideoClip,
    /// Full decoded sample, clamped to `[-1, 1]`, `[F, 3, H, W]`.
    pub generated: Tensor,
    /// Whether windows were co-denoised.
    pub windowed: bool,
}

/// Swaps `source` into `target`.
pub fn swap(model: &Model, pre: &Pretrained, source: &SourceFace, target: &VideoClip, opts: &SwapOptions) -> Result<SwapResult> {
    Ok(swap_batch(model, pre, &[(source, target)], opts)?.remove(0))
}

/// Swaps several pairs of equal-length targets in one sampler run. Pair `i`
/// draws its starting noise from `opts.seed + i`, so results do not depend on
/// how pairs are grouped.
pub fn swap_batch(
    model: &Model,
    pre: &Pretrained,
    pairs: &[(&SourceFace, &VideoClip)],
    opts: &SwapOptions,
) -> Result<Vec<SwapResult>> {
    if pairs.is_empty() {
        return Err(Error::Empty("swap pairs"));
    }
    opts.schedule.validate()?;
    let s = pre.idenc.config().input_size;
    let f = pairs[0].1.len();
    let size = pairs[0].1.size();
    for (src, tgt) in pairs {
        if src.image.dims() != [3, s, s] {
            return Err(Error::invalid(
                "source",
                format!("expected a [3, {s}, {s}] face, got {:?}", src.image.dims()),
            ));
        }
        if tgt.len() != f || tgt.size() != size {
            return Err(Error::invalid("target", "all targets in a batch must share length and size"));
        }
        if tgt.masks.is_none() {
            return Err(Error::invalid("target", "target clip needs face masks"));
        }
    }
    let clip_len = opts.clip_len.unwrap_or(model.config.denoiser.frames);
    let stack = |v: Vec<Tensor>| -> Result<Tensor> { Ok(Tensor::stack(&v, 0)?.to_dtype(DType::F32)?) };
    let frames = stack(pairs.iter().map(|(_, t)| t.frames.clone()).collect())?;
    let masks = stack(pairs.iter().map(|(_, t)| t.masks.clone().expect("checked")).collect())?;
    let masked = stack(
        pairs
            .iter()
            .map(|(_, t)| Ok(mask_face_region(t)?.frames))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let sources = stack(pairs.iter().map(|(src, _)| src.image.clone()).collect())?;
    let b = pairs.len();

    let latents = pre.encode(&frames)?;
    let masked_latents = pre.encode(&masked)?;
    let attrs = model.fal.encoder.forward(&model.fal_input(pre, &frames, &latents)?)?;
    let (_, f_did) = pre.idenc.embed(&sources)?;
    let tokens = model.tokenizer.forward(&f_did)?;
    let gate = if opts.use_attributes { 1.0 } else { 0.0 };
    let cond = ConditioningBundle {
        masked_target: masked_latents,
        identity_tokens: IdentityTokens::Tokens(tokens),
        attribute_low: Some(attrs.f_low),
        frame_mask: (Tensor::ones((b, f), DType::F32, &Device::Cpu)? * gate)?,
    };
    let guided = Guided {
        uncond: Some(cond.unconditional()),
        cond,
    };
    let dims = latents.dims().to_vec();
    let noise = (0..b)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i as u64));
            Ok((randn(&mut rng, &dims[1..], DType::F32)? * opts.schedule.sigma_max)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let init = Tensor::stack(&noise, 0)?;
    let windowed = f > clip_len;
    let z = if windowed && opts.independent_windows {
        let mut parts = Vec::new();
        let mut covered = 0usize;
        for start in window_starts(f, clip_len, 0)? {
            let zi = edm_sample(
                &model.denoiser,
                &guided.window(start, clip_len)?,
                &opts.schedule,
                pre.sigma_data(),
                &init.narrow(1, start, clip_len)?,
            )?;
            let skip = covered.saturating_sub(start);
            parts.push(zi.narrow(1, skip, clip_len - skip)?);
            covered = start + clip_len;
        }
        Tensor::cat(&parts, 1)?
    } else if windowed {
        temporal_codenoise(&model.denoiser, &guided, clip_len, opts.overlap, &opts.schedule, pre.sigma_data(), &init)?
    } else {
        edm_sample(&model.denoiser, &guided, &opts.schedule, pre.sigma_data(), &init)?
    };
    let generated = pre.decode(&z)?.clamp(-1.0, 1.0)?;
    let m = masks.broadcast_as(frames.dims())?;
    let composite = (generated.broadcast_mul(&m)? + frames.broadcast_mul(&(1.0 - &m)?)?)?;
    (0..b)
        .map(|i| {
            let target = pairs[i].1;
            let clip = VideoClip {
                frames: composite.get(i)?,
                masks: target.masks.clone(),
                factors: None,
                fps: target.fps,
            };
            Ok(SwapResult {
                clip,
                generated: generated.get(i)?,
                windowed,
            })
        })
        .collect()
}

/// The number of parameters in each top-level block, for logs.
pub fn parameter_summary(model: &Model) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (name, t) in model.store.tensors() {
        let key = if name.starts_with("fal.") {
            name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".")
        } else {
            name.split('.').next().unwrap_or("").to_string()
        };
        *out.entry(key).or_insert(0) += t.elem_count();
    }
    out
}
