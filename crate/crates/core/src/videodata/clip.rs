use candle_core::{DType, Device, Tensor};

use super::factors::{FactorDelta, IdentityCodebook, SyntheticFactors};
use super::render::{render_frame, Background};
use crate::error::{Error, Result};

/// Fill value written into the masked face region (mid-gray of `[-1, 1]`).
pub const MASK_FILL: f32 = 0.0;

/// An aligned face clip.
///
/// `frames` is stored channel-first as `[F, C, H, W]` (values in `[-1, 1]`),
/// `masks` as `[F, 1, H, W]` with entries in `{0, 1}`.
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub frames: Tensor,
    pub masks: Option<Tensor>,
    pub factors: Option<Vec<SyntheticFactors>>,
    /// Frame rate as a rational `(num, den)`; metadata only.
    pub fps: (u32, u32),
}

/// Source identity image, `[C, H, W]`.
#[derive(Debug, Clone)]
pub struct SourceFace {
    pub image: Tensor,
    pub factors: Option<SyntheticFactors>,
}

impl VideoClip {
    pub fn new(frames: Tensor, masks: Option<Tensor>, factors: Option<Vec<SyntheticFactors>>) -> Result<Self> {
        let (f, _, h, w) = frames.dims4()?;
        if f == 0 {
            return Err(Error::invalid("frames", "clip needs at least one frame"));
        }
        if let Some(m) = &masks {
            if m.dims() != [f, 1, h, w] {
                return Err(Error::shape("VideoClip::new", [f, 1, h, w], m.dims()));
            }
        }
        if let Some(fs) = &factors {
            if fs.len() != f {
                return Err(Error::invalid("factors", format!("{} entries for {f} frames", fs.len())));
            }
            if fs.iter().any(|x| x.identity_id != fs[0].identity_id) {
                return Err(Error::invalid("factors", "identity_id varies within a clip"));
            }
        }
        Ok(Self {
            frames,
            masks,
            factors,
            fps: (25, 1),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(H, W)`.
    pub fn size(&self) -> (usize, usize) {
        let d = self.frames.dims();
        (d[2], d[3])
    }

    pub fn identity_id(&self) -> Option<u32> {
        self.factors.as_ref().map(|f| f[0].identity_id)
    }

    pub fn frame(&self, i: usize) -> Result<Tensor> {
        Ok(self.frames.get(i)?)
    }

    pub fn source_face(&self, i: usize) -> Result<SourceFace> {
        Ok(SourceFace {
            image: self.frame(i)?,
            factors: self.factors.as_ref().map(|f| f[i]),
        })
    }

    /// Frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            frames: self.frames.narrow(0, start, len)?,
            masks: self.masks.as_ref().map(|m| m.narrow(0, start, len)).transpose()?,
            factors: self.factors.as_ref().map(|f| f[start..start + len].to_vec()),
            fps: self.fps,
        })
    }
}

/// Renders a clip from base factors plus per-frame deltas.
///
/// `motion` must be empty (static clip) or hold exactly `frames` entries.
pub fn generate_synthetic_clip(
    codebook: &IdentityCodebook,
    factors: &SyntheticFactors,
    motion: &[FactorDelta],
    frames: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<VideoClip> {
    let (h, w) = size;
    if h < 16 || w < 16 {
        return Err(Error::invalid("size", format!("{h}x{w} is below 16x16")));
    }
    if frames == 0 {
        return Err(Error::invalid("frames", "must be >= 1"));
    }
    if !motion.is_empty() && motion.len() != frames {
        return Err(Error::invalid("motion", format!("{} deltas for {frames} frames", motion.len())));
    }
    factors.validate(codebook.len())?;
    let id = codebook
        .get(factors.identity_id)
        .ok_or_else(|| Error::invalid("identity_id", "not in codebook"))?;
    let bg = Background::from_seed(seed);
    let mut pixels: Vec<f32> = Vec::with_capacity(frames * 3 * h * w);
    let mut masks = Vec::with_capacity(frames * h * w);
    let mut per_frame = Vec::with_capacity(frames);
    for t in 0..frames {
        let ft = match motion.get(t) {
            Some(d) => factors.with_delta(d),
            None => *factors,
        };
        ft.validate(codebook.len())?;
        let (px, m) = render_frame(id, &ft, &bg, h, w);
        // HWC -> CHW
        for c in 0..3 {
            pixels.extend(px.iter().skip(c).step_by(3));
        }
        masks.extend_from_slice(&m);
        per_frame.push(ft);
    }
    let frames_t = Tensor::from_vec(pixels, (frames, 3, h, w), &Device::Cpu)?;
    let masks_t = Tensor::from_vec(masks, (frames, 1, h, w), &Device::Cpu)?;
    VideoClip::new(frames_t, Some(masks_t), Some(per_frame))
}

/// Replaces the face region with [`MASK_FILL`]; background is untouched bit-exactly.
pub fn mask_face_region(clip: &VideoClip) -> Result<VideoClip> {
    let masks = clip
        .masks
        .as_ref()
        .ok_or_else(|| Error::invalid("masks", "clip has no face masks"))?;
    let fill = Tensor::full(MASK_FILL, clip.frames.dims(), &Device::Cpu)?.to_dtype(clip.frames.dtype())?;
    let cond = masks.ge(0.5)?.broadcast_as(clip.frames.dims())?;
    let frames = cond.where_cond(&fill, &clip.frames)?;
    Ok(VideoClip {
        frames,
        ..clip.clone()
    })
}

/// Stacks clips of equal shape into `[B, F, C, H, W]`.
pub fn stack_frames(clips: &[&VideoClip]) -> Result<Tensor> {
    let t: Vec<Tensor> = clips.iter().map(|c| c.frames.clone()).collect();
    Ok(Tensor::stack(&t, 0)?.to_dtype(DType::F32)?)
}
