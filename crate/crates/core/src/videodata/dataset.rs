use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clip::{generate_synthetic_clip, SourceFace, VideoClip};
use super::factors::{FactorDelta, IdentityCodebook, SyntheticFactors};
use crate::error::{Error, Result};
use crate::nn::fnv1a;

/// Anything that can hand out clips by index.
pub trait ClipSource: Sync {
    fn len(&self) -> usize;
    fn clip(&self, index: usize) -> Result<VideoClip>;
    /// Identity label of a clip, when known without rendering it.
    fn identity(&self, index: usize) -> Option<u32>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetConfig {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub identities: usize,
    pub seed: u64,
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        Self {
            clips: 512,
            frames: 16,
            height: 64,
            width: 64,
            identities: 256,
            seed: 0,
        }
    }
}

/// Lazily rendered synthetic dataset. Clip `i` has identity `i % identities`;
/// its base factors, motion and background are derived from `(seed, i)`.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SyntheticDatasetConfig,
    codebook: IdentityCodebook,
}

impl SyntheticDataset {
    pub fn new(config: SyntheticDatasetConfig) -> Result<Self> {
        let codebook = IdentityCodebook::default();
        if config.identities == 0 || config.identities > codebook.len() {
            return Err(Error::invalid(
                "identities",
                format!("must be in 1..={}", codebook.len()),
            ));
        }
        Ok(Self { config, codebook })
    }

    pub fn codebook(&self) -> &IdentityCodebook {
        &self.codebook
    }

    fn clip_seed(&self, index: usize) -> u64 {
        self.config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a(&(index as u64).to_le_bytes())
    }

    /// Base factors and motion for clip `index`.
    pub fn clip_factors(&self, index: usize) -> (SyntheticFactors, Vec<FactorDelta>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.clip_seed(index));
        sample_factors_and_motion(&mut rng, (index % self.config.identities) as u32, self.config.frames)
    }
}

/// Random base factors plus a smooth in-range trajectory over `frames`.
pub fn sample_factors_and_motion<R: Rng>(
    rng: &mut R,
    identity_id: u32,
    frames: usize,
) -> (SyntheticFactors, Vec<FactorDelta>) {
    let base = SyntheticFactors {
        identity_id,
        pose: rng.gen_range(-0.8..0.8),
        lighting: rng.gen_range(0.0..1.0),
        expression: rng.gen_range(-0.9..0.9),
        makeup_marker: rng.gen_bool(0.25),
    };
    let pose_vel: f32 = rng.gen_range(-0.05..0.05);
    let light_vel: f32 = rng.gen_range(-0.02..0.02);
    let expr_amp: f32 = rng.gen_range(0.0..0.4);
    let expr_freq: f32 = rng.gen_range(0.2..0.8);
    let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let motion = (0..frames)
        .map(|t| {
            let t = t as f32;
            let pose = (base.pose + pose_vel * t).clamp(-1.0, 1.0);
            let lighting = (base.lighting + light_vel * t).clamp(0.0, 1.0);
            let expression = (base.expression + expr_amp * ((expr_freq * t + phase).sin() - phase.sin())).clamp(-1.0, 1.0);
            FactorDelta {
                pose: pose - base.pose,
                lighting: lighting - base.lighting,
                expression: expression - base.expression,
            }
        })
        .collect();
    (base, motion)
}

impl ClipSource for SyntheticDataset {
    fn len(&self) -> usize {
        self.config.clips
    }

    fn clip(&self, index: usize) -> Result<VideoClip> {
        if index >= self.len() {
            return Err(Error::invalid("index", format!("{index} >= {}", self.len())));
        }
        let (base, motion) = self.clip_factors(index);
        generate_synthetic_clip(
            &self.codebook,
            &base,
            &motion,
            self.config.frames,
            (self.config.height, self.config.width),
            self.clip_seed(index),
        )
    }

    fn identity(&self, index: usize) -> Option<u32> {
        Some((index % self.config.identities) as u32)
    }
}

/// Picks a clip uniformly and one of its frames uniformly as the source face.
pub fn sample_training_pair<D: ClipSource + ?Sized, R: Rng>(
    dataset: &D,
    rng: &mut R,
) -> Result<(VideoClip, SourceFace, usize)> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let index = rng.gen_range(0..dataset.len());
    let clip = dataset.clip(index)?;
    let frame = rng.gen_range(0..clip.len());
    let source = clip.source_face(frame)?;
    Ok((clip, source, index))
}

/// In-memory clip list, e.g. loaded from disk.
#[derive(Debug, Clone, Default)]
pub struct ClipList {
    pub clips: Vec<VideoClip>,
}

impl ClipSource for ClipList {
    fn len(&self) -> usize {
        self.clips.len()
    }

    fn clip(&self, index: usize) -> Result<VideoClip> {
        self.clips
            .get(index)
            .cloned()
            .ok_or_else(|| Error::invalid("index", format!("{index} >= {}", self.clips.len())))
    }

    fn identity(&self, index: usize) -> Option<u32> {
        self.clips.get(index).and_then(|c| c.identity_id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::bit_equal;

    fn small() -> SyntheticDataset {
        SyntheticDataset::new(SyntheticDatasetConfig {
            clips: 6,
            frames: 16,
            height: 32,
            width: 32,
            identities: 3,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn pair_shares_identity_and_is_reproducible() {
        let ds = small();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let (c1, s1, i1) = sample_training_pair(&ds, &mut r1).unwrap();
        let (_, s2, i2) = sample_training_pair(&ds, &mut r2).unwrap();
        assert_eq!(i1, i2);
        assert!(bit_equal(&s1.image, &s2.image).unwrap());
        assert_eq!(s1.factors.unwrap().identity_id, c1.identity_id().unwrap());
    }

    #[test]
    fn single_frame_clip_source_is_that_frame() {
        let ds = SyntheticDataset::new(SyntheticDatasetConfig {
            frames: 1,
            ..small().config
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (clip, src, _) = sample_training_pair(&ds, &mut rng).unwrap();
        assert!(bit_equal(&src.image, &clip.frame(0).unwrap()).unwrap());
    }

    #[test]
    fn empty_dataset_errors() {
        let empty = ClipList::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_training_pair(&empty, &mut rng), Err(Error::Empty(_))));
    }

    #[test]
    fn motion_stays_in_range() {
        let ds = small();
        for i in 0..ds.len() {
            let c = ds.clip(i).unwrap();
            for f in c.factors.unwrap() {
                f.validate(256).unwrap();
            }
        }
    }
}
