use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of procedural identities in the default codebook.
pub const CODEBOOK_SIZE: usize = 256;
const CODEBOOK_SEED: u64 = 0x1d_c0de_b00c;

/// Ground-truth generative factors of one rendered frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFactors {
    pub identity_id: u32,
    /// Horizontal head offset in `[-1, 1]`.
    pub pose: f32,
    /// Illumination gradient strength in `[0, 1]`.
    pub lighting: f32,
    /// Mouth curvature in `[-1, 1]`.
    pub expression: f32,
    pub makeup_marker: bool,
}

impl SyntheticFactors {
    pub fn validate(&self, codebook_size: usize) -> Result<()> {
        if self.identity_id as usize >= codebook_size {
            return Err(Error::invalid(
                "identity_id",
                format!("{} >= codebook size {codebook_size}", self.identity_id),
            ));
        }
        check_range("pose", self.pose, -1.0, 1.0)?;
        check_range("lighting", self.lighting, 0.0, 1.0)?;
        check_range("expression", self.expression, -1.0, 1.0)?;
        Ok(())
    }

    pub fn with_delta(&self, d: &FactorDelta) -> Self {
        Self {
            pose: self.pose + d.pose,
            lighting: self.lighting + d.lighting,
            expression: self.expression + d.expression,
            ..*self
        }
    }
}

fn check_range(field: &'static str, v: f32, lo: f32, hi: f32) -> Result<()> {
    if !(lo..=hi).contains(&v) {
        return Err(Error::invalid(field, format!("{v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

/// Per-frame offset applied to a clip's base factors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FactorDelta {
    pub pose: f32,
    pub lighting: f32,
    pub expression: f32,
}

/// Geometry and colour coefficients of one procedural identity. Coordinates are
/// in units of the frame size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityParams {
    pub skin: [f32; 3],
    pub hair: [f32; 3],
    pub eye: [f32; 3],
    pub lip: [f32; 3],
    pub radius_x: f32,
    pub radius_y: f32,
    pub eye_spacing: f32,
    pub eye_radius: f32,
    pub eye_height: f32,
    pub mouth_width: f32,
    pub hair_fraction: f32,
    pub nose_length: f32,
}

#[derive(Debug, Clone)]
pub struct IdentityCodebook {
    entries: Vec<IdentityParams>,
}

impl IdentityCodebook {
    pub fn new(size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(CODEBOOK_SEED);
        let entries = (0..size).map(|_| IdentityParams::sample(&mut rng)).collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&IdentityParams> {
        self.entries.get(id as usize)
    }
}

impl Default for IdentityCodebook {
    fn default() -> Self {
        Self::new(CODEBOOK_SIZE)
    }
}

impl IdentityParams {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let tone: f32 = rng.gen_range(0.25..0.95);
        let skin = [
            (tone + rng.gen_range(0.0..0.12)).min(1.0),
            tone * rng.gen_range(0.70..0.85),
            tone * rng.gen_range(0.50..0.70),
        ];
        let mut color = |lo: f32, hi: f32| -> [f32; 3] {
            [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
        };
        let hair = color(0.0, 0.7);
        let eye = color(0.0, 0.5);
        let lip = {
            let c = color(0.0, 0.3);
            [0.55 + c[0], 0.1 + c[1] * 0.5, 0.15 + c[2] * 0.5]
        };
        Self {
            skin,
            hair,
            eye,
            lip,
            radius_x: rng.gen_range(0.18..0.25),
            radius_y: rng.gen_range(0.24..0.31),
            eye_spacing: rng.gen_range(0.12..0.20),
            eye_radius: rng.gen_range(0.025..0.045),
            eye_height: rng.gen_range(0.04..0.09),
            mouth_width: rng.gen_range(0.06..0.11),
            hair_fraction: rng.gen_range(0.15..0.45),
            nose_length: rng.gen_range(0.03..0.08),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_names_field() {
        let f = SyntheticFactors {
            identity_id: 0,
            pose: 0.0,
            lighting: 1.5,
            expression: 0.0,
            makeup_marker: false,
        };
        match f.validate(CODEBOOK_SIZE) {
            Err(Error::InvalidArgument { field, .. }) => assert_eq!(field, "lighting"),
            other => panic!("unexpected {other:?}"),
        }
        let g = SyntheticFactors {
            identity_id: 256,
            lighting: 0.5,
            ..f
        };
        assert!(matches!(
            g.validate(CODEBOOK_SIZE),
            Err(Error::InvalidArgument { field: "identity_id", .. })
        ));
    }

    #[test]
    fn codebook_is_stable() {
        let a = IdentityCodebook::new(8);
        let b = IdentityCodebook::new(8);
        assert_eq!(a.get(5), b.get(5));
        assert_ne!(a.get(4), a.get(5));
    }
}
