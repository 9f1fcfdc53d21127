//! Procedural face renderer. A pure function of `(factors, seed, size)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::factors::{IdentityParams, SyntheticFactors};

/// Smooth background shared by every frame of a clip; depends only on the seed.
#[derive(Debug, Clone, Copy)]
pub struct Background {
    top: [f32; 3],
    bottom: [f32; 3],
    blobs: [([f32; 2], f32, [f32; 3]); 2],
}

impl Background {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbac6_0000);
        let mut col = || [rng.gen_range(0.1..0.9f32), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        let top = col();
        let bottom = col();
        let c1 = col();
        let c2 = col();
        let mut blob = |c: [f32; 3]| {
            let x = rng.gen_range(0.0..1.0f32);
            let y = rng.gen_range(0.0..1.0f32);
            let r = rng.gen_range(0.1..0.3f32);
            ([x, y], r, c)
        };
        let blobs = [blob(c1), blob(c2)];
        Self { top, bottom, blobs }
    }

    fn color(&self, u: f32, v: f32) -> [f32; 3] {
        let mut c = [0.0; 3];
        for (k, ck) in c.iter_mut().enumerate() {
            *ck = self.top[k] * (1.0 - v) + self.bottom[k] * v;
        }
        for (centre, r, bc) in &self.blobs {
            let d2 = (u - centre[0]).powi(2) + (v - centre[1]).powi(2);
            let w = 0.5 * (-d2 / (r * r)).exp();
            for k in 0..3 {
                c[k] = c[k] * (1.0 - w) + bc[k] * w;
            }
        }
        c
    }
}

fn smooth_inside(dist: f32, soft: f32) -> f32 {
    // 1 inside (dist < 0), 0 outside, linear ramp of width `soft` around the boundary
    (0.5 - dist / soft).clamp(0.0, 1.0)
}

fn blend(c: &mut [f32; 3], target: [f32; 3], a: f32) {
    for k in 0..3 {
        c[k] = c[k] * (1.0 - a) + target[k] * a;
    }
}

/// Renders one frame as HWC values in `[-1, 1]` plus the binary face mask (HW).
pub fn render_frame(
    id: &IdentityParams,
    f: &SyntheticFactors,
    bg: &Background,
    height: usize,
    width: usize,
) -> (Vec<f32>, Vec<f32>) {
    let mut pixels = vec![0f32; height * width * 3];
    let mut mask = vec![0f32; height * width];
    let soft = 1.5 / width.min(height) as f32;
    let cx = 0.5 + 0.16 * f.pose;
    let cy = 0.53;
    let yaw = 0.05 * f.pose;
    let eye_y = cy - id.eye_height;
    let mouth_y = cy + 0.15;
    let nose_x = cx + yaw;

    for y in 0..height {
        let v = (y as f32 + 0.5) / height as f32;
        for x in 0..width {
            let u = (x as f32 + 0.5) / width as f32;
            let dx = (u - cx) / id.radius_x;
            let dy = (v - cy) / id.radius_y;
            let r2 = dx * dx + dy * dy;
            let mut c;
            if r2 <= 1.0 {
                mask[y * width + x] = 1.0;
                let shade = (1.0 + 0.55 * f.lighting * dx) * (1.0 - 0.12 * r2);
                c = id.skin.map(|s| s * shade);
                // hair cap
                let hair_edge = -1.0 + 2.0 * id.hair_fraction;
                let ha = smooth_inside((dy - hair_edge) * id.radius_y, soft);
                blend(&mut c, id.hair.map(|h| h * shade), ha);
                // eyes
                for side in [-1.0f32, 1.0] {
                    let ex = cx + yaw + side * id.eye_spacing * 0.5;
                    let d = ((u - ex).powi(2) + (v - eye_y).powi(2)).sqrt() - id.eye_radius;
                    blend(&mut c, id.eye, smooth_inside(d, soft));
                }
                // nose
                let nd = ((u - nose_x) / 0.012).powi(2) + ((v - cy - 0.01) / id.nose_length).powi(2);
                blend(&mut c, id.skin.map(|s| s * shade * 0.75), smooth_inside((nd.sqrt() - 1.0) * 0.012, soft));
                // mouth: a curved stroke whose corners rise with expression
                let t = (u - (cx + yaw)) / id.mouth_width;
                if t.abs() <= 1.2 {
                    let curve_y = mouth_y - 0.05 * f.expression * (t * t - 0.3);
                    let d_along = (t.abs() - 1.0).max(0.0) * id.mouth_width;
                    let d = ((v - curve_y).abs() - 0.016).max(0.0).hypot(d_along);
                    let inside = if (v - curve_y).abs() <= 0.016 && d_along == 0.0 { -1.0 } else { d };
                    blend(&mut c, id.lip, smooth_inside(inside.max(-soft), soft));
                }
                if f.makeup_marker {
                    let mx = cx + yaw;
                    let my = cy - id.radius_y * 0.55;
                    let d = ((u - mx).powi(2) + (v - my).powi(2)).sqrt() - 0.03;
                    blend(&mut c, [0.95, 0.05, 0.05], smooth_inside(d, soft));
                }
            } else {
                c = bg.color(u, v);
            }
            let o = (y * width + x) * 3;
            for k in 0..3 {
                pixels[o + k] = (c[k] * 2.0 - 1.0).clamp(-1.0, 1.0);
            }
        }
    }
    (pixels, mask)
}
