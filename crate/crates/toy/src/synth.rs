//! Procedural try-on clips: a person-like figure whose torso moves at constant velocity.
//!
//! The source video shows the torso in a plain garment, the target shows it wearing the
//! striped garment of the garment image. The mask is exactly the torso rectangle. The
//! DensePose stand-in paints only the torso, so consecutive-frame pose distances have a
//! closed form. Every colour is constant on 2x2 blocks when the origin and velocity are
//! even, which the 2x latent codec reproduces exactly.

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tryon_core::data::{
    compose_agnostic, AgnosticBundle, AgnosticMask, DensePoseClip, GarmentCategory, GarmentImage,
    VideoClip, DEFAULT_FILL, DENSEPOSE_BACKGROUND,
};
use tryon_core::Error;

use crate::error::Result;

/// Colour of the torso in the DensePose stand-in.
pub const DENSEPOSE_TORSO: [f64; 3] = [0.2, 0.6, 0.9];
/// Head block side, drawn directly above the torso.
const HEAD: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionSpec {
    /// Top-left corner `(y, x)` of the torso in frame 0.
    pub origin: (usize, usize),
    /// Torso `(height, width)`.
    pub torso: (usize, usize),
    /// Displacement `(dy, dx)` per frame.
    pub velocity: (isize, isize),
    pub frame_rate: f64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self {
            origin: (20, 8),
            torso: (24, 16),
            velocity: (0, 2),
            frame_rate: 8.0,
        }
    }
}

impl MotionSpec {
    /// Torso top-left corner in frame `t`.
    pub fn position(&self, t: usize) -> (isize, isize) {
        (
            self.origin.0 as isize + self.velocity.0 * t as isize,
            self.origin.1 as isize + self.velocity.1 * t as isize,
        )
    }

    fn check(&self, frames: usize, height: usize, width: usize) -> Result<()> {
        let (th, tw) = self.torso;
        if th == 0 || tw < HEAD {
            return Err(Error::Config(format!("torso {th}x{tw} too small for the head block")).into());
        }
        for t in 0..frames {
            let (y, x) = self.position(t);
            if y < HEAD as isize || x < 0 || y + th as isize > height as isize || x + tw as isize > width as isize {
                return Err(Error::Dimension(format!(
                    "figure leaves the {height}x{width} frame at frame {t}"
                ))
                .into());
            }
        }
        Ok(())
    }
}

/// One generated clip and everything derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    pub target: VideoClip,
    pub source: VideoClip,
    pub bundle: AgnosticBundle,
    pub garment: GarmentImage,
    pub motion: MotionSpec,
}

struct Palette {
    stripes: [[f64; 3]; 2],
    logo: [f64; 3],
    plain: [f64; 3],
    skin: [f64; 3],
    tint: f64,
}

fn colour(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    // quarter steps keep colours exactly representable
    let mut c = [0.0; 3];
    for v in &mut c {
        *v = (rng.random_range(lo..hi) * 4.0).round() / 4.0;
    }
    c
}

impl Palette {
    fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            stripes: [colour(&mut rng, 0.6, 1.0), colour(&mut rng, 0.0, 0.4)],
            logo: colour(&mut rng, 0.25, 0.75),
            plain: colour(&mut rng, 0.3, 0.7),
            skin: [0.875, 0.625, 0.5],
            tint: rng.random_range(0..4) as f64 / 16.0,
        }
    }

    /// Garment texture at torso-relative `(y, x)`: 4-row stripes and a chest logo.
    fn garment(&self, y: usize, x: usize, torso: (usize, usize)) -> [f64; 3] {
        let (ly, lx) = (torso.0 / 4, torso.1 / 2 - 2);
        if (ly..ly + 4).contains(&y) && (lx..lx + 4).contains(&x) {
            return self.logo;
        }
        self.stripes[(y / 4) % 2]
    }

    fn background(&self, y: usize, x: usize, height: usize, width: usize) -> [f64; 3] {
        let gy = (y / 2 * 2) as f64 / height as f64;
        let gx = (x / 2 * 2) as f64 / width as f64;
        [0.25 + 0.25 * gy + self.tint, 0.4, 0.5 - 0.25 * gx]
    }
}

fn put(frames: &mut Array4<f64>, t: usize, y: usize, x: usize, c: [f64; 3]) {
    for k in 0..3 {
        frames[[t, y, x, k]] = c[k];
    }
}

/// Renders the clip; same seed and arguments give bit-identical output.
pub fn generate_synthetic_clip(
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
    motion: &MotionSpec,
) -> Result<SyntheticClip> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::Dimension("clip needs at least one frame and pixel".into()).into());
    }
    motion.check(frames, height, width)?;
    let pal = Palette::seeded(seed);
    let (th, tw) = motion.torso;
    let mut target = Array4::zeros((frames, height, width, 3));
    let mut source = Array4::zeros((frames, height, width, 3));
    let mut mask = Array3::<u8>::zeros((frames, height, width));
    let mut pose = Array4::zeros((frames, height, width, 3));

    for t in 0..frames {
        let (py, px) = motion.position(t);
        let (py, px) = (py as usize, px as usize);
        for y in 0..height {
            for x in 0..width {
                let bg = pal.background(y, x, height, width);
                put(&mut target, t, y, x, bg);
                put(&mut source, t, y, x, bg);
                put(&mut pose, t, y, x, DENSEPOSE_BACKGROUND);
            }
        }
        let hx = px + (tw - HEAD) / 2;
        for y in py - HEAD..py {
            for x in hx..hx + HEAD {
                put(&mut target, t, y, x, pal.skin);
                put(&mut source, t, y, x, pal.skin);
            }
        }
        for y in 0..th {
            for x in 0..tw {
                put(&mut target, t, py + y, px + x, pal.garment(y, x, motion.torso));
                put(&mut source, t, py + y, px + x, pal.plain);
                put(&mut pose, t, py + y, px + x, DENSEPOSE_TORSO);
                mask[[t, py + y, px + x]] = 1;
            }
        }
    }

    let (gh, gw) = (th + 8, tw + 8);
    let mut garment = Array3::from_elem((gh, gw, 3), 0.875);
    for y in 0..th {
        for x in 0..tw {
            let c = pal.garment(y, x, motion.torso);
            for k in 0..3 {
                garment[[y + 4, x + 4, k]] = c[k];
            }
        }
    }

    let target = VideoClip::new(target, motion.frame_rate)?;
    let source = VideoClip::new(source, motion.frame_rate)?;
    let mask = AgnosticMask::new(mask)?;
    let agnostic = compose_agnostic(&source, &mask, DEFAULT_FILL)?;
    let pose = DensePoseClip::new(pose, DENSEPOSE_BACKGROUND)?;
    Ok(SyntheticClip {
        target,
        source,
        bundle: AgnosticBundle::new(agnostic, mask, pose)?,
        garment: GarmentImage::new(garment, GarmentCategory::Upper)?,
        motion: *motion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tryon_core::codec::LatentCodec;
    use tryon_core::keyframes::pose_distance;

    #[test]
    fn same_seed_same_clip() {
        let m = MotionSpec::default();
        let a = generate_synthetic_clip(3, 8, 64, 48, &m).unwrap();
        assert_eq!(a, generate_synthetic_clip(3, 8, 64, 48, &m).unwrap());
        assert_ne!(a.target, generate_synthetic_clip(4, 8, 64, 48, &m).unwrap().target);
    }

    #[test]
    fn mask_is_the_torso_rectangle() {
        let m = MotionSpec::default();
        let c = generate_synthetic_clip(0, 8, 64, 48, &m).unwrap();
        for t in 0..8 {
            let (py, px) = m.position(t);
            for ((y, x), &v) in c.bundle.mask.masks().index_axis(ndarray::Axis(0), t).indexed_iter() {
                let inside = (py as usize..py as usize + 24).contains(&y) && (px as usize..px as usize + 16).contains(&x);
                assert_eq!(v == 1, inside, "frame {t} pixel ({y}, {x})");
            }
        }
        assert_eq!(c.bundle.mask.masked_pixels(), 8 * 24 * 16);
    }

    #[test]
    fn agnostic_hides_only_the_torso() {
        let c = generate_synthetic_clip(1, 4, 64, 48, &MotionSpec::default()).unwrap();
        let agn = c.bundle.agnostic.clip.frames();
        for ((t, y, x, k), &v) in agn.indexed_iter() {
            if c.bundle.mask.masks()[[t, y, x]] == 1 {
                assert_eq!(v, DEFAULT_FILL);
            } else {
                assert_eq!(v, c.target.frames()[[t, y, x, k]]);
                assert_eq!(v, c.source.frames()[[t, y, x, k]]);
            }
        }
    }

    /// Symmetric difference of two equal rectangles offset by `(dy, dx)`, each pixel
    /// differing by the torso-background colour gap in all channels.
    fn closed_form_distance(m: &MotionSpec, h: usize, w: usize) -> f64 {
        let (th, tw) = (m.torso.0 as f64, m.torso.1 as f64);
        let (dy, dx) = (m.velocity.0.unsigned_abs() as f64, m.velocity.1.unsigned_abs() as f64);
        let overlap = (th - dy).max(0.0) * (tw - dx).max(0.0);
        let changed = 2.0 * (th * tw - overlap);
        let gap: f64 = DENSEPOSE_TORSO
            .iter()
            .zip(DENSEPOSE_BACKGROUND.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (changed * gap / (h * w * 3) as f64).sqrt()
    }

    #[test]
    fn consecutive_pose_distance_matches_linear_motion_oracle() {
        for velocity in [(0, 2), (2, 0), (1, -1), (0, 0), (-2, 3)] {
            let m = MotionSpec { origin: (24, 20), velocity, ..MotionSpec::default() };
            let c = generate_synthetic_clip(5, 4, 64, 48, &m).unwrap();
            let expected = closed_form_distance(&m, 64, 48);
            for t in 0..3 {
                let d = pose_distance(c.bundle.pose.frame(t), c.bundle.pose.frame(t + 1)).unwrap();
                assert!((d - expected).abs() < 1e-12, "{velocity:?}: {d} vs {expected}");
            }
        }
    }

    #[test]
    fn even_motion_survives_the_codec() {
        let c = generate_synthetic_clip(2, 8, 64, 48, &MotionSpec::default()).unwrap();
        let codec = LatentCodec::default();
        let back = codec.decode_raw(&codec.encode(&c.target).unwrap()).unwrap();
        let worst = (&back - c.target.frames()).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn rejects_figures_leaving_the_frame() {
        let m = MotionSpec { velocity: (0, 6), ..MotionSpec::default() };
        assert!(generate_synthetic_clip(0, 8, 64, 48, &m).is_err());
        assert!(generate_synthetic_clip(0, 0, 64, 48, &MotionSpec::default()).is_err());
    }

    #[test]
    fn garment_image_shows_the_texture() {
        let c = generate_synthetic_clip(6, 1, 64, 48, &MotionSpec::default()).unwrap();
        assert_eq!(c.garment.image().dim(), (32, 24, 3));
        let (py, px) = c.motion.position(0);
        for y in 0..24 {
            for x in 0..16 {
                for k in 0..3 {
                    assert_eq!(
                        c.garment.image()[[y + 4, x + 4, k]],
                        c.target.frames()[[0, py as usize + y, px as usize + x, k]]
                    );
                }
            }
        }
    }
}
