//! Deterministic linear stand-in for a video VAE.
//!
//! Each `f x f` pixel block (3 colors) is flattened space-to-depth and projected onto
//! four orthonormal directions: the three per-color block means and a vertical
//! luminance edge. Decoding applies the transposed projection, so
//! `encode(decode(z)) == z` and `decode(encode(x))` is the orthogonal projection of `x`
//! onto the codec's subspace.

use ndarray::Array4;

use crate::data::{LatentClip, VideoClip, LATENT_CHANNELS};
use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentCodec {
    factor: usize,
}

impl Default for LatentCodec {
    fn default() -> Self {
        Self { factor: 2 }
    }
}

impl LatentCodec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor < 2 || factor % 2 != 0 {
            return dim_err(format!("downsample factor must be even and >= 2, got {factor}"));
        }
        Ok(Self { factor })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Projection weight of pixel `(dy, dx)`, color `c` for latent channel `k`.
    fn weight(&self, k: usize, dy: usize, c: usize) -> f64 {
        let f = self.factor as f64;
        match k {
            0..=2 => {
                if c == k {
                    1.0 / f
                } else {
                    0.0
                }
            }
            _ => {
                let mag = 1.0 / (f * 3f64.sqrt());
                if dy < self.factor / 2 {
                    mag
                } else {
                    -mag
                }
            }
        }
    }

    pub fn latent_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if height % self.factor != 0 || width % self.factor != 0 {
            return dim_err(format!(
                "{height}x{width} not divisible by downsample factor {}",
                self.factor
            ));
        }
        Ok((height / self.factor, width / self.factor))
    }

    pub fn encode_frames(&self, frames: &Array4<f64>) -> Result<LatentClip> {
        let (n, h, w, c) = frames.dim();
        if c != 3 {
            return dim_err(format!("expected 3 color channels, got {c}"));
        }
        let (lh, lw) = self.latent_dims(h, w)?;
        let f = self.factor;
        let mut out = Array4::zeros((n, lh, lw, LATENT_CHANNELS));
        for i in 0..n {
            for y in 0..lh {
                for x in 0..lw {
                    for k in 0..LATENT_CHANNELS {
                        let mut acc = 0.0;
                        for dy in 0..f {
                            for dx in 0..f {
                                for ch in 0..3 {
                                    acc += self.weight(k, dy, ch)
                                        * frames[[i, y * f + dy, x * f + dx, ch]];
                                }
                            }
                        }
                        out[[i, y, x, k]] = acc;
                    }
                }
            }
        }
        LatentClip::new(out, f)
    }

    pub fn encode(&self, video: &VideoClip) -> Result<LatentClip> {
        self.encode_frames(video.frames())
    }

    /// Transposed projection without clamping; values may leave `[0, 1]`.
    pub fn decode_raw(&self, latent: &LatentClip) -> Result<Array4<f64>> {
        if latent.downsample_factor != self.factor {
            return dim_err(format!(
                "latent factor {} vs codec factor {}",
                latent.downsample_factor, self.factor
            ));
        }
        let (n, lh, lw, _) = latent.dim();
        let f = self.factor;
        let mut out = Array4::zeros((n, lh * f, lw * f, 3));
        for i in 0..n {
            for y in 0..lh {
                for x in 0..lw {
                    for dy in 0..f {
                        for dx in 0..f {
                            for ch in 0..3 {
                                let mut acc = 0.0;
                                for k in 0..LATENT_CHANNELS {
                                    acc += self.weight(k, dy, ch) * latent.latents[[i, y, x, k]];
                                }
                                out[[i, y * f + dy, x * f + dx, ch]] = acc;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Decodes and clamps into a valid clip.
    pub fn decode(&self, latent: &LatentClip, frame_rate: f64) -> Result<VideoClip> {
        VideoClip::from_clamped(self.decode_raw(latent)?, frame_rate)
    }
}
