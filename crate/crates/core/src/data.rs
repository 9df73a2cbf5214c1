//! Video, mask and pose containers plus the denoiser input assembly.
//!
//! All pixel arrays are stored frame-major and channel-last: `(N, H, W, C)`.

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// DensePose renders its background in this flat color.
pub const DENSEPOSE_BACKGROUND: [f64; 3] = [65.0 / 255.0, 0.0, 82.0 / 255.0];

/// Default gray written into the erased garment region.
pub const DEFAULT_FILL: f64 = 0.5;

/// Number of latent channels produced by the codec.
pub const LATENT_CHANNELS: usize = 4;

/// Channel count of the assembled denoiser input: noisy latent, agnostic latent, mask.
pub const DENOISER_IN_CHANNELS: usize = 2 * LATENT_CHANNELS + 1;

fn check_unit_range(data: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    for v in data {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidData(format!(
                "{what} value {v} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// A person video: `N` RGB frames with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Array4<f64>,
    pub frame_rate: f64,
}

impl VideoClip {
    pub fn new(frames: Array4<f64>, frame_rate: f64) -> Result<Self> {
        let (n, h, w, c) = frames.dim();
        if n == 0 || h == 0 || w == 0 {
            return dim_err(format!("empty clip ({n}x{h}x{w})"));
        }
        if c != 3 {
            return dim_err(format!("expected 3 color channels, got {c}"));
        }
        check_unit_range(frames.iter().copied(), "video")?;
        Ok(Self { frames, frame_rate })
    }

    /// Builds a clip by clamping arbitrary values into `[0, 1]`.
    pub fn from_clamped(mut frames: Array4<f64>, frame_rate: f64) -> Result<Self> {
        frames.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(frames, frame_rate)
    }

    pub fn frames(&self) -> &Array4<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array4<f64> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }

    pub fn frame(&self, i: usize) -> ArrayView3<'_, f64> {
        self.frames.index_axis(Axis(0), i)
    }

    /// Copies the frames at `indices` into a new clip.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.iter().any(|&i| i >= self.len()) {
            return dim_err("frame index out of range");
        }
        Self::new(self.frames.select(Axis(0), indices), self.frame_rate)
    }
}

/// Binary per-frame garment mask; 1 marks pixels to erase.
#[derive(Debug, Clone, PartialEq)]
pub struct AgnosticMask {
    masks: Array3<u8>,
}

impl AgnosticMask {
    pub fn new(masks: Array3<u8>) -> Result<Self> {
        let (n, h, w) = masks.dim();
        if n == 0 || h == 0 || w == 0 {
            return dim_err(format!("empty mask ({n}x{h}x{w})"));
        }
        if masks.iter().any(|&v| v > 1) {
            return Err(Error::InvalidData("mask values must be 0 or 1".into()));
        }
        Ok(Self { masks })
    }

    pub fn masks(&self) -> &Array3<u8> {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.masks.dim()
    }

    pub fn masked_pixels(&self) -> usize {
        self.masks.iter().filter(|&&v| v == 1).count()
    }

    /// Fails unless at least one frame has a masked pixel.
    pub fn ensure_nonempty(&self) -> Result<()> {
        if self.masked_pixels() == 0 {
            return Err(Error::DegenerateMask("no masked pixel in any frame".into()));
        }
        Ok(())
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.iter().any(|&i| i >= self.len()) {
            return dim_err("frame index out of range");
        }
        Self::new(self.masks.select(Axis(0), indices))
    }
}

/// The person video with the garment region overwritten by `fill_value`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgnosticVideo {
    pub clip: VideoClip,
    pub fill_value: f64,
}

/// Rendered body-part maps on a flat background, one per video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePoseClip {
    frames: Array4<f64>,
    pub background_color: [f64; 3],
}

impl DensePoseClip {
    pub fn new(frames: Array4<f64>, background_color: [f64; 3]) -> Result<Self> {
        let (n, h, w, c) = frames.dim();
        if n == 0 || h == 0 || w == 0 || c != 3 {
            return dim_err(format!("bad densepose shape ({n}x{h}x{w}x{c})"));
        }
        check_unit_range(frames.iter().copied(), "densepose")?;
        check_unit_range(background_color, "background color")?;
        Ok(Self {
            frames,
            background_color,
        })
    }

    pub fn frames(&self) -> &Array4<f64> {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, i: usize) -> ArrayView3<'_, f64> {
        self.frames.index_axis(Axis(0), i)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.iter().any(|&i| i >= self.len()) {
            return dim_err("frame index out of range");
        }
        Self::new(self.frames.select(Axis(0), indices), self.background_color)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GarmentCategory {
    #[default]
    Upper,
    Lower,
    Dress,
}

/// Front view of the garment to put on the person.
#[derive(Debug, Clone, PartialEq)]
pub struct GarmentImage {
    image: Array3<f64>,
    pub category: GarmentCategory,
}

impl GarmentImage {
    pub fn new(image: Array3<f64>, category: GarmentCategory) -> Result<Self> {
        let (h, w, c) = image.dim();
        if h == 0 || w == 0 || c != 3 {
            return dim_err(format!("bad garment image shape ({h}x{w}x{c})"));
        }
        check_unit_range(image.iter().copied(), "garment")?;
        Ok(Self { image, category })
    }

    pub fn image(&self) -> &Array3<f64> {
        &self.image
    }
}

/// Encoded frames, `(N, h, w, 4)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip {
    pub latents: Array4<f64>,
    pub downsample_factor: usize,
}

impl LatentClip {
    pub fn new(latents: Array4<f64>, downsample_factor: usize) -> Result<Self> {
        if latents.dim().3 != LATENT_CHANNELS {
            return dim_err(format!(
                "latent must have {LATENT_CHANNELS} channels, got {}",
                latents.dim().3
            ));
        }
        Ok(Self {
            latents,
            downsample_factor,
        })
    }

    pub fn zeros(n: usize, h: usize, w: usize, downsample_factor: usize) -> Self {
        Self {
            latents: Array4::zeros((n, h, w, LATENT_CHANNELS)),
            downsample_factor,
        }
    }

    pub fn len(&self) -> usize {
        self.latents.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.latents.dim()
    }

    /// Same shape and factor, new values.
    pub fn with_latents(&self, latents: Array4<f64>) -> Result<Self> {
        if latents.dim() != self.latents.dim() {
            return dim_err("latent shape changed");
        }
        Ok(Self {
            latents,
            downsample_factor: self.downsample_factor,
        })
    }
}

/// Everything the denoising network sees for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserInput {
    /// `(N, h, w, 9)`: noisy latent, agnostic latent, resized mask.
    pub channels: Array4<f64>,
    /// `(N, h, w, d_p)`, added to the network's first feature map.
    pub pose_embedding: Array4<f64>,
}

/// Agnostic video, mask and DensePose, aligned frame by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AgnosticBundle {
    pub agnostic: AgnosticVideo,
    pub mask: AgnosticMask,
    pub pose: DensePoseClip,
}

impl AgnosticBundle {
    pub fn new(agnostic: AgnosticVideo, mask: AgnosticMask, pose: DensePoseClip) -> Result<Self> {
        let (n, h, w, _) = agnostic.clip.frames().dim();
        if mask.dims() != (n, h, w) {
            return dim_err(format!(
                "mask {:?} does not match video ({n}, {h}, {w})",
                mask.dims()
            ));
        }
        let (pn, ph, pw, _) = pose.frames().dim();
        if (pn, ph, pw) != (n, h, w) {
            return dim_err(format!(
                "densepose ({pn}, {ph}, {pw}) does not match video ({n}, {h}, {w})"
            ));
        }
        Ok(Self {
            agnostic,
            mask,
            pose,
        })
    }

    pub fn len(&self) -> usize {
        self.agnostic.clip.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            AgnosticVideo {
                clip: self.agnostic.clip.select(indices)?,
                fill_value: self.agnostic.fill_value,
            },
            self.mask.select(indices)?,
            self.pose.select(indices)?,
        )
    }
}

/// Erases the masked region of `video`, writing `fill_value` into every masked pixel.
pub fn compose_agnostic(
    video: &VideoClip,
    mask: &AgnosticMask,
    fill_value: f64,
) -> Result<AgnosticVideo> {
    let (n, h, w, _) = video.frames().dim();
    if mask.dims() != (n, h, w) {
        return dim_err(format!(
            "mask {:?} does not match video ({n}, {h}, {w})",
            mask.dims()
        ));
    }
    if !(0.0..=1.0).contains(&fill_value) {
        return Err(Error::Domain(format!("fill value {fill_value} outside [0, 1]")));
    }
    let mut frames = video.frames().clone();
    for ((f, y, x), &m) in mask.masks().indexed_iter() {
        if m == 1 {
            frames.slice_mut(s![f, y, x, ..]).fill(fill_value);
        }
    }
    Ok(AgnosticVideo {
        clip: VideoClip::new(frames, video.frame_rate)?,
        fill_value,
    })
}

/// Area-average downsampling of a `(N, H, W, C)` array by `factor`.
pub fn area_downsample(input: &Array4<f64>, factor: usize) -> Result<Array4<f64>> {
    let (n, h, w, c) = input.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return dim_err(format!("{h}x{w} not divisible by factor {factor}"));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = Array4::zeros((n, oh, ow, c));
    for f in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[[f, y / factor, x / factor, ch]] += input[[f, y, x, ch]];
                }
            }
        }
    }
    out.mapv_inplace(|v| v * norm);
    Ok(out)
}

/// Area-averaged mask at latent resolution, `(N, H/factor, W/factor)`.
pub fn resize_mask_to_latent(mask: &AgnosticMask, factor: usize) -> Result<Array3<f64>> {
    let m = mask.masks().mapv(f64::from).insert_axis(Axis(3));
    let down = area_downsample(&m, factor)?;
    Ok(down.index_axis_move(Axis(3), 0))
}

/// Concatenates noisy latent, agnostic latent and resized mask along channels.
pub fn assemble_channels(
    noisy: &LatentClip,
    agnostic: &LatentClip,
    mask_resized: &Array3<f64>,
) -> Result<Array4<f64>> {
    let (n, h, w, _) = noisy.dim();
    if agnostic.dim() != noisy.dim() {
        return dim_err(format!(
            "agnostic latent {:?} vs noisy latent {:?}",
            agnostic.dim(),
            noisy.dim()
        ));
    }
    if mask_resized.dim() != (n, h, w) {
        return dim_err(format!(
            "resized mask {:?} vs latent ({n}, {h}, {w})",
            mask_resized.dim()
        ));
    }
    let mut out = Array4::zeros((n, h, w, DENOISER_IN_CHANNELS));
    out.slice_mut(s![.., .., .., 0..LATENT_CHANNELS])
        .assign(&noisy.latents);
    out.slice_mut(s![.., .., .., LATENT_CHANNELS..2 * LATENT_CHANNELS])
        .assign(&agnostic.latents);
    out.slice_mut(s![.., .., .., 2 * LATENT_CHANNELS])
        .assign(mask_resized);
    Ok(out)
}

/// Maps a DensePose clip to a per-pixel embedding at latent resolution.
pub trait PoseEncoder {
    fn embed_dim(&self) -> usize;
    fn encode(&self, pose: &DensePoseClip, factor: usize) -> Result<Array4<f64>>;
}

/// Builds the 9-channel denoiser input and the pose embedding.
pub fn assemble_denoiser_input(
    noisy: &LatentClip,
    agnostic: &LatentClip,
    mask_resized: &Array3<f64>,
    pose: &DensePoseClip,
    pose_encoder: &impl PoseEncoder,
) -> Result<DenoiserInput> {
    let channels = assemble_channels(noisy, agnostic, mask_resized)?;
    if pose.len() != noisy.len() {
        return dim_err(format!(
            "{} pose frames for {} latent frames",
            pose.len(),
            noisy.len()
        ));
    }
    let pose_embedding = pose_encoder.encode(pose, noisy.downsample_factor)?;
    let (n, h, w, _) = noisy.dim();
    let (pn, ph, pw, _) = pose_embedding.dim();
    if (pn, ph, pw) != (n, h, w) {
        return dim_err(format!(
            "pose embedding ({pn}, {ph}, {pw}) vs latent ({n}, {h}, {w})"
        ));
    }
    Ok(DenoiserInput {
        channels,
        pose_embedding,
    })
}

/// 3x3 same-padded convolution, channel-last. `weight` is `(out, in, 3, 3)`.
pub fn conv3x3_same(input: &Array4<f64>, weight: &Array4<f64>, bias: &[f64]) -> Array4<f64> {
    let (n, h, w, cin) = input.dim();
    let (cout, wcin, kh, kw) = weight.dim();
    assert_eq!((wcin, kh, kw), (cin, 3, 3), "conv weight shape");
    assert_eq!(bias.len(), cout, "conv bias length");
    let mut out = Array4::zeros((n, h, w, cout));
    for f in 0..n {
        for y in 0..h {
            for x in 0..w {
                for (o, &b) in bias.iter().enumerate() {
                    let mut acc = b;
                    for dy in 0..3 {
                        let yy = y as isize + dy as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in 0..3 {
                            let xx = x as isize + dx as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            for i in 0..cin {
                                acc += weight[[o, i, dy, dx]]
                                    * input[[f, yy as usize, xx as usize, i]];
                            }
                        }
                    }
                    out[[f, y, x, o]] = acc;
                }
            }
        }
    }
    out
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Two-layer convolutional pose guider applied to the area-downsampled DensePose frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvPoseGuider {
    pub w1: Array4<f64>,
    pub b1: Vec<f64>,
    pub w2: Array4<f64>,
    pub b2: Vec<f64>,
}

impl ConvPoseGuider {
    /// Uniform fan-in initialisation from a seed.
    pub fn seeded(hidden: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let mut init = |cout: usize, cin: usize| {
            let bound = (1.0 / (cin * 9) as f64).sqrt();
            Array4::from_shape_fn((cout, cin, 3, 3), |_| rng.random_range(-bound..bound))
        };
        let w1 = init(hidden, 3);
        let w2 = init(embed_dim, hidden);
        Self {
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; embed_dim],
        }
    }
}

impl PoseEncoder for ConvPoseGuider {
    fn embed_dim(&self) -> usize {
        self.b2.len()
    }

    fn encode(&self, pose: &DensePoseClip, factor: usize) -> Result<Array4<f64>> {
        let down = area_downsample(pose.frames(), factor)?;
        let hidden = conv3x3_same(&down, &self.w1, &self.b1).mapv(silu);
        Ok(conv3x3_same(&hidden, &self.w2, &self.b2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use proptest::prelude::*;

    fn clip_from_fn(n: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> VideoClip {
        VideoClip::new(Array4::from_shape_fn((n, h, w, 3), |(a, b, c, d)| f(a, b, c, d)), 8.0).unwrap()
    }

    #[test]
    fn empty_mask_is_identity() {
        let v = clip_from_fn(2, 4, 4, |a, b, c, d| ((a + b + c + d) % 7) as f64 / 7.0);
        let m = AgnosticMask::new(Array3::zeros((2, 4, 4))).unwrap();
        let out = compose_agnostic(&v, &m, 0.5).unwrap();
        assert_eq!(out.clip, v);
    }

    #[test]
    fn full_mask_gives_constant_fill() {
        let v = clip_from_fn(1, 4, 4, |_, b, _, _| b as f64 / 4.0);
        let m = AgnosticMask::new(Array3::ones((1, 4, 4))).unwrap();
        let out = compose_agnostic(&v, &m, 0.5).unwrap();
        assert!(out.clip.frames().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn two_by_two_hand_example() {
        let vals = array![[0.1, 0.2], [0.3, 0.4]];
        let v = clip_from_fn(1, 2, 2, |_, y, x, _| vals[[y, x]]);
        let m = AgnosticMask::new(array![[[1u8, 0], [0, 1]]]).unwrap();
        let out = compose_agnostic(&v, &m, 0.5).unwrap();
        let expected = array![[0.5, 0.2], [0.3, 0.5]];
        for c in 0..3 {
            assert_eq!(out.clip.frames().slice(s![0, .., .., c]), expected);
        }
    }

    #[test]
    fn compose_rejects_shape_mismatch_and_bad_fill() {
        let v = clip_from_fn(1, 4, 4, |_, _, _, _| 0.2);
        let m = AgnosticMask::new(Array3::zeros((1, 4, 2))).unwrap();
        assert!(matches!(compose_agnostic(&v, &m, 0.5), Err(Error::Dimension(_))));
        let m = AgnosticMask::new(Array3::zeros((1, 4, 4))).unwrap();
        assert!(matches!(compose_agnostic(&v, &m, 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn resize_examples() {
        let ones = AgnosticMask::new(Array3::ones((1, 4, 4))).unwrap();
        assert!(resize_mask_to_latent(&ones, 2).unwrap().iter().all(|&v| v == 1.0));

        let mut block = Array3::zeros((1, 4, 4));
        block.slice_mut(s![0, 0..2, 2..4]).fill(1u8);
        let r = resize_mask_to_latent(&AgnosticMask::new(block).unwrap(), 2).unwrap();
        assert_eq!(r, array![[[0.0, 1.0], [0.0, 0.0]]]);

        let mut three = Array3::zeros((1, 4, 4));
        three[[0, 2, 0]] = 1;
        three[[0, 2, 1]] = 1;
        three[[0, 3, 0]] = 1;
        let r = resize_mask_to_latent(&AgnosticMask::new(three).unwrap(), 2).unwrap();
        assert_eq!(r[[0, 1, 0]], 0.75);
        assert_eq!(r.sum(), 0.75);

        let odd = AgnosticMask::new(Array3::ones((1, 5, 4))).unwrap();
        assert!(matches!(resize_mask_to_latent(&odd, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_inputs_assemble_to_zero_block() {
        let z = LatentClip::zeros(2, 4, 4, 2);
        let m = Array3::zeros((2, 4, 4));
        let c = assemble_channels(&z, &z, &m).unwrap();
        assert_eq!(c.dim().3, DENOISER_IN_CHANNELS);
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_lands_in_channel_eight() {
        let mut raw = Array3::zeros((2, 8, 8));
        raw.slice_mut(s![.., 2..7, 1..4]).fill(1u8);
        let mask = AgnosticMask::new(raw).unwrap();
        let resized = resize_mask_to_latent(&mask, 2).unwrap();
        let noisy = LatentClip::new(Array::from_elem((2, 4, 4, 4), 0.3), 2).unwrap();
        let agn = LatentClip::new(Array::from_elem((2, 4, 4, 4), -0.7), 2).unwrap();
        let pose = DensePoseClip::new(Array4::from_elem((2, 8, 8, 3), 0.25), DENSEPOSE_BACKGROUND).unwrap();
        let guider = ConvPoseGuider::seeded(8, 6, 3);
        let input = assemble_denoiser_input(&noisy, &agn, &resized, &pose, &guider).unwrap();
        assert_eq!(input.channels.slice(s![.., .., .., 8]), resized);
        assert!(input.channels.slice(s![.., .., .., 0..4]).iter().all(|&v| v == 0.3));
        assert!(input.channels.slice(s![.., .., .., 4..8]).iter().all(|&v| v == -0.7));
        assert_eq!(input.pose_embedding.dim(), (2, 4, 4, 6));
    }

    #[test]
    fn assembly_is_injective_in_each_input() {
        let mut raw = Array3::zeros((1, 8, 8));
        raw.slice_mut(s![.., 2..6, 2..6]).fill(1u8);
        let mask = AgnosticMask::new(raw).unwrap();
        let resized = resize_mask_to_latent(&mask, 2).unwrap();
        let noisy = LatentClip::new(Array::from_elem((1, 4, 4, 4), 0.1), 2).unwrap();
        let agn = LatentClip::new(Array::from_elem((1, 4, 4, 4), 0.2), 2).unwrap();
        let pose = DensePoseClip::new(Array4::from_elem((1, 8, 8, 3), 0.25), DENSEPOSE_BACKGROUND).unwrap();
        let g = ConvPoseGuider::seeded(8, 4, 1);
        let base = assemble_denoiser_input(&noisy, &agn, &resized, &pose, &g).unwrap();

        let mut n2 = noisy.clone();
        n2.latents[[0, 1, 1, 2]] += 0.1;
        assert_ne!(assemble_denoiser_input(&n2, &agn, &resized, &pose, &g).unwrap(), base);
        let mut a2 = agn.clone();
        a2.latents[[0, 3, 0, 0]] -= 0.1;
        assert_ne!(assemble_denoiser_input(&noisy, &a2, &resized, &pose, &g).unwrap(), base);
        let mut r2 = resized.clone();
        r2[[0, 0, 0]] = 0.5;
        assert_ne!(assemble_denoiser_input(&noisy, &agn, &r2, &pose, &g).unwrap(), base);
        let mut pf = pose.frames().clone();
        pf[[0, 3, 3, 1]] = 0.9;
        let p2 = DensePoseClip::new(pf, DENSEPOSE_BACKGROUND).unwrap();
        assert_ne!(assemble_denoiser_input(&noisy, &agn, &resized, &p2, &g).unwrap(), base);
    }

    #[test]
    fn assembly_rejects_mismatched_shapes() {
        let a = LatentClip::zeros(1, 4, 4, 2);
        let b = LatentClip::zeros(1, 4, 2, 2);
        let m = Array3::zeros((1, 4, 4));
        assert!(assemble_channels(&a, &b, &m).is_err());
        assert!(assemble_channels(&a, &a, &Array3::zeros((1, 2, 4))).is_err());
    }

    #[test]
    fn constructors_validate() {
        assert!(VideoClip::new(Array4::from_elem((1, 2, 2, 3), 1.2), 1.0).is_err());
        assert!(VideoClip::new(Array4::zeros((0, 2, 2, 3)), 1.0).is_err());
        assert!(AgnosticMask::new(Array3::from_elem((1, 2, 2), 2u8)).is_err());
        let empty = AgnosticMask::new(Array3::zeros((2, 2, 2))).unwrap();
        assert!(matches!(empty.ensure_nonempty(), Err(Error::DegenerateMask(_))));
        assert!(LatentClip::new(Array4::zeros((1, 2, 2, 3)), 2).is_err());
    }

    fn mask_strategy() -> impl Strategy<Value = (Array4<f64>, Array3<u8>, f64)> {
        (1usize..3, 1usize..4, 1usize..4).prop_flat_map(|(n, hb, wb)| {
            let (h, w) = (hb * 2, wb * 2);
            (
                proptest::collection::vec(0.0f64..=1.0, n * h * w * 3),
                proptest::collection::vec(0u8..=1, n * h * w),
                0.0f64..=1.0,
            )
                .prop_map(move |(v, m, f)| {
                    (
                        Array4::from_shape_vec((n, h, w, 3), v).unwrap(),
                        Array3::from_shape_vec((n, h, w), m).unwrap(),
                        f,
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn compose_is_idempotent_and_preserves_unmasked((v, m, fill) in mask_strategy()) {
            let video = VideoClip::new(v, 8.0).unwrap();
            let mask = AgnosticMask::new(m).unwrap();
            let once = compose_agnostic(&video, &mask, fill).unwrap();
            let twice = compose_agnostic(&once.clip, &mask, fill).unwrap();
            prop_assert_eq!(&once, &twice);
            for ((f, y, x), &mv) in mask.masks().indexed_iter() {
                for c in 0..3 {
                    let got = once.clip.frames()[[f, y, x, c]];
                    if mv == 0 {
                        prop_assert_eq!(got.to_bits(), video.frames()[[f, y, x, c]].to_bits());
                    } else {
                        prop_assert_eq!(got, fill);
                    }
                }
            }
        }

        #[test]
        fn resize_preserves_mass((_, m, _) in mask_strategy()) {
            let mask = AgnosticMask::new(m).unwrap();
            let r = resize_mask_to_latent(&mask, 2).unwrap();
            prop_assert!((r.sum() * 4.0 - mask.masked_pixels() as f64).abs() < 1e-9);
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
