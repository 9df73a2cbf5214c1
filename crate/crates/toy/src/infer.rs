//! Sampling with the trained network, for single windows and for long clips.

use ndarray::{s, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tryon_core::attention::SelectionMode;
use tryon_core::codec::LatentCodec;
use tryon_core::data::{AgnosticBundle, GarmentImage, LatentClip, VideoClip, LATENT_CHANNELS};
use tryon_core::edm::{apply_denoiser, euler_sample_with, NoiseLevelSchedule};
use tryon_core::keyframes::{orchestrate_long_generation, LongGeneration, LongVideoConfig, PoseDistanceMatrix};
use tryon_core::Error;

use crate::error::Result;
use crate::model::{GarmentTokens, ToyModel};
use crate::tape::{Geom, Tape};
use crate::train::{contexts, latent_rows, rows_to_latent, ClipTensors};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub schedule: NoiseLevelSchedule,
    pub consistency: bool,
    pub selection: SelectionMode,
    /// Seed of the initial noise (and of random pairings, if selected).
    pub seed: u64,
    /// Largest clip generated in one pass; longer clips go through [`long_infer`].
    pub window: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            schedule: NoiseLevelSchedule::default(),
            consistency: true,
            selection: SelectionMode::InferDeterministic,
            seed: 0,
            window: 8,
        }
    }
}

/// Initial sample `N(0, sigma_max^2)` for a clip of the given layout.
pub fn initial_noise(geom: Geom, factor: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Result<LatentClip> {
    let rows = Array2::from_shape_simple_fn((geom.rows(), LATENT_CHANNELS), || {
        let z: f64 = StandardNormal.sample(rng);
        z * sigma
    });
    rows_to_latent(rows, geom, factor)
}

/// The raw network `F(x; c_noise)` with the conditioning of one clip bound in.
pub struct RawNetwork<'a> {
    model: &'a ToyModel,
    clip: &'a ClipTensors,
    context: Vec<Vec<usize>>,
    fine: Array2<f64>,
    coarse: Array2<f64>,
}

impl<'a> RawNetwork<'a> {
    /// Encodes the garment once and fixes the frame pairings from `config`.
    pub fn new(model: &'a ToyModel, clip: &'a ClipTensors, garment: &GarmentImage, config: &InferConfig) -> Result<Self> {
        let mut tape = Tape::new();
        let p = model.reference.params.bind(&mut tape);
        let g = model.reference.forward(&mut tape, &p, garment)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2);
        Ok(Self {
            model,
            clip,
            context: contexts(config.consistency, config.selection, clip.geom.frames, &mut rng),
            fine: tape.value(g.fine).clone(),
            coarse: tape.value(g.coarse).clone(),
        })
    }

    pub fn eval(&self, x: &LatentClip, c_noise: f64) -> tryon_core::Result<LatentClip> {
        let mut tape = Tape::new();
        let p = self.model.denoiser.params.bind(&mut tape);
        let g = GarmentTokens {
            fine: tape.leaf(self.fine.clone()),
            coarse: tape.leaf(self.coarse.clone()),
        };
        let xv = tape.leaf(latent_rows(x));
        let (out, _) = self
            .model
            .denoiser
            .forward(&mut tape, &p, xv, c_noise, &self.clip.conditioning(&self.context), g)
            .map_err(core_error)?;
        rows_to_latent(tape.value(out).clone(), self.clip.geom, x.downsample_factor).map_err(core_error)
    }
}

/// Euler sampling from `x_t` down the configured ladder.
pub fn infer_latents(
    clip: &ClipTensors,
    garment: &GarmentImage,
    model: &ToyModel,
    config: &InferConfig,
    x_t: &LatentClip,
) -> Result<LatentClip> {
    infer_latents_with(clip, garment, model, config, x_t, |_, _, _| {})
}

/// [`infer_latents`] with a callback after every Euler step.
pub fn infer_latents_with(
    clip: &ClipTensors,
    garment: &GarmentImage,
    model: &ToyModel,
    config: &InferConfig,
    x_t: &LatentClip,
    on_step: impl FnMut(usize, f64, &LatentClip),
) -> Result<LatentClip> {
    config.schedule.validate()?;
    let (n, h, w, _) = x_t.dim();
    if Geom::new(n, h, w) != clip.geom {
        return Err(Error::Dimension("initial noise does not match the clip".into()).into());
    }
    let net = RawNetwork::new(model, clip, garment, config)?;
    let raw = |x: &LatentClip, c_noise: f64, net: &RawNetwork<'_>| net.eval(x, c_noise);
    let sigma_data = config.schedule.sigma_data;
    let denoiser = |x: &LatentClip, sigma: f64, net: &RawNetwork<'_>| apply_denoiser(raw, x, sigma, sigma_data, net);
    let sigmas = config.schedule.sigma_steps();
    Ok(euler_sample_with(denoiser, x_t, &sigmas, &net, on_step)?)
}

fn core_error(e: crate::ToyError) -> Error {
    match e {
        crate::ToyError::Core(e) => e,
        other => Error::Generator(other.to_string()),
    }
}

/// Generates a clip of at most `config.window` frames and decodes it.
pub fn infer_clip(
    bundle: &AgnosticBundle,
    garment: &GarmentImage,
    model: &ToyModel,
    config: &InferConfig,
) -> Result<VideoClip> {
    infer_clip_with(bundle, garment, model, config, |_, _, _| {})
}

/// [`infer_clip`] with a callback seeing the latent state after every Euler step.
pub fn infer_clip_with(
    bundle: &AgnosticBundle,
    garment: &GarmentImage,
    model: &ToyModel,
    config: &InferConfig,
    on_step: impl FnMut(usize, f64, &LatentClip),
) -> Result<VideoClip> {
    if bundle.len() > config.window {
        return Err(Error::Config(format!(
            "{} frames exceed the window of {}; use long generation",
            bundle.len(),
            config.window
        ))
        .into());
    }
    let codec = LatentCodec::default();
    let clip = ClipTensors::from_bundle(bundle, &codec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let x_t = initial_noise(clip.geom, clip.factor, config.schedule.sigma_max, &mut rng)?;
    let latent = infer_latents_with(&clip, garment, model, config, &x_t, on_step)?;
    Ok(codec.decode(&latent, clip.frame_rate)?)
}

/// A frame of the long-generation stream: an agnostic latent, or a finished one.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFrame {
    /// `(h, w, 4)`
    pub latent: Array3<f64>,
    pub generated: bool,
}

/// Keyframes, then overlapping windows, each window sampled with [`infer_latents`].
///
/// Finished frames are passed back as conditioning with an empty mask and are returned
/// unchanged by later windows.
pub fn long_infer(
    bundle: &AgnosticBundle,
    garment: &GarmentImage,
    model: &ToyModel,
    config: &InferConfig,
    long: &LongVideoConfig,
) -> Result<(VideoClip, LongGeneration<LatentFrame>)> {
    let codec = LatentCodec::default();
    let full = ClipTensors::from_bundle(bundle, &codec)?;
    let agn = codec.encode(&bundle.agnostic.clip)?;
    let frames: Vec<LatentFrame> = agn
        .latents
        .outer_iter()
        .map(|l| LatentFrame { latent: l.to_owned(), generated: false })
        .collect();
    let per_frame = full.geom.tokens_per_frame();
    let window_config = InferConfig { window: long.window, ..*config };

    let mut generator = |indices: &[usize], inputs: &[LatentFrame]| -> tryon_core::Result<Vec<LatentFrame>> {
        let geom = Geom::new(indices.len(), full.geom.height, full.geom.width);
        let mut clip = ClipTensors {
            geom,
            factor: full.factor,
            frame_rate: full.frame_rate,
            agnostic: Array2::zeros((geom.rows(), LATENT_CHANNELS)),
            mask: Array2::zeros((geom.rows(), 1)),
            pose: Array2::zeros((geom.rows(), 3)),
        };
        for (k, (&i, frame)) in indices.iter().zip(inputs).enumerate() {
            let dst = k * per_frame..(k + 1) * per_frame;
            let src = i * per_frame..(i + 1) * per_frame;
            let flat = frame.latent.view().into_shape_with_order((per_frame, LATENT_CHANNELS)).expect("contiguous frame");
            clip.agnostic.slice_mut(s![dst.clone(), ..]).assign(&flat);
            clip.pose.slice_mut(s![dst.clone(), ..]).assign(&full.pose.slice(s![src.clone(), ..]));
            if !frame.generated {
                clip.mask.slice_mut(s![dst, ..]).assign(&full.mask.slice(s![src, ..]));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(indices[0] as u64 + 16);
        let x_t = initial_noise(geom, full.factor, config.schedule.sigma_max, &mut rng).map_err(core_error)?;
        let out = infer_latents(&clip, garment, model, &window_config, &x_t).map_err(core_error)?;
        Ok(inputs
            .iter()
            .zip(out.latents.outer_iter())
            .map(|(input, sampled)| {
                if input.generated {
                    input.clone()
                } else {
                    LatentFrame { latent: sampled.to_owned(), generated: true }
                }
            })
            .collect())
    };
    let distances = PoseDistanceMatrix::new(&bundle.pose);
    let generation = orchestrate_long_generation(&frames, |i, j| distances.get(i, j), &mut generator, long)?;
    let views: Vec<_> = generation.frames.iter().map(|f| f.latent.view()).collect();
    let latents = ndarray::stack(Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))?;
    let video = codec.decode(&LatentClip::new(latents, full.factor)?, full.frame_rate)?;
    Ok((video, generation))
}
