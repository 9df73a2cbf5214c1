//! Training: denoising loss plus the agnostic attention loss, one optimiser step at a time.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tryon_core::agnostic_loss::{
    attention_mass, extract_attention_probs, loss_total, mask_to_partition, LossConfig, TokenGrid,
    TokenRegionPartition,
};
use tryon_core::attention::{context_frames, SelectionMode};
use tryon_core::codec::LatentCodec;
use tryon_core::data::{
    area_downsample, resize_mask_to_latent, AgnosticBundle, GarmentImage, LatentClip, VideoClip,
    LATENT_CHANNELS,
};
use tryon_core::edm::NoiseLevelSchedule;
use tryon_core::Error;

use crate::error::{Result, ToyError};
use crate::model::{Conditioning, ToyConfig, ToyModel};
use crate::optim::{Adam, AdamConfig};
use crate::tape::{Geom, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay: LrDecay,
    /// Noise draws per step, all on the same clip.
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Consistency attention: each frame also attends to a second frame of the clip.
    pub consistency: bool,
    /// Frame pairing used at inference; training draws pairs at random unless this
    /// is one of the fixed ablation modes.
    pub selection: SelectionMode,
    pub loss: LossConfig,
    pub schedule: NoiseLevelSchedule,
    /// Mask coverage above which a bottleneck token counts as in-mask.
    pub token_threshold: f64,
    pub adam: AdamConfig,
    pub model: ToyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            lr_decay: LrDecay::Constant,
            batch_size: 2,
            steps: 500,
            seed: 0,
            consistency: true,
            selection: SelectionMode::InferDeterministic,
            loss: LossConfig::default(),
            schedule: NoiseLevelSchedule::default(),
            token_threshold: 0.5,
            adam: AdamConfig::default(),
            model: ToyConfig::default(),
        }
    }
}

/// Learning rate as a function of the step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    /// Half cosine from `learning_rate` at step 0 down to zero after `steps`.
    Cosine,
}

impl TrainConfig {
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        match self.lr_decay {
            LrDecay::Constant => self.learning_rate,
            LrDecay::Cosine => {
                let t = (step as f64 / self.steps.max(1) as f64).min(1.0);
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)).into());
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be positive".into()).into());
        }
        if !(self.token_threshold > 0.0 && self.token_threshold < 1.0) {
            return Err(Error::Config(format!("token threshold {} outside (0, 1)", self.token_threshold)).into());
        }
        self.loss.validate()?;
        self.schedule.validate()?;
        self.model.validate()
    }

    fn training_selection(&self) -> SelectionMode {
        match self.selection {
            SelectionMode::InferDeterministic => SelectionMode::TrainRandom,
            other => other,
        }
    }
}

/// `(N, h, w, C)` latents as `(N * h * w, C)` rows.
pub fn latent_rows(latent: &LatentClip) -> Array2<f64> {
    let (n, h, w, c) = latent.dim();
    latent
        .latents
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * h * w, c))
        .expect("contiguous latent")
}

pub fn rows_to_latent(rows: Array2<f64>, geom: Geom, factor: usize) -> Result<LatentClip> {
    let c = rows.ncols();
    let latents = rows
        .into_shape_with_order((geom.frames, geom.height, geom.width, c))
        .map_err(|e| Error::Dimension(e.to_string()))?;
    Ok(LatentClip::new(latents, factor)?)
}

/// A clip's conditioning streams at latent resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTensors {
    pub geom: Geom,
    pub factor: usize,
    pub frame_rate: f64,
    /// `(rows, 4)`
    pub agnostic: Array2<f64>,
    /// `(rows, 1)`
    pub mask: Array2<f64>,
    /// `(rows, 3)`
    pub pose: Array2<f64>,
}

impl ClipTensors {
    pub fn from_bundle(bundle: &AgnosticBundle, codec: &LatentCodec) -> Result<Self> {
        let agn = codec.encode(&bundle.agnostic.clip)?;
        let (n, h, w, _) = agn.dim();
        let geom = Geom::new(n, h, w);
        let mask = resize_mask_to_latent(&bundle.mask, codec.factor())?
            .into_shape_with_order((geom.rows(), 1))
            .expect("contiguous mask");
        let pose = area_downsample(bundle.pose.frames(), codec.factor())?
            .into_shape_with_order((geom.rows(), 3))
            .expect("contiguous pose");
        Ok(Self {
            geom,
            factor: codec.factor(),
            frame_rate: bundle.agnostic.clip.frame_rate,
            agnostic: latent_rows(&agn),
            mask,
            pose,
        })
    }

    pub fn conditioning<'a>(&'a self, context: &'a [Vec<usize>]) -> Conditioning<'a> {
        Conditioning {
            geom: self.geom,
            agnostic: &self.agnostic,
            mask: &self.mask,
            pose: &self.pose,
            context,
        }
    }
}

/// One training clip: conditioning, encoded target, garment and token partition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub clip: ClipTensors,
    /// `(rows, 4)` clean latent.
    pub target: Array2<f64>,
    pub garment: GarmentImage,
    pub partition: TokenRegionPartition,
}

impl TrainData {
    pub fn new(
        bundle: &AgnosticBundle,
        garment: &GarmentImage,
        target: &VideoClip,
        model: &ToyConfig,
        token_threshold: f64,
    ) -> Result<Self> {
        let codec = LatentCodec::default();
        let clip = ClipTensors::from_bundle(bundle, &codec)?;
        let x0 = codec.encode(target)?;
        if latent_rows(&x0).dim() != clip.agnostic.dim() {
            return Err(Error::Dimension("target and agnostic clips differ in shape".into()).into());
        }
        let (rows, cols) = model.token_grid();
        let partition = mask_to_partition(&bundle.mask, TokenGrid::new(rows, cols), token_threshold)?;
        Ok(Self {
            target: latent_rows(&x0),
            clip,
            garment: garment.clone(),
            partition,
        })
    }

    pub fn frames(&self) -> usize {
        self.clip.geom.frames
    }
}

/// One noise level and its noise sample, `noise ~ N(0, sigma^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub sigma: f64,
    pub noise: Array2<f64>,
}

impl NoiseDraw {
    pub fn sample(schedule: &NoiseLevelSchedule, rows: usize, rng: &mut ChaCha8Rng) -> Self {
        let sigma = schedule.sample_sigma(rng);
        let noise = Array2::from_shape_simple_fn((rows, LATENT_CHANNELS), || {
            let z: f64 = StandardNormal.sample(rng);
            z * sigma
        });
        Self { sigma, noise }
    }
}

/// Losses of one batch, averaged over its draws, with optional gradients.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub dsm: f64,
    pub agn: f64,
    pub total: f64,
    pub in_mask_mass: f64,
    pub out_mask_mass: f64,
    /// Denoiser gradients then encoder gradients, in parameter order.
    pub grads: Option<Vec<Array2<f64>>>,
}

/// Frame pairings for every frame of an `n`-frame clip.
pub fn contexts(consistency: bool, mode: SelectionMode, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    (0..n).map(|i| context_frames(consistency, mode, i, n, rng)).collect()
}

/// Loss of `model` on fixed draws and pairings.
///
/// The attention loss reaches the network through `sum(S * dL/dS)`, with `dL/dS` from
/// the analytic loss gradient evaluated at the current probabilities.
pub fn evaluate_batch(
    model: &ToyModel,
    data: &TrainData,
    draws: &[NoiseDraw],
    context: &[Vec<usize>],
    config: &TrainConfig,
    with_grads: bool,
) -> Result<BatchEval> {
    if draws.is_empty() {
        return Err(Error::Config("empty batch".into()).into());
    }
    let lambda = config.loss.lambda_agn;
    let loss_defined = data.partition.ensure_every_frame_has_region();
    if lambda > 0.0 {
        loss_defined.as_ref().map_err(|e| Error::DegenerateMask(e.to_string()))?;
    }
    let schedule = &config.schedule;
    let mut tape = Tape::new();
    let den_vars = model.denoiser.params.bind(&mut tape);
    let ref_vars = model.reference.params.bind(&mut tape);
    let garment = model.reference.forward(&mut tape, &ref_vars, &data.garment)?;
    let cond = data.clip.conditioning(context);

    let mut totals: Vec<Var> = Vec::with_capacity(draws.len());
    let (mut dsm_sum, mut agn_sum, mut in_sum, mut out_sum) = (0.0, 0.0, 0.0, 0.0);
    for draw in draws {
        if draw.noise.dim() != data.target.dim() {
            return Err(Error::Dimension("noise and latent shapes differ".into()).into());
        }
        let pc = schedule.precondition(draw.sigma)?;
        let noisy = &data.target + &draw.noise;
        let x = tape.leaf(&noisy * pc.c_in);
        let (out, trace) = model.denoiser.forward(&mut tape, &den_vars, x, pc.c_noise, &cond, garment)?;
        // weight * mean((c_skip x + c_out F - x0)^2) rewritten as a target for F
        let target_f = (&data.target - &(&noisy * pc.c_skip)) / pc.c_out;
        let weight = schedule.loss_weight(draw.sigma)? * pc.c_out * pc.c_out;
        let dsm = tape.sq_err_mean(out, target_f, weight);
        dsm_sum += tape.scalar(dsm);

        let probs = extract_attention_probs(&weight_layers(&tape, &trace.weights), trace.garment_keys.clone())?;
        for m in attention_mass(&probs, &data.partition)? {
            in_sum += m.in_mask / data.frames() as f64;
            out_sum += m.out_mask / data.frames() as f64;
        }
        if loss_defined.is_ok() {
            agn_sum += config.loss.loss(&probs, &data.partition)?;
        }
        if lambda > 0.0 {
            let g = config.loss.grad(&probs, &data.partition)?;
            let heads = config.model.heads as f64;
            let mut terms = Vec::new();
            for (i, per_head) in trace.garment_max.iter().enumerate() {
                let col = g.row(i).mapv(|v| v / heads).insert_axis(ndarray::Axis(1));
                for &h in per_head {
                    terms.push(tape.dot_const(h, col.clone()));
                }
            }
            let surrogate = tape.sum(&terms);
            let weighted = tape.scale(surrogate, lambda);
            totals.push(tape.sum(&[dsm, weighted]));
        } else {
            totals.push(dsm);
        }
    }
    let b = draws.len() as f64;
    let summed = tape.sum(&totals);
    let loss = tape.scale(summed, 1.0 / b);
    let (dsm, agn) = (dsm_sum / b, agn_sum / b);
    let total = if dsm.is_finite() && agn.is_finite() {
        loss_total(dsm, agn, lambda)?
    } else {
        f64::NAN
    };
    let grads = with_grads.then(|| {
        let g = tape.backward(loss);
        den_vars
            .iter()
            .zip(model.denoiser.params.values())
            .chain(ref_vars.iter().zip(model.reference.params.values()))
            .map(|(&v, p)| g.get_or_zeros(v, p.dim()))
            .collect()
    });
    Ok(BatchEval {
        dsm,
        agn,
        total,
        in_mask_mass: in_sum / b,
        out_mask_mass: out_sum / b,
        grads,
    })
}

/// Stacks per-frame, per-head weights into one `(N, heads, T, K)` layer.
fn weight_layers(tape: &Tape, weights: &[Vec<Var>]) -> Vec<ndarray::Array4<f64>> {
    let n = weights.len();
    let heads = weights.first().map_or(0, Vec::len);
    let (t, k) = weights
        .first()
        .and_then(|h| h.first())
        .map_or((0, 0), |&w| tape.value(w).dim());
    let mut layer = ndarray::Array4::zeros((n, heads, t, k));
    for (i, per_head) in weights.iter().enumerate() {
        for (h, &w) in per_head.iter().enumerate() {
            layer.slice_mut(ndarray::s![i, h, .., ..]).assign(tape.value(w));
        }
    }
    vec![layer]
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub dsm: f64,
    pub agn: f64,
    /// Garment attention summed over in-mask tokens, mean over frames.
    pub in_mask_mass: f64,
    pub out_mask_mass: f64,
    pub total: f64,
}

impl StepRecord {
    /// Share of garment attention that lands inside the mask.
    pub fn in_mask_ratio(&self) -> f64 {
        let all = self.in_mask_mass + self.out_mask_mass;
        if all > 0.0 {
            self.in_mask_mass / all
        } else {
            0.0
        }
    }
}

/// Model, optimiser state and the random stream that drives training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ToyModel,
    pub adam: Adam,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Self::from_model(ToyModel::new(config.model, config.seed)?, config)
    }

    /// Continues from existing weights with a fresh optimiser.
    pub fn from_model(model: ToyModel, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.config() != config.model {
            return Err(Error::Config("model architecture differs from the training config".into()).into());
        }
        let shapes: Vec<&Array2<f64>> = model.param_sets().into_iter().flat_map(|p| p.values()).collect();
        let adam = Adam::new(config.adam, shapes);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self { model, adam, step: 0, rng })
    }

    fn max_abs_param(&self) -> f64 {
        self.model
            .param_sets()
            .iter()
            .flat_map(|p| p.values())
            .flat_map(|v| v.iter())
            .fold(0.0f64, |a, &b| a.max(b.abs()))
    }

    /// Applies `grads` (denoiser then encoder order) with the configured rate.
    pub fn apply(&mut self, grads: &[Array2<f64>], lr: f64) {
        let [den, enc] = self.model.param_sets_mut();
        let params = den.values_mut().iter_mut().chain(enc.values_mut().iter_mut());
        self.adam.update(lr, params, grads);
    }
}

/// Samples a batch and pairings, evaluates and takes one optimiser step.
pub fn train_step(state: &mut TrainState, data: &TrainData, config: &TrainConfig) -> Result<StepRecord> {
    let rows = data.target.nrows();
    let draws: Vec<NoiseDraw> = (0..config.batch_size)
        .map(|_| NoiseDraw::sample(&config.schedule, rows, &mut state.rng))
        .collect();
    let ctx = contexts(config.consistency, config.training_selection(), data.frames(), &mut state.rng);
    let eval = evaluate_batch(&state.model, data, &draws, &ctx, config, true)?;
    let grads = eval.grads.expect("requested gradients");
    let grads_finite = grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
    if !eval.total.is_finite() || !grads_finite {
        return Err(ToyError::NonFinite {
            step: state.step,
            dsm: eval.dsm,
            agn: eval.agn,
            sigmas: draws.iter().map(|d| d.sigma).collect(),
            max_param: state.max_abs_param(),
        });
    }
    state.apply(&grads, config.learning_rate_at(state.step));
    let record = StepRecord {
        step: state.step,
        dsm: eval.dsm,
        agn: eval.agn,
        in_mask_mass: eval.in_mask_mass,
        out_mask_mass: eval.out_mask_mass,
        total: eval.total,
    };
    state.step += 1;
    Ok(record)
}

/// Runs `config.steps` training steps on one clip; the curve has one record per step.
pub fn overfit_clip(data: &TrainData, config: &TrainConfig) -> Result<(TrainState, Vec<StepRecord>)> {
    overfit_clip_with(data, config, |_| {})
}

/// [`overfit_clip`] with a callback after every step.
pub fn overfit_clip_with(
    data: &TrainData,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(TrainState, Vec<StepRecord>)> {
    let mut state = TrainState::new(config)?;
    let mut curve = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let record = train_step(&mut state, data, config)?;
        on_step(&record);
        curve.push(record);
    }
    Ok((state, curve))
}

/// Mean garment attention mass over fixed noise levels with inference-time pairings.
///
/// Returns `(in_mask, out_mask)` averaged over the levels.
pub fn probe_attention_mass(
    model: &ToyModel,
    data: &TrainData,
    config: &TrainConfig,
    sigmas: &[f64],
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = contexts(config.consistency, config.selection, data.frames(), &mut rng);
    let rows = data.target.nrows();
    let draws: Vec<NoiseDraw> = sigmas
        .iter()
        .map(|&sigma| NoiseDraw {
            sigma,
            noise: Array2::from_shape_simple_fn((rows, LATENT_CHANNELS), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * sigma
            }),
        })
        .collect();
    let probe = TrainConfig {
        loss: LossConfig { lambda_agn: 0.0, ..config.loss },
        ..*config
    };
    let eval = evaluate_batch(model, data, &draws, &ctx, &probe, false)?;
    Ok((eval.in_mask_mass, eval.out_mask_mass))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_clip, MotionSpec};
    use proptest::prelude::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            model: ToyConfig {
                base_channels: 4,
                mid_channels: 6,
                attention_width: 8,
                heads: 2,
                pose_hidden: 3,
                ..ToyConfig::default()
            },
            batch_size: 1,
            steps: 3,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn data(frames: usize, config: &TrainConfig) -> TrainData {
        let c = generate_synthetic_clip(0, frames, 64, 48, &MotionSpec::default()).unwrap();
        TrainData::new(&c.bundle, &c.garment, &c.target, &config.model, config.token_threshold).unwrap()
    }

    fn randomise(model: &mut ToyModel, seed: u64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for set in model.param_sets_mut() {
            for v in set.values_mut() {
                v.mapv_inplace(|x| x + rng.random_range(-0.05..0.05));
            }
        }
    }

    #[test]
    fn dsm_matches_core_loss() {
        let cfg = tiny_config();
        let d = data(2, &cfg);
        let mut model = ToyModel::new(cfg.model, 1).unwrap();
        randomise(&mut model, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draw = NoiseDraw::sample(&cfg.schedule, d.target.nrows(), &mut rng);
        let ctx = contexts(true, SelectionMode::InferDeterministic, 2, &mut rng);
        let eval = evaluate_batch(&model, &d, std::slice::from_ref(&draw), &ctx, &cfg, false).unwrap();

        let raw = |x: &LatentClip, c_noise: f64, _: &()| -> tryon_core::Result<LatentClip> {
            let mut tape = Tape::new();
            let pr = model.reference.params.bind(&mut tape);
            let g = model.reference.forward(&mut tape, &pr, &d.garment).unwrap();
            let pd = model.denoiser.params.bind(&mut tape);
            let xv = tape.leaf(latent_rows(x));
            let (out, _) = model.denoiser.forward(&mut tape, &pd, xv, c_noise, &d.clip.conditioning(&ctx), g).unwrap();
            Ok(rows_to_latent(tape.value(out).clone(), d.clip.geom, 2).unwrap())
        };
        let den = |x: &LatentClip, s: f64, c: &()| tryon_core::edm::apply_denoiser(raw, x, s, 0.5, c);
        let x0 = rows_to_latent(d.target.clone(), d.clip.geom, 2).unwrap();
        let noise = rows_to_latent(draw.noise.clone(), d.clip.geom, 2).unwrap();
        let expected = tryon_core::edm::dsm_loss(den, &x0, &noise, draw.sigma, 0.5, &()).unwrap();
        assert!((eval.dsm - expected).abs() <= 1e-10 * expected.max(1.0), "{} vs {expected}", eval.dsm);
    }

    #[test]
    fn zero_weight_gives_pure_denoising_gradient() {
        let cfg = TrainConfig {
            loss: LossConfig { lambda_agn: 0.0, ..LossConfig::default() },
            ..tiny_config()
        };
        let d = data(2, &cfg);
        let mut model = ToyModel::new(cfg.model, 4).unwrap();
        randomise(&mut model, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let draw = NoiseDraw::sample(&cfg.schedule, d.target.nrows(), &mut rng);
        let ctx = contexts(true, SelectionMode::InferDeterministic, 2, &mut rng);
        let eval = evaluate_batch(&model, &d, std::slice::from_ref(&draw), &ctx, &cfg, true).unwrap();

        // the denoising term alone, built directly on a fresh tape
        let mut tape = Tape::new();
        let pd = model.denoiser.params.bind(&mut tape);
        let pr = model.reference.params.bind(&mut tape);
        let g = model.reference.forward(&mut tape, &pr, &d.garment).unwrap();
        let pc = cfg.schedule.precondition(draw.sigma).unwrap();
        let noisy = &d.target + &draw.noise;
        let x = tape.leaf(&noisy * pc.c_in);
        let (out, _) = model.denoiser.forward(&mut tape, &pd, x, pc.c_noise, &d.clip.conditioning(&ctx), g).unwrap();
        let target_f = (&d.target - &(&noisy * pc.c_skip)) / pc.c_out;
        let w = cfg.schedule.loss_weight(draw.sigma).unwrap() * pc.c_out * pc.c_out;
        let loss = tape.sq_err_mean(out, target_f, w);
        let grads = tape.backward(loss);
        let expected: Vec<Array2<f64>> = pd
            .iter()
            .chain(pr.iter())
            .zip(model.param_sets().iter().flat_map(|p| p.values()))
            .map(|(&v, p)| grads.get_or_zeros(v, p.dim()))
            .collect();
        assert_eq!(eval.grads.unwrap(), expected);

        // and the denoising value does not depend on the attention weight
        let weighted = TrainConfig { loss: LossConfig::default(), ..cfg };
        let e2 = evaluate_batch(&model, &d, std::slice::from_ref(&draw), &ctx, &weighted, false).unwrap();
        assert_eq!(e2.dsm, eval.dsm);
        assert!(e2.agn.is_finite() && e2.agn > 0.0);
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        // directional derivative of the full objective along the query projection
        let cfg = tiny_config();
        let d = data(2, &cfg);
        let mut model = ToyModel::new(cfg.model, 7).unwrap();
        randomise(&mut model, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draw = NoiseDraw::sample(&cfg.schedule, d.target.nrows(), &mut rng);
        let ctx = contexts(true, SelectionMode::InferDeterministic, 2, &mut rng);
        let eval = evaluate_batch(&model, &d, std::slice::from_ref(&draw), &ctx, &cfg, true).unwrap();
        let grads = eval.grads.unwrap();
        let idx = model.denoiser.params.names().iter().position(|n| n == "attn.q").unwrap();
        let dir = grads[idx].clone();
        let h = 1e-6;
        let shifted = |sign: f64| {
            let mut m = model.clone();
            m.denoiser.params.values_mut()[idx].scaled_add(sign * h, &dir);
            evaluate_batch(&m, &d, std::slice::from_ref(&draw), &ctx, &cfg, false).unwrap().total
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
        let analytic = dir.mapv(|v| v * v).sum();
        assert!(
            (numeric - analytic).abs() <= 1e-4 * analytic.abs().max(1e-8),
            "numeric {numeric} analytic {analytic}"
        );
    }

    #[test]
    fn records_are_finite_and_reproducible() {
        let cfg = tiny_config();
        let d = data(3, &cfg);
        let (s1, c1) = overfit_clip(&d, &cfg).unwrap();
        let (s2, c2) = overfit_clip(&d, &cfg).unwrap();
        assert_eq!(c1.len(), cfg.steps);
        assert_eq!(c1, c2);
        assert_eq!(s1.model, s2.model);
        for r in &c1 {
            assert!(r.dsm.is_finite() && r.agn.is_finite() && r.total.is_finite());
            assert!(r.in_mask_ratio() > 0.0 && r.in_mask_ratio() < 1.0);
        }
        assert_eq!(c1.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn small_steps_reduce_the_batch_loss() {
        let cfg = TrainConfig { learning_rate: 1e-4, ..tiny_config() };
        let d = data(2, &cfg);
        let mut decreased = 0;
        for seed in 0..20u64 {
            let mut state = TrainState::new(&TrainConfig { seed, ..cfg }).unwrap();
            randomise(&mut state.model, seed + 100);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let draws = vec![NoiseDraw::sample(&cfg.schedule, d.target.nrows(), &mut rng)];
            let ctx = contexts(true, SelectionMode::TrainRandom, 2, &mut rng);
            let before = evaluate_batch(&state.model, &d, &draws, &ctx, &cfg, true).unwrap();
            state.apply(&before.grads.unwrap(), cfg.learning_rate);
            let after = evaluate_batch(&state.model, &d, &draws, &ctx, &cfg, false).unwrap();
            if after.total <= before.total {
                decreased += 1;
            }
        }
        assert!(decreased >= 18, "loss fell in {decreased} of 20 seeds");
    }

    #[test]
    fn degenerate_partition_only_matters_with_the_loss_on() {
        let cfg = tiny_config();
        let mut d = data(2, &cfg);
        let grid = d.partition.grid();
        d.partition = TokenRegionPartition::from_flags(grid, vec![vec![false; grid.len()]; 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws = vec![NoiseDraw::sample(&cfg.schedule, d.target.nrows(), &mut rng)];
        let ctx = contexts(false, SelectionMode::InferDeterministic, 2, &mut rng);
        assert!(evaluate_batch(&ToyModel::new(cfg.model, 0).unwrap(), &d, &draws, &ctx, &cfg, false).is_err());
        let off = TrainConfig { loss: LossConfig { lambda_agn: 0.0, ..cfg.loss }, ..cfg };
        let e = evaluate_batch(&ToyModel::new(cfg.model, 0).unwrap(), &d, &draws, &ctx, &off, false).unwrap();
        assert_eq!(e.agn, 0.0);
    }

    #[test]
    fn cosine_decay_runs_from_the_rate_to_zero() {
        let cfg = TrainConfig { learning_rate: 2e-3, steps: 100, lr_decay: LrDecay::Cosine, ..TrainConfig::default() };
        assert_eq!(cfg.learning_rate_at(0), 2e-3);
        assert!((cfg.learning_rate_at(50) - 1e-3).abs() < 1e-15);
        assert!(cfg.learning_rate_at(100).abs() < 1e-15);
        let flat = TrainConfig { lr_decay: LrDecay::Constant, ..cfg };
        assert_eq!(flat.learning_rate_at(99), 2e-3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
        let unknown = r#"{"learning_rate": 0.001, "mystery": 2}"#;
        assert!(serde_json::from_str::<TrainConfig>(unknown).is_err());
        let parsed: TrainConfig =
            serde_json::from_str(r#"{"learning_rate": 0.001, "loss": {"lambda_agn": 0.1}}"#).unwrap();
        assert_eq!(parsed.loss.lambda_agn, 0.1);
        assert_eq!(parsed.loss.lambda_n, 0.01);
        assert_eq!(parsed.batch_size, 2);
    }

    proptest! {
        #[test]
        fn cosine_rate_is_bounded_and_non_increasing(lr in 1e-6f64..1e-1, steps in 1usize..2000) {
            let cfg = TrainConfig { learning_rate: lr, steps, lr_decay: LrDecay::Cosine, ..TrainConfig::default() };
            let mut prev = f64::INFINITY;
            for step in 0..=steps {
                let r = cfg.learning_rate_at(step);
                prop_assert!(r >= 0.0 && r <= lr && r <= prev);
                prev = r;
            }
        }
    }
}
