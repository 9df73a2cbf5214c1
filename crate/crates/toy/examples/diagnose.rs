//! Trains (or loads) the overfit model and reports reconstruction quality per noise level.
//!
//! `cargo run --release -p tryon-toy --example diagnose -- <checkpoint> [steps] [lr] [batch] [p_mean] [cosine 0|1]`

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tryon_core::codec::LatentCodec;
use tryon_core::edm::{apply_denoiser, NoiseLevelSchedule};
use tryon_core::metrics::clip_ssim;
use tryon_toy::checkpoint::{load_checkpoint, save_checkpoint};
use tryon_toy::infer::{infer_clip, InferConfig, RawNetwork};
use tryon_toy::synth::{generate_synthetic_clip, MotionSpec};
use tryon_toy::train::{latent_rows, overfit_clip, LrDecay, rows_to_latent, TrainConfig, TrainData};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let path = Path::new(args.first().map(String::as_str).unwrap_or("/tmp/overfit.ckpt"));
    let mut config = TrainConfig {
        steps: args.get(1).map_or(Ok(500), |s| s.parse())?,
        learning_rate: args.get(2).map_or(Ok(1e-3), |s| s.parse())?,
        batch_size: args.get(3).map_or(Ok(2), |s| s.parse())?,
        ..TrainConfig::default()
    };
    config.schedule.p_mean = args.get(4).map_or(Ok(config.schedule.p_mean), |s| s.parse())?;
    if args.get(5).is_some_and(|s| s == "1") {
        config.lr_decay = LrDecay::Cosine;
    }
    config.loss.lambda_agn = 0.5;
    let clip = generate_synthetic_clip(0, 8, 64, 48, &MotionSpec::default())?;
    let data = TrainData::new(&clip.bundle, &clip.garment, &clip.target, &config.model, config.token_threshold)?;
    let model = if path.exists() {
        load_checkpoint(path)?.0
    } else {
        let (state, _) = overfit_clip(&data, &config)?;
        save_checkpoint(path, &state.model, state.step)?;
        state.model
    };
    let codec = LatentCodec::default();
    println!("agnostic vs target ssim {:.4}", clip_ssim(&clip.bundle.agnostic.clip, &clip.target)?);
    let net = RawNetwork::new(&model, &data.clip, &data.garment, &InferConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for sigma in [0.02, 0.1, 0.5, 1.0, 2.0, 5.0, 20.0, 80.0] {
        let noise = Array2::from_shape_simple_fn(data.target.dim(), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * sigma
        });
        let noisy = rows_to_latent(&data.target + &noise, data.clip.geom, 2)?;
        let d = apply_denoiser(|x, c, n: &RawNetwork<'_>| n.eval(x, c), &noisy, sigma, 0.5, &net)?;
        let err = (&latent_rows(&d) - &data.target).mapv(|v| v * v).mean().unwrap();
        let video = codec.decode(&d, 8.0)?;
        println!("sigma {sigma:6.2}: latent mse {err:.5} ssim {:.4}", clip_ssim(&video, &clip.target)?);
    }
    for (steps, sigma_max) in [(25, 80.0), (25, 10.0), (50, 80.0)] {
        let cfg = InferConfig {
            schedule: NoiseLevelSchedule { num_steps: steps, sigma_max, ..NoiseLevelSchedule::default() },
            ..InferConfig::default()
        };
        let video = infer_clip(&clip.bundle, &clip.garment, &model, &cfg)?;
        println!("sample {steps} steps from {sigma_max}: ssim {:.4}", clip_ssim(&video, &clip.target)?);
    }
    Ok(())
}
