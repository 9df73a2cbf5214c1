//! Overfits the toy model on one synthetic clip and reports the loss curve.
//!
//! `cargo run --release -p tryon-toy --example overfit -- [steps] [lr] [lambda_agn] [ct 0|1]`

use std::time::Instant;

use tryon_toy::synth::{generate_synthetic_clip, MotionSpec};
use tryon_toy::train::{overfit_clip_with, probe_attention_mass, TrainConfig, TrainData};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).map_or(Ok(d), |s| s.parse::<f64>()).unwrap_or(d);
    let mut config = TrainConfig {
        steps: arg(0, 20.0) as usize,
        learning_rate: arg(1, 5e-5),
        consistency: arg(3, 1.0) != 0.0,
        ..TrainConfig::default()
    };
    config.loss.lambda_agn = arg(2, 0.5);
    let clip = generate_synthetic_clip(0, 8, 64, 48, &MotionSpec::default())?;
    let data = TrainData::new(&clip.bundle, &clip.garment, &clip.target, &config.model, config.token_threshold)?;
    let start = Instant::now();
    let (state, curve) = overfit_clip_with(&data, &config, |r| {
        if r.step % 25 == 0 {
            println!(
                "step {:4} dsm {:.4} agn {:.4} in {:.3} out {:.3}",
                r.step, r.dsm, r.agn, r.in_mask_mass, r.out_mask_mass
            );
        }
    })?;
    let per_step = start.elapsed().as_secs_f64() / curve.len().max(1) as f64;
    let (i, o) = probe_attention_mass(&state.model, &data, &config, &[0.5, 1.0, 2.0], 9)?;
    println!("{per_step:.3}s/step  probe in {i:.4} out {o:.4} ratio {:.3}", i / o.max(1e-12));
    Ok(())
}
