//! Subcommand implementations. Each returns the files it wrote, relative to `--out`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use tryon_core::clip_io::{read_clip_dir, write_clip_dir, ClipDirectory};
use tryon_core::codec::LatentCodec;
use tryon_core::data::{AgnosticBundle, GarmentImage, VideoClip};
use tryon_core::keyframes::{plan_segments, select_keyframes, PlanFile};
use tryon_core::metrics::{clip_ssim, flicker_score, MetricReport};
use tryon_toy::checkpoint::{load_checkpoint, save_checkpoint};
use tryon_toy::infer::{infer_clip, infer_clip_with, long_infer};
use tryon_toy::model::ToyModel;
use tryon_toy::synth::generate_synthetic_clip;
use tryon_toy::train::{overfit_clip_with, probe_attention_mass, TrainConfig, TrainData};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::plot::{plot_metrics, read_metrics, write_frame_grid};

/// Everything a command reads besides its own flags.
pub struct Run<'a> {
    pub config: &'a RunConfig,
    pub out: &'a Path,
    /// Input paths recorded in the run manifest.
    pub inputs: BTreeMap<String, String>,
}

impl Run<'_> {
    fn input(&mut self, name: &str, path: &Path) -> Result<(), CliError> {
        if !path.exists() {
            return Err(CliError::io(format!("{name} {} does not exist", path.display())));
        }
        self.inputs.insert(name.to_string(), path.display().to_string());
        Ok(())
    }
}

/// A training clip with its ground truth.
struct Example {
    bundle: AgnosticBundle,
    garment: GarmentImage,
    target: Option<VideoClip>,
}

fn synthetic(config: &RunConfig) -> Result<(ClipDirectory, Example), CliError> {
    let d = &config.data;
    let clip = generate_synthetic_clip(config.seed, d.frames, d.height, d.width, &d.motion)?;
    let dir = ClipDirectory {
        video: Some(clip.source.clone()),
        target: Some(clip.target.clone()),
        mask: Some(clip.bundle.mask.clone()),
        densepose: Some(clip.bundle.pose.clone()),
        garment: Some(clip.garment.clone()),
        fill_value: clip.bundle.agnostic.fill_value,
        seed: Some(config.seed),
    };
    let example = Example {
        bundle: clip.bundle,
        garment: clip.garment,
        target: Some(clip.target),
    };
    Ok((dir, example))
}

fn load_example(run: &mut Run<'_>, data: Option<&Path>) -> Result<Example, CliError> {
    let Some(path) = data else {
        return Ok(synthetic(run.config)?.1);
    };
    run.input("data", path)?;
    let dir = read_clip_dir(path)?;
    Ok(Example {
        bundle: dir.bundle()?,
        garment: dir
            .garment
            .clone()
            .ok_or_else(|| CliError::io(format!("{} has no garment image", path.display())))?,
        target: dir.target,
    })
}

fn require_target(example: &Example) -> Result<&VideoClip, CliError> {
    example
        .target
        .as_ref()
        .ok_or_else(|| CliError::io("clip directory has no target stream"))
}

fn load_model(run: &mut Run<'_>, checkpoint: &Path) -> Result<ToyModel, CliError> {
    run.input("checkpoint", checkpoint)?;
    Ok(load_checkpoint(checkpoint)?.0)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

pub fn gen_data(run: &mut Run<'_>) -> Result<Vec<String>, CliError> {
    let (dir, _) = synthetic(run.config)?;
    write_clip_dir(run.out, &dir)?;
    let mut files = vec!["manifest.toml".to_string(), "garment.png".to_string()];
    files.extend(["video", "target", "mask", "densepose"].map(|s| format!("{s}/")));
    Ok(files)
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    steps: usize,
    initial_dsm: f64,
    final_dsm: f64,
    final_agn: f64,
    probe_in_mask_mass: f64,
    probe_out_mask_mass: f64,
    probe_in_mask_fraction: f64,
}

fn train(config: &TrainConfig, data: &TrainData, metrics: &Path) -> Result<(ToyModel, TrainSummary, usize), CliError> {
    let file = File::create(metrics).map_err(|e| CliError::io(format!("cannot write {}: {e}", metrics.display())))?;
    let mut log = BufWriter::new(file);
    let mut write_err = None;
    let (state, curve) = overfit_clip_with(data, config, |record| {
        let line = serde_json::to_string(record).expect("record serialises");
        if let Err(e) = writeln!(log, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    log.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let probe = probe_attention_mass(&state.model, data, config, &[0.5, 1.0, 2.0], config.seed)?;
    let (first, last) = (curve[0], curve[curve.len() - 1]);
    let summary = TrainSummary {
        steps: curve.len(),
        initial_dsm: first.dsm,
        final_dsm: last.dsm,
        final_agn: last.agn,
        probe_in_mask_mass: probe.0,
        probe_out_mask_mass: probe.1,
        probe_in_mask_fraction: probe.0 / (probe.0 + probe.1),
    };
    Ok((state.model, summary, state.step))
}

pub fn train_toy(run: &mut Run<'_>, data: Option<&Path>) -> Result<Vec<String>, CliError> {
    let example = load_example(run, data)?;
    let target = require_target(&example)?;
    let cfg = &run.config.train;
    let data = TrainData::new(&example.bundle, &example.garment, target, &cfg.model, cfg.token_threshold)?;
    let (model, summary, step) = train(cfg, &data, &run.out.join("metrics.jsonl"))?;
    save_checkpoint(&run.out.join("model.ckpt"), &model, step)?;
    write_json(&run.out.join("summary.json"), &summary)?;
    println!(
        "trained {} steps: dsm {:.4} -> {:.4}, in-mask attention fraction {:.4}",
        summary.steps, summary.initial_dsm, summary.final_dsm, summary.probe_in_mask_fraction
    );
    Ok(vec!["metrics.jsonl".into(), "model.ckpt".into(), "summary.json".into()])
}

fn write_generated(out: &Path, video: &VideoClip, target: Option<&VideoClip>) -> Result<Vec<String>, CliError> {
    let dir = ClipDirectory {
        target: target.cloned(),
        ..ClipDirectory::from_video(video.clone())
    };
    write_clip_dir(&out.join("generated"), &dir)?;
    let mut rows = vec![video];
    rows.extend(target);
    write_frame_grid(&out.join("frames.png"), &rows)?;
    Ok(vec!["generated/".into(), "frames.png".into()])
}

pub fn infer(
    run: &mut Run<'_>,
    checkpoint: &Path,
    data: Option<&Path>,
    debug_steps: bool,
) -> Result<Vec<String>, CliError> {
    let model = load_model(run, checkpoint)?;
    let example = load_example(run, data)?;
    let mut files = Vec::new();
    let video = if debug_steps {
        let dir = run.out.join("steps");
        fs::create_dir_all(&dir)?;
        let codec = LatentCodec::default();
        let frame_rate = example.bundle.agnostic.clip.frame_rate;
        let mut failure = None;
        let video = infer_clip_with(&example.bundle, &example.garment, &model, &run.config.infer, |k, _, x| {
            let result = codec
                .decode(x, frame_rate)
                .map_err(CliError::from)
                .and_then(|v| write_frame_grid(&dir.join(format!("{k:03}.png")), &[&v]));
            if let Err(e) = result {
                failure.get_or_insert(e);
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        files.push("steps/".into());
        video
    } else {
        infer_clip(&example.bundle, &example.garment, &model, &run.config.infer)?
    };
    files.extend(write_generated(run.out, &video, example.target.as_ref())?);
    if let Some(target) = &example.target {
        println!("clip ssim vs target {:.4}", clip_ssim(&video, target)?);
    }
    Ok(files)
}

pub fn long_infer_cmd(run: &mut Run<'_>, checkpoint: &Path, data: Option<&Path>) -> Result<Vec<String>, CliError> {
    let model = load_model(run, checkpoint)?;
    let example = load_example(run, data)?;
    let long = &run.config.long;
    let (video, generation) = long_infer(&example.bundle, &example.garment, &model, &run.config.infer, long)?;
    let plan = PlanFile::new(
        generation.keyframes.as_ref().map(|k| (k, long.keyframe_mode)),
        &generation.segments,
        long.window,
        video.len(),
    );
    fs::write(run.out.join("plan.toml"), plan.to_toml()?)?;
    let mut files = vec!["plan.toml".to_string()];
    files.extend(write_generated(run.out, &video, example.target.as_ref())?);
    println!(
        "generated {} frames in {} generator calls",
        video.len(),
        generation.generator_calls
    );
    Ok(files)
}

pub fn select_keyframes_cmd(run: &mut Run<'_>, data: &Path) -> Result<Vec<String>, CliError> {
    run.input("data", data)?;
    let dir = read_clip_dir(data)?;
    let pose = dir
        .densepose
        .ok_or_else(|| CliError::io(format!("{} has no densepose stream", data.display())))?;
    let long = &run.config.long;
    let keyframes = select_keyframes(&pose, long.d_pose, long.s_max, long.keyframe_mode)?;
    let segments = plan_segments(pose.len(), long.window, long.overlap)?;
    let plan = PlanFile::new(Some((&keyframes, long.keyframe_mode)), &segments, long.window, pose.len());
    fs::write(run.out.join("plan.toml"), plan.to_toml()?)?;
    println!("keyframes {:?}", keyframes.keyframes);
    Ok(vec!["plan.toml".into()])
}

pub fn plan_segments_cmd(run: &mut Run<'_>, data: Option<&Path>) -> Result<Vec<String>, CliError> {
    let frames = match data {
        Some(path) => {
            run.input("data", path)?;
            tryon_core::clip_io::read_manifest(path)?.frames
        }
        None => run.config.data.frames,
    };
    let long = &run.config.long;
    let segments = plan_segments(frames, long.window, long.overlap)?;
    let plan = PlanFile::new(None, &segments, long.window, frames);
    fs::write(run.out.join("plan.toml"), plan.to_toml()?)?;
    println!("segments {:?}", plan.segments);
    Ok(vec!["plan.toml".into()])
}

/// The stream a clip directory is scored by: its target if present, else its video.
fn reference_clip(dir: ClipDirectory, path: &Path) -> Result<VideoClip, CliError> {
    dir.target
        .or(dir.video)
        .ok_or_else(|| CliError::io(format!("{} has no video or target stream", path.display())))
}

pub fn eval(run: &mut Run<'_>, generated: &Path, reference: &Path, hash: &str) -> Result<Vec<String>, CliError> {
    run.input("generated", generated)?;
    run.input("reference", reference)?;
    let gen_dir = read_clip_dir(generated)?;
    let gen = gen_dir
        .video
        .ok_or_else(|| CliError::io(format!("{} has no video stream", generated.display())))?;
    let reference = reference_clip(read_clip_dir(reference)?, reference)?;
    let name = generated
        .file_name()
        .map_or_else(|| "clip".to_string(), |n| n.to_string_lossy().into_owned());
    let mut report = MetricReport::from_pairs([(name.as_str(), &gen, &reference)])?;
    report.config_hash = Some(hash.to_string());
    report.seed = Some(run.config.seed);
    write_json(&run.out.join("report.json"), &report)?;
    println!("{}", serde_json::to_string(&report).expect("report serialises"));
    Ok(vec!["report.json".into()])
}

#[derive(Debug, Serialize)]
struct AblationRow {
    lambda_agn: f64,
    consistency: bool,
    final_dsm: f64,
    in_mask_fraction: f64,
    ssim: f64,
    flicker: Option<f64>,
}

pub fn ablate(run: &mut Run<'_>, data: Option<&Path>) -> Result<Vec<String>, CliError> {
    let example = load_example(run, data)?;
    let target = require_target(&example)?.clone();
    let config = run.config;
    let path = run.out.join("ablation.jsonl");
    let mut table = BufWriter::new(File::create(&path)?);
    for &lambda_agn in &config.ablate.lambda_agn {
        for consistency in [true, false] {
            let mut cfg = config.train;
            cfg.loss.lambda_agn = lambda_agn;
            cfg.consistency = consistency;
            let data = TrainData::new(&example.bundle, &example.garment, &target, &cfg.model, cfg.token_threshold)?;
            let (state, curve) = overfit_clip_with(&data, &cfg, |_| {})?;
            let (inside, outside) =
                probe_attention_mass(&state.model, &data, &cfg, &config.ablate.probe_sigmas, config.seed)?;
            let infer_cfg = tryon_toy::infer::InferConfig { consistency, ..config.infer };
            let video = infer_clip(&example.bundle, &example.garment, &state.model, &infer_cfg)?;
            let row = AblationRow {
                lambda_agn,
                consistency,
                final_dsm: curve[curve.len() - 1].dsm,
                in_mask_fraction: inside / (inside + outside),
                ssim: clip_ssim(&video, &target)?,
                flicker: if video.len() >= 2 { Some(flicker_score(&video, &target)?) } else { None },
            };
            let line = serde_json::to_string(&row).expect("row serialises");
            println!("{line}");
            writeln!(table, "{line}")?;
        }
    }
    table.flush()?;
    Ok(vec!["ablation.jsonl".into()])
}

pub fn plot(run: &mut Run<'_>, metrics: &Path) -> Result<Vec<String>, CliError> {
    let file: PathBuf = if metrics.is_dir() { metrics.join("metrics.jsonl") } else { metrics.to_path_buf() };
    run.input("metrics", &file)?;
    let written = plot_metrics(&read_metrics(&file)?, run.out)?;
    Ok(written
        .iter()
        .map(|p| p.file_name().expect("plot file").to_string_lossy().into_owned())
        .collect())
}
