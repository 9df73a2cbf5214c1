//! Pose-guided keyframe selection and overlapping-segment generation for clips longer
//! than the generator window.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{DensePoseClip, LatentClip};
use crate::error::{dim_err, Error, Result};

/// Root-mean-square difference between two DensePose frames.
pub fn pose_distance(a: ArrayView3<f64>, b: ArrayView3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return dim_err(format!("pose frames {:?} vs {:?}", a.dim(), b.dim()));
    }
    if a.is_empty() {
        return dim_err("empty pose frame");
    }
    let sq: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / a.len() as f64).sqrt())
}

/// Pairwise pose distances, computed on first use.
pub struct PoseDistanceMatrix<'a> {
    pose: &'a DensePoseClip,
    cache: Vec<OnceCell<f64>>,
}

impl<'a> PoseDistanceMatrix<'a> {
    pub fn new(pose: &'a DensePoseClip) -> Self {
        let n = pose.len();
        Self {
            pose,
            cache: (0..n * n).map(|_| OnceCell::new()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pose.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pose.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        *self.cache[lo * self.len() + hi].get_or_init(|| {
            pose_distance(self.pose.frame(lo), self.pose.frame(hi)).expect("frames share a shape")
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KeyframeMode {
    /// Jump to the farthest frame within `s_max` whose pose stays under `d_pose`.
    #[default]
    Greedy,
    /// Accept `j` when it is close in pose or still within `s_max` of `i`; tends to
    /// produce dense keyframes.
    Literal,
}

/// Sorted keyframe indices and the parameters that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframePlan {
    pub keyframes: Vec<usize>,
    pub d_pose: f64,
    pub s_max: usize,
    pub frame_count: usize,
}

impl KeyframePlan {
    /// Checks the greedy-mode guarantees: endpoints present, strictly increasing,
    /// gaps at most `s_max`.
    pub fn check_invariants(&self) -> Result<()> {
        let k = &self.keyframes;
        if k.first() != Some(&0) || k.last() != Some(&(self.frame_count - 1)) {
            return Err(Error::InvalidData(format!("plan {k:?} misses an endpoint")));
        }
        for w in k.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidData(format!("plan {k:?} not increasing")));
            }
            if w[1] - w[0] > self.s_max {
                return Err(Error::InvalidData(format!(
                    "gap {}..{} exceeds s_max {}",
                    w[0], w[1], self.s_max
                )));
            }
        }
        Ok(())
    }
}

/// Keyframe selection over an arbitrary symmetric distance.
pub fn select_keyframes_by(
    frame_count: usize,
    distance: impl Fn(usize, usize) -> f64,
    d_pose: f64,
    s_max: usize,
    mode: KeyframeMode,
) -> Result<KeyframePlan> {
    if frame_count == 0 {
        return dim_err("cannot select keyframes of an empty clip");
    }
    if !(d_pose > 0.0) {
        return Err(Error::Domain(format!("d_pose must be positive, got {d_pose}")));
    }
    if s_max == 0 {
        return Err(Error::Domain("s_max must be at least 1".into()));
    }
    let last = frame_count - 1;
    let mut keyframes = vec![0];
    match mode {
        KeyframeMode::Greedy => {
            let mut i = 0;
            while i < last {
                let reach = (i + s_max).min(last);
                let next = (i + 1..=reach)
                    .rev()
                    .find(|&j| distance(i, j) < d_pose)
                    .unwrap_or(i + 1);
                keyframes.push(next);
                i = next;
            }
        }
        KeyframeMode::Literal => {
            let (mut i, mut j) = (0, 1);
            while j < frame_count {
                if distance(i, j) < d_pose || j - i < s_max {
                    if !keyframes.contains(&i) {
                        keyframes.push(i);
                    }
                    i = j;
                }
                j += 1;
            }
            keyframes.sort_unstable();
            if *keyframes.last().expect("starts with 0") != last {
                keyframes.push(last);
            }
        }
    }
    Ok(KeyframePlan {
        keyframes,
        d_pose,
        s_max,
        frame_count,
    })
}

pub fn select_keyframes(
    pose: &DensePoseClip,
    d_pose: f64,
    s_max: usize,
    mode: KeyframeMode,
) -> Result<KeyframePlan> {
    let matrix = PoseDistanceMatrix::new(pose);
    select_keyframes_by(pose.len(), |i, j| matrix.get(i, j), d_pose, s_max, mode)
}

/// Overwrites the keyframe latents with generated ones; every other frame is copied.
pub fn replace_keyframe_latents(
    agnostic: &LatentClip,
    generated: &BTreeMap<usize, Array3<f64>>,
    keyframes: &[usize],
) -> Result<LatentClip> {
    let mut out = agnostic.latents.clone();
    let (n, h, w, c) = out.dim();
    for &i in keyframes {
        if i >= n {
            return dim_err(format!("keyframe {i} outside clip of {n}"));
        }
        let frame = generated
            .get(&i)
            .ok_or_else(|| Error::Generator(format!("no generated latent for keyframe {i}")))?;
        if frame.dim() != (h, w, c) {
            return dim_err(format!("generated frame {:?} vs ({h}, {w}, {c})", frame.dim()));
        }
        out.index_axis_mut(Axis(0), i).assign(frame);
    }
    agnostic.with_latents(out)
}

/// Overlapping fixed-length windows covering a clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub segments: Vec<Range<usize>>,
    pub overlap: usize,
}

/// Windows of `window` frames advancing by `window - overlap`; the last one is
/// right-aligned so it ends exactly at `frame_count`.
pub fn plan_segments(frame_count: usize, window: usize, overlap: usize) -> Result<SegmentPlan> {
    if window == 0 {
        return Err(Error::Domain("window must be at least 1".into()));
    }
    if overlap >= window {
        return Err(Error::Domain(format!(
            "overlap {overlap} must be smaller than the window {window}"
        )));
    }
    if frame_count == 0 {
        return dim_err("empty clip");
    }
    let mut segments = Vec::new();
    if frame_count <= window {
        segments.push(0..frame_count);
    } else {
        let stride = window - overlap;
        let mut start = 0;
        loop {
            if start + window >= frame_count {
                segments.push(frame_count - window..frame_count);
                break;
            }
            segments.push(start..start + window);
            start += stride;
        }
    }
    Ok(SegmentPlan { segments, overlap })
}

/// Parameters of long-clip generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LongVideoConfig {
    pub window: usize,
    pub overlap: usize,
    pub d_pose: f64,
    pub s_max: usize,
    pub keyframe_mode: KeyframeMode,
}

impl Default for LongVideoConfig {
    fn default() -> Self {
        Self {
            window: 8,
            overlap: 2,
            d_pose: 0.1,
            s_max: 4,
            keyframe_mode: KeyframeMode::Greedy,
        }
    }
}

/// Generates frames for a window of at most `window` frames.
///
/// `indices` are the clip positions of `frames`; the result must have the same length.
pub trait SegmentGenerator<T> {
    fn generate(&mut self, indices: &[usize], frames: &[T]) -> Result<Vec<T>>;
}

impl<T, F> SegmentGenerator<T> for F
where
    F: FnMut(&[usize], &[T]) -> Result<Vec<T>>,
{
    fn generate(&mut self, indices: &[usize], frames: &[T]) -> Result<Vec<T>> {
        self(indices, frames)
    }
}

/// Result of [`orchestrate_long_generation`] with the plans it followed.
#[derive(Debug, Clone)]
pub struct LongGeneration<T> {
    pub frames: Vec<T>,
    pub keyframes: Option<KeyframePlan>,
    pub segments: SegmentPlan,
    pub generator_calls: usize,
}

fn call_generator<T, G: SegmentGenerator<T>>(
    generator: &mut G,
    window: usize,
    indices: &[usize],
    frames: &[T],
    calls: &mut usize,
) -> Result<Vec<T>> {
    if indices.len() > window {
        return Err(Error::Generator(format!(
            "request of {} frames exceeds the window of {window}",
            indices.len()
        )));
    }
    *calls += 1;
    let out = generator.generate(indices, frames)?;
    if out.len() != indices.len() {
        return Err(Error::Generator(format!(
            "generator returned {} frames for a request of {}",
            out.len(),
            indices.len()
        )));
    }
    Ok(out)
}

/// Keyframes first, then overlapping segments, each conditioned on what is already done.
///
/// `agnostic` is the per-frame conditioning stream (pixels or latents). Generated
/// keyframes replace their agnostic frames; frames produced by an earlier segment replace
/// the agnostic frames of the next segment's overlap and are kept in the output.
/// Generator calls run strictly in order.
pub fn orchestrate_long_generation<T, G>(
    agnostic: &[T],
    distance: impl Fn(usize, usize) -> f64,
    generator: &mut G,
    config: &LongVideoConfig,
) -> Result<LongGeneration<T>>
where
    T: Clone,
    G: SegmentGenerator<T>,
{
    let f = agnostic.len();
    if f == 0 {
        return dim_err("empty clip");
    }
    let segments = plan_segments(f, config.window, config.overlap)?;
    let mut calls = 0;
    if f <= config.window {
        let indices: Vec<usize> = (0..f).collect();
        let frames = call_generator(generator, config.window, &indices, agnostic, &mut calls)?;
        return Ok(LongGeneration {
            frames,
            keyframes: None,
            segments,
            generator_calls: calls,
        });
    }

    let plan = select_keyframes_by(f, distance, config.d_pose, config.s_max, config.keyframe_mode)?;
    let mut stream = agnostic.to_vec();
    for batch in plan.keyframes.chunks(config.window) {
        let inputs: Vec<T> = batch.iter().map(|&i| agnostic[i].clone()).collect();
        let generated = call_generator(generator, config.window, batch, &inputs, &mut calls)?;
        for (&i, frame) in batch.iter().zip(generated) {
            stream[i] = frame;
        }
    }

    let mut output: Vec<Option<T>> = vec![None; f];
    for seg in &segments.segments {
        let indices: Vec<usize> = seg.clone().collect();
        let inputs: Vec<T> = indices
            .iter()
            .map(|&i| output[i].clone().unwrap_or_else(|| stream[i].clone()))
            .collect();
        let generated = call_generator(generator, config.window, &indices, &inputs, &mut calls)?;
        for (&i, frame) in indices.iter().zip(generated) {
            if output[i].is_none() {
                output[i] = Some(frame);
            }
        }
    }
    let frames = output
        .into_iter()
        .enumerate()
        .map(|(i, fr)| fr.ok_or_else(|| Error::Generator(format!("frame {i} never generated"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(LongGeneration {
        frames,
        keyframes: Some(plan),
        segments,
        generator_calls: calls,
    })
}

/// Plan file written by the keyframe and segment commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub frame_count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub keyframes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub d_pose: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub keyframe_mode: Option<KeyframeMode>,
    pub window: usize,
    pub overlap: usize,
    /// `[start, end)` pairs.
    pub segments: Vec<[usize; 2]>,
}

impl PlanFile {
    pub fn new(keyframes: Option<(&KeyframePlan, KeyframeMode)>, segments: &SegmentPlan, window: usize, frame_count: usize) -> Self {
        Self {
            frame_count,
            keyframes: keyframes.map(|(k, _)| k.keyframes.clone()),
            d_pose: keyframes.map(|(k, _)| k.d_pose),
            s_max: keyframes.map(|(k, _)| k.s_max),
            keyframe_mode: keyframes.map(|(_, m)| m),
            window,
            overlap: segments.overlap,
            segments: segments.segments.iter().map(|r| [r.start, r.end]).collect(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))
    }
}
