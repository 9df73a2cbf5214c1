//! SSIM, a temporal flicker diagnostic and a registry for clip-level metrics.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::VideoClip;
use crate::error::{dim_err, Error, Result};

/// Luma weights used to reduce RGB frames to one channel.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - half;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable "valid" filtering: output is `(h - k + 1, w - k + 1)`.
fn filter_valid(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = kernel.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = (0..k).map(|i| kernel[i] * img[[y, x + i]]).sum();
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..k).map(|i| kernel[i] * rows[[y + i, x]]).sum();
        }
    }
    out
}

fn to_gray(frame: ArrayView3<f64>) -> Array2<f64> {
    let (h, w, c) = frame.dim();
    if c == 1 {
        return frame.index_axis(Axis(2), 0).to_owned();
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        LUMA[0] * frame[[y, x, 0]] + LUMA[1] * frame[[y, x, 1]] + LUMA[2] * frame[[y, x, 2]]
    })
}

/// Mean Gaussian-windowed SSIM of two `(H, W, C)` frames (`C` is 1 or 3).
pub fn ssim_with(a: ArrayView3<f64>, b: ArrayView3<f64>, params: &SsimParams) -> Result<f64> {
    if a.dim() != b.dim() {
        return dim_err(format!("frames {:?} vs {:?}", a.dim(), b.dim()));
    }
    let (h, w, c) = a.dim();
    if c != 1 && c != 3 {
        return dim_err(format!("ssim needs 1 or 3 channels, got {c}"));
    }
    if params.window == 0 || params.window % 2 == 0 {
        return Err(Error::Config(format!("ssim window must be odd, got {}", params.window)));
    }
    if h < params.window || w < params.window {
        return dim_err(format!(
            "frame {h}x{w} smaller than the {} pixel window",
            params.window
        ));
    }
    let kernel = gaussian_kernel(params.window, params.sigma);
    let x = to_gray(a);
    let y = to_gray(b);
    let mu_x = filter_valid(&x, &kernel);
    let mu_y = filter_valid(&y, &kernel);
    let e_xx = filter_valid(&(&x * &x), &kernel);
    let e_yy = filter_valid(&(&y * &y), &kernel);
    let e_xy = filter_valid(&(&x * &y), &kernel);
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);

    let mut total = 0.0;
    for ((((&mx, &my), &xx), &yy), &xy) in mu_x
        .iter()
        .zip(mu_y.iter())
        .zip(e_xx.iter())
        .zip(e_yy.iter())
        .zip(e_xy.iter())
    {
        let var_x = xx - mx * mx;
        let var_y = yy - my * my;
        let cov = xy - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
        total += num / den;
    }
    Ok(total / mu_x.len() as f64)
}

pub fn ssim(a: ArrayView3<f64>, b: ArrayView3<f64>) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

/// Mean per-frame SSIM.
pub fn clip_ssim(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    if a.len() != b.len() {
        return dim_err(format!("{} frames vs {}", a.len(), b.len()));
    }
    let mut total = 0.0;
    for i in 0..a.len() {
        total += ssim(a.frame(i), b.frame(i))?;
    }
    Ok(total / a.len() as f64)
}

/// Mean over `t` of `MSE((gen[t+1] - gen[t]) - (ref[t+1] - ref[t]))`.
pub fn flicker_score(generated: &VideoClip, reference: &VideoClip) -> Result<f64> {
    if generated.frames().dim() != reference.frames().dim() {
        return dim_err(format!(
            "clips {:?} vs {:?}",
            generated.frames().dim(),
            reference.frames().dim()
        ));
    }
    let n = generated.len();
    if n < 2 {
        return Err(Error::Domain("flicker needs at least two frames".into()));
    }
    let g = generated.frames();
    let r = reference.frames();
    let per_frame = g.len() / n;
    let mut total = 0.0;
    for t in 0..n - 1 {
        let mut sq = 0.0;
        for (((g1, g0), r1), r0) in g
            .index_axis(Axis(0), t + 1)
            .iter()
            .zip(g.index_axis(Axis(0), t).iter())
            .zip(r.index_axis(Axis(0), t + 1).iter())
            .zip(r.index_axis(Axis(0), t).iter())
        {
            let d = (g1 - g0) - (r1 - r0);
            sq += d * d;
        }
        total += sq / per_frame as f64;
    }
    Ok(total / (n - 1) as f64)
}

/// A metric comparing a generated clip with its reference.
pub type ClipMetric = Box<dyn Fn(&VideoClip, &VideoClip) -> Result<f64> + Send + Sync>;

pub enum MetricLookup<'a> {
    Available(&'a ClipMetric),
    Unavailable(String),
}

impl MetricLookup<'_> {
    pub fn is_available(&self) -> bool {
        matches!(self, MetricLookup::Available(_))
    }
}

/// Named clip metrics. SSIM and flicker are built in; perceptual metrics such as LPIPS
/// or VFID can be registered by callers that have an implementation.
pub struct MetricRegistry {
    metrics: BTreeMap<String, ClipMetric>,
}

impl Default for MetricRegistry {
    fn default() -> Self {
        let mut r = Self {
            metrics: BTreeMap::new(),
        };
        r.register("ssim", Box::new(clip_ssim));
        r.register("flicker", Box::new(flicker_score));
        r
    }
}

impl MetricRegistry {
    pub fn register(&mut self, name: &str, metric: ClipMetric) {
        self.metrics.insert(name.to_ascii_lowercase(), metric);
    }

    pub fn lookup(&self, name: &str) -> MetricLookup<'_> {
        match self.metrics.get(&name.to_ascii_lowercase()) {
            Some(m) => MetricLookup::Available(m),
            None => MetricLookup::Unavailable(name.to_string()),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.metrics.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScores {
    pub name: String,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flicker: Option<f64>,
}

/// Per-clip and aggregate scores with run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub clips: Vec<ClipScores>,
    pub mean_ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_flicker: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention_mass_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl MetricReport {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a VideoClip, &'a VideoClip)>) -> Result<Self> {
        let mut clips = Vec::new();
        for (name, generated, reference) in pairs {
            let flicker = if generated.len() >= 2 {
                Some(flicker_score(generated, reference)?)
            } else {
                None
            };
            clips.push(ClipScores {
                name: name.to_string(),
                ssim: clip_ssim(generated, reference)?,
                flicker,
            });
        }
        if clips.is_empty() {
            return Err(Error::InvalidData("report needs at least one clip".into()));
        }
        let mean_ssim = clips.iter().map(|c| c.ssim).sum::<f64>() / clips.len() as f64;
        let flickers: Vec<f64> = clips.iter().filter_map(|c| c.flicker).collect();
        let mean_flicker = (!flickers.is_empty()).then(|| flickers.iter().sum::<f64>() / flickers.len() as f64);
        Ok(Self {
            clips,
            mean_ssim,
            mean_flicker,
            attention_mass_ratio: None,
            config_hash: None,
            seed: None,
        })
    }
}
