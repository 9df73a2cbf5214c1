//! Scaled dot-product attention and the key/value layouts used for garment and
//! temporal consistency.
//!
//! Keys and values always come from the same token block, so the builders below return
//! a single `(tokens, d)` block used for both.

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// `softmax(Q K^T / sqrt(d))`, shape `(L_q, L_k)`.
pub fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() {
        return dim_err(format!("query width {} vs key width {}", q.ncols(), k.ncols()));
    }
    if k.nrows() == 0 {
        return dim_err("attention needs at least one key");
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    Ok(softmax_rows(&(q.dot(&k.t()) * scale)))
}

/// `softmax(Q K^T / sqrt(d)) V`.
pub fn scaled_dot_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if k.nrows() != v.nrows() {
        return dim_err(format!("{} keys vs {} values", k.nrows(), v.nrows()));
    }
    Ok(attention_weights(q, k)?.dot(&v))
}

/// Splits the width into `heads` groups, attends per head and concatenates.
///
/// Returns the output `(L_q, d_v)` and the per-head weights `(heads, L_q, L_k)`.
pub fn multi_head_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
) -> Result<(Array2<f64>, Array3<f64>)> {
    let d = q.ncols();
    if heads == 0 || d % heads != 0 || v.ncols() % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    if k.ncols() != d || k.nrows() != v.nrows() {
        return dim_err("query/key/value shapes disagree");
    }
    let (dh, dv) = (d / heads, v.ncols() / heads);
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    let mut weights = Array3::zeros((heads, q.nrows(), k.nrows()));
    for h in 0..heads {
        let w = attention_weights(
            q.slice(s![.., h * dh..(h + 1) * dh]),
            k.slice(s![.., h * dh..(h + 1) * dh]),
        )?;
        out.slice_mut(s![.., h * dv..(h + 1) * dv])
            .assign(&w.dot(&v.slice(s![.., h * dv..(h + 1) * dv])));
        weights.index_axis_mut(Axis(0), h).assign(&w);
    }
    Ok((out, weights))
}

/// Attention-layer token blocks for every frame of a clip plus the garment tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureBank {
    frames: Vec<Array2<f64>>,
    garment: Option<Array2<f64>>,
}

impl FrameFeatureBank {
    pub fn new(frames: Vec<Array2<f64>>, garment: Option<Array2<f64>>) -> Result<Self> {
        let d = frames
            .first()
            .map(|f| f.ncols())
            .or_else(|| garment.as_ref().map(|g| g.ncols()));
        if let Some(d) = d {
            if frames.iter().chain(garment.iter()).any(|b| b.ncols() != d) {
                return dim_err("feature blocks disagree on width");
            }
        }
        Ok(Self { frames, garment })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, i: usize) -> Result<&Array2<f64>> {
        self.frames
            .get(i)
            .ok_or_else(|| Error::Dimension(format!("frame {i} not in a bank of {}", self.len())))
    }

    pub fn garment(&self) -> Result<&Array2<f64>> {
        match &self.garment {
            Some(g) if g.nrows() > 0 => Ok(g),
            _ => Err(Error::Config("no garment tokens in the feature bank".into())),
        }
    }

    fn concat(&self, blocks: &[&Array2<f64>]) -> Array2<f64> {
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        concatenate(Axis(0), &views).expect("blocks share width")
    }
}

/// Frame tokens followed by garment tokens.
pub fn build_kv_reference(bank: &FrameFeatureBank, i: usize) -> Result<Array2<f64>> {
    let frame = bank.frame(i)?;
    let garment = bank.garment()?;
    Ok(bank.concat(&[frame, garment]))
}

/// Tokens of frame 0 followed by frame `i - 1`; frame 0 stands in for `i - 1` at `i = 0`.
pub fn build_kv_crossframe_baseline(bank: &FrameFeatureBank, i: usize) -> Result<Array2<f64>> {
    if bank.is_empty() {
        return dim_err("empty feature bank");
    }
    bank.frame(i)?;
    let prev = i.saturating_sub(1);
    Ok(bank.concat(&[bank.frame(0)?, bank.frame(prev)?]))
}

/// Frame `i`, frame `j`, then garment tokens. `j = i - 1` is not allowed.
pub fn build_kv_ctc(bank: &FrameFeatureBank, i: usize, j: usize) -> Result<Array2<f64>> {
    if i >= 1 && j == i - 1 {
        return Err(Error::Policy(format!(
            "frame {j} is the immediate predecessor of frame {i}"
        )));
    }
    Ok(bank.concat(&[bank.frame(i)?, bank.frame(j)?, bank.garment()?]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Uniform over every frame except `i - 1`.
    TrainRandom,
    /// Half-period offset, skipping `i - 1`.
    #[default]
    InferDeterministic,
    /// Always frame 0 (ablation).
    FixedZero,
    /// Frame `i - 1` paired with frame 0 (ablation baseline).
    CrossframeBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameSelectionPolicy {
    pub mode: SelectionMode,
    pub rng_seed: u64,
}

impl Default for FrameSelectionPolicy {
    fn default() -> Self {
        Self {
            mode: SelectionMode::InferDeterministic,
            rng_seed: 0,
        }
    }
}

/// Picks the extra context frame `j` for frame `i` of an `n`-frame clip.
///
/// In the deterministic mode small `i` looks ahead and large `i` looks back.
pub fn select_frame_j<R: Rng + ?Sized>(mode: SelectionMode, i: usize, n: usize, rng: &mut R) -> usize {
    assert!(n >= 1 && i < n, "frame {i} outside clip of {n}");
    if n == 1 {
        return 0;
    }
    let forbidden = i.checked_sub(1);
    match mode {
        SelectionMode::TrainRandom => {
            let candidates = if forbidden.is_some() { n - 1 } else { n };
            let mut j = rng.random_range(0..candidates);
            if let Some(f) = forbidden {
                if j >= f {
                    j += 1;
                }
            }
            j
        }
        SelectionMode::InferDeterministic => {
            let j = (i + n / 2) % n;
            if Some(j) == forbidden {
                (j + 1) % n
            } else {
                j
            }
        }
        SelectionMode::FixedZero => 0,
        SelectionMode::CrossframeBaseline => i.saturating_sub(1),
    }
}

/// Which frames' tokens precede the garment tokens in the key/value block of frame `i`.
///
/// With consistency attention off this is just `[i]`.
pub fn context_frames<R: Rng + ?Sized>(
    enabled: bool,
    mode: SelectionMode,
    i: usize,
    n: usize,
    rng: &mut R,
) -> Vec<usize> {
    if !enabled {
        return vec![i];
    }
    match mode {
        SelectionMode::CrossframeBaseline => vec![0, i.saturating_sub(1)],
        _ => vec![i, select_frame_j(mode, i, n, rng)],
    }
}
