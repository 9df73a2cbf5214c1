//! Mask-guided attention loss over garment attention probabilities.
//!
//! The agnostic mask is mapped onto the attention token grid, splitting each frame's
//! tokens into an in-mask region `A` and its complement. The loss pulls garment attention
//! up inside `A` and pushes it down everywhere else.

use std::ops::Range;

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::data::AgnosticMask;
use crate::error::{dim_err, Error, Result};

/// Token-grid size of one frame's spatial attention map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-frame split of tokens into the in-mask region and its complement.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRegionPartition {
    grid: TokenGrid,
    /// `in_mask[i][a]` is true when token `a` of frame `i` belongs to `A`.
    in_mask: Vec<Vec<bool>>,
}

impl TokenRegionPartition {
    pub fn from_flags(grid: TokenGrid, in_mask: Vec<Vec<bool>>) -> Result<Self> {
        if in_mask.is_empty() {
            return dim_err("partition needs at least one frame");
        }
        if let Some(bad) = in_mask.iter().find(|f| f.len() != grid.len()) {
            return dim_err(format!("{} flags for a {}-token grid", bad.len(), grid.len()));
        }
        Ok(Self { grid, in_mask })
    }

    pub fn grid(&self) -> TokenGrid {
        self.grid
    }

    pub fn frames(&self) -> usize {
        self.in_mask.len()
    }

    pub fn tokens(&self) -> usize {
        self.grid.len()
    }

    pub fn is_in_mask(&self, frame: usize, token: usize) -> bool {
        self.in_mask[frame][token]
    }

    pub fn flags(&self, frame: usize) -> &[bool] {
        &self.in_mask[frame]
    }

    /// Token indices of `A` in `frame`.
    pub fn in_mask_tokens(&self, frame: usize) -> Vec<usize> {
        (0..self.tokens()).filter(|&a| self.in_mask[frame][a]).collect()
    }

    /// Token indices of the complement of `A` in `frame`.
    pub fn out_mask_tokens(&self, frame: usize) -> Vec<usize> {
        (0..self.tokens()).filter(|&a| !self.in_mask[frame][a]).collect()
    }

    pub fn in_mask_count(&self, frame: usize) -> usize {
        self.in_mask[frame].iter().filter(|&&b| b).count()
    }

    pub fn ensure_every_frame_has_region(&self) -> Result<()> {
        if let Some(i) = (0..self.frames()).find(|&i| self.in_mask_count(i) == 0) {
            return Err(Error::DegenerateMask(format!(
                "frame {i} has no in-mask token; the loss is undefined"
            )));
        }
        Ok(())
    }

    /// Keeps only the listed frames.
    pub fn select(&self, frames: &[usize]) -> Result<Self> {
        if frames.iter().any(|&i| i >= self.frames()) {
            return dim_err("frame index out of range");
        }
        Self::from_flags(self.grid, frames.iter().map(|&i| self.in_mask[i].clone()).collect())
    }
}

/// Token `a` joins `A` when its area-averaged mask coverage exceeds `threshold`.
///
/// The token grid need not divide the pixel grid: coverage is computed from exact
/// fractional pixel/token overlaps.
pub fn mask_to_partition(
    mask: &AgnosticMask,
    grid: TokenGrid,
    threshold: f64,
) -> Result<TokenRegionPartition> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Domain(format!("threshold {threshold} outside (0, 1)")));
    }
    if grid.is_empty() {
        return dim_err("empty token grid");
    }
    let (n, h, w) = mask.dims();
    if grid.rows > h || grid.cols > w {
        return dim_err(format!(
            "token grid {}x{} finer than pixel grid {h}x{w}",
            grid.rows, grid.cols
        ));
    }
    // Scaled coordinates: pixel p spans [p*rows, (p+1)*rows), token r spans [r*h, (r+1)*h).
    let row_overlaps = overlap_table(h, grid.rows);
    let col_overlaps = overlap_table(w, grid.cols);
    let token_area = (h * w) as u64;

    let mut flags = Vec::with_capacity(n);
    for f in 0..n {
        let frame = mask.masks().index_axis(Axis(0), f);
        let mut covered = vec![0u64; grid.len()];
        for (y, row) in frame.outer_iter().enumerate() {
            for (x, &m) in row.iter().enumerate() {
                if m == 0 {
                    continue;
                }
                for &(r, oy) in &row_overlaps[y] {
                    for &(c, ox) in &col_overlaps[x] {
                        covered[r * grid.cols + c] += oy * ox;
                    }
                }
            }
        }
        flags.push(
            covered
                .iter()
                .map(|&c| c as f64 / token_area as f64 > threshold)
                .collect(),
        );
    }
    let part = TokenRegionPartition::from_flags(grid, flags)?;
    if (0..part.frames()).all(|i| part.in_mask_count(i) == 0) {
        return Err(Error::DegenerateMask(
            "no token exceeds the coverage threshold in any frame".into(),
        ));
    }
    Ok(part)
}

/// For each pixel index, the tokens it overlaps and the overlap length (scaled units).
fn overlap_table(pixels: usize, tokens: usize) -> Vec<Vec<(usize, u64)>> {
    (0..pixels)
        .map(|p| {
            let (lo, hi) = (p * tokens, (p + 1) * tokens);
            let first = lo / pixels;
            let last = (hi - 1) / pixels;
            (first..=last)
                .filter_map(|t| {
                    let (tlo, thi) = (t * pixels, (t + 1) * pixels);
                    let ov = hi.min(thi).saturating_sub(lo.max(tlo));
                    (ov > 0).then_some((t, ov as u64))
                })
                .collect()
        })
        .collect()
}

/// Garment attention probability per frame and token, `(N, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProbMap {
    probs: Array2<f64>,
}

impl AttentionProbMap {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        if probs.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidData("attention probabilities must lie in [0, 1]".into()));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn frames(&self) -> usize {
        self.probs.nrows()
    }

    pub fn tokens(&self) -> usize {
        self.probs.ncols()
    }
}

/// Reduces post-softmax attention weights to garment probabilities.
///
/// Each layer is `(N, heads, T, K)`: frame, head, spatial query, key. For every query the
/// maximum weight over the garment key columns is taken, then averaged over heads and layers.
pub fn extract_attention_probs(
    layers: &[Array4<f64>],
    garment_keys: Range<usize>,
) -> Result<AttentionProbMap> {
    if garment_keys.is_empty() {
        return Err(Error::Config("no garment key tokens in the attention map".into()));
    }
    let Some(first) = layers.first() else {
        return Err(Error::Config("no attention layers supplied".into()));
    };
    let (n, _, t, _) = first.dim();
    let mut acc = Array2::<f64>::zeros((n, t));
    let mut count = 0usize;
    for layer in layers {
        let (ln, heads, lt, keys) = layer.dim();
        if (ln, lt) != (n, t) {
            return dim_err(format!("layer shape {:?} vs ({n}, _, {t}, _)", layer.dim()));
        }
        if garment_keys.end > keys {
            return dim_err(format!("garment keys {garment_keys:?} exceed {keys} key tokens"));
        }
        for f in 0..n {
            for h in 0..heads {
                for a in 0..t {
                    let m = garment_keys
                        .clone()
                        .map(|k| layer[[f, h, a, k]])
                        .fold(f64::NEG_INFINITY, f64::max);
                    acc[[f, a]] += m;
                }
            }
        }
        count += heads;
    }
    if count == 0 {
        return Err(Error::Config("attention layers carry no heads".into()));
    }
    acc.mapv_inplace(|v| (v / count as f64).clamp(0.0, 1.0));
    AttentionProbMap::new(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// Every in-mask token is pulled toward probability 1.
    Initial,
    /// Only the strongest in-mask token per frame is pulled toward 1.
    #[default]
    Refined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the out-of-mask suppression term.
    pub lambda_n: f64,
    /// Weight of the attention loss inside the total loss.
    pub lambda_agn: f64,
    pub variant: LossVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_n: 0.01,
            lambda_agn: 0.5,
            variant: LossVariant::Refined,
        }
    }
}

impl LossConfig {
    /// The ablation setting with a stronger negative weight.
    pub fn ablation_preset() -> Self {
        Self {
            lambda_n: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_n >= 0.0) || !(self.lambda_agn >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn loss(&self, s: &AttentionProbMap, part: &TokenRegionPartition) -> Result<f64> {
        match self.variant {
            LossVariant::Initial => loss_agn_init(s, part, self.lambda_n),
            LossVariant::Refined => loss_agn(s, part, self.lambda_n),
        }
    }

    pub fn grad(&self, s: &AttentionProbMap, part: &TokenRegionPartition) -> Result<Array2<f64>> {
        match self.variant {
            LossVariant::Initial => grad_loss_agn_init(s, part, self.lambda_n),
            LossVariant::Refined => grad_loss_agn(s, part, self.lambda_n),
        }
    }
}

fn check_compatible(s: &AttentionProbMap, part: &TokenRegionPartition) -> Result<()> {
    if s.frames() != part.frames() || s.tokens() != part.tokens() {
        return dim_err(format!(
            "attention map {}x{} vs partition {}x{}",
            s.frames(),
            s.tokens(),
            part.frames(),
            part.tokens()
        ));
    }
    part.ensure_every_frame_has_region()
}

fn negative_term(s: &AttentionProbMap, part: &TokenRegionPartition) -> f64 {
    let mut total = 0.0;
    for (i, row) in s.probs().outer_iter().enumerate() {
        for (a, &v) in row.iter().enumerate() {
            if !part.is_in_mask(i, a) {
                total += v * v;
            }
        }
    }
    total
}

/// Lowest-index token of `A` with the largest probability, per frame.
pub fn in_mask_argmax(s: &AttentionProbMap, part: &TokenRegionPartition) -> Result<Vec<usize>> {
    check_compatible(s, part)?;
    Ok(s.probs()
        .outer_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut best = usize::MAX;
            for (a, &v) in row.iter().enumerate() {
                if part.is_in_mask(i, a) && (best == usize::MAX || v > row[best]) {
                    best = a;
                }
            }
            best
        })
        .collect())
}

/// `sum_i sum_{a in A} (1 - S)^2 + lambda_n * sum_i sum_{a not in A} S^2`.
pub fn loss_agn_init(s: &AttentionProbMap, part: &TokenRegionPartition, lambda_n: f64) -> Result<f64> {
    check_compatible(s, part)?;
    let mut positive = 0.0;
    for (i, row) in s.probs().outer_iter().enumerate() {
        for (a, &v) in row.iter().enumerate() {
            if part.is_in_mask(i, a) {
                positive += (1.0 - v) * (1.0 - v);
            }
        }
    }
    Ok(positive + lambda_n * negative_term(s, part))
}

/// `sum_i (1 - max_{a in A} S)^2 + lambda_n * sum_i sum_{a not in A} S^2`.
pub fn loss_agn(s: &AttentionProbMap, part: &TokenRegionPartition, lambda_n: f64) -> Result<f64> {
    let argmax = in_mask_argmax(s, part)?;
    let positive: f64 = argmax
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let gap = 1.0 - s.probs()[[i, a]];
            gap * gap
        })
        .sum();
    Ok(positive + lambda_n * negative_term(s, part))
}

/// Gradient of [`loss_agn`]. The max term's subgradient goes entirely to the
/// lowest-index maximiser.
pub fn grad_loss_agn(
    s: &AttentionProbMap,
    part: &TokenRegionPartition,
    lambda_n: f64,
) -> Result<Array2<f64>> {
    let argmax = in_mask_argmax(s, part)?;
    let mut g = Array2::zeros(s.probs().dim());
    for ((i, a), &v) in s.probs().indexed_iter() {
        if !part.is_in_mask(i, a) {
            g[[i, a]] = 2.0 * lambda_n * v;
        }
    }
    for (i, &a) in argmax.iter().enumerate() {
        g[[i, a]] = -2.0 * (1.0 - s.probs()[[i, a]]);
    }
    Ok(g)
}

/// Gradient of [`loss_agn_init`].
pub fn grad_loss_agn_init(
    s: &AttentionProbMap,
    part: &TokenRegionPartition,
    lambda_n: f64,
) -> Result<Array2<f64>> {
    check_compatible(s, part)?;
    let mut g = Array2::zeros(s.probs().dim());
    for ((i, a), &v) in s.probs().indexed_iter() {
        g[[i, a]] = if part.is_in_mask(i, a) {
            -2.0 * (1.0 - v)
        } else {
            2.0 * lambda_n * v
        };
    }
    Ok(g)
}

/// Denoising loss plus the weighted attention loss.
pub fn loss_total(dsm: f64, agn: f64, lambda_agn: f64) -> Result<f64> {
    if !(dsm >= 0.0) || !(agn >= 0.0) || !(lambda_agn >= 0.0) {
        return Err(Error::Domain(format!(
            "loss terms must be non-negative (dsm {dsm}, agn {agn}, weight {lambda_agn})"
        )));
    }
    Ok(dsm + lambda_agn * agn)
}

/// Out-of-mask tokens per single positive (argmax) token, averaged over frames.
pub fn negative_ratio(part: &TokenRegionPartition) -> f64 {
    let total: usize = (0..part.frames())
        .map(|i| part.tokens() - part.in_mask_count(i))
        .sum();
    total as f64 / part.frames() as f64
}

/// Garment attention summed inside and outside the mask region, per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionMass {
    pub in_mask: f64,
    pub out_mask: f64,
}

impl AttentionMass {
    /// Share of the total garment attention landing inside the mask.
    pub fn in_mask_fraction(&self) -> f64 {
        let total = self.in_mask + self.out_mask;
        if total > 0.0 {
            self.in_mask / total
        } else {
            0.0
        }
    }
}

pub fn attention_mass(s: &AttentionProbMap, part: &TokenRegionPartition) -> Result<Vec<AttentionMass>> {
    if s.frames() != part.frames() || s.tokens() != part.tokens() {
        return dim_err("attention map and partition disagree");
    }
    Ok(s.probs()
        .outer_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut m = AttentionMass { in_mask: 0.0, out_mask: 0.0 };
            for (a, &v) in row.iter().enumerate() {
                if part.is_in_mask(i, a) {
                    m.in_mask += v;
                } else {
                    m.out_mask += v;
                }
            }
            m
        })
        .collect())
}
