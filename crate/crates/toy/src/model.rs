//! The denoising network and the garment encoder.
//!
//! The denoiser takes the 9-channel latent stack plus a DensePose map at latent
//! resolution, runs two stride-2 stages down to a token grid, attends over frame and
//! garment tokens there, and comes back up through two upsampling stages with skips.

use std::ops::Range;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tryon_core::data::{GarmentImage, LATENT_CHANNELS};
use tryon_core::Error;

use crate::error::Result;
use crate::tape::{Geom, Tape, Var};

/// Width of the noise-level features fed to the time embedding.
const TIME_FEATURES: usize = 7;
const TIME_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub latent_height: usize,
    pub latent_width: usize,
    pub garment_height: usize,
    pub garment_width: usize,
    pub base_channels: usize,
    pub mid_channels: usize,
    /// Channel width at the bottleneck and of the garment tokens.
    pub attention_width: usize,
    pub heads: usize,
    pub pose_hidden: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            latent_height: 32,
            latent_width: 24,
            garment_height: 32,
            garment_width: 24,
            base_channels: 16,
            mid_channels: 32,
            attention_width: 32,
            heads: 4,
            pose_hidden: 8,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg).into());
        if self.latent_height % 4 != 0 || self.latent_width % 4 != 0 || self.latent_height == 0 || self.latent_width == 0 {
            return bad(format!(
                "latent {}x{} must be a positive multiple of 4",
                self.latent_height, self.latent_width
            ));
        }
        if self.garment_height % 8 != 0 || self.garment_width % 8 != 0 || self.garment_height == 0 || self.garment_width == 0 {
            return bad(format!(
                "garment {}x{} must be a positive multiple of 8",
                self.garment_height, self.garment_width
            ));
        }
        if self.heads == 0 || self.attention_width % self.heads != 0 || self.mid_channels % self.heads != 0 {
            return bad(format!(
                "attention width {} and mid channels {} must be divisible by {} heads",
                self.attention_width, self.mid_channels, self.heads
            ));
        }
        if self.base_channels == 0 || self.mid_channels == 0 || self.pose_hidden == 0 {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    /// Token grid at the bottleneck, `(rows, cols)`.
    pub fn token_grid(&self) -> (usize, usize) {
        (self.latent_height / 4, self.latent_width / 4)
    }

    /// Token grid of the first attention block, one stride-2 stage above the bottleneck.
    pub fn fine_token_grid(&self) -> (usize, usize) {
        (self.latent_height / 2, self.latent_width / 2)
    }

    /// Garment tokens seen by the bottleneck attention.
    pub fn garment_tokens(&self) -> usize {
        (self.garment_height / 8) * (self.garment_width / 8)
    }

    /// Garment tokens seen by the first attention block.
    pub fn fine_garment_tokens(&self) -> usize {
        (self.garment_height / 4) * (self.garment_width / 4)
    }
}

/// Named trainable matrices in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamSet {
    fn push(&mut self, name: &str, value: Array2<f64>) -> usize {
        self.names.push(name.to_string());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    /// Replaces all values, keeping names; shapes must match.
    pub fn assign(&mut self, values: Vec<Array2<f64>>) -> Result<()> {
        if values.len() != self.values.len()
            || values.iter().zip(&self.values).any(|(a, b)| a.dim() != b.dim())
        {
            return Err(Error::Dimension("parameter shapes do not match the architecture".into()).into());
        }
        self.values = values;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    w: usize,
    b: usize,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

fn add_conv(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Conv {
    let bound = (6.0 / (9 * cin) as f64).sqrt();
    Conv {
        w: p.push(&format!("{name}.weight"), uniform(rng, 9 * cin, cout, bound)),
        b: p.push(&format!("{name}.bias"), Array2::zeros((1, cout))),
    }
}

fn add_linear(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> usize {
    let bound = (3.0 / cin as f64).sqrt();
    p.push(name, uniform(rng, cin, cout, bound))
}

fn conv(tape: &mut Tape, p: &[Var], x: Var, geom: Geom, c: Conv, stride: usize) -> Var {
    let cols = tape.im2col(x, geom, stride);
    let y = tape.matmul(cols, p[c.w]);
    tape.add_row(y, p[c.b])
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Film {
    scale: Linear,
    shift: Linear,
}

/// Zero weights; `scale_bias` is chosen so the block starts as the identity.
fn add_film(p: &mut ParamSet, name: &str, width: usize, inputs: usize, scale_bias: f64) -> Film {
    let mut linear = |part: &str, bias: f64| Linear {
        w: p.push(&format!("film.{name}.{part}.weight"), Array2::zeros((inputs, width))),
        b: p.push(&format!("film.{name}.{part}.bias"), Array2::from_elem((1, width), bias)),
    };
    Film { scale: linear("scale", scale_bias), shift: linear("shift", 0.0) }
}

/// `h * scale(t) + shift(t)` per channel.
fn film(tape: &mut Tape, p: &[Var], h: Var, t: Var, f: Film) -> Var {
    let s = tape.matmul(t, p[f.scale.w]);
    let s = tape.add_row(s, p[f.scale.b]);
    film_with_scale(tape, p, h, t, f, s)
}

/// [`film`] with `scale(t) = exp(linear(t))`.
fn film_exp(tape: &mut Tape, p: &[Var], h: Var, t: Var, f: Film) -> Var {
    let s = tape.matmul(t, p[f.scale.w]);
    let s = tape.add_row(s, p[f.scale.b]);
    let s = tape.exp(s);
    film_with_scale(tape, p, h, t, f, s)
}

fn film_with_scale(tape: &mut Tape, p: &[Var], h: Var, t: Var, f: Film, s: Var) -> Var {
    let b = tape.matmul(t, p[f.shift.w]);
    let b = tape.add_row(b, p[f.shift.b]);
    let h = tape.mul_row(h, s);
    tape.add_row(h, b)
}

/// `[c, sin c, cos c, sin 2c, cos 2c, sin 4c, cos 4c]` for the noise embedding `c`.
pub fn time_features(c_noise: f64) -> Array2<f64> {
    let mut f = vec![c_noise];
    for k in [1.0, 2.0, 4.0] {
        f.push((k * c_noise).sin());
        f.push((k * c_noise).cos());
    }
    Array2::from_shape_vec((1, TIME_FEATURES), f).expect("feature count")
}

/// Attention outputs and the weights the attention loss reads.
pub struct AttentionTrace {
    /// `(frames * tokens, width)`.
    pub output: Var,
    /// Per frame and head, post-softmax weights `(tokens, keys)`.
    pub weights: Vec<Vec<Var>>,
    /// Per frame and head, the largest garment-key weight of each query, `(tokens, 1)`.
    pub garment_max: Vec<Vec<Var>>,
    /// Garment key columns inside each frame's key block.
    pub garment_keys: Range<usize>,
}

/// Multi-head attention of every frame's tokens over `context[i]` frames then the garment.
///
/// `k` and `v` hold all frame tokens followed by `garment_tokens` garment rows. Every
/// context list must have the same length.
#[allow(clippy::too_many_arguments)]
pub fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    tokens: usize,
    garment_tokens: usize,
    context: &[Vec<usize>],
    heads: usize,
) -> AttentionTrace {
    let frames = context.len();
    let width = tape.value(q).ncols();
    let dh = width / heads;
    let ctx_len = context.first().map_or(0, Vec::len);
    assert!(context.iter().all(|c| c.len() == ctx_len), "ragged context");
    let garment_keys = ctx_len * tokens..ctx_len * tokens + garment_tokens;
    let garment_rows = frames * tokens..frames * tokens + garment_tokens;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut outputs = Vec::with_capacity(frames);
    let mut weights = Vec::with_capacity(frames);
    let mut garment_max = Vec::with_capacity(frames);
    for (i, ctx) in context.iter().enumerate() {
        let kv_rows: Vec<usize> = ctx
            .iter()
            .flat_map(|&j| j * tokens..(j + 1) * tokens)
            .chain(garment_rows.clone())
            .collect();
        let qi = tape.gather_rows(q, (i * tokens..(i + 1) * tokens).collect());
        let ki = tape.gather_rows(k, kv_rows.clone());
        let vi = tape.gather_rows(v, kv_rows);
        let mut head_out = Vec::with_capacity(heads);
        let mut head_w = Vec::with_capacity(heads);
        let mut head_max = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = tape.slice_cols(qi, cols.clone());
            let kh = tape.slice_cols(ki, cols.clone());
            let vh = tape.slice_cols(vi, cols);
            let logits = tape.matmul_nt(qh, kh);
            let logits = tape.scale(logits, scale);
            let w = tape.softmax_rows(logits);
            head_out.push(tape.matmul(w, vh));
            head_max.push(tape.max_cols(w, garment_keys.clone()));
            head_w.push(w);
        }
        outputs.push(tape.concat_cols(&head_out));
        weights.push(head_w);
        garment_max.push(head_max);
    }
    AttentionTrace {
        output: tape.concat_rows(&outputs),
        weights,
        garment_max,
        garment_keys,
    }
}

/// Garment attention probabilities `(frames, tokens)`: head mean of [`AttentionTrace::garment_max`].
pub fn garment_probs(tape: &Tape, trace: &AttentionTrace) -> Array2<f64> {
    let frames = trace.garment_max.len();
    let tokens = trace.garment_max.first().map_or(0, |h| tape.value(h[0]).nrows());
    let mut out = Array2::zeros((frames, tokens));
    for (i, heads) in trace.garment_max.iter().enumerate() {
        for &h in heads {
            for (a, &v) in tape.value(h).column(0).iter().enumerate() {
                out[[i, a]] += v;
            }
        }
        let n = heads.len() as f64;
        out.row_mut(i).mapv_inplace(|v| v / n);
    }
    out
}

/// Per-frame conditioning at latent resolution, rows in frame, row, column order.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub geom: Geom,
    /// `(rows, 4)` agnostic latent.
    pub agnostic: &'a Array2<f64>,
    /// `(rows, 1)` area-resized mask.
    pub mask: &'a Array2<f64>,
    /// `(rows, 3)` DensePose frames, area-downsampled.
    pub pose: &'a Array2<f64>,
    /// Frames whose tokens precede the garment tokens, per frame.
    pub context: &'a [Vec<usize>],
}

/// Projections and positional embeddings of one attention block.
#[derive(Debug, Clone, Copy, PartialEq)]
struct AttentionParams {
    pos_frame: usize,
    pos_garment: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

fn add_attention(
    p: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    tokens: usize,
    garment_tokens: usize,
    width: usize,
) -> AttentionParams {
    AttentionParams {
        pos_frame: p.push(&format!("{name}.pos_frame"), uniform(rng, tokens, width, 0.1)),
        pos_garment: p.push(&format!("{name}.pos_garment"), uniform(rng, garment_tokens, width, 0.1)),
        wq: add_linear(p, rng, &format!("{name}.q"), width, width),
        wk: add_linear(p, rng, &format!("{name}.k"), width, width),
        wv: add_linear(p, rng, &format!("{name}.v"), width, width),
        // zero output projection: the block starts as the identity
        wo: p.push(&format!("{name}.out"), Array2::zeros((width, width))),
    }
}

/// Attention of `h` (rows of `geom`) over its context frames and `garment`.
///
/// Returns the residual update `attention * Wo` and the trace.
#[allow(clippy::too_many_arguments)]
fn attention_block(
    tape: &mut Tape,
    p: &[Var],
    a: AttentionParams,
    h: Var,
    geom: Geom,
    garment: Var,
    context: &[Vec<usize>],
    heads: usize,
) -> (Var, AttentionTrace) {
    let tokens = geom.tokens_per_frame();
    let lc = tape.value(garment).nrows();
    let pos = tape.gather_rows(p[a.pos_frame], (0..geom.frames).flat_map(|_| 0..tokens).collect());
    let xt = tape.add(h, pos);
    let gt = tape.add(garment, p[a.pos_garment]);
    let q = tape.matmul(xt, p[a.wq]);
    let kf = tape.matmul(xt, p[a.wk]);
    let vf = tape.matmul(xt, p[a.wv]);
    let kg = tape.matmul(gt, p[a.wk]);
    let vg = tape.matmul(gt, p[a.wv]);
    let k = tape.concat_rows(&[kf, kg]);
    let v = tape.concat_rows(&[vf, vg]);
    let trace = attend(tape, q, k, v, tokens, lc, context, heads);
    (tape.matmul(trace.output, p[a.wo]), trace)
}

/// Garment token blocks from the reference encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GarmentTokens {
    /// `(fine_garment_tokens, mid_channels)`, for the first attention block.
    pub fine: Var,
    /// `(garment_tokens, attention_width)`, for the bottleneck attention.
    pub coarse: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DenoiserLayout {
    conv_in: Conv,
    pose1: Conv,
    pose2: Conv,
    time_w: usize,
    time_b: usize,
    time_hidden: Linear,
    /// Per-stage noise-level scale and shift: input, down, down, up, up.
    film: [Film; 5],
    /// Scale and shift of the raw inputs fed straight to the output convolution;
    /// the scale is `exp` of a linear map of the time features, so powers of sigma.
    film_skip: Film,
    down1: Conv,
    fine: AttentionParams,
    down2: Conv,
    attn: AttentionParams,
    global_w: usize,
    global_b: usize,
    up1: Conv,
    up2: Conv,
    conv_out: Conv,
}

/// The denoising network. Output shape equals the noisy-latent input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub config: ToyConfig,
    pub seed: u64,
    pub params: ParamSet,
    layout: DenoiserLayout,
}

impl ToyDenoiser {
    pub fn new(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::default();
        let (c0, c1, d) = (config.base_channels, config.mid_channels, config.attention_width);
        let (gr, gc) = config.token_grid();
        let in_ch = 2 * LATENT_CHANNELS + 1;
        let conv_in = add_conv(&mut p, &mut rng, "conv_in", in_ch, c0);
        let pose1 = add_conv(&mut p, &mut rng, "pose.0", 3, config.pose_hidden);
        let pose2 = add_conv(&mut p, &mut rng, "pose.1", config.pose_hidden, c0);
        let time_w = add_linear(&mut p, &mut rng, "time.weight", TIME_FEATURES, c0);
        let time_b = p.push("time.bias", Array2::zeros((1, c0)));
        let time_hidden = Linear {
            w: add_linear(&mut p, &mut rng, "time.hidden.weight", TIME_FEATURES, TIME_HIDDEN),
            b: p.push("time.hidden.bias", Array2::zeros((1, TIME_HIDDEN))),
        };
        let film = [("in", c0), ("down.0", c1), ("down.1", d), ("up.0", c1), ("up.1", c0)]
            .map(|(name, width)| add_film(&mut p, name, width, TIME_HIDDEN, 1.0));
        let film_skip = add_film(&mut p, "skip", in_ch, TIME_FEATURES, 0.0);
        let down1 = add_conv(&mut p, &mut rng, "down.0", c0, c1);
        let (fr, fc) = config.fine_token_grid();
        let fine = add_attention(&mut p, &mut rng, "fine_attn", fr * fc, config.fine_garment_tokens(), c1);
        let down2 = add_conv(&mut p, &mut rng, "down.1", c1, d);
        let attn = add_attention(&mut p, &mut rng, "attn", gr * gc, config.garment_tokens(), d);
        let global_w = add_linear(&mut p, &mut rng, "attn.global.weight", d, d);
        let global_b = p.push("attn.global.bias", Array2::zeros((1, d)));
        let up1 = add_conv(&mut p, &mut rng, "up.0", d + c1, c1);
        let up2 = add_conv(&mut p, &mut rng, "up.1", c1 + c0, c0);
        let conv_out = Conv {
            w: p.push("conv_out.weight", Array2::zeros((9 * (c0 + in_ch), LATENT_CHANNELS))),
            b: p.push("conv_out.bias", Array2::zeros((1, LATENT_CHANNELS))),
        };
        Ok(Self {
            config,
            seed,
            params: p,
            layout: DenoiserLayout {
                conv_in,
                pose1,
                pose2,
                time_w,
                time_b,
                time_hidden,
                film,
                film_skip,
                down1,
                fine,
                down2,
                attn,
                global_w,
                global_b,
                up1,
                up2,
                conv_out,
            },
        })
    }

    /// Pose guider branch: two convolutions on the downsampled DensePose map.
    pub fn pose_embedding(&self, tape: &mut Tape, p: &[Var], pose: Var, geom: Geom) -> Var {
        let l = &self.layout;
        let h = conv(tape, p, pose, geom, l.pose1, 1);
        let h = tape.silu(h);
        conv(tape, p, h, geom, l.pose2, 1)
    }

    /// Raw network output `F(x; c_noise, cond)` for the scaled noisy latent `x`.
    ///
    /// `garment` holds both token blocks of the reference encoder. The returned trace is
    /// the bottleneck attention, which the attention loss reads.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        c_noise: f64,
        cond: &Conditioning<'_>,
        garment: GarmentTokens,
    ) -> Result<(Var, AttentionTrace)> {
        let cfg = &self.config;
        let l = &self.layout;
        let g0 = cond.geom;
        if (g0.height, g0.width) != (cfg.latent_height, cfg.latent_width) {
            return Err(Error::Dimension(format!(
                "latent {}x{} but the network was built for {}x{}",
                g0.height, g0.width, cfg.latent_height, cfg.latent_width
            ))
            .into());
        }
        let rows = g0.rows();
        for (name, m, c) in [
            ("noisy latent", tape.value(x), LATENT_CHANNELS),
            ("agnostic latent", cond.agnostic, LATENT_CHANNELS),
            ("mask", cond.mask, 1),
            ("pose", cond.pose, 3),
        ] {
            if m.dim() != (rows, c) {
                return Err(Error::Dimension(format!("{name} is {:?}, expected ({rows}, {c})", m.dim())).into());
            }
        }
        if cond.context.len() != g0.frames {
            return Err(Error::Dimension(format!(
                "{} context lists for {} frames",
                cond.context.len(),
                g0.frames
            ))
            .into());
        }
        if cond.context.iter().flatten().any(|&j| j >= g0.frames) {
            return Err(Error::Dimension("context frame out of range".into()).into());
        }
        if tape.value(garment.coarse).dim() != (cfg.garment_tokens(), cfg.attention_width)
            || tape.value(garment.fine).dim() != (cfg.fine_garment_tokens(), cfg.mid_channels)
        {
            return Err(Error::Dimension("garment token blocks have the wrong shape".into()).into());
        }

        let agn = tape.leaf(cond.agnostic.clone());
        let mask = tape.leaf(cond.mask.clone());
        let pose = tape.leaf(cond.pose.clone());
        let input = tape.concat_cols(&[x, agn, mask]);
        let h = conv(tape, p, input, g0, l.conv_in, 1);
        let pe = self.pose_embedding(tape, p, pose, g0);
        let h = tape.add(h, pe);
        let tf = tape.leaf(time_features(c_noise));
        let te = tape.matmul(tf, p[l.time_w]);
        let te = tape.add_row(te, p[l.time_b]);
        let h = tape.add_row(h, te);
        let th = tape.matmul(tf, p[l.time_hidden.w]);
        let th = tape.add_row(th, p[l.time_hidden.b]);
        let th = tape.silu(th);
        let [f_in, f_d1, f_d2, f_u1, f_u2] = l.film;
        let h = film(tape, p, h, th, f_in);
        let h0 = tape.silu(h);

        let g1 = g0.strided(2);
        let h1 = conv(tape, p, h0, g0, l.down1, 2);
        let h1 = film(tape, p, h1, th, f_d1);
        let h1 = tape.silu(h1);
        let (fine, _) = attention_block(tape, p, l.fine, h1, g1, garment.fine, cond.context, cfg.heads);
        let h1 = tape.add(h1, fine);
        let g2 = g1.strided(2);
        let h2 = conv(tape, p, h1, g1, l.down2, 2);
        let h2 = film(tape, p, h2, th, f_d2);
        let h2 = tape.silu(h2);

        let (a, trace) = attention_block(tape, p, l.attn, h2, g2, garment.coarse, cond.context, cfg.heads);
        let lc = cfg.garment_tokens();
        let pool = tape.leaf(Array2::from_elem((1, lc), 1.0 / lc as f64));
        let gt = tape.add(garment.coarse, p[l.attn.pos_garment]);
        let pooled = tape.matmul(pool, gt);
        let global = tape.matmul(pooled, p[l.global_w]);
        let global = tape.add_row(global, p[l.global_b]);
        let mid = tape.add(h2, a);
        let mid = tape.add_row(mid, global);

        let u1 = tape.upsample2(mid, g2);
        let c1 = tape.concat_cols(&[u1, h1]);
        let h3 = conv(tape, p, c1, g1, l.up1, 1);
        let h3 = film(tape, p, h3, th, f_u1);
        let h3 = tape.silu(h3);
        let u2 = tape.upsample2(h3, g1);
        let c2 = tape.concat_cols(&[u2, h0]);
        let h4 = conv(tape, p, c2, g0, l.up2, 1);
        let h4 = film(tape, p, h4, th, f_u2);
        let h4 = tape.silu(h4);
        let skip = film_exp(tape, p, input, tf, l.film_skip);
        let head = tape.concat_cols(&[h4, skip]);
        let out = conv(tape, p, head, g0, l.conv_out, 1);
        Ok((out, trace))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct EncoderLayout {
    stages: [Conv; 3],
}

/// Garment image to token blocks for the first and the bottleneck attention.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyReferenceEncoder {
    pub config: ToyConfig,
    pub seed: u64,
    pub params: ParamSet,
    layout: EncoderLayout,
}

impl ToyReferenceEncoder {
    pub fn new(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::default();
        let (c0, c1, d) = (config.base_channels, config.mid_channels, config.attention_width);
        let stages = [
            add_conv(&mut p, &mut rng, "ref.0", 3, c0),
            add_conv(&mut p, &mut rng, "ref.1", c0, c1),
            add_conv(&mut p, &mut rng, "ref.2", c1, d),
        ];
        Ok(Self {
            config,
            seed,
            params: p,
            layout: EncoderLayout { stages },
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], garment: &GarmentImage) -> Result<GarmentTokens> {
        let (h, w, _) = garment.image().dim();
        if (h, w) != (self.config.garment_height, self.config.garment_width) {
            return Err(Error::Dimension(format!(
                "garment image {h}x{w}, encoder expects {}x{}",
                self.config.garment_height, self.config.garment_width
            ))
            .into());
        }
        let pixels = garment
            .image()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((h * w, 3))
            .expect("contiguous image");
        let mut x = tape.leaf(pixels);
        let mut geom = Geom::new(1, h, w);
        let mut fine = x;
        for (i, stage) in self.layout.stages.iter().enumerate() {
            x = conv(tape, p, x, geom, *stage, 2);
            geom = geom.strided(2);
            if i + 1 < self.layout.stages.len() {
                x = tape.silu(x);
            }
            if i == 1 {
                fine = x;
            }
        }
        Ok(GarmentTokens { fine, coarse: x })
    }
}

/// Denoiser and garment encoder trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub denoiser: ToyDenoiser,
    pub reference: ToyReferenceEncoder,
}

impl ToyModel {
    /// Both networks from one seed; the encoder uses `seed + 1`.
    pub fn new(config: ToyConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            denoiser: ToyDenoiser::new(config, seed)?,
            reference: ToyReferenceEncoder::new(config, seed.wrapping_add(1))?,
        })
    }

    pub fn config(&self) -> ToyConfig {
        self.denoiser.config
    }

    pub fn param_sets(&self) -> [&ParamSet; 2] {
        [&self.denoiser.params, &self.reference.params]
    }

    pub fn param_sets_mut(&mut self) -> [&mut ParamSet; 2] {
        [&mut self.denoiser.params, &mut self.reference.params]
    }

    pub fn scalar_count(&self) -> usize {
        self.param_sets().iter().map(|p| p.scalar_count()).sum()
    }
}
