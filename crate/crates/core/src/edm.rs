//! EDM preconditioning, denoising score-matching loss and the Euler sampler.

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::data::LatentClip;
use crate::error::{dim_err, Error, Result};

/// Noise-level parameters shared by training and sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseLevelSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub num_steps: usize,
    pub sigma_data: f64,
    /// Mean of `ln sigma` for the training sampler.
    pub p_mean: f64,
    /// Standard deviation of `ln sigma` for the training sampler.
    pub p_std: f64,
}

impl Default for NoiseLevelSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            num_steps: 25,
            sigma_data: 0.5,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

/// The four EDM coefficients at one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preconditioning {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

/// `c_skip = sd^2/(s^2+sd^2)`, `c_out = s*sd/sqrt(s^2+sd^2)`, `c_in = 1/sqrt(s^2+sd^2)`,
/// `c_noise = ln(s)/4`. At `sigma = 0` the noise embedding is `-inf`; callers must not feed
/// it to a network (see [`apply_denoiser`]).
pub fn precondition(sigma: f64, sigma_data: f64) -> Result<Preconditioning> {
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("noise level must be >= 0, got {sigma}")));
    }
    if !(sigma_data > 0.0) {
        return Err(Error::Domain(format!("sigma_data must be > 0, got {sigma_data}")));
    }
    let s2 = sigma * sigma;
    let d2 = sigma_data * sigma_data;
    let norm = (s2 + d2).sqrt();
    Ok(Preconditioning {
        c_skip: d2 / (s2 + d2),
        c_out: sigma * sigma_data / norm,
        c_in: 1.0 / norm,
        c_noise: 0.25 * sigma.ln(),
    })
}

/// EDM loss weight `(s^2+sd^2)/(s*sd)^2`.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("loss weight needs sigma > 0, got {sigma}")));
    }
    let p = sigma * sigma_data;
    Ok((sigma * sigma + sigma_data * sigma_data) / (p * p))
}

impl NoiseLevelSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be >= 1".into()));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::Config("sigma_data must be positive".into()));
        }
        if !(self.p_std >= 0.0) || !self.p_mean.is_finite() {
            return Err(Error::Config("invalid log-normal sampler parameters".into()));
        }
        Ok(())
    }

    pub fn precondition(&self, sigma: f64) -> Result<Preconditioning> {
        precondition(sigma, self.sigma_data)
    }

    pub fn loss_weight(&self, sigma: f64) -> Result<f64> {
        loss_weight(sigma, self.sigma_data)
    }

    /// Training noise level, `exp(Normal(p_mean, p_std))`.
    pub fn sample_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.p_std == 0.0 {
            return self.p_mean.exp();
        }
        LogNormal::new(self.p_mean, self.p_std)
            .expect("validated log-normal parameters")
            .sample(rng)
    }

    /// Decreasing rho-spaced ladder from `sigma_max` to `sigma_min`, then a final 0.
    pub fn sigma_steps(&self) -> Vec<f64> {
        let n = self.num_steps;
        let mut out = Vec::with_capacity(n + 1);
        if n == 1 {
            out.push(self.sigma_max);
        } else {
            let inv = 1.0 / self.rho;
            let hi = self.sigma_max.powf(inv);
            let lo = self.sigma_min.powf(inv);
            for i in 0..n {
                let t = i as f64 / (n - 1) as f64;
                out.push((hi + t * (lo - hi)).powf(self.rho));
            }
        }
        out.push(0.0);
        out
    }
}

fn check_same_shape(a: &LatentClip, b: &LatentClip) -> Result<()> {
    if a.dim() != b.dim() {
        return dim_err(format!("latent shapes {:?} vs {:?}", a.dim(), b.dim()));
    }
    Ok(())
}

/// Wraps a raw network into a denoiser: `c_skip x + c_out F(c_in x; c_noise, cond)`.
///
/// At `sigma == 0` the raw network is not evaluated and `x` is returned unchanged.
pub fn apply_denoiser<C, F>(
    raw_net: F,
    x: &LatentClip,
    sigma: f64,
    sigma_data: f64,
    cond: &C,
) -> Result<LatentClip>
where
    C: ?Sized,
    F: Fn(&LatentClip, f64, &C) -> Result<LatentClip>,
{
    let p = precondition(sigma, sigma_data)?;
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let scaled = x.with_latents(x.latents.mapv(|v| v * p.c_in))?;
    let raw = raw_net(&scaled, p.c_noise, cond)?;
    check_same_shape(x, &raw)?;
    let mut out = raw.latents;
    out.zip_mut_with(&x.latents, |r, &xv| *r = p.c_skip * xv + p.c_out * *r);
    x.with_latents(out)
}

/// `lambda(sigma) * mean((D(x0 + n; sigma) - x0)^2)`.
pub fn dsm_loss<C, D>(
    denoiser: D,
    x0: &LatentClip,
    noise: &LatentClip,
    sigma: f64,
    sigma_data: f64,
    cond: &C,
) -> Result<f64>
where
    C: ?Sized,
    D: Fn(&LatentClip, f64, &C) -> Result<LatentClip>,
{
    check_same_shape(x0, noise)?;
    let weight = loss_weight(sigma, sigma_data)?;
    dsm_loss_weighted(denoiser, x0, noise, sigma, weight, cond)
}

/// [`dsm_loss`] with an explicit loss weight.
pub fn dsm_loss_weighted<C, D>(
    denoiser: D,
    x0: &LatentClip,
    noise: &LatentClip,
    sigma: f64,
    weight: f64,
    cond: &C,
) -> Result<f64>
where
    C: ?Sized,
    D: Fn(&LatentClip, f64, &C) -> Result<LatentClip>,
{
    check_same_shape(x0, noise)?;
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("dsm loss needs sigma > 0, got {sigma}")));
    }
    let noisy = x0.with_latents(&x0.latents + &noise.latents)?;
    let denoised = denoiser(&noisy, sigma, cond)?;
    check_same_shape(x0, &denoised)?;
    let count = x0.latents.len() as f64;
    let sq: f64 = denoised
        .latents
        .iter()
        .zip(x0.latents.iter())
        .map(|(d, x)| (d - x) * (d - x))
        .sum();
    Ok(weight * sq / count)
}

/// Deterministic Euler integration of the probability-flow ODE down `sigmas`.
///
/// `on_step` sees the state after each step (step index, sigma reached, state).
pub fn euler_sample_with<C, D, S>(
    denoiser: D,
    x_t: &LatentClip,
    sigmas: &[f64],
    cond: &C,
    mut on_step: S,
) -> Result<LatentClip>
where
    C: ?Sized,
    D: Fn(&LatentClip, f64, &C) -> Result<LatentClip>,
    S: FnMut(usize, f64, &LatentClip),
{
    if sigmas.len() < 2 {
        return Err(Error::Schedule("ladder needs at least two levels".into()));
    }
    let mut x = x_t.clone();
    for (k, pair) in sigmas.windows(2).enumerate() {
        let (cur, next) = (pair[0], pair[1]);
        if !(cur > 0.0) {
            return Err(Error::Schedule(format!(
                "noise level {cur} at step {k} before the end of the ladder"
            )));
        }
        let denoised = denoiser(&x, cur, cond)?;
        check_same_shape(&x, &denoised)?;
        let ratio = (next - cur) / cur;
        let mut state = x.latents;
        state.zip_mut_with(&denoised.latents, |xv, &dv| *xv += ratio * (*xv - dv));
        x = x_t.with_latents(state)?;
        on_step(k, next, &x);
    }
    Ok(x)
}

pub fn euler_sample<C, D>(
    denoiser: D,
    x_t: &LatentClip,
    schedule: &NoiseLevelSchedule,
    cond: &C,
) -> Result<LatentClip>
where
    C: ?Sized,
    D: Fn(&LatentClip, f64, &C) -> Result<LatentClip>,
{
    schedule.validate()?;
    euler_sample_with(denoiser, x_t, &schedule.sigma_steps(), cond, |_, _, _| {})
}
