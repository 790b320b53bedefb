//! Gaussian diffusion over latents: schedule, forward noising, guidance,
//! DDPM / DDIM steppers and the batched sampler.

mod dit;

pub use dit::{
    draw_null_mask, CaptionEmbedding, DiffusionModel, DiffusionTrainer, DitConfig, StepStats, TrainItem,
};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("bad beta range: {0}")]
    BadRange(String),
    #[error("bad timestep {t} (T = {steps})")]
    BadTimestep { t: usize, steps: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("caption has {len} tokens, limit {max}")]
    TooLong { len: usize, max: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Linear-beta schedule. Arrays are indexed by `t - 1` for `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 || !(0.0 < beta_1 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(DiffusionError::BadRange(format!("T={steps}, beta {beta_1}..{beta_t}")));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| if steps == 1 { beta_1 } else { beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64 })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<NoiseSchedule, DiffusionError> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(DiffusionError::BadRange("betas must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        // posterior std: beta_t (1 - abar_{t-1}) / (1 - abar_t), zero at t = 1
        let sigmas = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])).sqrt()
            })
            .collect();
        Ok(NoiseSchedule { betas, alphas, alpha_bars, sigmas })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize, DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::BadTimestep { t, steps: self.steps() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.alphas[self.check(t)?])
    }

    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.check(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(self.sigmas[self.check(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<(), DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::ShapeMismatch(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `a * x + b * y` elementwise.
fn axpby(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Tensor {
    let data = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
    Tensor::new(x.shape(), data).expect("shapes checked by caller")
}

pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("sized")
}

/// Mixes with an explicit `alpha_bar`; `q_sample` is this at `alpha_bar(t)`.
pub fn noise_with(z0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor, DiffusionError> {
    same_shape(z0, eps, "q_sample")?;
    Ok(axpby(alpha_bar.sqrt(), z0, (1.0 - alpha_bar).sqrt(), eps))
}

pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor, DiffusionError> {
    sched.check(t)?;
    noise_with(z0, sched.alpha_bar(t)?, eps)
}

/// Guided noise `(1 - w) eps_u + w eps_c`; exact at `w = 0` and `w = 1`.
pub fn cfg(eps_u: &Tensor, eps_c: &Tensor, w: f64) -> Result<Tensor, DiffusionError> {
    same_shape(eps_u, eps_c, "cfg")?;
    Ok(axpby(1.0 - w, eps_u, w, eps_c))
}

/// Reverse-process mean from `t` to `t_prev` (adjacent when `t_prev = t - 1`).
fn ddpm_mean_between(z_t: &Tensor, t: usize, t_prev: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<(Tensor, f64), DiffusionError> {
    same_shape(z_t, eps, "ddpm_step")?;
    let (ab, ab_prev) = (s.alpha_bar(t)?, s.alpha_bar(t_prev)?);
    let (a, beta) = if t_prev + 1 == t { (s.alpha(t)?, s.beta(t)?) } else { (ab / ab_prev, 1.0 - ab / ab_prev) };
    let mean = axpby(1.0 / a.sqrt(), z_t, -beta / (a.sqrt() * (1.0 - ab).sqrt()), eps);
    let var = if t_prev + 1 == t { s.sigma(t)?.powi(2) } else { beta * (1.0 - ab_prev) / (1.0 - ab) };
    Ok((mean, var.sqrt()))
}

pub fn ddpm_mean(z_t: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor, DiffusionError> {
    s.check(t)?;
    Ok(ddpm_mean_between(z_t, t, t - 1, eps, s)?.0)
}

/// One ancestral step `t -> t - 1`; the noise term vanishes at `t = 1`.
pub fn ddpm_step(z_t: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule, rng: &mut impl Rng) -> Result<Tensor, DiffusionError> {
    s.check(t)?;
    ddpm_step_between(z_t, t, t - 1, eps, s, rng)
}

/// Ancestral step over a skipped interval (respaced DDPM).
pub fn ddpm_step_between(
    z_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps: &Tensor,
    s: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor, DiffusionError> {
    s.check(t)?;
    if t_prev >= t {
        return Err(DiffusionError::BadTimestep { t: t_prev, steps: s.steps() });
    }
    let (mean, sigma) = ddpm_mean_between(z_t, t, t_prev, eps, s)?;
    if sigma == 0.0 {
        return Ok(mean);
    }
    let noise = standard_normal(z_t.shape(), rng);
    Ok(axpby(1.0, &mean, sigma, &noise))
}

/// Clean-latent estimate implied by a noise prediction.
pub fn predict_z0(z_t: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor, DiffusionError> {
    same_shape(z_t, eps, "predict_z0")?;
    let ab = s.alpha_bar(t)?;
    s.check(t)?;
    Ok(axpby(1.0 / ab.sqrt(), z_t, -(1.0 - ab).sqrt() / ab.sqrt(), eps))
}

/// Deterministic (eta = 0) step `t -> t_prev`; `t_prev = 0` lands on the clean estimate.
pub fn ddim_step(z_t: &Tensor, t: usize, t_prev: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor, DiffusionError> {
    s.check(t)?;
    if t_prev > t {
        return Err(DiffusionError::BadTimestep { t: t_prev, steps: s.steps() });
    }
    same_shape(z_t, eps, "ddim_step")?;
    if t_prev == t {
        return Ok(z_t.clone());
    }
    let z0 = predict_z0(z_t, t, eps, s)?;
    let ab = s.alpha_bar(t_prev)?;
    Ok(axpby(ab.sqrt(), &z0, (1.0 - ab).sqrt(), eps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Method, String> {
        match s {
            "ddpm" => Ok(Method::Ddpm),
            "ddim" => Ok(Method::Ddim),
            _ => Err(format!("unknown sampler {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub method: Method,
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

/// Descending, evenly spaced subsequence of `1..=T` ending at the smallest
/// stride, always starting at `T`.
pub fn timesteps(total: usize, steps: usize) -> Result<Vec<usize>, DiffusionError> {
    if steps == 0 || steps > total {
        return Err(DiffusionError::BadTimestep { t: steps, steps: total });
    }
    Ok((1..=steps).rev().map(|i| (i * total).div_ceil(steps)).collect())
}

/// Runs the reverse process for every condition in `conds`, from standard
/// normal starts drawn from `rng`. Guidance uses the model's null condition;
/// at `guidance == 1` the unconditional pass is skipped.
pub fn sample(
    model: &DiffusionModel,
    sched: &NoiseSchedule,
    conds: &[CaptionEmbedding],
    cfg_: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor>, DiffusionError> {
    if conds.is_empty() {
        return Ok(Vec::new());
    }
    let shape = model.latent_shape();
    let mut zs: Vec<Tensor> = conds.iter().map(|_| standard_normal(&shape, rng)).collect();
    let ts = timesteps(sched.steps(), cfg_.steps)?;
    let null = model.null_embedding();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = guided_eps(model, &zs, t, conds, &null, cfg_.guidance)?;
        for (z, e) in zs.iter_mut().zip(&eps) {
            *z = match cfg_.method {
                Method::Ddim => ddim_step(z, t, t_prev, e, sched)?,
                Method::Ddpm => ddpm_step_between(z, t, t_prev, e, sched, rng)?,
            };
        }
    }
    Ok(zs)
}

/// Classifier-free guided noise predictions at a shared timestep.
pub fn guided_eps(
    model: &DiffusionModel,
    zs: &[Tensor],
    t: usize,
    conds: &[CaptionEmbedding],
    null: &CaptionEmbedding,
    guidance: f64,
) -> Result<Vec<Tensor>, DiffusionError> {
    if guidance == 1.0 {
        return model.predict_eps(zs, &vec![t; zs.len()], &conds.iter().collect::<Vec<_>>());
    }
    let both: Vec<Tensor> = zs.iter().chain(zs).cloned().collect();
    let cs: Vec<&CaptionEmbedding> = std::iter::repeat_n(null, zs.len()).chain(conds).collect();
    let out = model.predict_eps(&both, &vec![t; both.len()], &cs)?;
    let (u, c) = out.split_at(zs.len());
    u.iter().zip(c).map(|(u, c)| cfg(u, c, guidance)).collect()
}
