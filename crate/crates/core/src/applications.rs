//! Uses of a trained denoiser beyond sampling: ranking captions for a
//! molecule by noise-prediction error, and delta-score latent editing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{cfg, noise_with, standard_normal, CaptionEmbedding, DiffusionError, DiffusionModel, NoiseSchedule};
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("no candidate captions")]
    EmptyCandidates,
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub gamma: f64,
    pub guidance: f64,
    pub iterations: usize,
    /// Inclusive timestep range; `None` means `1..=T`.
    pub t_range: Option<(usize, usize)>,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> EditConfig {
        EditConfig { gamma: 0.4, guidance: 2.0, iterations: 200, t_range: None, seed: 0 }
    }
}

fn sq_dist(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Scores every candidate for `z` under `n` shared `(t, eps)` draws.
/// Returns mean squared noise-prediction error per candidate.
pub fn score_candidates(
    model: &DiffusionModel,
    sched: &NoiseSchedule,
    z: &Tensor,
    candidates: &[CaptionEmbedding],
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, AppError> {
    if candidates.is_empty() {
        return Err(AppError::EmptyCandidates);
    }
    if n == 0 {
        return Err(AppError::BadConfig("n must be at least 1".into()));
    }
    let k = candidates.len();
    let mut totals = vec![0.0; k];
    let mut zs = Vec::with_capacity(n * k);
    let mut ts = Vec::with_capacity(n * k);
    let mut eps = Vec::with_capacity(n);
    for _ in 0..n {
        let t = rng.gen_range(1..=sched.steps());
        let e = standard_normal(z.shape(), rng);
        let zt = noise_with(z, sched.alpha_bar(t)?, &e)?;
        for _ in 0..k {
            zs.push(zt.clone());
            ts.push(t);
        }
        eps.push(e);
    }
    let conds: Vec<&CaptionEmbedding> = (0..n).flat_map(|_| candidates.iter()).collect();
    let pred = model.predict_eps(&zs, &ts, &conds)?;
    for (i, p) in pred.iter().enumerate() {
        totals[i % k] += sq_dist(p, &eps[i / k]);
    }
    Ok(totals.into_iter().map(|s| s / n as f64).collect())
}

/// Mean over `n` draws of `||eps_hat(z_t, t, c) - eps||^2`.
pub fn caption_score(
    model: &DiffusionModel,
    sched: &NoiseSchedule,
    z: &Tensor,
    c: &CaptionEmbedding,
    n: usize,
    seed: u64,
) -> Result<f64, AppError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(score_candidates(model, sched, z, std::slice::from_ref(c), n, &mut rng)?[0])
}

/// Index of the lowest-scoring candidate (ties go to the lowest index) and all scores.
pub fn retrieve(
    model: &DiffusionModel,
    sched: &NoiseSchedule,
    z: &Tensor,
    candidates: &[CaptionEmbedding],
    rc: &RetrievalConfig,
) -> Result<(usize, Vec<f64>), AppError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rc.seed);
    let scores = score_candidates(model, sched, z, candidates, rc.n, &mut rng)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

/// One editing source: latent plus source and target conditions.
#[derive(Debug, Clone, Copy)]
pub struct EditJob<'a> {
    pub z_src: &'a Tensor,
    pub c_src: &'a CaptionEmbedding,
    pub c_tgt: &'a CaptionEmbedding,
}

/// Guided noise difference `eps_tgt - eps_src` for each job at shared
/// `(t, eps)` per job.
fn delta_scores(
    model: &DiffusionModel,
    sched: &NoiseSchedule,
    jobs: &[EditJob],
    current: &[Tensor],
    ts: &[usize],
    noise: &[Tensor],
    guidance: f64,
) -> Result<Vec<Tensor>, AppError> {
    let null = model.null_embedding();
    let mut zs = Vec::with_capacity(4 * jobs.len());
    let mut steps = Vec::with_capacity(4 * jobs.len());
    let mut conds = Vec::with_capacity(4 * jobs.len());
    for (i, job) in jobs.iter().enumerate() {
        let ab = sched.alpha_bar(ts[i])?;
        let src = noise_with(job.z_src, ab, &noise[i])?;
        let tgt = noise_with(&current[i], ab, &noise[i])?;
        zs.extend([src.clone(), src, tgt.clone(), tgt]);
        steps.extend([ts[i]; 4]);
        conds.extend([&null, job.c_src, &null, job.c_tgt]);
    }
    let pred = model.predict_eps(&zs, &steps, &conds)?;
    pred.chunks(4)
        .map(|p| {
            let src = cfg(&p[0], &p[1], guidance)?;
            let tgt = cfg(&p[2], &p[3], guidance)?;
            Ok(Tensor::new(src.shape(), tgt.data().iter().zip(src.data()).map(|(a, b)| a - b).collect())
                .expect("same shape"))
        })
        .collect()
}

/// The first update `-gamma (eps_tgt - eps_src)` applied to an unedited source.
pub fn dds_first_update(
    model: &DiffusionModel,
    sched: &NoiseSchedule,
    job: EditJob,
    ec: &EditConfig,
) -> Result<Tensor, AppError> {
    let mut rng = ChaCha8Rng::seed_from_u64(ec.seed);
    let (lo, hi) = t_bounds(sched, ec)?;
    let t = rng.gen_range(lo..=hi);
    let e = standard_normal(job.z_src.shape(), &mut rng);
    let d = delta_scores(model, sched, &[job], std::slice::from_ref(job.z_src), &[t], &[e], ec.guidance)?.remove(0);
    Ok(Tensor::new(d.shape(), d.data().iter().map(|x| -ec.gamma * x).collect()).expect("same shape"))
}

fn t_bounds(sched: &NoiseSchedule, ec: &EditConfig) -> Result<(usize, usize), AppError> {
    let (lo, hi) = ec.t_range.unwrap_or((1, sched.steps()));
    if lo == 0 || lo > hi || hi > sched.steps() {
        return Err(AppError::BadConfig(format!("timestep range {lo}..={hi}")));
    }
    if ec.gamma < 0.0 {
        return Err(AppError::BadConfig("gamma must be non-negative".into()));
    }
    Ok((lo, hi))
}

/// Delta-score editing of several sources at once. Each iteration draws one
/// `(t, eps)` per job shared by its source and target branches.
pub fn dds_edit_batch(
    model: &DiffusionModel,
    sched: &NoiseSchedule,
    jobs: &[EditJob],
    ec: &EditConfig,
) -> Result<Vec<Tensor>, AppError> {
    let (lo, hi) = t_bounds(sched, ec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ec.seed);
    let mut current: Vec<Tensor> = jobs.iter().map(|j| j.z_src.clone()).collect();
    if jobs.is_empty() {
        return Ok(current);
    }
    for _ in 0..ec.iterations {
        let ts: Vec<usize> = jobs.iter().map(|_| rng.gen_range(lo..=hi)).collect();
        let noise: Vec<Tensor> = jobs.iter().map(|j| standard_normal(j.z_src.shape(), &mut rng)).collect();
        let deltas = delta_scores(model, sched, jobs, &current, &ts, &noise, ec.guidance)?;
        for (z, d) in current.iter_mut().zip(&deltas) {
            for (x, g) in z.data_mut().iter_mut().zip(d.data()) {
                *x -= ec.gamma * g;
            }
        }
    }
    Ok(current)
}

pub fn dds_edit(
    model: &DiffusionModel,
    sched: &NoiseSchedule,
    z_src: &Tensor,
    c_src: &CaptionEmbedding,
    c_tgt: &CaptionEmbedding,
    ec: &EditConfig,
) -> Result<Tensor, AppError> {
    Ok(dds_edit_batch(model, sched, &[EditJob { z_src, c_src, c_tgt }], ec)?.remove(0))
}
