//! Noise schedule, forward noising, one reverse step of each sampler, and
//! the guided sampling loop on an untrained denoiser.

use latentmol::diffusion::{
    ddim_step, ddpm_step, make_schedule, predict_z0, q_sample, sample, standard_normal, timesteps, DiffusionModel,
    DitConfig, Method, SamplerConfig,
};
use latentmol::tokenizer::{train_bpe, TextMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    for t in [1, 250, 500, 750, 1000] {
        println!("t={t:4} beta={:.5} alpha_bar={:.6} sigma={:.5}", sched.beta(t).unwrap(), sched.alpha_bar(t).unwrap(), sched.sigma(t).unwrap());
    }

    let z0 = standard_normal(&[4, 3], &mut rng);
    let eps = standard_normal(&[4, 3], &mut rng);
    let zt = q_sample(&z0, 600, &eps, &sched).unwrap();
    let back = predict_z0(&zt, 600, &eps, &sched).unwrap();
    println!("z0 recovered from true noise: max err {:.2e}", back.max_abs_diff(&z0));
    let prev = ddpm_step(&zt, 600, &eps, &sched, &mut rng).unwrap();
    let jump = ddim_step(&zt, 600, 300, &eps, &sched).unwrap();
    println!("ddpm 600->599 moved {:.4}; ddim 600->300 moved {:.4}", prev.max_abs_diff(&zt), jump.max_abs_diff(&zt));
    println!("ddim timesteps for 10 of 1000: {:?}", timesteps(1000, 10).unwrap());

    let captions = ["contains an oxygen atom; has 1 ring", "has no rings; has a hydroxyl group"];
    let vocab = train_bpe(&captions, 60, TextMode::Words).unwrap();
    let cfg = DitConfig {
        latent_len: 8,
        latent_dim: 4,
        width: 16,
        blocks: 1,
        heads: 2,
        caption_vocab: vocab.len(),
        caption_len: 16,
        caption_layers: 1,
        null_len: 2,
    };
    let model = DiffusionModel::new(cfg, &mut rng).unwrap();
    let small = make_schedule(100, 1e-4, 0.02).unwrap();
    let conds: Vec<_> =
        captions.iter().map(|c| model.encode_caption(&vocab.encode(c, 16).unwrap()).unwrap()).collect();
    for method in [Method::Ddim, Method::Ddpm] {
        let sc = SamplerConfig { method, steps: 20, guidance: 5.0, seed: 1 };
        let zs = sample(&model, &small, &conds, &sc, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        println!("{method:?}: {} latents of shape {:?}", zs.len(), zs[0].shape());
    }
}
