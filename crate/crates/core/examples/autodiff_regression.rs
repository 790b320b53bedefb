//! Fit a two-layer GELU network to a sine curve with the tape autodiff and AdamW.

use latentmol::numerics::nn::Linear;
use latentmol::numerics::{clip_grad_norm, cosine_lr, AdamW, Binding, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "l1", 1, 32, true, &mut rng);
    let l2 = Linear::new(&mut store, "l2", 32, 1, true, &mut rng);
    let xs: Vec<f64> = (0..64).map(|i| -3.0 + 6.0 * i as f64 / 63.0).collect();
    let x = Tensor::new(&[64, 1], xs.clone()).unwrap();
    let y = Tensor::new(&[64, 1], xs.iter().map(|v| v.sin()).collect()).unwrap();

    let mut opt = AdamW::new(&store, 0.0);
    let steps = 1500;
    for step in 0..=steps {
        let mut g = Graph::new();
        let mut p = Binding::new(&store, true);
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let h = l1.forward(&mut g, &mut p, xv).unwrap();
        let h = g.gelu(h);
        let out = l2.forward(&mut g, &mut p, h).unwrap();
        let loss = g.mse(out, yv).unwrap();
        if step % 300 == 0 {
            println!("step={step} mse={:.6}", g.value(loss).item().unwrap());
        }
        let mut grads = g.backward(loss).unwrap();
        let mut pg = p.grads(&mut grads);
        clip_grad_norm(&mut pg, 1.0);
        opt.step(&mut store, &pg, cosine_lr(step, steps, 1e-2, 1e-4)).unwrap();
    }
}
