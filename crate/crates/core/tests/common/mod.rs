//! Finite-difference checks of every trainable component at toy widths.

#![allow(dead_code)]

use latentmol::codec::{CodecConfig, LatentCodec};
use latentmol::diffusion::{DiffusionModel, DitConfig};
use latentmol::encoder::{contrastive_loss_var, EncoderConfig, MemoryQueue, MolEncoder, ProjectedFeature};
use latentmol::numerics::gradcheck::check_param_grads;
use latentmol::numerics::nn::Block;
use latentmol::numerics::{AttnShape, Binding, Graph, ParamStore, Tensor, Var};
use latentmol::tokenizer::{train_bpe, TextMode, TokenSequence, Vocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;
const H: f64 = 1e-5;
const PER_TENSOR: usize = 5;

type Grads = Vec<Option<Vec<f64>>>;
type Res<T> = Result<T, Box<dyn std::error::Error>>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Moves parameters off their initial values so zero-initialized layers
/// (gates, output heads) carry gradient through the whole network.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for t in store.tensors_mut() {
        let n = Tensor::randn(t.shape(), 0.3, &mut r);
        t.data_mut().iter_mut().zip(n.data()).for_each(|(x, d)| *x += d);
    }
}

/// `sum(out * weights)`, so every output entry gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Res<Var> {
    let w = g.constant(Tensor::randn(g.shape(out), 1.0, &mut rng(seed)));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn finish(g: &Graph, p: &Binding, loss: Var, grads: bool) -> Res<(f64, Grads)> {
    let v = g.value(loss).item()?;
    if !grads {
        return Ok((v, Vec::new()));
    }
    let mut gr = g.backward(loss)?;
    Ok((v, p.grads(&mut gr)))
}

fn smiles_vocab() -> Vocab {
    train_bpe(&["CCO", "c1ccccc1O", "CC(=O)N", "C[C@H](N)C(=O)O", "OCCN"], 40, TextMode::Smiles).unwrap()
}

pub fn encoder_block() -> f64 {
    let (b, l, d) = (2, 4, 8);
    let mut store = ParamStore::new();
    let block = Block::new(&mut store, "blk", d, 2, None, &mut rng(1));
    jitter(&mut store, 2);
    let x = Tensor::randn(&[b * l, d], 1.0, &mut rng(3));
    let mask = [true, true, true, false, true, true, false, false];
    check_param_grads(&store, PER_TENSOR, H, |s, grads| {
        let mut g = Graph::new();
        let mut p = Binding::new(s, grads);
        let xv = g.constant(x.clone());
        let shape = AttnShape { batch: b, heads: 2, lq: l, lk: l, causal: false, key_mask: Some(&mask) };
        let out = block.forward(&mut g, &mut p, xv, shape, None)?;
        let loss = weighted_sum(&mut g, out, 4)?;
        finish(&g, &p, loss, grads)
    })
    .unwrap()
}

pub fn decoder_block() -> f64 {
    let (b, l, d, lc, dc) = (2, 4, 8, 3, 6);
    let mut store = ParamStore::new();
    let block = Block::new(&mut store, "blk", d, 2, Some(dc), &mut rng(5));
    jitter(&mut store, 6);
    let x = Tensor::randn(&[b * l, d], 1.0, &mut rng(7));
    let ctx = Tensor::randn(&[b * lc, dc], 1.0, &mut rng(8));
    check_param_grads(&store, PER_TENSOR, H, |s, grads| {
        let mut g = Graph::new();
        let mut p = Binding::new(s, grads);
        let xv = g.constant(x.clone());
        let cv = g.constant(ctx.clone());
        let own = AttnShape { batch: b, heads: 2, lq: l, lk: l, causal: true, key_mask: None };
        let cross = AttnShape { batch: b, heads: 2, lq: l, lk: lc, causal: false, key_mask: None };
        let out = block.forward(&mut g, &mut p, xv, own, Some((cv, cross)))?;
        let loss = weighted_sum(&mut g, out, 9)?;
        finish(&g, &p, loss, grads)
    })
    .unwrap()
}

fn tiny_dit(blocks: usize) -> (DiffusionModel, Vocab) {
    let caps = ["has 1 ring", "contains a nitrogen atom", "has a hydroxyl group; has no rings"];
    let vocab = train_bpe(&caps, 120, TextMode::Words).unwrap();
    let cfg = DitConfig {
        latent_len: 3,
        latent_dim: 2,
        width: 8,
        blocks,
        heads: 2,
        caption_vocab: vocab.len(),
        caption_len: 24,
        caption_layers: 1,
        null_len: 2,
    };
    let mut m = DiffusionModel::new(cfg, &mut rng(10)).unwrap();
    jitter(&mut m.dit, 11);
    jitter(&mut m.captions, 12);
    (m, vocab)
}

/// One adaptive-norm block with a fixed caption context.
pub fn dit_block() -> f64 {
    let (m, _) = tiny_dit(1);
    let (b, lc) = (2, 3);
    let z = Tensor::randn(&[b * 3, 2], 1.0, &mut rng(13));
    let ctx = Tensor::randn(&[b * lc, 8], 1.0, &mut rng(14));
    let mask = [true, true, false, true, true, true];
    check_param_grads(&m.dit, PER_TENSOR, H, |s, grads| {
        let mut g = Graph::new();
        let mut p = Binding::new(s, grads);
        let zv = g.constant(z.clone());
        let cv = g.constant(ctx.clone());
        let out = m.eps_var(&mut g, &mut p, zv, &[7, 30], cv, &mask, lc)?;
        let loss = weighted_sum(&mut g, out, 15)?;
        finish(&g, &p, loss, grads)
    })
    .unwrap()
}

pub fn contrastive_loss() -> f64 {
    let vocab = smiles_vocab();
    let cfg = EncoderConfig { vocab: vocab.len(), len: 20, d_enc: 8, layers: 1, heads: 2, proj_dim: 6, tau: 0.1 };
    let mut enc = MolEncoder::new(cfg, &mut rng(16)).unwrap();
    jitter(&mut enc.store, 17);
    let seqs = |xs: &[&str]| xs.iter().map(|s| vocab.encode(s, 20).unwrap()).collect::<Vec<TokenSequence>>();
    let (a, b, hard) = (seqs(&["CCO", "OCCN"]), seqs(&["OCC", "NCCO"]), seqs(&["C[C@@H](N)C(=O)O"]));
    let mut queue = MemoryQueue::new(4);
    for (i, m) in [0usize, 3, 1].into_iter().enumerate() {
        let v = Tensor::randn(&[6], 1.0, &mut rng(20 + i as u64)).into_data();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        queue.push(m, ProjectedFeature(v.iter().map(|x| x / n).collect()));
    }
    check_param_grads(&enc.store, PER_TENSOR, H, |s, grads| {
        let mut g = Graph::new();
        let mut p = Binding::new(s, grads);
        let project = |g: &mut Graph, p: &mut Binding, x: &[TokenSequence]| {
            let f = enc.forward(g, p, x)?;
            enc.project_var(g, p, f, x.len())
        };
        let va = project(&mut g, &mut p, &a)?;
        let vb = project(&mut g, &mut p, &b)?;
        let vh = project(&mut g, &mut p, &hard)?;
        let loss = contrastive_loss_var(&mut g, va, vb, Some(vh), &queue, Some(&[0, 1]), 0.1)?;
        finish(&g, &p, loss, grads)
    })
    .unwrap()
}

pub fn decoder_loss() -> f64 {
    let vocab = smiles_vocab();
    let cfg = CodecConfig {
        vocab: vocab.len(),
        len: 10,
        d_enc: 8,
        d_z: 4,
        compress: true,
        d_model: 8,
        layers: 1,
        heads: 2,
    };
    let mut codec = LatentCodec::new(cfg, &mut rng(30));
    jitter(&mut codec.store, 31);
    let targets: Vec<TokenSequence> = ["CCO", "CC(=O)N"].iter().map(|s| vocab.encode(s, 10).unwrap()).collect();
    let z = Tensor::randn(&[2 * 10, 4], 1.0, &mut rng(32));
    check_param_grads(&codec.store, PER_TENSOR, H, |s, grads| {
        let mut g = Graph::new();
        let mut p = Binding::new(s, grads);
        let zv = g.constant(z.clone());
        let loss = codec.decoder_loss_var(&mut g, &mut p, zv, &targets)?;
        finish(&g, &p, loss, grads)
    })
    .unwrap()
}

/// Noise-prediction loss with a mix of real and null captions, through both
/// the denoiser and the caption encoder.
pub fn diffusion_loss() -> f64 {
    let (m, vocab) = tiny_dit(2);
    let c1 = vocab.encode("has 1 ring", 24).unwrap();
    let c2 = vocab.encode("has a hydroxyl group; has no rings", 24).unwrap();
    let caps = [Some(&c1), None, Some(&c2)];
    let zt: Vec<Tensor> = (0..3).map(|i| Tensor::randn(&[3, 2], 1.0, &mut rng(40 + i))).collect();
    let eps: Vec<Tensor> = (0..3).map(|i| Tensor::randn(&[3, 2], 1.0, &mut rng(50 + i))).collect();
    let ts = [4, 20, 49];
    let run = |dit: &ParamStore, caps_store: &ParamStore, wrt_dit: bool, grads: bool| {
        let mut g = Graph::new();
        let mut p = Binding::new(dit, grads && wrt_dit);
        let mut pc = Binding::new(caps_store, grads && !wrt_dit);
        let loss = m.loss_var(&mut g, &mut p, &mut pc, &zt, &ts, &eps, &caps)?;
        finish(&g, if wrt_dit { &p } else { &pc }, loss, grads)
    };
    let a = check_param_grads(&m.dit, PER_TENSOR, H, |s, gr| run(s, &m.captions, true, gr)).unwrap();
    let b = check_param_grads(&m.captions, PER_TENSOR, H, |s, gr| run(&m.dit, s, false, gr)).unwrap();
    a.max(b)
}

pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("encoder block", encoder_block()),
        ("decoder block", decoder_block()),
        ("DiT block", dit_block()),
        ("contrastive loss", contrastive_loss()),
        ("decoder loss", decoder_loss()),
        ("diffusion loss", diffusion_loss()),
    ]
}
