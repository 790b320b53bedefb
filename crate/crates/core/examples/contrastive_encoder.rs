//! Contrastive pretraining of the SMILES encoder, then a spelling-invariance probe:
//! does a random spelling land closest to its own canonical spelling?

use latentmol::encoder::{encode_fitting, pretrain, EncoderConfig, EncoderTrainConfig, MolEncoder};
use latentmol::pipeline::corpus::make_toy_corpus;
use latentmol::smiles::{canonicalize, parse_valid, randomize_with};
use latentmol::tokenizer::{train_bpe, TextMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pairs = make_toy_corpus(200, 5);
    let mols: Vec<_> = pairs.iter().map(|p| parse_valid(&p.smiles).unwrap()).collect();
    let smiles: Vec<&str> = pairs.iter().map(|p| p.smiles.as_str()).collect();
    let vocab = train_bpe(&smiles, 80, TextMode::Smiles).unwrap();
    let len = 24;
    let cfg = EncoderConfig { vocab: vocab.len(), len, d_enc: 32, layers: 2, heads: 4, proj_dim: 32, tau: 0.07 };
    let mut enc = MolEncoder::new(cfg, &mut rng).unwrap();

    let probe = |enc: &MolEncoder, rng: &mut ChaCha8Rng| {
        let n = 100;
        let embed = |s: &str, rng: &mut ChaCha8Rng| {
            let seq = encode_fitting(&vocab, s, len, rng).unwrap();
            enc.project(&enc.encode(&seq).unwrap()).unwrap()
        };
        let a: Vec<_> = mols[..n].iter().map(|g| embed(&canonicalize(g).unwrap(), rng)).collect();
        let b: Vec<_> = mols[..n].iter().map(|g| embed(&randomize_with(g, rng), rng)).collect();
        let hits = (0..n).filter(|&i| (0..n).all(|j| j == i || a[i].dot(&b[i]) > a[i].dot(&b[j]))).count();
        hits as f64 / n as f64
    };
    println!("top-1 before pretraining: {:.2}", probe(&enc, &mut rng));
    let tc = EncoderTrainConfig { steps: 200, batch: 32, lr: 1e-3, lr_min: 1e-4, weight_decay: 0.01, queue: 128, clip: 1.0 };
    let losses = pretrain(&mut enc, &mols, &vocab, &tc, &mut rng).unwrap();
    println!("loss {:.3} -> {:.3}", losses[0], losses[losses.len() - 1]);
    println!("top-1 after pretraining: {:.2}", probe(&enc, &mut rng));
}
