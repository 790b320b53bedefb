//! Zero-shot caption retrieval: rank candidate captions by the denoising
//! error each one induces on the query molecule's latent.
//! Usage: retrieve [CHECKPOINT_DIR [CONFIG]]

mod common;

fn main() {
    let (m, data) = common::models();
    let labeled: Vec<_> = data.holdout.iter().filter(|p| p.caption.is_some()).take(4).collect();
    let cands: Vec<String> = labeled.iter().map(|p| p.caption.clone().unwrap()).collect();
    for (i, p) in labeled.iter().enumerate() {
        let (best, scores) = m.retrieve(&p.smiles, &cands, 10, 1).unwrap();
        let shown: Vec<String> = scores.iter().map(|s| format!("{s:.3}")).collect();
        println!("{:20} truth={i} picked={best} scores=[{}]", p.smiles, shown.join(", "));
    }
}
