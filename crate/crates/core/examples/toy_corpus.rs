//! Generate the templated caption corpus and check each caption against its molecule.

use latentmol::pipeline::corpus::{caption_satisfied, facts_of, make_toy_corpus, subsample_caption};
use latentmol::smiles::parse_valid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let pairs = make_toy_corpus(500, 42);
    let labeled = pairs.iter().filter(|p| p.caption.is_some()).count();
    println!("pairs={} labeled={labeled}", pairs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for p in pairs.iter().take(8) {
        let g = parse_valid(&p.smiles).unwrap();
        match &p.caption {
            Some(c) => {
                assert!(caption_satisfied(c, &g));
                println!("{:22} {c}", p.smiles);
                println!("{:22} subsampled: {}", "", subsample_caption(c, 0.6, &mut rng));
            }
            None => println!("{:22} (unlabeled; facts {:?})", p.smiles, facts_of(&g)),
        }
    }
}
