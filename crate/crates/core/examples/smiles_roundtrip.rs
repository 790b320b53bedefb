//! Parse, validate, canonicalize and re-spell SMILES.

use latentmol::smiles::{self, canonicalize, flip_stereocenters, is_isomorphic, parse_valid, randomize_with};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for s in ["OCC", "c1ccccc1O", "C[C@H](N)C(=O)O", "CC(=O)Nc1ccc(O)cc1", "C1CC1(F)F"] {
        let g = parse_valid(s).expect("valid input");
        let canon = canonicalize(&g).unwrap();
        println!("{s:24} canonical={canon} atoms={} rings={}", g.atom_count(), g.ring_count());
        for _ in 0..3 {
            let r = randomize_with(&g, &mut rng);
            let back = parse_valid(&r).unwrap();
            assert!(is_isomorphic(&g, &back));
            assert_eq!(canonicalize(&back).unwrap(), canon);
            println!("    spelling {r}");
        }
        for v in flip_stereocenters(&g) {
            println!("    stereo variant {}", canonicalize(&v).unwrap());
        }
    }
    for bad in ["C1CC", "C(C", "C=N#C", "Xe"] {
        println!("{bad:24} {}", smiles::parse_valid(bad).unwrap_err());
    }
}
