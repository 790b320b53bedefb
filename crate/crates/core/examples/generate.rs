//! Caption-conditioned generation with classifier-free guidance.
//! Usage: generate [CHECKPOINT_DIR [CONFIG]]

use latentmol::pipeline::corpus::caption_satisfied;
use latentmol::smiles::parse_valid;

mod common;

fn main() {
    let (m, _) = common::models();
    let prompts = ["contains 2 oxygen atoms", "has a hydroxyl group", "contains a nitrogen atom; has 1 ring"];
    for guidance in [1.0, 5.0] {
        println!("guidance={guidance}");
        for p in prompts {
            let batch = vec![p.to_string(); 8];
            let out = m.generate(&batch, guidance, 50, 11).unwrap();
            let ok = out.iter().filter(|s| parse_valid(s).map(|g| caption_satisfied(p, &g)).unwrap_or(false)).count();
            println!("  {p:40} satisfied {ok}/8  {:?}", &out[..3]);
        }
    }
}
