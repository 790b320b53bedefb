//! Caption-driven editing of existing molecules with delta denoising score updates.
//! Usage: edit [CHECKPOINT_DIR [CONFIG]]

use latentmol::metrics::{morgan_fingerprint, tanimoto};
use latentmol::pipeline::corpus::caption_satisfied;
use latentmol::smiles::parse_valid;

mod common;

fn main() {
    let (m, data) = common::models();
    let target = "contains a nitrogen atom";
    let sources: Vec<(String, String)> = data
        .holdout
        .iter()
        .filter(|p| !caption_satisfied(target, &parse_valid(&p.smiles).unwrap()))
        .filter_map(|p| Some((p.smiles.clone(), p.caption.clone()?)))
        .take(6)
        .collect();
    let edited = m.edit(&sources, target, &m.edit_config(3)).unwrap();
    for ((src, cap), out) in sources.iter().zip(&edited) {
        let verdict = match parse_valid(out) {
            Ok(g) => {
                let sim = tanimoto(
                    &morgan_fingerprint(&parse_valid(src).unwrap(), 2, 2048).unwrap(),
                    &morgan_fingerprint(&g, 2, 2048).unwrap(),
                )
                .unwrap();
                format!("satisfied={} tanimoto={sim:.2}", caption_satisfied(target, &g))
            }
            Err(_) => "invalid".into(),
        };
        println!("{src:18} -> {out:22} {verdict}  (source: {cap})");
    }
}
