//! Fingerprint similarity and text-generation metrics on a few pairs.

use latentmol::metrics::{bleu, char_tokens, evaluate, levenshtein, morgan_fingerprint, tanimoto};
use latentmol::smiles::parse_valid;

fn main() {
    let pairs = [("CCO", "OCC"), ("CCN", "CCO"), ("c1ccccc1", "c1ccccc1C"), ("C(C", "CC")];
    for (a, b) in pairs {
        let sim = match (parse_valid(a), parse_valid(b)) {
            (Ok(x), Ok(y)) => {
                let t = tanimoto(&morgan_fingerprint(&x, 2, 2048).unwrap(), &morgan_fingerprint(&y, 2, 2048).unwrap());
                format!("{:.3}", t.unwrap())
            }
            _ => "n/a".into(),
        };
        let bl = bleu(&char_tokens(a), &char_tokens(b));
        println!("{a:10} {b:10} tanimoto={sim} levenshtein={} bleu={bl:.3}", levenshtein(a, b));
    }
    let report = evaluate(&pairs, &char_tokens).unwrap();
    print!("{}", report.to_key_values());
}
