//! Train SMILES and caption vocabularies on the toy corpus.

use latentmol::pipeline::corpus::make_toy_corpus;
use latentmol::tokenizer::{train_bpe, TextMode};

fn main() {
    let pairs = make_toy_corpus(300, 1);
    let smiles: Vec<&str> = pairs.iter().map(|p| p.smiles.as_str()).collect();
    let captions: Vec<&str> = pairs.iter().filter_map(|p| p.caption.as_deref()).collect();

    let sv = train_bpe(&smiles, 96, TextMode::Smiles).unwrap();
    let cv = train_bpe(&captions, 128, TextMode::Words).unwrap();
    println!("smiles_vocab={} merges={}", sv.len(), sv.merges().len());
    println!("caption_vocab={} merges={}", cv.len(), cv.merges().len());

    let s = smiles[3];
    let seq = sv.encode(s, 24).unwrap();
    println!("{s} -> {:?}", sv.tokenize(s));
    println!("round trip: {}", sv.decode(&seq).unwrap());
    let c = captions[3];
    println!("{c:?} -> {} tokens {:?}", cv.tokenize(c).len(), cv.tokenize(c));
}
