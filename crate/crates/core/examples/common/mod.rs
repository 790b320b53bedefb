//! Loads models from a checkpoint directory given as the first argument, or
//! trains a small configuration in memory.

#![allow(dead_code)]

use latentmol::pipeline::{train_all, Dataset, Models, RunConfig};

pub const QUICK: &str = "\
corpus_size = 200
holdout = 40
enc_steps = 150
codec_steps = 600
spellings = 0
dit_blocks = 2
diff_steps = 1500
";

pub fn models() -> (Models, Dataset) {
    match std::env::args().nth(1) {
        Some(dir) => {
            let cfg = match std::env::args().nth(2) {
                Some(path) => RunConfig::load(path.as_ref()).expect("config"),
                None => RunConfig::default(),
            };
            let data = Dataset::toy(&cfg);
            (Models::load(&cfg, dir.as_ref()).expect("checkpoints"), data)
        }
        None => {
            let cfg = RunConfig::parse(QUICK).expect("config");
            let data = Dataset::toy(&cfg);
            eprintln!("no checkpoint dir given; training a small model ...");
            (train_all(&cfg, &data).expect("training"), data)
        }
    }
}
