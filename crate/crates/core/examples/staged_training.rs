//! Runs the three training stages into a checkpoint directory, then reloads
//! the models from disk. Usage: staged_training [DIR]

use latentmol::pipeline::{reconstruction, run_stage, Dataset, Models, RunConfig, Stage};

#[path = "common/mod.rs"]
mod common;

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "run-quick".into());
    let cfg = RunConfig::parse(common::QUICK).unwrap();
    let data = Dataset::toy(&cfg);
    std::fs::create_dir_all(&dir).unwrap();
    for stage in [Stage::PretrainEncoder, Stage::TrainDecoder, Stage::TrainDiffusion] {
        let r = run_stage(stage, &cfg, &data, dir.as_ref()).unwrap();
        println!("stage={} final_loss={:.4} seconds={:.1} checkpoint={}", r.stage, r.final_loss(), r.seconds, r.path.display());
    }
    let m = Models::load(&cfg, dir.as_ref()).unwrap();
    println!("reconstruction_train={:.3}", reconstruction(&m, &data.train_graphs().unwrap()).unwrap());
    std::fs::write(format!("{dir}/config.txt"), cfg.to_text()).unwrap();
    println!("reuse with: cargo run --release --example generate -- {dir} {dir}/config.txt");
}
