use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use latentmol::pipeline::corpus::make_toy_corpus;
use latentmol::pipeline::{
    benchmark, load_pairs, reconstruction, run_ablation, run_stage, train, write_pairs, Ablation, Dataset, Models,
    RunConfig, Stage,
};

#[derive(Args, Clone)]
struct Common {
    /// key = value run configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `key=value` config overrides, applied after --config.
    #[arg(long = "set", global = true)]
    set: Vec<String>,
    /// Paired JSONL corpus; the toy corpus is generated when absent.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Checkpoint directory (training and inference) or output file (make-corpus).
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Sampling {
    /// Classifier-free guidance scale; 5.0 for generate, 3.5 for eval.
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long, default_value_t = 100)]
    steps: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Contrastive pretraining of the SMILES encoder.
    PretrainEncoder,
    /// Compressor and decoder on the frozen encoder.
    TrainDecoder,
    /// Caption-conditioned denoiser on standardized latents.
    TrainDiffusion,
    /// Sample molecules for caption prompts.
    Generate {
        #[arg(long, required = true)]
        prompt: Vec<String>,
        /// Samples per prompt.
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Rank candidate captions for a molecule.
    Retrieve {
        #[arg(long)]
        molecule: String,
        #[arg(long, required = true)]
        candidates: Vec<String>,
        /// Noise draws per candidate.
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
    /// Edit a molecule toward a target caption.
    Edit {
        #[arg(long)]
        molecule: String,
        /// Caption describing the source molecule.
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
    },
    /// Text-to-molecule benchmark on the held-out split.
    Eval {
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and benchmark an ablated variant.
    Ablate {
        /// no-compression or no-contrastive
        #[arg(long)]
        variant: Ablation,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Write the toy caption corpus as JSONL.
    MakeCorpus {
        /// Number of pairs; defaults to corpus_size + holdout from the config.
        #[arg(long)]
        n: Option<usize>,
    },
}

#[derive(Parser)]
#[command(name = "latentmol", version, about = "Text-conditioned latent diffusion over SMILES")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

type Failure = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    let root = match Cli::try_parse() {
        Ok(r) => r,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match config(&root.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(root.cmd, &root.common, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn config(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("--set expects key=value, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(c: &Common, cfg: &RunConfig) -> Result<Dataset, Failure> {
    Ok(match &c.data {
        Some(p) => Dataset::split(load_pairs(p)?, cfg.holdout),
        None => Dataset::toy(cfg),
    })
}

fn run(cmd: Cmd, c: &Common, cfg: RunConfig) -> Result<(), Failure> {
    match cmd {
        Cmd::PretrainEncoder => stage(Stage::PretrainEncoder, c, &cfg),
        Cmd::TrainDecoder => stage(Stage::TrainDecoder, c, &cfg),
        Cmd::TrainDiffusion => stage(Stage::TrainDiffusion, c, &cfg),
        Cmd::Generate { prompt, n, sampling, csv } => {
            let m = Models::load(&cfg, &c.out)?;
            let prompts: Vec<String> = prompt.iter().flat_map(|p| std::iter::repeat_n(p.clone(), n)).collect();
            let guidance = sampling.guidance.unwrap_or(cfg.guidance);
            let out = m.generate(&prompts, guidance, sampling.steps, cfg.seed)?;
            println!("samples={}", out.len());
            println!("guidance={guidance}");
            for (i, (p, s)) in prompts.iter().zip(&out).enumerate() {
                println!("sample.{i}={s}\t{p}");
            }
            if let Some(path) = csv {
                write_csv(&path, &["prompt", "smiles"], prompts.iter().zip(&out).map(|(p, s)| vec![p.clone(), s.clone()]))?;
            }
            Ok(())
        }
        Cmd::Retrieve { molecule, candidates, n } => {
            let m = Models::load(&cfg, &c.out)?;
            let (best, scores) = m.retrieve(&molecule, &candidates, n, cfg.seed)?;
            println!("best={best}");
            println!("caption={}", candidates[best]);
            for (i, s) in scores.iter().enumerate() {
                println!("score.{i}={s:.6}");
            }
            Ok(())
        }
        Cmd::Edit { molecule, source, target } => {
            let m = Models::load(&cfg, &c.out)?;
            let out = m.edit(&[(molecule, source)], &target, &m.edit_config(cfg.seed))?;
            println!("edited={}", out[0]);
            Ok(())
        }
        Cmd::Eval { sampling, csv } => {
            let m = Models::load(&cfg, &c.out)?;
            let data = dataset(c, &cfg)?;
            let guidance = sampling.guidance.unwrap_or(cfg.bench_guidance);
            let (report, out) = benchmark(&m, &data.holdout, guidance, sampling.steps, cfg.seed)?;
            print!("{}", report.to_key_values());
            println!("reconstruction_train={:.4}", reconstruction(&m, &data.train_graphs()?)?);
            println!("reconstruction_holdout={:.4}", reconstruction(&m, &train::graphs(&data.holdout)?)?);
            if let Some(path) = csv {
                let refs = data.holdout.iter().filter(|p| p.caption.is_some());
                let rows = refs.zip(&out).map(|(r, s)| {
                    vec![r.caption.clone().unwrap_or_default(), r.smiles.clone(), s.clone()]
                });
                write_csv(&path, &["caption", "reference", "generated"], rows)?;
            }
            Ok(())
        }
        Cmd::Ablate { variant, sampling } => {
            let mut cfg = cfg;
            cfg.bench_guidance = sampling.guidance.unwrap_or(cfg.bench_guidance);
            cfg.sample_steps = sampling.steps;
            let data = dataset(c, &cfg)?;
            let base = match variant {
                Ablation::NoCompression if c.out.join(Stage::PretrainEncoder.file()).exists() => {
                    Some(Models::load(&cfg, &c.out)?)
                }
                _ => None,
            };
            let (_, report) = run_ablation(variant, &cfg, &data, base.as_ref())?;
            println!("variant={}", variant.name());
            print!("{}", report.to_key_values());
            Ok(())
        }
        Cmd::MakeCorpus { n } => {
            let n = n.unwrap_or(cfg.corpus_size + cfg.holdout);
            let pairs = make_toy_corpus(n, cfg.seed);
            write_pairs(&c.out, &pairs)?;
            println!("pairs={}", pairs.len());
            println!("path={}", c.out.display());
            Ok(())
        }
    }
}

fn stage(s: Stage, c: &Common, cfg: &RunConfig) -> Result<(), Failure> {
    let data = dataset(c, cfg)?;
    std::fs::create_dir_all(&c.out)?;
    let r = run_stage(s, cfg, &data, &c.out)?;
    println!("stage={}", r.stage);
    println!("checkpoint={}", r.path.display());
    println!("steps={}", r.losses.len());
    println!("final_loss={:.6}", r.final_loss());
    println!("seconds={:.1}", r.seconds);
    Ok(())
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}
