//! Staged training, checkpoint persistence, ablations and evaluation helpers.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::checkpoint::{Checkpoint, CheckpointError};
use super::config::{ConfigError, RunConfig, ARCHITECTURE_KEYS};
use super::corpus::{caption_satisfied, make_toy_corpus, subsample_caption};
use super::{DataError, PairRecord};
use crate::applications::{dds_edit_batch, retrieve, AppError, EditConfig, EditJob, RetrievalConfig};
use crate::codec::{reconstruction_rate, train_codec, CodecError, DecodeMode, LatentCodec};
use crate::diffusion::{
    make_schedule, sample, CaptionEmbedding, DiffusionError, DiffusionModel, DiffusionTrainer, NoiseSchedule,
    TrainItem,
};
use crate::encoder::{pretrain, EncoderError, MolEncoder};
use crate::metrics::{char_tokens, evaluate, morgan_fingerprint, tanimoto, MetricReport, MetricsError};
use crate::numerics::Tensor;
use crate::smiles::{self, MolGraph, SmilesError};
use crate::tokenizer::{train_bpe, TextMode, TokenizerError, Vocab};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage} needs {needs}; run it first")]
    MissingPrerequisite { stage: String, needs: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    App(#[from] AppError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Smiles(#[from] SmilesError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

type Res<T> = Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    PretrainEncoder,
    TrainDecoder,
    TrainDiffusion,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainEncoder => "pretrain-encoder",
            Stage::TrainDecoder => "train-decoder",
            Stage::TrainDiffusion => "train-diffusion",
        }
    }

    pub fn file(self) -> &'static str {
        match self {
            Stage::PretrainEncoder => "encoder.ckpt",
            Stage::TrainDecoder => "codec.ckpt",
            Stage::TrainDiffusion => "diffusion.ckpt",
        }
    }

    /// Architecture keys this stage's checkpoint must agree on.
    pub fn architecture_keys(self) -> &'static [&'static str] {
        let n = match self {
            Stage::PretrainEncoder => 8,
            Stage::TrainDecoder => 13,
            Stage::TrainDiffusion => ARCHITECTURE_KEYS.len(),
        };
        &ARCHITECTURE_KEYS[..n]
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;
    fn from_str(s: &str) -> Res<Stage> {
        [Stage::PretrainEncoder, Stage::TrainDecoder, Stage::TrainDiffusion]
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::Invalid(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    NoContrastive,
    NoCompression,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoContrastive => "no-contrastive",
            Ablation::NoCompression => "no-compression",
        }
    }
}

impl FromStr for Ablation {
    type Err = PipelineError;
    fn from_str(s: &str) -> Res<Ablation> {
        match s {
            "no-contrastive" => Ok(Ablation::NoContrastive),
            "no-compression" => Ok(Ablation::NoCompression),
            _ => Err(PipelineError::Invalid(format!("unknown ablation {s:?}"))),
        }
    }
}

/// Independent deterministic stream per purpose.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<PairRecord>,
    pub holdout: Vec<PairRecord>,
}

impl Dataset {
    /// Toy corpus of `corpus_size + holdout` molecules; the tail is held out.
    pub fn toy(cfg: &RunConfig) -> Dataset {
        Dataset::split(make_toy_corpus(cfg.corpus_size + cfg.holdout, cfg.seed), cfg.holdout)
    }

    pub fn split(mut records: Vec<PairRecord>, holdout: usize) -> Dataset {
        let cut = records.len().saturating_sub(holdout);
        let held = records.split_off(cut);
        Dataset { train: records, holdout: held }
    }

    pub fn train_graphs(&self) -> Res<Vec<MolGraph>> {
        graphs(&self.train)
    }
}

pub fn graphs(records: &[PairRecord]) -> Res<Vec<MolGraph>> {
    Ok(records.iter().map(|r| smiles::parse_valid(&r.smiles)).collect::<Result<_, _>>()?)
}

/// Everything produced so far by the staged pipeline.
#[derive(Debug, Clone)]
pub struct Models {
    pub cfg: RunConfig,
    pub smiles_vocab: Vocab,
    pub caption_vocab: Vocab,
    pub encoder: MolEncoder,
    pub codec: Option<LatentCodec>,
    pub diffusion: Option<DiffusionModel>,
    pub schedule: NoiseSchedule,
}

/// SMILES vocabulary over canonical plus one random spelling per molecule,
/// caption vocabulary over the labeled captions.
pub fn build_vocabs(cfg: &RunConfig, data: &Dataset) -> Res<(Vocab, Vocab)> {
    let mut rng = stream_rng(cfg.seed, 10);
    let mut texts = Vec::with_capacity(2 * data.train.len());
    for g in data.train_graphs()? {
        texts.push(smiles::canonicalize(&g)?);
        texts.push(smiles::randomize_with(&g, &mut rng));
    }
    let sv = train_bpe(&texts, cfg.smiles_vocab, TextMode::Smiles)?;
    let caps: Vec<&str> = data.train.iter().filter_map(|r| r.caption.as_deref()).collect();
    let cv = if caps.is_empty() {
        train_bpe(&["none"], cfg.caption_vocab, TextMode::Words)?
    } else {
        train_bpe(&caps, cfg.caption_vocab, TextMode::Words)?
    };
    Ok((sv, cv))
}

impl Models {
    /// Fresh vocabularies and an untrained encoder.
    pub fn init(cfg: &RunConfig, data: &Dataset) -> Res<Models> {
        cfg.validate()?;
        let (smiles_vocab, caption_vocab) = build_vocabs(cfg, data)?;
        let mut rng = stream_rng(cfg.seed, 11);
        let encoder = MolEncoder::new(cfg.encoder_config(smiles_vocab.len()), &mut rng)?;
        let schedule = make_schedule(cfg.diffusion_t, cfg.beta_start, cfg.beta_end)?;
        Ok(Models { cfg: cfg.clone(), smiles_vocab, caption_vocab, encoder, codec: None, diffusion: None, schedule })
    }

    fn codec(&self) -> Res<&LatentCodec> {
        self.codec.as_ref().ok_or_else(|| PipelineError::MissingPrerequisite {
            stage: "inference".into(),
            needs: Stage::TrainDecoder.name().into(),
        })
    }

    fn dit(&self) -> Res<&DiffusionModel> {
        self.diffusion.as_ref().ok_or_else(|| PipelineError::MissingPrerequisite {
            stage: "inference".into(),
            needs: Stage::TrainDiffusion.name().into(),
        })
    }

    /// Contrastive pretraining. Returns per-step losses.
    pub fn pretrain_encoder(&mut self, data: &Dataset) -> Res<Vec<f64>> {
        let mut rng = stream_rng(self.cfg.seed, Stage::PretrainEncoder.stream());
        let mols = data.train_graphs()?;
        Ok(pretrain(&mut self.encoder, &mols, &self.smiles_vocab, &self.cfg.encoder_train_config(), &mut rng)?)
    }

    /// Compressor + decoder on a frozen encoder, or jointly with the encoder
    /// when `joint` (reconstruction-only encoder training).
    pub fn train_decoder(&mut self, data: &Dataset, joint: bool) -> Res<Vec<f64>> {
        let mut rng = stream_rng(self.cfg.seed, Stage::TrainDecoder.stream());
        let mut codec = LatentCodec::new(self.cfg.codec_config(self.smiles_vocab.len()), &mut rng);
        let mols = data.train_graphs()?;
        let losses = train_codec(
            &mut codec,
            Some(&mut self.encoder),
            joint,
            &mols,
            &self.smiles_vocab,
            &self.cfg.codec_train_config(),
            &mut rng,
        )?;
        self.codec = Some(codec);
        self.diffusion = None;
        Ok(losses)
    }

    /// Standardized canonical latents.
    pub fn latents(&self, mols: &[MolGraph]) -> Res<Vec<Tensor>> {
        let codec = self.codec()?;
        let mut rng = stream_rng(self.cfg.seed, 12);
        let raw = codec.encode_molecules(&self.encoder, &self.smiles_vocab, mols, &mut rng)?;
        Ok(raw.iter().map(|z| codec.standardize(z)).collect())
    }

    pub fn latent_of(&self, smiles_text: &str) -> Res<Tensor> {
        Ok(self.latents(&[smiles::parse_valid(smiles_text)?])?.remove(0))
    }

    /// Greedy decoding of standardized latents.
    pub fn decode(&self, zs: &[Tensor]) -> Res<Vec<String>> {
        let codec = self.codec()?;
        let raw: Vec<Tensor> = zs.iter().map(|z| codec.destandardize(z)).collect();
        let mut rng = stream_rng(self.cfg.seed, 13);
        let mut out = Vec::with_capacity(zs.len());
        for chunk in raw.chunks(64) {
            out.extend(codec.generate_batch(chunk, &self.smiles_vocab, DecodeMode::Greedy, &mut rng)?);
        }
        Ok(out)
    }

    /// Diffusion training on standardized latents of the training set.
    /// Captions are clause-subsampled afresh for every draw.
    pub fn train_diffusion(&mut self, data: &Dataset) -> Res<Vec<f64>> {
        let cfg = self.cfg.clone();
        let mut rng = stream_rng(cfg.seed, Stage::TrainDiffusion.stream());
        // a loaded diffusion checkpoint may carry a different schedule
        self.schedule = make_schedule(cfg.diffusion_t, cfg.beta_start, cfg.beta_end)?;
        let mols = data.train_graphs()?;
        let latents = self.latents(&mols)?;
        for r in &data.train {
            if let Some(c) = &r.caption {
                self.caption_vocab.encode(c, cfg.caption_len)?;
            }
        }
        let mut model = DiffusionModel::new(cfg.dit_config(self.caption_vocab.len()), &mut rng)?;
        let mut trainer = DiffusionTrainer::new(
            &model,
            cfg.diff_steps,
            cfg.diff_lr,
            cfg.diff_lr * 0.05,
            cfg.weight_decay,
            cfg.clip,
            cfg.p_null,
            cfg.frozen_captions,
        );
        let mut order: Vec<usize> = (0..latents.len()).collect();
        let mut cursor = order.len();
        let mut losses = Vec::with_capacity(cfg.diff_steps);
        for _ in 0..cfg.diff_steps {
            let mut batch = Vec::with_capacity(cfg.diff_batch);
            while batch.len() < cfg.diff_batch.min(latents.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let i = order[cursor];
                cursor += 1;
                let caption = match &data.train[i].caption {
                    Some(c) => Some(self.caption_vocab.encode(&subsample_caption(c, cfg.caption_keep, &mut rng), cfg.caption_len)?),
                    None => None,
                };
                batch.push(TrainItem { latent: latents[i].clone(), caption });
            }
            losses.push(trainer.train_step(&mut model, &self.schedule, &batch, &mut rng)?.loss);
        }
        self.diffusion = Some(model);
        Ok(losses)
    }

    pub fn caption_embedding(&self, text: &str) -> Res<CaptionEmbedding> {
        let seq = self.caption_vocab.encode(text, self.cfg.caption_len)?;
        Ok(self.dit()?.encode_caption(&seq)?)
    }

    /// Samples one latent per prompt and decodes it.
    pub fn generate(&self, prompts: &[String], guidance: f64, steps: usize, seed: u64) -> Res<Vec<String>> {
        let dit = self.dit()?;
        let conds = prompts.iter().map(|p| self.caption_embedding(p)).collect::<Res<Vec<_>>>()?;
        let sc = self.cfg.sampler_config(guidance, steps, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut zs = Vec::with_capacity(prompts.len());
        for chunk in conds.chunks(64) {
            zs.extend(sample(dit, &self.schedule, chunk, &sc, &mut rng)?);
        }
        self.decode(&zs)
    }

    /// Candidate index chosen for each molecule, with its scores.
    pub fn retrieve(&self, smiles_text: &str, candidates: &[String], n: usize, seed: u64) -> Res<(usize, Vec<f64>)> {
        let z = self.latent_of(smiles_text)?;
        let cands = candidates.iter().map(|c| self.caption_embedding(c)).collect::<Res<Vec<_>>>()?;
        Ok(retrieve(self.dit()?, &self.schedule, &z, &cands, &RetrievalConfig { n, seed })?)
    }

    /// Edits every source toward `target`; returns decoded SMILES.
    pub fn edit(&self, sources: &[(String, String)], target: &str, ec: &EditConfig) -> Res<Vec<String>> {
        let dit = self.dit()?;
        let tgt = self.caption_embedding(target)?;
        let zs = sources.iter().map(|(s, _)| self.latent_of(s)).collect::<Res<Vec<_>>>()?;
        let srcs = sources.iter().map(|(_, c)| self.caption_embedding(c)).collect::<Res<Vec<_>>>()?;
        let jobs: Vec<EditJob> =
            zs.iter().zip(&srcs).map(|(z_src, c_src)| EditJob { z_src, c_src, c_tgt: &tgt }).collect();
        let edited = dds_edit_batch(dit, &self.schedule, &jobs, ec)?;
        self.decode(&edited)
    }

    pub fn edit_config(&self, seed: u64) -> EditConfig {
        EditConfig {
            gamma: self.cfg.edit_gamma,
            guidance: self.cfg.edit_guidance,
            iterations: self.cfg.edit_iterations,
            t_range: None,
            seed,
        }
    }

    pub fn checkpoint(&self, stage: Stage) -> Res<Checkpoint> {
        let mut c = Checkpoint::new(stage.name(), &self.cfg);
        c.meta.insert("smiles_vocab".into(), self.smiles_vocab.to_text());
        c.meta.insert("caption_vocab".into(), self.caption_vocab.to_text());
        match stage {
            Stage::PretrainEncoder => c.add_store("encoder", &self.encoder.store),
            Stage::TrainDecoder => {
                let codec = self.codec()?;
                // a jointly trained encoder belongs to the codec stage
                c.add_store("encoder", &self.encoder.store);
                let (comp, dec): (Vec<_>, Vec<_>) = codec
                    .store
                    .iter()
                    .map(|(n, t)| (n.to_string(), t.clone()))
                    .partition(|(n, _)| n.starts_with("compress"));
                c.add_section("compressor", comp);
                c.add_section("decoder", dec);
                c.meta.insert("latent_std".into(), format!("{:016x}", codec.latent_std.to_bits()));
            }
            Stage::TrainDiffusion => {
                let dit = self.dit()?;
                c.add_store("dit", &dit.dit);
                c.add_store("caption_encoder", &dit.captions);
                let betas = self.schedule.betas().to_vec();
                c.add_section("schedule", vec![("betas".into(), Tensor::new(&[betas.len()], betas).expect("sized"))]);
            }
        }
        Ok(c)
    }

    /// Rebuilds models from whichever stage checkpoints exist in `dir`.
    pub fn load(cfg: &RunConfig, dir: &Path) -> Res<Models> {
        let enc_ck = load_stage(cfg, dir, Stage::PretrainEncoder)?.ok_or_else(|| PipelineError::MissingPrerequisite {
            stage: "load".into(),
            needs: Stage::PretrainEncoder.name().into(),
        })?;
        let smiles_vocab = Vocab::from_text(enc_ck.meta("smiles_vocab")?)?;
        let caption_vocab = Vocab::from_text(enc_ck.meta("caption_vocab")?)?;
        let mut rng = stream_rng(cfg.seed, 11);
        let mut encoder = MolEncoder::new(cfg.encoder_config(smiles_vocab.len()), &mut rng)?;
        enc_ck.load_store("encoder", &mut encoder.store)?;
        let schedule = make_schedule(cfg.diffusion_t, cfg.beta_start, cfg.beta_end)?;
        let mut m = Models { cfg: cfg.clone(), smiles_vocab, caption_vocab, encoder, codec: None, diffusion: None, schedule };
        if let Some(ck) = load_stage(cfg, dir, Stage::TrainDecoder)? {
            ck.load_store("encoder", &mut m.encoder.store)?;
            let mut codec = LatentCodec::new(cfg.codec_config(m.smiles_vocab.len()), &mut rng);
            let entries: Vec<(String, Tensor)> =
                ck.section("compressor")?.iter().chain(ck.section("decoder")?).cloned().collect();
            codec
                .store
                .load(entries)
                .map_err(|e| CheckpointError::Layout { section: "decoder".into(), reason: e.to_string() })?;
            let bits = u64::from_str_radix(ck.meta("latent_std")?, 16)
                .map_err(|e| CheckpointError::Corrupt(format!("latent_std: {e}")))?;
            codec.latent_std = f64::from_bits(bits);
            m.codec = Some(codec);
            if let Some(ck) = load_stage(cfg, dir, Stage::TrainDiffusion)? {
                let mut dit = DiffusionModel::new(cfg.dit_config(m.caption_vocab.len()), &mut rng)?;
                ck.load_store("dit", &mut dit.dit)?;
                ck.load_store("caption_encoder", &mut dit.captions)?;
                let betas = ck.section("schedule")?[0].1.data().to_vec();
                m.schedule = NoiseSchedule::from_betas(betas)?;
                m.diffusion = Some(dit);
            }
        }
        Ok(m)
    }
}

fn load_stage(cfg: &RunConfig, dir: &Path, stage: Stage) -> Res<Option<Checkpoint>> {
    let path = dir.join(stage.file());
    if !path.exists() {
        return Ok(None);
    }
    let ck = Checkpoint::load(&path)?;
    ck.check_config(cfg, stage.architecture_keys())?;
    Ok(Some(ck))
}

/// Outcome of one stage run.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: Stage,
    pub path: PathBuf,
    pub losses: Vec<f64>,
    pub seconds: f64,
}

impl StageReport {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Runs one stage on top of the checkpoints already in `dir` and writes its own.
pub fn run_stage(stage: Stage, cfg: &RunConfig, data: &Dataset, dir: &Path) -> Res<StageReport> {
    let start = std::time::Instant::now();
    let missing = |needs: Stage| PipelineError::MissingPrerequisite { stage: stage.name().into(), needs: needs.name().into() };
    let (mut models, losses) = match stage {
        Stage::PretrainEncoder => {
            let mut m = Models::init(cfg, data)?;
            let l = m.pretrain_encoder(data)?;
            (m, l)
        }
        Stage::TrainDecoder => {
            if !dir.join(Stage::PretrainEncoder.file()).exists() {
                return Err(missing(Stage::PretrainEncoder));
            }
            let mut m = Models::load(cfg, dir)?;
            let l = m.train_decoder(data, false)?;
            (m, l)
        }
        Stage::TrainDiffusion => {
            for need in [Stage::PretrainEncoder, Stage::TrainDecoder] {
                if !dir.join(need.file()).exists() {
                    return Err(missing(need));
                }
            }
            let mut m = Models::load(cfg, dir)?;
            let l = m.train_diffusion(data)?;
            (m, l)
        }
    };
    models.cfg = cfg.clone();
    let path = dir.join(stage.file());
    models.checkpoint(stage)?.save(&path)?;
    Ok(StageReport { stage, path, losses, seconds: start.elapsed().as_secs_f64() })
}

/// All three stages in memory.
pub fn train_all(cfg: &RunConfig, data: &Dataset) -> Res<Models> {
    let mut m = Models::init(cfg, data)?;
    m.pretrain_encoder(data)?;
    m.train_decoder(data, false)?;
    m.train_diffusion(data)?;
    Ok(m)
}

/// Text-conditioned benchmark: one sample per held-out caption, scored
/// against the paired molecule.
pub fn benchmark(models: &Models, pairs: &[PairRecord], guidance: f64, steps: usize, seed: u64) -> Res<(MetricReport, Vec<String>)> {
    let labeled: Vec<&PairRecord> = pairs.iter().filter(|p| p.caption.is_some()).collect();
    let prompts: Vec<String> = labeled.iter().map(|p| p.caption.clone().expect("filtered")).collect();
    let out = models.generate(&prompts, guidance, steps, seed)?;
    let eval_pairs: Vec<(String, String)> =
        out.iter().zip(&labeled).map(|(g, r)| (g.clone(), r.smiles.clone())).collect();
    Ok((evaluate(&eval_pairs, &char_tokens)?, out))
}

/// Trains an ablated variant under the same budgets. `base` lends its
/// pretrained encoder and vocabularies to the no-compression variant.
pub fn run_ablation(variant: Ablation, cfg: &RunConfig, data: &Dataset, base: Option<&Models>) -> Res<(Models, MetricReport)> {
    let mut m = match (variant, base) {
        (Ablation::NoCompression, Some(b)) => {
            let mut m = b.clone();
            m.cfg.compress = false;
            m
        }
        (Ablation::NoCompression, None) => {
            let mut c = cfg.clone();
            c.compress = false;
            let mut m = Models::init(&c, data)?;
            m.pretrain_encoder(data)?;
            m
        }
        (Ablation::NoContrastive, _) => Models::init(cfg, data)?,
    };
    m.cfg.validate()?;
    m.train_decoder(data, variant == Ablation::NoContrastive)?;
    m.train_diffusion(data)?;
    let (report, _) = benchmark(&m, &data.holdout, cfg.bench_guidance, cfg.sample_steps, cfg.seed)?;
    Ok((m, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationReport {
    pub samples: usize,
    pub validity: f64,
    /// Among valid outputs.
    pub satisfaction: f64,
    pub smiles: Vec<String>,
}

pub fn generation_eval(models: &Models, prompts: &[String], guidance: f64, steps: usize, seed: u64) -> Res<GenerationReport> {
    let smiles_out = models.generate(prompts, guidance, steps, seed)?;
    let mut valid = 0;
    let mut satisfied = 0;
    for (s, p) in smiles_out.iter().zip(prompts) {
        if let Ok(g) = smiles::parse_valid(s) {
            valid += 1;
            if caption_satisfied(p, &g) {
                satisfied += 1;
            }
        }
    }
    Ok(GenerationReport {
        samples: prompts.len(),
        validity: valid as f64 / prompts.len().max(1) as f64,
        satisfaction: if valid == 0 { 0.0 } else { satisfied as f64 / valid as f64 },
        smiles: smiles_out,
    })
}

/// `k`-way retrieval accuracy: each labeled pair competes against `k - 1`
/// distinct captions drawn from the other pairs.
pub fn retrieval_accuracy(models: &Models, pairs: &[PairRecord], k: usize, n: usize, seed: u64) -> Res<f64> {
    let labeled: Vec<&PairRecord> = pairs.iter().filter(|p| p.caption.is_some()).collect();
    if labeled.is_empty() || k == 0 {
        return Err(PipelineError::Invalid("retrieval needs labeled pairs and k >= 1".into()));
    }
    let mut rng = stream_rng(seed, 20);
    let mut hits = 0;
    for (i, p) in labeled.iter().enumerate() {
        let own = p.caption.as_deref().expect("filtered");
        let mut others: Vec<&str> = labeled.iter().filter_map(|q| q.caption.as_deref()).filter(|c| *c != own).collect();
        others.sort_unstable();
        others.dedup();
        others.shuffle(&mut rng);
        let mut cands: Vec<String> = others.into_iter().take(k - 1).map(String::from).collect();
        let pos = rng.gen_range(0..=cands.len());
        cands.insert(pos, own.to_string());
        let (best, _) = models.retrieve(&p.smiles, &cands, n, seed.wrapping_add(i as u64))?;
        if best == pos {
            hits += 1;
        }
    }
    Ok(hits as f64 / labeled.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditReport {
    pub sources: usize,
    /// Valid decodes whose graph satisfies the target caption.
    pub success_rate: f64,
    pub validity: f64,
    /// Mean Tanimoto between source and valid edited outputs.
    pub mean_source_similarity: f64,
    /// Mean Tanimoto over random pairs of source molecules.
    pub random_pair_similarity: f64,
    pub edited: Vec<String>,
}

pub fn edit_eval(models: &Models, sources: &[PairRecord], target: &str, ec: &EditConfig) -> Res<EditReport> {
    let jobs: Vec<(String, String)> = sources
        .iter()
        .map(|p| (p.smiles.clone(), p.caption.clone().unwrap_or_default()))
        .collect();
    let edited = models.edit(&jobs, target, ec)?;
    let fp = |g: &MolGraph| morgan_fingerprint(g, 2, 2048);
    let src_g = graphs(sources)?;
    let (mut valid, mut success, mut sims) = (0, 0, Vec::new());
    for (s, g0) in edited.iter().zip(&src_g) {
        if let Ok(g) = smiles::parse_valid(s) {
            valid += 1;
            if caption_satisfied(target, &g) {
                success += 1;
            }
            sims.push(tanimoto(&fp(g0)?, &fp(&g)?)?);
        }
    }
    let mut rng = stream_rng(ec.seed, 21);
    let mut rand_sims = Vec::new();
    for _ in 0..500.min(src_g.len() * src_g.len()) {
        let (a, b) = (rng.gen_range(0..src_g.len()), rng.gen_range(0..src_g.len()));
        if a != b {
            rand_sims.push(tanimoto(&fp(&src_g[a])?, &fp(&src_g[b])?)?);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let n = sources.len().max(1) as f64;
    Ok(EditReport {
        sources: sources.len(),
        success_rate: success as f64 / n,
        validity: valid as f64 / n,
        mean_source_similarity: mean(&sims),
        random_pair_similarity: mean(&rand_sims),
        edited,
    })
}

/// Fraction of `mols` reconstructed exactly through encoder, compressor and greedy decoding.
pub fn reconstruction(models: &Models, mols: &[MolGraph]) -> Res<f64> {
    let mut rng = stream_rng(models.cfg.seed, 14);
    Ok(reconstruction_rate(models.codec()?, &models.encoder, &models.smiles_vocab, mols, &mut rng)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        RunConfig::parse(
            "corpus_size = 24\nholdout = 6\nsmiles_vocab = 60\ncaption_vocab = 90\nd_enc = 8\nenc_layers = 1\n\
             enc_heads = 2\nproj_dim = 8\nqueue = 16\nenc_steps = 3\nenc_batch = 4\nd_z = 4\ndec_dim = 8\n\
             dec_layers = 1\ndec_heads = 2\ncodec_steps = 3\ncodec_batch = 4\nspellings = 1\ndiffusion_t = 20\n\
             dit_blocks = 1\ndit_width = 8\ndit_heads = 2\ncaption_layers = 1\nnull_len = 2\ndiff_steps = 3\n\
             diff_batch = 4\nsample_steps = 5\nedit_iterations = 2",
        )
        .unwrap()
    }

    #[test]
    fn stages_require_prerequisites_and_are_deterministic() {
        let cfg = tiny_cfg();
        let data = Dataset::toy(&cfg);
        assert_eq!((data.train.len(), data.holdout.len()), (24, 6));
        let dir = tempfile::tempdir().unwrap();
        let err = run_stage(Stage::TrainDecoder, &cfg, &data, dir.path()).unwrap_err();
        assert!(matches!(err, PipelineError::MissingPrerequisite { ref needs, .. } if needs == "pretrain-encoder"));
        run_stage(Stage::PretrainEncoder, &cfg, &data, dir.path()).unwrap();
        assert!(matches!(
            run_stage(Stage::TrainDiffusion, &cfg, &data, dir.path()),
            Err(PipelineError::MissingPrerequisite { .. })
        ));
        let a = run_stage(Stage::TrainDecoder, &cfg, &data, dir.path()).unwrap();
        let bytes = std::fs::read(&a.path).unwrap();
        let b = run_stage(Stage::TrainDecoder, &cfg, &data, dir.path()).unwrap();
        assert_eq!(a.final_loss(), b.final_loss());
        assert_eq!(std::fs::read(&b.path).unwrap(), bytes);
        run_stage(Stage::TrainDiffusion, &cfg, &data, dir.path()).unwrap();

        let m = Models::load(&cfg, dir.path()).unwrap();
        let prompts = vec!["has 1 ring".to_string(), "contains a nitrogen atom".to_string()];
        let out = m.generate(&prompts, 5.0, 5, 1).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out, Models::load(&cfg, dir.path()).unwrap().generate(&prompts, 5.0, 5, 1).unwrap());

        // retraining with another schedule length replaces the stored one
        let mut longer = cfg.clone();
        longer.diffusion_t = 30;
        run_stage(Stage::TrainDiffusion, &longer, &data, dir.path()).unwrap();
        assert_eq!(Models::load(&longer, dir.path()).unwrap().schedule.steps(), 30);

        let mut other = cfg.clone();
        other.d_z = 2;
        assert!(matches!(Models::load(&other, dir.path()), Err(PipelineError::Checkpoint(CheckpointError::ConfigMismatch { .. }))));
        // the encoder alone does not depend on d_z
        let enc_only = tempfile::tempdir().unwrap();
        std::fs::copy(dir.path().join("encoder.ckpt"), enc_only.path().join("encoder.ckpt")).unwrap();
        run_stage(Stage::TrainDecoder, &other, &data, enc_only.path()).unwrap();
    }

    #[test]
    fn evaluation_helpers_complete_on_untrained_models() {
        let cfg = tiny_cfg();
        let data = Dataset::toy(&cfg);
        let m = train_all(&cfg, &data).unwrap();
        let (report, out) = benchmark(&m, &data.holdout, 3.5, 5, 0).unwrap();
        assert_eq!(report.samples, 6);
        assert_eq!(out.len(), 6);
        let g = generation_eval(&m, &["has 1 ring".to_string()], 5.0, 5, 0).unwrap();
        assert!((0.0..=1.0).contains(&g.validity));
        let acc = retrieval_accuracy(&m, &data.holdout, 4, 1, 0).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let e = edit_eval(&m, &data.holdout[..3], "contains a nitrogen atom", &m.edit_config(0)).unwrap();
        assert_eq!(e.edited.len(), 3);
        let r = reconstruction(&m, &data.train_graphs().unwrap()[..5]).unwrap();
        assert!((0.0..=1.0).contains(&r));
        for v in [Ablation::NoCompression, Ablation::NoContrastive] {
            let (am, rep) = run_ablation(v, &cfg, &data, Some(&m)).unwrap();
            assert_eq!(rep.samples, 6);
            assert_eq!(am.cfg.compress, v != Ablation::NoCompression);
        }
    }
}
